mod common;

use std::rc::Rc;

use common::{central_difference, random_away_from_zero, random_tensor, rel_err, rng};
use ptm_distill::autodiff::{grad, Graph, Tensor, NO_SOURCE};
use ptm_distill::Error;

/// Checks d/dx sum(op(x) ⊙ r) against central differences for a random
/// projection `r`.
fn gradcheck(x: &Tensor, op: impl Fn(&Tensor) -> Tensor, tol: f64, seed: u64) {
    let probe = op(x);
    let r = random_tensor(probe.shape(), -1.0, 1.0, &mut rng(seed));
    let scalar = |t: &Tensor| op(t).mul(&r).unwrap().sum().unwrap();

    let g = Graph::new();
    let leaf = g.leaf(x);
    let analytic = grad(&scalar(&leaf), &[&leaf], false).unwrap().remove(0);

    let shape = x.shape().to_vec();
    let numeric = central_difference(
        |v| scalar(&Tensor::new(&shape, v.to_vec()).unwrap()).item().unwrap(),
        x.data(),
        1e-5,
    );
    let err = rel_err(analytic.data(), &numeric);
    assert!(err < tol, "relative error {err:e} ≥ {tol:e}");
}

#[test]
fn elementwise_primitives_match_finite_differences() {
    let mut r = rng(1);
    let a = random_away_from_zero(&[3, 4], &mut r);
    let b = random_away_from_zero(&[3, 4], &mut r);
    let pos = random_tensor(&[3, 4], 0.5, 2.0, &mut r);
    gradcheck(&a, |x| x.add(&b).unwrap(), 1e-6, 10);
    gradcheck(&a, |x| x.sub(&b).unwrap(), 1e-6, 11);
    gradcheck(&a, |x| b.sub(x).unwrap(), 1e-6, 12);
    gradcheck(&a, |x| x.mul(&b).unwrap(), 1e-6, 13);
    gradcheck(&a, |x| x.mul(x).unwrap(), 1e-6, 14);
    gradcheck(&a, |x| x.div(&pos).unwrap(), 1e-6, 15);
    gradcheck(&pos, |x| a.div(x).unwrap(), 1e-6, 16);
    gradcheck(&a, |x| x.neg().unwrap(), 1e-6, 17);
    gradcheck(&a, |x| x.add_scalar(0.3).unwrap().mul_scalar(-2.5).unwrap(), 1e-6, 18);
    gradcheck(&a, |x| x.exp().unwrap(), 1e-6, 19);
    gradcheck(&pos, |x| x.ln().unwrap(), 1e-6, 20);
    gradcheck(&pos, |x| x.sqrt().unwrap(), 1e-6, 21);
    gradcheck(&a, |x| x.relu().unwrap(), 1e-6, 22);
    gradcheck(&a, |x| x.mul(&Tensor::scalar(1.7)).unwrap(), 1e-6, 23);
}

#[test]
fn structural_primitives_match_finite_differences() {
    let mut r = rng(2);
    let a = random_away_from_zero(&[3, 4], &mut r);
    let m = random_away_from_zero(&[4, 5], &mut r);
    let left = random_away_from_zero(&[2, 3], &mut r);
    gradcheck(&a, |x| x.matmul(&m).unwrap(), 1e-6, 30);
    gradcheck(&a, |x| left.matmul(x).unwrap(), 1e-6, 31);
    gradcheck(&a, |x| x.transpose().unwrap(), 1e-6, 32);
    gradcheck(&a, |x| x.sum().unwrap(), 1e-6, 33);
    gradcheck(&a, |x| x.mean().unwrap(), 1e-6, 34);
    gradcheck(&a, |x| x.reshape(&[2, 6]).unwrap(), 1e-6, 35);
    gradcheck(&a, |x| Tensor::concat(&[x, &a, x]).unwrap(), 1e-6, 36);
    gradcheck(&a, |x| x.select_rows(&[2, 0, 2]).unwrap(), 1e-6, 37);
    gradcheck(&a, |x| x.log_softmax().unwrap(), 1e-6, 38);
    gradcheck(&a, |x| x.softmax().unwrap(), 1e-6, 39);
    gradcheck(&a, |x| x.l2_norm().unwrap(), 1e-6, 40);
    let c = random_away_from_zero(&[3, 4], &mut r);
    gradcheck(&a, |x| x.cosine_similarity(&c).unwrap(), 1e-6, 41);
    gradcheck(&a, |x| x.normalize_rows().unwrap(), 1e-6, 42);
    gradcheck(&a, |x| x.row_sums().unwrap().repeat_cols(3).unwrap(), 1e-6, 43);
    let idx: Rc<[usize]> = vec![3, NO_SOURCE, 0, 11, 3].into();
    gradcheck(&a, |x| x.gather(idx.clone(), &[5]).unwrap(), 1e-6, 44);
    let spread: Rc<[usize]> = (0..12).map(|i| if i == 5 { NO_SOURCE } else { (i * 5) % 7 }).collect();
    gradcheck(&a, |x| x.reshape(&[12]).unwrap().scatter_add(spread.clone(), &[7]).unwrap(), 1e-6, 45);
}

#[test]
fn image_primitives_match_finite_differences() {
    let mut r = rng(3);
    let x = random_away_from_zero(&[2, 2, 5, 6], &mut r);
    let w = random_away_from_zero(&[3, 2, 3, 3], &mut r);
    let bias = random_away_from_zero(&[2], &mut r);
    for (stride, pad) in [(1, 0), (1, 1), (2, 1)] {
        gradcheck(&x, |t| t.conv2d(&w, stride, pad).unwrap(), 1e-6, 50);
        gradcheck(&w, |t| x.conv2d(t, stride, pad).unwrap(), 1e-6, 51);
    }
    gradcheck(&x, |t| t.avg_pool2d(2).unwrap(), 1e-6, 52);
    gradcheck(&x, |t| t.max_pool2d(2).unwrap(), 1e-6, 53);
    gradcheck(&x, |t| t.add_bias(&bias).unwrap(), 1e-6, 54);
    gradcheck(&bias, |b| x.add_bias(b).unwrap(), 1e-6, 55);
    gradcheck(&x, |t| t.reduce_channel().unwrap(), 1e-6, 56);
}

#[test]
fn square_gradient_and_cubic_hessian() {
    let g = Graph::new();
    let x = g.leaf(&Tensor::vector(&[1.0, 2.0, 3.0]));
    let y = x.mul(&x).unwrap().sum().unwrap();
    assert_eq!(grad(&y, &[&x], false).unwrap()[0].data(), &[2.0, 4.0, 6.0]);

    let g = Graph::new();
    let x = g.leaf(&Tensor::vector(&[1.0, 2.0]));
    let cube = x.mul(&x).unwrap().mul(&x).unwrap().sum().unwrap();
    let dx = grad(&cube, &[&x], true).unwrap().remove(0);
    assert!(dx.is_attached());
    let u = Tensor::vector(&[1.0, 1.0]);
    let hvp = grad(&dx.dot(&u).unwrap(), &[&x], false).unwrap().remove(0);
    assert_eq!(hvp.data(), &[6.0, 12.0]);
}

/// Hessian-vector products through grad-of-grad against finite differences of
/// the gradient, on a function that exercises conv, pooling, softmax and norms.
#[test]
fn hessian_vector_product_matches_gradient_differences() {
    let mut r = rng(4);
    let x0 = random_tensor(&[1, 1, 4, 4], -1.0, 1.0, &mut r);
    let w = random_tensor(&[2, 1, 3, 3], -1.0, 1.0, &mut r);
    let u = random_tensor(&[1, 1, 4, 4], -1.0, 1.0, &mut r);
    let f = |x: &Tensor| -> Tensor {
        let h = x.conv2d(&w, 1, 1).unwrap().exp().unwrap().avg_pool2d(2).unwrap();
        let logits = h.reshape(&[2, 4]).unwrap();
        let ls = logits.log_softmax().unwrap().sum().unwrap();
        ls.add(&x.l2_norm().unwrap()).unwrap()
    };
    let gradient_at = |v: &[f64]| -> Vec<f64> {
        let g = Graph::new();
        let x = g.leaf(&Tensor::new(&[1, 1, 4, 4], v.to_vec()).unwrap());
        grad(&f(&x), &[&x], false).unwrap()[0].to_vec()
    };

    let g = Graph::new();
    let x = g.leaf(&x0);
    let dx = grad(&f(&x), &[&x], true).unwrap().remove(0);
    let hvp = grad(&dx.dot(&u).unwrap(), &[&x], false).unwrap().remove(0);

    let h = 1e-5;
    let plus: Vec<f64> = x0.data().iter().zip(u.data()).map(|(a, b)| a + h * b).collect();
    let minus: Vec<f64> = x0.data().iter().zip(u.data()).map(|(a, b)| a - h * b).collect();
    let numeric: Vec<f64> = gradient_at(&plus)
        .iter()
        .zip(gradient_at(&minus))
        .map(|(p, m)| (p - m) / (2.0 * h))
        .collect();
    let err = rel_err(hvp.data(), &numeric);
    assert!(err < 1e-4, "hvp relative error {err:e}");
}

#[test]
fn second_order_through_conv_adjoints() {
    // d/dx of a function of dL/dw exercises conv2d_grad_weight's backward.
    let mut r = rng(5);
    let x0 = random_tensor(&[2, 1, 4, 4], -1.0, 1.0, &mut r);
    let w = random_tensor(&[1, 1, 3, 3], -1.0, 1.0, &mut r);
    let target = random_tensor(&[1, 1, 3, 3], -1.0, 1.0, &mut r);
    let objective = |x: &Tensor, create: bool| -> (Tensor, Option<Tensor>) {
        let g = x.graph().cloned().unwrap_or_default();
        let wl = g.leaf(&w);
        let inner = x.conv2d(&wl, 1, 1).unwrap().relu().unwrap().mul(x).unwrap();
        let inner = inner.reshape(&[2, 1, 4, 4]).unwrap().conv2d(&wl, 1, 0).unwrap().sum().unwrap();
        let gw = grad(&inner, &[&wl], true).unwrap().remove(0);
        let d = gw.sub(&target).unwrap();
        let outer = d.mul(&d).unwrap().sum().unwrap();
        let gx = create.then(|| grad(&outer, &[x], false).unwrap().remove(0));
        (outer, gx)
    };
    let g = Graph::new();
    let x = g.leaf(&x0);
    let (_, analytic) = objective(&x, true);
    let numeric = central_difference(
        |v| {
            let g = Graph::new();
            let x = g.leaf(&Tensor::new(&[2, 1, 4, 4], v.to_vec()).unwrap());
            objective(&x, false).0.item().unwrap()
        },
        x0.data(),
        1e-5,
    );
    let err = rel_err(analytic.unwrap().data(), &numeric);
    assert!(err < 1e-6, "relative error {err:e}");
}

#[test]
fn forward_examples() {
    let v = Tensor::vector(&[0.3, -1.2, 4.0]);
    assert!((v.cosine_similarity(&v).unwrap().item().unwrap() - 1.0).abs() < 1e-15);
    assert_eq!(Tensor::vector(&[-1.0, 0.0, 2.0]).relu().unwrap().data(), &[0.0, 0.0, 2.0]);
    let out = Tensor::ones(&[1, 1, 4, 4]).conv2d(&Tensor::ones(&[1, 1, 3, 3]), 1, 0).unwrap();
    assert_eq!(out.shape(), &[1, 1, 2, 2]);
    assert_eq!(out.data(), &[9.0; 4]);
}

#[test]
fn shape_mismatch_reports_both_shapes() {
    let err = Tensor::zeros(&[2, 3]).add(&Tensor::zeros(&[3, 2])).unwrap_err();
    match err {
        Error::ShapeMismatch { lhs, rhs, .. } => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![3, 2]);
        }
        other => panic!("unexpected {other:?}"),
    }
    assert!(Tensor::zeros(&[2, 3]).matmul(&Tensor::zeros(&[2, 3])).is_err());
    let msg = Tensor::zeros(&[4]).mul(&Tensor::zeros(&[5])).unwrap_err().to_string();
    assert!(msg.contains("[4]") && msg.contains("[5]"), "{msg}");
}

#[test]
fn grad_error_paths() {
    let g = Graph::new();
    let x = g.leaf(&Tensor::vector(&[1.0, 2.0]));
    let y = x.mul_scalar(2.0).unwrap();
    assert!(matches!(grad(&y, &[&x], false), Err(Error::NonScalarOutput(_))));
    assert!(matches!(grad(&Tensor::scalar(1.0), &[&x], false), Err(Error::Detached)));

    let stranger = Tensor::vector(&[5.0, 6.0, 7.0]);
    let other_graph = Graph::new().leaf(&stranger);
    let s = y.sum().unwrap();
    let out = grad(&s, &[&x, &stranger, &other_graph], false).unwrap();
    assert_eq!(out[0].data(), &[2.0, 2.0]);
    assert_eq!(out[1].data(), &[0.0; 3]);
    assert_eq!(out[2].data(), &[0.0; 3]);
    assert_eq!(g.warnings().len(), 2);

    // same graph, but the output does not depend on it
    let unused = g.leaf(&Tensor::vector(&[1.0]));
    let s2 = y.sum().unwrap().add(&Tensor::scalar(0.0)).unwrap();
    let out = grad(&s2, &[&unused], false).unwrap();
    assert_eq!(out[0].data(), &[0.0]);
    assert_eq!(g.warnings().len(), 3);
}

#[test]
fn graphs_replay_bit_exactly_and_runs_are_deterministic() {
    let run = || {
        let mut r = rng(9);
        let g = Graph::new();
        let x = g.leaf(&random_tensor(&[2, 1, 6, 6], -1.0, 1.0, &mut r));
        let w = g.leaf(&random_tensor(&[3, 1, 3, 3], -1.0, 1.0, &mut r));
        let h = x.conv2d(&w, 1, 1).unwrap().relu().unwrap().max_pool2d(2).unwrap();
        let logits = h.reshape(&[2, 27]).unwrap();
        let loss = logits.log_softmax().unwrap().mean().unwrap();
        let gw = grad(&loss, &[&w], true).unwrap().remove(0);
        let gx = grad(&gw.l2_norm().unwrap(), &[&x], false).unwrap().remove(0);
        assert!(g.replay_matches().unwrap());
        (loss.item().unwrap().to_bits(), gx.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
    };
    assert_eq!(run(), run());
}

#[test]
fn max_pool_tie_gradient_goes_to_first_element() {
    let g = Graph::new();
    let x = g.leaf(&Tensor::new(&[1, 1, 2, 2], vec![1.0, 1.0, 0.5, 1.0]).unwrap());
    let y = x.max_pool2d(2).unwrap().sum().unwrap();
    let gx = grad(&y, &[&x], false).unwrap().remove(0);
    assert_eq!(gx.data(), &[1.0, 0.0, 0.0, 0.0]);
}
