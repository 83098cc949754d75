//! Baseline matching losses: gradient matching (DC), gradient matching under
//! siamese augmentation (DSA) and distribution matching (DM), plus the inner
//! model updates DC and DSA interleave with pixel steps.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{self, AugmentConfig, SiameseLog};
use crate::autodiff::{grad, Graph, Tensor};
use crate::error::{Error, Result};
use crate::models::{forward_with, ArchitectureSpec, ModelCheckpoint};
use crate::train::{cross_entropy, loss_and_grads, Sgd};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MatcherKind {
    Dc,
    Dsa,
    Dm,
}

impl MatcherKind {
    pub const ALL: [MatcherKind; 3] = [MatcherKind::Dc, MatcherKind::Dsa, MatcherKind::Dm];

    pub fn id(self) -> &'static str {
        match self {
            MatcherKind::Dc => "dc",
            MatcherKind::Dsa => "dsa",
            MatcherKind::Dm => "dm",
        }
    }
}

impl std::fmt::Display for MatcherKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.id())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MatcherConfig {
    pub kind: MatcherKind,
    /// Outer iterations K.
    pub iterations: usize,
    /// The matching model is re-initialized every `reinit_every` outer
    /// iterations. DM ignores it and draws a fresh embedder every iteration.
    pub reinit_every: usize,
    /// Inner SGD steps on the synthetic set after each outer step (DC/DSA).
    pub inner_steps: usize,
    pub inner_lr: f64,
    pub inner_momentum: f64,
    /// Real images drawn per class for each matching step.
    pub real_batch: usize,
    /// Match class by class and sum, or match the whole sets at once.
    pub per_class: bool,
    /// Transform family for DSA.
    pub augment: AugmentConfig,
}

impl Default for MatcherConfig {
    fn default() -> Self {
        MatcherConfig {
            kind: MatcherKind::Dc,
            iterations: 500,
            reinit_every: 50,
            inner_steps: 10,
            inner_lr: 0.01,
            inner_momentum: 0.5,
            real_batch: 64,
            per_class: true,
            augment: AugmentConfig::default(),
        }
    }
}

impl MatcherConfig {
    pub fn new(kind: MatcherKind) -> Self {
        MatcherConfig {
            kind,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::invalid("iterations", "K must be at least 1"));
        }
        if self.reinit_every == 0 {
            return Err(Error::invalid("reinit_every", "R must be at least 1"));
        }
        if self.real_batch == 0 {
            return Err(Error::invalid("real_batch", "must be positive"));
        }
        if !(self.inner_lr.is_finite() && self.inner_lr >= 0.0) {
            return Err(Error::invalid("inner_lr", format!("{}", self.inner_lr)));
        }
        if self.kind == MatcherKind::Dsa && self.augment.enabled.is_empty() {
            return Err(Error::invalid("augment", "dsa needs at least one transform"));
        }
        Ok(())
    }
}

/// Sum over tensors of `Σ_rows (1 − cos)`, with each tensor viewed as
/// `(output nodes, rest)`. One-dimensional tensors (biases) count as a single
/// row. A row where either side is all zeros contributes exactly 1.
pub fn layerwise_cosine_distance(a: &[(String, Tensor)], b: &[(String, Tensor)]) -> Result<Tensor> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::invalid(
            "gradients",
            format!("{} tensors against {}", a.len(), b.len()),
        ));
    }
    let mut total: Option<Tensor> = None;
    for ((na, ta), (nb, tb)) in a.iter().zip(b) {
        if na != nb {
            return Err(Error::invalid("gradients", format!("name {na} against {nb}")));
        }
        if ta.shape() != tb.shape() {
            return Err(Error::ShapeMismatch {
                op: "layerwise_cosine_distance",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let rows = if ta.ndim() >= 2 { ta.shape()[0] } else { 1 };
        let cols = ta.len() / rows.max(1);
        let x = ta.reshape(&[rows, cols])?;
        let y = tb.reshape(&[rows, cols])?;
        let dot = x.mul(&y)?.row_sums()?;
        let prod = x.mul(&x)?.row_sums()?.mul(&y.mul(&y)?.row_sums()?)?;
        let denom = prod.add(&prod.zero_mask())?.sqrt()?;
        let term = dot.div(&denom)?.sum()?.neg()?.add_scalar(rows as f64)?;
        total = Some(match total {
            None => term,
            Some(t) => t.add(&term)?,
        });
    }
    Ok(total.expect("nonempty"))
}

/// Synthetic and real images compared by one matching term.
#[derive(Clone, Debug)]
pub struct MatchPair {
    /// `None` when whole sets are matched.
    pub class: Option<usize>,
    pub syn: Tensor,
    pub syn_labels: Vec<usize>,
    pub real: Tensor,
    pub real_labels: Vec<usize>,
}

/// Splits the synthetic set by class and pairs each class with its real
/// batch (`real[c]` holds class `c`). With `per_class` off, a single pair
/// covers all classes.
pub fn class_pairs(syn: &Tensor, syn_labels: &[usize], real: &[Tensor], per_class: bool) -> Result<Vec<MatchPair>> {
    if syn.ndim() == 0 || syn.shape()[0] != syn_labels.len() {
        return Err(Error::invalid("synthetic", "label count does not match images"));
    }
    let mut pairs = Vec::with_capacity(real.len());
    for (c, batch) in real.iter().enumerate() {
        let rows: Vec<usize> = (0..syn_labels.len()).filter(|&i| syn_labels[i] == c).collect();
        if rows.is_empty() {
            return Err(Error::invalid("synthetic", format!("no images of class {c}")));
        }
        pairs.push(MatchPair {
            class: Some(c),
            syn: syn.select_rows(&rows)?,
            syn_labels: vec![c; rows.len()],
            real: batch.clone(),
            real_labels: vec![c; batch.shape()[0]],
        });
    }
    if per_class {
        return Ok(pairs);
    }
    let real_parts: Vec<&Tensor> = real.iter().collect();
    Ok(vec![MatchPair {
        class: None,
        syn: syn.clone(),
        syn_labels: syn_labels.to_vec(),
        real: Tensor::concat(&real_parts)?,
        real_labels: pairs.iter().flat_map(|p| p.real_labels.iter().copied()).collect(),
    }])
}

/// Loss applied to `(logits, labels)` when computing training gradients.
pub type LossFn<'a> = &'a dyn Fn(&Tensor, &[usize]) -> Result<Tensor>;

/// The default inner loss.
pub fn default_loss(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    cross_entropy(logits, labels)
}

fn named(model: &ModelCheckpoint, grads: Vec<Tensor>) -> Vec<(String, Tensor)> {
    model.param_names().into_iter().zip(grads).collect()
}

fn checked_loss(spec: &ArchitectureSpec, params: &[Tensor], x: &Tensor, y: &[usize], loss: LossFn, class: Option<usize>) -> Result<Tensor> {
    let l = loss(&forward_with(spec, params, x)?.logits, y)?;
    if !l.all_finite() {
        return Err(Error::NonFinite {
            stage: "matching",
            step: class.unwrap_or(0),
            detail: format!("inner loss {:?}", l.data()),
        });
    }
    Ok(l)
}

/// Gradient-matching term for one pair. The synthetic gradient keeps its
/// graph so the distance stays differentiable in the synthetic pixels.
fn gradient_term(
    g: &Graph,
    model: &ModelCheckpoint,
    syn: &Tensor,
    real: &Tensor,
    pair: &MatchPair,
    loss: LossFn,
) -> Result<Tensor> {
    let spec = model.spec();
    let gs = {
        let params: Vec<Tensor> = model.param_tensors().iter().map(|t| g.leaf(t)).collect();
        let refs: Vec<&Tensor> = params.iter().collect();
        let l = checked_loss(spec, &params, syn, &pair.syn_labels, loss, pair.class)?;
        grad(&l, &refs, true)?
    };
    let gt = {
        let g = Graph::new();
        let params: Vec<Tensor> = model.param_tensors().iter().map(|t| g.leaf(t)).collect();
        let refs: Vec<&Tensor> = params.iter().collect();
        let l = checked_loss(spec, &params, &real.detach(), &pair.real_labels, loss, pair.class)?;
        grad(&l, &refs, false)?.iter().map(Tensor::detach).collect()
    };
    layerwise_cosine_distance(&named(model, gs), &named(model, gt))
}

/// The graph the synthetic images live on, or a fresh one for detached
/// inputs.
fn shared_graph(pairs: &[MatchPair]) -> Graph {
    pairs.iter().find_map(|p| p.syn.graph().cloned()).unwrap_or_default()
}

fn sum_terms(terms: impl IntoIterator<Item = Result<Tensor>>) -> Result<Tensor> {
    let mut total: Option<Tensor> = None;
    for t in terms {
        let t = t?;
        total = Some(match total {
            None => t,
            Some(acc) => acc.add(&t)?,
        });
    }
    total.ok_or_else(|| Error::invalid("pairs", "nothing to match"))
}

/// DC: summed layerwise cosine distance between the training gradients on
/// the synthetic and the real side of every pair.
pub fn dc_loss(model: &ModelCheckpoint, pairs: &[MatchPair], loss: LossFn) -> Result<Tensor> {
    let g = shared_graph(pairs);
    sum_terms(pairs.iter().map(|p| gradient_term(&g, model, &p.syn, &p.real, p, loss)))
}

/// DSA: [`dc_loss`] with one augmentation sampled per pair and applied to
/// both sides. Every application is recorded when `log` is given.
pub fn dsa_loss(
    model: &ModelCheckpoint,
    pairs: &[MatchPair],
    loss: LossFn,
    family: &AugmentConfig,
    rng: &mut impl Rng,
    mut log: Option<&mut SiameseLog>,
) -> Result<Tensor> {
    let [_, h, w] = model.spec().input;
    let g = shared_graph(pairs);
    sum_terms(pairs.iter().map(|p| {
        let params = augment::sample_params(family, (h, w), rng)?;
        let (syn, real) = augment::apply_siamese(&params, &p.syn, &p.real, p.class.unwrap_or(0), log.as_deref_mut())?;
        gradient_term(&g, model, &syn, &real, p, loss)
    }))
}

fn column_mean(x: &Tensor) -> Result<Tensor> {
    let n = x.shape()[0];
    Tensor::ones(&[1, n]).matmul(x)?.mul_scalar(1.0 / n as f64)
}

/// DM: summed squared distance between mean embedder features of the two
/// sides of every pair.
pub fn dm_loss(embedder: &ModelCheckpoint, pairs: &[MatchPair]) -> Result<Tensor> {
    sum_terms(pairs.iter().map(|p| {
        let fs = column_mean(&embedder.forward(&p.syn)?.features)?;
        let ft = column_mean(&embedder.forward(&p.real.detach())?.features)?;
        let d = fs.sub(&ft)?;
        d.mul(&d)?.sum()
    }))
}

/// Full-batch SGD on the (detached) synthetic set.
pub fn inner_update(
    model: &ModelCheckpoint,
    syn: &Tensor,
    labels: &[usize],
    steps: usize,
    lr: f64,
    momentum: f64,
) -> Result<ModelCheckpoint> {
    let images = syn.detach();
    let mut model = model.clone();
    let mut opt = Sgd::new(lr, momentum, 0.0);
    for step in 0..steps {
        let (l, grads) = loss_and_grads(&model, &images, labels)?;
        if !l.is_finite() {
            return Err(Error::NonFinite {
                stage: "inner_update",
                step,
                detail: format!("loss {l}"),
            });
        }
        model = model.with_values(opt.step(&model.param_tensors(), &grads)?)?;
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn named_vec(parts: &[(&str, &[usize], Vec<f64>)]) -> Vec<(String, Tensor)> {
        parts
            .iter()
            .map(|(n, s, d)| (n.to_string(), Tensor::new(s, d.clone()).unwrap()))
            .collect()
    }

    #[test]
    fn cosine_distance_anchors() {
        let a = named_vec(&[("w", &[2, 3], vec![1., 2., 3., -1., 0.5, 2.]), ("b", &[2], vec![0.3, -0.7])]);
        let neg: Vec<(String, Tensor)> = a.iter().map(|(n, t)| (n.clone(), t.neg().unwrap())).collect();
        let same = layerwise_cosine_distance(&a, &a).unwrap().item().unwrap();
        assert!(same.abs() < 1e-15);
        // three rows: two weight rows and one bias row
        let anti = layerwise_cosine_distance(&a, &neg).unwrap().item().unwrap();
        assert!((anti - 6.0).abs() < 1e-14);
        let zeros = named_vec(&[("w", &[2, 3], vec![0.; 6]), ("b", &[2], vec![0.; 2])]);
        assert_eq!(layerwise_cosine_distance(&a, &zeros).unwrap().item().unwrap(), 3.0);
    }

    #[test]
    fn cosine_distance_rejects_mismatch() {
        let a = named_vec(&[("w", &[2, 2], vec![1.; 4])]);
        let b = named_vec(&[("v", &[2, 2], vec![1.; 4])]);
        let c = named_vec(&[("w", &[4], vec![1.; 4])]);
        assert!(layerwise_cosine_distance(&a, &b).is_err());
        assert!(matches!(layerwise_cosine_distance(&a, &c), Err(Error::ShapeMismatch { .. })));
        assert!(layerwise_cosine_distance(&a, &[]).is_err());
    }

    #[test]
    fn config_validation() {
        MatcherConfig::default().validate().unwrap();
        let mut c = MatcherConfig::new(MatcherKind::Dsa);
        c.reinit_every = 0;
        assert!(c.validate().is_err());
        let mut c = MatcherConfig::new(MatcherKind::Dsa);
        c.augment.enabled.clear();
        assert!(c.validate().is_err());
    }
}
