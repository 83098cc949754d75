use std::cell::RefCell;
use std::collections::HashSet;
use std::rc::Rc;

use super::kernels::ConvGeom;
use super::tensor::{NodeRef, Tensor};
use crate::error::{Error, Result};

/// Index sentinel used by gather/scatter for "no source element" (reads zero).
pub const NO_SOURCE: usize = usize::MAX;

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf,
    Constant,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    AddScalar(f64),
    MulScalar(f64),
    Exp,
    Log,
    Sqrt,
    Relu,
    Matmul,
    Sum,
    Expand,
    Reshape,
    Gather(Rc<[usize]>),
    ScatterAdd(Rc<[usize]>),
    Conv2d(ConvGeom),
    Conv2dGradInput(ConvGeom),
    Conv2dGradWeight(ConvGeom),
    AvgPool(usize),
    AvgPoolAdjoint(usize),
    BroadcastChannel,
    ReduceChannel,
    Concat,
}

pub(crate) struct Node {
    op: Op,
    inputs: Vec<usize>,
    shape: Rc<[usize]>,
    value: Rc<Vec<f64>>,
}

#[derive(Default)]
struct GraphInner {
    nodes: Vec<Node>,
    warnings: Vec<String>,
}

/// Append-only record of operations.
///
/// A graph lives for one optimization step: leaves are registered with
/// [`Graph::leaf`], every op on attached tensors appends a node, and the
/// whole thing is dropped once gradients have been read out.
#[derive(Clone, Default)]
pub struct Graph(Rc<RefCell<GraphInner>>);

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a copy of `t` as a differentiable leaf of this graph.
    pub fn leaf(&self, t: &Tensor) -> Tensor {
        let id = self.push(Op::Leaf, Vec::new(), t.shape.clone(), t.data.clone());
        Tensor {
            shape: t.shape.clone(),
            data: t.data.clone(),
            node: Some(NodeRef {
                graph: self.clone(),
                id,
            }),
        }
    }

    pub fn len(&self) -> usize {
        self.0.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Warnings raised by [`grad`] calls on this graph, oldest first.
    pub fn warnings(&self) -> Vec<String> {
        self.0.borrow().warnings.clone()
    }

    pub(crate) fn same(&self, other: &Graph) -> bool {
        Rc::ptr_eq(&self.0, &other.0)
    }

    pub(crate) fn push(&self, op: Op, inputs: Vec<usize>, shape: Rc<[usize]>, value: Rc<Vec<f64>>) -> usize {
        let mut g = self.0.borrow_mut();
        debug_assert!(inputs.iter().all(|&i| i < g.nodes.len()));
        g.nodes.push(Node {
            op,
            inputs,
            shape,
            value,
        });
        g.nodes.len() - 1
    }

    fn warn(&self, msg: String) {
        log::warn!("{msg}");
        self.0.borrow_mut().warnings.push(msg);
    }

    fn node_tensor(&self, id: usize, attach: bool) -> Tensor {
        let g = self.0.borrow();
        let n = &g.nodes[id];
        Tensor {
            shape: n.shape.clone(),
            data: n.value.clone(),
            node: attach.then(|| NodeRef {
                graph: self.clone(),
                id,
            }),
        }
    }

    /// Re-executes every recorded op from its recorded inputs and reports
    /// whether each result matches the stored value bit for bit.
    pub fn replay_matches(&self) -> Result<bool> {
        let len = self.len();
        for id in 0..len {
            let (op, inputs) = {
                let g = self.0.borrow();
                (g.nodes[id].op.clone(), g.nodes[id].inputs.clone())
            };
            if matches!(op, Op::Leaf | Op::Constant) {
                continue;
            }
            let args: Vec<Tensor> = inputs.iter().map(|&i| self.node_tensor(i, false)).collect();
            let stored = self.node_tensor(id, false);
            let again = forward(&op, &args, stored.shape())?;
            let same = again.shape() == stored.shape()
                && again
                    .data()
                    .iter()
                    .zip(stored.data())
                    .all(|(a, b)| a.to_bits() == b.to_bits());
            if !same {
                return Ok(false);
            }
        }
        Ok(true)
    }
}

/// Re-runs a single op on detached arguments.
fn forward(op: &Op, a: &[Tensor], out_shape: &[usize]) -> Result<Tensor> {
    Ok(match op {
        Op::Leaf | Op::Constant => unreachable!("leaves are not replayed"),
        Op::Add => a[0].add(&a[1])?,
        Op::Sub => a[0].sub(&a[1])?,
        Op::Mul => a[0].mul(&a[1])?,
        Op::Div => a[0].div(&a[1])?,
        Op::Neg => a[0].neg()?,
        Op::AddScalar(c) => a[0].add_scalar(*c)?,
        Op::MulScalar(c) => a[0].mul_scalar(*c)?,
        Op::Exp => a[0].exp()?,
        Op::Log => a[0].ln()?,
        Op::Sqrt => a[0].sqrt()?,
        Op::Relu => a[0].relu()?,
        Op::Matmul => a[0].matmul(&a[1])?,
        Op::Sum => a[0].sum()?,
        Op::Expand => a[0].expand(out_shape)?,
        Op::Reshape => a[0].reshape(out_shape)?,
        Op::Gather(idx) => a[0].gather(idx.clone(), out_shape)?,
        Op::ScatterAdd(idx) => a[0].scatter_add(idx.clone(), out_shape)?,
        Op::Conv2d(g) => a[0].conv2d_geom(&a[1], *g)?,
        Op::Conv2dGradInput(g) => a[0].conv2d_grad_input(&a[1], *g)?,
        Op::Conv2dGradWeight(g) => a[0].conv2d_grad_weight(&a[1], *g)?,
        Op::AvgPool(k) => a[0].avg_pool2d(*k)?,
        Op::AvgPoolAdjoint(k) => a[0].avg_pool2d_adjoint(*k, out_shape)?,
        Op::BroadcastChannel => a[0].broadcast_channel(out_shape)?,
        Op::ReduceChannel => a[0].reduce_channel()?,
        Op::Concat => {
            let refs: Vec<&Tensor> = a.iter().collect();
            Tensor::concat(&refs)?
        }
    })
}

/// Local derivative rules. Each returns one optional gradient per input;
/// `needs[i] == false` lets a rule skip work for input `i`.
fn backward(op: &Op, x: &[Tensor], out: &Tensor, g: &Tensor, needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
    let want = |i: usize| needs.get(i).copied().unwrap_or(false);
    let one = |t: Result<Tensor>| t.map(Some);
    Ok(match op {
        Op::Leaf | Op::Constant => Vec::new(),
        Op::Add => vec![Some(g.clone()), Some(g.clone())],
        Op::Sub => vec![Some(g.clone()), if want(1) { one(g.neg())? } else { None }],
        Op::Mul => vec![
            if want(0) { one(g.mul(&x[1]))? } else { None },
            if want(1) { one(g.mul(&x[0]))? } else { None },
        ],
        Op::Div => {
            let ga = g.div(&x[1])?;
            let gb = if want(1) { one(ga.mul(out)?.neg())? } else { None };
            vec![Some(ga), gb]
        }
        Op::Neg => vec![one(g.neg())?],
        Op::AddScalar(_) => vec![Some(g.clone())],
        Op::MulScalar(c) => vec![one(g.mul_scalar(*c))?],
        Op::Exp => vec![one(g.mul(out))?],
        Op::Log => vec![one(g.div(&x[0]))?],
        Op::Sqrt => vec![one(g.mul_scalar(0.5)?.div(out))?],
        Op::Relu => {
            let mask: Vec<f64> = x[0].data().iter().map(|&v| if v > 0.0 { 1.0 } else { 0.0 }).collect();
            let mask = Tensor::from_parts(x[0].shape.clone(), mask.into());
            vec![one(g.mul(&mask))?]
        }
        Op::Matmul => vec![
            if want(0) { one(g.matmul(&x[1].transpose()?))? } else { None },
            if want(1) { one(x[0].transpose()?.matmul(g))? } else { None },
        ],
        Op::Sum => vec![one(g.expand(x[0].shape()))?],
        Op::Expand => vec![one(g.sum()?.reshape(x[0].shape()))?],
        Op::Reshape => vec![one(g.reshape(x[0].shape()))?],
        Op::Gather(idx) => vec![one(g.scatter_add(idx.clone(), x[0].shape()))?],
        Op::ScatterAdd(idx) => vec![one(g.gather(idx.clone(), x[0].shape()))?],
        Op::Conv2d(geom) => vec![
            if want(0) { one(g.conv2d_grad_input(&x[1], *geom))? } else { None },
            if want(1) { one(x[0].conv2d_grad_weight(g, *geom))? } else { None },
        ],
        Op::Conv2dGradInput(geom) => vec![
            if want(0) { one(g.conv2d_geom(&x[1], *geom))? } else { None },
            if want(1) { one(g.conv2d_grad_weight(&x[0], *geom))? } else { None },
        ],
        Op::Conv2dGradWeight(geom) => vec![
            if want(0) { one(x[1].conv2d_grad_input(g, *geom))? } else { None },
            if want(1) { one(x[0].conv2d_geom(g, *geom))? } else { None },
        ],
        Op::AvgPool(k) => vec![one(g.avg_pool2d_adjoint(*k, x[0].shape()))?],
        Op::AvgPoolAdjoint(k) => vec![one(g.avg_pool2d(*k))?],
        Op::BroadcastChannel => vec![one(g.reduce_channel())?],
        Op::ReduceChannel => vec![one(g.broadcast_channel(x[0].shape()))?],
        Op::Concat => {
            let mut start = 0;
            let mut grads = Vec::with_capacity(x.len());
            for (i, part) in x.iter().enumerate() {
                let rows = part.shape()[0];
                grads.push(if want(i) { Some(g.slice_rows(start, start + rows)?) } else { None });
                start += rows;
            }
            grads
        }
    })
}

/// Gradient of the scalar `output` with respect to each tensor in `wrt`.
///
/// With `create_graph` the returned tensors are themselves attached to the
/// graph, so a function of them can be differentiated again. A `wrt` tensor
/// that is not part of `output`'s graph yields zeros and a warning entry on
/// the graph.
pub fn grad(output: &Tensor, wrt: &[&Tensor], create_graph: bool) -> Result<Vec<Tensor>> {
    if output.len() != 1 {
        return Err(Error::NonScalarOutput(output.shape().to_vec()));
    }
    let Some(out_ref) = &output.node else {
        return Err(Error::Detached);
    };
    let graph = out_ref.graph.clone();
    let out_id = out_ref.id;

    let mut targets = vec![None; wrt.len()];
    for (slot, t) in targets.iter_mut().zip(wrt) {
        match &t.node {
            Some(n) if n.graph.same(&graph) && n.id <= out_id => *slot = Some(n.id),
            _ => graph.warn(format!(
                "gradient requested for a tensor of shape {:?} that is not part of the output's graph; returning zeros",
                t.shape()
            )),
        }
    }

    // Mark nodes that depend on some target; only those receive gradients.
    let target_set: HashSet<usize> = targets.iter().flatten().copied().collect();
    let mut needed = vec![false; out_id + 1];
    {
        let g = graph.0.borrow();
        for id in 0..=out_id {
            needed[id] = target_set.contains(&id) || g.nodes[id].inputs.iter().any(|&i| needed[i]);
        }
    }

    let mut grads: Vec<Option<Tensor>> = vec![None; out_id + 1];
    if needed[out_id] {
        grads[out_id] = Some(Tensor::ones(output.shape()));
    }
    for id in (0..=out_id).rev() {
        let Some(g_out) = grads[id].clone() else {
            continue;
        };
        let (op, inputs) = {
            let g = graph.0.borrow();
            (g.nodes[id].op.clone(), g.nodes[id].inputs.clone())
        };
        if inputs.is_empty() {
            continue;
        }
        let needs: Vec<bool> = inputs.iter().map(|&i| needed[i]).collect();
        if !needs.iter().any(|&n| n) {
            continue;
        }
        let args: Vec<Tensor> = inputs.iter().map(|&i| graph.node_tensor(i, create_graph)).collect();
        let out = graph.node_tensor(id, create_graph);
        let local = backward(&op, &args, &out, &g_out, &needs)?;
        for ((&input, gi), need) in inputs.iter().zip(local).zip(needs) {
            let (Some(gi), true) = (gi, need) else { continue };
            grads[input] = Some(match grads[input].take() {
                None => gi,
                Some(acc) => acc.add(&gi)?,
            });
        }
        if !target_set.contains(&id) {
            grads[id] = None;
        }
    }

    Ok(targets
        .iter()
        .zip(wrt)
        .map(|(slot, t)| match slot.and_then(|id| grads[id].clone()) {
            Some(g) if create_graph => g,
            Some(g) => g.detach(),
            None => {
                if slot.is_some() {
                    graph.warn(format!(
                        "output does not depend on the tensor of shape {:?}; returning zeros",
                        t.shape()
                    ));
                }
                Tensor::zeros(t.shape())
            }
        })
        .collect())
}
