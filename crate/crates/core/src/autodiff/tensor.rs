use std::fmt;
use std::rc::Rc;

use super::graph::{Graph, Op};
use crate::error::{Error, Result};

/// Dense row-major `f64` array, optionally attached to a [`Graph`].
///
/// Cloning is cheap: the value buffer is shared.
#[derive(Clone)]
pub struct Tensor {
    pub(crate) shape: Rc<[usize]>,
    pub(crate) data: Rc<Vec<f64>>,
    pub(crate) node: Option<NodeRef>,
}

#[derive(Clone)]
pub(crate) struct NodeRef {
    pub(crate) graph: Graph,
    pub(crate) id: usize,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut s = f.debug_struct("Tensor");
        s.field("shape", &self.shape);
        if self.data.len() <= 16 {
            s.field("data", &self.data);
        }
        s.field("node", &self.node.as_ref().map(|n| n.id)).finish()
    }
}

impl PartialEq for Tensor {
    /// Value equality; graph attachment is ignored.
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data == other.data
    }
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::ShapeMismatch {
                op: "new",
                lhs: shape.to_vec(),
                rhs: vec![data.len()],
            });
        }
        Ok(Self::from_parts(shape.into(), data.into()))
    }

    pub(crate) fn from_parts(shape: Rc<[usize]>, data: Rc<Vec<f64>>) -> Self {
        Tensor {
            shape,
            data,
            node: None,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n: usize = shape.iter().product();
        Self::from_parts(shape.into(), Rc::new(vec![value; n]))
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_parts(Rc::from([]), Rc::new(vec![value]))
    }

    /// 1-D tensor from a slice.
    pub fn vector(values: &[f64]) -> Self {
        Self::from_parts(Rc::from([values.len()]), Rc::new(values.to_vec()))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.data.to_vec()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::NonScalarOutput(self.shape.to_vec()));
        }
        Ok(self.data[0])
    }

    pub fn is_attached(&self) -> bool {
        self.node.is_some()
    }

    pub fn graph(&self) -> Option<&Graph> {
        self.node.as_ref().map(|n| &n.graph)
    }

    /// Same values, no graph.
    pub fn detach(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.clone(),
            node: None,
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Builds the result of an op: attached when any input is attached.
    pub(crate) fn record(op: Op, inputs: &[&Tensor], shape: Rc<[usize]>, data: Vec<f64>) -> Result<Tensor> {
        let data: Rc<Vec<f64>> = data.into();
        let mut graph: Option<&Graph> = None;
        for t in inputs {
            if let Some(n) = &t.node {
                match graph {
                    None => graph = Some(&n.graph),
                    Some(g) if g.same(&n.graph) => {}
                    Some(_) => {
                        return Err(Error::invalid("inputs", "tensors belong to different graphs"));
                    }
                }
            }
        }
        let Some(graph) = graph else {
            return Ok(Tensor::from_parts(shape, data));
        };
        let ids = inputs
            .iter()
            .map(|t| match &t.node {
                Some(n) => n.id,
                None => graph.push(Op::Constant, Vec::new(), t.shape.clone(), t.data.clone()),
            })
            .collect();
        let id = graph.push(op, ids, shape.clone(), data.clone());
        Ok(Tensor {
            shape,
            data,
            node: Some(NodeRef {
                graph: graph.clone(),
                id,
            }),
        })
    }
}

pub(crate) fn ensure_same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::ShapeMismatch {
            op,
            lhs: a.shape.to_vec(),
            rhs: b.shape.to_vec(),
        });
    }
    Ok(())
}
