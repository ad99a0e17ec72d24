use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use crate::error::{Result, TensorError};
use crate::nn::{ParamId, ParamStore};
use crate::ops::Op;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which convolution kernel the graph dispatches to. All compute the same
/// function; `Direct` is the plain nested-loop reference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ConvAlgo {
    /// Register-tiled direct kernel for square stride-1 kernels, GEMM
    /// otherwise.
    #[default]
    Tiled,
    Gemm,
    Direct,
}

pub(crate) struct Node<T> {
    pub(crate) tensor: Tensor<T>,
    pub(crate) op: Op<T>,
}

/// Append-only tape of tensor operations.
///
/// Nodes are recorded in execution order, so reverse insertion order is a
/// valid topological order for the backward sweep. A graph is built per
/// step and discarded afterwards.
pub struct Graph<T> {
    pub(crate) nodes: Vec<Node<T>>,
    bindings: Vec<(ParamId, Var)>,
    conv_algo: ConvAlgo,
    profile: Option<Profile>,
}

/// Wall time per op name, forward and backward.
#[derive(Debug, Clone, Default)]
pub struct Profile {
    mark: Option<Instant>,
    pub entries: BTreeMap<&'static str, OpTiming>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct OpTiming {
    pub calls: usize,
    pub forward: Duration,
    pub backward: Duration,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            bindings: Vec::new(),
            conv_algo: ConvAlgo::default(),
            profile: None,
        }
    }

    /// Starts recording per-op wall time. Forward time of an op is the
    /// time since the previous node was recorded.
    pub fn enable_profiling(&mut self) {
        self.profile = Some(Profile {
            mark: Some(Instant::now()),
            ..Profile::default()
        });
    }

    pub fn profile(&self) -> Option<&Profile> {
        self.profile.as_ref()
    }

    pub fn with_conv_algo(mut self, algo: ConvAlgo) -> Self {
        self.conv_algo = algo;
        self
    }

    pub fn set_conv_algo(&mut self, algo: ConvAlgo) {
        self.conv_algo = algo;
    }

    pub fn conv_algo(&self) -> ConvAlgo {
        self.conv_algo
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf. Gradients are tracked iff `tensor.requires_grad()`.
    pub fn input(&mut self, tensor: Tensor<T>) -> Result<Var> {
        if !tensor.is_finite() {
            return Err(TensorError::NonFinite { op: "input" });
        }
        let id = self.nodes.len();
        self.nodes.push(Node {
            tensor,
            op: Op::Leaf,
        });
        if let Some(p) = self.profile.as_mut() {
            p.mark = Some(Instant::now());
        }
        Ok(Var(id))
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, mut tensor: Tensor<T>) -> Result<Var> {
        tensor.set_requires_grad(false);
        self.input(tensor)
    }

    /// Binds a parameter from `store` as a leaf. Frozen parameters enter the
    /// graph as constants.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Result<Var> {
        let p = store.get(id);
        let mut t = p.tensor.clone();
        t.set_requires_grad(!p.frozen);
        t.zero_grad();
        let var = self.input(t)?;
        self.bindings.push((id, var));
        Ok(var)
    }

    pub fn bindings(&self) -> &[(ParamId, Var)] {
        &self.bindings
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].tensor
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].tensor.shape()
    }

    pub fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].tensor.data()
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].tensor.grad()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].tensor.requires_grad()
    }

    /// Scalar value of a one-element node.
    pub fn item(&self, v: Var) -> T {
        self.nodes[v.0].tensor.data()[0]
    }

    pub(crate) fn push(&mut self, op_name: &'static str, mut tensor: Tensor<T>, op: Op<T>) -> Result<Var> {
        if !tensor.is_finite() {
            return Err(TensorError::NonFinite { op: op_name });
        }
        if let Some(p) = self.profile.as_mut() {
            let now = Instant::now();
            if let Some(m) = p.mark {
                let e = p.entries.entry(op_name).or_default();
                e.calls += 1;
                e.forward += now - m;
            }
            p.mark = Some(now);
        }
        let needs = op.inputs().iter().any(|v| self.requires_grad(*v));
        tensor.set_requires_grad(needs);
        let id = self.nodes.len();
        self.nodes.push(Node { tensor, op });
        Ok(Var(id))
    }

    /// Reverse sweep from a one-element `loss`. Leaf gradients are kept and
    /// can be read with [`Graph::grad`]; interior gradients are released as
    /// soon as they have been propagated.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].tensor.numel() != 1 {
            return Err(TensorError::shape(
                "backward",
                format!("loss must have one element, got {:?}", self.shape(loss)),
            ));
        }
        for node in &mut self.nodes {
            node.tensor.zero_grad();
        }
        if !self.requires_grad(loss) {
            return Ok(());
        }
        self.nodes[loss.0].tensor.accumulate_grad(&[T::one()]);

        for idx in (0..=loss.0).rev() {
            if matches!(self.nodes[idx].op, Op::Leaf) || !self.nodes[idx].tensor.requires_grad() {
                continue;
            }
            let Some(grad) = self.nodes[idx].tensor.take_grad() else {
                continue;
            };
            let start = self.profile.is_some().then(Instant::now);
            let contributions = self.node_backward(idx, &grad)?;
            if let (Some(t), Some(p)) = (start, self.profile.as_mut()) {
                p.entries.entry(self.nodes[idx].op.name()).or_default().backward += t.elapsed();
            }
            for (v, g) in contributions {
                if !g.iter().all(|x| x.is_finite()) {
                    return Err(TensorError::NonFinite {
                        op: self.nodes[idx].op.name(),
                    });
                }
                self.nodes[v.0].tensor.accumulate_grad_owned(g);
            }
        }
        Ok(())
    }

    pub(crate) fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].tensor.requires_grad()
    }
}
