//! Named parameters and the few layer types the detector is built from.

use std::collections::BTreeMap;

use crate::error::{Result, TensorError};
use crate::graph::{Graph, Var};
use crate::ops::Activation;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Adamax moments for one parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamaxState<T> {
    pub m: Vec<T>,
    pub u: Vec<T>,
    pub t: u64,
}

impl<T: Scalar> AdamaxState<T> {
    pub fn new(len: usize) -> Self {
        AdamaxState {
            m: vec![T::zero(); len],
            u: vec![T::zero(); len],
            t: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Learned by the optimizer unless frozen.
    Weight,
    /// Persistent state that is never differentiated (e.g. running statistics).
    Buffer,
}

#[derive(Debug, Clone)]
pub struct Parameter<T> {
    pub name: String,
    pub tensor: Tensor<T>,
    pub state: AdamaxState<T>,
    pub kind: ParamKind,
    pub frozen: bool,
}

impl<T: Scalar> Parameter<T> {
    pub fn trainable(&self) -> bool {
        self.kind == ParamKind::Weight && !self.frozen
    }
}

/// Owns every parameter and buffer of a model, addressed by id or by
/// dotted name. Iteration order is registration order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    by_name: BTreeMap<String, ParamId>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            by_name: BTreeMap::new(),
        }
    }

    fn register(&mut self, name: &str, tensor: Tensor<T>, kind: ParamKind) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            return Err(TensorError::invalid(
                "param_store",
                format!("duplicate parameter name {name:?}"),
            ));
        }
        let id = ParamId(self.params.len());
        let mut tensor = tensor;
        tensor.set_requires_grad(false);
        self.params.push(Parameter {
            name: name.to_string(),
            state: AdamaxState::new(tensor.numel()),
            tensor,
            kind,
            frozen: false,
        });
        self.by_name.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn add(&mut self, name: &str, tensor: Tensor<T>) -> Result<ParamId> {
        self.register(name, tensor, ParamKind::Weight)
    }

    pub fn add_buffer(&mut self, name: &str, tensor: Tensor<T>) -> Result<ParamId> {
        self.register(name, tensor, ParamKind::Buffer)
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter<T>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    /// Freezes or thaws every parameter whose name starts with `prefix`.
    /// Returns how many parameters matched.
    pub fn set_frozen(&mut self, prefix: &str, frozen: bool) -> usize {
        let mut n = 0;
        for p in self.params.iter_mut().filter(|p| p.name.starts_with(prefix)) {
            p.frozen = frozen;
            n += 1;
        }
        n
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable())
            .map(|p| p.tensor.numel())
            .sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.tensor.zero_grad();
        }
    }

    /// Copies leaf gradients from `g` into the bound parameters' grad slots,
    /// summing if a parameter was bound more than once.
    pub fn absorb_grads(&mut self, g: &Graph<T>) {
        self.zero_grads();
        for &(id, var) in g.bindings() {
            if let Some(grad) = g.grad(var) {
                self.params[id.0].tensor.accumulate_grad(grad);
            }
        }
    }

    /// Converts every tensor and moment to another precision.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        let conv = |v: &[T]| v.iter().map(|x| U::from_f64_lossy(x.to_f64_lossy())).collect();
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    tensor: p.tensor.cast(),
                    state: AdamaxState {
                        m: conv(&p.state.m),
                        u: conv(&p.state.u),
                        t: p.state.t,
                    },
                    kind: p.kind,
                    frozen: p.frozen,
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }

    /// Resets every optimizer moment and step counter.
    pub fn reset_optimizer(&mut self) {
        for p in &mut self.params {
            p.state = AdamaxState::new(p.tensor.numel());
        }
    }
}

/// Padding that preserves spatial size for an odd kernel at stride 1.
pub fn same_padding(kernel: usize) -> usize {
    (kernel - 1) / 2
}

#[derive(Debug, Clone, Copy)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    /// Registers `{name}.weight` (`[K, C, k, k]`) and optionally `{name}.bias`.
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        weight: Tensor<T>,
        bias: Option<Tensor<T>>,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let (k, _, kh, kw) = weight.dims4()?;
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(TensorError::invalid("conv2d", format!("{name}: kernel must be odd")));
        }
        if bias.as_ref().is_some_and(|b| b.shape() != [k]) {
            return Err(TensorError::shape("conv2d", format!("{name}: bias must be [{k}]")));
        }
        let weight = store.add(&format!("{name}.weight"), weight)?;
        let bias = bias
            .map(|b| store.add(&format!("{name}.bias"), b))
            .transpose()?;
        Ok(Conv2d {
            weight,
            bias,
            stride,
            padding,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight)?;
        let b = self.bias.map(|b| g.param(store, b)).transpose()?;
        g.conv2d(x, w, b, self.stride, self.padding)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, weight: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        match (weight.shape(), bias.shape()) {
            (&[o, _], &[ob]) if o == ob => {}
            (ws, bs) => {
                return Err(TensorError::shape(
                    "fully_connected",
                    format!("{name}: weight {ws:?}, bias {bs:?}"),
                ))
            }
        }
        Ok(Linear {
            weight: store.add(&format!("{name}.weight"), weight)?,
            bias: store.add(&format!("{name}.bias"), bias)?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight)?;
        let b = g.param(store, self.bias)?;
        g.fully_connected(x, w, Some(b))
    }
}

/// Batch normalization with affine parameters and running statistics.
///
/// Running statistics are seeded from the first training batch and then
/// tracked as `r = momentum * r + (1 - momentum) * batch`.
#[derive(Debug, Clone, Copy)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    /// One-element buffer counting training batches seen.
    pub batches: ParamId,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm2d {
    pub const EPS: f64 = 1e-5;
    pub const MOMENTUM: f64 = 0.9;

    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Result<Self> {
        Ok(BatchNorm2d {
            gamma: store.add(&format!("{name}.gamma"), Tensor::full([channels], T::one()))?,
            beta: store.add(&format!("{name}.beta"), Tensor::zeros([channels]))?,
            running_mean: store.add_buffer(&format!("{name}.running_mean"), Tensor::zeros([channels]))?,
            running_var: store.add_buffer(&format!("{name}.running_var"), Tensor::full([channels], T::one()))?,
            batches: store.add_buffer(&format!("{name}.batches"), Tensor::zeros([1]))?,
            eps: Self::EPS,
            momentum: Self::MOMENTUM,
        })
    }

    pub fn initialized<T: Scalar>(&self, store: &ParamStore<T>) -> bool {
        store.get(self.batches).tensor.data()[0] > T::zero()
    }

    /// Training-mode forward; folds the batch statistics into the running
    /// estimates when `update` is set.
    pub fn forward_train<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &mut ParamStore<T>,
        x: Var,
        update: bool,
    ) -> Result<Var> {
        let gamma = g.param(store, self.gamma)?;
        let beta = g.param(store, self.beta)?;
        let (y, stats) = g.batch_norm_train(x, gamma, beta, T::from_f64_lossy(self.eps))?;
        if update {
            let first = !self.initialized(store);
            let mom = T::from_f64_lossy(self.momentum);
            for (id, batch) in [(self.running_mean, &stats.mean), (self.running_var, &stats.var)] {
                let r = store.get_mut(id).tensor.data_mut();
                for (r, &b) in r.iter_mut().zip(batch) {
                    *r = if first { b } else { mom * *r + (T::one() - mom) * b };
                }
            }
            store.get_mut(self.batches).tensor.data_mut()[0] += T::one();
        }
        Ok(y)
    }

    pub fn forward_eval<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        if !self.initialized(store) {
            return Err(TensorError::Uninitialized(format!(
                "{}: batch norm evaluated before any training batch",
                store.get(self.gamma).name.trim_end_matches(".gamma")
            )));
        }
        let gamma = g.param(store, self.gamma)?;
        let beta = g.param(store, self.beta)?;
        let mean = store.get(self.running_mean).tensor.data().to_vec();
        let var = store.get(self.running_var).tensor.data().to_vec();
        g.batch_norm_eval(x, gamma, beta, &mean, &var, T::from_f64_lossy(self.eps))
    }
}

/// An activation, with its per-channel slope parameter when it is a PReLU.
#[derive(Debug, Clone, Copy)]
pub struct ActivationLayer {
    pub kind: Activation,
    pub alpha: Option<ParamId>,
}

impl ActivationLayer {
    pub const PRELU_INIT: f64 = 0.25;

    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, kind: Activation, channels: usize) -> Result<Self> {
        let alpha = match kind {
            Activation::PRelu => Some(store.add(
                &format!("{name}.alpha"),
                Tensor::full([channels], T::from_f64_lossy(Self::PRELU_INIT)),
            )?),
            _ => None,
        };
        Ok(ActivationLayer { kind, alpha })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let alpha = self.alpha.map(|a| g.param(store, a)).transpose()?;
        g.activation(x, self.kind, alpha)
    }
}
