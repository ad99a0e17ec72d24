use super::{Contributions, Op};
use crate::error::{Result, TensorError};
use crate::graph::{Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Elementwise non-linearities. `PRelu` takes a learnable per-channel slope
/// for the negative half; `LeakyRelu` uses a fixed one and `Relu` uses zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    Sigmoid,
    Tanh,
    Relu,
    LeakyRelu { slope: f64 },
    PRelu,
}

impl Activation {
    /// Slope of the conventional leaky ReLU.
    pub const LEAKY_SLOPE: f64 = 0.01;

    pub fn leaky() -> Self {
        Activation::LeakyRelu {
            slope: Self::LEAKY_SLOPE,
        }
    }
}

#[inline]
fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Channel count and per-channel run length for `[N, C, ...]`.
fn channels(shape: &[usize]) -> (usize, usize) {
    if shape.len() < 2 {
        return (1, shape.iter().product());
    }
    (shape[1], shape[2..].iter().product())
}

impl<T: Scalar> Graph<T> {
    /// Applies `kind` elementwise. `alpha` must be given (shape `[C]`) for
    /// `PRelu` and omitted otherwise.
    pub fn activation(&mut self, input: Var, kind: Activation, alpha: Option<Var>) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        let (c, s) = channels(&shape);
        match (kind, alpha) {
            (Activation::PRelu, Some(a)) if self.shape(a) == [c] => {}
            (Activation::PRelu, Some(a)) => {
                return Err(TensorError::shape(
                    "activation",
                    format!("prelu alpha {:?} must be [{c}]", self.shape(a)),
                ))
            }
            (Activation::PRelu, None) => {
                return Err(TensorError::invalid("activation", "prelu requires alpha"))
            }
            (_, Some(_)) => {
                return Err(TensorError::invalid("activation", "alpha is only used by prelu"))
            }
            _ => {}
        }
        let x = self.data(input);
        let y: Vec<T> = match kind {
            Activation::Sigmoid => x.iter().map(|&v| sigmoid(v)).collect(),
            Activation::Tanh => x.iter().map(|&v| v.tanh()).collect(),
            Activation::Relu => x
                .iter()
                .map(|&v| if v > T::zero() { v } else { T::zero() })
                .collect(),
            Activation::LeakyRelu { slope } => {
                let a = T::from_f64_lossy(slope);
                x.iter().map(|&v| if v > T::zero() { v } else { a * v }).collect()
            }
            Activation::PRelu => {
                let a = self.data(alpha.expect("checked above"));
                let mut y = Vec::with_capacity(x.len());
                for (i, plane) in x.chunks(s.max(1)).enumerate() {
                    let ai = a[i % c];
                    y.extend(plane.iter().map(|&v| if v > T::zero() { v } else { ai * v }));
                }
                y
            }
        };
        self.push(
            "activation",
            Tensor::new(shape, y)?,
            Op::Activation { input, kind, alpha },
        )
    }

    /// `|x|`.
    pub fn abs(&mut self, input: Var) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        let y = self.data(input).iter().map(|v| v.abs()).collect();
        self.push("abs", Tensor::new(shape, y)?, Op::Abs { input })
    }
}

pub(crate) fn backward<T: Scalar>(
    g: &Graph<T>,
    out: Var,
    input: Var,
    kind: Activation,
    alpha: Option<Var>,
    grad: &[T],
) -> Contributions<T> {
    let x = g.data(input);
    let y = g.data(out);
    let (c, s) = channels(g.shape(input));
    let mut res = Vec::with_capacity(2);
    if g.needs_grad(input) {
        let dx: Vec<T> = match kind {
            Activation::Sigmoid => grad
                .iter()
                .zip(y)
                .map(|(&d, &v)| d * v * (T::one() - v))
                .collect(),
            Activation::Tanh => grad
                .iter()
                .zip(y)
                .map(|(&d, &v)| d * (T::one() - v * v))
                .collect(),
            Activation::Relu => grad
                .iter()
                .zip(x)
                .map(|(&d, &v)| if v > T::zero() { d } else { T::zero() })
                .collect(),
            Activation::LeakyRelu { slope } => {
                let a = T::from_f64_lossy(slope);
                grad.iter()
                    .zip(x)
                    .map(|(&d, &v)| if v > T::zero() { d } else { a * d })
                    .collect()
            }
            Activation::PRelu => {
                let a = g.data(alpha.expect("prelu has alpha"));
                let mut dx = Vec::with_capacity(x.len());
                for (i, (gp, xp)) in grad.chunks(s.max(1)).zip(x.chunks(s.max(1))).enumerate() {
                    let ai = a[i % c];
                    dx.extend(
                        gp.iter()
                            .zip(xp)
                            .map(|(&d, &v)| if v > T::zero() { d } else { ai * d }),
                    );
                }
                dx
            }
        };
        res.push((input, dx));
    }
    if let Some(a) = alpha.filter(|a| g.needs_grad(*a)) {
        let mut da = vec![T::zero(); c];
        for (i, (gp, xp)) in grad.chunks(s.max(1)).zip(x.chunks(s.max(1))).enumerate() {
            let mut acc = T::zero();
            for (&d, &v) in gp.iter().zip(xp) {
                if v <= T::zero() {
                    acc += d * v;
                }
            }
            da[i % c] += acc;
        }
        res.push((a, da));
    }
    res
}

pub(crate) fn backward_abs<T: Scalar>(g: &Graph<T>, input: Var, grad: &[T]) -> Contributions<T> {
    if !g.needs_grad(input) {
        return vec![];
    }
    let dx = grad
        .iter()
        .zip(g.data(input))
        .map(|(&d, &v)| {
            if v > T::zero() {
                d
            } else if v < T::zero() {
                -d
            } else {
                T::zero()
            }
        })
        .collect();
    vec![(input, dx)]
}
