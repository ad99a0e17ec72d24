use super::{Contributions, Op};
use crate::error::{Result, TensorError};
use crate::graph::{Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Probabilities are clamped to `[BCE_EPS, 1 - BCE_EPS]` before the log.
pub const BCE_EPS: f64 = 1e-7;

impl<T: Scalar> Graph<T> {
    /// Mean squared error against a constant target.
    pub fn mse_loss(&mut self, pred: Var, target: &Tensor<T>) -> Result<Var> {
        if self.shape(pred) != target.shape() {
            return Err(TensorError::shape(
                "mse_loss",
                format!("pred {:?} vs target {:?}", self.shape(pred), target.shape()),
            ));
        }
        if target.numel() == 0 {
            return Err(TensorError::invalid("mse_loss", "empty input"));
        }
        let p = self.data(pred);
        let sum: T = p
            .iter()
            .zip(target.data())
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum();
        let value = sum / T::from_usize(p.len()).unwrap();
        self.push(
            "mse_loss",
            Tensor::scalar(value),
            Op::Mse {
                pred,
                target: target.data().to_vec(),
            },
        )
    }

    /// Mean binary cross-entropy of `[N]` probabilities against 0/1 labels.
    ///
    /// The gradient is taken at the clamped probability even where the clamp
    /// is active, so a saturated but wrong prediction still gets pushed back.
    pub fn bce_loss(&mut self, probs: Var, labels: &[T]) -> Result<Var> {
        let n = self.value(probs).numel();
        if n == 0 {
            return Err(TensorError::invalid("bce_loss", "empty batch"));
        }
        if self.shape(probs).len() != 1 || labels.len() != n {
            return Err(TensorError::shape(
                "bce_loss",
                format!("probs {:?} vs {} labels", self.shape(probs), labels.len()),
            ));
        }
        if labels.iter().any(|&y| y != T::zero() && y != T::one()) {
            return Err(TensorError::invalid("bce_loss", "labels must be 0 or 1"));
        }
        let eps = T::from_f64_lossy(BCE_EPS);
        let clamped: Vec<T> = self
            .data(probs)
            .iter()
            .map(|&p| p.max(eps).min(T::one() - eps))
            .collect();
        let sum: T = clamped
            .iter()
            .zip(labels)
            .map(|(&p, &y)| -(y * p.ln() + (T::one() - y) * (T::one() - p).ln()))
            .sum();
        let value = sum / T::from_usize(n).unwrap();
        self.push(
            "bce_loss",
            Tensor::scalar(value),
            Op::Bce {
                probs,
                labels: labels.to_vec(),
                clamped,
            },
        )
    }
}

pub(crate) fn backward_mse<T: Scalar>(g: &Graph<T>, pred: Var, target: &[T], grad: &[T]) -> Contributions<T> {
    if !g.needs_grad(pred) {
        return vec![];
    }
    let k = grad[0] * T::from_f64_lossy(2.0) / T::from_usize(target.len()).unwrap();
    let d = g
        .data(pred)
        .iter()
        .zip(target)
        .map(|(&p, &t)| k * (p - t))
        .collect();
    vec![(pred, d)]
}

pub(crate) fn backward_bce<T: Scalar>(probs: Var, labels: &[T], clamped: &[T], grad: &[T]) -> Contributions<T> {
    let k = grad[0] / T::from_usize(labels.len()).unwrap();
    let d = clamped
        .iter()
        .zip(labels)
        .map(|(&p, &y)| k * (-y / p + (T::one() - y) / (T::one() - p)))
        .collect();
    vec![(probs, d)]
}
