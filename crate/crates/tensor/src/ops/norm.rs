use super::{Contributions, Op};
use crate::error::{Result, TensorError};
use crate::graph::{Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Per-channel batch statistics from a training-mode forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased (n-1) variance, the estimator tracked by running statistics.
    pub var: Vec<T>,
}

/// `(batch, channels, spatial)` view of an `[N, C, ...]` tensor.
fn channel_layout(shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(TensorError::shape(
            "batch_norm",
            format!("expected [N, C, ...], got {shape:?}"),
        ));
    }
    Ok((shape[0], shape[1], shape[2..].iter().product()))
}

fn check_affine<T: Scalar>(g: &Graph<T>, gamma: Var, beta: Var, c: usize) -> Result<()> {
    if g.shape(gamma) != [c] || g.shape(beta) != [c] {
        return Err(TensorError::shape(
            "batch_norm",
            format!(
                "gamma {:?} / beta {:?} must be [{c}]",
                g.shape(gamma),
                g.shape(beta)
            ),
        ));
    }
    Ok(())
}

impl<T: Scalar> Graph<T> {
    /// Normalizes each channel with its own batch mean and (biased) variance.
    pub fn batch_norm_train(&mut self, input: Var, gamma: Var, beta: Var, eps: T) -> Result<(Var, BatchStats<T>)> {
        let (n, c, s) = channel_layout(self.shape(input))?;
        check_affine(self, gamma, beta, c)?;
        let count = n * s;
        if count < 2 {
            return Err(TensorError::invalid(
                "batch_norm",
                format!("training mode needs at least 2 values per channel, got {count}"),
            ));
        }
        let x = self.data(input);
        let gm = self.data(gamma);
        let bt = self.data(beta);
        let m = T::from_usize(count).unwrap();
        let mut mean = vec![T::zero(); c];
        let mut var_biased = vec![T::zero(); c];
        for ch in 0..c {
            let mut sum = T::zero();
            for b in 0..n {
                sum += x[(b * c + ch) * s..(b * c + ch + 1) * s].iter().copied().sum::<T>();
            }
            let mu = sum / m;
            let mut sq = T::zero();
            for b in 0..n {
                for &v in &x[(b * c + ch) * s..(b * c + ch + 1) * s] {
                    sq += (v - mu) * (v - mu);
                }
            }
            mean[ch] = mu;
            var_biased[ch] = sq / m;
        }
        let inv_std: Vec<T> = var_biased.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut x_hat = vec![T::zero(); x.len()];
        let mut y = vec![T::zero(); x.len()];
        for b in 0..n {
            for ch in 0..c {
                let r = (b * c + ch) * s..(b * c + ch + 1) * s;
                for i in r {
                    let xh = (x[i] - mean[ch]) * inv_std[ch];
                    x_hat[i] = xh;
                    y[i] = gm[ch] * xh + bt[ch];
                }
            }
        }
        let unbias = m / (m - T::one());
        let stats = BatchStats {
            mean,
            var: var_biased.iter().map(|&v| v * unbias).collect(),
        };
        let shape = self.shape(input).to_vec();
        let out = self.push(
            "batch_norm",
            Tensor::new(shape, y)?,
            Op::BatchNormTrain {
                input,
                gamma,
                beta,
                x_hat,
                inv_std,
            },
        )?;
        Ok((out, stats))
    }

    /// Normalizes with externally tracked running statistics.
    pub fn batch_norm_eval(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[T],
        running_var: &[T],
        eps: T,
    ) -> Result<Var> {
        let (n, c, s) = channel_layout(self.shape(input))?;
        check_affine(self, gamma, beta, c)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(TensorError::shape("batch_norm", "running statistics length"));
        }
        let x = self.data(input);
        let gm = self.data(gamma);
        let bt = self.data(beta);
        let inv_std: Vec<T> = running_var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut x_hat = vec![T::zero(); x.len()];
        let mut y = vec![T::zero(); x.len()];
        for b in 0..n {
            for ch in 0..c {
                for i in (b * c + ch) * s..(b * c + ch + 1) * s {
                    let xh = (x[i] - running_mean[ch]) * inv_std[ch];
                    x_hat[i] = xh;
                    y[i] = gm[ch] * xh + bt[ch];
                }
            }
        }
        let shape = self.shape(input).to_vec();
        self.push(
            "batch_norm",
            Tensor::new(shape, y)?,
            Op::BatchNormEval {
                input,
                gamma,
                beta,
                x_hat,
                inv_std,
            },
        )
    }
}

/// Per-channel `(sum dy, sum dy * x_hat)`.
fn channel_sums<T: Scalar>(grad: &[T], x_hat: &[T], n: usize, c: usize, s: usize) -> (Vec<T>, Vec<T>) {
    let mut sum_dy = vec![T::zero(); c];
    let mut sum_dy_xh = vec![T::zero(); c];
    for b in 0..n {
        for ch in 0..c {
            for i in (b * c + ch) * s..(b * c + ch + 1) * s {
                sum_dy[ch] += grad[i];
                sum_dy_xh[ch] += grad[i] * x_hat[i];
            }
        }
    }
    (sum_dy, sum_dy_xh)
}

pub(crate) fn backward_train<T: Scalar>(
    g: &Graph<T>,
    input: Var,
    gamma: Var,
    beta: Var,
    x_hat: &[T],
    inv_std: &[T],
    grad: &[T],
) -> Contributions<T> {
    let (n, c, s) = channel_layout(g.shape(input)).expect("validated in forward");
    let (sum_dy, sum_dy_xh) = channel_sums(grad, x_hat, n, c, s);
    let mut out = Vec::with_capacity(3);
    if g.needs_grad(input) {
        let gm = g.data(gamma);
        let m = T::from_usize(n * s).unwrap();
        let mut dx = vec![T::zero(); grad.len()];
        for b in 0..n {
            for ch in 0..c {
                let k = gm[ch] * inv_std[ch] / m;
                for i in (b * c + ch) * s..(b * c + ch + 1) * s {
                    dx[i] = k * (m * grad[i] - sum_dy[ch] - x_hat[i] * sum_dy_xh[ch]);
                }
            }
        }
        out.push((input, dx));
    }
    if g.needs_grad(gamma) {
        out.push((gamma, sum_dy_xh));
    }
    if g.needs_grad(beta) {
        out.push((beta, sum_dy));
    }
    out
}

pub(crate) fn backward_eval<T: Scalar>(
    g: &Graph<T>,
    input: Var,
    gamma: Var,
    beta: Var,
    x_hat: &[T],
    inv_std: &[T],
    grad: &[T],
) -> Contributions<T> {
    let (n, c, s) = channel_layout(g.shape(input)).expect("validated in forward");
    let (sum_dy, sum_dy_xh) = channel_sums(grad, x_hat, n, c, s);
    let mut out = Vec::with_capacity(3);
    if g.needs_grad(input) {
        let gm = g.data(gamma);
        let mut dx = vec![T::zero(); grad.len()];
        for b in 0..n {
            for ch in 0..c {
                for i in (b * c + ch) * s..(b * c + ch + 1) * s {
                    dx[i] = grad[i] * gm[ch] * inv_std[ch];
                }
            }
        }
        out.push((input, dx));
    }
    if g.needs_grad(gamma) {
        out.push((gamma, sum_dy_xh));
    }
    if g.needs_grad(beta) {
        out.push((beta, sum_dy));
    }
    out
}
