//! Differentiable operations recorded on a [`Graph`].
//!
//! Each submodule adds constructor methods to `Graph` and the matching
//! backward rule. The enum below is the tape entry; it owns whatever the
//! backward rule needs beyond the input values.

pub mod activation;
pub mod conv;
pub mod dense;
pub mod loss;
pub mod norm;
pub mod pool;
pub mod tiled;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::scalar::Scalar;

pub use activation::Activation;

pub(crate) enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    },
    BatchNormTrain {
        input: Var,
        gamma: Var,
        beta: Var,
        x_hat: Vec<T>,
        inv_std: Vec<T>,
    },
    BatchNormEval {
        input: Var,
        gamma: Var,
        beta: Var,
        x_hat: Vec<T>,
        inv_std: Vec<T>,
    },
    Activation {
        input: Var,
        kind: Activation,
        alpha: Option<Var>,
    },
    Abs {
        input: Var,
    },
    Concat {
        inputs: Vec<Var>,
    },
    AvgPool {
        input: Var,
        window: usize,
        stride: usize,
        padding: usize,
    },
    GlobalAvgPool {
        input: Var,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    Softmax {
        input: Var,
    },
    SelectColumn {
        input: Var,
        column: usize,
    },
    Reshape {
        input: Var,
    },
    BatchMatmul {
        a: Var,
        b: Var,
        trans_a: bool,
        trans_b: bool,
    },
    ResidualGate {
        skip: Var,
        branch: Var,
        gate: Var,
    },
    Mse {
        pred: Var,
        target: Vec<T>,
    },
    Bce {
        probs: Var,
        labels: Vec<T>,
        clamped: Vec<T>,
    },
}

impl<T> Op<T> {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::BatchNormTrain { .. } | Op::BatchNormEval { .. } => "batch_norm",
            Op::Activation { .. } => "activation",
            Op::Abs { .. } => "abs",
            Op::Concat { .. } => "concat_channels",
            Op::AvgPool { .. } => "avg_pool",
            Op::GlobalAvgPool { .. } => "global_avg_pool",
            Op::Linear { .. } => "fully_connected",
            Op::Softmax { .. } => "softmax",
            Op::SelectColumn { .. } => "select_column",
            Op::Reshape { .. } => "reshape",
            Op::BatchMatmul { .. } => "batch_matmul",
            Op::ResidualGate { .. } => "residual_gate",
            Op::Mse { .. } => "mse_loss",
            Op::Bce { .. } => "bce_loss",
        }
    }

    pub(crate) fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Conv2d {
                input,
                weight,
                bias,
                ..
            }
            | Op::Linear {
                input,
                weight,
                bias,
            } => {
                let mut v = vec![*input, *weight];
                v.extend(bias);
                v
            }
            Op::BatchNormTrain {
                input, gamma, beta, ..
            }
            | Op::BatchNormEval {
                input, gamma, beta, ..
            } => vec![*input, *gamma, *beta],
            Op::Activation { input, alpha, .. } => {
                let mut v = vec![*input];
                v.extend(alpha);
                v
            }
            Op::Abs { input }
            | Op::AvgPool { input, .. }
            | Op::GlobalAvgPool { input }
            | Op::Softmax { input }
            | Op::SelectColumn { input, .. }
            | Op::Reshape { input } => vec![*input],
            Op::Concat { inputs } => inputs.clone(),
            Op::BatchMatmul { a, b, .. } => vec![*a, *b],
            Op::ResidualGate { skip, branch, gate } => vec![*skip, *branch, *gate],
            Op::Mse { pred, .. } => vec![*pred],
            Op::Bce { probs, .. } => vec![*probs],
        }
    }
}

pub(crate) type Contributions<T> = Vec<(Var, Vec<T>)>;

impl<T: Scalar> Graph<T> {
    pub(crate) fn node_backward(&self, idx: usize, grad: &[T]) -> Result<Contributions<T>> {
        let out = Var(idx);
        match &self.nodes[idx].op {
            Op::Leaf => Ok(vec![]),
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                padding,
            } => conv::backward(self, *input, *weight, *bias, *stride, *padding, grad),
            Op::BatchNormTrain {
                input,
                gamma,
                beta,
                x_hat,
                inv_std,
            } => Ok(norm::backward_train(self, *input, *gamma, *beta, x_hat, inv_std, grad)),
            Op::BatchNormEval {
                input,
                gamma,
                beta,
                x_hat,
                inv_std,
            } => Ok(norm::backward_eval(self, *input, *gamma, *beta, x_hat, inv_std, grad)),
            Op::Activation { input, kind, alpha } => {
                Ok(activation::backward(self, out, *input, *kind, *alpha, grad))
            }
            Op::Abs { input } => Ok(activation::backward_abs(self, *input, grad)),
            Op::Concat { inputs } => Ok(dense::backward_concat(self, inputs, grad)),
            Op::AvgPool {
                input,
                window,
                stride,
                padding,
            } => Ok(pool::backward_avg(self, *input, *window, *stride, *padding, grad)),
            Op::GlobalAvgPool { input } => Ok(pool::backward_global(self, *input, grad)),
            Op::Linear {
                input,
                weight,
                bias,
            } => Ok(dense::backward_linear(self, *input, *weight, *bias, grad)),
            Op::Softmax { input } => Ok(dense::backward_softmax(self, out, *input, grad)),
            Op::SelectColumn { input, column } => {
                Ok(dense::backward_select(self, *input, *column, grad))
            }
            Op::Reshape { input } => Ok(vec![(*input, grad.to_vec())]),
            Op::BatchMatmul {
                a,
                b,
                trans_a,
                trans_b,
            } => Ok(dense::backward_bmm(self, *a, *b, *trans_a, *trans_b, grad)),
            Op::ResidualGate { skip, branch, gate } => {
                Ok(dense::backward_gate(self, *skip, *branch, *gate, grad))
            }
            Op::Mse { pred, target } => Ok(loss::backward_mse(self, *pred, target, grad)),
            Op::Bce {
                probs,
                labels,
                clamped,
            } => Ok(loss::backward_bce(*probs, labels, clamped, grad)),
        }
    }
}
