use crate::nn::ParamStore;
use crate::scalar::Scalar;

/// Adamax (the infinity-norm variant of Adam).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Adamax {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Adamax {
    fn default() -> Self {
        Adamax {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl Adamax {
    pub fn with_lr(lr: f64) -> Self {
        Adamax {
            lr,
            ..Default::default()
        }
    }

    /// Updates every trainable parameter that holds a gradient. Parameters
    /// without a gradient keep their state untouched, step counter included.
    pub fn step<T: Scalar>(&self, store: &mut ParamStore<T>) {
        let b1 = T::from_f64_lossy(self.beta1);
        let b2 = T::from_f64_lossy(self.beta2);
        let eps = T::from_f64_lossy(self.eps);
        for p in store.iter_mut() {
            if !p.trainable() {
                continue;
            }
            let Some(grad) = p.tensor.take_grad() else {
                continue;
            };
            let st = &mut p.state;
            st.t += 1;
            let rate = T::from_f64_lossy(self.lr / (1.0 - self.beta1.powi(st.t as i32)));
            let theta = p.tensor.data_mut();
            for i in 0..theta.len() {
                let g = grad[i];
                st.m[i] = b1 * st.m[i] + (T::one() - b1) * g;
                st.u[i] = (b2 * st.u[i]).max(g.abs());
                theta[i] -= rate * st.m[i] / (st.u[i] + eps);
            }
        }
    }
}
