use super::{Contributions, Op};
use crate::error::{Result, TensorError};
use crate::graph::{Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Window bounds `[start, end)` along one axis, clipped to the input.
#[inline]
fn span(o: usize, stride: usize, padding: usize, window: usize, size: usize) -> (usize, usize) {
    let start = (o * stride) as isize - padding as isize;
    let end = (start + window as isize).min(size as isize);
    (start.max(0) as usize, end.max(0) as usize)
}

fn pooled_size(size: usize, window: usize, stride: usize, padding: usize) -> usize {
    (size + 2 * padding - window) / stride + 1
}

impl<T: Scalar> Graph<T> {
    /// Average pooling; each output is the mean of the in-bounds part of its
    /// window, so zero padding never dilutes border values.
    pub fn avg_pool(&mut self, input: Var, window: usize, stride: usize, padding: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(input).dims4()?;
        if window == 0 || stride == 0 {
            return Err(TensorError::invalid("avg_pool", "window and stride must be positive"));
        }
        if window > h + 2 * padding || window > w + 2 * padding || padding >= window {
            return Err(TensorError::invalid(
                "avg_pool",
                format!("window {window} (padding {padding}) does not fit {h}x{w}"),
            ));
        }
        let (oh, ow) = (
            pooled_size(h, window, stride, padding),
            pooled_size(w, window, stride, padding),
        );
        let x = self.data(input);
        let mut y = vec![T::zero(); n * c * oh * ow];
        for (plane, out) in x.chunks(h * w).zip(y.chunks_mut(oh * ow)) {
            for oy in 0..oh {
                let (y0, y1) = span(oy, stride, padding, window, h);
                for ox in 0..ow {
                    let (x0, x1) = span(ox, stride, padding, window, w);
                    let mut acc = T::zero();
                    for iy in y0..y1 {
                        acc += plane[iy * w + x0..iy * w + x1].iter().copied().sum::<T>();
                    }
                    out[oy * ow + ox] = acc / T::from_usize((y1 - y0) * (x1 - x0)).unwrap();
                }
            }
        }
        self.push(
            "avg_pool",
            Tensor::new([n, c, oh, ow], y)?,
            Op::AvgPool {
                input,
                window,
                stride,
                padding,
            },
        )
    }

    /// `[N, C, H, W] -> [N, C]`, mean over each plane.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(input).dims4()?;
        let m = T::from_usize(h * w).unwrap();
        let y = self
            .data(input)
            .chunks(h * w)
            .map(|p| p.iter().copied().sum::<T>() / m)
            .collect();
        self.push(
            "global_avg_pool",
            Tensor::new([n, c], y)?,
            Op::GlobalAvgPool { input },
        )
    }
}

pub(crate) fn backward_avg<T: Scalar>(
    g: &Graph<T>,
    input: Var,
    window: usize,
    stride: usize,
    padding: usize,
    grad: &[T],
) -> Contributions<T> {
    if !g.needs_grad(input) {
        return vec![];
    }
    let (_, _, h, w) = g.value(input).dims4().expect("validated in forward");
    let (oh, ow) = (
        pooled_size(h, window, stride, padding),
        pooled_size(w, window, stride, padding),
    );
    let mut dx = vec![T::zero(); g.value(input).numel()];
    for (plane, go) in dx.chunks_mut(h * w).zip(grad.chunks(oh * ow)) {
        for oy in 0..oh {
            let (y0, y1) = span(oy, stride, padding, window, h);
            for ox in 0..ow {
                let (x0, x1) = span(ox, stride, padding, window, w);
                let share = go[oy * ow + ox] / T::from_usize((y1 - y0) * (x1 - x0)).unwrap();
                for iy in y0..y1 {
                    plane[iy * w + x0..iy * w + x1]
                        .iter_mut()
                        .for_each(|v| *v += share);
                }
            }
        }
    }
    vec![(input, dx)]
}

pub(crate) fn backward_global<T: Scalar>(g: &Graph<T>, input: Var, grad: &[T]) -> Contributions<T> {
    if !g.needs_grad(input) {
        return vec![];
    }
    let (_, _, h, w) = g.value(input).dims4().expect("validated in forward");
    let m = T::from_usize(h * w).unwrap();
    let dx = grad
        .iter()
        .flat_map(|&d| std::iter::repeat_n(d / m, h * w))
        .collect();
    vec![(input, dx)]
}
