//! 2-D convolution: a register-tiled direct kernel for the stride-1 layers,
//! an im2col + GEMM path for everything else, and a nested-loop path kept
//! as the reference. All operate on NCHW slices.

use rayon::prelude::*;

use super::{tiled, Contributions, Op};
use crate::error::{Result, TensorError};
use crate::graph::{ConvAlgo, Graph, Var};
use crate::scalar::{gemm, MatRef, Scalar};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(input: &[usize], weight: &[usize], stride: usize, padding: usize) -> Result<Self> {
        const OP: &str = "conv2d";
        let &[batch, in_channels, height, width] = input else {
            return Err(TensorError::shape(OP, format!("input must be 4-D, got {input:?}")));
        };
        let &[out_channels, wc, kernel_h, kernel_w] = weight else {
            return Err(TensorError::shape(OP, format!("weight must be 4-D, got {weight:?}")));
        };
        if wc != in_channels {
            return Err(TensorError::shape(
                OP,
                format!("input has {in_channels} channels, weight expects {wc}"),
            ));
        }
        if kernel_h % 2 == 0 || kernel_w % 2 == 0 {
            return Err(TensorError::invalid(
                OP,
                format!("kernel {kernel_h}x{kernel_w} must have odd extents"),
            ));
        }
        if stride == 0 {
            return Err(TensorError::invalid(OP, "stride must be positive"));
        }
        if height + 2 * padding < kernel_h || width + 2 * padding < kernel_w {
            return Err(TensorError::EmptyOutput { op: OP });
        }
        let out_h = (height + 2 * padding - kernel_h) / stride + 1;
        let out_w = (width + 2 * padding - kernel_w) / stride + 1;
        if out_h == 0 || out_w == 0 || batch == 0 {
            return Err(TensorError::EmptyOutput { op: OP });
        }
        Ok(ConvGeometry {
            batch,
            in_channels,
            height,
            width,
            out_channels,
            kernel_h,
            kernel_w,
            stride,
            padding,
            out_h,
            out_w,
        })
    }

    pub fn output_shape(&self) -> [usize; 4] {
        [self.batch, self.out_channels, self.out_h, self.out_w]
    }

    fn col_rows(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }

    fn in_image(&self) -> usize {
        self.in_channels * self.height * self.width
    }

    fn out_image(&self) -> usize {
        self.out_channels * self.out_h * self.out_w
    }

    /// 1x1, stride 1, no padding: the image itself is its column matrix.
    fn is_pointwise(&self) -> bool {
        self.kernel_h == 1 && self.kernel_w == 1 && self.stride == 1 && self.padding == 0
    }

    /// Valid output-column range `[lo, hi)` for kernel column `kj` when stride is 1.
    fn unit_stride_span(&self, kj: usize) -> (usize, usize) {
        let lo = self.padding.saturating_sub(kj).min(self.out_w);
        let hi = (self.width + self.padding).saturating_sub(kj).min(self.out_w).max(lo);
        (lo, hi)
    }
}

/// Unfolds one `[C, H, W]` image into a `[C*kh*kw, out_h*out_w]` matrix.
pub fn im2col<T: Scalar>(img: &[T], g: &ConvGeometry, cols: &mut [T]) {
    let (h, w) = (g.height, g.width);
    let (oh, ow) = (g.out_h, g.out_w);
    let plane_cols = oh * ow;
    for c in 0..g.in_channels {
        let plane = &img[c * h * w..(c + 1) * h * w];
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let row = (c * g.kernel_h + ki) * g.kernel_w + kj;
                let dst = &mut cols[row * plane_cols..(row + 1) * plane_cols];
                for oy in 0..oh {
                    let drow = &mut dst[oy * ow..(oy + 1) * ow];
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    if iy < 0 || iy >= h as isize {
                        drow.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    if g.stride == 1 {
                        let (lo, hi) = g.unit_stride_span(kj);
                        drow[..lo].fill(T::zero());
                        drow[hi..].fill(T::zero());
                        let off = kj as isize - g.padding as isize;
                        let s0 = (lo as isize + off) as usize;
                        drow[lo..hi].copy_from_slice(&src[s0..s0 + (hi - lo)]);
                    } else {
                        for (ox, d) in drow.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                            *d = if ix >= 0 && ix < w as isize {
                                src[ix as usize]
                            } else {
                                T::zero()
                            };
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-and-adds columns back into an image.
pub fn col2im<T: Scalar>(cols: &[T], g: &ConvGeometry, img: &mut [T]) {
    let (h, w) = (g.height, g.width);
    let (oh, ow) = (g.out_h, g.out_w);
    let plane_cols = oh * ow;
    for c in 0..g.in_channels {
        let plane = &mut img[c * h * w..(c + 1) * h * w];
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let row = (c * g.kernel_h + ki) * g.kernel_w + kj;
                let src = &cols[row * plane_cols..(row + 1) * plane_cols];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let srow = &src[oy * ow..(oy + 1) * ow];
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    if g.stride == 1 {
                        let (lo, hi) = g.unit_stride_span(kj);
                        let off = kj as isize - g.padding as isize;
                        let d0 = (lo as isize + off) as usize;
                        dst[d0..d0 + (hi - lo)]
                            .iter_mut()
                            .zip(&srow[lo..hi])
                            .for_each(|(d, &s)| *d += s);
                    } else {
                        for (ox, &s) in srow.iter().enumerate() {
                            let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                            if ix >= 0 && ix < w as isize {
                                dst[ix as usize] += s;
                            }
                        }
                    }
                }
            }
        }
    }
}

pub fn forward_gemm<T: Scalar>(input: &[T], weight: &[T], bias: Option<&[T]>, g: &ConvGeometry) -> Vec<T> {
    let mut out = vec![T::zero(); g.batch * g.out_image()];
    let (rows, cols_n) = (g.col_rows(), g.col_cols());
    let w = MatRef::new(weight, g.out_channels, rows);
    let pointwise = g.is_pointwise();
    out.par_chunks_mut(g.out_image()).enumerate().for_each_init(
        || if pointwise { Vec::new() } else { vec![T::zero(); rows * cols_n] },
        |buf, (n, o)| {
            let img = &input[n * g.in_image()..(n + 1) * g.in_image()];
            let cols: &[T] = if pointwise {
                img
            } else {
                im2col(img, g, buf);
                buf
            };
            gemm(w, MatRef::new(cols, rows, cols_n), T::zero(), o);
            if let Some(b) = bias {
                for (k, plane) in o.chunks_mut(cols_n).enumerate() {
                    plane.iter_mut().for_each(|v| *v += b[k]);
                }
            }
        },
    );
    out
}

/// Gradients `(d_input, d_weight, d_bias)`; each is computed only when requested.
pub type ConvGrads<T> = (Option<Vec<T>>, Option<Vec<T>>, Option<Vec<T>>);

pub fn backward_gemm<T: Scalar>(
    input: &[T],
    weight: &[T],
    grad_out: &[T],
    g: &ConvGeometry,
    need: [bool; 3],
) -> ConvGrads<T> {
    let [need_x, need_w, need_b] = need;
    let (rows, cols_n) = (g.col_rows(), g.col_cols());
    let pointwise = g.is_pointwise();

    let mut dx = need_x.then(|| vec![T::zero(); g.batch * g.in_image()]);
    if let Some(dx) = dx.as_mut() {
        let wt = MatRef::transposed(weight, rows, g.out_channels);
        dx.par_chunks_mut(g.in_image()).enumerate().for_each_init(
            || vec![T::zero(); rows * cols_n],
            |buf, (n, dimg)| {
                let go = &grad_out[n * g.out_image()..(n + 1) * g.out_image()];
                let go = MatRef::new(go, g.out_channels, cols_n);
                if pointwise {
                    gemm(wt, go, T::zero(), dimg);
                } else {
                    gemm(wt, go, T::zero(), buf);
                    col2im(buf, g, dimg);
                }
            },
        );
    }

    let dw = need_w.then(|| {
        let partials: Vec<Vec<T>> = (0..g.batch)
            .into_par_iter()
            .map_init(
                || if pointwise { Vec::new() } else { vec![T::zero(); rows * cols_n] },
                |buf, n| {
                    let img = &input[n * g.in_image()..(n + 1) * g.in_image()];
                    let cols: &[T] = if pointwise {
                        img
                    } else {
                        im2col(img, g, buf);
                        buf
                    };
                    let go = &grad_out[n * g.out_image()..(n + 1) * g.out_image()];
                    let mut part = vec![T::zero(); g.out_channels * rows];
                    gemm(
                        MatRef::new(go, g.out_channels, cols_n),
                        MatRef::transposed(cols, cols_n, rows),
                        T::zero(),
                        &mut part,
                    );
                    part
                },
            )
            .collect();
        // Fixed summation order keeps results independent of thread count.
        let mut acc = vec![T::zero(); g.out_channels * rows];
        for p in &partials {
            acc.iter_mut().zip(p).for_each(|(a, &b)| *a += b);
        }
        acc
    });

    let db = need_b.then(|| bias_grad(grad_out, g));
    (dx, dw, db)
}

fn bias_grad<T: Scalar>(grad_out: &[T], g: &ConvGeometry) -> Vec<T> {
    let plane = g.col_cols();
    let mut db = vec![T::zero(); g.out_channels];
    for img in grad_out.chunks(g.out_image()) {
        for (k, p) in img.chunks(plane).enumerate() {
            db[k] += p.iter().copied().sum::<T>();
        }
    }
    db
}

#[inline]
fn tap(g: &ConvGeometry, o: usize, k: usize, size: usize) -> Option<usize> {
    let i = (o * g.stride + k) as isize - g.padding as isize;
    (i >= 0 && i < size as isize).then_some(i as usize)
}

pub fn forward_direct<T: Scalar>(input: &[T], weight: &[T], bias: Option<&[T]>, g: &ConvGeometry) -> Vec<T> {
    let (c_in, h, w) = (g.in_channels, g.height, g.width);
    let (kh, kw) = (g.kernel_h, g.kernel_w);
    let mut out = vec![T::zero(); g.batch * g.out_image()];
    for n in 0..g.batch {
        for k in 0..g.out_channels {
            for oy in 0..g.out_h {
                for ox in 0..g.out_w {
                    let mut acc = T::zero();
                    for c in 0..c_in {
                        for ki in 0..kh {
                            let Some(iy) = tap(g, oy, ki, h) else { continue };
                            for kj in 0..kw {
                                let Some(ix) = tap(g, ox, kj, w) else { continue };
                                acc += weight[((k * c_in + c) * kh + ki) * kw + kj]
                                    * input[((n * c_in + c) * h + iy) * w + ix];
                            }
                        }
                    }
                    if let Some(b) = bias {
                        acc += b[k];
                    }
                    out[((n * g.out_channels + k) * g.out_h + oy) * g.out_w + ox] = acc;
                }
            }
        }
    }
    out
}

pub fn backward_direct<T: Scalar>(
    input: &[T],
    weight: &[T],
    grad_out: &[T],
    g: &ConvGeometry,
    need: [bool; 3],
) -> ConvGrads<T> {
    let (c_in, h, w) = (g.in_channels, g.height, g.width);
    let (kh, kw) = (g.kernel_h, g.kernel_w);
    let mut dx = vec![T::zero(); input.len()];
    let mut dw = vec![T::zero(); weight.len()];
    for n in 0..g.batch {
        for k in 0..g.out_channels {
            for oy in 0..g.out_h {
                for ox in 0..g.out_w {
                    let go = grad_out[((n * g.out_channels + k) * g.out_h + oy) * g.out_w + ox];
                    for c in 0..c_in {
                        for ki in 0..kh {
                            let Some(iy) = tap(g, oy, ki, h) else { continue };
                            for kj in 0..kw {
                                let Some(ix) = tap(g, ox, kj, w) else { continue };
                                let wi = ((k * c_in + c) * kh + ki) * kw + kj;
                                let xi = ((n * c_in + c) * h + iy) * w + ix;
                                dw[wi] += go * input[xi];
                                dx[xi] += go * weight[wi];
                            }
                        }
                    }
                }
            }
        }
    }
    let [need_x, need_w, need_b] = need;
    (
        need_x.then_some(dx),
        need_w.then_some(dw),
        need_b.then(|| bias_grad(grad_out, g)),
    )
}

impl<T: Scalar> Graph<T> {
    /// `[N,C,H,W] * [K,C,kh,kw] + [K] -> [N,K,H',W']`,
    /// `H' = floor((H + 2p - kh) / stride) + 1`.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let g = ConvGeometry::new(self.shape(input), self.shape(weight), stride, padding)?;
        if let Some(b) = bias {
            if self.shape(b) != [g.out_channels] {
                return Err(TensorError::shape(
                    "conv2d",
                    format!("bias shape {:?}, expected [{}]", self.shape(b), g.out_channels),
                ));
            }
        }
        let x = self.data(input);
        let wt = self.data(weight);
        let b = bias.map(|b| self.data(b));
        let out = match self.conv_algo() {
            ConvAlgo::Tiled if tiled::supports(&g) => tiled::forward(x, wt, b, &g),
            ConvAlgo::Tiled | ConvAlgo::Gemm => forward_gemm(x, wt, b, &g),
            ConvAlgo::Direct => forward_direct(x, wt, b, &g),
        };
        let t = Tensor::new(g.output_shape(), out)?;
        self.push(
            "conv2d",
            t,
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                padding,
            },
        )
    }
}

pub(crate) fn backward<T: Scalar>(
    graph: &Graph<T>,
    input: Var,
    weight: Var,
    bias: Option<Var>,
    stride: usize,
    padding: usize,
    grad: &[T],
) -> Result<Contributions<T>> {
    let g = ConvGeometry::new(graph.shape(input), graph.shape(weight), stride, padding)?;
    let need = [
        graph.needs_grad(input),
        graph.needs_grad(weight),
        bias.is_some_and(|b| graph.needs_grad(b)),
    ];
    let x = graph.data(input);
    let wt = graph.data(weight);
    let (dx, dw, db) = match graph.conv_algo() {
        ConvAlgo::Tiled if tiled::supports(&g) => tiled::backward(x, wt, grad, &g, need),
        ConvAlgo::Tiled | ConvAlgo::Gemm => backward_gemm(x, wt, grad, &g, need),
        ConvAlgo::Direct => backward_direct(x, wt, grad, &g, need),
    };
    let mut out = Vec::with_capacity(3);
    out.extend(dx.map(|d| (input, d)));
    out.extend(dw.map(|d| (weight, d)));
    if let (Some(b), Some(d)) = (bias, db) {
        out.push((b, d));
    }
    Ok(out)
}
