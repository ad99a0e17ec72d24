//! Register-tiled direct convolution for stride 1.
//!
//! Each output tile holds `KB` output channels by `XB` adjacent pixels of
//! one row, so the inner loop is `KB * XB` independent multiply-adds per
//! loaded input strip. Input planes are zero-padded once per image into
//! rows whose length is a multiple of `XB`, which removes all bounds
//! handling from the hot loops. The input gradient is the same kernel run
//! on the padded output gradient with flipped, transposed weights.

use rayon::prelude::*;

use super::conv::{ConvGeometry, ConvGrads};
use crate::scalar::Scalar;

const KB: usize = 8;
const XB: usize = 8;
/// Input channels per weight-gradient tile.
const CB_W: usize = 2;

fn round_up(v: usize, m: usize) -> usize {
    v.div_ceil(m) * m
}

/// Largest kernel width with a specialized kernel.
pub const MAX_KERNEL: usize = 7;

pub fn supports(g: &ConvGeometry) -> bool {
    g.stride == 1 && g.kernel_h == g.kernel_w && g.kernel_w <= MAX_KERNEL && g.padding < g.kernel_w
}

/// `[C, H, W]` planes copied into `[C, rows, row_len]` with `top` / `left`
/// zero borders.
struct Padded<T> {
    data: Vec<T>,
    rows: usize,
    row_len: usize,
}

impl<T: Scalar> Padded<T> {
    fn new(src: &[T], c: usize, h: usize, w: usize, top: usize, left: usize, rows: usize, row_len: usize) -> Self {
        let mut data = vec![T::zero(); c * rows * row_len];
        for ch in 0..c {
            for y in 0..h {
                let s = &src[(ch * h + y) * w..(ch * h + y + 1) * w];
                let d = (ch * rows + y + top) * row_len + left;
                data[d..d + w].copy_from_slice(s);
            }
        }
        Padded { data, rows, row_len }
    }

    fn plane(&self) -> usize {
        self.rows * self.row_len
    }
}

/// Weights `[K, C, kh, kw]` repacked as `[K/KB][C][kh][kw][KB]`, with
/// missing output channels zero.
fn pack_weights<T: Scalar>(w: &[T], k: usize, c: usize, kh: usize, kw: usize) -> Vec<T> {
    let blocks = k.div_ceil(KB);
    let mut out = vec![T::zero(); blocks * c * kh * kw * KB];
    for ko in 0..k {
        let (b, kk) = (ko / KB, ko % KB);
        for ci in 0..c {
            for i in 0..kh {
                for j in 0..kw {
                    let dst = ((((b * c + ci) * kh + i) * kw + j) * KB) + kk;
                    out[dst] = w[((ko * c + ci) * kh + i) * kw + j];
                }
            }
        }
    }
    out
}

/// `[K, P]` planes as `[K/KB][P][KB]`, zero beyond `K`.
fn channels_last<T: Scalar>(src: &[T], k: usize, plane: usize) -> Vec<T> {
    let mut out = vec![T::zero(); k.div_ceil(KB) * plane * KB];
    for ko in 0..k {
        let (b, kk) = (ko / KB, ko % KB);
        for (p, &v) in src[ko * plane..(ko + 1) * plane].iter().enumerate() {
            out[(b * plane + p) * KB + kk] = v;
        }
    }
    out
}

/// Flipped and transposed weights: `[C, K, kh, kw]` with
/// `w'[c][k][i][j] = w[k][c][kh-1-i][kw-1-j]`.
fn flip_transpose<T: Scalar>(w: &[T], k: usize, c: usize, kh: usize, kw: usize) -> Vec<T> {
    let mut out = vec![T::zero(); w.len()];
    for ko in 0..k {
        for ci in 0..c {
            for i in 0..kh {
                for j in 0..kw {
                    out[((ci * k + ko) * kh + i) * kw + j] = w[((ko * c + ci) * kh + (kh - 1 - i)) * kw + (kw - 1 - j)];
                }
            }
        }
    }
    out
}

#[inline(always)]
fn tile<T: Scalar, const KW: usize>(
    xp: &[T],
    plane: usize,
    row_len: usize,
    wpk: &[T],
    c_in: usize,
    kh: usize,
    y: usize,
    x0: usize,
) -> [[T; XB]; KB] {
    let mut acc = [[T::zero(); XB]; KB];
    let mut wi = 0;
    for c in 0..c_in {
        for i in 0..kh {
            let start = c * plane + (y + i) * row_len + x0;
            for j in 0..KW {
                let xs: &[T; XB] = xp[start + j..start + j + XB].try_into().unwrap();
                let w: &[T; KB] = wpk[wi..wi + KB].try_into().unwrap();
                wi += KB;
                for kk in 0..KB {
                    for xx in 0..XB {
                        acc[kk][xx] += w[kk] * xs[xx];
                    }
                }
            }
        }
    }
    acc
}

/// One image: `out[K, oh, ow] = conv(xp, w)` with `xp` already padded.
#[inline(always)]
fn image_forward<T: Scalar, const KW: usize>(
    xp: &Padded<T>,
    wpk: &[T],
    bias: Option<&[T]>,
    c_in: usize,
    k_out: usize,
    kh: usize,
    oh: usize,
    ow: usize,
    out: &mut [T],
) {
    let wblock = c_in * kh * KW * KB;
    for b in 0..k_out.div_ceil(KB) {
        let wb = &wpk[b * wblock..(b + 1) * wblock];
        let kn = KB.min(k_out - b * KB);
        for y in 0..oh {
            for x0 in (0..ow).step_by(XB) {
                let acc = tile::<T, KW>(&xp.data, xp.plane(), xp.row_len, wb, c_in, kh, y, x0);
                let xn = XB.min(ow - x0);
                for (kk, a) in acc.iter().enumerate().take(kn) {
                    let ko = b * KB + kk;
                    let bv = bias.map_or(T::zero(), |bs| bs[ko]);
                    let dst = &mut out[(ko * oh + y) * ow + x0..(ko * oh + y) * ow + x0 + xn];
                    for (d, &v) in dst.iter_mut().zip(a) {
                        *d = v + bv;
                    }
                }
            }
        }
    }
}

macro_rules! dispatch_kw {
    ($kw:expr, $f:ident :: <$t:ty>, $($arg:expr),*) => {
        match $kw {
            1 => $f::<$t, 1>($($arg),*),
            3 => $f::<$t, 3>($($arg),*),
            5 => $f::<$t, 5>($($arg),*),
            7 => $f::<$t, 7>($($arg),*),
            other => unreachable!("unsupported kernel width {other}"),
        }
    };
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn image_forward_avx2<T: Scalar, const KW: usize>(
    xp: &Padded<T>,
    wpk: &[T],
    bias: Option<&[T]>,
    c_in: usize,
    k_out: usize,
    kh: usize,
    oh: usize,
    ow: usize,
    out: &mut [T],
) {
    image_forward::<T, KW>(xp, wpk, bias, c_in, k_out, kh, oh, ow, out)
}

fn has_avx2() -> bool {
    #[cfg(target_arch = "x86_64")]
    {
        std::arch::is_x86_feature_detected!("avx2")
    }
    #[cfg(not(target_arch = "x86_64"))]
    {
        false
    }
}

#[allow(clippy::too_many_arguments)]
fn run_image_forward<T: Scalar>(
    kw: usize,
    xp: &Padded<T>,
    wpk: &[T],
    bias: Option<&[T]>,
    c_in: usize,
    k_out: usize,
    kh: usize,
    oh: usize,
    ow: usize,
    out: &mut [T],
) {
    #[cfg(target_arch = "x86_64")]
    if has_avx2() {
        // SAFETY: the CPU supports AVX2, checked at runtime just above.
        unsafe {
            dispatch_kw!(kw, image_forward_avx2::<T>, xp, wpk, bias, c_in, k_out, kh, oh, ow, out);
        }
        return;
    }
    dispatch_kw!(kw, image_forward::<T>, xp, wpk, bias, c_in, k_out, kh, oh, ow, out);
}

/// Batched stride-1 convolution of `[N, C, H, W]` input into `[N, K, oh, ow]`
/// with symmetric `padding`.
#[allow(clippy::too_many_arguments)]
fn conv_batch<T: Scalar>(
    input: &[T],
    weight: &[T],
    bias: Option<&[T]>,
    (n, c_in, h, w): (usize, usize, usize, usize),
    (k_out, kh, kw): (usize, usize, usize),
    padding: usize,
) -> Vec<T> {
    let oh = h + 2 * padding - kh + 1;
    let ow = w + 2 * padding - kw + 1;
    let rows = oh + kh - 1;
    let row_len = round_up(ow, XB) + MAX_KERNEL - 1;
    let wpk = pack_weights(weight, k_out, c_in, kh, kw);
    let mut out = vec![T::zero(); n * k_out * oh * ow];
    out.par_chunks_mut(k_out * oh * ow)
        .enumerate()
        .for_each(|(i, o)| {
            let img = &input[i * c_in * h * w..(i + 1) * c_in * h * w];
            let xp = Padded::new(img, c_in, h, w, padding, padding, rows, row_len);
            run_image_forward(kw, &xp, &wpk, bias, c_in, k_out, kh, oh, ow, o);
        });
    out
}

pub fn forward<T: Scalar>(input: &[T], weight: &[T], bias: Option<&[T]>, g: &ConvGeometry) -> Vec<T> {
    conv_batch(
        input,
        weight,
        bias,
        (g.batch, g.in_channels, g.height, g.width),
        (g.out_channels, g.kernel_h, g.kernel_w),
        g.padding,
    )
}

/// `dw[k][c][i][j] = sum_{y,x} dy[k][y][x] * xp[c][y+i][x+j]` for one
/// image, accumulated into `dw`. `dyt` is the output gradient in
/// `[K/KB][oh][ow][KB]` order and `xp` has a zero channel appended when the
/// channel count is odd, so both tile loops run without remainders.
#[inline(always)]
fn image_weight_grad<T: Scalar, const KW: usize>(
    xp: &Padded<T>,
    dyt: &[T],
    c_in: usize,
    k_out: usize,
    kh: usize,
    (oh, ow): (usize, usize),
    dw: &mut [T],
) {
    let kblock = oh * ow * KB;
    for b in 0..k_out.div_ceil(KB) {
        let kn = KB.min(k_out - b * KB);
        let dyb = &dyt[b * kblock..(b + 1) * kblock];
        for c0 in (0..c_in).step_by(CB_W) {
            for i in 0..kh {
                let mut acc = [[[T::zero(); KB]; KW]; CB_W];
                for y in 0..oh {
                    let rows: [usize; CB_W] = std::array::from_fn(|cb| (c0 + cb) * xp.plane() + (y + i) * xp.row_len);
                    for x in 0..ow {
                        let at = (y * ow + x) * KB;
                        let dy: &[T; KB] = dyb[at..at + KB].try_into().unwrap();
                        for cb in 0..CB_W {
                            let xs: &[T; KW] = xp.data[rows[cb] + x..rows[cb] + x + KW].try_into().unwrap();
                            for j in 0..KW {
                                for kk in 0..KB {
                                    acc[cb][j][kk] += xs[j] * dy[kk];
                                }
                            }
                        }
                    }
                }
                for (cb, a) in acc.iter().enumerate() {
                    let c = c0 + cb;
                    if c >= c_in {
                        break;
                    }
                    for (j, lanes) in a.iter().enumerate() {
                        for (kk, &v) in lanes.iter().enumerate().take(kn) {
                            dw[(((b * KB + kk) * c_in + c) * kh + i) * KW + j] += v;
                        }
                    }
                }
            }
        }
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn image_weight_grad_avx2<T: Scalar, const KW: usize>(
    xp: &Padded<T>,
    dyt: &[T],
    c_in: usize,
    k_out: usize,
    kh: usize,
    out: (usize, usize),
    dw: &mut [T],
) {
    image_weight_grad::<T, KW>(xp, dyt, c_in, k_out, kh, out, dw)
}

fn run_image_weight_grad<T: Scalar>(
    kw: usize,
    xp: &Padded<T>,
    dyt: &[T],
    c_in: usize,
    k_out: usize,
    kh: usize,
    out: (usize, usize),
    dw: &mut [T],
) {
    #[cfg(target_arch = "x86_64")]
    if has_avx2() {
        // SAFETY: the CPU supports AVX2, checked at runtime just above.
        unsafe {
            dispatch_kw!(kw, image_weight_grad_avx2::<T>, xp, dyt, c_in, k_out, kh, out, dw);
        }
        return;
    }
    dispatch_kw!(kw, image_weight_grad::<T>, xp, dyt, c_in, k_out, kh, out, dw);
}

pub fn backward<T: Scalar>(input: &[T], weight: &[T], grad_out: &[T], g: &ConvGeometry, need: [bool; 3]) -> ConvGrads<T> {
    let [need_x, need_w, need_b] = need;
    let (n, c_in, h, w) = (g.batch, g.in_channels, g.height, g.width);
    let (k_out, kh, kw, p) = (g.out_channels, g.kernel_h, g.kernel_w, g.padding);
    let (oh, ow) = (g.out_h, g.out_w);

    let dx = need_x.then(|| {
        let wt = flip_transpose(weight, k_out, c_in, kh, kw);
        // full correlation of the output gradient, cropped back to H x W
        let (ph, pw) = (kh - 1 - p, kw - 1 - p);
        debug_assert_eq!(ph, pw);
        conv_batch(grad_out, &wt, None, (n, k_out, oh, ow), (c_in, kh, kw), ph)
    });

    let dw = need_w.then(|| {
        let rows = h + 2 * p;
        let row_len = round_up(ow, XB) + MAX_KERNEL - 1;
        let c_pad = round_up(c_in, CB_W);
        let partials: Vec<Vec<T>> = (0..n)
            .into_par_iter()
            .map(|i| {
                let img = &input[i * c_in * h * w..(i + 1) * c_in * h * w];
                let mut xp = Padded::new(img, c_in, h, w, p, p, rows, row_len);
                xp.data.resize(c_pad * xp.plane(), T::zero());
                let go = &grad_out[i * k_out * oh * ow..(i + 1) * k_out * oh * ow];
                let dyt = channels_last(go, k_out, oh * ow);
                let mut part = vec![T::zero(); weight.len()];
                run_image_weight_grad(kw, &xp, &dyt, c_in, k_out, kh, (oh, ow), &mut part);
                part
            })
            .collect();
        // fixed summation order keeps results independent of thread count
        let mut acc = vec![T::zero(); weight.len()];
        for part in &partials {
            acc.iter_mut().zip(part).for_each(|(a, &b)| *a += b);
        }
        acc
    });

    let db = need_b.then(|| {
        let plane = oh * ow;
        let mut db = vec![T::zero(); k_out];
        for img in grad_out.chunks(k_out * plane) {
            for (k, pl) in img.chunks(plane).enumerate() {
                db[k] += pl.iter().copied().sum::<T>();
            }
        }
        db
    });
    (dx, dw, db)
}
