use super::{Contributions, Op};
use crate::error::{Result, TensorError};
use crate::graph::{Graph, Var};
use crate::scalar::{gemm, MatRef, Scalar};
use crate::tensor::Tensor;

/// Logical `rows x cols` view of a matrix stored either as-is or transposed.
fn view<T>(data: &[T], rows: usize, cols: usize, stored_transposed: bool) -> MatRef<'_, T> {
    if stored_transposed {
        MatRef::transposed(data, rows, cols)
    } else {
        MatRef::new(data, rows, cols)
    }
}

/// Splits an `[N, C, H, W]` tensor into consecutive channel groups.
pub fn split_channels<T: Scalar>(t: &Tensor<T>, sizes: &[usize]) -> Result<Vec<Tensor<T>>> {
    let (n, c, h, w) = t.dims4()?;
    if sizes.iter().sum::<usize>() != c {
        return Err(TensorError::shape(
            "split_channels",
            format!("sizes {sizes:?} do not add up to {c}"),
        ));
    }
    let plane = h * w;
    let mut out: Vec<Vec<T>> = sizes.iter().map(|&ci| Vec::with_capacity(n * ci * plane)).collect();
    for img in t.data().chunks(c * plane) {
        let mut off = 0;
        for (dst, &ci) in out.iter_mut().zip(sizes) {
            dst.extend_from_slice(&img[off * plane..(off + ci) * plane]);
            off += ci;
        }
    }
    out.into_iter()
        .zip(sizes)
        .map(|(d, &ci)| Tensor::new([n, ci, h, w], d))
        .collect()
}

impl<T: Scalar> Graph<T> {
    /// Stacks `[N, Ci, H, W]` inputs along the channel axis, in argument order.
    pub fn concat_channels(&mut self, inputs: &[Var]) -> Result<Var> {
        let Some(&first) = inputs.first() else {
            return Err(TensorError::invalid("concat_channels", "no inputs"));
        };
        let (n, _, h, w) = self.value(first).dims4()?;
        let mut sizes = Vec::with_capacity(inputs.len());
        for &v in inputs {
            let (ni, ci, hi, wi) = self.value(v).dims4()?;
            if (ni, hi, wi) != (n, h, w) {
                return Err(TensorError::shape(
                    "concat_channels",
                    format!("{:?} vs {:?}", self.shape(first), self.shape(v)),
                ));
            }
            sizes.push(ci);
        }
        let total: usize = sizes.iter().sum();
        let plane = h * w;
        let mut y = Vec::with_capacity(n * total * plane);
        for b in 0..n {
            for (&v, &ci) in inputs.iter().zip(&sizes) {
                y.extend_from_slice(&self.data(v)[b * ci * plane..(b + 1) * ci * plane]);
            }
        }
        self.push(
            "concat_channels",
            Tensor::new([n, total, h, w], y)?,
            Op::Concat {
                inputs: inputs.to_vec(),
            },
        )
    }

    /// `[N, F] x [O, F]^T + [O] -> [N, O]`.
    pub fn fully_connected(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let (&[n, f], &[o, wf]) = (self.shape(input), self.shape(weight)) else {
            return Err(TensorError::shape(
                "fully_connected",
                format!("input {:?}, weight {:?}", self.shape(input), self.shape(weight)),
            ));
        };
        if f != wf || bias.is_some_and(|b| self.shape(b) != [o]) {
            return Err(TensorError::shape(
                "fully_connected",
                format!("input {:?}, weight {:?}", self.shape(input), self.shape(weight)),
            ));
        }
        let mut y = vec![T::zero(); n * o];
        gemm(
            MatRef::new(self.data(input), n, f),
            MatRef::transposed(self.data(weight), f, o),
            T::zero(),
            &mut y,
        );
        if let Some(b) = bias {
            let b = self.data(b);
            for row in y.chunks_mut(o) {
                row.iter_mut().zip(b).for_each(|(v, &bb)| *v += bb);
            }
        }
        self.push(
            "fully_connected",
            Tensor::new([n, o], y)?,
            Op::Linear {
                input,
                weight,
                bias,
            },
        )
    }

    /// Softmax over the last axis, stabilized by subtracting the row maximum.
    pub fn softmax(&mut self, input: Var) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        let cols = *shape
            .last()
            .ok_or_else(|| TensorError::shape("softmax", "scalar input"))?;
        let mut y = self.data(input).to_vec();
        for row in y.chunks_mut(cols) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            row.iter_mut().for_each(|v| *v /= sum);
        }
        self.push("softmax", Tensor::new(shape, y)?, Op::Softmax { input })
    }

    /// Column `column` of an `[N, F]` matrix as an `[N]` vector.
    pub fn select_column(&mut self, input: Var, column: usize) -> Result<Var> {
        let &[n, f] = self.shape(input) else {
            return Err(TensorError::shape("select_column", "expected [N, F]"));
        };
        if column >= f {
            return Err(TensorError::invalid("select_column", format!("column {column} >= {f}")));
        }
        let y = self.data(input).chunks(f).map(|r| r[column]).collect();
        self.push(
            "select_column",
            Tensor::new([n], y)?,
            Op::SelectColumn { input, column },
        )
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let t = Tensor::new(shape.to_vec(), self.data(input).to_vec())?;
        self.push("reshape", t, Op::Reshape { input })
    }

    /// Batched matrix product over `[B, ., .]` operands; `trans_*` selects
    /// the transposed view of the stored matrix.
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_a: bool, trans_b: bool) -> Result<Var> {
        let (&[ba, a0, a1], &[bb, b0, b1]) = (self.shape(a), self.shape(b)) else {
            return Err(TensorError::shape("batch_matmul", "operands must be 3-D"));
        };
        let (m, ka) = if trans_a { (a1, a0) } else { (a0, a1) };
        let (kb, n) = if trans_b { (b1, b0) } else { (b0, b1) };
        if ba != bb || ka != kb {
            return Err(TensorError::shape(
                "batch_matmul",
                format!("{:?} x {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let (ad, bd) = (self.data(a), self.data(b));
        let mut y = vec![T::zero(); ba * m * n];
        for (i, c) in y.chunks_mut(m * n).enumerate() {
            gemm(
                view(&ad[i * m * ka..(i + 1) * m * ka], m, ka, trans_a),
                view(&bd[i * ka * n..(i + 1) * ka * n], ka, n, trans_b),
                T::zero(),
                c,
            );
        }
        self.push(
            "batch_matmul",
            Tensor::new([ba, m, n], y)?,
            Op::BatchMatmul {
                a,
                b,
                trans_a,
                trans_b,
            },
        )
    }

    /// `skip + gate * branch` with a learnable one-element `gate`.
    pub fn residual_gate(&mut self, skip: Var, branch: Var, gate: Var) -> Result<Var> {
        if self.shape(skip) != self.shape(branch) || self.value(gate).numel() != 1 {
            return Err(TensorError::shape(
                "residual_gate",
                format!(
                    "skip {:?}, branch {:?}, gate {:?}",
                    self.shape(skip),
                    self.shape(branch),
                    self.shape(gate)
                ),
            ));
        }
        let s = self.item(gate);
        // a closed gate passes the skip through exactly, signed zeros included
        let y = if s == T::zero() {
            self.data(skip).to_vec()
        } else {
            self.data(skip)
                .iter()
                .zip(self.data(branch))
                .map(|(&x, &o)| x + s * o)
                .collect()
        };
        let shape = self.shape(skip).to_vec();
        self.push(
            "residual_gate",
            Tensor::new(shape, y)?,
            Op::ResidualGate { skip, branch, gate },
        )
    }
}

pub(crate) fn backward_concat<T: Scalar>(g: &Graph<T>, inputs: &[Var], grad: &[T]) -> Contributions<T> {
    let shape = g.shape(inputs[0]);
    let (n, plane) = (shape[0], shape[2] * shape[3]);
    let sizes: Vec<usize> = inputs.iter().map(|&v| g.shape(v)[1]).collect();
    let total: usize = sizes.iter().sum();
    let mut out = Vec::with_capacity(inputs.len());
    let mut off = 0;
    for (&v, &ci) in inputs.iter().zip(&sizes) {
        if g.needs_grad(v) {
            let mut d = Vec::with_capacity(n * ci * plane);
            for b in 0..n {
                let base = (b * total + off) * plane;
                d.extend_from_slice(&grad[base..base + ci * plane]);
            }
            out.push((v, d));
        }
        off += ci;
    }
    out
}

pub(crate) fn backward_linear<T: Scalar>(
    g: &Graph<T>,
    input: Var,
    weight: Var,
    bias: Option<Var>,
    grad: &[T],
) -> Contributions<T> {
    let &[n, f] = g.shape(input) else { unreachable!() };
    let o = g.shape(weight)[0];
    let mut out = Vec::with_capacity(3);
    if g.needs_grad(input) {
        let mut dx = vec![T::zero(); n * f];
        gemm(
            MatRef::new(grad, n, o),
            MatRef::new(g.data(weight), o, f),
            T::zero(),
            &mut dx,
        );
        out.push((input, dx));
    }
    if g.needs_grad(weight) {
        let mut dw = vec![T::zero(); o * f];
        gemm(
            MatRef::transposed(grad, o, n),
            MatRef::new(g.data(input), n, f),
            T::zero(),
            &mut dw,
        );
        out.push((weight, dw));
    }
    if let Some(b) = bias.filter(|b| g.needs_grad(*b)) {
        let mut db = vec![T::zero(); o];
        for row in grad.chunks(o) {
            db.iter_mut().zip(row).for_each(|(a, &d)| *a += d);
        }
        out.push((b, db));
    }
    out
}

pub(crate) fn backward_softmax<T: Scalar>(g: &Graph<T>, out: Var, input: Var, grad: &[T]) -> Contributions<T> {
    if !g.needs_grad(input) {
        return vec![];
    }
    let cols = *g.shape(input).last().unwrap();
    let y = g.data(out);
    let mut dx = vec![T::zero(); y.len()];
    for ((yr, gr), dr) in y.chunks(cols).zip(grad.chunks(cols)).zip(dx.chunks_mut(cols)) {
        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
        for ((d, &yy), &gg) in dr.iter_mut().zip(yr).zip(gr) {
            *d = yy * (gg - dot);
        }
    }
    vec![(input, dx)]
}

pub(crate) fn backward_select<T: Scalar>(g: &Graph<T>, input: Var, column: usize, grad: &[T]) -> Contributions<T> {
    if !g.needs_grad(input) {
        return vec![];
    }
    let f = g.shape(input)[1];
    let mut dx = vec![T::zero(); g.value(input).numel()];
    for (i, &d) in grad.iter().enumerate() {
        dx[i * f + column] = d;
    }
    vec![(input, dx)]
}

pub(crate) fn backward_bmm<T: Scalar>(
    g: &Graph<T>,
    a: Var,
    b: Var,
    trans_a: bool,
    trans_b: bool,
    grad: &[T],
) -> Contributions<T> {
    let (sa, sb) = (g.shape(a), g.shape(b));
    let batch = sa[0];
    let (m, k) = if trans_a { (sa[2], sa[1]) } else { (sa[1], sa[2]) };
    let n = if trans_b { sb[1] } else { sb[2] };
    let (ad, bd) = (g.data(a), g.data(b));
    let mut out = Vec::with_capacity(2);
    if g.needs_grad(a) {
        let mut da = vec![T::zero(); ad.len()];
        for i in 0..batch {
            let gc = &grad[i * m * n..(i + 1) * m * n];
            let bm = &bd[i * k * n..(i + 1) * k * n];
            let dst = &mut da[i * m * k..(i + 1) * m * k];
            if trans_a {
                // dA (stored k x m) = op(B) dC^T
                gemm(view(bm, k, n, trans_b), MatRef::transposed(gc, n, m), T::zero(), dst);
            } else {
                // dA = dC op(B)^T
                gemm(MatRef::new(gc, m, n), view(bm, n, k, !trans_b), T::zero(), dst);
            }
        }
        out.push((a, da));
    }
    if g.needs_grad(b) {
        let mut db = vec![T::zero(); bd.len()];
        for i in 0..batch {
            let gc = &grad[i * m * n..(i + 1) * m * n];
            let am = &ad[i * m * k..(i + 1) * m * k];
            let dst = &mut db[i * k * n..(i + 1) * k * n];
            if trans_b {
                // dB (stored n x k) = dC^T op(A)
                gemm(MatRef::transposed(gc, n, m), view(am, m, k, trans_a), T::zero(), dst);
            } else {
                // dB = op(A)^T dC
                gemm(view(am, k, m, !trans_a), MatRef::new(gc, m, n), T::zero(), dst);
            }
        }
        out.push((b, db));
    }
    out
}

pub(crate) fn backward_gate<T: Scalar>(
    g: &Graph<T>,
    skip: Var,
    branch: Var,
    gate: Var,
    grad: &[T],
) -> Contributions<T> {
    let mut out = Vec::with_capacity(3);
    if g.needs_grad(skip) {
        out.push((skip, grad.to_vec()));
    }
    if g.needs_grad(branch) {
        let s = g.item(gate);
        out.push((branch, grad.iter().map(|&d| s * d).collect()));
    }
    if g.needs_grad(gate) {
        let dg: T = grad.iter().zip(g.data(branch)).map(|(&d, &o)| d * o).sum();
        out.push((gate, vec![dg]));
    }
    out
}
