//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records every operation in execution order. Each call returns a
//! [`Var`] handle into the tape; [`Tape::backward`] replays the records in
//! reverse and accumulates gradients into every node that depends on a
//! trainable leaf. Only the operators the forecasting model needs are
//! provided.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Matmul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
        // (a offset, b offset) per output block; output blocks are contiguous.
        blocks: Vec<(usize, usize)>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    SubRow(Var, Var),
    MulRow(Var, Var),
    DivRow(Var, Var),
    Scale(Var, Var),
    AddScalar(Var),
    MulScalar(Var, f64),
    Exp(Var),
    Gelu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    L2Normalize {
        x: Var,
        norms: Vec<f64>,
        eps: f64,
    },
    DepthwiseConv {
        x: Var,
        kernel: Var,
    },
    Gather {
        x: Var,
        index: Vec<usize>,
    },
    Concat(Vec<Var>),
    Sum(Var),
    Mean(Var),
    OneHotStraightThrough(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Ordered record of a forward computation.
///
/// Nodes are appended in execution order, so every op's inputs are strictly
/// earlier entries and a single reverse sweep visits each node once.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

const GELU_INV_SQRT2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

fn gelu_scalar(x: f64) -> f64 {
    x * 0.5 * (1.0 + libm::erf(x * GELU_INV_SQRT2))
}

fn gelu_grad_scalar(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * GELU_INV_SQRT2));
    cdf + x * INV_SQRT_2PI * (-0.5 * x * x).exp()
}

/// `c[m×n] = beta·c + a·b` with arbitrary (row, column) strides on `a` and `b`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (isize, isize),
    b: &[f64],
    b_strides: (isize, isize),
    c: &mut [f64],
    beta: f64,
) {
    let last = |rows: usize, cols: usize, (rs, cs): (isize, isize)| {
        (rows as isize - 1) * rs + (cols as isize - 1) * cs
    };
    assert!(last(m, k, a_strides) < a.len() as isize);
    assert!(last(k, n, b_strides) < b.len() as isize);
    assert!(m * n <= c.len());
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn broadcast_batch(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Offset of the `idx`-th broadcast batch element inside a tensor whose own
/// batch extents are `dims` (right-aligned against `full`).
fn batch_offset(idx: usize, full: &[usize], dims: &[usize], block: usize) -> usize {
    let mut rem = idx;
    let mut off = 0;
    let mut stride = block;
    for (pos, &extent) in full.iter().enumerate().rev() {
        let coord = rem % extent;
        rem /= extent;
        let shift = full.len() - dims.len();
        if pos >= shift {
            let own = dims[pos - shift];
            if own != 1 {
                off += coord * stride;
            }
            stride *= own;
        }
    }
    off
}

fn row_count(shape: &[usize]) -> (usize, usize) {
    let width = *shape.last().expect("rank >= 1");
    (shape.iter().product::<usize>() / width, width)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, true)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false)
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op: Op::Leaf,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated by the last [`backward`](Self::backward) call.
    /// `None` when the node does not depend on any trainable leaf.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// Gradient as a tensor, zero-filled for nodes that received none.
    pub fn grad_tensor(&self, v: Var) -> Tensor {
        let shape = self.shape(v).to_vec();
        match self.grad(v) {
            Some(g) => Tensor::new(&shape, g.to_vec()).expect("grad shape"),
            None => Tensor::zeros(&shape),
        }
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::numeric(format!("non-finite output from {op_name}")));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        self.grads.push(None);
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn row_operand(&self, op: &'static str, x: Var, v: Var) -> Result<()> {
        let xs = self.shape(x);
        let vs = self.shape(v);
        if vs.len() != 1 || xs.last() != vs.first() {
            return Err(Error::shape(op, xs, vs));
        }
        Ok(())
    }

    // ---------------------------------------------------------------- linear algebra

    /// Batched matrix product `[..., m, k] · [..., k, n] -> [..., m, n]` with
    /// broadcasting over the leading (batch) extents.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 || sa[sa.len() - 1] != sb[sb.len() - 2] {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let n = sb[sb.len() - 1];
        let ba = &sa[..sa.len() - 2];
        let bb = &sb[..sb.len() - 2];
        let batch = broadcast_batch(ba, bb).ok_or_else(|| Error::shape("matmul", &sa, &sb))?;

        let (rows, blocks, mut out_shape) = if bb.iter().all(|&d| d == 1) {
            // Shared right operand: fold the whole left batch into one product.
            let lead: usize = ba.iter().product();
            let mut shape = batch.clone();
            shape.extend([m, n]);
            (lead * m, vec![(0, 0)], shape)
        } else {
            let count: usize = batch.iter().product();
            let blocks = (0..count)
                .map(|i| {
                    (
                        batch_offset(i, &batch, ba, m * k),
                        batch_offset(i, &batch, bb, k * n),
                    )
                })
                .collect();
            let mut shape = batch.clone();
            shape.extend([m, n]);
            (m, blocks, shape)
        };
        if out_shape.len() < 2 {
            out_shape = vec![m, n];
        }

        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![0.0; blocks.len() * rows * n];
        for (i, &(ao, bo)) in blocks.iter().enumerate() {
            gemm(
                rows,
                k,
                n,
                &av[ao..],
                (k as isize, 1),
                &bv[bo..],
                (n as isize, 1),
                &mut out[i * rows * n..(i + 1) * rows * n],
                0.0,
            );
        }
        let value = Tensor::new(&out_shape, out)?;
        self.push(
            "matmul",
            value,
            Op::Matmul {
                a,
                b,
                m: rows,
                k,
                n,
                blocks,
            },
            &[a, b],
        )
    }

    /// Swaps the last two axes.
    pub fn transpose_last2(&mut self, x: Var) -> Result<Var> {
        let rank = self.shape(x).len();
        if rank < 2 {
            return Err(Error::shape("transpose", self.shape(x), &[]));
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(rank - 1, rank - 2);
        self.permute(x, &perm)
    }

    /// General axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let rank = shape.len();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape("permute", &shape, perm));
        }
        let mut in_strides = vec![1; rank];
        for i in (0..rank.saturating_sub(1)).rev() {
            in_strides[i] = in_strides[i + 1] * shape[i + 1];
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let numel = self.value(x).numel();
        let mut index = Vec::with_capacity(numel);
        let mut coord = vec![0usize; rank];
        let mut off = 0usize;
        for _ in 0..numel {
            index.push(off);
            for ax in (0..rank).rev() {
                coord[ax] += 1;
                off += strides[ax];
                if coord[ax] < out_shape[ax] {
                    break;
                }
                off -= strides[ax] * coord[ax];
                coord[ax] = 0;
            }
        }
        self.gather(x, index, &out_shape, "permute")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let numel = self.value(x).numel();
        if shape.iter().product::<usize>() != numel {
            return Err(Error::shape("reshape", self.shape(x), shape));
        }
        self.gather(x, (0..numel).collect(), shape, "reshape")
    }

    fn gather(&mut self, x: Var, index: Vec<usize>, shape: &[usize], name: &'static str) -> Result<Var> {
        let src = self.value(x).data();
        let data = index.iter().map(|&i| src[i]).collect();
        let value = Tensor::new(shape, data)?;
        self.push(name, value, Op::Gather { x, index }, &[x])
    }

    /// Splits the last axis of `x[..., T]` into overlapping windows of length
    /// `patch` taken every `stride` steps, giving `[..., L, patch]`. When the
    /// windows do not tile `T` exactly, the final value is repeated until the
    /// last window is full.
    pub fn unfold_last(&mut self, x: Var, patch: usize, stride: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (rows, len) = row_count(&shape);
        if patch == 0 || stride == 0 {
            return Err(Error::config("patch length and stride must be positive"));
        }
        if len < patch {
            return Err(Error::config(format!(
                "series length {len} shorter than patch length {patch}"
            )));
        }
        let tokens = patch_count(len, patch, stride);
        let mut index = Vec::with_capacity(rows * tokens * patch);
        for r in 0..rows {
            for l in 0..tokens {
                for p in 0..patch {
                    index.push(r * len + (l * stride + p).min(len - 1));
                }
            }
        }
        let mut out_shape = shape[..shape.len() - 1].to_vec();
        out_shape.extend([tokens, patch]);
        self.gather(x, index, &out_shape, "unfold")
    }

    /// Concatenates along the last axis; leading extents must agree.
    pub fn concat_last(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = self.shape(inputs[0]).to_vec();
        let lead = &first[..first.len() - 1];
        let mut width = 0;
        for &v in inputs {
            let s = self.shape(v);
            if &s[..s.len() - 1] != lead {
                return Err(Error::shape("concat", &first, s));
            }
            width += s[s.len() - 1];
        }
        let rows: usize = lead.iter().product();
        let mut data = Vec::with_capacity(rows * width);
        for r in 0..rows {
            for &v in inputs {
                let w = *self.shape(v).last().unwrap();
                data.extend_from_slice(&self.value(v).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(width);
        let value = Tensor::new(&shape, data)?;
        self.push("concat", value, Op::Concat(inputs.to_vec()), inputs)
    }

    // ---------------------------------------------------------------- elementwise

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let av = self.value(a);
        let data = av.data().iter().zip(self.value(b).data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(av.shape(), data).expect("same shape")
    }

    fn row_map(&self, x: Var, v: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let xv = self.value(x);
        let vv = self.value(v).data();
        let w = vv.len();
        let data = xv.data().iter().enumerate().map(|(i, &a)| f(a, vv[i % w])).collect();
        Tensor::new(xv.shape(), data).expect("same shape")
    }

    fn unary_map(&self, x: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let xv = self.value(x);
        Tensor::new(xv.shape(), xv.data().iter().map(|&a| f(a)).collect()).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.zip_map(a, b, |x, y| x + y);
        self.push("add", v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.zip_map(a, b, |x, y| x - y);
        self.push("sub", v, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.zip_map(a, b, |x, y| x * y);
        self.push("mul", v, Op::Mul(a, b), &[a, b])
    }

    /// `x[..., d] + v[d]`
    pub fn add_row(&mut self, x: Var, v: Var) -> Result<Var> {
        self.row_operand("add_row", x, v)?;
        let out = self.row_map(x, v, |a, b| a + b);
        self.push("add_row", out, Op::AddRow(x, v), &[x, v])
    }

    /// `x[..., d] - v[d]`
    pub fn sub_row(&mut self, x: Var, v: Var) -> Result<Var> {
        self.row_operand("sub_row", x, v)?;
        let out = self.row_map(x, v, |a, b| a - b);
        self.push("sub_row", out, Op::SubRow(x, v), &[x, v])
    }

    /// `x[..., d] * v[d]`
    pub fn mul_row(&mut self, x: Var, v: Var) -> Result<Var> {
        self.row_operand("mul_row", x, v)?;
        let out = self.row_map(x, v, |a, b| a * b);
        self.push("mul_row", out, Op::MulRow(x, v), &[x, v])
    }

    /// `x[..., d] / v[d]`
    pub fn div_row(&mut self, x: Var, v: Var) -> Result<Var> {
        self.row_operand("div_row", x, v)?;
        let out = self.row_map(x, v, |a, b| a / b);
        self.push("div_row", out, Op::DivRow(x, v), &[x, v])
    }

    /// Multiplies every element of `x` by the single-element tensor `s`.
    pub fn scale(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(Error::shape("scale", self.shape(x), self.shape(s)));
        }
        let k = self.value(s).item();
        let out = self.unary_map(x, |a| a * k);
        self.push("scale", out, Op::Scale(x, s), &[x, s])
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let out = self.unary_map(x, |a| a + c);
        self.push("add_scalar", out, Op::AddScalar(x), &[x])
    }

    pub fn mul_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let out = self.unary_map(x, |a| a * c);
        self.push("mul_scalar", out, Op::MulScalar(x, c), &[x])
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let out = self.unary_map(x, f64::exp);
        self.push("exp", out, Op::Exp(x), &[x])
    }

    /// Exact GELU, `x·Φ(x)` with Φ the standard normal CDF.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = self.unary_map(x, gelu_scalar);
        self.push("gelu", out, Op::Gelu(x), &[x])
    }

    // ---------------------------------------------------------------- row-wise

    /// Softmax over the last axis, stabilised by subtracting the row maximum.
    pub fn softmax_lastdim(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if !xv.is_finite() {
            return Err(Error::numeric("non-finite softmax input"));
        }
        let (rows, w) = row_count(xv.shape());
        let mut out = xv.data().to_vec();
        for r in 0..rows {
            let row = &mut out[r * w..(r + 1) * w];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        let value = Tensor::new(xv.shape(), out)?;
        self.push("softmax", value, Op::Softmax(x), &[x])
    }

    /// Standardises each last-axis slice (population variance) and applies
    /// the affine `gain`/`bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        self.row_operand("layer_norm", x, gain)?;
        self.row_operand("layer_norm", x, bias)?;
        let xv = self.value(x);
        let (rows, w) = row_count(xv.shape());
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = vec![0.0; rows * w];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; rows * w];
        for r in 0..rows {
            let row = &xv.data()[r * w..(r + 1) * w];
            let mean = row.iter().sum::<f64>() / w as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / w as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..w {
                let h = (row[j] - mean) * rs;
                xhat[r * w + j] = h;
                out[r * w + j] = h * g[j] + b[j];
            }
        }
        let value = Tensor::new(xv.shape(), out)?;
        self.push(
            "layer_norm",
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            &[x, gain, bias],
        )
    }

    /// `x / max(‖x‖₂, eps)` per last-axis slice; zero slices stay zero.
    pub fn l2_normalize_lastdim(&mut self, x: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let (rows, w) = row_count(xv.shape());
        let mut norms = vec![0.0; rows];
        let mut out = xv.data().to_vec();
        for r in 0..rows {
            let row = &mut out[r * w..(r + 1) * w];
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            norms[r] = n;
            let d = n.max(eps);
            for v in row.iter_mut() {
                *v /= d;
            }
        }
        let value = Tensor::new(xv.shape(), out)?;
        self.push("l2_normalize", value, Op::L2Normalize { x, norms, eps }, &[x])
    }

    /// Depthwise 1-D convolution over `x[B, d, L]` with one odd-length kernel
    /// per channel (`kernel[d, k]`). Zero padding of `(k-1)/2` on both sides
    /// keeps the length; channels never mix.
    pub fn depthwise_conv1d(&mut self, x: Var, kernel: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ks = self.shape(kernel).to_vec();
        if xs.len() != 3 || ks.len() != 2 || xs[1] != ks[0] {
            return Err(Error::shape("depthwise_conv1d", &xs, &ks));
        }
        let k = ks[1];
        if k.is_multiple_of(2) {
            return Err(Error::config(format!("depthwise kernel size must be odd, got {k}")));
        }
        let (batch, channels, len) = (xs[0], xs[1], xs[2]);
        let pad = (k - 1) / 2;
        let xv = self.value(x).data();
        let kv = self.value(kernel).data();
        let mut out = vec![0.0; xv.len()];
        for b in 0..batch {
            for c in 0..channels {
                let base = (b * channels + c) * len;
                let src = &xv[base..base + len];
                let dst = &mut out[base..base + len];
                let ker = &kv[c * k..(c + 1) * k];
                for (j, &w) in ker.iter().enumerate() {
                    // output l reads input l + j - pad
                    let lo = pad.saturating_sub(j);
                    let hi = (len + pad).saturating_sub(j).min(len);
                    for l in lo..hi {
                        dst[l] += w * src[l + j - pad];
                    }
                }
            }
        }
        let value = Tensor::new(&xs, out)?;
        self.push("depthwise_conv1d", value, Op::DepthwiseConv { x, kernel }, &[x, kernel])
    }

    /// Replaces each last-axis row by the one-hot vector of its arg-max (the
    /// lowest index wins ties). Gradients pass straight through to `x`.
    pub fn one_hot_straight_through(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (rows, w) = row_count(xv.shape());
        let mut out = vec![0.0; rows * w];
        for r in 0..rows {
            let row = &xv.data()[r * w..(r + 1) * w];
            let mut best = 0;
            for j in 1..w {
                if row[j] > row[best] {
                    best = j;
                }
            }
            out[r * w + best] = 1.0;
        }
        let value = Tensor::new(xv.shape(), out)?;
        self.push("one_hot", value, Op::OneHotStraightThrough(x), &[x])
    }

    // ---------------------------------------------------------------- reductions

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let s = xv.data().iter().sum::<f64>() / xv.numel() as f64;
        self.push("mean", Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// Mean of squared differences over all elements.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        let diff = self.sub(pred, target)?;
        let sq = self.mul(diff, diff)?;
        self.mean(sq)
    }

    // ---------------------------------------------------------------- backward

    /// Computes `d loss / d node` for every node that depends on a trainable
    /// leaf. Gradients from a previous call are discarded first, so repeated
    /// calls on one tape give identical results.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        for g in self.grads.iter_mut() {
            *g = None;
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.backprop_node(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn backprop_node(&mut self, i: usize, g: &[f64]) {
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            let node = &nodes[v.0];
            if !node.requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; node.value.numel()]);
            f(slot);
        };
        let val = |v: Var| nodes[v.0].value.data();

        match &nodes[i].op {
            Op::Leaf => {}
            Op::Matmul {
                a,
                b,
                m,
                k,
                n,
                blocks,
            } => {
                let (m, k, n) = (*m, *k, *n);
                acc(*a, &mut |ga| {
                    let bv = val(*b);
                    for (bi, &(ao, bo)) in blocks.iter().enumerate() {
                        // dA += dC · Bᵀ
                        gemm(
                            m,
                            n,
                            k,
                            &g[bi * m * n..],
                            (n as isize, 1),
                            &bv[bo..],
                            (1, n as isize),
                            &mut ga[ao..ao + m * k],
                            1.0,
                        );
                    }
                });
                acc(*b, &mut |gb| {
                    let av = val(*a);
                    for (bi, &(ao, bo)) in blocks.iter().enumerate() {
                        // dB += Aᵀ · dC
                        gemm(
                            k,
                            m,
                            n,
                            &av[ao..],
                            (1, k as isize),
                            &g[bi * m * n..],
                            (n as isize, 1),
                            &mut gb[bo..bo + k * n],
                            1.0,
                        );
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, d)| *x += d));
                acc(*b, &mut |gb| gb.iter_mut().zip(g).for_each(|(x, d)| *x += d));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, d)| *x += d));
                acc(*b, &mut |gb| gb.iter_mut().zip(g).for_each(|(x, d)| *x -= d));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |ga| {
                    for j in 0..ga.len() {
                        ga[j] += g[j] * bv[j];
                    }
                });
                acc(*b, &mut |gb| {
                    for j in 0..gb.len() {
                        gb[j] += g[j] * av[j];
                    }
                });
            }
            Op::AddRow(x, v) | Op::SubRow(x, v) => {
                let sign = if matches!(nodes[i].op, Op::SubRow(..)) { -1.0 } else { 1.0 };
                acc(*x, &mut |gx| gx.iter_mut().zip(g).for_each(|(a, d)| *a += d));
                acc(*v, &mut |gv| {
                    let w = gv.len();
                    for (j, d) in g.iter().enumerate() {
                        gv[j % w] += sign * d;
                    }
                });
            }
            Op::MulRow(x, v) => {
                let (xv, vv) = (val(*x), val(*v));
                let w = vv.len();
                acc(*x, &mut |gx| {
                    for (j, a) in gx.iter_mut().enumerate() {
                        *a += g[j] * vv[j % w];
                    }
                });
                acc(*v, &mut |gv| {
                    for (j, d) in g.iter().enumerate() {
                        gv[j % w] += d * xv[j];
                    }
                });
            }
            Op::DivRow(x, v) => {
                let (xv, vv) = (val(*x), val(*v));
                let w = vv.len();
                acc(*x, &mut |gx| {
                    for (j, a) in gx.iter_mut().enumerate() {
                        *a += g[j] / vv[j % w];
                    }
                });
                acc(*v, &mut |gv| {
                    for (j, d) in g.iter().enumerate() {
                        let s = vv[j % w];
                        gv[j % w] -= d * xv[j] / (s * s);
                    }
                });
            }
            Op::Scale(x, s) => {
                let k = val(*s)[0];
                let xv = val(*x);
                acc(*x, &mut |gx| gx.iter_mut().zip(g).for_each(|(a, d)| *a += d * k));
                acc(*s, &mut |gs| gs[0] += g.iter().zip(xv).map(|(d, a)| d * a).sum::<f64>());
            }
            Op::AddScalar(x) => {
                acc(*x, &mut |gx| gx.iter_mut().zip(g).for_each(|(a, d)| *a += d));
            }
            Op::MulScalar(x, c) => {
                acc(*x, &mut |gx| gx.iter_mut().zip(g).for_each(|(a, d)| *a += d * c));
            }
            Op::Exp(x) => {
                let y = nodes[i].value.data();
                acc(*x, &mut |gx| {
                    for j in 0..gx.len() {
                        gx[j] += g[j] * y[j];
                    }
                });
            }
            Op::Gelu(x) => {
                let xv = val(*x);
                acc(*x, &mut |gx| {
                    for j in 0..gx.len() {
                        gx[j] += g[j] * gelu_grad_scalar(xv[j]);
                    }
                });
            }
            Op::Softmax(x) => {
                let y = &nodes[i].value;
                let (rows, w) = row_count(y.shape());
                let y = y.data();
                acc(*x, &mut |gx| {
                    for r in 0..rows {
                        let s = r * w..(r + 1) * w;
                        let dot: f64 = g[s.clone()].iter().zip(&y[s.clone()]).map(|(a, b)| a * b).sum();
                        for j in s {
                            gx[j] += y[j] * (g[j] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let gv = val(*gain);
                let w = gv.len();
                let rows = rstd.len();
                acc(*x, &mut |gx| {
                    let mut dxhat = vec![0.0; w];
                    for r in 0..rows {
                        let s = r * w;
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for j in 0..w {
                            dxhat[j] = g[s + j] * gv[j];
                            mean_d += dxhat[j];
                            mean_dx += dxhat[j] * xhat[s + j];
                        }
                        mean_d /= w as f64;
                        mean_dx /= w as f64;
                        for j in 0..w {
                            gx[s + j] += rstd[r] * (dxhat[j] - mean_d - xhat[s + j] * mean_dx);
                        }
                    }
                });
                acc(*gain, &mut |gg| {
                    for (j, d) in g.iter().enumerate() {
                        gg[j % w] += d * xhat[j];
                    }
                });
                acc(*bias, &mut |gb| {
                    for (j, d) in g.iter().enumerate() {
                        gb[j % w] += d;
                    }
                });
            }
            Op::L2Normalize { x, norms, eps } => {
                let y = nodes[i].value.data();
                let w = y.len() / norms.len();
                acc(*x, &mut |gx| {
                    for (r, &n) in norms.iter().enumerate() {
                        let s = r * w..(r + 1) * w;
                        if n > *eps {
                            let dot: f64 = g[s.clone()].iter().zip(&y[s.clone()]).map(|(a, b)| a * b).sum();
                            for j in s {
                                gx[j] += (g[j] - y[j] * dot) / n;
                            }
                        } else {
                            for j in s {
                                gx[j] += g[j] / eps;
                            }
                        }
                    }
                });
            }
            Op::DepthwiseConv { x, kernel } => {
                let xs = nodes[x.0].value.shape();
                let (batch, channels, len) = (xs[0], xs[1], xs[2]);
                let k = nodes[kernel.0].value.shape()[1];
                let pad = (k - 1) / 2;
                let (xv, kv) = (val(*x), val(*kernel));
                acc(*x, &mut |gx| {
                    for b in 0..batch {
                        for c in 0..channels {
                            let base = (b * channels + c) * len;
                            for (j, &w) in kv[c * k..(c + 1) * k].iter().enumerate() {
                                let lo = pad.saturating_sub(j);
                                let hi = (len + pad).saturating_sub(j).min(len);
                                for l in lo..hi {
                                    gx[base + l + j - pad] += w * g[base + l];
                                }
                            }
                        }
                    }
                });
                acc(*kernel, &mut |gk| {
                    for b in 0..batch {
                        for c in 0..channels {
                            let base = (b * channels + c) * len;
                            for j in 0..k {
                                let lo = pad.saturating_sub(j);
                                let hi = (len + pad).saturating_sub(j).min(len);
                                let mut s = 0.0;
                                for l in lo..hi {
                                    s += g[base + l] * xv[base + l + j - pad];
                                }
                                gk[c * k + j] += s;
                            }
                        }
                    }
                });
            }
            Op::Gather { x, index } => {
                acc(*x, &mut |gx| {
                    for (d, &src) in g.iter().zip(index) {
                        gx[src] += d;
                    }
                });
            }
            Op::Concat(inputs) => {
                let widths: Vec<usize> = inputs.iter().map(|v| *nodes[v.0].value.shape().last().unwrap()).collect();
                let total: usize = widths.iter().sum();
                let rows = g.len() / total;
                let mut offset = 0;
                for (v, &w) in inputs.iter().zip(&widths) {
                    acc(*v, &mut |gv| {
                        for r in 0..rows {
                            for j in 0..w {
                                gv[r * w + j] += g[r * total + offset + j];
                            }
                        }
                    });
                    offset += w;
                }
            }
            Op::Sum(x) => {
                acc(*x, &mut |gx| gx.iter_mut().for_each(|a| *a += g[0]));
            }
            Op::Mean(x) => {
                let scale = g[0] / nodes[x.0].value.numel() as f64;
                acc(*x, &mut |gx| gx.iter_mut().for_each(|a| *a += scale));
            }
            Op::OneHotStraightThrough(x) => {
                acc(*x, &mut |gx| gx.iter_mut().zip(g).for_each(|(a, d)| *a += d));
            }
        }
    }
}

/// Number of windows produced by [`Tape::unfold_last`] for a series of
/// length `len` (after end padding).
pub fn patch_count(len: usize, patch: usize, stride: usize) -> usize {
    if len <= patch {
        return 1;
    }
    let rem = (len - patch) % stride;
    let padded = if rem == 0 { len } else { len + stride - rem };
    (padded - patch) / stride + 1
}
