//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every op appends one node holding its forward value. [`Tape::backward`]
//! walks the nodes in reverse and accumulates gradients into leaves created
//! with `requires_grad`. Node indices are assigned in creation order, so the
//! tape is topologically sorted by construction.
//!
//! Broadcasting is limited to scalar-with-tensor ([`Tape::scale`],
//! [`Tape::add_scalar`]) and the per-feature vectors of [`Tape::affine`].

use crate::error::{FraError, Result};
use crate::linalg::{col2im, counter_uniform, gemm, im2col, ConvGeom};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
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
    MatMul(Var, Var),
    BatchMatMul { a: Var, b: Var, transpose_b: bool },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    SoftmaxRows(Var),
    Reshape(Var),
    Permute { a: Var, axes: Vec<usize> },
    Concat { parts: Vec<Var>, axis: usize },
    MeanAxis { a: Var, axis: usize },
    MeanAll(Var),
    L2NormalizeRows { a: Var, norms: Vec<f64> },
    Dropout { a: Var, mask: Vec<f64> },
    Affine { a: Var, scale: Option<Var>, shift: Option<Var> },
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom, cols: Vec<f64> },
    ConvTranspose2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    Bce { p: Var, target: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    requires_grad: bool,
    op: Op,
}

/// Clamp applied to reconstruction probabilities before taking logarithms.
pub const BCE_EPS: f64 = 1e-7;

/// A single-use computation record. Confined to one thread for its lifetime.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    dropout_seed: u64,
    dropout_calls: u64,
    branch_sig: u64,
}

const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fold_mask(mut sig: u64, values: &[f64], active: impl Fn(f64) -> bool) -> u64 {
    for &x in values {
        sig = (sig ^ active(x) as u64).wrapping_mul(FNV_PRIME);
    }
    sig
}

fn dim_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> FraError {
    FraError::Dimension {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

/// Splits `shape` around `axis` into `(outer, len, inner)`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn permute_data(data: &[f64], shape: &[usize], axes: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * shape[d + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..data.len() {
        out.push(data[offset]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            offset += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            offset -= strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    (out, out_shape)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape whose dropout masks are derived from `seed`, so forward passes replay exactly.
    pub fn with_dropout_seed(seed: u64) -> Self {
        Tape {
            dropout_seed: seed,
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a leaf. Only leaves with `requires_grad` receive gradients.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(dim_err("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, 0.0, &mut out);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    /// Batched product over the leading axis: `[n,m,k]·[n,k,p]`, or `[n,m,k]·[n,p,k]ᵀ`
    /// when `transpose_b`.
    pub fn bmm(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let ok = sa.len() == 3
            && sb.len() == 3
            && sa[0] == sb[0]
            && if transpose_b { sa[2] == sb[2] } else { sa[2] == sb[1] };
        if !ok {
            return Err(dim_err("bmm", sa, sb));
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let p = if transpose_b { sb[1] } else { sb[2] };
        let mut out = vec![0.0; batch * m * p];
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        for i in 0..batch {
            gemm(
                m,
                k,
                p,
                &av[i * m * k..(i + 1) * m * k],
                false,
                &bv[i * k * p..(i + 1) * k * p],
                transpose_b,
                0.0,
                &mut out[i * m * p..(i + 1) * m * p],
            );
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::new(vec![batch, m, p], out)?,
            Op::BatchMatMul { a, b, transpose_b },
            rg,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err("add", self.shape(a), self.shape(b)));
        }
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.scale(b, -1.0);
        self.add(a, nb)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err("mul", self.shape(a), self.shape(b)));
        }
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a);
        let t = Tensor::new(v.shape().to_vec(), v.data().iter().map(|x| x * s).collect())
            .expect("shape preserved");
        let rg = self.rg(a);
        self.push(t, Op::Scale(a, s), rg)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a);
        let t = Tensor::new(v.shape().to_vec(), v.data().iter().map(|x| x + s).collect())
            .expect("shape preserved");
        let rg = self.rg(a);
        self.push(t, Op::AddScalar(a), rg)
    }

    fn map_unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let v = self.value(a);
        let t = Tensor::new(v.shape().to_vec(), v.data().iter().map(|&x| f(x)).collect())
            .expect("shape preserved");
        let rg = self.rg(a);
        self.push(t, op, rg)
    }

    /// Digest of every piecewise branch taken so far (ReLU masks, BCE clamps).
    /// Two forward passes with equal signatures ran on the same smooth piece.
    pub fn branch_signature(&self) -> u64 {
        self.branch_sig
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.branch_sig = fold_mask(self.branch_sig, self.value(a).data(), |x| x > 0.0);
        self.map_unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map_unary(a, sigmoid, Op::Sigmoid(a))
    }

    /// Softmax over the last axis, with max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let out = softmax_rows_data(v.data(), *v.shape().last().unwrap());
        let t = Tensor::new(v.shape().to_vec(), out).expect("shape preserved");
        let rg = self.rg(a);
        self.push(t, Op::SoftmaxRows(a), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshaped(shape)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Reshape(a), rg))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(a);
        let mut seen = vec![false; shape.len()];
        let valid = axes.len() == shape.len()
            && axes.iter().all(|&x| x < seen.len() && !std::mem::replace(&mut seen[x], true));
        if !valid {
            return Err(dim_err("permute", shape, axes));
        }
        let (data, out_shape) = permute_data(self.value(a).data(), shape, axes);
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::new(out_shape, data)?,
            Op::Permute {
                a,
                axes: axes.to_vec(),
            },
            rg,
        ))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| FraError::contract("concat of zero tensors"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(dim_err("concat", &base, &[axis]));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let same_rank = s.len() == base.len();
            if !same_rank || s.iter().enumerate().any(|(d, &e)| d != axis && e != base[d]) {
                return Err(dim_err("concat", &base, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis];
                let d = self.value(p).data();
                out.extend_from_slice(&d[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Mean over one axis; the axis is removed from the shape (rank-1 results keep `[1]`).
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(dim_err("mean_axis", &shape, &[axis]));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let d = self.value(a).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &d[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (acc, x) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *acc += x;
                }
            }
        }
        out.iter_mut().for_each(|v| *v /= len as f64);
        let mut out_shape: Vec<usize> = shape
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != axis)
            .map(|(_, &e)| e)
            .collect();
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(out_shape, out)?, Op::MeanAxis { a, axis }, rg))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let m = v.data().iter().sum::<f64>() / v.numel() as f64;
        let rg = self.rg(a);
        self.push(Tensor::scalar(m), Op::MeanAll(a), rg)
    }

    /// Scales each row (last axis) to unit L2 norm. Norms below 1e-12 are clamped.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let n = *v.shape().last().unwrap();
        let mut norms = Vec::with_capacity(v.numel() / n);
        let mut out = Vec::with_capacity(v.numel());
        for row in v.data().chunks(n) {
            let norm = crate::tensor::l2_norm(row).max(1e-12);
            norms.push(norm);
            out.extend(row.iter().map(|x| x / norm));
        }
        let t = Tensor::new(v.shape().to_vec(), out).expect("shape preserved");
        let rg = self.rg(a);
        self.push(t, Op::L2NormalizeRows { a, norms }, rg)
    }

    /// Inverted dropout. Identity when `!train` or `rate == 0`. Masks come from
    /// the tape's seed and a per-tape call counter, never from global state.
    pub fn dropout(&mut self, a: Var, rate: f64, train: bool) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(FraError::config(format!("dropout rate {rate} outside [0,1)")));
        }
        if !train || rate == 0.0 {
            return Ok(a);
        }
        let call = self.dropout_calls;
        self.dropout_calls += 1;
        let keep = 1.0 / (1.0 - rate);
        let v = self.value(a);
        let mask: Vec<f64> = (0..v.numel() as u64)
            .map(|i| {
                if counter_uniform(self.dropout_seed, call, i) >= rate {
                    keep
                } else {
                    0.0
                }
            })
            .collect();
        let out = v.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        let t = Tensor::new(v.shape().to_vec(), out)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Dropout { a, mask }, rg))
    }

    /// Per-feature `x·scale + shift` over the last axis.
    pub fn affine(&mut self, a: Var, scale: Option<Var>, shift: Option<Var>) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let n = *shape.last().unwrap();
        for p in [scale, shift].into_iter().flatten() {
            if self.shape(p) != [n] {
                return Err(dim_err("affine", &shape, self.shape(p)));
            }
        }
        let sc = scale.map(|s| self.value(s).data().to_vec());
        let sh = shift.map(|s| self.value(s).data().to_vec());
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_mut(n) {
            for (j, x) in row.iter_mut().enumerate() {
                if let Some(sc) = &sc {
                    *x *= sc[j];
                }
                if let Some(sh) = &sh {
                    *x += sh[j];
                }
            }
        }
        let rg = self.rg(a) || [scale, shift].into_iter().flatten().any(|p| self.rg(p));
        Ok(self.push(Tensor::new(shape, out)?, Op::Affine { a, scale, shift }, rg))
    }

    /// Cross-correlation of `x: [N,C,H,W]` with `w: [Cout,C,k,k]`, optional bias `[Cout]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] || sw[2] != sw[3] {
            return Err(dim_err("conv2d", &sx, &sw));
        }
        let (n, c, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (cout, k) = (sw[0], sw[2]);
        let out_h = conv_extent(h, k, stride, pad)?;
        let out_w = conv_extent(wd, k, stride, pad)?;
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(dim_err("conv2d bias", &[cout], self.shape(b)));
            }
        }
        let geom = ConvGeom {
            channels: c,
            in_h: h,
            in_w: wd,
            out_h,
            out_w,
            kernel: k,
            stride,
            pad,
        };
        let (rows, ncols) = (geom.col_rows(), geom.col_cols());
        let mut cols = vec![0.0; n * rows * ncols];
        let mut out = vec![0.0; n * cout * ncols];
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        for i in 0..n {
            let col = &mut cols[i * rows * ncols..(i + 1) * rows * ncols];
            im2col(&xv[i * c * h * wd..(i + 1) * c * h * wd], &geom, col);
            gemm(cout, rows, ncols, wv, false, col, false, 0.0, &mut out[i * cout * ncols..(i + 1) * cout * ncols]);
        }
        if let Some(b) = b {
            add_channel_bias(&mut out, self.value(b).data(), ncols);
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(
            Tensor::new(vec![n, cout, out_h, out_w], out)?,
            Op::Conv2d { x, w, b, geom, cols },
            rg,
        ))
    }

    /// Transposed convolution (adjoint of [`Tape::conv2d`]) of `x: [N,Cin,H,W]` with
    /// `w: [Cin,Cout,k,k]`. Output extent is `(H−1)·stride − 2·pad + k + output_pad`.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        output_pad: usize,
    ) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[0] || sw[2] != sw[3] {
            return Err(dim_err("conv_transpose2d", &sx, &sw));
        }
        if stride == 0 || output_pad >= stride {
            return Err(FraError::config(format!(
                "conv_transpose2d needs stride > output_pad, got stride {stride} output_pad {output_pad}"
            )));
        }
        let (n, cin, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (cout, k) = (sw[1], sw[2]);
        let extent = |e: usize| -> Result<usize> {
            let full = (e - 1) * stride + k + output_pad;
            full.checked_sub(2 * pad).filter(|&v| v > 0).ok_or_else(|| {
                FraError::config(format!("conv_transpose2d output extent non-positive for input {e}"))
            })
        };
        let (out_h, out_w) = (extent(h)?, extent(wd)?);
        let geom = ConvGeom {
            channels: cout,
            in_h: out_h,
            in_w: out_w,
            out_h: h,
            out_w: wd,
            kernel: k,
            stride,
            pad,
        };
        let (rows, ncols) = (geom.col_rows(), geom.col_cols());
        let mut cols = vec![0.0; rows * ncols];
        let mut out = vec![0.0; n * cout * out_h * out_w];
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        for i in 0..n {
            gemm(rows, cin, ncols, wv, true, &xv[i * cin * ncols..(i + 1) * cin * ncols], false, 0.0, &mut cols);
            col2im(&cols, &geom, &mut out[i * cout * out_h * out_w..(i + 1) * cout * out_h * out_w]);
        }
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(dim_err("conv_transpose2d bias", &[cout], self.shape(b)));
            }
            add_channel_bias(&mut out, self.value(b).data(), out_h * out_w);
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(
            Tensor::new(vec![n, cout, out_h, out_w], out)?,
            Op::ConvTranspose2d { x, w, b, geom },
            rg,
        ))
    }

    /// Pixel-mean binary cross-entropy of probabilities `p` against a fixed 0/1 target.
    pub fn bce_mean(&mut self, p: Var, target: &Tensor) -> Result<Var> {
        if self.shape(p) != target.shape() {
            return Err(dim_err("bce", self.shape(p), target.shape()));
        }
        let loss = bce_value(self.value(p).data(), target.data());
        self.branch_sig = fold_mask(self.branch_sig, self.value(p).data(), |x| {
            !(BCE_EPS..=1.0 - BCE_EPS).contains(&x)
        });
        let rg = self.rg(p);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Bce {
                p,
                target: target.data().to_vec(),
            },
            rg,
        ))
    }

    /// Populates leaf gradients of the scalar `loss`. Gradients accumulate across calls.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(FraError::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                let node = &mut self.nodes[i];
                match &mut node.grad {
                    Some(acc) => acc.data_mut().iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => node.grad = Some(Tensor::new(node.value.shape().to_vec(), g)?),
                }
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
        }
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, contrib: impl FnOnce(&mut [f64])) {
        if !self.rg(v) {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()]);
        contrib(slot);
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                self.accumulate(grads, *a, |da| gemm(m, n, k, g, false, bv, true, 1.0, da));
                self.accumulate(grads, *b, |db| gemm(k, m, n, av, true, g, false, 1.0, db));
            }
            Op::BatchMatMul { a, b, transpose_b } => {
                let sa = self.shape(*a);
                let (batch, m, k) = (sa[0], sa[1], sa[2]);
                let p = out.shape()[2];
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let tb = *transpose_b;
                self.accumulate(grads, *a, |da| {
                    for s in 0..batch {
                        let gs = &g[s * m * p..(s + 1) * m * p];
                        let bs = &bv[s * k * p..(s + 1) * k * p];
                        // dA = dC·Bᵀ, with B stored k×p, or p×k when transposed.
                        gemm(m, p, k, gs, false, bs, !tb, 1.0, &mut da[s * m * k..(s + 1) * m * k]);
                    }
                });
                self.accumulate(grads, *b, |db| {
                    for s in 0..batch {
                        let gs = &g[s * m * p..(s + 1) * m * p];
                        let as_ = &av[s * m * k..(s + 1) * m * k];
                        let dbs = &mut db[s * k * p..(s + 1) * k * p];
                        if tb {
                            gemm(p, m, k, gs, true, as_, false, 1.0, dbs);
                        } else {
                            gemm(k, m, p, as_, true, gs, false, 1.0, dbs);
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    self.accumulate(grads, v, |d| d.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                }
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                self.accumulate(grads, *a, |d| {
                    for ((x, gy), other) in d.iter_mut().zip(g).zip(bv) {
                        *x += gy * other;
                    }
                });
                self.accumulate(grads, *b, |d| {
                    for ((x, gy), other) in d.iter_mut().zip(g).zip(av) {
                        *x += gy * other;
                    }
                });
            }
            Op::Scale(a, s) => {
                self.accumulate(grads, *a, |d| d.iter_mut().zip(g).for_each(|(x, y)| *x += s * y));
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                self.accumulate(grads, *a, |d| d.iter_mut().zip(g).for_each(|(x, y)| *x += y));
            }
            Op::Relu(a) => {
                let av = self.value(*a).data();
                self.accumulate(grads, *a, |d| {
                    for ((x, gy), inp) in d.iter_mut().zip(g).zip(av) {
                        if *inp > 0.0 {
                            *x += gy;
                        }
                    }
                });
            }
            Op::Sigmoid(a) => {
                let ov = out.data();
                self.accumulate(grads, *a, |d| {
                    for ((x, gy), s) in d.iter_mut().zip(g).zip(ov) {
                        *x += gy * s * (1.0 - s);
                    }
                });
            }
            Op::SoftmaxRows(a) => {
                let n = *out.shape().last().unwrap();
                let ov = out.data();
                self.accumulate(grads, *a, |d| {
                    for ((drow, grow), srow) in d.chunks_mut(n).zip(g.chunks(n)).zip(ov.chunks(n)) {
                        let inner: f64 = grow.iter().zip(srow).map(|(x, y)| x * y).sum();
                        for ((x, gy), s) in drow.iter_mut().zip(grow).zip(srow) {
                            *x += s * (gy - inner);
                        }
                    }
                });
            }
            Op::Permute { a, axes } => {
                let mut inverse = vec![0; axes.len()];
                for (i, &ax) in axes.iter().enumerate() {
                    inverse[ax] = i;
                }
                let (back, _) = permute_data(g, out.shape(), &inverse);
                self.accumulate(grads, *a, |d| d.iter_mut().zip(&back).for_each(|(x, y)| *x += y));
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = split_axis(out.shape(), *axis);
                let mut offset = 0;
                for &p in parts {
                    let len = self.shape(p)[*axis];
                    self.accumulate(grads, p, |d| {
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + len) * inner];
                            let dst = &mut d[o * len * inner..(o + 1) * len * inner];
                            dst.iter_mut().zip(src).for_each(|(x, y)| *x += y);
                        }
                    });
                    offset += len;
                }
            }
            Op::MeanAxis { a, axis } => {
                let (outer, len, inner) = split_axis(self.shape(*a), *axis);
                let inv = 1.0 / len as f64;
                self.accumulate(grads, *a, |d| {
                    for o in 0..outer {
                        for l in 0..len {
                            let dst = &mut d[(o * len + l) * inner..(o * len + l + 1) * inner];
                            let src = &g[o * inner..(o + 1) * inner];
                            dst.iter_mut().zip(src).for_each(|(x, y)| *x += y * inv);
                        }
                    }
                });
            }
            Op::MeanAll(a) => {
                let n = self.value(*a).numel() as f64;
                self.accumulate(grads, *a, |d| d.iter_mut().for_each(|x| *x += g[0] / n));
            }
            Op::L2NormalizeRows { a, norms } => {
                let n = *out.shape().last().unwrap();
                let ov = out.data();
                self.accumulate(grads, *a, |d| {
                    for (r, norm) in norms.iter().enumerate() {
                        let y = &ov[r * n..(r + 1) * n];
                        let gy = &g[r * n..(r + 1) * n];
                        let proj: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            d[r * n + j] += (gy[j] - y[j] * proj) / norm;
                        }
                    }
                });
            }
            Op::Dropout { a, mask } => {
                self.accumulate(grads, *a, |d| {
                    for ((x, gy), m) in d.iter_mut().zip(g).zip(mask) {
                        *x += gy * m;
                    }
                });
            }
            Op::Affine { a, scale, shift } => {
                let n = *out.shape().last().unwrap();
                let av = self.value(*a).data();
                let sc = scale.map(|s| self.value(s).data());
                self.accumulate(grads, *a, |d| {
                    for (j, (x, gy)) in d.iter_mut().zip(g).enumerate() {
                        *x += gy * sc.map_or(1.0, |s| s[j % n]);
                    }
                });
                if let Some(s) = scale {
                    self.accumulate(grads, *s, |d| {
                        for (j, (gy, x)) in g.iter().zip(av).enumerate() {
                            d[j % n] += gy * x;
                        }
                    });
                }
                if let Some(s) = shift {
                    self.accumulate(grads, *s, |d| {
                        for (j, gy) in g.iter().enumerate() {
                            d[j % n] += gy;
                        }
                    });
                }
            }
            Op::Conv2d { x, w, b, geom, cols } => {
                let n = self.shape(*x)[0];
                let cout = self.shape(*w)[0];
                let (rows, ncols) = (geom.col_rows(), geom.col_cols());
                let img = geom.channels * geom.in_h * geom.in_w;
                let wv = self.value(*w).data();
                self.accumulate(grads, *w, |dw| {
                    for i in 0..n {
                        let gi = &g[i * cout * ncols..(i + 1) * cout * ncols];
                        gemm(cout, ncols, rows, gi, false, &cols[i * rows * ncols..(i + 1) * rows * ncols], true, 1.0, dw);
                    }
                });
                if let Some(b) = b {
                    self.accumulate(grads, *b, |db| channel_bias_grad(g, db, ncols));
                }
                self.accumulate(grads, *x, |dx| {
                    let mut dcols = vec![0.0; rows * ncols];
                    for i in 0..n {
                        let gi = &g[i * cout * ncols..(i + 1) * cout * ncols];
                        gemm(rows, cout, ncols, wv, true, gi, false, 0.0, &mut dcols);
                        col2im(&dcols, geom, &mut dx[i * img..(i + 1) * img]);
                    }
                });
            }
            Op::ConvTranspose2d { x, w, b, geom } => {
                let n = self.shape(*x)[0];
                let cin = self.shape(*x)[1];
                let (rows, ncols) = (geom.col_rows(), geom.col_cols());
                let out_img = geom.channels * geom.in_h * geom.in_w;
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                let mut gcols = vec![0.0; n * rows * ncols];
                for i in 0..n {
                    im2col(&g[i * out_img..(i + 1) * out_img], geom, &mut gcols[i * rows * ncols..(i + 1) * rows * ncols]);
                }
                self.accumulate(grads, *w, |dw| {
                    for i in 0..n {
                        let xi = &xv[i * cin * ncols..(i + 1) * cin * ncols];
                        gemm(cin, ncols, rows, xi, false, &gcols[i * rows * ncols..(i + 1) * rows * ncols], true, 1.0, dw);
                    }
                });
                if let Some(b) = b {
                    self.accumulate(grads, *b, |db| channel_bias_grad(g, db, geom.in_h * geom.in_w));
                }
                self.accumulate(grads, *x, |dx| {
                    for i in 0..n {
                        let gc = &gcols[i * rows * ncols..(i + 1) * rows * ncols];
                        gemm(cin, rows, ncols, wv, false, gc, false, 1.0, &mut dx[i * cin * ncols..(i + 1) * cin * ncols]);
                    }
                });
            }
            Op::Bce { p, target } => {
                let pv = self.value(*p).data();
                let inv = g[0] / pv.len() as f64;
                self.accumulate(grads, *p, |d| {
                    for ((x, &pr), &y) in d.iter_mut().zip(pv).zip(target) {
                        // Clamped region has zero derivative.
                        if pr > BCE_EPS && pr < 1.0 - BCE_EPS {
                            *x += inv * ((1.0 - y) / (1.0 - pr) - y / pr);
                        }
                    }
                });
            }
        }
    }
}

fn conv_extent(input: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    let span = (input + 2 * pad).checked_sub(k);
    match span {
        Some(s) if stride > 0 && s % stride == 0 => Ok(s / stride + 1),
        _ => Err(FraError::config(format!(
            "conv2d output extent (({input} + 2·{pad} − {k}) / {stride} + 1) is not a positive integer"
        ))),
    }
}

fn add_channel_bias(out: &mut [f64], bias: &[f64], plane: usize) {
    for (i, chunk) in out.chunks_mut(plane).enumerate() {
        let b = bias[i % bias.len()];
        chunk.iter_mut().for_each(|v| *v += b);
    }
}

fn channel_bias_grad(g: &[f64], db: &mut [f64], plane: usize) {
    let c = db.len();
    for (i, chunk) in g.chunks(plane).enumerate() {
        db[i % c] += chunk.iter().sum::<f64>();
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_rows_data(data: &[f64], n: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(data.len());
    for row in data.chunks(n) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let start = out.len();
        let mut sum = 0.0;
        for &x in row {
            let e = (x - max).exp();
            sum += e;
            out.push(e);
        }
        out[start..].iter_mut().for_each(|v| *v /= sum);
    }
    out
}

/// Mean BCE with probabilities clamped to `[BCE_EPS, 1 − BCE_EPS]`.
pub fn bce_value(p: &[f64], y: &[f64]) -> f64 {
    let total: f64 = p
        .iter()
        .zip(y)
        .map(|(&p, &y)| {
            let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum();
    total / p.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_selector() {
        let mut tape = Tape::new();
        let i2 = tape.constant(Tensor::eye(2));
        let m = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let p = tape.matmul(i2, m).unwrap();
        assert_eq!(tape.value(p).data(), &[1.0, 2.0, 3.0, 4.0]);

        let sel = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 0.0]));
        let col = tape.constant(t(&[2, 1], &[5.0, 7.0]));
        let p = tape.matmul(sel, col).unwrap();
        assert_eq!(tape.value(p).data(), &[5.0, 0.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3] vs [2, 3]"), "{msg}");
    }

    #[test]
    fn softmax_uniform_and_stable() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2, 3], &[0.0, 0.0, 0.0, 1000.0, 0.0, 0.0]));
        let s = tape.softmax_rows(x);
        let v = tape.value(s).data();
        for &p in &v[..3] {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        assert!((v[3] - 1.0).abs() < 1e-15 && v[4] < 1e-300 && v[5] < 1e-300);
        assert!(v.iter().all(|p| p.is_finite()));
    }

    #[test]
    fn conv2d_identity_kernel_and_constant_field() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 1, 3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]));
        let k = tape.constant(t(&[1, 1, 1, 1], &[1.0]));
        let y = tape.conv2d(x, k, None, 1, 0).unwrap();
        assert_eq!(tape.value(y), tape.value(x));

        let ones = tape.constant(Tensor::full(&[1, 1, 4, 4], 1.0));
        let k2 = tape.constant(Tensor::full(&[1, 1, 2, 2], 1.0));
        let y = tape.conv2d(ones, k2, None, 2, 0).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 2, 2]);
        assert!(tape.value(y).data().iter().all(|&v| v == 4.0));
    }

    #[test]
    fn conv2d_rejects_fractional_extent() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 1, 64, 64]));
        let k = tape.constant(Tensor::zeros(&[1, 1, 3, 3]));
        assert!(matches!(tape.conv2d(x, k, None, 2, 1), Err(FraError::Config(_))));
    }

    #[test]
    fn conv_transpose_doubles_extent() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[2, 3, 8, 8], 0.5));
        let w = tape.constant(Tensor::full(&[3, 2, 4, 4], 0.1));
        let y = tape.conv_transpose2d(x, w, None, 2, 1, 0).unwrap();
        assert_eq!(tape.shape(y), &[2, 2, 16, 16]);
    }

    #[test]
    fn backward_sum_gives_ones() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2, 3], &[1.0, -2.0, 3.0, 0.5, 0.0, 9.0]));
        let m = tape.mean_all(x);
        let s = tape.scale(m, 6.0);
        tape.backward(s).unwrap();
        assert!(tape.grad(x).unwrap().data().iter().all(|&g| (g - 1.0).abs() < 1e-15));
    }

    #[test]
    fn backward_product_rule() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(3.0));
        let y = tape.param(Tensor::scalar(-4.0));
        let p = tape.mul(x, y).unwrap();
        tape.backward(p).unwrap();
        assert_eq!(tape.grad(x).unwrap().item(), -4.0);
        assert_eq!(tape.grad(y).unwrap().item(), 3.0);
    }

    #[test]
    fn backward_accumulates_and_zeroing_is_idempotent() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[3], &[1.0, 2.0, 3.0]));
        let sq = tape.mul(x, x).unwrap();
        let l = tape.mean_all(sq);
        tape.backward(l).unwrap();
        let first = tape.grad(x).unwrap().clone();
        tape.backward(l).unwrap();
        let doubled = tape.grad(x).unwrap().clone();
        for (a, b) in first.data().iter().zip(doubled.data()) {
            assert_eq!(2.0 * a, *b);
        }
        tape.zero_grads();
        tape.backward(l).unwrap();
        assert!(tape.grad(x).unwrap().bitwise_eq(&first));
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::zeros(&[2]));
        assert!(matches!(tape.backward(x), Err(FraError::Contract(_))));
    }

    #[test]
    fn dropout_replays_with_same_seed() {
        let run = |seed| {
            let mut tape = Tape::with_dropout_seed(seed);
            let x = tape.constant(Tensor::full(&[100], 1.0));
            let d = tape.dropout(x, 0.4, true).unwrap();
            tape.value(d).clone()
        };
        assert!(run(5).bitwise_eq(&run(5)));
        assert!(!run(5).bitwise_eq(&run(6)));
        let v = run(5);
        assert!(v.data().iter().all(|&x| x == 0.0 || (x - 1.0 / 0.6).abs() < 1e-15));

        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[4], 2.0));
        assert_eq!(tape.dropout(x, 0.4, false).unwrap(), x);
    }

    #[test]
    fn permute_roundtrip() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![2, 3, 4], (0..24).map(f64::from).collect()).unwrap());
        let p = tape.permute(x, &[2, 0, 1]).unwrap();
        assert_eq!(tape.shape(p), &[4, 2, 3]);
        // element [k, i, j] == x[i, j, k]
        assert_eq!(tape.value(p).data()[1 * 6 + 1 * 3 + 2], (1 * 12 + 2 * 4 + 1) as f64);
        let back = tape.permute(p, &[1, 2, 0]).unwrap();
        assert_eq!(tape.value(back), tape.value(x));
        assert!(tape.permute(x, &[0, 0, 1]).is_err());
    }

    #[test]
    fn concat_and_mean_axis() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 1], &[1.0, 2.0]));
        let b = tape.constant(t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]));
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.value(c).data(), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
        let m = tape.mean_axis(c, 0).unwrap();
        assert_eq!(tape.value(m).data(), &[1.5, 4.0, 5.0]);
    }

    #[test]
    fn bce_half_is_ln2() {
        let p = vec![0.5; 16];
        let y: Vec<f64> = (0..16).map(|i| (i % 2) as f64).collect();
        assert!((bce_value(&p, &y) - std::f64::consts::LN_2).abs() < 1e-15);
        let perfect = bce_value(&y, &y);
        assert!(perfect >= 0.0 && perfect <= -(1.0 - BCE_EPS).ln() + 1e-18);
    }

    #[test]
    fn softmax_matches_direct_evaluation() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 3], &[1.0, 2.0, 3.0]));
        let s = tape.softmax_rows(x);
        let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
        for (k, &got) in tape.value(s).data().iter().enumerate() {
            let want = ((k + 1) as f64).exp() / z;
            assert!(((got - want) / want).abs() < 1e-12, "{got} vs {want}");
        }
    }

    fn matmul_oracle(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> (Vec<f64>, Vec<f64>) {
        let mut c = vec![0.0; m * n];
        let mut scale = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for l in 0..k {
                    c[i * n + j] += a[i * k + l] * b[l * n + j];
                    scale[i * n + j] += (a[i * k + l] * b[l * n + j]).abs();
                }
            }
        }
        (c, scale)
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_oracle(x: &[f64], w: &[f64], c: usize, h: usize, wd: usize, cout: usize, k: usize, stride: usize, pad: usize) -> (Vec<f64>, Vec<f64>) {
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (wd + 2 * pad - k) / stride + 1;
        let mut out = vec![0.0; cout * oh * ow];
        let mut scale = vec![0.0; cout * oh * ow];
        for o in 0..cout {
            for r in 0..oh {
                for q in 0..ow {
                    for ci in 0..c {
                        for u in 0..k {
                            for v in 0..k {
                                let (y, xx) = ((r * stride + u) as isize - pad as isize, (q * stride + v) as isize - pad as isize);
                                if y < 0 || xx < 0 || y >= h as isize || xx >= wd as isize {
                                    continue;
                                }
                                let term = x[(ci * h + y as usize) * wd + xx as usize] * w[((o * c + ci) * k + u) * k + v];
                                out[(o * oh + r) * ow + q] += term;
                                scale[(o * oh + r) * ow + q] += term.abs();
                            }
                        }
                    }
                }
            }
        }
        (out, scale)
    }

    fn close(got: &[f64], want: &[f64], scale: &[f64], tol: f64) -> bool {
        got.len() == want.len()
            && got.iter().zip(want).zip(scale).all(|((g, w), s)| (g - w).abs() <= tol * s.max(f64::MIN_POSITIVE))
    }

    fn values(n: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-2.0..2.0f64, n)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(128))]

        #[test]
        fn matmul_matches_triple_loop((m, k, n, a, b) in (1usize..=8, 1usize..=8, 1usize..=8)
            .prop_flat_map(|(m, k, n)| (Just(m), Just(k), Just(n), values(m * k), values(k * n))))
        {
            let mut tape = Tape::new();
            let av = tape.constant(t(&[m, k], &a));
            let bv = tape.constant(t(&[k, n], &b));
            let c = tape.matmul(av, bv).unwrap();
            let (want, scale) = matmul_oracle(&a, &b, m, k, n);
            prop_assert!(close(tape.value(c).data(), &want, &scale, 1e-12));
        }

        #[test]
        fn conv2d_matches_quadruple_loop(
            (c, h, wd, cout, k, stride, pad, x, w) in (1usize..=3, 1usize..=8, 1usize..=8, 1usize..=3, 1usize..=4, 1usize..=2, 0usize..=1)
                .prop_filter("integral extent", |&(_, h, wd, _, k, s, p)| {
                    h + 2 * p >= k && wd + 2 * p >= k && (h + 2 * p - k) % s == 0 && (wd + 2 * p - k) % s == 0
                })
                .prop_flat_map(|(c, h, wd, cout, k, s, p)| {
                    (Just(c), Just(h), Just(wd), Just(cout), Just(k), Just(s), Just(p), values(c * h * wd), values(cout * c * k * k))
                }))
        {
            let mut tape = Tape::new();
            let xv = tape.constant(t(&[1, c, h, wd], &x));
            let wv = tape.constant(t(&[cout, c, k, k], &w));
            let y = tape.conv2d(xv, wv, None, stride, pad).unwrap();
            let (want, scale) = conv_oracle(&x, &w, c, h, wd, cout, k, stride, pad);
            prop_assert!(close(tape.value(y).data(), &want, &scale, 1e-12));
        }

        #[test]
        fn softmax_rows_sum_to_one(rows in 1usize..6, cols in 1usize..10, seed in any::<u64>(), mag in prop::sample::select(vec![1.0, 30.0, 1e3])) {
            let data: Vec<f64> = (0..rows * cols)
                .map(|i| mag * (2.0 * counter_uniform(seed, 0, i as u64) - 1.0))
                .collect();
            let mut tape = Tape::new();
            let x = tape.constant(t(&[rows, cols], &data));
            let s = tape.softmax_rows(x);
            for row in tape.value(s).data().chunks(cols) {
                prop_assert!(row.iter().all(|&p| p >= 0.0 && p.is_finite()));
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }
}
