//! Tape-based reverse-mode automatic differentiation.
//!
//! Every forward operation appends one node to a [`Tape`]. Nodes only ever
//! reference earlier nodes, so the tape is topologically ordered by
//! construction and a single reverse sweep visits each operation once.

mod gradcheck;
pub(crate) mod kernels;

pub use gradcheck::{finite_diff_check, finite_diff_check_sampled, FdReport};

use kernels::ConvGeom;

use crate::error::{cfg_err, contract_err, dim_err, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Floor applied to the argument of [`Tape::log`].
pub const LOG_FLOOR: f64 = 1e-12;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Relu,
    Sigmoid,
    Tanh,
    Softplus,
    /// Natural log with the argument clamped to at least [`LOG_FLOOR`].
    Log,
    Exp,
    Sqrt,
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    MatMul {
        a: Var,
        b: Var,
    },
    Transpose(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    AdaptiveAvgPool {
        x: Var,
        bin: usize,
    },
    Upsample2x(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Unary(Var, Unary),
    ChannelNorm {
        x: Var,
        gain: Var,
        shift: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Reshape(Var),
    Concat {
        xs: Vec<Var>,
        axis: usize,
    },
    Sum(Var),
    Mean(Var),
    SpatialMean(Var),
    NormalizeRows(Var),
    L2Normalize(Var),
    RmsNorm {
        x: Var,
        rms: T,
    },
    Gather {
        x: Var,
        idx: Vec<usize>,
    },
    LogSumExp(Var),
    Pick {
        x: Var,
        at: usize,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::MatMul { .. } => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Softmax { .. } => "softmax",
            Op::AdaptiveAvgPool { .. } => "adaptive_avg_pool",
            Op::Upsample2x(_) => "upsample2x",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(_) => "add_scalar",
            Op::Unary(..) => "unary",
            Op::ChannelNorm { .. } => "channel_norm",
            Op::Reshape(_) => "reshape",
            Op::Concat { .. } => "concat",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::SpatialMean(_) => "spatial_mean",
            Op::NormalizeRows(_) => "normalize_rows",
            Op::L2Normalize(_) => "l2_normalize",
            Op::RmsNorm { .. } => "rms_norm",
            Op::Gather { .. } => "gather",
            Op::LogSumExp(_) => "logsumexp",
            Op::Pick { .. } => "pick",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Ordered record of executed operations together with their outputs.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<Tensor<T>> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(&self.shapes[v.0], g.clone()).expect("gradient shape"))
    }

    pub fn raw(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Number of recorded operations with the given name (e.g. `"conv2d"`).
    pub fn count_ops(&self, name: &str) -> usize {
        self.nodes.iter().filter(|n| n.op.name() == name).count()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        debug_assert!(inputs.iter().all(|v| v.0 < self.nodes.len()));
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Places a tensor on the tape as a leaf.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            ));
        }
        Ok(())
    }

    fn chw(&self, v: Var, what: &str) -> Result<(usize, usize, usize)> {
        match *self.shape(v) {
            [c, h, w] => Ok((c, h, w)),
            ref s => Err(dim_err!("{what}: expected C×H×W, got {s:?}")),
        }
    }

    fn mat(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        match *self.shape(v) {
            [r, c] => Ok((r, c)),
            ref s => Err(dim_err!("{what}: expected a matrix, got {s:?}")),
        }
    }

    fn vector(&self, v: Var, what: &str) -> Result<usize> {
        match *self.shape(v) {
            [n] => Ok(n),
            ref s => Err(dim_err!("{what}: expected a vector, got {s:?}")),
        }
    }

    /// 2-D cross-correlation of a `C×H×W` input with an `O×C×k×k` kernel.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (c_in, h, wd) = self.chw(x, "conv2d input")?;
        let [c_out, wc, k, k2] = *self.shape(w) else {
            return Err(dim_err!("conv2d weight must be O×C×k×k, got {:?}", self.shape(w)));
        };
        if wc != c_in {
            return Err(dim_err!("conv2d: input has {c_in} channels, weight expects {wc}"));
        }
        if k != k2 || k % 2 == 0 {
            return Err(cfg_err!("conv2d: kernel must be square with odd size, got {k}×{k2}"));
        }
        if stride == 0 {
            return Err(cfg_err!("conv2d: stride must be at least 1"));
        }
        if let Some(b) = b {
            if self.shape(b) != [c_out] {
                return Err(dim_err!("conv2d bias must have {c_out} entries, got {:?}", self.shape(b)));
            }
        }
        let span_h = (h + 2 * pad).checked_sub(k);
        let span_w = (wd + 2 * pad).checked_sub(k);
        let (Some(span_h), Some(span_w)) = (span_h, span_w) else {
            return Err(cfg_err!("conv2d: kernel {k} larger than padded input {h}×{wd}"));
        };
        if span_h % stride != 0 || span_w % stride != 0 {
            return Err(cfg_err!(
                "conv2d: output size ({h}+2·{pad}−{k})/{stride}+1 is not integral"
            ));
        }
        let geom = ConvGeom {
            c_in,
            h,
            w: wd,
            c_out,
            k,
            stride,
            pad,
            h_out: span_h / stride + 1,
            w_out: span_w / stride + 1,
        };
        let out = kernels::conv2d_forward(
            &geom,
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
        );
        let value = Tensor::new(&[c_out, geom.h_out, geom.w_out], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(value, Op::Conv2d { x, w, b, geom }, &inputs))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.mat(a, "matmul lhs")?;
        let (k2, n) = self.mat(b, "matmul rhs")?;
        if k != k2 {
            return Err(dim_err!("matmul: inner dimensions {k} and {k2} differ"));
        }
        let out = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let value = Tensor::new(&[m, n], out)?;
        Ok(self.push(value, Op::MatMul { a, b }, &[a, b]))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.mat(x, "transpose")?;
        let out = kernels::transpose(self.value(x).data(), r, c);
        let value = Tensor::new(&[c, r], out)?;
        Ok(self.push(value, Op::Transpose(x), &[x]))
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(dim_err!("softmax: axis {axis} out of range for {shape:?}"));
        }
        let (outer, len, inner) = kernels::axis_split(&shape, axis);
        let out = kernels::softmax(self.value(x).data(), outer, len, inner);
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(value, Op::Softmax { x, axis }, &[x]))
    }

    /// Mean over a `bin×bin` grid of near-equal spatial cells.
    pub fn adaptive_avg_pool(&mut self, x: Var, bin: usize) -> Result<Var> {
        let (c, h, w) = self.chw(x, "adaptive_avg_pool")?;
        if bin == 0 || bin > h || bin > w {
            return Err(cfg_err!("adaptive_avg_pool: bin {bin} invalid for {h}×{w}"));
        }
        let out = kernels::adaptive_avg_pool(self.value(x).data(), c, h, w, bin);
        let value = Tensor::new(&[c, bin, bin], out)?;
        Ok(self.push(value, Op::AdaptiveAvgPool { x, bin }, &[x]))
    }

    /// Nearest-neighbour ×2 upsampling of a `C×H×W` tensor.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.chw(x, "upsample2x")?;
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(c * h * w * 4);
        for ch in 0..c {
            for yy in 0..2 * h {
                let row = &src[ch * h * w + (yy / 2) * w..ch * h * w + (yy / 2 + 1) * w];
                for &v in row {
                    out.push(v);
                    out.push(v);
                }
            }
        }
        let value = Tensor::new(&[c, 2 * h, 2 * w], out)?;
        Ok(self.push(value, Op::Upsample2x(x), &[x]))
    }

    fn zip_with(&mut self, a: Var, b: Var, what: &str, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        self.same_shape(a, b, what)?;
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| f(*x, *y)).collect();
        let value = Tensor::new(va.shape(), data)?;
        Ok(self.push(value, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let value = self.value(x).map(|v| v * s);
        self.push(value, Op::Scale(x, s), &[x])
    }

    pub fn add_scalar(&mut self, x: Var, s: T) -> Var {
        let value = self.value(x).map(|v| v + s);
        self.push(value, Op::AddScalar(x), &[x])
    }

    pub fn unary(&mut self, x: Var, f: Unary) -> Var {
        let floor = T::lit(LOG_FLOOR);
        let value = self.value(x).map(|v| match f {
            Unary::Relu => v.max(T::zero()),
            Unary::Sigmoid => sigmoid(v),
            Unary::Tanh => v.tanh(),
            Unary::Softplus => v.max(T::zero()) + (-v.abs()).exp().ln_1p(),
            Unary::Log => v.max(floor).ln(),
            Unary::Exp => v.exp(),
            Unary::Sqrt => v.max(T::zero()).sqrt(),
        });
        self.push(value, Op::Unary(x, f), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Relu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Tanh)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Softplus)
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Log)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Exp)
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sqrt)
    }

    /// Per-channel standardization over the spatial positions of one
    /// sample, followed by a per-channel affine map.
    pub fn channel_norm(&mut self, x: Var, gain: Var, shift: Var, eps: T) -> Result<Var> {
        let (c, h, w) = self.chw(x, "channel_norm")?;
        if self.shape(gain) != [c] || self.shape(shift) != [c] {
            return Err(dim_err!("channel_norm: gain/shift must have {c} entries"));
        }
        if eps <= T::zero() {
            return Err(cfg_err!("channel_norm: eps must be positive"));
        }
        let n = h * w;
        let nt = T::lit(n as f64);
        let src = self.value(x).data();
        let g = self.value(gain).data();
        let s = self.value(shift).data();
        let mut xhat = vec![T::zero(); c * n];
        let mut inv_std = vec![T::zero(); c];
        let mut out = vec![T::zero(); c * n];
        for ch in 0..c {
            let plane = &src[ch * n..(ch + 1) * n];
            let mean = plane.iter().copied().sum::<T>() / nt;
            let var = plane.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nt;
            let inv = T::one() / (var + eps).sqrt();
            inv_std[ch] = inv;
            for i in 0..n {
                let xh = (plane[i] - mean) * inv;
                xhat[ch * n + i] = xh;
                out[ch * n + i] = g[ch] * xh + s[ch];
            }
        }
        let value = Tensor::new(&[c, h, w], out)?;
        Ok(self.push(
            value,
            Op::ChannelNorm {
                x,
                gain,
                shift,
                xhat,
                inv_std,
            },
            &[x, gain, shift],
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshaped(shape)?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    /// Concatenates tensors that agree on every dimension except `axis`.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = xs.first() else {
            return Err(contract_err!("concat of an empty list"));
        };
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(dim_err!("concat: axis {axis} out of range for {base:?}"));
        }
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(dim_err!("concat: {s:?} incompatible with {base:?} on axis {axis}"));
            }
            total += s[axis];
        }
        let (outer, _, inner) = kernels::axis_split(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let len = self.shape(v)[axis] * inner;
                out.extend_from_slice(&self.value(v).data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(
            value,
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
            xs,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.data().iter().copied().sum::<T>() / T::lit(v.len() as f64);
        self.push(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// Global average pooling: `C×H×W → C`.
    pub fn spatial_mean(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.chw(x, "spatial_mean")?;
        let n = h * w;
        let src = self.value(x).data();
        let out = (0..c)
            .map(|ch| src[ch * n..(ch + 1) * n].iter().copied().sum::<T>() / T::lit(n as f64))
            .collect();
        let value = Tensor::new(&[c], out)?;
        Ok(self.push(value, Op::SpatialMean(x), &[x]))
    }

    /// Divides each row of a matrix by its sum.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.mat(x, "normalize_rows")?;
        let src = self.value(x).data();
        let mut out = src.to_vec();
        for row in out.chunks_mut(c) {
            let s: T = row.iter().copied().sum();
            if s == T::zero() {
                return Err(crate::error::Error::NonFinite(
                    "normalize_rows: row sums to zero".into(),
                ));
            }
            row.iter_mut().for_each(|v| *v /= s);
        }
        let value = Tensor::new(&[r, c], out)?;
        Ok(self.push(value, Op::NormalizeRows(x), &[x]))
    }

    /// Scales a vector to unit Euclidean norm.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        self.vector(x, "l2_normalize")?;
        let v = self.value(x);
        let norm = v.data().iter().map(|a| *a * *a).sum::<T>().sqrt();
        if norm == T::zero() {
            return Err(crate::error::Error::NonFinite("l2_normalize of a zero vector".into()));
        }
        let value = v.map(|a| a / norm);
        Ok(self.push(value, Op::L2Normalize(x), &[x]))
    }

    /// Divides by `sqrt(mean(x²) + eps)` over every entry. Unlike
    /// [`Self::channel_norm`] it keeps per-channel means and is finite on an
    /// all-zero input.
    pub fn rms_norm(&mut self, x: Var, eps: T) -> Result<Var> {
        if eps <= T::zero() {
            return Err(cfg_err!("rms_norm: eps must be positive"));
        }
        let v = self.value(x);
        let n = T::lit(v.len().max(1) as f64);
        let rms = (v.data().iter().map(|a| *a * *a).sum::<T>() / n + eps).sqrt();
        let value = v.map(|a| a / rms);
        Ok(self.push(value, Op::RmsNorm { x, rms }, &[x]))
    }

    /// Selects entries of a vector by index.
    pub fn gather(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let n = self.vector(x, "gather")?;
        if idx.is_empty() || idx.iter().any(|&i| i >= n) {
            return Err(dim_err!("gather: indices {idx:?} invalid for length {n}"));
        }
        let src = self.value(x).data();
        let value = Tensor::new(&[idx.len()], idx.iter().map(|&i| src[i]).collect())?;
        Ok(self.push(
            value,
            Op::Gather {
                x,
                idx: idx.to_vec(),
            },
            &[x],
        ))
    }

    /// `log Σ exp(x_i)` over a vector.
    pub fn logsumexp(&mut self, x: Var) -> Result<Var> {
        self.vector(x, "logsumexp")?;
        let src = self.value(x).data();
        let max = src.iter().copied().fold(T::neg_infinity(), T::max);
        let s: T = src.iter().map(|&v| (v - max).exp()).sum();
        let value = Tensor::scalar(max + s.ln());
        Ok(self.push(value, Op::LogSumExp(x), &[x]))
    }

    /// Largest entry of a vector (first on ties); gradient flows to that entry.
    pub fn max(&mut self, x: Var) -> Result<Var> {
        self.extremum(x, true)
    }

    /// Smallest entry of a vector (first on ties).
    pub fn min(&mut self, x: Var) -> Result<Var> {
        self.extremum(x, false)
    }

    fn extremum(&mut self, x: Var, largest: bool) -> Result<Var> {
        self.vector(x, "max/min")?;
        let src = self.value(x).data();
        let mut at = 0;
        for (i, &v) in src.iter().enumerate() {
            if (largest && v > src[at]) || (!largest && v < src[at]) {
                at = i;
            }
        }
        let value = Tensor::scalar(src[at]);
        Ok(self.push(value, Op::Pick { x, at }, &[x]))
    }

    /// Reverse sweep from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(contract_err!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            ));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(&self, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[idx];
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom } => {
                let need_b = b.is_some_and(|b| self.wants(b));
                let (dx, dw, db) = kernels::conv2d_backward(
                    geom,
                    self.value(*x).data(),
                    self.value(*w).data(),
                    g,
                    self.wants(*x),
                    self.wants(*w),
                    need_b,
                );
                accumulate(grads, self, *x, dx);
                accumulate(grads, self, *w, dw);
                if let Some(b) = b {
                    accumulate(grads, self, *b, db);
                }
            }
            Op::MatMul { a, b } => {
                let (m, k) = dims2(self.shape(*a));
                let n = self.shape(*b)[1];
                if self.wants(*a) {
                    let da = kernels::matmul_nt(g, self.value(*b).data(), m, k, n);
                    accumulate(grads, self, *a, da);
                }
                if self.wants(*b) {
                    let db = kernels::matmul_tn(self.value(*a).data(), g, m, k, n);
                    accumulate(grads, self, *b, db);
                }
            }
            Op::Transpose(x) => {
                let (r, c) = dims2(self.shape(*x));
                accumulate(grads, self, *x, kernels::transpose(g, c, r));
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = kernels::axis_split(node.value.shape(), *axis);
                let dx = kernels::softmax_backward(y, g, outer, len, inner);
                accumulate(grads, self, *x, dx);
            }
            Op::AdaptiveAvgPool { x, bin } => {
                let (c, h, w) = dims3(self.shape(*x));
                let dx = kernels::adaptive_avg_pool_backward(g, c, h, w, *bin);
                accumulate(grads, self, *x, dx);
            }
            Op::Upsample2x(x) => {
                let (c, h, w) = dims3(self.shape(*x));
                let mut dx = vec![T::zero(); c * h * w];
                for ch in 0..c {
                    for yy in 0..2 * h {
                        for xx in 0..2 * w {
                            dx[ch * h * w + (yy / 2) * w + xx / 2] += g[(ch * 2 * h + yy) * 2 * w + xx];
                        }
                    }
                }
                accumulate(grads, self, *x, dx);
            }
            Op::Add(a, b) => {
                accumulate(grads, self, *a, g.to_vec());
                accumulate(grads, self, *b, g.to_vec());
            }
            Op::Sub(a, b) => {
                accumulate(grads, self, *a, g.to_vec());
                accumulate(grads, self, *b, g.iter().map(|v| -*v).collect());
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    let vb = self.value(*b).data();
                    accumulate(grads, self, *a, g.iter().zip(vb).map(|(x, y)| *x * *y).collect());
                }
                if self.wants(*b) {
                    let va = self.value(*a).data();
                    accumulate(grads, self, *b, g.iter().zip(va).map(|(x, y)| *x * *y).collect());
                }
            }
            Op::Scale(x, s) => {
                accumulate(grads, self, *x, g.iter().map(|v| *v * *s).collect());
            }
            Op::AddScalar(x) | Op::Reshape(x) => {
                accumulate(grads, self, *x, g.to_vec());
            }
            Op::Unary(x, f) => {
                let xv = self.value(*x).data();
                let floor = T::lit(LOG_FLOOR);
                let half = T::lit(0.5);
                let dx = g
                    .iter()
                    .zip(xv.iter().zip(y))
                    .map(|(&gi, (&xi, &yi))| {
                        gi * match f {
                            Unary::Relu => {
                                if xi > T::zero() {
                                    T::one()
                                } else {
                                    T::zero()
                                }
                            }
                            Unary::Sigmoid => yi * (T::one() - yi),
                            Unary::Tanh => T::one() - yi * yi,
                            Unary::Softplus => sigmoid(xi),
                            Unary::Log => {
                                if xi >= floor {
                                    T::one() / xi
                                } else {
                                    T::zero()
                                }
                            }
                            Unary::Exp => yi,
                            Unary::Sqrt => {
                                if yi > T::zero() {
                                    half / yi
                                } else {
                                    T::zero()
                                }
                            }
                        }
                    })
                    .collect();
                accumulate(grads, self, *x, dx);
            }
            Op::ChannelNorm {
                x,
                gain,
                shift,
                xhat,
                inv_std,
            } => {
                let (c, h, w) = dims3(self.shape(*x));
                let n = h * w;
                let nt = T::lit(n as f64);
                let gv = self.value(*gain).data();
                let mut dgain = vec![T::zero(); c];
                let mut dshift = vec![T::zero(); c];
                let mut dx = vec![T::zero(); c * n];
                for ch in 0..c {
                    let gs = &g[ch * n..(ch + 1) * n];
                    let xh = &xhat[ch * n..(ch + 1) * n];
                    let mut sum_g = T::zero();
                    let mut sum_gx = T::zero();
                    for i in 0..n {
                        sum_g += gs[i];
                        sum_gx += gs[i] * xh[i];
                    }
                    dgain[ch] = sum_gx;
                    dshift[ch] = sum_g;
                    let k = gv[ch] * inv_std[ch] / nt;
                    for i in 0..n {
                        dx[ch * n + i] = k * (nt * gs[i] - sum_g - xh[i] * sum_gx);
                    }
                }
                accumulate(grads, self, *x, dx);
                accumulate(grads, self, *gain, dgain);
                accumulate(grads, self, *shift, dshift);
            }
            Op::Concat { xs, axis } => {
                let (outer, total, inner) = kernels::axis_split(node.value.shape(), *axis);
                let mut offset = 0;
                for &v in xs {
                    let len = self.shape(v)[*axis] * inner;
                    if self.wants(v) {
                        let mut dv = Vec::with_capacity(outer * len);
                        for o in 0..outer {
                            let start = o * total * inner + offset;
                            dv.extend_from_slice(&g[start..start + len]);
                        }
                        accumulate(grads, self, v, dv);
                    }
                    offset += len;
                }
            }
            Op::Sum(x) => {
                let n = self.value(*x).len();
                accumulate(grads, self, *x, vec![g[0]; n]);
            }
            Op::Mean(x) => {
                let n = self.value(*x).len();
                accumulate(grads, self, *x, vec![g[0] / T::lit(n as f64); n]);
            }
            Op::SpatialMean(x) => {
                let (c, h, w) = dims3(self.shape(*x));
                let n = h * w;
                let inv = T::one() / T::lit(n as f64);
                let dx = (0..c * n).map(|i| g[i / n] * inv).collect();
                accumulate(grads, self, *x, dx);
            }
            Op::NormalizeRows(x) => {
                let (_, c) = dims2(self.shape(*x));
                let xv = self.value(*x).data();
                let mut dx = vec![T::zero(); xv.len()];
                for ((dr, gr), (xr, yr)) in dx
                    .chunks_mut(c)
                    .zip(g.chunks(c))
                    .zip(xv.chunks(c).zip(y.chunks(c)))
                {
                    let s: T = xr.iter().copied().sum();
                    let dot: T = gr.iter().zip(yr).map(|(a, b)| *a * *b).sum();
                    for (d, gi) in dr.iter_mut().zip(gr) {
                        *d = (*gi - dot) / s;
                    }
                }
                accumulate(grads, self, *x, dx);
            }
            Op::L2Normalize(x) => {
                let xv = self.value(*x).data();
                let norm = xv.iter().map(|a| *a * *a).sum::<T>().sqrt();
                let dot: T = g.iter().zip(y).map(|(a, b)| *a * *b).sum();
                let dx = g.iter().zip(y).map(|(gi, yi)| (*gi - *yi * dot) / norm).collect();
                accumulate(grads, self, *x, dx);
            }
            Op::RmsNorm { x, rms } => {
                let n = T::lit(y.len().max(1) as f64);
                let dot: T = g.iter().zip(y).map(|(a, b)| *a * *b).sum::<T>() / n;
                let dx = g.iter().zip(y).map(|(gi, yi)| (*gi - *yi * dot) / *rms).collect();
                accumulate(grads, self, *x, dx);
            }
            Op::Gather { x, idx } => {
                let mut dx = vec![T::zero(); self.value(*x).len()];
                for (gi, &i) in g.iter().zip(idx) {
                    dx[i] += *gi;
                }
                accumulate(grads, self, *x, dx);
            }
            Op::LogSumExp(x) => {
                let xv = self.value(*x).data();
                let dx = xv.iter().map(|&v| g[0] * (v - y[0]).exp()).collect();
                accumulate(grads, self, *x, dx);
            }
            Op::Pick { x, at } => {
                let mut dx = vec![T::zero(); self.value(*x).len()];
                dx[*at] = g[0];
                accumulate(grads, self, *x, dx);
            }
        }
    }
}

#[inline]
fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

fn dims2(s: &[usize]) -> (usize, usize) {
    (s[0], s[1])
}

fn dims3(s: &[usize]) -> (usize, usize, usize) {
    (s[0], s[1], s[2])
}

fn accumulate<T: Scalar>(grads: &mut [Option<Vec<T>>], tape: &Tape<T>, v: Var, contrib: Vec<T>) {
    if !tape.wants(v) {
        return;
    }
    debug_assert_eq!(contrib.len(), tape.value(v).len());
    match &mut grads[v.0] {
        Some(acc) => acc.iter_mut().zip(contrib).for_each(|(a, c)| *a += c),
        slot @ None => *slot = Some(contrib),
    }
}
