//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation applied during a forward pass. Parameter
//! nodes borrow their tensors from a [`ParamStore`] instead of copying them.
//! [`Graph::backward`] walks the tape in reverse and returns a [`Gradients`]
//! holding gradients for every reachable leaf and parameter.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{shape_err, Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{compensated_sum, mm_nn, mm_nt, mm_tn, Tensor};

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Which parameters require gradients in a graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradMode {
    /// Parameters flagged `trainable`.
    Trainable,
    /// Every parameter, regardless of its flag.
    All,
    /// No parameter (inference).
    None,
}

enum Value<'p> {
    Owned(Tensor),
    Borrowed(&'p Tensor),
}

impl Value<'_> {
    #[inline]
    fn tensor(&self) -> &Tensor {
        match self {
            Value::Owned(t) => t,
            Value::Borrowed(t) => t,
        }
    }
}

enum Op {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    AddRow(Var, Var),
    MatMul {
        a: Var,
        b: Var,
        batch_a: usize,
        batch_b: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    MatMulNt(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        rstd: Vec<f64>,
    },
    Gelu(Var),
    Relu(Var),
    Sigmoid(Var),
    ConvTranspose {
        x: Var,
        kernel: Var,
        bias: Option<Var>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatLast(Vec<Var>),
    Row {
        x: Var,
        index: usize,
    },
    StackRows(Vec<Var>),
    MeanRows(Var),
    Sum(Var),
    Mean(Var),
    BceLogits {
        logits: Var,
        target: Vec<f64>,
    },
    NormalizeRows {
        x: Var,
        denom: Vec<f64>,
    },
    Diag(Var),
    RowMaxOffDiag {
        x: Var,
        argmax: Vec<usize>,
    },
}

struct Node<'p> {
    value: Value<'p>,
    op: Op,
    requires_grad: bool,
    name: &'static str,
}

/// The autodiff tape.
pub struct Graph<'p> {
    store: Option<&'p ParamStore>,
    mode: GradMode,
    nodes: Vec<Node<'p>>,
    param_vars: Vec<Option<Var>>,
    check_finite: bool,
}

/// Gradients produced by [`Graph::backward`] for leaves and parameters.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn param(&self, id: ParamId) -> Option<&[f64]> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|(_, v)| self.get(*v))
    }

    /// `(parameter, gradient)` for every parameter reached by backward.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.params
            .iter()
            .filter_map(|(p, v)| self.get(*v).map(|g| (*p, g)))
    }
}

impl<'p> Graph<'p> {
    /// A graph whose parameter nodes borrow from `store`.
    pub fn new(store: &'p ParamStore, mode: GradMode) -> Self {
        Self {
            store: Some(store),
            mode,
            nodes: Vec::new(),
            param_vars: vec![None; store.len()],
            check_finite: false,
        }
    }

    /// A graph without parameters, holding only leaves.
    pub fn standalone() -> Self {
        Self {
            store: None,
            mode: GradMode::None,
            nodes: Vec::new(),
            param_vars: Vec::new(),
            check_finite: false,
        }
    }

    /// Enables a finiteness check on every forward op.
    pub fn with_check_finite(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    #[inline]
    pub fn value(&self, v: Var) -> &Tensor {
        self.nodes[v.0].value.tensor()
    }

    #[inline]
    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool, name: &'static str) -> Result<Var> {
        if self.check_finite && !value.is_finite() {
            return Err(Error::NonFinite(vec![String::from(name)]));
        }
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            requires_grad,
            name,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, tensor: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(tensor),
            op: Op::Leaf,
            requires_grad,
            name: "leaf",
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor, false)
    }

    /// Node for parameter `id`; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let store = self.store.expect("parameter used in a standalone graph");
        let p = store.get(id);
        let requires_grad = match self.mode {
            GradMode::Trainable => p.trainable,
            GradMode::All => true,
            GradMode::None => false,
        };
        self.nodes.push(Node {
            value: Value::Borrowed(&p.tensor),
            op: Op::Param(id),
            requires_grad,
            name: "param",
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data).expect("shape preserved")
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let ta = self.value(a);
        Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|&x| f(x)).collect())
            .expect("shape preserved")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_with(a, b, |x, y| x + y);
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Add(a, b), rg, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_with(a, b, |x, y| x - y);
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Sub(a, b), rg, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_with(a, b, |x, y| x * y);
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Mul(a, b), rg, "mul")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.map(a, |x| x * c);
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale(a, c), rg, "scale")
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.map(a, |x| x + c);
        let rg = self.rg(&[a]);
        self.push(out, Op::AddScalar(a), rg, "add_scalar")
    }

    /// Adds a vector of length `d` to every last-axis slice of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.shape(row) != [d] {
            return Err(shape_err("add_row", self.shape(x), self.shape(row)));
        }
        let r = self.value(row).data().to_vec();
        let tx = self.value(x);
        let mut data = tx.data().to_vec();
        for chunk in data.chunks_mut(d) {
            for (v, b) in chunk.iter_mut().zip(&r) {
                *v += b;
            }
        }
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.rg(&[x, row]);
        self.push(out, Op::AddRow(x, row), rg, "add_row")
    }

    /// Matrix product over the last two axes. Leading batch axes must match,
    /// or one operand may be a plain matrix that broadcasts across the batch.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(shape_err("matmul", &sa, &sb));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let (ba_dims, bb_dims) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);
        if k != k2 || !(ba_dims == bb_dims || ba_dims.is_empty() || bb_dims.is_empty()) {
            return Err(shape_err("matmul", &sa, &sb));
        }
        let batch_a: usize = ba_dims.iter().product();
        let batch_b: usize = bb_dims.iter().product();
        let batch = batch_a.max(batch_b);
        let mut out_shape = if ba_dims.is_empty() { bb_dims.to_vec() } else { ba_dims.to_vec() };
        out_shape.push(m);
        out_shape.push(n);
        let mut out = vec![0.0; batch * m * n];
        {
            let (ta, tb) = (self.value(a).data(), self.value(b).data());
            for bi in 0..batch {
                let ao = if batch_a == 1 { 0 } else { bi * m * k };
                let bo = if batch_b == 1 { 0 } else { bi * k * n };
                mm_nn(
                    &ta[ao..ao + m * k],
                    &tb[bo..bo + k * n],
                    &mut out[bi * m * n..(bi + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
        }
        let rg = self.rg(&[a, b]);
        self.push(
            Tensor::new(out_shape, out)?,
            Op::MatMul { a, b, batch_a, batch_b, m, k, n },
            rg,
            "matmul",
        )
    }

    /// `a · bᵀ` for matrices `a: [m,k]`, `b: [n,k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(shape_err("matmul_nt", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        let mut out = vec![0.0; m * n];
        mm_nt(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(&[a, b]);
        self.push(Tensor::matrix(m, n, out)?, Op::MatMulNt(a, b), rg, "matmul_nt")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose()?;
        let rg = self.rg(&[a]);
        self.push(out, Op::Transpose(a), rg, "transpose")
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(&[a]);
        self.push(out, Op::Reshape(a), rg, "reshape")
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Contract(format!("softmax axis {axis} out of range for {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut max = f64::NEG_INFINITY;
                for l in 0..len {
                    max = max.max(src[base + l * inner]);
                }
                let mut sum = 0.0;
                for l in 0..len {
                    let e = libm::exp(src[base + l * inner] - max);
                    out[base + l * inner] = e;
                    sum += e;
                }
                for l in 0..len {
                    out[base + l * inner] /= sum;
                }
            }
        }
        let rg = self.rg(&[x]);
        self.push(
            Tensor::new(shape, out)?,
            Op::Softmax { x, outer, len, inner },
            rg,
            "softmax",
        )
    }

    /// Layer normalization over the last axis followed by the affine map.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(shape_err("layer_norm", self.shape(x), self.shape(gain)));
        }
        let tx = self.value(x);
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let rows = tx.numel() / d;
        let mut out = vec![0.0; tx.numel()];
        let mut rstd = Vec::with_capacity(rows);
        for (r, row) in tx.data().chunks(d).enumerate() {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / libm::sqrt(var + eps);
            rstd.push(rs);
            for j in 0..d {
                out[r * d + j] = (row[j] - mean) * rs * g[j] + b[j];
            }
        }
        let out = Tensor::new(tx.shape().to_vec(), out)?;
        let rg = self.rg(&[x, gain, bias]);
        self.push(out, Op::LayerNorm { x, gain, bias, rstd }, rg, "layer_norm")
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = self.map(x, |v| 0.5 * v * (1.0 + libm::erf(v * core::f64::consts::FRAC_1_SQRT_2)));
        let rg = self.rg(&[x]);
        self.push(out, Op::Gelu(x), rg, "gelu")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.map(x, |v| if v > 0.0 { v } else { 0.0 });
        let rg = self.rg(&[x]);
        self.push(out, Op::Relu(x), rg, "relu")
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = self.map(x, sigmoid);
        let rg = self.rg(&[x]);
        self.push(out, Op::Sigmoid(x), rg, "sigmoid")
    }

    /// Transposed convolution with a 2×2 kernel and stride 2.
    ///
    /// `x: [c_in, h, w]`, `kernel: [c_in, c_out, 2, 2]`, `bias: [c_out]`;
    /// output `[c_out, 2h, 2w]`.
    pub fn conv_transpose2d(&mut self, x: Var, kernel: Var, bias: Option<Var>) -> Result<Var> {
        let (sx, sk) = (self.shape(x).to_vec(), self.shape(kernel).to_vec());
        if sx.len() != 3 || sk.len() != 4 || sk[0] != sx[0] || sk[2] != 2 || sk[3] != 2 {
            return Err(shape_err("conv_transpose2d", &sx, &sk));
        }
        let (cin, h, w, cout) = (sx[0], sx[1], sx[2], sk[1]);
        if let Some(b) = bias {
            if self.shape(b) != [cout] {
                return Err(shape_err("conv_transpose2d bias", &sk, self.shape(b)));
            }
        }
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = vec![0.0; cout * oh * ow];
        if let Some(b) = bias {
            let bd = self.value(b).data();
            for o in 0..cout {
                out[o * oh * ow..(o + 1) * oh * ow].iter_mut().for_each(|v| *v = bd[o]);
            }
        }
        let (xd, kd) = (self.value(x).data(), self.value(kernel).data());
        for i in 0..cin {
            for o in 0..cout {
                let kbase = (i * cout + o) * 4;
                let kk = [kd[kbase], kd[kbase + 1], kd[kbase + 2], kd[kbase + 3]];
                let obase = o * oh * ow;
                for y in 0..h {
                    let xrow = &xd[(i * h + y) * w..(i * h + y + 1) * w];
                    for dy in 0..2 {
                        let orow = obase + (2 * y + dy) * ow;
                        for (xx, &xv) in xrow.iter().enumerate() {
                            out[orow + 2 * xx] += xv * kk[dy * 2];
                            out[orow + 2 * xx + 1] += xv * kk[dy * 2 + 1];
                        }
                    }
                }
            }
        }
        let rg = self.rg(&[x, kernel]) || bias.is_some_and(|b| self.requires_grad(b));
        self.push(
            Tensor::new(vec![cout, oh, ow], out)?,
            Op::ConvTranspose { x, kernel, bias },
            rg,
            "conv_transpose2d",
        )
    }

    /// Columns `start..start + len` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 || start + len > s[1] || len == 0 {
            return Err(shape_err("slice_cols", s, &[start, len]));
        }
        let (rows, cols) = (s[0], s[1]);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&src[r * cols + start..r * cols + start + len]);
        }
        let rg = self.rg(&[x]);
        self.push(Tensor::matrix(rows, len, out)?, Op::SliceCols { x, start }, rg, "slice_cols")
    }

    /// Concatenation along the last axis; all leading axes must agree.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract(String::from("concat of zero tensors")))?;
        let lead = self.shape(*first)[..self.shape(*first).len().saturating_sub(1)].to_vec();
        let rows: usize = lead.iter().product();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != lead.len() + 1 || s[..lead.len()] != lead[..] {
                return Err(shape_err("concat_last", self.shape(*first), s));
            }
            widths.push(s[s.len() - 1]);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let rg = self.rg(parts);
        self.push(Tensor::new(shape, out)?, Op::ConcatLast(parts.to_vec()), rg, "concat")
    }

    /// Row `index` of a matrix as a vector.
    pub fn row(&mut self, x: Var, index: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 || index >= s[0] {
            return Err(shape_err("row", s, &[index]));
        }
        let cols = s[1];
        let out = self.value(x).data()[index * cols..(index + 1) * cols].to_vec();
        let rg = self.rg(&[x]);
        self.push(Tensor::vector(out), Op::Row { x, index }, rg, "row")
    }

    /// Stacks equal-length vectors into the rows of a matrix.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Result<Var> {
        let first = rows
            .first()
            .ok_or_else(|| Error::Contract(String::from("stack of zero rows")))?;
        let d = self.shape(*first).to_vec();
        if d.len() != 1 {
            return Err(shape_err("stack_rows", &d, &[]));
        }
        let mut out = Vec::with_capacity(rows.len() * d[0]);
        for &r in rows {
            if self.shape(r) != d.as_slice() {
                return Err(shape_err("stack_rows", &d, self.shape(r)));
            }
            out.extend_from_slice(self.value(r).data());
        }
        let rg = self.rg(rows);
        self.push(
            Tensor::matrix(rows.len(), d[0], out)?,
            Op::StackRows(rows.to_vec()),
            rg,
            "stack_rows",
        )
    }

    /// Mean over the rows of a matrix, giving a vector of column means.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(shape_err("mean_rows", s, &[]));
        }
        let (rows, cols) = (s[0], s[1]);
        let mut out = vec![0.0; cols];
        for row in self.value(x).data().chunks(cols) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|v| *v /= rows as f64);
        let rg = self.rg(&[x]);
        self.push(Tensor::vector(out), Op::MeanRows(x), rg, "mean_rows")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = compensated_sum(self.value(x).data().iter().copied());
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg, "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let s = compensated_sum(t.data().iter().copied()) / t.numel() as f64;
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Mean(x), rg, "mean")
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against `target`,
    /// evaluated in the overflow-free form `max(z,0) - z·y + ln(1 + e^{-|z|})`.
    pub fn bce_with_logits(&mut self, logits: Var, target: &Tensor) -> Result<Var> {
        if self.shape(logits) != target.shape() {
            return Err(shape_err("bce_with_logits", self.shape(logits), target.shape()));
        }
        let z = self.value(logits).data();
        let n = z.len() as f64;
        let loss = compensated_sum(
            z.iter()
                .zip(target.data())
                .map(|(&z, &y)| z.max(0.0) - z * y + libm::log1p(libm::exp(-libm::fabs(z)))),
        ) / n;
        let rg = self.rg(&[logits]);
        self.push(
            Tensor::scalar(loss),
            Op::BceLogits {
                logits,
                target: target.data().to_vec(),
            },
            rg,
            "bce_with_logits",
        )
    }

    /// Scales every row of a matrix to unit L2 norm; rows with norm below
    /// `eps` are divided by `eps` instead.
    pub fn normalize_rows(&mut self, x: Var, eps: f64) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(shape_err("normalize_rows", s, &[]));
        }
        let cols = s[1];
        let mut out = self.value(x).data().to_vec();
        let mut denom = Vec::with_capacity(s[0]);
        for row in out.chunks_mut(cols) {
            let norm = libm::sqrt(row.iter().map(|v| v * v).sum::<f64>()).max(eps);
            denom.push(norm);
            row.iter_mut().for_each(|v| *v /= norm);
        }
        let shape = s.to_vec();
        let rg = self.rg(&[x]);
        self.push(Tensor::new(shape, out)?, Op::NormalizeRows { x, denom }, rg, "normalize_rows")
    }

    /// Diagonal of a square matrix.
    pub fn diag(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 || s[0] != s[1] {
            return Err(shape_err("diag", s, &[]));
        }
        let n = s[0];
        let out = (0..n).map(|i| self.value(x).data()[i * n + i]).collect();
        let rg = self.rg(&[x]);
        self.push(Tensor::vector(out), Op::Diag(x), rg, "diag")
    }

    /// Per-row maximum of a square matrix, excluding the diagonal entry.
    pub fn row_max_off_diag(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 || s[0] != s[1] || s[0] < 2 {
            return Err(shape_err("row_max_off_diag", s, &[]));
        }
        let n = s[0];
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(n);
        let mut argmax = Vec::with_capacity(n);
        for i in 0..n {
            let mut best = usize::MAX;
            for j in (0..n).filter(|&j| j != i) {
                if best == usize::MAX || d[i * n + j] > d[i * n + best] {
                    best = j;
                }
            }
            out.push(d[i * n + best]);
            argmax.push(best);
        }
        let rg = self.rg(&[x]);
        self.push(Tensor::vector(out), Op::RowMaxOffDiag { x, argmax }, rg, "row_max_off_diag")
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop(idx, &g, &mut grads);
            if matches!(node.op, Op::Leaf | Op::Param(_)) {
                grads[idx] = Some(g);
            }
        }
        let params = self
            .param_vars
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|v| (ParamId(i), v)))
            .collect();
        Ok(Gradients { grads, params })
    }

    /// Names of the nodes whose values contain NaN or infinity.
    pub fn non_finite_nodes(&self) -> Vec<String> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| !n.value.tensor().is_finite())
            .map(|(i, n)| match (&n.op, self.store) {
                (Op::Param(id), Some(s)) => s.get(*id).name.clone(),
                _ => format!("{}#{i}", n.name),
            })
            .collect()
    }

    fn acc<F: FnOnce(&mut [f64])>(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: F) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.value(v).numel()]);
        f(slot);
    }

    fn backprop(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = self.nodes[idx].value.tensor();
        match &self.nodes[idx].op {
            Op::Leaf | Op::Param(_) => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, |d| axpy(d, g, 1.0));
                self.acc(grads, *b, |d| axpy(d, g, 1.0));
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |d| axpy(d, g, 1.0));
                self.acc(grads, *b, |d| axpy(d, g, -1.0));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                self.acc(grads, *a, |d| {
                    d.iter_mut().zip(g).zip(vb).for_each(|((d, g), y)| *d += g * y)
                });
                self.acc(grads, *b, |d| {
                    d.iter_mut().zip(g).zip(va).for_each(|((d, g), x)| *d += g * x)
                });
            }
            Op::Scale(a, c) => self.acc(grads, *a, |d| axpy(d, g, *c)),
            Op::AddScalar(a) | Op::Reshape(a) => self.acc(grads, *a, |d| axpy(d, g, 1.0)),
            Op::AddRow(x, row) => {
                self.acc(grads, *x, |d| axpy(d, g, 1.0));
                let n = self.value(*row).numel();
                self.acc(grads, *row, |d| {
                    for chunk in g.chunks(n) {
                        axpy(d, chunk, 1.0);
                    }
                });
            }
            Op::MatMul { a, b, batch_a, batch_b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                let batch = (*batch_a).max(*batch_b);
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                self.acc(grads, *a, |d| {
                    for bi in 0..batch {
                        let ao = if *batch_a == 1 { 0 } else { bi * m * k };
                        let bo = if *batch_b == 1 { 0 } else { bi * k * n };
                        mm_nt(
                            &g[bi * m * n..(bi + 1) * m * n],
                            &vb[bo..bo + k * n],
                            &mut d[ao..ao + m * k],
                            m,
                            n,
                            k,
                        );
                    }
                });
                self.acc(grads, *b, |d| {
                    for bi in 0..batch {
                        let ao = if *batch_a == 1 { 0 } else { bi * m * k };
                        let bo = if *batch_b == 1 { 0 } else { bi * k * n };
                        mm_tn(
                            &va[ao..ao + m * k],
                            &g[bi * m * n..(bi + 1) * m * n],
                            &mut d[bo..bo + k * n],
                            m,
                            k,
                            n,
                        );
                    }
                });
            }
            Op::MatMulNt(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[0]);
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                self.acc(grads, *a, |d| mm_nn(g, vb, d, m, n, k));
                self.acc(grads, *b, |d| mm_tn(g, va, d, m, n, k));
            }
            Op::Transpose(a) => {
                let s = out.shape();
                let (r, c) = (s[0], s[1]);
                self.acc(grads, *a, |d| {
                    for i in 0..r {
                        for j in 0..c {
                            d[j * r + i] += g[i * c + j];
                        }
                    }
                });
            }
            Op::Softmax { x, outer, len, inner } => {
                let (outer, len, inner) = (*outer, *len, *inner);
                let y = out.data();
                self.acc(grads, *x, |d| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * len * inner + i;
                            let dotv: f64 = (0..len)
                                .map(|l| g[base + l * inner] * y[base + l * inner])
                                .sum();
                            for l in 0..len {
                                let p = base + l * inner;
                                d[p] += y[p] * (g[p] - dotv);
                            }
                        }
                    }
                });
            }
            Op::LayerNorm { x, gain, bias, rstd } => {
                let vx = self.value(*x).data();
                let gn = self.value(*gain).data();
                let dim = gn.len();
                let xhat = |r: usize, j: usize, mean: f64| (vx[r * dim + j] - mean) * rstd[r];
                let means: Vec<f64> = vx
                    .chunks(dim)
                    .map(|row| row.iter().sum::<f64>() / dim as f64)
                    .collect();
                self.acc(grads, *gain, |d| {
                    for (r, &mean) in means.iter().enumerate() {
                        for j in 0..dim {
                            d[j] += g[r * dim + j] * xhat(r, j, mean);
                        }
                    }
                });
                self.acc(grads, *bias, |d| {
                    for chunk in g.chunks(dim) {
                        axpy(d, chunk, 1.0);
                    }
                });
                self.acc(grads, *x, |d| {
                    for (r, &mean) in means.iter().enumerate() {
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..dim {
                            let dxh = g[r * dim + j] * gn[j];
                            m1 += dxh;
                            m2 += dxh * xhat(r, j, mean);
                        }
                        m1 /= dim as f64;
                        m2 /= dim as f64;
                        for j in 0..dim {
                            let dxh = g[r * dim + j] * gn[j];
                            d[r * dim + j] += rstd[r] * (dxh - m1 - xhat(r, j, mean) * m2);
                        }
                    }
                });
            }
            Op::Gelu(x) => {
                let vx = self.value(*x).data();
                self.acc(grads, *x, |d| {
                    for ((d, g), &v) in d.iter_mut().zip(g).zip(vx) {
                        let cdf = 0.5 * (1.0 + libm::erf(v * core::f64::consts::FRAC_1_SQRT_2));
                        let pdf = libm::exp(-0.5 * v * v) / libm::sqrt(2.0 * core::f64::consts::PI);
                        *d += g * (cdf + v * pdf);
                    }
                });
            }
            Op::Relu(x) => {
                let vx = self.value(*x).data();
                self.acc(grads, *x, |d| {
                    for ((d, g), &v) in d.iter_mut().zip(g).zip(vx) {
                        if v > 0.0 {
                            *d += g;
                        }
                    }
                });
            }
            Op::Sigmoid(x) => {
                let y = out.data();
                self.acc(grads, *x, |d| {
                    for ((d, g), &y) in d.iter_mut().zip(g).zip(y) {
                        *d += g * y * (1.0 - y);
                    }
                });
            }
            Op::ConvTranspose { x, kernel, bias } => {
                let sx = self.shape(*x);
                let (cin, h, w) = (sx[0], sx[1], sx[2]);
                let cout = self.shape(*kernel)[1];
                let (oh, ow) = (2 * h, 2 * w);
                let (vx, vk) = (self.value(*x).data(), self.value(*kernel).data());
                let at = |o: usize, y: usize, x: usize| g[o * oh * ow + y * ow + x];
                self.acc(grads, *x, |d| {
                    for i in 0..cin {
                        for o in 0..cout {
                            let kb = (i * cout + o) * 4;
                            for y in 0..h {
                                for xx in 0..w {
                                    let mut s = 0.0;
                                    for dy in 0..2 {
                                        for dx in 0..2 {
                                            s += at(o, 2 * y + dy, 2 * xx + dx) * vk[kb + dy * 2 + dx];
                                        }
                                    }
                                    d[(i * h + y) * w + xx] += s;
                                }
                            }
                        }
                    }
                });
                self.acc(grads, *kernel, |d| {
                    for i in 0..cin {
                        for o in 0..cout {
                            let kb = (i * cout + o) * 4;
                            for y in 0..h {
                                for xx in 0..w {
                                    let xv = vx[(i * h + y) * w + xx];
                                    for dy in 0..2 {
                                        for dx in 0..2 {
                                            d[kb + dy * 2 + dx] += xv * at(o, 2 * y + dy, 2 * xx + dx);
                                        }
                                    }
                                }
                            }
                        }
                    }
                });
                if let Some(b) = bias {
                    self.acc(grads, *b, |d| {
                        for (o, dv) in d.iter_mut().enumerate() {
                            *dv += g[o * oh * ow..(o + 1) * oh * ow].iter().sum::<f64>();
                        }
                    });
                }
            }
            Op::SliceCols { x, start } => {
                let cols = self.shape(*x)[1];
                let len = out.shape()[1];
                self.acc(grads, *x, |d| {
                    for (r, chunk) in g.chunks(len).enumerate() {
                        axpy(&mut d[r * cols + start..r * cols + start + len], chunk, 1.0);
                    }
                });
            }
            Op::ConcatLast(parts) => {
                let total = out.last_dim();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).last_dim();
                    self.acc(grads, p, |d| {
                        for (r, chunk) in d.chunks_mut(w).enumerate() {
                            axpy(chunk, &g[r * total + offset..r * total + offset + w], 1.0);
                        }
                    });
                    offset += w;
                }
            }
            Op::Row { x, index } => {
                let cols = g.len();
                self.acc(grads, *x, |d| axpy(&mut d[index * cols..(index + 1) * cols], g, 1.0));
            }
            Op::StackRows(rows) => {
                let cols = out.shape()[1];
                for (i, &r) in rows.iter().enumerate() {
                    self.acc(grads, r, |d| axpy(d, &g[i * cols..(i + 1) * cols], 1.0));
                }
            }
            Op::MeanRows(x) => {
                let rows = self.shape(*x)[0] as f64;
                self.acc(grads, *x, |d| {
                    for chunk in d.chunks_mut(g.len()) {
                        axpy(chunk, g, 1.0 / rows);
                    }
                });
            }
            Op::Sum(x) => self.acc(grads, *x, |d| d.iter_mut().for_each(|v| *v += g[0])),
            Op::Mean(x) => {
                let n = self.value(*x).numel() as f64;
                self.acc(grads, *x, |d| d.iter_mut().for_each(|v| *v += g[0] / n));
            }
            Op::BceLogits { logits, target } => {
                let z = self.value(*logits).data();
                let n = z.len() as f64;
                self.acc(grads, *logits, |d| {
                    for ((d, &z), &y) in d.iter_mut().zip(z).zip(target) {
                        *d += g[0] * (sigmoid(z) - y) / n;
                    }
                });
            }
            Op::NormalizeRows { x, denom } => {
                let cols = out.shape()[1];
                let y = out.data();
                let vx = self.value(*x).data();
                self.acc(grads, *x, |d| {
                    for (r, &nrm) in denom.iter().enumerate() {
                        let row = r * cols..(r + 1) * cols;
                        let raw = libm::sqrt(vx[row.clone()].iter().map(|v| v * v).sum::<f64>());
                        if raw < nrm {
                            // Clamped: the denominator is a constant.
                            axpy(&mut d[row.clone()], &g[row], 1.0 / nrm);
                            continue;
                        }
                        let gy: f64 = g[row.clone()].iter().zip(&y[row.clone()]).map(|(a, b)| a * b).sum();
                        for j in row {
                            d[j] += (g[j] - y[j] * gy) / nrm;
                        }
                    }
                });
            }
            Op::Diag(x) => {
                let n = g.len();
                self.acc(grads, *x, |d| {
                    for i in 0..n {
                        d[i * n + i] += g[i];
                    }
                });
            }
            Op::RowMaxOffDiag { x, argmax } => {
                let n = g.len();
                self.acc(grads, *x, |d| {
                    for (i, &j) in argmax.iter().enumerate() {
                        d[i * n + j] += g[i];
                    }
                });
            }
        }
    }
}

#[inline]
fn axpy(dst: &mut [f64], src: &[f64], alpha: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += alpha * s;
    }
}

#[inline]
pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + libm::exp(-z))
    } else {
        let e = libm::exp(z);
        e / (1.0 + e)
    }
}
