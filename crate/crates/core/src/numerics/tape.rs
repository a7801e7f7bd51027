//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends one node holding its output value. `backward`
//! walks the nodes in reverse record order, so each node is visited exactly
//! once and gradients only ever flow to earlier entries.

use std::collections::HashMap;
use std::rc::Rc;

use super::kernels::{self, ConvGeom};
use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{invalid, shape_mismatch, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Unary {
    Relu,
    LeakyRelu(f32),
    Silu,
    Gelu,
    Tanh,
    Sigmoid,
    Abs,
    Square,
    Sqrt,
    Recip,
    /// `max(x, floor)`
    ClampMin(f32),
}

impl Unary {
    fn apply(self, x: f32) -> f32 {
        match self {
            Unary::Relu => x.max(0.0),
            Unary::LeakyRelu(a) => {
                if x > 0.0 {
                    x
                } else {
                    a * x
                }
            }
            Unary::Silu => x * sigmoid(x),
            Unary::Gelu => {
                let u = GELU_C * (x + 0.044715 * x * x * x);
                0.5 * x * (1.0 + u.tanh())
            }
            Unary::Tanh => x.tanh(),
            Unary::Sigmoid => sigmoid(x),
            Unary::Abs => x.abs(),
            Unary::Square => x * x,
            Unary::Sqrt => x.sqrt(),
            Unary::Recip => 1.0 / x,
            Unary::ClampMin(f) => x.max(f),
        }
    }

    /// dy/dx given input `x` and output `y`.
    fn derivative(self, x: f32, y: f32) -> f32 {
        match self {
            Unary::Relu => (x > 0.0) as i32 as f32,
            Unary::LeakyRelu(a) => {
                if x > 0.0 {
                    1.0
                } else {
                    a
                }
            }
            Unary::Silu => {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            }
            Unary::Gelu => {
                let u = GELU_C * (x + 0.044715 * x * x * x);
                let th = u.tanh();
                0.5 * (1.0 + th)
                    + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
            }
            Unary::Tanh => 1.0 - y * y,
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Abs => {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
            Unary::Square => 2.0 * x,
            Unary::Sqrt => {
                if y > 0.0 {
                    0.5 / y
                } else {
                    0.0
                }
            }
            Unary::Recip => -y * y,
            Unary::ClampMin(f) => (x > f) as i32 as f32,
        }
    }
}

const GELU_C: f32 = 0.797_884_6;

fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    AddScalar(Var, Var),
    MulScalar(Var, Var),
    Affine(Var, f32),
    Unary(Var, Unary),
    MatMul(Var, Var),
    Reshape(Var),
    Gather(Var, Rc<Vec<u32>>),
    ConcatRows(Vec<Var>),
    SumAll(Var),
    MeanAll(Var),
    MeanRows(Var),
    LayerNorm {
        x: Var,
        gain: Option<Var>,
        bias: Option<Var>,
        xhat: Vec<f32>,
        rstd: Vec<f32>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<f32>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        cols: Vec<f32>,
    },
    AvgPool(Var, usize),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Single-threaded record of executed operations.
pub struct Tape {
    nodes: Vec<Node>,
    grad_enabled: bool,
    bound: HashMap<ParamId, Var>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
            bound: HashMap::new(),
        }
    }

    /// A tape that never tracks gradients and keeps no backward buffers.
    pub fn no_grad() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        let op = if needs_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Record a leaf. It is differentiable iff the tensor requests gradients
    /// and the tape tracks them.
    pub fn leaf(&mut self, mut t: Tensor) -> Var {
        let needs_grad = self.grad_enabled && t.requires_grad();
        if !needs_grad {
            t.set_requires_grad(false);
        }
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_requires_grad(false))
    }

    /// Bind a stored parameter, once per tape.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let mut t = store
            .tensor(id)
            .clone()
            .with_requires_grad(store.is_trainable(id));
        t.zero_grad();
        let v = self.leaf(t);
        self.bound.insert(id, v);
        v
    }

    pub fn bindings(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.bound.iter().map(|(&p, &v)| (p, v))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a leaf (None when it never received one).
    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.nodes[v.0].value.grad()
    }

    fn data(&self, v: Var) -> &[f32] {
        self.nodes[v.0].value.data()
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_mismatch(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f32, f32) -> f32) -> Tensor {
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::from_parts(self.shape(a).to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let t = self.binary(a, b, |x, y| x + y);
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let t = self.binary(a, b, |x, y| x - y);
        Ok(self.push(t, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let t = self.binary(a, b, |x, y| x * y);
        Ok(self.push(t, Op::Mul(a, b), &[a, b]))
    }

    fn row_width(&self, op: &'static str, x: Var, r: Var) -> Result<usize> {
        let d = *self.shape(x).last().unwrap_or(&0);
        if self.shape(r) != [d] {
            return Err(shape_mismatch(op, self.shape(x), self.shape(r)));
        }
        Ok(d)
    }

    /// `x[.., d] + r[d]`
    pub fn add_row(&mut self, x: Var, r: Var) -> Result<Var> {
        let d = self.row_width("add_row", x, r)?;
        let rv = self.data(r);
        let data = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v + rv[i % d])
            .collect();
        let t = Tensor::from_parts(self.shape(x).to_vec(), data);
        Ok(self.push(t, Op::AddRow(x, r), &[x, r]))
    }

    /// `x[.., d] * r[d]`
    pub fn mul_row(&mut self, x: Var, r: Var) -> Result<Var> {
        let d = self.row_width("mul_row", x, r)?;
        let rv = self.data(r);
        let data = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v * rv[i % d])
            .collect();
        let t = Tensor::from_parts(self.shape(x).to_vec(), data);
        Ok(self.push(t, Op::MulRow(x, r), &[x, r]))
    }

    fn check_scalar(&self, op: &'static str, s: Var) -> Result<f32> {
        if self.value(s).len() != 1 {
            return Err(shape_mismatch(op, &[1], self.shape(s)));
        }
        Ok(self.data(s)[0])
    }

    /// `x + s` with a one-element `s`.
    pub fn add_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        let sv = self.check_scalar("add_scalar", s)?;
        let t = self.value(x).map(|v| v + sv);
        Ok(self.push(t, Op::AddScalar(x, s), &[x, s]))
    }

    /// `x * s` with a one-element `s`.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        let sv = self.check_scalar("mul_scalar", s)?;
        let t = self.value(x).map(|v| v * sv);
        Ok(self.push(t, Op::MulScalar(x, s), &[x, s]))
    }

    /// `a * x + b` with constants.
    pub fn affine(&mut self, x: Var, a: f32, b: f32) -> Var {
        let t = self.value(x).map(|v| a * v + b);
        self.push(t, Op::Affine(x, a), &[x])
    }

    pub fn scale(&mut self, x: Var, a: f32) -> Var {
        self.affine(x, a, 0.0)
    }

    pub fn unary(&mut self, x: Var, f: Unary) -> Var {
        let t = self.value(x).map(|v| f.apply(v));
        self.push(t, Op::Unary(x, f), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Relu)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Silu)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Gelu)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Square)
    }

    /// Column slice `[start, start+len)` of a 2-D value.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || start + len > s[1] {
            return Err(invalid(format!("slice_cols {start}+{len} out of {s:?}")));
        }
        let (r, c) = (s[0], s[1]);
        let idx = (0..r)
            .flat_map(|i| (start..start + len).map(move |j| (i * c + j) as u32))
            .collect();
        self.gather(x, Rc::new(idx), &[r, len])
    }

    /// Elements `[start, start+len)` of a 1-D value.
    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let n = self.value(x).len();
        if start + len > n {
            return Err(invalid(format!("slice {start}+{len} out of {n}")));
        }
        let idx = (start as u32..(start + len) as u32).collect();
        self.gather(x, Rc::new(idx), &[len])
    }

    /// 2-D matrix product.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_mismatch("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        kernels::gemm(
            m,
            k,
            n,
            self.data(a),
            false,
            self.data(b),
            false,
            &mut out,
            0.0,
        );
        let t = Tensor::from_parts(vec![m, n], out);
        Ok(self.push(t, Op::MatMul(a, b), &[a, b]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(x).len() {
            return Err(shape_mismatch("reshape", self.shape(x), shape));
        }
        let t = Tensor::from_parts(shape.to_vec(), self.data(x).to_vec());
        Ok(self.push(t, Op::Reshape(x), &[x]))
    }

    /// `out[i] = x[index[i]]` viewed with `shape`.
    pub fn gather(&mut self, x: Var, index: Rc<Vec<u32>>, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != index.len() {
            return Err(invalid(format!(
                "gather index of length {} cannot fill shape {shape:?}",
                index.len()
            )));
        }
        let src = self.data(x);
        if index.iter().any(|&i| i as usize >= src.len()) {
            return Err(invalid("gather index out of range"));
        }
        let data = index.iter().map(|&i| src[i as usize]).collect();
        let t = Tensor::from_parts(shape.to_vec(), data);
        Ok(self.push(t, Op::Gather(x, index), &[x]))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(invalid(format!("transpose expects 2-D, got {s:?}")));
        }
        let (r, c) = (s[0], s[1]);
        let mut idx = Vec::with_capacity(r * c);
        for j in 0..c {
            for i in 0..r {
                idx.push((i * c + j) as u32);
            }
        }
        self.gather(x, Rc::new(idx), &[c, r])
    }

    /// Rows `[start, start+len)` of a 2-D value.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || start + len > s[0] {
            return Err(invalid(format!("slice_rows {start}+{len} out of {s:?}")));
        }
        let d = s[1];
        let idx = ((start * d) as u32..((start + len) * d) as u32).collect();
        self.gather(x, Rc::new(idx), &[len, d])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let refs: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let t = Tensor::concat_rows(&refs)?;
        Ok(self.push(t, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.data(x).iter().map(|&v| v as f64).sum();
        let t = Tensor::scalar(s as f32);
        self.push(t, Op::SumAll(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let d = self.data(x);
        let s: f64 = d.iter().map(|&v| v as f64).sum();
        let t = Tensor::scalar((s / d.len().max(1) as f64) as f32);
        self.push(t, Op::MeanAll(x), &[x])
    }

    /// Column means of a 2-D value: `[n, d] -> [d]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || s[0] == 0 {
            return Err(invalid(format!(
                "mean_rows expects non-empty 2-D, got {s:?}"
            )));
        }
        let (n, d) = (s[0], s[1]);
        let src = self.data(x);
        let mut acc = vec![0.0f64; d];
        for i in 0..n {
            for j in 0..d {
                acc[j] += src[i * d + j] as f64;
            }
        }
        let out = acc.iter().map(|v| (v / n as f64) as f32).collect();
        let t = Tensor::from_parts(vec![d], out);
        Ok(self.push(t, Op::MeanRows(x), &[x]))
    }

    /// Normalize over the last axis with population variance, then apply
    /// the optional per-feature gain and bias.
    pub fn layer_norm(
        &mut self,
        x: Var,
        gain: Option<Var>,
        bias: Option<Var>,
        eps: f32,
    ) -> Result<Var> {
        let d = *self
            .shape(x)
            .last()
            .ok_or_else(|| invalid("layer_norm on 0-D"))?;
        if d == 0 {
            return Err(invalid("layer_norm over empty axis"));
        }
        for p in gain.iter().chain(bias.iter()) {
            if self.shape(*p) != [d] {
                return Err(shape_mismatch("layer_norm", self.shape(x), self.shape(*p)));
            }
        }
        let src = self.data(x);
        let rows = src.len() / d;
        let mut xhat = vec![0.0; src.len()];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f32>() / d as f32;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d as f32;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                xhat[r * d + j] = (row[j] - mean) * rs;
            }
        }
        let mut out = xhat.clone();
        if let Some(g) = gain {
            let gv = self.data(g);
            out.iter_mut()
                .enumerate()
                .for_each(|(i, v)| *v *= gv[i % d]);
        }
        if let Some(b) = bias {
            let bv = self.data(b);
            out.iter_mut()
                .enumerate()
                .for_each(|(i, v)| *v += bv[i % d]);
        }
        let t = Tensor::from_parts(self.shape(x).to_vec(), out);
        let mut inputs = vec![x];
        inputs.extend(gain);
        inputs.extend(bias);
        let keep = self.grad_enabled;
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat: if keep { xhat } else { Vec::new() },
                rstd: if keep { rstd } else { Vec::new() },
            },
            &inputs,
        ))
    }

    /// Multi-head `softmax(q·kᵀ/√d_head)·v`, heads split along columns.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (sq, sk, sv) = (self.shape(q), self.shape(k), self.shape(v));
        if sq.len() != 2 || sk.len() != 2 || sv.len() != 2 {
            return Err(invalid("attention expects 2-D q, k, v"));
        }
        let (lq, d, lk) = (sq[0], sq[1], sk[0]);
        if sk[1] != d || sv != sk {
            return Err(shape_mismatch("attention", sq, sk));
        }
        if lk == 0 {
            return Err(invalid("attention needs at least one key"));
        }
        if heads == 0 || d % heads != 0 {
            return Err(invalid(format!(
                "width {d} not divisible into {heads} heads"
            )));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f32).sqrt();
        let (qd, kd, vd) = (self.data(q), self.data(k), self.data(v));
        let mut out = vec![0.0; lq * d];
        let mut probs = vec![0.0; heads * lq * lk];
        for h in 0..heads {
            let qh = columns(qd, d, h * dh, dh);
            let kh = columns(kd, d, h * dh, dh);
            let vh = columns(vd, d, h * dh, dh);
            let p = &mut probs[h * lq * lk..(h + 1) * lq * lk];
            kernels::gemm(lq, dh, lk, &qh, false, &kh, true, p, 0.0);
            for row in p.chunks_mut(lk) {
                row.iter_mut().for_each(|x| *x *= scale);
                kernels::softmax_row(row);
            }
            let mut oh = vec![0.0; lq * dh];
            kernels::gemm(lq, lk, dh, p, false, &vh, false, &mut oh, 0.0);
            put_columns(&mut out, d, h * dh, dh, &oh);
        }
        let t = Tensor::from_parts(vec![lq, d], out);
        let probs = if self.grad_enabled { probs } else { Vec::new() };
        Ok(self.push(
            t,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
            &[q, k, v],
        ))
    }

    /// Cross-correlation of a `c×h×w` image with `o×c×kh×kw` kernels.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 3 || sw.len() != 4 || sx[0] != sw[1] {
            return Err(shape_mismatch("conv2d", &sx, &sw));
        }
        if stride == 0 {
            return Err(invalid("conv2d stride must be positive"));
        }
        let geom = ConvGeom {
            c_in: sx[0],
            h: sx[1],
            w: sx[2],
            kh: sw[2],
            kw: sw[3],
            stride,
            pad,
        };
        if geom.kh > geom.h + 2 * pad || geom.kw > geom.w + 2 * pad {
            return Err(invalid(format!(
                "conv2d kernel {}x{} exceeds padded input {:?} (pad {pad})",
                geom.kh, geom.kw, sx
            )));
        }
        let c_out = sw[0];
        if let Some(b) = b {
            if self.shape(b) != [c_out] {
                return Err(shape_mismatch("conv2d bias", &sw, self.shape(b)));
            }
        }
        let (oh, ow) = (geom.out_h(), geom.out_w());
        let cols = kernels::im2col(self.data(x), &geom);
        let mut out = vec![0.0; c_out * oh * ow];
        kernels::gemm(
            c_out,
            geom.col_rows(),
            oh * ow,
            self.data(w),
            false,
            &cols,
            false,
            &mut out,
            0.0,
        );
        if let Some(b) = b {
            let bv = self.data(b);
            for (c, plane) in out.chunks_mut(oh * ow).enumerate() {
                plane.iter_mut().for_each(|v| *v += bv[c]);
            }
        }
        let t = Tensor::from_parts(vec![c_out, oh, ow], out);
        let mut inputs = vec![x, w];
        inputs.extend(b);
        let cols = if self.grad_enabled { cols } else { Vec::new() };
        Ok(self.push(
            t,
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
            },
            &inputs,
        ))
    }

    /// Non-overlapping `k×k` average pooling of a `c×h×w` image.
    pub fn avg_pool(&mut self, x: Var, k: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || k == 0 || s[1] % k != 0 || s[2] % k != 0 {
            return Err(invalid(format!("avg_pool({k}) on {s:?}")));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let (oh, ow) = (h / k, w / k);
        let src = self.data(x);
        let mut out = vec![0.0; c * oh * ow];
        let norm = 1.0 / (k * k) as f32;
        for ch in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    out[ch * oh * ow + (y / k) * ow + xx / k] +=
                        src[ch * h * w + y * w + xx] * norm;
                }
            }
        }
        let t = Tensor::from_parts(vec![c, oh, ow], out);
        Ok(self.push(t, Op::AvgPool(x, k), &[x]))
    }

    /// Nearest-neighbour 2× upsampling of a `c×h×w` image.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(invalid(format!("upsample2x expects c×h×w, got {s:?}")));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let mut idx = Vec::with_capacity(c * 4 * h * w);
        for ch in 0..c {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    idx.push((ch * h * w + (y / 2) * w + xx / 2) as u32);
                }
            }
        }
        self.gather(x, Rc::new(idx), &[c, 2 * h, 2 * w])
    }

    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.square(d);
        Ok(self.mean(sq))
    }

    pub fn l1(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let ab = self.unary(d, Unary::Abs);
        Ok(self.mean(ab))
    }

    /// Populate gradients of every differentiable leaf from a scalar loss.
    /// Leaf gradients accumulate across calls.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.nodes[loss.0].needs_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f32>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if matches!(self.nodes[i].op, Op::Leaf) {
                if self.nodes[i].needs_grad {
                    self.nodes[i].value.accumulate_grad(&g);
                }
                continue;
            }
            let contributions = self.node_backward(i, &g);
            for (v, gv) in contributions {
                if !self.nodes[v.0].needs_grad {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.iter_mut().zip(&gv).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(gv),
                }
            }
        }
        Ok(())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn node_backward(&self, i: usize, g: &[f32]) -> Vec<(Var, Vec<f32>)> {
        let node = &self.nodes[i];
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                out.push((*a, g.to_vec()));
                out.push((*b, g.to_vec()));
            }
            Op::Sub(a, b) => {
                out.push((*a, g.to_vec()));
                out.push((*b, g.iter().map(|x| -x).collect()));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.data(*a), self.data(*b));
                if self.needs(*a) {
                    out.push((*a, g.iter().zip(bv).map(|(x, y)| x * y).collect()));
                }
                if self.needs(*b) {
                    out.push((*b, g.iter().zip(av).map(|(x, y)| x * y).collect()));
                }
            }
            Op::AddRow(x, r) => {
                let d = self.value(*r).len();
                out.push((*x, g.to_vec()));
                if self.needs(*r) {
                    let mut gr = vec![0.0; d];
                    g.iter().enumerate().for_each(|(k, v)| gr[k % d] += v);
                    out.push((*r, gr));
                }
            }
            Op::MulRow(x, r) => {
                let rv = self.data(*r);
                let d = rv.len();
                if self.needs(*x) {
                    out.push((
                        *x,
                        g.iter().enumerate().map(|(k, v)| v * rv[k % d]).collect(),
                    ));
                }
                if self.needs(*r) {
                    let xv = self.data(*x);
                    let mut gr = vec![0.0; d];
                    g.iter()
                        .zip(xv)
                        .enumerate()
                        .for_each(|(k, (gv, xv))| gr[k % d] += gv * xv);
                    out.push((*r, gr));
                }
            }
            Op::AddScalar(x, s) => {
                out.push((*x, g.to_vec()));
                out.push((*s, vec![g.iter().sum()]));
            }
            Op::MulScalar(x, s) => {
                let sv = self.data(*s)[0];
                if self.needs(*x) {
                    out.push((*x, g.iter().map(|v| v * sv).collect()));
                }
                if self.needs(*s) {
                    let xv = self.data(*x);
                    out.push((*s, vec![g.iter().zip(xv).map(|(a, b)| a * b).sum()]));
                }
            }
            Op::Affine(x, a) => out.push((*x, g.iter().map(|v| v * a).collect())),
            Op::Unary(x, f) => {
                let (xv, yv) = (self.data(*x), node.value.data());
                out.push((
                    *x,
                    g.iter()
                        .zip(xv.iter().zip(yv))
                        .map(|(gv, (&a, &y))| gv * f.derivative(a, y))
                        .collect(),
                ));
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.needs(*a) {
                    let mut ga = vec![0.0; m * k];
                    kernels::gemm(m, n, k, g, false, self.data(*b), true, &mut ga, 0.0);
                    out.push((*a, ga));
                }
                if self.needs(*b) {
                    let mut gb = vec![0.0; k * n];
                    kernels::gemm(k, m, n, self.data(*a), true, g, false, &mut gb, 0.0);
                    out.push((*b, gb));
                }
            }
            Op::Reshape(x) => out.push((*x, g.to_vec())),
            Op::Gather(x, idx) => {
                let mut gx = vec![0.0; self.value(*x).len()];
                for (gv, &j) in g.iter().zip(idx.iter()) {
                    gx[j as usize] += gv;
                }
                out.push((*x, gx));
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = self.value(*p).len();
                    out.push((*p, g[off..off + n].to_vec()));
                    off += n;
                }
            }
            Op::SumAll(x) => out.push((*x, vec![g[0]; self.value(*x).len()])),
            Op::MeanAll(x) => {
                let n = self.value(*x).len();
                out.push((*x, vec![g[0] / n as f32; n]));
            }
            Op::MeanRows(x) => {
                let s = self.shape(*x);
                let (n, d) = (s[0], s[1]);
                let gx = (0..n * d).map(|k| g[k % d] / n as f32).collect();
                out.push((*x, gx));
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = *self.shape(*x).last().unwrap();
                let rows = xhat.len() / d;
                if let Some(b) = bias {
                    if self.needs(*b) {
                        let mut gb = vec![0.0; d];
                        g.iter().enumerate().for_each(|(k, v)| gb[k % d] += v);
                        out.push((*b, gb));
                    }
                }
                if let Some(gn) = gain {
                    if self.needs(*gn) {
                        let mut gg = vec![0.0; d];
                        g.iter()
                            .zip(xhat)
                            .enumerate()
                            .for_each(|(k, (a, b))| gg[k % d] += a * b);
                        out.push((*gn, gg));
                    }
                }
                if self.needs(*x) {
                    let gv = gain.map(|gn| self.data(gn));
                    let mut gx = vec![0.0; rows * d];
                    let mut gxh = vec![0.0; d];
                    for r in 0..rows {
                        for j in 0..d {
                            gxh[j] = g[r * d + j] * gv.map_or(1.0, |gv| gv[j]);
                        }
                        let xh = &xhat[r * d..(r + 1) * d];
                        let m1 = gxh.iter().sum::<f32>() / d as f32;
                        let m2 = gxh.iter().zip(xh).map(|(a, b)| a * b).sum::<f32>() / d as f32;
                        for j in 0..d {
                            gx[r * d + j] = rstd[r] * (gxh[j] - m1 - xh[j] * m2);
                        }
                    }
                    out.push((*x, gx));
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => {
                let (lq, d) = (self.shape(*q)[0], self.shape(*q)[1]);
                let lk = self.shape(*k)[0];
                let dh = d / heads;
                let scale = 1.0 / (dh as f32).sqrt();
                let (qd, kd, vd) = (self.data(*q), self.data(*k), self.data(*v));
                let mut gq = vec![0.0; lq * d];
                let mut gk = vec![0.0; lk * d];
                let mut gvv = vec![0.0; lk * d];
                for h in 0..*heads {
                    let p = &probs[h * lq * lk..(h + 1) * lq * lk];
                    let go = columns(g, d, h * dh, dh);
                    let qh = columns(qd, d, h * dh, dh);
                    let kh = columns(kd, d, h * dh, dh);
                    let vh = columns(vd, d, h * dh, dh);
                    // dV = Pᵀ·dO
                    let mut gvh = vec![0.0; lk * dh];
                    kernels::gemm(lk, lq, dh, p, true, &go, false, &mut gvh, 0.0);
                    // dP = dO·Vᵀ
                    let mut gp = vec![0.0; lq * lk];
                    kernels::gemm(lq, dh, lk, &go, false, &vh, true, &mut gp, 0.0);
                    // softmax backward, folding in the score scale
                    for r in 0..lq {
                        let pr = &p[r * lk..(r + 1) * lk];
                        let gr = &mut gp[r * lk..(r + 1) * lk];
                        let dot: f32 = pr.iter().zip(gr.iter()).map(|(a, b)| a * b).sum();
                        for c in 0..lk {
                            gr[c] = pr[c] * (gr[c] - dot) * scale;
                        }
                    }
                    let mut gqh = vec![0.0; lq * dh];
                    kernels::gemm(lq, lk, dh, &gp, false, &kh, false, &mut gqh, 0.0);
                    let mut gkh = vec![0.0; lk * dh];
                    kernels::gemm(lk, lq, dh, &gp, true, &qh, false, &mut gkh, 0.0);
                    put_columns(&mut gq, d, h * dh, dh, &gqh);
                    put_columns(&mut gk, d, h * dh, dh, &gkh);
                    put_columns(&mut gvv, d, h * dh, dh, &gvh);
                }
                out.push((*q, gq));
                out.push((*k, gk));
                out.push((*v, gvv));
            }
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
            } => {
                let c_out = self.shape(*w)[0];
                let npos = geom.out_h() * geom.out_w();
                let ckk = geom.col_rows();
                if let Some(b) = b {
                    if self.needs(*b) {
                        out.push((*b, g.chunks(npos).map(|p| p.iter().sum()).collect()));
                    }
                }
                if self.needs(*w) {
                    let mut gw = vec![0.0; c_out * ckk];
                    kernels::gemm(c_out, npos, ckk, g, false, cols, true, &mut gw, 0.0);
                    out.push((*w, gw));
                }
                if self.needs(*x) {
                    let mut gcols = vec![0.0; ckk * npos];
                    kernels::gemm(
                        ckk,
                        c_out,
                        npos,
                        self.data(*w),
                        true,
                        g,
                        false,
                        &mut gcols,
                        0.0,
                    );
                    out.push((*x, kernels::col2im(&gcols, geom)));
                }
            }
            Op::AvgPool(x, k) => {
                let s = self.shape(*x);
                let (c, h, w) = (s[0], s[1], s[2]);
                let (oh, ow) = (h / k, w / k);
                let norm = 1.0 / (k * k) as f32;
                let mut gx = vec![0.0; c * h * w];
                for ch in 0..c {
                    for y in 0..h {
                        for xx in 0..w {
                            gx[ch * h * w + y * w + xx] =
                                g[ch * oh * ow + (y / k) * ow + xx / k] * norm;
                        }
                    }
                }
                out.push((*x, gx));
            }
        }
        out
    }
}

fn columns(src: &[f32], width: usize, start: usize, len: usize) -> Vec<f32> {
    let rows = src.len() / width;
    let mut out = Vec::with_capacity(rows * len);
    for r in 0..rows {
        out.extend_from_slice(&src[r * width + start..r * width + start + len]);
    }
    out
}

fn put_columns(dst: &mut [f32], width: usize, start: usize, len: usize, src: &[f32]) {
    let rows = dst.len() / width;
    for r in 0..rows {
        dst[r * width + start..r * width + start + len]
            .copy_from_slice(&src[r * len..(r + 1) * len]);
    }
}
