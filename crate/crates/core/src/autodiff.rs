//! Reverse-mode automatic differentiation over a per-forward tape.
//!
//! A [`Tape`] borrows the parameter registry, records every operation as a
//! node holding its output value, and is consumed by [`Tape::backward`],
//! which returns first-order gradients for every trainable parameter and
//! every input leaf created with `requires_grad`. Broadcasting is limited to
//! scalar-with-tensor and equal shapes, plus the explicit row-bias add used by
//! linear layers.

use std::collections::{BTreeMap, HashMap};

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{gemm_nn, gemm_nt, gemm_tn, Float, Tensor};

/// Floor applied to log inputs.
pub const LOG_CLAMP: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    Same,
    LhsScalar,
    RhsScalar,
}

#[derive(Debug)]
enum Op<F> {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Transpose(Var),
    Add(Var, Var, Bcast),
    Sub(Var, Var, Bcast),
    Mul(Var, Var, Bcast),
    Div(Var, Var, Bcast),
    AddRow(Var, Var),
    Scale(Var, F),
    AddScalar(Var),
    Sigmoid(Var),
    LogSigmoid(Var),
    Gelu(Var),
    Relu(Var),
    Log(Var),
    Exp(Var),
    Sqrt(Var),
    Powf(Var, F),
    Sum(Var),
    Mean(Var),
    Softmax { x: Var, axis: usize },
    LayerNorm { x: Var, gain: Var, bias: Var },
    Gather(Var, Vec<usize>),
    Reshape(Var),
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
}

struct Node<F> {
    op: Op<F>,
    /// `None` for parameter leaves, whose value lives in the registry.
    value: Option<Tensor<F>>,
    requires_grad: bool,
    saved: Vec<F>,
}

/// First-order gradients produced by [`Tape::backward`].
#[derive(Debug, Default)]
pub struct Gradients<F> {
    params: BTreeMap<ParamId, Tensor<F>>,
    vars: HashMap<Var, Tensor<F>>,
}

impl<F: Float> Gradients<F> {
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor<F>)> {
        self.params.iter().map(|(&id, t)| (id, t))
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<F>> {
        self.params.get(&id)
    }

    pub fn wrt(&self, v: Var) -> Option<&Tensor<F>> {
        self.vars.get(&v)
    }
}

pub struct Tape<'s, F: Float> {
    store: &'s ParamStore<F>,
    nodes: Vec<Node<F>>,
    param_vars: HashMap<ParamId, Var>,
}

#[inline]
fn sigmoid<F: Float>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

#[inline]
fn log_sigmoid<F: Float>(x: F) -> F {
    // min(x, 0) - ln(1 + e^{-|x|})
    x.min(F::zero()) - (-x.abs()).exp().ln_1p()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[inline]
fn gelu<F: Float>(x: F) -> F {
    let c = F::of(GELU_C);
    let a = F::of(GELU_A);
    F::of(0.5) * x * (F::one() + (c * (x + a * x * x * x)).tanh())
}

#[inline]
fn gelu_grad<F: Float>(x: F) -> F {
    let c = F::of(GELU_C);
    let a = F::of(GELU_A);
    let t = (c * (x + a * x * x * x)).tanh();
    let half = F::of(0.5);
    half * (F::one() + t) + half * x * (F::one() - t * t) * c * (F::one() + F::of(3.0) * a * x * x)
}

fn as_2d(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        0 => (1, 1),
        1 => (1, shape[0]),
        _ => {
            let c = *shape.last().unwrap();
            (shape.iter().product::<usize>() / c, c)
        }
    }
}

impl<'s, F: Float> Tape<'s, F> {
    pub fn new(store: &'s ParamStore<F>) -> Self {
        Tape {
            store,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
        }
    }

    pub fn store(&self) -> &'s ParamStore<F> {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.store.value(*id),
            _ => unreachable!("non-parameter node without value"),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    /// Value of a single-element node.
    pub fn scalar(&self, v: Var) -> F {
        self.value(v).data()[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op: Op<F>, value: Tensor<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value: Some(value),
            requires_grad,
            saved: Vec::new(),
        });
        Var(self.nodes.len() - 1)
    }

    fn push_saved(&mut self, op: Op<F>, value: Tensor<F>, rg: bool, saved: Vec<F>) -> Var {
        let v = self.push(op, value, rg);
        self.nodes[v.0].saved = saved;
        v
    }

    fn rg(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Constant leaf; never receives a gradient.
    pub fn constant(&mut self, t: Tensor<F>) -> Var {
        self.push(Op::Leaf, t, false)
    }

    /// Input leaf whose gradient is reported by [`Gradients::wrt`] when
    /// `requires_grad` is set.
    pub fn input(&mut self, t: Tensor<F>, requires_grad: bool) -> Var {
        self.push(Op::Leaf, t, requires_grad)
    }

    /// Leaf bound to a registry parameter. Trainable parameters require grad.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let rg = self.store.get(id).trainable;
        self.nodes.push(Node {
            op: Op::Param(id),
            value: None,
            requires_grad: rg,
            saved: Vec::new(),
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    // ---- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![F::zero(); m * n];
        gemm_nn(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Op::MatMul(a, b), Tensor::new(vec![m, n], out)?, rg))
    }

    /// `a · bᵀ` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(Error::dim("matmul_nt", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        let mut out = vec![F::zero(); m * n];
        gemm_nt(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Op::MatMulNT(a, b), Tensor::new(vec![m, n], out)?, rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(Error::dim("transpose", s, &[2]));
        }
        let (r, c) = (s[0], s[1]);
        let src = self.value(x).data();
        let mut out = vec![F::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Op::Transpose(x), Tensor::new(vec![c, r], out)?, rg))
    }

    /// `x[r×c] + b[c]` with the bias repeated across rows.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let c = as_2d(self.shape(x)).1;
        if self.value(b).numel() != c {
            return Err(Error::dim("add_row", self.shape(x), self.shape(b)));
        }
        let bv = self.value(b).data();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_exact_mut(c) {
            for (o, &bb) in row.iter_mut().zip(bv) {
                *o += bb;
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x, b]);
        Ok(self.push(Op::AddRow(x, b), Tensor::new(shape, out)?, rg))
    }

    // ---- elementwise binary ---------------------------------------------

    fn bcast(&self, op: &'static str, a: Var, b: Var) -> Result<(Bcast, Vec<usize>)> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() == tb.shape() || (ta.numel() == 1 && tb.numel() == 1) {
            Ok((Bcast::Same, ta.shape().to_vec()))
        } else if tb.numel() == 1 {
            Ok((Bcast::RhsScalar, ta.shape().to_vec()))
        } else if ta.numel() == 1 {
            Ok((Bcast::LhsScalar, tb.shape().to_vec()))
        } else {
            Err(Error::dim(op, ta.shape(), tb.shape()))
        }
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(F, F) -> F,
        op: impl FnOnce(Var, Var, Bcast) -> Op<F>,
    ) -> Result<Var> {
        let (mode, shape) = self.bcast(name, a, b)?;
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let out: Vec<F> = match mode {
            Bcast::Same => da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect(),
            Bcast::RhsScalar => da.iter().map(|&x| f(x, db[0])).collect(),
            Bcast::LhsScalar => db.iter().map(|&y| f(da[0], y)).collect(),
        };
        let rg = self.rg(&[a, b]);
        Ok(self.push(op(a, b, mode), Tensor::new(shape, out)?, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    /// Hadamard product (or scalar-times-tensor).
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div)
    }

    // ---- elementwise unary ----------------------------------------------

    fn unary(&mut self, x: Var, f: impl Fn(F) -> F, op: Op<F>) -> Var {
        let out = self.value(x).map(f);
        let rg = self.rg(&[x]);
        self.push(op, out, rg)
    }

    pub fn scale(&mut self, x: Var, c: F) -> Var {
        self.unary(x, |v| v * c, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: F) -> Var {
        self.unary(x, |v| v + c, Op::AddScalar(x))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -F::one())
    }

    /// `1 - x`.
    pub fn one_minus(&mut self, x: Var) -> Var {
        let n = self.neg(x);
        self.add_scalar(n, F::one())
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    /// `ln σ(x)` evaluated stably, floored at `ln(1e-12)`.
    pub fn log_sigmoid(&mut self, x: Var) -> Var {
        let floor = F::of(LOG_CLAMP.ln());
        self.unary(x, move |v| log_sigmoid(v).max(floor), Op::LogSigmoid(x))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, gelu, Op::Gelu(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(F::zero()), Op::Relu(x))
    }

    /// Natural log with inputs clamped at `1e-12`.
    pub fn log(&mut self, x: Var) -> Var {
        let floor = F::of(LOG_CLAMP);
        self.unary(x, move |v| v.max(floor).ln(), Op::Log(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.exp(), Op::Exp(x))
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(F::zero()).sqrt(), Op::Sqrt(x))
    }

    /// `x^p` for nonnegative `x`; negative inputs are clamped to zero.
    pub fn powf(&mut self, x: Var, p: F) -> Var {
        self.unary(x, move |v| v.max(F::zero()).powf(p), Op::Powf(x, p))
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.mul(x, x)
    }

    // ---- reductions -----------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let s: F = self.value(x).data().iter().copied().sum();
        let rg = self.rg(&[x]);
        self.push(Op::Sum(x), Tensor::scalar(s), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s: F = t.data().iter().copied().sum::<F>() / F::of(t.numel() as f64);
        let rg = self.rg(&[x]);
        self.push(Op::Mean(x), Tensor::scalar(s), rg)
    }

    /// Softmax along `axis`, max-subtracted.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::dim("softmax", &shape, &[axis]));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let src = self.value(x).data();
        let mut out = vec![F::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * len + k) * inner + i;
                let mut mx = F::neg_infinity();
                for k in 0..len {
                    mx = mx.max(src[idx(k)]);
                }
                let mut z = F::zero();
                for k in 0..len {
                    let e = (src[idx(k)] - mx).exp();
                    out[idx(k)] = e;
                    z += e;
                }
                for k in 0..len {
                    out[idx(k)] = out[idx(k)] / z;
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Op::Softmax { x, axis }, Tensor::new(shape, out)?, rg))
    }

    /// Row-wise layer normalization over the last axis followed by the
    /// affine `gain`, `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: F) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (r, d) = as_2d(&shape);
        if self.value(gain).numel() != d || self.value(bias).numel() != d {
            return Err(Error::dim("layer_norm", &shape, self.shape(gain)));
        }
        let src = self.value(x).data();
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let mut out = vec![F::zero(); r * d];
        let mut saved = Vec::with_capacity(2 * r);
        let dn = F::of(d as f64);
        for i in 0..r {
            let row = &src[i * d..(i + 1) * d];
            let mean = row.iter().copied().sum::<F>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / dn;
            let rstd = F::one() / (var + eps).sqrt();
            for j in 0..d {
                out[i * d + j] = (row[j] - mean) * rstd * g[j] + b[j];
            }
            saved.push(mean);
            saved.push(rstd);
        }
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push_saved(
            Op::LayerNorm { x, gain, bias },
            Tensor::new(shape, out)?,
            rg,
            saved,
        ))
    }

    // ---- layout ---------------------------------------------------------

    /// `out[i] = x[index[i]]`, reshaped to `shape`.
    pub fn gather(&mut self, x: Var, index: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let src = self.value(x).data();
        if index.len() != shape.iter().product::<usize>() || index.iter().any(|&i| i >= src.len())
        {
            return Err(Error::dim("gather", self.shape(x), shape));
        }
        let out: Vec<F> = index.iter().map(|&i| src[i]).collect();
        let rg = self.rg(&[x]);
        Ok(self.push(Op::Gather(x, index), Tensor::new(shape.to_vec(), out)?, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(Op::Reshape(x), t, rg))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = as_2d(self.shape(x));
        if start + len > r || len == 0 {
            return Err(Error::dim("slice_rows", self.shape(x), &[start, len]));
        }
        let out = self.value(x).data()[start * c..(start + len) * c].to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(Op::SliceRows { x, start }, Tensor::new(vec![len, c], out)?, rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = as_2d(self.shape(x));
        if start + len > c || len == 0 {
            return Err(Error::dim("slice_cols", self.shape(x), &[start, len]));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&src[i * c + start..i * c + start + len]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Op::SliceCols { x, start }, Tensor::new(vec![r, len], out)?, rg))
    }

    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        let c = as_2d(self.shape(xs[0])).1;
        let mut out = Vec::new();
        let mut rows = 0;
        for &x in xs {
            let (r, cx) = as_2d(self.shape(x));
            if cx != c {
                return Err(Error::dim("concat_rows", self.shape(xs[0]), self.shape(x)));
            }
            out.extend_from_slice(self.value(x).data());
            rows += r;
        }
        let rg = self.rg(xs);
        Ok(self.push(Op::ConcatRows(xs.to_vec()), Tensor::new(vec![rows, c], out)?, rg))
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        let r = as_2d(self.shape(xs[0])).0;
        let mut widths = Vec::with_capacity(xs.len());
        for &x in xs {
            let (rx, cx) = as_2d(self.shape(x));
            if rx != r {
                return Err(Error::dim("concat_cols", self.shape(xs[0]), self.shape(x)));
            }
            widths.push(cx);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&x, &w) in xs.iter().zip(&widths) {
                out.extend_from_slice(&self.value(x).data()[i * w..(i + 1) * w]);
            }
        }
        let rg = self.rg(xs);
        Ok(self.push(Op::ConcatCols(xs.to_vec()), Tensor::new(vec![r, total], out)?, rg))
    }

    // ---- backward -------------------------------------------------------

    /// Propagates d`loss` back through the tape and releases it.
    pub fn backward(self, loss: Var) -> Result<Gradients<F>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<F>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        let mut result = Gradients {
            params: BTreeMap::new(),
            vars: HashMap::new(),
        };
        if !self.nodes[loss.0].requires_grad {
            return Ok(result);
        }
        grads[loss.0] = Some(vec![F::one()]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let out = node.value.as_ref();
            match &node.op {
                Op::Leaf => {
                    let shape = self.value(Var(i)).shape().to_vec();
                    result.vars.insert(Var(i), Tensor::new(shape, g)?);
                }
                Op::Param(id) => {
                    let shape = self.store.value(*id).shape().to_vec();
                    result.params.insert(*id, Tensor::new(shape, g)?);
                }
                Op::MatMul(a, b) => {
                    let (sa, sb) = (self.shape(*a), self.shape(*b));
                    let (m, k, n) = (sa[0], sa[1], sb[1]);
                    if self.requires_grad(*a) {
                        let bv = self.value(*b).data();
                        self.acc(&mut grads, *a, |d| gemm_nt(&g, bv, d, m, n, k));
                    }
                    if self.requires_grad(*b) {
                        let av = self.value(*a).data();
                        self.acc(&mut grads, *b, |d| gemm_tn(av, &g, d, m, k, n));
                    }
                }
                Op::MatMulNT(a, b) => {
                    // c[m×n] = a[m×k] b[n×k]ᵀ
                    let (sa, sb) = (self.shape(*a), self.shape(*b));
                    let (m, k, n) = (sa[0], sa[1], sb[0]);
                    if self.requires_grad(*a) {
                        let bv = self.value(*b).data();
                        self.acc(&mut grads, *a, |d| gemm_nn(&g, bv, d, m, n, k));
                    }
                    if self.requires_grad(*b) {
                        let av = self.value(*a).data();
                        self.acc(&mut grads, *b, |d| gemm_tn(&g, av, d, m, n, k));
                    }
                }
                Op::Transpose(x) => {
                    let s = self.shape(*x);
                    let (r, c) = (s[0], s[1]);
                    self.acc(&mut grads, *x, |d| {
                        for i in 0..r {
                            for j in 0..c {
                                d[i * c + j] += g[j * r + i];
                            }
                        }
                    });
                }
                Op::Add(a, b, mode) => {
                    self.acc_bcast(&mut grads, *a, *b, *mode, &g, |_, _| F::one(), |_, _| F::one())
                }
                Op::Sub(a, b, mode) => {
                    self.acc_bcast(&mut grads, *a, *b, *mode, &g, |_, _| F::one(), |_, _| -F::one())
                }
                Op::Mul(a, b, mode) => {
                    self.acc_bcast(&mut grads, *a, *b, *mode, &g, |_, y| y, |x, _| x)
                }
                Op::Div(a, b, mode) => self.acc_bcast(
                    &mut grads,
                    *a,
                    *b,
                    *mode,
                    &g,
                    |_, y| F::one() / y,
                    |x, y| -x / (y * y),
                ),
                Op::AddRow(x, b) => {
                    let c = self.value(*b).numel();
                    self.acc(&mut grads, *x, |d| add_into(d, &g));
                    self.acc(&mut grads, *b, |d| {
                        for row in g.chunks_exact(c) {
                            add_into(d, row);
                        }
                    });
                }
                Op::Scale(x, c) => {
                    let c = *c;
                    self.acc(&mut grads, *x, |d| {
                        for (a, &b) in d.iter_mut().zip(&g) {
                            *a += b * c;
                        }
                    });
                }
                Op::AddScalar(x) => self.acc(&mut grads, *x, |d| add_into(d, &g)),
                Op::Sigmoid(x) => {
                    let y = out.unwrap().data();
                    self.acc_map(&mut grads, *x, &g, |i, _| y[i] * (F::one() - y[i]));
                }
                Op::LogSigmoid(x) => {
                    let y = out.unwrap().data();
                    let floor = F::of(LOG_CLAMP.ln());
                    self.acc_map(&mut grads, *x, &g, |i, xv| {
                        if y[i] <= floor {
                            F::zero()
                        } else {
                            sigmoid(-xv)
                        }
                    });
                }
                Op::Gelu(x) => self.acc_map(&mut grads, *x, &g, |_, xv| gelu_grad(xv)),
                Op::Relu(x) => self.acc_map(&mut grads, *x, &g, |_, xv| {
                    if xv > F::zero() {
                        F::one()
                    } else {
                        F::zero()
                    }
                }),
                Op::Log(x) => {
                    let floor = F::of(LOG_CLAMP);
                    self.acc_map(&mut grads, *x, &g, |_, xv| {
                        if xv > floor {
                            F::one() / xv
                        } else {
                            F::zero()
                        }
                    });
                }
                Op::Exp(x) => {
                    let y = out.unwrap().data();
                    self.acc_map(&mut grads, *x, &g, |i, _| y[i]);
                }
                Op::Sqrt(x) => {
                    let y = out.unwrap().data();
                    self.acc_map(&mut grads, *x, &g, |i, _| {
                        if y[i] > F::zero() {
                            F::of(0.5) / y[i]
                        } else {
                            F::zero()
                        }
                    });
                }
                Op::Powf(x, p) => {
                    let p = *p;
                    self.acc_map(&mut grads, *x, &g, |_, xv| {
                        if xv > F::zero() {
                            p * xv.powf(p - F::one())
                        } else {
                            F::zero()
                        }
                    });
                }
                Op::Sum(x) => {
                    let g0 = g[0];
                    self.acc(&mut grads, *x, |d| d.iter_mut().for_each(|v| *v += g0));
                }
                Op::Mean(x) => {
                    let n = F::of(self.value(*x).numel() as f64);
                    let g0 = g[0] / n;
                    self.acc(&mut grads, *x, |d| d.iter_mut().for_each(|v| *v += g0));
                }
                Op::Softmax { x, axis } => {
                    let y = out.unwrap();
                    let (outer, len, inner) = axis_split(y.shape(), *axis);
                    let yv = y.data();
                    self.acc(&mut grads, *x, |d| {
                        for o in 0..outer {
                            for i in 0..inner {
                                let idx = |k: usize| (o * len + k) * inner + i;
                                let mut s = F::zero();
                                for k in 0..len {
                                    s += g[idx(k)] * yv[idx(k)];
                                }
                                for k in 0..len {
                                    d[idx(k)] += yv[idx(k)] * (g[idx(k)] - s);
                                }
                            }
                        }
                    });
                }
                Op::LayerNorm { x, gain, bias } => {
                    let xs = self.value(*x);
                    let (r, dd) = as_2d(xs.shape());
                    let xv = xs.data();
                    let gv = self.value(*gain).data();
                    let saved = &node.saved;
                    let xhat = |i: usize, j: usize| (xv[i * dd + j] - saved[2 * i]) * saved[2 * i + 1];
                    self.acc(&mut grads, *bias, |d| {
                        for row in g.chunks_exact(dd) {
                            add_into(d, row);
                        }
                    });
                    self.acc(&mut grads, *gain, |d| {
                        for i in 0..r {
                            for j in 0..dd {
                                d[j] += g[i * dd + j] * xhat(i, j);
                            }
                        }
                    });
                    self.acc(&mut grads, *x, |d| {
                        let dn = F::of(dd as f64);
                        for i in 0..r {
                            let rstd = saved[2 * i + 1];
                            let mut m1 = F::zero();
                            let mut m2 = F::zero();
                            for j in 0..dd {
                                let dxh = g[i * dd + j] * gv[j];
                                m1 += dxh;
                                m2 += dxh * xhat(i, j);
                            }
                            m1 = m1 / dn;
                            m2 = m2 / dn;
                            for j in 0..dd {
                                let dxh = g[i * dd + j] * gv[j];
                                d[i * dd + j] += rstd * (dxh - m1 - xhat(i, j) * m2);
                            }
                        }
                    });
                }
                Op::Gather(x, index) => self.acc(&mut grads, *x, |d| {
                    for (&src, &gv) in index.iter().zip(&g) {
                        d[src] += gv;
                    }
                }),
                Op::Reshape(x) => self.acc(&mut grads, *x, |d| add_into(d, &g)),
                Op::SliceRows { x, start } => {
                    let c = as_2d(self.shape(*x)).1;
                    let off = start * c;
                    self.acc(&mut grads, *x, |d| add_into(&mut d[off..off + g.len()], &g));
                }
                Op::SliceCols { x, start } => {
                    let (r, c) = as_2d(self.shape(*x));
                    let len = g.len() / r;
                    self.acc(&mut grads, *x, |d| {
                        for i in 0..r {
                            add_into(
                                &mut d[i * c + start..i * c + start + len],
                                &g[i * len..(i + 1) * len],
                            );
                        }
                    });
                }
                Op::ConcatRows(xs) => {
                    let mut off = 0;
                    for &x in xs {
                        let n = self.value(x).numel();
                        self.acc(&mut grads, x, |d| add_into(d, &g[off..off + n]));
                        off += n;
                    }
                }
                Op::ConcatCols(xs) => {
                    let (r, total) = as_2d(out.unwrap().shape());
                    let mut col = 0;
                    for &x in xs {
                        let w = as_2d(self.shape(x)).1;
                        self.acc(&mut grads, x, |d| {
                            for i in 0..r {
                                add_into(
                                    &mut d[i * w..(i + 1) * w],
                                    &g[i * total + col..i * total + col + w],
                                );
                            }
                        });
                        col += w;
                    }
                }
            }
        }
        Ok(result)
    }

    fn acc(&self, grads: &mut [Option<Vec<F>>], v: Var, f: impl FnOnce(&mut [F])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let buf = grads[v.0].get_or_insert_with(|| vec![F::zero(); self.value(v).numel()]);
        f(buf);
    }

    /// `d[i] += g[i] * local(i, x[i])`.
    fn acc_map(&self, grads: &mut [Option<Vec<F>>], x: Var, g: &[F], local: impl Fn(usize, F) -> F) {
        let xv = self.value(x).data();
        self.acc(grads, x, |d| {
            for (i, (dv, &gv)) in d.iter_mut().zip(g).enumerate() {
                *dv += gv * local(i, xv[i]);
            }
        });
    }

    #[allow(clippy::too_many_arguments)]
    fn acc_bcast(
        &self,
        grads: &mut [Option<Vec<F>>],
        a: Var,
        b: Var,
        mode: Bcast,
        g: &[F],
        da: impl Fn(F, F) -> F,
        db: impl Fn(F, F) -> F,
    ) {
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let pick = |i: usize| -> (F, F) {
            match mode {
                Bcast::Same => (av[i], bv[i]),
                Bcast::RhsScalar => (av[i], bv[0]),
                Bcast::LhsScalar => (av[0], bv[i]),
            }
        };
        self.acc(grads, a, |d| {
            for (i, &gv) in g.iter().enumerate() {
                let (x, y) = pick(i);
                let j = if mode == Bcast::LhsScalar { 0 } else { i };
                d[j] += gv * da(x, y);
            }
        });
        self.acc(grads, b, |d| {
            for (i, &gv) in g.iter().enumerate() {
                let (x, y) = pick(i);
                let j = if mode == Bcast::RhsScalar { 0 } else { i };
                d[j] += gv * db(x, y);
            }
        });
    }
}

fn add_into<F: Float>(d: &mut [F], g: &[F]) {
    for (a, &b) in d.iter_mut().zip(g) {
        *a += b;
    }
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let len = shape[axis];
    let inner = shape[axis + 1..].iter().product();
    (outer, len, inner)
}
