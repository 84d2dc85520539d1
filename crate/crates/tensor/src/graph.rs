//! Tape-based reverse-mode automatic differentiation.
//!
//! Every operation appends a node holding its forward value to the tape, so
//! node indices are already a topological order. [`Graph::backward`] walks the
//! tape once in reverse and accumulates gradients into the inputs that need
//! them; constants never receive gradient storage.

use crate::conv::{col2im, im2col, ConvGeometry};
use crate::error::{Result, TensorError};
use crate::float::{gemm, Float};
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Unary {
    Exp,
    Square,
    Tanh,
    Silu,
    Gelu,
    Relu,
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    MulBias(Var, Var),
    AddChannelBias(Var, Var),
    Scale(Var, T),
    Shift(Var),
    Clamp { x: Var, lo: T, hi: T },
    Unary(Var, Unary),
    Softmax(Var),
    LayerNorm { x: Var, rstd: Vec<T> },
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    SwapAxes01 { x: Var, a: usize, b: usize, c: usize },
    ConcatRows(Vec<Var>),
    SliceRows { x: Var, start: usize },
    GatherRows { x: Var, idx: Vec<usize> },
    MaskFill { x: Var, fill: Var, mask: Vec<bool> },
    Conv2d { x: Var, w: Var, geom: ConvGeometry, batch: usize },
    ConvTranspose2d { x: Var, w: Var, geom: ConvGeometry, batch: usize, cin: usize },
    StraightThrough(Var),
}

#[derive(Debug, Clone)]
struct Node<T> {
    op: Op<T>,
    value: Tensor<T>,
    requires_grad: bool,
}

/// Recording tape for one forward/backward pass.
#[derive(Debug, Clone, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Float> Gradients<T> {
    /// Gradient of a leaf that required grad, `None` if it did not influence the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TensorError {
    TensorError::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn sigmoid<T: Float>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu<T: Float>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let half = T::from_f64(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

fn gelu_grad<T: Float>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let half = T::from_f64(0.5);
    let th = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + th)
        + half * x * (T::one() - th * th) * c * (T::one() + T::from_f64(3.0) * a * x * x)
}

impl<T: Float> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node recorded after the first `len`, so a graph holding
    /// bound weights can be reused for many forward passes.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(Op::Leaf, t, false)
    }

    /// Leaf whose gradient is tracked.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push(Op::Leaf, t, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Matrix product. Both operands are 2-d, or both 3-d with equal leading
    /// (batch) extent. With `trans_b` the second operand is stored transposed.
    pub fn matmul_t(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let (batch, m, k, n) = match (sa.len(), sb.len()) {
            (2, 2) => {
                let (bk, n) = if trans_b { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
                if sa[1] != bk {
                    return Err(shape_err("matmul", &sa, &sb));
                }
                (1, sa[0], sa[1], n)
            }
            (3, 3) => {
                let (bk, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
                if sa[0] != sb[0] || sa[2] != bk {
                    return Err(shape_err("matmul", &sa, &sb));
                }
                (sa[0], sa[1], sa[2], n)
            }
            _ => return Err(shape_err("matmul", &sa, &sb)),
        };
        let mut out = vec![T::zero(); batch * m * n];
        {
            let av = self.value(a).data();
            let bv = self.value(b).data();
            for i in 0..batch {
                gemm(
                    m,
                    k,
                    n,
                    &av[i * m * k..(i + 1) * m * k],
                    false,
                    &bv[i * k * n..(i + 1) * k * n],
                    trans_b,
                    &mut out[i * m * n..(i + 1) * m * n],
                    false,
                );
            }
        }
        let shape = if sa.len() == 2 { vec![m, n] } else { vec![batch, m, n] };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Op::MatMul {
                a,
                b,
                trans_b,
                batch,
                m,
                k,
                n,
            },
            Tensor::new(shape, out)?,
            rg,
        ))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false)
    }

    /// `x · w + b` for `x: [n, in]`, `w: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_bias(y, b),
            None => Ok(y),
        }
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        self.value(a).zip_map(self.value(b), name, f)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Add(a, b), v, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Sub(a, b), v, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Mul(a, b), v, rg))
    }

    fn bias_check(&self, x: Var, b: Var, op: &'static str) -> Result<usize> {
        let d = self.value(x).last_dim();
        let sb = self.shape(b);
        if sb.len() != 1 || sb[0] != d {
            return Err(shape_err(op, self.shape(x), sb));
        }
        Ok(d)
    }

    /// Adds a `[d]` vector to every row of `x: [.., d]`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let d = self.bias_check(x, b, "add_bias")?;
        let bv = self.value(b).data().to_vec();
        let mut v = self.value(x).clone();
        for (i, e) in v.data_mut().iter_mut().enumerate() {
            *e += bv[i % d];
        }
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(Op::AddBias(x, b), v, rg))
    }

    /// Multiplies every row of `x: [.., d]` elementwise by a `[d]` vector.
    pub fn mul_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let d = self.bias_check(x, b, "mul_bias")?;
        let bv = self.value(b).data().to_vec();
        let mut v = self.value(x).clone();
        for (i, e) in v.data_mut().iter_mut().enumerate() {
            *e *= bv[i % d];
        }
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(Op::MulBias(x, b), v, rg))
    }

    /// Adds a per-channel bias `[C]` to `x: [B, C, H, W]`.
    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sb = self.shape(b).to_vec();
        if sx.len() != 4 || sb.len() != 1 || sb[0] != sx[1] {
            return Err(shape_err("add_channel_bias", &sx, &sb));
        }
        let plane = sx[2] * sx[3];
        let bv = self.value(b).data().to_vec();
        let mut v = self.value(x).clone();
        for (i, e) in v.data_mut().iter_mut().enumerate() {
            *e += bv[(i / plane) % sx[1]];
        }
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(Op::AddChannelBias(x, b), v, rg))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let v = self.value(x).scale(c);
        let rg = self.rg(x);
        self.push(Op::Scale(x, c), v, rg)
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Var {
        let v = self.value(x).map(|e| e + c);
        let rg = self.rg(x);
        self.push(Op::Shift(x), v, rg)
    }

    fn unary(&mut self, x: Var, kind: Unary) -> Var {
        let f: fn(T) -> T = match kind {
            Unary::Exp => |e| e.exp(),
            Unary::Square => |e| e * e,
            Unary::Tanh => |e| e.tanh(),
            Unary::Silu => |e| e * sigmoid(e),
            Unary::Gelu => gelu,
            Unary::Relu => |e| e.max(T::zero()),
        };
        let v = self.value(x).map(f);
        let rg = self.rg(x);
        self.push(Op::Unary(x, kind), v, rg)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Exp)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Square)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Tanh)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Silu)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Gelu)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Relu)
    }

    /// Elementwise clamp to `[lo, hi]`; the gradient is zero where clamped.
    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Var {
        let v = self.value(x).map(|e| e.max(lo).min(hi));
        let rg = self.rg(x);
        self.push(Op::Clamp { x, lo, hi }, v, rg)
    }

    /// Softmax over the last axis, max-subtracted.
    pub fn softmax(&mut self, x: Var) -> Var {
        let mut v = self.value(x).clone();
        let d = v.last_dim();
        for row in v.data_mut().chunks_mut(d) {
            let max = row.iter().fold(T::neg_infinity(), |m, &e| m.max(e));
            let mut total = T::zero();
            for e in row.iter_mut() {
                *e = (*e - max).exp();
                total += *e;
            }
            for e in row.iter_mut() {
                *e /= total;
            }
        }
        let rg = self.rg(x);
        self.push(Op::Softmax(x), v, rg)
    }

    /// Normalizes each row over the last axis to zero mean and unit variance
    /// (biased variance, `eps` added). No affine part; compose with
    /// [`Graph::mul_bias`] / [`Graph::add_bias`] for gain and bias.
    pub fn layer_norm(&mut self, x: Var, eps: T) -> Var {
        let mut v = self.value(x).clone();
        let d = v.last_dim();
        let dn = T::from_f64(d as f64);
        let mut rstd = Vec::with_capacity(v.rows());
        for row in v.data_mut().chunks_mut(d) {
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&e| (e - mean) * (e - mean)).sum::<T>() / dn;
            let r = T::one() / (var + eps).sqrt();
            for e in row.iter_mut() {
                *e = (*e - mean) * r;
            }
            rstd.push(r);
        }
        let rg = self.rg(x);
        self.push(Op::LayerNorm { x, rstd }, v, rg)
    }

    /// Affine layer norm: `layer_norm(x) * gain + bias`.
    pub fn layer_norm_affine(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let n = self.layer_norm(x, eps);
        let s = self.mul_bias(n, gain)?;
        self.add_bias(s, bias)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(Op::Sum(x), v, rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).mean());
        let rg = self.rg(x);
        self.push(Op::Mean(x), v, rg)
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(Op::Reshape(x), v, rg))
    }

    /// `[A, B, C] -> [B, A, C]`.
    pub fn swap_axes01(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(TensorError::Invalid {
                op: "swap_axes01",
                msg: format!("expected rank 3, got {s:?}"),
            });
        }
        let (a, b, c) = (s[0], s[1], s[2]);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); a * b * c];
        swap01(src, &mut out, a, b, c);
        let rg = self.rg(x);
        Ok(self.push(Op::SwapAxes01 { x, a, b, c }, Tensor::new([b, a, c], out)?, rg))
    }

    /// Concatenation along the first axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.shape(parts[0]).to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len() || s[1..] != first[1..] {
                return Err(shape_err("concat_rows", &first, s));
            }
            rows += s[0];
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = first;
        shape[0] = rows;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Op::ConcatRows(parts.to_vec()), Tensor::new(shape, data)?, rg))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let v = self.value(x).slice_rows(start, len)?;
        let rg = self.rg(x);
        Ok(self.push(Op::SliceRows { x, start }, v, rg))
    }

    /// Selects rows (first axis) by index; indices may repeat.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let inner: usize = s[1..].iter().product();
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(idx.len() * inner);
        for &i in idx {
            if i >= s[0] {
                return Err(TensorError::Invalid {
                    op: "gather_rows",
                    msg: format!("row {i} out of {}", s[0]),
                });
            }
            data.extend_from_slice(&src[i * inner..(i + 1) * inner]);
        }
        let mut shape = s;
        shape[0] = idx.len();
        let rg = self.rg(x);
        Ok(self.push(
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
            Tensor::new(shape, data)?,
            rg,
        ))
    }

    /// Replaces the rows of `x: [n, d]` flagged in `mask` by the vector `fill: [d]`.
    /// Flagged rows of `x` receive no gradient and do not affect the output.
    pub fn mask_fill(&mut self, x: Var, fill: Var, mask: &[bool]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let sf = self.shape(fill).to_vec();
        if s.len() != 2 || sf != [s[1]] || mask.len() != s[0] {
            return Err(shape_err("mask_fill", &s, &sf));
        }
        let d = s[1];
        let fv = self.value(fill).data().to_vec();
        let mut v = self.value(x).clone();
        for (row, &m) in v.data_mut().chunks_mut(d).zip(mask) {
            if m {
                row.copy_from_slice(&fv);
            }
        }
        let rg = self.rg(x) || self.rg(fill);
        Ok(self.push(
            Op::MaskFill {
                x,
                fill,
                mask: mask.to_vec(),
            },
            v,
            rg,
        ))
    }

    /// 2-d convolution, `x: [B, C, H, W]`, `w: [Co, C, k, k]`, zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 4 || sw.len() != 4 || sw[1] != sx[1] || sw[2] != sw[3] {
            return Err(shape_err("conv2d", &sx, &sw));
        }
        let geom = ConvGeometry {
            channels: sx[1],
            height: sx[2],
            width: sx[3],
            kernel: sw[2],
            stride,
            pad,
        };
        if !geom.valid() {
            return Err(shape_err("conv2d", &sx, &sw));
        }
        let (batch, cout) = (sx[0], sw[0]);
        let (rows, cols_n) = (geom.col_rows(), geom.col_cols());
        let mut cols = vec![T::zero(); rows * cols_n];
        let mut out = vec![T::zero(); batch * cout * cols_n];
        let in_sz = sx[1] * sx[2] * sx[3];
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            for bi in 0..batch {
                im2col(&xv[bi * in_sz..(bi + 1) * in_sz], &geom, &mut cols);
                gemm(
                    cout,
                    rows,
                    cols_n,
                    wv,
                    false,
                    &cols,
                    false,
                    &mut out[bi * cout * cols_n..(bi + 1) * cout * cols_n],
                    false,
                );
            }
        }
        let shape = [batch, cout, geom.out_height(), geom.out_width()];
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(Op::Conv2d { x, w, geom, batch }, Tensor::new(shape, out)?, rg))
    }

    /// Transposed 2-d convolution (adjoint of [`Graph::conv2d`]),
    /// `x: [B, Cin, H, W]`, `w: [Cin, Cout, k, k]`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 4 || sw.len() != 4 || sw[0] != sx[1] || sw[2] != sw[3] {
            return Err(shape_err("conv_transpose2d", &sx, &sw));
        }
        let k = sw[2];
        let (batch, cin, h, wd, cout) = (sx[0], sx[1], sx[2], sx[3], sw[1]);
        if (h - 1) * stride + k < 2 * pad || (wd - 1) * stride + k < 2 * pad {
            return Err(shape_err("conv_transpose2d", &sx, &sw));
        }
        let geom = ConvGeometry {
            channels: cout,
            height: (h - 1) * stride + k - 2 * pad,
            width: (wd - 1) * stride + k - 2 * pad,
            kernel: k,
            stride,
            pad,
        };
        if geom.out_height() != h || geom.out_width() != wd {
            return Err(shape_err("conv_transpose2d", &sx, &sw));
        }
        let (rows, cols_n) = (geom.col_rows(), h * wd);
        let out_sz = cout * geom.height * geom.width;
        let mut cols = vec![T::zero(); rows * cols_n];
        let mut out = vec![T::zero(); batch * out_sz];
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            for bi in 0..batch {
                gemm(
                    rows,
                    cin,
                    cols_n,
                    wv,
                    true,
                    &xv[bi * cin * cols_n..(bi + 1) * cin * cols_n],
                    false,
                    &mut cols,
                    false,
                );
                col2im(&cols, &geom, &mut out[bi * out_sz..(bi + 1) * out_sz]);
            }
        }
        let shape = [batch, cout, geom.height, geom.width];
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(
            Op::ConvTranspose2d {
                x,
                w,
                geom,
                batch,
                cin,
            },
            Tensor::new(shape, out)?,
            rg,
        ))
    }

    /// Forward value `replacement`, gradient passed to `x` unchanged.
    pub fn straight_through(&mut self, x: Var, replacement: Tensor<T>) -> Result<Var> {
        self.value(x).expect_same_shape(&replacement, "straight_through")?;
        let rg = self.rg(x);
        Ok(self.push(Op::StraightThrough(x), replacement, rg))
    }

    /// Copy of `x` that blocks gradient flow.
    pub fn detach(&mut self, x: Var) -> Var {
        let v = self.value(x).clone();
        self.constant(v)
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(TensorError::Invalid {
                op: "backward",
                msg: format!("loss must be scalar, got {:?}", self.shape(loss)),
            });
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        if !self.rg(loss) {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::full(self.shape(loss).to_vec(), T::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(gout) = grads[i].take() else {
                continue;
            };
            if let Op::Leaf = node.op {
                grads[i] = Some(gout);
                continue;
            }
            self.backward_node(node, &gout, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn buf<'a>(&self, grads: &'a mut [Option<Tensor<T>>], v: Var) -> Option<&'a mut Tensor<T>> {
        if !self.rg(v) {
            return None;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.shape(v).to_vec()));
        }
        slot.as_mut()
    }

    fn acc_each(&self, grads: &mut [Option<Tensor<T>>], v: Var, f: impl Fn(usize) -> T) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => {
                for (i, e) in g.data_mut().iter_mut().enumerate() {
                    *e += f(i);
                }
            }
            slot => *slot = Some(Tensor::from_fn(self.shape(v).to_vec(), f)),
        }
    }

    fn backward_node(&self, node: &Node<T>, gout: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let go = gout.data();
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul {
                a,
                b,
                trans_b,
                batch,
                m,
                k,
                n,
            } => {
                let av = self.value(a).data();
                let bv = self.value(b).data();
                if let Some(ga) = self.buf(grads, a) {
                    let ga = ga.data_mut();
                    for i in 0..batch {
                        // dA = dC · op(B)^T
                        gemm(
                            m,
                            n,
                            k,
                            &go[i * m * n..(i + 1) * m * n],
                            false,
                            &bv[i * k * n..(i + 1) * k * n],
                            !trans_b,
                            &mut ga[i * m * k..(i + 1) * m * k],
                            true,
                        );
                    }
                }
                if let Some(gb) = self.buf(grads, b) {
                    let gb = gb.data_mut();
                    for i in 0..batch {
                        let dst = &mut gb[i * k * n..(i + 1) * k * n];
                        let a_i = &av[i * m * k..(i + 1) * m * k];
                        let g_i = &go[i * m * n..(i + 1) * m * n];
                        if trans_b {
                            // dB[n,k] = dC^T · A
                            gemm(n, m, k, g_i, true, a_i, false, dst, true);
                        } else {
                            // dB[k,n] = A^T · dC
                            gemm(k, m, n, a_i, true, g_i, false, dst, true);
                        }
                    }
                }
            }
            &Op::Add(a, b) => {
                self.acc_each(grads, a, |i| go[i]);
                self.acc_each(grads, b, |i| go[i]);
            }
            &Op::Sub(a, b) => {
                self.acc_each(grads, a, |i| go[i]);
                self.acc_each(grads, b, |i| -go[i]);
            }
            &Op::Mul(a, b) => {
                let av = self.value(a).data();
                let bv = self.value(b).data();
                self.acc_each(grads, a, |i| go[i] * bv[i]);
                self.acc_each(grads, b, |i| go[i] * av[i]);
            }
            &Op::AddBias(x, b) => {
                self.acc_each(grads, x, |i| go[i]);
                if let Some(gb) = self.buf(grads, b) {
                    let d = gb.numel();
                    let gb = gb.data_mut();
                    for row in go.chunks(d) {
                        for (g, &e) in gb.iter_mut().zip(row) {
                            *g += e;
                        }
                    }
                }
            }
            &Op::MulBias(x, b) => {
                let xv = self.value(x).data();
                let bv = self.value(b).data();
                let d = bv.len();
                self.acc_each(grads, x, |i| go[i] * bv[i % d]);
                if let Some(gb) = self.buf(grads, b) {
                    let gb = gb.data_mut();
                    for (i, (&g, &xe)) in go.iter().zip(xv).enumerate() {
                        gb[i % d] += g * xe;
                    }
                }
            }
            &Op::AddChannelBias(x, b) => {
                self.acc_each(grads, x, |i| go[i]);
                let s = self.shape(x);
                let (c, plane) = (s[1], s[2] * s[3]);
                if let Some(gb) = self.buf(grads, b) {
                    let gb = gb.data_mut();
                    for (i, &g) in go.iter().enumerate() {
                        gb[(i / plane) % c] += g;
                    }
                }
            }
            &Op::Scale(x, c) => self.acc_each(grads, x, |i| go[i] * c),
            &Op::Shift(x) => self.acc_each(grads, x, |i| go[i]),
            &Op::Clamp { x, lo, hi } => {
                let xv = self.value(x).data();
                self.acc_each(grads, x, |i| {
                    if xv[i] >= lo && xv[i] <= hi {
                        go[i]
                    } else {
                        T::zero()
                    }
                })
            }
            &Op::Unary(x, kind) => {
                let xv = self.value(x).data();
                match kind {
                    Unary::Exp => self.acc_each(grads, x, |i| go[i] * y[i]),
                    Unary::Square => self.acc_each(grads, x, |i| go[i] * T::from_f64(2.0) * xv[i]),
                    Unary::Tanh => self.acc_each(grads, x, |i| go[i] * (T::one() - y[i] * y[i])),
                    Unary::Silu => self.acc_each(grads, x, |i| {
                        let s = sigmoid(xv[i]);
                        go[i] * s * (T::one() + xv[i] * (T::one() - s))
                    }),
                    Unary::Gelu => self.acc_each(grads, x, |i| go[i] * gelu_grad(xv[i])),
                    Unary::Relu => self.acc_each(grads, x, |i| {
                        if xv[i] > T::zero() {
                            go[i]
                        } else {
                            T::zero()
                        }
                    }),
                }
            }
            &Op::Softmax(x) => {
                if let Some(g) = self.buf(grads, x) {
                    let d = node.value.last_dim();
                    for ((gx, yr), gr) in g.data_mut().chunks_mut(d).zip(y.chunks(d)).zip(go.chunks(d)) {
                        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for j in 0..d {
                            gx[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm { x, rstd } => {
                if let Some(g) = self.buf(grads, *x) {
                    let d = node.value.last_dim();
                    let dn = T::from_f64(d as f64);
                    for (r, ((gx, yr), gr)) in g
                        .data_mut()
                        .chunks_mut(d)
                        .zip(y.chunks(d))
                        .zip(go.chunks(d))
                        .enumerate()
                    {
                        let mg = gr.iter().copied().sum::<T>() / dn;
                        let mgy = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<T>() / dn;
                        for j in 0..d {
                            gx[j] += rstd[r] * (gr[j] - mg - yr[j] * mgy);
                        }
                    }
                }
            }
            &Op::Sum(x) => {
                let g0 = go[0];
                self.acc_each(grads, x, |_| g0);
            }
            &Op::Mean(x) => {
                let g0 = go[0] / T::from_f64(self.value(x).numel() as f64);
                self.acc_each(grads, x, |_| g0);
            }
            &Op::Reshape(x) | &Op::StraightThrough(x) => self.acc_each(grads, x, |i| go[i]),
            &Op::SwapAxes01 { x, a, b, c } => {
                if let Some(g) = self.buf(grads, x) {
                    let mut tmp = vec![T::zero(); a * b * c];
                    swap01(go, &mut tmp, b, a, c);
                    for (e, t) in g.data_mut().iter_mut().zip(tmp) {
                        *e += t;
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    self.acc_each(grads, p, |i| go[off + i]);
                    off += n;
                }
            }
            &Op::SliceRows { x, start } => {
                if let Some(g) = self.buf(grads, x) {
                    let inner = g.numel() / g.shape()[0].max(1);
                    for (e, &v) in g.data_mut()[start * inner..].iter_mut().zip(go) {
                        *e += v;
                    }
                }
            }
            Op::GatherRows { x, idx } => {
                if let Some(g) = self.buf(grads, *x) {
                    let inner = g.numel() / g.shape()[0].max(1);
                    let gd = g.data_mut();
                    for (r, &i) in idx.iter().enumerate() {
                        for j in 0..inner {
                            gd[i * inner + j] += go[r * inner + j];
                        }
                    }
                }
            }
            Op::MaskFill { x, fill, mask } => {
                let d = node.value.last_dim();
                if let Some(g) = self.buf(grads, *x) {
                    for ((gr, src), &m) in g.data_mut().chunks_mut(d).zip(go.chunks(d)).zip(mask) {
                        if !m {
                            for (e, &v) in gr.iter_mut().zip(src) {
                                *e += v;
                            }
                        }
                    }
                }
                if let Some(g) = self.buf(grads, *fill) {
                    let gd = g.data_mut();
                    for (src, &m) in go.chunks(d).zip(mask) {
                        if m {
                            for (e, &v) in gd.iter_mut().zip(src) {
                                *e += v;
                            }
                        }
                    }
                }
            }
            &Op::Conv2d { x, w, geom, batch } => {
                let xv = self.value(x).data();
                let wv = self.value(w).data();
                let cout = self.shape(w)[0];
                let (rows, cols_n) = (geom.col_rows(), geom.col_cols());
                let in_sz = geom.channels * geom.height * geom.width;
                let mut cols = vec![T::zero(); rows * cols_n];
                if self.rg(w) {
                    let gw = self.buf(grads, w).unwrap().data_mut();
                    for bi in 0..batch {
                        im2col(&xv[bi * in_sz..(bi + 1) * in_sz], &geom, &mut cols);
                        gemm(
                            cout,
                            cols_n,
                            rows,
                            &go[bi * cout * cols_n..(bi + 1) * cout * cols_n],
                            false,
                            &cols,
                            true,
                            gw,
                            true,
                        );
                    }
                }
                if let Some(gx) = self.buf(grads, x) {
                    let gx = gx.data_mut();
                    for bi in 0..batch {
                        gemm(
                            rows,
                            cout,
                            cols_n,
                            wv,
                            true,
                            &go[bi * cout * cols_n..(bi + 1) * cout * cols_n],
                            false,
                            &mut cols,
                            false,
                        );
                        col2im(&cols, &geom, &mut gx[bi * in_sz..(bi + 1) * in_sz]);
                    }
                }
            }
            &Op::ConvTranspose2d {
                x,
                w,
                geom,
                batch,
                cin,
            } => {
                let xv = self.value(x).data();
                let wv = self.value(w).data();
                let (rows, cols_n) = (geom.col_rows(), geom.col_cols());
                let out_sz = geom.channels * geom.height * geom.width;
                let mut cols = vec![T::zero(); rows * cols_n];
                let need_w = self.rg(w);
                let need_x = self.rg(x);
                for bi in 0..batch {
                    im2col(&go[bi * out_sz..(bi + 1) * out_sz], &geom, &mut cols);
                    let x_b = &xv[bi * cin * cols_n..(bi + 1) * cin * cols_n];
                    if need_w {
                        let gw = self.buf(grads, w).unwrap().data_mut();
                        gemm(cin, cols_n, rows, x_b, false, &cols, true, gw, true);
                    }
                    if need_x {
                        let gx = self.buf(grads, x).unwrap().data_mut();
                        gemm(
                            cin,
                            rows,
                            cols_n,
                            wv,
                            false,
                            &cols,
                            false,
                            &mut gx[bi * cin * cols_n..(bi + 1) * cin * cols_n],
                            true,
                        );
                    }
                }
            }
        }
    }
}

fn swap01<T: Float>(src: &[T], dst: &mut [T], a: usize, b: usize, c: usize) {
    for i in 0..a {
        for j in 0..b {
            let s = (i * b + j) * c;
            let d = (j * a + i) * c;
            dst[d..d + c].copy_from_slice(&src[s..s + c]);
        }
    }
}
