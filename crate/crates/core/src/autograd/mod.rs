//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s. Calling
//! [`Graph::backward`] on a scalar node walks the tape in reverse and returns
//! gradients for every node that transitively depends on a leaf created with
//! `requires_grad = true`. Leaves created as constants never receive
//! gradients, which is how frozen networks are expressed.

mod conv;

use crate::error::{Error, Result};
use crate::tensor::{matmul_a_bt_acc, matmul_acc, matmul_at_b_acc, Scalar, Tensor};

pub(crate) use conv::ConvGeom;
use conv::{col2im_acc, im2col};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Crop {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

enum Op<S> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    AddScalar(Var),
    /// `x [N, C, ...] + b [C]`
    BiasChannels(Var, Var),
    /// `x [N, I] * w[O, I]^T`
    Linear(Var, Var),
    Conv2d { x: Var, w: Var, geom: ConvGeom, cols: Vec<S> },
    ConvTranspose2d { x: Var, w: Var, geom: ConvGeom },
    Relu(Var),
    LeakyRelu(Var, S),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Ln(Var),
    Softplus(Var),
    Abs(Var),
    Square(Var),
    Clamp(Var, S, S),
    Sum(Var),
    Mean(Var),
    LogMeanExp(Var),
    Reshape(Var),
    /// Concatenation along axis 1.
    Concat(Vec<Var>),
    /// Concatenation along axis 0.
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    CropSpatial(Var, Crop),
    /// `x [N, C, H, W] * m [N, 1, H, W]`
    MulBroadcastChannels(Var, Var),
    /// `x [N, C] -> [N, C, H, W]`
    TileSpatial(Var),
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

pub struct Graph<S> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`].
pub struct Grads<S> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Grads<S> {
    pub fn get(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<S>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn shape_err(op: &str, a: &[usize], b: &[usize]) -> Error {
    Error::Shape(format!("{op}: {a:?} vs {b:?}"))
}

fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

/// `ln(1 + e^x)` without overflow for large `x` or underflow to negative
/// values for very negative `x`.
pub fn softplus_scalar<S: Scalar>(x: S) -> S {
    if x > S::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, false)
    }

    /// A constant copy of `v`'s current value; gradients stop here.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    fn binary_same(&mut self, a: Var, b: Var, name: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(name, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(S, S) -> S) -> Tensor<S> {
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(va.shape(), data).expect("same shape")
    }

    fn unary(&mut self, x: Var, f: impl Fn(S) -> S, op: Op<S>) -> Var {
        let out = self.value(x).map(f);
        let rg = self.rg(x);
        self.push(out, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same(a, b, "add")?;
        let out = self.zip_map(a, b, |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same(a, b, "sub")?;
        let out = self.zip_map(a, b, |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same(a, b, "mul")?;
        let out = self.zip_map(a, b, |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, c: S) -> Var {
        self.unary(x, |v| v * c, Op::Scale(x, c))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -S::one())
    }

    pub fn add_scalar(&mut self, x: Var, c: S) -> Var {
        self.unary(x, |v| v + c, Op::AddScalar(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| if v > S::zero() { v } else { S::zero() }, Op::Relu(x))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: S) -> Var {
        self.unary(x, |v| if v > S::zero() { v } else { v * slope }, Op::LeakyRelu(x, slope))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.tanh(), Op::Tanh(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.exp(), Op::Exp(x))
    }

    pub fn ln(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.ln(), Op::Ln(x))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, softplus_scalar, Op::Softplus(x))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.abs(), Op::Abs(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, Op::Square(x))
    }

    /// Clamp into `[lo, hi]`; the gradient is zero where clamping is active.
    pub fn clamp(&mut self, x: Var, lo: S, hi: S) -> Var {
        self.unary(x, |v| v.max(lo).min(hi), Op::Clamp(x, lo, hi))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(out, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).mean());
        let rg = self.rg(x);
        self.push(out, Op::Mean(x), rg)
    }

    /// `ln(mean(e^x))` over all elements, stabilized by shifting with the
    /// maximum.
    pub fn log_mean_exp(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let m = v.data().iter().copied().fold(S::neg_infinity(), S::max);
        let s: S = v.data().iter().map(|&e| (e - m).exp()).sum();
        let out = Tensor::scalar(m + (s / S::lit(v.numel() as f64)).ln());
        let rg = self.rg(x);
        self.push(out, Op::LogMeanExp(x), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    /// Flatten `[N, ...]` to `[N, rest]`.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let rest: usize = s[1..].iter().product();
        self.reshape(x, &[s[0], rest])
    }

    /// `x [N, C, ...] + b [C]`.
    pub fn bias_channels(&mut self, x: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let bs = self.shape(b).to_vec();
        if xs.len() < 2 || bs != [xs[1]] {
            return Err(shape_err("bias", &xs, &bs));
        }
        let c = xs[1];
        let inner: usize = xs[2..].iter().product();
        let mut out = self.value(x).clone();
        let bv = self.value(b).data().to_vec();
        for (i, chunk) in out.data_mut().chunks_mut(inner).enumerate() {
            let bias = bv[i % c];
            for v in chunk {
                *v += bias;
            }
        }
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(out, Op::BiasChannels(x, b), rg))
    }

    /// `x [N, I] * w^T` with `w [O, I]`.
    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(shape_err("linear", &xs, &ws));
        }
        let (n, i, o) = (xs[0], xs[1], ws[0]);
        let mut out = vec![S::zero(); n * o];
        matmul_a_bt_acc(n, i, o, self.value(x).data(), self.value(w).data(), &mut out);
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(Tensor::new(&[n, o], out)?, Op::Linear(x, w), rg))
    }

    /// Convolution of `x [N, C, H, W]` with `w [O, C, KH, KW]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] {
            return Err(shape_err("conv2d", &xs, &ws));
        }
        let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let o = ws[0];
        let geom = ConvGeom::new(c, h, wd, ws[2], ws[3], stride, pad)
            .ok_or_else(|| shape_err("conv2d kernel larger than input", &xs, &ws))?;
        let (rows, ncols) = (geom.col_rows(), geom.col_cols());
        let mut cols = vec![S::zero(); n * rows * ncols];
        let mut out = vec![S::zero(); n * o * ncols];
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        for b in 0..n {
            let col = &mut cols[b * rows * ncols..(b + 1) * rows * ncols];
            im2col(&xv[b * geom.input_len()..(b + 1) * geom.input_len()], &geom, col);
            matmul_acc(o, rows, ncols, wv, col, &mut out[b * o * ncols..(b + 1) * o * ncols]);
        }
        let out = Tensor::new(&[n, o, geom.oh, geom.ow], out)?;
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(out, Op::Conv2d { x, w, geom, cols }, rg))
    }

    /// Transposed convolution of `x [N, Cin, H, W]` with `w [Cin, Cout, KH, KW]`
    /// producing `(H - 1) * stride - 2 * pad + KH` rows.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[0] {
            return Err(shape_err("conv_transpose2d", &xs, &ws));
        }
        let (n, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, kh, kw) = (ws[1], ws[2], ws[3]);
        let oh = ((h - 1) * stride + kh)
            .checked_sub(2 * pad)
            .ok_or_else(|| shape_err("conv_transpose2d padding", &xs, &ws))?;
        let ow = ((wd - 1) * stride + kw)
            .checked_sub(2 * pad)
            .ok_or_else(|| shape_err("conv_transpose2d padding", &xs, &ws))?;
        // The forward pass is the input-gradient of a convolution that maps
        // the output grid back onto the input grid.
        let geom = ConvGeom::new(cout, oh, ow, kh, kw, stride, pad)
            .filter(|g| g.oh == h && g.ow == wd)
            .ok_or_else(|| shape_err("conv_transpose2d geometry", &xs, &ws))?;
        let (rows, ncols) = (geom.col_rows(), geom.col_cols());
        let mut out = vec![S::zero(); n * cout * oh * ow];
        let mut cols = vec![S::zero(); rows * ncols];
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        for b in 0..n {
            cols.fill(S::zero());
            // cols [Cout*KK, HW] = w^T [Cout*KK, Cin] * x_b [Cin, HW]
            matmul_at_b_acc(rows, cin, ncols, wv, &xv[b * cin * ncols..(b + 1) * cin * ncols], &mut cols);
            col2im_acc(&cols, &geom, &mut out[b * geom.input_len()..(b + 1) * geom.input_len()]);
        }
        let out = Tensor::new(&[n, cout, oh, ow], out)?;
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(out, Op::ConvTranspose2d { x, w, geom }, rg))
    }

    /// Concatenate along axis 1. All inputs must agree on every other axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.shape(parts[0]).to_vec();
        let n = first[0];
        let tail = first[2..].to_vec();
        let inner: usize = tail.iter().product();
        let mut channels = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len() || s[0] != n || s[2..] != tail[..] {
                return Err(shape_err("concat", &first, s));
            }
            channels += s[1];
        }
        let mut out = Vec::with_capacity(n * channels * inner);
        for b in 0..n {
            for &p in parts {
                let v = self.value(p);
                let block = v.dim(1) * inner;
                out.extend_from_slice(&v.data()[b * block..(b + 1) * block]);
            }
        }
        let mut shape = first.clone();
        shape[1] = channels;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::new(&shape, out)?, Op::Concat(parts.to_vec()), rg))
    }

    /// Concatenate along axis 0.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor<S>> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::stack_rows(&values)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Rows `start..end` along axis 0.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let v = self.value(x);
        if start > end || end > v.dim(0) {
            return Err(Error::Shape(format!("slice {start}..{end} of {:?}", v.shape())));
        }
        let idx: Vec<usize> = (start..end).collect();
        let out = v.select_rows(&idx);
        let rg = self.rg(x);
        Ok(self.push(out, Op::SliceRows(x, start), rg))
    }

    /// Spatial crop of `x [N, C, H, W]` to rows `y0..y1`, columns `x0..x1`.
    pub fn crop(&mut self, x: Var, region: Crop) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || region.x0 >= region.x1 || region.y0 >= region.y1 || region.x1 > s[3] || region.y1 > s[2] {
            return Err(Error::Shape(format!("crop {region:?} of {s:?}")));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let (ch, cw) = (region.y1 - region.y0, region.x1 - region.x0);
        let v = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * ch * cw);
        for plane in 0..n * c {
            for y in region.y0..region.y1 {
                let row = plane * h * w + y * w;
                out.extend_from_slice(&v[row + region.x0..row + region.x1]);
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&[n, c, ch, cw], out)?, Op::CropSpatial(x, region), rg))
    }

    /// `x [N, C, H, W] * m [N, 1, H, W]`, broadcasting the mask over channels.
    pub fn mul_broadcast_channels(&mut self, x: Var, m: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ms = self.shape(m).to_vec();
        if xs.len() != 4 || ms != [xs[0], 1, xs[2], xs[3]] {
            return Err(shape_err("mul_broadcast_channels", &xs, &ms));
        }
        let (n, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
        let mut out = self.value(x).clone();
        let mv = self.value(m).data().to_vec();
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * hw;
                for (o, &w) in out.data_mut()[off..off + hw].iter_mut().zip(&mv[b * hw..(b + 1) * hw]) {
                    *o *= w;
                }
            }
        }
        let rg = self.rg(x) || self.rg(m);
        Ok(self.push(out, Op::MulBroadcastChannels(x, m), rg))
    }

    /// Repeat `x [N, C]` over an `h x w` grid.
    pub fn tile_spatial(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(Error::Shape(format!("tile_spatial expects [N, C], got {s:?}")));
        }
        let v = self.value(x).data();
        let mut out = Vec::with_capacity(s[0] * s[1] * h * w);
        for &e in v {
            out.extend(std::iter::repeat_n(e, h * w));
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&[s[0], s[1], h, w], out)?, Op::TileSpatial(x), rg))
    }

    /// Reverse pass from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Grads<S>> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::Shape(format!("backward needs a scalar, got {:?}", lv.shape())));
        }
        let mut grads: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.rg(loss) {
            return Ok(Grads { grads });
        }
        grads[loss.0] = Some(Tensor::full(lv.shape(), S::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            self.backprop(node, &gy, &mut grads);
            grads[i] = Some(gy);
        }
        Ok(Grads { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<S>>], v: Var, g: Tensor<S>) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_scaled(&g, S::one()),
            slot @ None => *slot = Some(g),
        }
    }

    fn accumulate_with(&self, grads: &mut [Option<Tensor<S>>], v: Var, f: impl FnOnce(&mut [S])) {
        if !self.rg(v) {
            return;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.shape(v)));
        }
        f(slot.as_mut().expect("initialized").data_mut());
    }

    fn elementwise_grad(&self, x: Var, gy: &Tensor<S>, f: impl Fn(S, S, S) -> S) -> Tensor<S> {
        let xv = self.value(x).data();
        let data = xv.iter().zip(gy.data()).map(|(&xi, &g)| f(xi, g, S::zero())).collect();
        Tensor::new(gy.shape(), data).expect("same shape")
    }

    fn backprop(&self, node: &Node<S>, gy: &Tensor<S>, grads: &mut [Option<Tensor<S>>]) {
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, gy.clone());
                self.accumulate(grads, *b, gy.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, gy.clone());
                self.accumulate(grads, *b, gy.map(|g| -g));
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    let g = self.elementwise_grad(*b, gy, |bv, g, _| bv * g);
                    self.accumulate(grads, *a, g);
                }
                if self.rg(*b) {
                    let g = self.elementwise_grad(*a, gy, |av, g, _| av * g);
                    self.accumulate(grads, *b, g);
                }
            }
            Op::Scale(x, c) => {
                let c = *c;
                self.accumulate(grads, *x, gy.map(|g| g * c));
            }
            Op::AddScalar(x) | Op::Reshape(x) => {
                let g = Tensor::new(self.shape(*x), gy.data().to_vec()).expect("same numel");
                self.accumulate(grads, *x, g);
            }
            Op::BiasChannels(x, b) => {
                self.accumulate(grads, *x, gy.clone());
                let s = gy.shape();
                let c = s[1];
                let inner: usize = s[2..].iter().product();
                self.accumulate_with(grads, *b, |gb| {
                    for (i, chunk) in gy.data().chunks(inner).enumerate() {
                        gb[i % c] += chunk.iter().copied().sum::<S>();
                    }
                });
            }
            Op::Linear(x, w) => {
                let (n, i) = (self.shape(*x)[0], self.shape(*x)[1]);
                let o = self.shape(*w)[0];
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                self.accumulate_with(grads, *x, |gx| matmul_acc(n, o, i, gy.data(), wv, gx));
                self.accumulate_with(grads, *w, |gw| matmul_at_b_acc(o, n, i, gy.data(), xv, gw));
            }
            Op::Conv2d { x, w, geom, cols } => {
                let n = self.shape(*x)[0];
                let o = self.shape(*w)[0];
                let (rows, ncols) = (geom.col_rows(), geom.col_cols());
                let wv = self.value(*w).data();
                self.accumulate_with(grads, *w, |gw| {
                    for b in 0..n {
                        let gyb = &gy.data()[b * o * ncols..(b + 1) * o * ncols];
                        let col = &cols[b * rows * ncols..(b + 1) * rows * ncols];
                        matmul_a_bt_acc(o, ncols, rows, gyb, col, gw);
                    }
                });
                if self.rg(*x) {
                    let mut dcol = vec![S::zero(); rows * ncols];
                    self.accumulate_with(grads, *x, |gx| {
                        for b in 0..n {
                            dcol.fill(S::zero());
                            let gyb = &gy.data()[b * o * ncols..(b + 1) * o * ncols];
                            matmul_at_b_acc(rows, o, ncols, wv, gyb, &mut dcol);
                            let len = geom.input_len();
                            col2im_acc(&dcol, geom, &mut gx[b * len..(b + 1) * len]);
                        }
                    });
                }
            }
            Op::ConvTranspose2d { x, w, geom } => {
                let n = self.shape(*x)[0];
                let cin = self.shape(*x)[1];
                let (rows, ncols) = (geom.col_rows(), geom.col_cols());
                let len = geom.input_len();
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                let mut cols = vec![S::zero(); n * rows * ncols];
                for b in 0..n {
                    im2col(&gy.data()[b * len..(b + 1) * len], geom, &mut cols[b * rows * ncols..(b + 1) * rows * ncols]);
                }
                self.accumulate_with(grads, *x, |gx| {
                    for b in 0..n {
                        let col = &cols[b * rows * ncols..(b + 1) * rows * ncols];
                        matmul_acc(cin, rows, ncols, wv, col, &mut gx[b * cin * ncols..(b + 1) * cin * ncols]);
                    }
                });
                self.accumulate_with(grads, *w, |gw| {
                    for b in 0..n {
                        let col = &cols[b * rows * ncols..(b + 1) * rows * ncols];
                        matmul_a_bt_acc(cin, ncols, rows, &xv[b * cin * ncols..(b + 1) * cin * ncols], col, gw);
                    }
                });
            }
            Op::Relu(x) => {
                let g = self.elementwise_grad(*x, gy, |v, g, z| if v > z { g } else { z });
                self.accumulate(grads, *x, g);
            }
            Op::LeakyRelu(x, slope) => {
                let slope = *slope;
                let g = self.elementwise_grad(*x, gy, |v, g, z| if v > z { g } else { g * slope });
                self.accumulate(grads, *x, g);
            }
            Op::Sigmoid(x) => {
                let data = y.data().iter().zip(gy.data()).map(|(&s, &g)| g * s * (S::one() - s)).collect();
                self.accumulate(grads, *x, Tensor::new(gy.shape(), data).expect("shape"));
            }
            Op::Tanh(x) => {
                let data = y.data().iter().zip(gy.data()).map(|(&t, &g)| g * (S::one() - t * t)).collect();
                self.accumulate(grads, *x, Tensor::new(gy.shape(), data).expect("shape"));
            }
            Op::Exp(x) => {
                let data = y.data().iter().zip(gy.data()).map(|(&e, &g)| g * e).collect();
                self.accumulate(grads, *x, Tensor::new(gy.shape(), data).expect("shape"));
            }
            Op::Ln(x) => {
                let g = self.elementwise_grad(*x, gy, |v, g, _| g / v);
                self.accumulate(grads, *x, g);
            }
            Op::Softplus(x) => {
                let g = self.elementwise_grad(*x, gy, |v, g, _| g * sigmoid(v));
                self.accumulate(grads, *x, g);
            }
            Op::Abs(x) => {
                let g = self.elementwise_grad(*x, gy, |v, g, z| {
                    if v > z {
                        g
                    } else if v < z {
                        -g
                    } else {
                        z
                    }
                });
                self.accumulate(grads, *x, g);
            }
            Op::Square(x) => {
                let two = S::lit(2.0);
                let g = self.elementwise_grad(*x, gy, |v, g, _| two * v * g);
                self.accumulate(grads, *x, g);
            }
            Op::Clamp(x, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                let g = self.elementwise_grad(*x, gy, |v, g, z| if v < lo || v > hi { z } else { g });
                self.accumulate(grads, *x, g);
            }
            Op::Sum(x) => {
                let g = Tensor::full(self.shape(*x), gy.item());
                self.accumulate(grads, *x, g);
            }
            Op::Mean(x) => {
                let n = S::lit(self.value(*x).numel() as f64);
                let g = Tensor::full(self.shape(*x), gy.item() / n);
                self.accumulate(grads, *x, g);
            }
            Op::LogMeanExp(x) => {
                let xv = self.value(*x);
                let m = xv.data().iter().copied().fold(S::neg_infinity(), S::max);
                let w: Vec<S> = xv.data().iter().map(|&e| (e - m).exp()).collect();
                let total: S = w.iter().copied().sum();
                let g0 = gy.item();
                let data = w.into_iter().map(|e| g0 * e / total).collect();
                self.accumulate(grads, *x, Tensor::new(xv.shape(), data).expect("shape"));
            }
            Op::Concat(parts) => {
                let s = gy.shape();
                let n = s[0];
                let inner: usize = s[2..].iter().product();
                let total = s[1] * inner;
                let mut offset = 0;
                for &p in parts {
                    let block = self.shape(p)[1] * inner;
                    if self.rg(p) {
                        let mut data = Vec::with_capacity(n * block);
                        for b in 0..n {
                            data.extend_from_slice(&gy.data()[b * total + offset..b * total + offset + block]);
                        }
                        self.accumulate(grads, p, Tensor::new(self.shape(p), data).expect("shape"));
                    }
                    offset += block;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    if self.rg(p) {
                        let data = gy.data()[offset..offset + len].to_vec();
                        self.accumulate(grads, p, Tensor::new(self.shape(p), data).expect("shape"));
                    }
                    offset += len;
                }
            }
            Op::SliceRows(x, start) => {
                let row: usize = self.shape(*x)[1..].iter().product();
                let start = *start;
                self.accumulate_with(grads, *x, |gx| {
                    for (d, &g) in gx[start * row..start * row + gy.numel()].iter_mut().zip(gy.data()) {
                        *d += g;
                    }
                });
            }
            Op::CropSpatial(x, region) => {
                let s = self.shape(*x).to_vec();
                let (h, w) = (s[2], s[3]);
                let cw = region.x1 - region.x0;
                let ch = region.y1 - region.y0;
                self.accumulate_with(grads, *x, |gx| {
                    for plane in 0..s[0] * s[1] {
                        for (r, y) in (region.y0..region.y1).enumerate() {
                            let dst = plane * h * w + y * w + region.x0;
                            let src = (plane * ch + r) * cw;
                            for k in 0..cw {
                                gx[dst + k] += gy.data()[src + k];
                            }
                        }
                    }
                });
            }
            Op::MulBroadcastChannels(x, m) => {
                let s = self.shape(*x).to_vec();
                let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
                let xv = self.value(*x).data();
                let mv = self.value(*m).data();
                self.accumulate_with(grads, *x, |gx| {
                    for b in 0..n {
                        for ch in 0..c {
                            let off = (b * c + ch) * hw;
                            for k in 0..hw {
                                gx[off + k] += gy.data()[off + k] * mv[b * hw + k];
                            }
                        }
                    }
                });
                self.accumulate_with(grads, *m, |gm| {
                    for b in 0..n {
                        for ch in 0..c {
                            let off = (b * c + ch) * hw;
                            for k in 0..hw {
                                gm[b * hw + k] += gy.data()[off + k] * xv[off + k];
                            }
                        }
                    }
                });
            }
            Op::TileSpatial(x) => {
                let hw = gy.shape()[2] * gy.shape()[3];
                let data = gy.data().chunks(hw).map(|c| c.iter().copied().sum()).collect();
                self.accumulate(grads, *x, Tensor::new(self.shape(*x), data).expect("shape"));
            }
        }
    }
}
