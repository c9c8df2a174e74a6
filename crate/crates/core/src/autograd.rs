//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every operation of one forward pass. Parameters are
//! referenced from a borrowed [`ParamStore`] rather than copied. Reductions
//! that produce tiny outputs (means, per-sample norms, cross-entropy) also
//! keep an `f64` copy of their result so that scalar losses can be read
//! without the final `f32` rounding.

use crate::error::{Error, Result};
use crate::kernels::{col2im, gemm, im2col, ConvGeom};
use crate::nn::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Pointwise nonlinearities.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Relu,
    LeakyRelu,
    Softplus,
    Tanh,
}

const LEAKY_SLOPE: f32 = 0.2;

impl Activation {
    fn apply(self, v: f32) -> f32 {
        match self {
            Activation::Identity => v,
            Activation::Relu => v.max(0.0),
            Activation::LeakyRelu => {
                if v > 0.0 {
                    v
                } else {
                    LEAKY_SLOPE * v
                }
            }
            Activation::Softplus => softplus(v),
            Activation::Tanh => v.tanh(),
        }
    }

    /// Derivative given the pre-activation `x` and the output `y`.
    fn derivative(self, x: f32, y: f32) -> f32 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => (x > 0.0) as u8 as f32,
            Activation::LeakyRelu => {
                if x > 0.0 {
                    1.0
                } else {
                    LEAKY_SLOPE
                }
            }
            Activation::Softplus => sigmoid(x),
            Activation::Tanh => 1.0 - y * y,
        }
    }
}

pub fn softplus(v: f32) -> f32 {
    if v > 20.0 {
        v
    } else if v < -20.0 {
        v.exp()
    } else {
        v.exp().ln_1p()
    }
}

pub fn sigmoid(v: f32) -> f32 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    Square(Var),
    Act(Var, Activation),
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        dilation: usize,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    MulChannel(Var, Var),
    AddChannel(Var, Var),
    Upsample(Var, usize),
    AvgPool2(Var),
    GlobalAvgPool(Var),
    Reshape(Var),
    Concat(Var, Var),
    Stack(Vec<Var>),
    Select(Var, usize),
    KernelSqSum(Var),
    Rsqrt(Var),
    Mean(Var),
    RowNorm(Var),
    ChannelNormalize(Var, f32),
    CrossEntropy(Var, Vec<usize>),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
    exact: Option<Vec<f64>>,
}

/// Records a forward computation for later differentiation.
pub struct Tape<'p> {
    params: Option<&'p ParamStore>,
    train_params: bool,
    nodes: Vec<Node>,
}

impl<'p> Tape<'p> {
    /// A tape that differentiates with respect to `params` (training).
    pub fn new(params: &'p ParamStore) -> Self {
        Self::with_params(params, true)
    }

    /// A tape that reads `params` but never produces gradients for them.
    pub fn frozen(params: &'p ParamStore) -> Self {
        Self::with_params(params, false)
    }

    fn with_params(params: &'p ParamStore, train_params: bool) -> Self {
        Tape {
            params: Some(params),
            train_params,
            nodes: Vec::new(),
        }
    }

    /// A tape with no parameter store; only leaves can be differentiated.
    pub fn detached() -> Tape<'static> {
        Tape {
            params: None,
            train_params: false,
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match node.op {
            Op::Param(id) => self
                .params
                .expect("param node without a store")
                .get(id),
            _ => &node.value,
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    /// Scalar value of a one-element node, in `f64` when the node tracked it.
    pub fn scalar(&self, v: Var) -> f64 {
        match &self.nodes[v.0].exact {
            Some(e) => e[0],
            None => self.value(v).data()[0] as f64,
        }
    }

    /// Per-element `f64` values of a small reduction node, if tracked.
    pub fn exact(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].exact.as_deref()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            exact: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_exact(&mut self, value: Tensor, op: Op, needs_grad: bool, exact: Vec<f64>) -> Var {
        let v = self.push(value, op, needs_grad);
        self.nodes[v.0].exact = Some(exact);
        v
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Constant input (no gradient).
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Differentiable input; its gradient is available after [`Tape::backward`].
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let ng = self.train_params;
        self.push(Tensor::zeros(&[0]), Op::Param(id), ng)
    }

    fn binary_same(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn zip_exact(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Option<Vec<f64>> {
        match (&self.nodes[a.0].exact, &self.nodes[b.0].exact) {
            (Some(x), Some(y)) => Some(x.iter().zip(y).map(|(p, q)| f(*p, *q)).collect()),
            _ => None,
        }
    }

    fn elementwise(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f32, f32) -> f32) -> Result<Var> {
        self.binary_same(a, b, "elementwise op")?;
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| f(*x, *y)).collect();
        let out = Tensor::new(va.shape(), data)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, op, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let exact = self.zip_exact(a, b, |x, y| x + y);
        let v = self.elementwise(a, b, Op::Add(a, b), |x, y| x + y)?;
        self.nodes[v.0].exact = exact;
        Ok(v)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let exact = self.zip_exact(a, b, |x, y| x - y);
        let v = self.elementwise(a, b, Op::Sub(a, b), |x, y| x - y)?;
        self.nodes[v.0].exact = exact;
        Ok(v)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, s: f32) -> Var {
        let out = self.value(a).map(|v| v * s);
        let exact = self.nodes[a.0]
            .exact
            .as_ref()
            .map(|e| e.iter().map(|v| v * s as f64).collect());
        let ng = self.ng(a);
        let v = self.push(out, Op::Scale(a, s), ng);
        self.nodes[v.0].exact = exact;
        v
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v * v);
        let ng = self.ng(a);
        self.push(out, Op::Square(a), ng)
    }

    pub fn act(&mut self, a: Var, act: Activation) -> Var {
        if act == Activation::Identity {
            return a;
        }
        let out = self.value(a).map(|v| act.apply(v));
        let ng = self.ng(a);
        self.push(out, Op::Act(a, act), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.act(a, Activation::Tanh)
    }

    /// 2-D convolution. `x`: `N×C×H×W`, `w`: `O×C×k×k`, `b`: `O`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        dilation: usize,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 || ws[1] != xs[1] || ws[2] != ws[3] {
            return Err(Error::Shape(format!("conv2d input {xs:?} weight {ws:?}")));
        }
        if stride == 0 || dilation == 0 {
            return Err(Error::Argument("stride and dilation must be >= 1".into()));
        }
        let g = ConvGeom {
            channels: xs[1],
            height: xs[2],
            width: xs[3],
            kernel: ws[2],
            stride,
            pad,
            dilation,
        };
        if xs[2] + 2 * pad < dilation * (ws[2] - 1) + 1 {
            return Err(Error::Shape(format!("conv2d kernel larger than padded input {xs:?}")));
        }
        let (n, o) = (xs[0], ws[0]);
        let (ho, wo) = g.out_hw();
        let hw = ho * wo;
        let kdim = g.col_rows();
        let mut out = vec![0.0f32; n * o * hw];
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            let mut cols = if g.is_pointwise() { Vec::new() } else { vec![0.0; kdim * hw] };
            let in_sz = g.channels * g.height * g.width;
            for s in 0..n {
                let xin = &xv[s * in_sz..(s + 1) * in_sz];
                let colm: &[f32] = if g.is_pointwise() {
                    xin
                } else {
                    im2col(xin, &g, &mut cols);
                    &cols
                };
                gemm(
                    o,
                    kdim,
                    hw,
                    wv,
                    (kdim as isize, 1),
                    colm,
                    (hw as isize, 1),
                    0.0,
                    &mut out[s * o * hw..(s + 1) * o * hw],
                    (hw as isize, 1),
                );
            }
            if let Some(b) = b {
                let bv = self.value(b).data();
                if bv.len() != o {
                    return Err(Error::Shape(format!("conv2d bias {} for {o} outputs", bv.len())));
                }
                for s in 0..n {
                    for (c, bias) in bv.iter().enumerate() {
                        for v in &mut out[(s * o + c) * hw..(s * o + c + 1) * hw] {
                            *v += bias;
                        }
                    }
                }
            }
        }
        let value = Tensor::new(&[n, o, ho, wo], out)?;
        let ng = self.ng(x) || self.ng(w) || b.map(|b| self.ng(b)).unwrap_or(false);
        Ok(self.push(
            value,
            Op::Conv {
                x,
                w,
                b,
                stride,
                pad,
                dilation,
            },
            ng,
        ))
    }

    /// `x·wᵀ + b` with `x`: `N×D`, `w`: `O×D`, `b`: `O`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(Error::Shape(format!("linear input {xs:?} weight {ws:?}")));
        }
        let (n, d, o) = (xs[0], xs[1], ws[0]);
        let mut out = vec![0.0f32; n * o];
        gemm(
            n,
            d,
            o,
            self.value(x).data(),
            (d as isize, 1),
            self.value(w).data(),
            (1, d as isize),
            0.0,
            &mut out,
            (o as isize, 1),
        );
        if let Some(b) = b {
            let bv = self.value(b).data();
            if bv.len() != o {
                return Err(Error::Shape(format!("linear bias {} for {o} outputs", bv.len())));
            }
            for row in out.chunks_mut(o) {
                for (v, bias) in row.iter_mut().zip(bv) {
                    *v += bias;
                }
            }
        }
        let ng = self.ng(x) || self.ng(w) || b.map(|b| self.ng(b)).unwrap_or(false);
        Ok(self.push(Tensor::new(&[n, o], out)?, Op::Linear { x, w, b }, ng))
    }

    fn channel_check(&self, x: Var, s: Var) -> Result<(usize, usize, usize)> {
        let xs = self.shape(x);
        let ss = self.shape(s);
        if xs.len() != 4 || ss != [xs[0], xs[1]] {
            return Err(Error::Shape(format!("per-channel op {xs:?} with {ss:?}")));
        }
        Ok((xs[0], xs[1], xs[2] * xs[3]))
    }

    /// Multiply every `H×W` plane of `x` by `s[n, c]`.
    pub fn mul_channel(&mut self, x: Var, s: Var) -> Result<Var> {
        let (_, c, hw) = self.channel_check(x, s)?;
        let sv = self.value(s).data();
        let mut out = self.value(x).clone();
        for (p, plane) in out.data_mut().chunks_mut(hw).enumerate() {
            let f = sv[p];
            plane.iter_mut().for_each(|v| *v *= f);
        }
        let _ = c;
        let ng = self.ng(x) || self.ng(s);
        Ok(self.push(out, Op::MulChannel(x, s), ng))
    }

    /// Add `s[n, c]` to every element of the `H×W` plane `(n, c)`.
    pub fn add_channel(&mut self, x: Var, s: Var) -> Result<Var> {
        let (_, _, hw) = self.channel_check(x, s)?;
        let sv = self.value(s).data();
        let mut out = self.value(x).clone();
        for (p, plane) in out.data_mut().chunks_mut(hw).enumerate() {
            let f = sv[p];
            plane.iter_mut().for_each(|v| *v += f);
        }
        let ng = self.ng(x) || self.ng(s);
        Ok(self.push(out, Op::AddChannel(x, s), ng))
    }

    /// Nearest-neighbour upsampling by an integer factor.
    pub fn upsample(&mut self, x: Var, factor: usize) -> Result<Var> {
        if factor == 1 {
            return Ok(x);
        }
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 || factor == 0 {
            return Err(Error::Shape(format!("upsample {xs:?} by {factor}")));
        }
        let (h, w) = (xs[2], xs[3]);
        let (h2, w2) = (h * factor, w * factor);
        let xv = self.value(x).data();
        let mut out = vec![0.0f32; xs[0] * xs[1] * h2 * w2];
        for (p, plane) in out.chunks_mut(h2 * w2).enumerate() {
            let src = &xv[p * h * w..(p + 1) * h * w];
            for y in 0..h2 {
                let row = &src[(y / factor) * w..(y / factor + 1) * w];
                for (xo, v) in plane[y * w2..(y + 1) * w2].iter_mut().enumerate() {
                    *v = row[xo / factor];
                }
            }
        }
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(&[xs[0], xs[1], h2, w2], out)?, Op::Upsample(x, factor), ng))
    }

    /// 2×2 average pooling with stride 2.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 || xs[2] % 2 != 0 || xs[3] % 2 != 0 {
            return Err(Error::Shape(format!("avg_pool2 on {xs:?}")));
        }
        let (h, w) = (xs[2], xs[3]);
        let (h2, w2) = (h / 2, w / 2);
        let xv = self.value(x).data();
        let mut out = vec![0.0f32; xs[0] * xs[1] * h2 * w2];
        for (p, plane) in out.chunks_mut(h2 * w2).enumerate() {
            let src = &xv[p * h * w..(p + 1) * h * w];
            for y in 0..h2 {
                for xo in 0..w2 {
                    let i = 2 * y * w + 2 * xo;
                    plane[y * w2 + xo] = 0.25 * (src[i] + src[i + 1] + src[i + w] + src[i + w + 1]);
                }
            }
        }
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(&[xs[0], xs[1], h2, w2], out)?, Op::AvgPool2(x), ng))
    }

    /// Spatial mean: `N×C×H×W → N×C`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(Error::Shape(format!("global_avg_pool on {xs:?}")));
        }
        let hw = xs[2] * xs[3];
        let out: Vec<f32> = self
            .value(x)
            .data()
            .chunks(hw)
            .map(|p| (p.iter().map(|v| *v as f64).sum::<f64>() / hw as f64) as f32)
            .collect();
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(&[xs[0], xs[1]], out)?, Op::GlobalAvgPool(x), ng))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let ng = self.ng(x);
        Ok(self.push(out, Op::Reshape(x), ng))
    }

    /// Channel concatenation of two `N×·×H×W` maps.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != 4 || sb.len() != 4 || sa[0] != sb[0] || sa[2..] != sb[2..] {
            return Err(Error::Shape(format!("concat {sa:?} with {sb:?}")));
        }
        let (n, hw) = (sa[0], sa[2] * sa[3]);
        let (ca, cb) = (sa[1] * hw, sb[1] * hw);
        let va = self.value(a).data();
        let vb = self.value(b).data();
        let mut out = Vec::with_capacity(n * (ca + cb));
        for s in 0..n {
            out.extend_from_slice(&va[s * ca..(s + 1) * ca]);
            out.extend_from_slice(&vb[s * cb..(s + 1) * cb]);
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(
            Tensor::new(&[n, sa[1] + sb[1], sa[2], sa[3]], out)?,
            Op::Concat(a, b),
            ng,
        ))
    }

    /// Stack `N×D` rows into `N×K×D`.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Result<Var> {
        let first = self
            .shape(*rows.first().ok_or_else(|| Error::Shape("stack of nothing".into()))?)
            .to_vec();
        if first.len() != 2 || rows.iter().any(|r| self.shape(*r) != first.as_slice()) {
            return Err(Error::Shape("stack_rows needs equal N×D inputs".into()));
        }
        let (n, d, k) = (first[0], first[1], rows.len());
        let mut out = vec![0.0f32; n * k * d];
        for (j, r) in rows.iter().enumerate() {
            let v = self.value(*r).data();
            for s in 0..n {
                out[(s * k + j) * d..(s * k + j + 1) * d].copy_from_slice(&v[s * d..(s + 1) * d]);
            }
        }
        let ng = rows.iter().any(|r| self.ng(*r));
        Ok(self.push(Tensor::new(&[n, k, d], out)?, Op::Stack(rows.to_vec()), ng))
    }

    /// Row `i` of every sample of an `N×K×D` tensor.
    pub fn select_row(&mut self, x: Var, i: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 || i >= xs[1] {
            return Err(Error::Shape(format!("select row {i} of {xs:?}")));
        }
        let (n, k, d) = (xs[0], xs[1], xs[2]);
        let v = self.value(x).data();
        let mut out = Vec::with_capacity(n * d);
        for s in 0..n {
            out.extend_from_slice(&v[(s * k + i) * d..(s * k + i + 1) * d]);
        }
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(&[n, d], out)?, Op::Select(x, i), ng))
    }

    /// `Σ_{kh,kw} w[o,i,kh,kw]²` → `O×I`.
    pub fn kernel_sq_sum(&mut self, w: Var) -> Result<Var> {
        let ws = self.shape(w).to_vec();
        if ws.len() != 4 {
            return Err(Error::Shape(format!("kernel_sq_sum on {ws:?}")));
        }
        let kk = ws[2] * ws[3];
        let out: Vec<f32> = self
            .value(w)
            .data()
            .chunks(kk)
            .map(|c| c.iter().map(|v| v * v).sum())
            .collect();
        let ng = self.ng(w);
        Ok(self.push(Tensor::new(&[ws[0], ws[1]], out)?, Op::KernelSqSum(w), ng))
    }

    /// `(x + eps)^(-1/2)` elementwise.
    pub fn rsqrt(&mut self, x: Var, eps: f32) -> Var {
        let out = self.value(x).map(|v| 1.0 / (v + eps).sqrt());
        let ng = self.ng(x);
        self.push(out, Op::Rsqrt(x), ng)
    }

    /// Mean of all elements, accumulated in `f64`.
    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel() as f64;
        let m = match &self.nodes[x.0].exact {
            Some(e) => e.iter().sum::<f64>() / n,
            None => self.value(x).sum() / n,
        };
        let ng = self.ng(x);
        self.push_exact(Tensor::scalar(m as f32), Op::Mean(x), ng, vec![m])
    }

    /// Euclidean norm of each sample (leading axis), accumulated in `f64`.
    pub fn row_norm(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let n = v.dim(0);
        let inner = v.numel() / n.max(1);
        let norms: Vec<f64> = v
            .data()
            .chunks(inner)
            .map(|c| c.iter().map(|x| (*x as f64) * (*x as f64)).sum::<f64>().sqrt())
            .collect();
        let out = Tensor::new(&[n], norms.iter().map(|v| *v as f32).collect()).unwrap();
        let ng = self.ng(x);
        self.push_exact(out, Op::RowNorm(x), ng, norms)
    }

    /// Scale each channel vector `x[n, :, y, x]` to unit L2 norm (`+eps` under the root).
    pub fn channel_normalize(&mut self, x: Var, eps: f32) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(Error::Shape(format!("channel_normalize on {xs:?}")));
        }
        let (n, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
        let xv = self.value(x).data();
        let mut out = vec![0.0f32; xv.len()];
        for s in 0..n {
            let base = s * c * hw;
            for p in 0..hw {
                let ss: f64 = (0..c)
                    .map(|k| {
                        let v = xv[base + k * hw + p] as f64;
                        v * v
                    })
                    .sum();
                let r = (ss + eps as f64).sqrt();
                for k in 0..c {
                    out[base + k * hw + p] = (xv[base + k * hw + p] as f64 / r) as f32;
                }
            }
        }
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(&xs, out)?, Op::ChannelNormalize(x, eps), ng))
    }

    /// Mean softmax cross-entropy of `N×K` logits against class indices.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let ls = self.shape(logits).to_vec();
        if ls.len() != 2 || ls[0] != labels.len() || labels.iter().any(|l| *l >= ls[1]) {
            return Err(Error::Shape(format!("cross_entropy logits {ls:?} labels {}", labels.len())));
        }
        let k = ls[1];
        let mut total = 0.0f64;
        for (row, &y) in self.value(logits).data().chunks(k).zip(labels) {
            let m = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
            let lse = m + row.iter().map(|v| (*v as f64 - m).exp()).sum::<f64>().ln();
            total += lse - row[y] as f64;
        }
        let loss = total / labels.len() as f64;
        let ng = self.ng(logits);
        Ok(self.push_exact(
            Tensor::scalar(loss as f32),
            Op::CrossEntropy(logits, labels.to_vec()),
            ng,
            vec![loss],
        ))
    }

    /// Reverse-mode sweep from a one-element node.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Shape("backward needs a scalar loss".into()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        let n_params = self.params.map(|p| p.len()).unwrap_or(0);
        let mut param_grads: Vec<Option<Tensor>> = vec![None; n_params];

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let g = match &node.op {
                Op::Leaf => continue,
                Op::Param(id) => {
                    if let Some(g) = grads[i].take() {
                        accumulate(&mut param_grads[id.0], g);
                    }
                    continue;
                }
                _ => match grads[i].take() {
                    Some(g) => g,
                    None => continue,
                },
            };
            self.backward_node(i, &g, &mut grads);
        }
        Ok(Grads {
            nodes: grads,
            params: param_grads,
        })
    }

    fn backward_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let gd = g.data();
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::Add(a, b) => {
                self.send(grads, *a, || g.clone());
                self.send(grads, *b, || g.clone());
            }
            Op::Sub(a, b) => {
                self.send(grads, *a, || g.clone());
                self.send(grads, *b, || g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                self.send(grads, *a, || zip_map(g, vb, |g, y| g * y));
                self.send(grads, *b, || zip_map(g, va, |g, x| g * x));
            }
            Op::Scale(a, s) => self.send(grads, *a, || g.map(|v| v * s)),
            Op::Square(a) => {
                let va = self.value(*a);
                self.send(grads, *a, || zip_map(g, va, |g, x| 2.0 * g * x));
            }
            Op::Act(a, act) => {
                let va = self.value(*a);
                let y = &node.value;
                self.send(grads, *a, || {
                    let data = gd
                        .iter()
                        .zip(va.data())
                        .zip(y.data())
                        .map(|((g, x), y)| g * act.derivative(*x, *y))
                        .collect();
                    Tensor::new(va.shape(), data).unwrap()
                });
            }
            Op::Conv {
                x,
                w,
                b,
                stride,
                pad,
                dilation,
            } => self.conv_backward(g, *x, *w, *b, *stride, *pad, *dilation, grads),
            Op::Linear { x, w, b } => {
                let (vx, vw) = (self.value(*x), self.value(*w));
                let (n, d, o) = (vx.dim(0), vx.dim(1), vw.dim(0));
                self.send(grads, *x, || {
                    let mut gx = vec![0.0; n * d];
                    gemm(n, o, d, gd, (o as isize, 1), vw.data(), (d as isize, 1), 0.0, &mut gx, (d as isize, 1));
                    Tensor::new(&[n, d], gx).unwrap()
                });
                self.send(grads, *w, || {
                    let mut gw = vec![0.0; o * d];
                    gemm(o, n, d, gd, (1, o as isize), vx.data(), (d as isize, 1), 0.0, &mut gw, (d as isize, 1));
                    Tensor::new(&[o, d], gw).unwrap()
                });
                if let Some(b) = b {
                    self.send(grads, *b, || {
                        let mut gb = vec![0.0f32; o];
                        for row in gd.chunks(o) {
                            for (a, v) in gb.iter_mut().zip(row) {
                                *a += v;
                            }
                        }
                        Tensor::new(&[o], gb).unwrap()
                    });
                }
            }
            Op::MulChannel(x, s) => {
                let (vx, vs) = (self.value(*x), self.value(*s));
                let hw = vx.dim(2) * vx.dim(3);
                self.send(grads, *x, || {
                    let mut gx = g.clone();
                    for (p, plane) in gx.data_mut().chunks_mut(hw).enumerate() {
                        let f = vs.data()[p];
                        plane.iter_mut().for_each(|v| *v *= f);
                    }
                    gx
                });
                self.send(grads, *s, || {
                    let data = gd
                        .chunks(hw)
                        .zip(vx.data().chunks(hw))
                        .map(|(a, b)| a.iter().zip(b).map(|(p, q)| p * q).sum())
                        .collect();
                    Tensor::new(vs.shape(), data).unwrap()
                });
            }
            Op::AddChannel(x, s) => {
                let hw = self.value(*x).dim(2) * self.value(*x).dim(3);
                self.send(grads, *x, || g.clone());
                self.send(grads, *s, || {
                    let data = gd.chunks(hw).map(|a| a.iter().sum()).collect();
                    Tensor::new(self.value(*s).shape(), data).unwrap()
                });
            }
            Op::Upsample(x, f) => {
                let xs = self.value(*x).shape().to_vec();
                let (h, w) = (xs[2], xs[3]);
                let w2 = w * f;
                self.send(grads, *x, || {
                    let mut gx = vec![0.0f32; xs.iter().product()];
                    for (p, plane) in gx.chunks_mut(h * w).enumerate() {
                        let src = &gd[p * h * w * f * f..(p + 1) * h * w * f * f];
                        for y2 in 0..h * f {
                            for x2 in 0..w2 {
                                plane[(y2 / f) * w + x2 / f] += src[y2 * w2 + x2];
                            }
                        }
                    }
                    Tensor::new(&xs, gx).unwrap()
                });
            }
            Op::AvgPool2(x) => {
                let xs = self.value(*x).shape().to_vec();
                let (h, w) = (xs[2], xs[3]);
                let (h2, w2) = (h / 2, w / 2);
                self.send(grads, *x, || {
                    let mut gx = vec![0.0f32; xs.iter().product()];
                    for (p, plane) in gx.chunks_mut(h * w).enumerate() {
                        let src = &gd[p * h2 * w2..(p + 1) * h2 * w2];
                        for y in 0..h {
                            for xo in 0..w {
                                plane[y * w + xo] = 0.25 * src[(y / 2) * w2 + xo / 2];
                            }
                        }
                    }
                    Tensor::new(&xs, gx).unwrap()
                });
            }
            Op::GlobalAvgPool(x) => {
                let xs = self.value(*x).shape().to_vec();
                let hw = xs[2] * xs[3];
                self.send(grads, *x, || {
                    let mut gx = Vec::with_capacity(xs.iter().product());
                    for v in gd {
                        gx.extend(std::iter::repeat_n(v / hw as f32, hw));
                    }
                    Tensor::new(&xs, gx).unwrap()
                });
            }
            Op::Reshape(x) => {
                let xs = self.value(*x).shape().to_vec();
                self.send(grads, *x, || g.clone().reshape(&xs).unwrap());
            }
            Op::Concat(a, b) => {
                let sa = self.value(*a).shape().to_vec();
                let sb = self.value(*b).shape().to_vec();
                let hw = sa[2] * sa[3];
                let (ca, cb) = (sa[1] * hw, sb[1] * hw);
                self.send(grads, *a, || {
                    let mut d = Vec::with_capacity(sa.iter().product());
                    for s in 0..sa[0] {
                        d.extend_from_slice(&gd[s * (ca + cb)..s * (ca + cb) + ca]);
                    }
                    Tensor::new(&sa, d).unwrap()
                });
                self.send(grads, *b, || {
                    let mut d = Vec::with_capacity(sb.iter().product());
                    for s in 0..sb[0] {
                        d.extend_from_slice(&gd[s * (ca + cb) + ca..(s + 1) * (ca + cb)]);
                    }
                    Tensor::new(&sb, d).unwrap()
                });
            }
            Op::Stack(rows) => {
                let s = node.value.shape();
                let (n, k, d) = (s[0], s[1], s[2]);
                for (j, r) in rows.iter().enumerate() {
                    self.send(grads, *r, || {
                        let mut out = Vec::with_capacity(n * d);
                        for s in 0..n {
                            out.extend_from_slice(&gd[(s * k + j) * d..(s * k + j + 1) * d]);
                        }
                        Tensor::new(&[n, d], out).unwrap()
                    });
                }
            }
            Op::Select(x, j) => {
                let xs = self.value(*x).shape().to_vec();
                let (n, k, d) = (xs[0], xs[1], xs[2]);
                self.send(grads, *x, || {
                    let mut out = vec![0.0f32; n * k * d];
                    for s in 0..n {
                        out[(s * k + j) * d..(s * k + j + 1) * d].copy_from_slice(&gd[s * d..(s + 1) * d]);
                    }
                    Tensor::new(&xs, out).unwrap()
                });
            }
            Op::KernelSqSum(w) => {
                let vw = self.value(*w);
                let kk = vw.dim(2) * vw.dim(3);
                self.send(grads, *w, || {
                    let data = vw
                        .data()
                        .chunks(kk)
                        .zip(gd)
                        .flat_map(|(c, g)| c.iter().map(move |v| 2.0 * g * v))
                        .collect();
                    Tensor::new(vw.shape(), data).unwrap()
                });
            }
            Op::Rsqrt(x) => {
                let y = &node.value;
                self.send(grads, *x, || zip_map(g, y, |g, y| -0.5 * g * y * y * y));
            }
            Op::Mean(x) => {
                let vx = self.value(*x);
                let f = gd[0] / vx.numel() as f32;
                self.send(grads, *x, || Tensor::full(vx.shape(), f));
            }
            Op::RowNorm(x) => {
                let vx = self.value(*x);
                let norms = node.exact.as_ref().unwrap();
                let inner = vx.numel() / vx.dim(0).max(1);
                self.send(grads, *x, || {
                    let data = vx
                        .data()
                        .chunks(inner)
                        .zip(norms.iter().zip(gd))
                        .flat_map(|(c, (nrm, g))| {
                            let f = if *nrm > 0.0 { (*g as f64 / nrm) as f32 } else { 0.0 };
                            c.iter().map(move |v| v * f)
                        })
                        .collect();
                    Tensor::new(vx.shape(), data).unwrap()
                });
            }
            Op::ChannelNormalize(x, eps) => {
                let vx = self.value(*x);
                let y = node.value.data();
                let s = vx.shape();
                let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
                self.send(grads, *x, || {
                    let xv = vx.data();
                    let mut gx = vec![0.0f32; xv.len()];
                    for smp in 0..n {
                        let base = smp * c * hw;
                        for p in 0..hw {
                            let mut ss = 0.0f64;
                            let mut gy = 0.0f64;
                            for k in 0..c {
                                let idx = base + k * hw + p;
                                ss += (xv[idx] as f64) * (xv[idx] as f64);
                                gy += (gd[idx] as f64) * (y[idx] as f64);
                            }
                            let r = (ss + *eps as f64).sqrt();
                            for k in 0..c {
                                let idx = base + k * hw + p;
                                gx[idx] = ((gd[idx] as f64 - y[idx] as f64 * gy) / r) as f32;
                            }
                        }
                    }
                    Tensor::new(s, gx).unwrap()
                });
            }
            Op::CrossEntropy(logits, labels) => {
                let vl = self.value(*logits);
                let k = vl.dim(1);
                let scale = gd[0] / labels.len() as f32;
                self.send(grads, *logits, || {
                    let mut out = Vec::with_capacity(vl.numel());
                    for (row, &y) in vl.data().chunks(k).zip(labels) {
                        let m = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
                        let z: f32 = row.iter().map(|v| (v - m).exp()).sum();
                        out.extend(row.iter().enumerate().map(|(j, v)| {
                            let p = (v - m).exp() / z;
                            scale * (p - if j == y { 1.0 } else { 0.0 })
                        }));
                    }
                    Tensor::new(vl.shape(), out).unwrap()
                });
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_backward(
        &self,
        g: &Tensor,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        dilation: usize,
        grads: &mut [Option<Tensor>],
    ) {
        let vx = self.value(x);
        let vw = self.value(w);
        let xs = vx.shape();
        let geom = ConvGeom {
            channels: xs[1],
            height: xs[2],
            width: xs[3],
            kernel: vw.dim(2),
            stride,
            pad,
            dilation,
        };
        let (n, o) = (xs[0], vw.dim(0));
        let (ho, wo) = geom.out_hw();
        let hw = ho * wo;
        let kdim = geom.col_rows();
        let in_sz = geom.channels * geom.height * geom.width;
        let gd = g.data();
        let need_x = self.ng(x);
        let need_w = self.ng(w);

        if let Some(b) = b {
            self.send(grads, b, || {
                let mut gb = vec![0.0f32; o];
                for s in 0..n {
                    for (c, acc) in gb.iter_mut().enumerate() {
                        *acc += gd[(s * o + c) * hw..(s * o + c + 1) * hw].iter().sum::<f32>();
                    }
                }
                Tensor::new(&[o], gb).unwrap()
            });
        }
        if !need_x && !need_w {
            return;
        }
        let mut gw = if need_w { vec![0.0f32; o * kdim] } else { Vec::new() };
        let mut gx = if need_x { vec![0.0f32; n * in_sz] } else { Vec::new() };
        let mut cols = if geom.is_pointwise() { Vec::new() } else { vec![0.0f32; kdim * hw] };
        let mut dcols = if need_x && !geom.is_pointwise() { vec![0.0f32; kdim * hw] } else { Vec::new() };
        for s in 0..n {
            let gy = &gd[s * o * hw..(s + 1) * o * hw];
            if need_w {
                let xin = &vx.data()[s * in_sz..(s + 1) * in_sz];
                let colm: &[f32] = if geom.is_pointwise() {
                    xin
                } else {
                    im2col(xin, &geom, &mut cols);
                    &cols
                };
                // gw += gy · colsᵀ
                gemm(o, hw, kdim, gy, (hw as isize, 1), colm, (1, hw as isize), 1.0, &mut gw, (kdim as isize, 1));
            }
            if need_x {
                let dst = &mut gx[s * in_sz..(s + 1) * in_sz];
                if geom.is_pointwise() {
                    gemm(kdim, o, hw, vw.data(), (1, kdim as isize), gy, (hw as isize, 1), 0.0, dst, (hw as isize, 1));
                } else {
                    gemm(kdim, o, hw, vw.data(), (1, kdim as isize), gy, (hw as isize, 1), 0.0, &mut dcols, (hw as isize, 1));
                    col2im(&dcols, &geom, dst);
                }
            }
        }
        if need_w {
            accumulate(&mut grads[w.0], Tensor::new(vw.shape(), gw).unwrap());
        }
        if need_x {
            accumulate(&mut grads[x.0], Tensor::new(xs, gx).unwrap());
        }
    }

    fn send(&self, grads: &mut [Option<Tensor>], to: Var, make: impl FnOnce() -> Tensor) {
        if self.ng(to) {
            accumulate(&mut grads[to.0], make());
        }
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f32, f32) -> f32) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect();
    Tensor::new(a.shape(), data).unwrap()
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(t) => t.add_assign(&g),
        None => *slot = Some(g),
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Grads {
    nodes: Vec<Option<Tensor>>,
    params: Vec<Option<Tensor>>,
}

impl Grads {
    /// Gradient of a leaf created with [`Tape::leaf`]; `None` for constants.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.nodes.get(v.0).and_then(|g| g.as_ref())
    }

    /// Per-parameter gradients indexed like the [`ParamStore`].
    pub fn params(&self) -> &[Option<Tensor>] {
        &self.params
    }

    pub fn into_params(self) -> Vec<Option<Tensor>> {
        self.params
    }
}

/// Finite-difference helpers shared by gradient tests.
pub mod gradcheck {
    use super::{Tape, Var};
    use crate::error::Result;
    use crate::tensor::Tensor;

    /// Central finite differences of `f` at `x` for the listed coordinates.
    /// The denominator uses the perturbation actually representable in `f32`.
    pub fn numeric_grad(x: &Tensor, coords: &[usize], h: f64, f: &dyn Fn(&Tensor) -> f64) -> Vec<f64> {
        coords
            .iter()
            .map(|&i| {
                let mut p = x.clone();
                let mut m = x.clone();
                p.data_mut()[i] += h as f32;
                m.data_mut()[i] -= h as f32;
                let step = p.data()[i] as f64 - m.data()[i] as f64;
                (f(&p) - f(&m)) / step
            })
            .collect()
    }

    /// `‖a − b‖ / ‖b‖`.
    pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt().max(1e-12);
        num / den
    }

    /// Relative error between the analytic gradient of the scalar `build(x)`
    /// and central differences with step `h`, over up to `probes` coordinates.
    pub fn check_gradient<'p>(
        tape_factory: &dyn Fn() -> Tape<'p>,
        x: &Tensor,
        h: f64,
        probes: usize,
        build: &dyn Fn(&mut Tape<'p>, Var) -> Result<Var>,
    ) -> Result<f64> {
        let mut tape = tape_factory();
        let v = tape.leaf(x.clone());
        let out = build(&mut tape, v)?;
        let grads = tape.backward(out)?;
        let g = grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));
        let coords: Vec<usize> = (0..x.numel()).step_by((x.numel() / probes.max(1)).max(1)).collect();
        let analytic: Vec<f64> = coords.iter().map(|&i| g.data()[i] as f64).collect();
        let f = |t: &Tensor| {
            let mut tape = tape_factory();
            let v = tape.leaf(t.clone());
            let out = build(&mut tape, v).expect("probe rebuild");
            tape.scalar(out)
        };
        let numeric = numeric_grad(x, &coords, h, &f);
        Ok(rel_err(&analytic, &numeric))
    }

    /// Like [`check_gradient`] but along `directions` seeded random unit
    /// directions with a fourth-order five-point stencil. The larger usable
    /// step keeps the difference well above `f32` rounding in deep stacks.
    pub fn check_directional<'p>(
        tape_factory: &dyn Fn() -> Tape<'p>,
        x: &Tensor,
        h: f64,
        directions: usize,
        build: &dyn Fn(&mut Tape<'p>, Var) -> Result<Var>,
    ) -> Result<f64> {
        let mut tape = tape_factory();
        let v = tape.leaf(x.clone());
        let out = build(&mut tape, v)?;
        let grads = tape.backward(out)?;
        let g = grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));
        let f = |t: &Tensor| {
            let mut tape = tape_factory();
            let v = tape.leaf(t.clone());
            let out = build(&mut tape, v).expect("probe rebuild");
            tape.scalar(out)
        };
        let mut rng = crate::util::rng_for(directions as u64, "gradcheck.direction");
        let mut analytic = Vec::with_capacity(directions);
        let mut numeric = Vec::with_capacity(directions);
        for _ in 0..directions {
            let d = Tensor::randn(x.shape(), 1.0, &mut rng);
            let norm = d.data().iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
            let d = d.map(|v| (v as f64 / norm) as f32);
            let at = |k: f32| {
                let mut p = x.clone();
                for (pv, dv) in p.data_mut().iter_mut().zip(d.data()) {
                    *pv += k * (h as f32) * dv;
                }
                f(&p)
            };
            analytic.push(g.data().iter().zip(d.data()).map(|(a, b)| *a as f64 * *b as f64).sum());
            numeric.push((-at(2.0) + 8.0 * at(1.0) - 8.0 * at(-1.0) + at(-2.0)) / (12.0 * h));
        }
        Ok(rel_err(&analytic, &numeric))
    }
}
