//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation of one forward pass. Calling
//! [`Graph::backward`] walks the tape in reverse and returns gradients for
//! every node that depends on a parameter or a differentiable input.
//! Constants never receive gradients, which is how branches are detached.

use std::collections::{BTreeMap, HashMap};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy)]
struct Axis {
    outer: usize,
    len: usize,
    inner: usize,
}

impl Axis {
    fn of(shape: &[usize], axis: usize) -> Axis {
        Axis {
            outer: shape[..axis].iter().product(),
            len: shape[axis],
            inner: shape[axis + 1..].iter().product(),
        }
    }

    #[inline]
    fn idx(&self, o: usize, l: usize, i: usize) -> usize {
        (o * self.len + l) * self.inner + i
    }
}

#[derive(Debug)]
struct ResampleAxis {
    i0: Vec<usize>,
    i1: Vec<usize>,
    a: Vec<f64>,
}

impl ResampleAxis {
    /// Half-pixel-centred bilinear taps for upsampling `n` samples by `factor`.
    fn bilinear(n: usize, factor: usize) -> Self {
        let m = n * factor;
        let mut i0 = Vec::with_capacity(m);
        let mut i1 = Vec::with_capacity(m);
        let mut a = Vec::with_capacity(m);
        for o in 0..m {
            let src = ((o as f64 + 0.5) / factor as f64 - 0.5).clamp(0.0, (n - 1) as f64);
            let lo = (src.floor() as usize).min(n.saturating_sub(2));
            let hi = (lo + 1).min(n - 1);
            i0.push(lo);
            i1.push(hi);
            a.push(if hi == lo { 0.0 } else { src - lo as f64 });
        }
        ResampleAxis { i0, i1, a }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `[C,H,W] * [1,H,W]`
    MulBroadcast(Var, Var),
    /// `x * s` with `s` a one-element tensor.
    MulScalarVar(Var, Var),
    AddConst(Var),
    Scale(Var, f64),
    Abs(Var),
    Square(Var),
    Sqrt(Var),
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    Softplus(Var),
    Tanh(Var),
    Exp(Var),
    /// `ln(max(x, floor))`, zero gradient below the floor.
    LogFloor(Var, f64),
    /// `(|x| + eps)^p`
    PowAbsEps(Var, f64, f64),
    Sum(Var),
    Mean(Var),
    SumAxis(Var, Axis),
    SoftmaxAxis(Var, Axis),
    LogSoftmaxAxis(Var, Axis),
    L2NormalizeAxis(Var, Axis),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        cols: Vec<f64>,
        taps: Vec<usize>,
    },
    UpsampleBilinear {
        input: Var,
        ry: ResampleAxis,
        rx: ResampleAxis,
    },
    UpsampleNearest(Var, usize),
    Concat(Vec<Var>),
    SelectChannels(Var, usize),
    Reshape(Var),
    Warp {
        map: Var,
        flow: Var,
    },
    CostVolume {
        ft: Var,
        fw: Var,
        radius: usize,
    },
    GatherPixels {
        input: Var,
        pixels: Vec<usize>,
    },
    InfoNce {
        positives: Var,
        anchors: Var,
        negatives: Var,
        tau: f64,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
}

fn check_same(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::arg(format!(
            "{what}: shape mismatch {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn check_rank3(t: &Tensor, what: &str) -> Result<(usize, usize, usize)> {
    if t.shape().len() != 3 {
        return Err(Error::arg(format!("{what}: expected [C,H,W], got {:?}", t.shape())));
    }
    Ok(t.chw())
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Bilinear sample of channel-major `map` at a clamped position.
/// Returns `(value, d/dsx, d/dsy)` for every channel via the callback.
struct BilinearTap {
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
    ax: f64,
    ay: f64,
    gx: bool,
    gy: bool,
}

impl BilinearTap {
    fn new(sx: f64, sy: f64, h: usize, w: usize) -> Self {
        let maxx = (w - 1) as f64;
        let maxy = (h - 1) as f64;
        let gx = sx > 0.0 && sx < maxx;
        let gy = sy > 0.0 && sy < maxy;
        let cx = if sx.is_finite() { sx.clamp(0.0, maxx) } else { 0.0 };
        let cy = if sy.is_finite() { sy.clamp(0.0, maxy) } else { 0.0 };
        let x0 = (cx.floor() as usize).min(w.saturating_sub(2));
        let y0 = (cy.floor() as usize).min(h.saturating_sub(2));
        let x1 = (x0 + 1).min(w - 1);
        let y1 = (y0 + 1).min(h - 1);
        let ax = if x1 == x0 { 0.0 } else { cx - x0 as f64 };
        let ay = if y1 == y0 { 0.0 } else { cy - y0 as f64 };
        BilinearTap {
            x0,
            x1,
            y0,
            y1,
            ax,
            ay,
            gx,
            gy,
        }
    }

    #[inline]
    fn sample(&self, plane: &[f64], w: usize) -> f64 {
        let (a, b) = (self.ax, self.ay);
        (1.0 - b) * ((1.0 - a) * plane[self.y0 * w + self.x0] + a * plane[self.y0 * w + self.x1])
            + b * ((1.0 - a) * plane[self.y1 * w + self.x0] + a * plane[self.y1 * w + self.x1])
    }
}

/// Whether a backward-warp sample position stays inside the frame.
pub fn warp_in_bounds(x: f64, y: f64, h: usize, w: usize) -> bool {
    x >= 0.0 && y >= 0.0 && x <= (w - 1) as f64 && y <= (h - 1) as f64
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).item()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A value that never receives gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A differentiable leaf (used for gradient checks against inputs).
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// A named trainable parameter; repeated calls with one name share a node.
    pub fn param(&mut self, name: &str, t: &Tensor) -> Var {
        if let Some(v) = self.params.get(name) {
            return *v;
        }
        let v = self.push(t.clone(), Op::Leaf, true);
        self.params.insert(name.to_string(), v);
        v
    }

    /// Copies `v` into a fresh constant, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    pub fn param_vars(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.params.iter()
    }

    /// Gradients of every parameter registered on this graph.
    pub fn param_grads(&self, grads: &Grads) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (name, v) in &self.params {
            let g = grads
                .wrt(*v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(self.value(*v).shape()));
            out.insert(name.clone(), g);
        }
        out
    }

    // ---- elementwise ----------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same(self.value(a), self.value(b), "add")?;
        let mut t = self.value(a).clone();
        t.add_assign(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same(self.value(a), self.value(b), "sub")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x - y)
            .collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same(self.value(a), self.value(b), "mul")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    /// Multiplies every channel of `a` (`[C,H,W]`) by the single plane `b` (`[1,H,W]`).
    pub fn mul_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (c, h, w) = check_rank3(self.value(a), "mul_broadcast")?;
        let (cb, hb, wb) = check_rank3(self.value(b), "mul_broadcast")?;
        if cb != 1 || hb != h || wb != w {
            return Err(Error::arg("mul_broadcast: plane must be [1,H,W] of matching size"));
        }
        let plane = self.value(b).data();
        let mut t = self.value(a).clone();
        for ci in 0..c {
            for (x, p) in t.data_mut()[ci * h * w..(ci + 1) * h * w].iter_mut().zip(plane) {
                *x *= p;
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::MulBroadcast(a, b), rg))
    }

    pub fn mul_scalar_var(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::arg("mul_scalar_var: scale must have one element"));
        }
        let k = self.value(s).item();
        let t = self.value(x).map(|v| v * k);
        let rg = self.rg(x) || self.rg(s);
        Ok(self.push(t, Op::MulScalarVar(x, s), rg))
    }

    pub fn add_const(&mut self, x: Var, c: f64) -> Var {
        let t = self.value(x).map(|v| v + c);
        let rg = self.rg(x);
        self.push(t, Op::AddConst(x), rg)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let t = self.value(x).map(|v| v * s);
        let rg = self.rg(x);
        self.push(t, Op::Scale(x, s), rg)
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(x).map(f);
        let rg = self.rg(x);
        self.push(t, op, rg)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, f64::abs, Op::Abs(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, Op::Square(x))
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0).sqrt(), Op::Sqrt(x))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        self.unary(x, move |v| if v > 0.0 { v } else { slope * v }, Op::LeakyRelu(x, slope))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, softplus, Op::Softplus(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn log_floor(&mut self, x: Var, floor: f64) -> Var {
        self.unary(x, move |v| v.max(floor).ln(), Op::LogFloor(x, floor))
    }

    pub fn pow_abs_eps(&mut self, x: Var, p: f64, eps: f64) -> Var {
        self.unary(x, move |v| (v.abs() + eps).powf(p), Op::PowAbsEps(x, p, eps))
    }

    // ---- reductions -----------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let t = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(t, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = Tensor::scalar(self.value(x).mean());
        let rg = self.rg(x);
        self.push(t, Op::Mean(x), rg)
    }

    /// Sums `[C,H,W]` over channels into `[1,H,W]`.
    pub fn sum_channels(&mut self, x: Var) -> Result<Var> {
        let (_, h, w) = check_rank3(self.value(x), "sum_channels")?;
        let ax = Axis::of(self.value(x).shape(), 0);
        let src = self.value(x).data();
        let mut out = vec![0.0; h * w];
        for l in 0..ax.len {
            for (i, o) in out.iter_mut().enumerate() {
                *o += src[ax.idx(0, l, i)];
            }
        }
        let t = Tensor::new(vec![1, h, w], out)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::SumAxis(x, ax), rg))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Var {
        let ax = Axis::of(self.value(x).shape(), axis);
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        for o in 0..ax.outer {
            for i in 0..ax.inner {
                let m = (0..ax.len).map(|l| src[ax.idx(o, l, i)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for l in 0..ax.len {
                    let e = (src[ax.idx(o, l, i)] - m).exp();
                    out[ax.idx(o, l, i)] = e;
                    z += e;
                }
                for l in 0..ax.len {
                    out[ax.idx(o, l, i)] /= z;
                }
            }
        }
        let t = Tensor::new(self.value(x).shape().to_vec(), out).expect("same shape");
        let rg = self.rg(x);
        self.push(t, Op::SoftmaxAxis(x, ax), rg)
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Var {
        let ax = Axis::of(self.value(x).shape(), axis);
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        for o in 0..ax.outer {
            for i in 0..ax.inner {
                let m = (0..ax.len).map(|l| src[ax.idx(o, l, i)]).fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = (0..ax.len).map(|l| (src[ax.idx(o, l, i)] - m).exp()).sum();
                let lse = m + z.ln();
                for l in 0..ax.len {
                    out[ax.idx(o, l, i)] = src[ax.idx(o, l, i)] - lse;
                }
            }
        }
        let t = Tensor::new(self.value(x).shape().to_vec(), out).expect("same shape");
        let rg = self.rg(x);
        self.push(t, Op::LogSoftmaxAxis(x, ax), rg)
    }

    /// Divides each fibre along `axis` by its Euclidean norm.
    pub fn l2_normalize(&mut self, x: Var, axis: usize) -> Var {
        let ax = Axis::of(self.value(x).shape(), axis);
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        for o in 0..ax.outer {
            for i in 0..ax.inner {
                let n = ((0..ax.len).map(|l| src[ax.idx(o, l, i)].powi(2)).sum::<f64>() + 1e-24).sqrt();
                for l in 0..ax.len {
                    out[ax.idx(o, l, i)] = src[ax.idx(o, l, i)] / n;
                }
            }
        }
        let t = Tensor::new(self.value(x).shape().to_vec(), out).expect("same shape");
        let rg = self.rg(x);
        self.push(t, Op::L2NormalizeAxis(x, ax), rg)
    }

    // ---- spatial --------------------------------------------------------

    /// 2-D convolution with replicate padding, odd square kernels.
    ///
    /// `weight` is `[Cout, Cin, k, k]`, `bias` is `[Cout]`.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, stride: usize) -> Result<Var> {
        let (cin, h, w) = check_rank3(self.value(input), "conv2d")?;
        let ws = self.value(weight).shape().to_vec();
        if ws.len() != 4 || ws[1] != cin || ws[2] != ws[3] || ws[2] % 2 == 0 {
            return Err(Error::arg(format!(
                "conv2d: weight {ws:?} incompatible with {cin} input channels"
            )));
        }
        if stride == 0 {
            return Err(Error::arg("conv2d: stride must be positive"));
        }
        let (cout, k) = (ws[0], ws[2]);
        if let Some(b) = bias {
            if self.value(b).shape() != [cout] {
                return Err(Error::arg("conv2d: bias must be [Cout]"));
            }
        }
        let pad = k / 2;
        let ho = (h - 1) / stride + 1;
        let wo = (w - 1) / stride + 1;
        let p = ho * wo;
        let kk = k * k;
        let mut taps = Vec::with_capacity(kk * p);
        for ky in 0..k {
            for kx in 0..k {
                for oy in 0..ho {
                    let sy = (oy * stride + ky).saturating_sub(pad).min(h - 1);
                    for ox in 0..wo {
                        let sx = (ox * stride + kx).saturating_sub(pad).min(w - 1);
                        taps.push(sy * w + sx);
                    }
                }
            }
        }
        let src = self.value(input).data();
        let mut cols = vec![0.0; cin * kk * p];
        for ci in 0..cin {
            let plane = &src[ci * h * w..(ci + 1) * h * w];
            for t in 0..kk {
                let row = &mut cols[(ci * kk + t) * p..(ci * kk + t + 1) * p];
                for (dst, &s) in row.iter_mut().zip(&taps[t * p..(t + 1) * p]) {
                    *dst = plane[s];
                }
            }
        }
        let kdim = cin * kk;
        let mut out = vec![0.0; cout * p];
        if let Some(b) = bias {
            let bv = self.value(b).data();
            for co in 0..cout {
                out[co * p..(co + 1) * p].iter_mut().for_each(|o| *o = bv[co]);
            }
        }
        let wv = self.value(weight).data();
        // SAFETY: slices are sized exactly for the (m, k, n) row-major strides.
        unsafe {
            matrixmultiply::dgemm(
                cout,
                kdim,
                p,
                1.0,
                wv.as_ptr(),
                kdim as isize,
                1,
                cols.as_ptr(),
                p as isize,
                1,
                1.0,
                out.as_mut_ptr(),
                p as isize,
                1,
            );
        }
        let t = Tensor::new(vec![cout, ho, wo], out)?;
        let rg = self.rg(input) || self.rg(weight) || bias.is_some_and(|b| self.rg(b));
        Ok(self.push(
            t,
            Op::Conv2d {
                input,
                weight,
                bias,
                cols,
                taps,
            },
            rg,
        ))
    }

    pub fn upsample_bilinear(&mut self, input: Var, factor: usize) -> Result<Var> {
        let (c, h, w) = check_rank3(self.value(input), "upsample_bilinear")?;
        let ry = ResampleAxis::bilinear(h, factor);
        let rx = ResampleAxis::bilinear(w, factor);
        let (ho, wo) = (h * factor, w * factor);
        let src = self.value(input).data();
        let mut out = vec![0.0; c * ho * wo];
        for ci in 0..c {
            let plane = &src[ci * h * w..(ci + 1) * h * w];
            for oy in 0..ho {
                let (y0, y1, ay) = (ry.i0[oy], ry.i1[oy], ry.a[oy]);
                for ox in 0..wo {
                    let (x0, x1, ax) = (rx.i0[ox], rx.i1[ox], rx.a[ox]);
                    out[(ci * ho + oy) * wo + ox] = (1.0 - ay)
                        * ((1.0 - ax) * plane[y0 * w + x0] + ax * plane[y0 * w + x1])
                        + ay * ((1.0 - ax) * plane[y1 * w + x0] + ax * plane[y1 * w + x1]);
                }
            }
        }
        let t = Tensor::new(vec![c, ho, wo], out)?;
        let rg = self.rg(input);
        Ok(self.push(t, Op::UpsampleBilinear { input, ry, rx }, rg))
    }

    pub fn upsample_nearest(&mut self, input: Var, factor: usize) -> Result<Var> {
        let (c, h, w) = check_rank3(self.value(input), "upsample_nearest")?;
        let (ho, wo) = (h * factor, w * factor);
        let src = self.value(input).data();
        let mut out = vec![0.0; c * ho * wo];
        for ci in 0..c {
            for oy in 0..ho {
                for ox in 0..wo {
                    out[(ci * ho + oy) * wo + ox] = src[(ci * h + oy / factor) * w + ox / factor];
                }
            }
        }
        let t = Tensor::new(vec![c, ho, wo], out)?;
        let rg = self.rg(input);
        Ok(self.push(t, Op::UpsampleNearest(input, factor), rg))
    }

    /// Concatenates `[C_i,H,W]` tensors along channels.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::arg("concat: no inputs"));
        }
        let (_, h, w) = check_rank3(self.value(parts[0]), "concat")?;
        let mut data = Vec::new();
        let mut c = 0;
        for &p in parts {
            let (ci, hi, wi) = check_rank3(self.value(p), "concat")?;
            if hi != h || wi != w {
                return Err(Error::arg("concat: spatial size mismatch"));
            }
            data.extend_from_slice(self.value(p).data());
            c += ci;
        }
        let t = Tensor::new(vec![c, h, w], data)?;
        let rg = parts.iter().any(|p| self.rg(*p));
        Ok(self.push(t, Op::Concat(parts.to_vec()), rg))
    }

    /// Channels `[start, start + count)` of a `[C,H,W]` tensor.
    pub fn select_channels(&mut self, x: Var, start: usize, count: usize) -> Result<Var> {
        let (c, h, w) = check_rank3(self.value(x), "select_channels")?;
        if start + count > c || count == 0 {
            return Err(Error::arg(format!("select_channels: [{start}, {}) out of {c}", start + count)));
        }
        let data = self.value(x).data()[start * h * w..(start + count) * h * w].to_vec();
        let t = Tensor::new(vec![count, h, w], data)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::SelectChannels(x, start), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    /// Bilinear backward warp: `out[y,x] = map[y + v, x + u]`, border-clamped.
    pub fn warp(&mut self, map: Var, flow: Var) -> Result<Var> {
        let (c, h, w) = check_rank3(self.value(map), "warp")?;
        let (fc, fh, fw) = check_rank3(self.value(flow), "warp")?;
        if fc != 2 || fh != h || fw != w {
            return Err(Error::arg(format!(
                "warp: flow {:?} does not match map {:?}",
                self.value(flow).shape(),
                self.value(map).shape()
            )));
        }
        let src = self.value(map).data();
        let fl = self.value(flow).data();
        let hw = h * w;
        let mut out = vec![0.0; c * hw];
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                let tap = BilinearTap::new(x as f64 + fl[i], y as f64 + fl[hw + i], h, w);
                for ci in 0..c {
                    out[ci * hw + i] = tap.sample(&src[ci * hw..(ci + 1) * hw], w);
                }
            }
        }
        let t = Tensor::new(vec![c, h, w], out)?;
        let rg = self.rg(map) || self.rg(flow);
        Ok(self.push(t, Op::Warp { map, flow }, rg))
    }

    /// Local correlation `cv[(dy,dx),y,x] = <ft[y,x], fw[y+dy,x+dx]>`.
    ///
    /// Channel index is `(dy + r) * (2r + 1) + (dx + r)`. Displacements that
    /// leave the map are filled with `-1`.
    pub fn cost_volume(&mut self, ft: Var, fw: Var, radius: usize) -> Result<Var> {
        check_same(self.value(ft), self.value(fw), "cost_volume")?;
        let (f, h, w) = check_rank3(self.value(ft), "cost_volume")?;
        if radius == 0 {
            return Err(Error::arg("cost_volume: radius must be at least 1"));
        }
        let side = 2 * radius + 1;
        let hw = h * w;
        let a = self.value(ft).data();
        let b = self.value(fw).data();
        let mut out = vec![-1.0; side * side * hw];
        let r = radius as isize;
        for dy in -r..=r {
            for dx in -r..=r {
                let ch = ((dy + r) as usize) * side + (dx + r) as usize;
                let plane = &mut out[ch * hw..(ch + 1) * hw];
                for y in 0..h {
                    let yy = y as isize + dy;
                    if yy < 0 || yy >= h as isize {
                        continue;
                    }
                    for x in 0..w {
                        let xx = x as isize + dx;
                        if xx < 0 || xx >= w as isize {
                            continue;
                        }
                        let (i, j) = (y * w + x, yy as usize * w + xx as usize);
                        let mut s = 0.0;
                        for fi in 0..f {
                            s += a[fi * hw + i] * b[fi * hw + j];
                        }
                        plane[i] = s;
                    }
                }
            }
        }
        let t = Tensor::new(vec![side * side, h, w], out)?;
        let rg = self.rg(ft) || self.rg(fw);
        Ok(self.push(t, Op::CostVolume { ft, fw, radius }, rg))
    }

    /// Gathers the channel vectors at `pixels` (flat `y*W+x`) into `[N, C]`.
    pub fn gather_pixels(&mut self, input: Var, pixels: &[usize]) -> Result<Var> {
        let (c, h, w) = check_rank3(self.value(input), "gather_pixels")?;
        let hw = h * w;
        if let Some(bad) = pixels.iter().find(|p| **p >= hw) {
            return Err(Error::arg(format!("gather_pixels: pixel {bad} out of {hw}")));
        }
        let src = self.value(input).data();
        let mut out = Vec::with_capacity(pixels.len() * c);
        for &p in pixels {
            for ci in 0..c {
                out.push(src[ci * hw + p]);
            }
        }
        let t = Tensor::new(vec![pixels.len(), c], out)?;
        let rg = self.rg(input);
        Ok(self.push(
            t,
            Op::GatherPixels {
                input,
                pixels: pixels.to_vec(),
            },
            rg,
        ))
    }

    /// InfoNCE over row-vector sets (`[Np,D]`, `[Na,D]`, `[Nn,D]`):
    ///
    /// `mean_{j,k} -log( e^{p_j.a_k/t} / (e^{p_j.a_k/t} + sum_i e^{n_i.p_j/t}) )`.
    pub fn info_nce(&mut self, positives: Var, anchors: Var, negatives: Var, tau: f64) -> Result<Var> {
        let (sp, sa, sn) = (
            self.value(positives).shape().to_vec(),
            self.value(anchors).shape().to_vec(),
            self.value(negatives).shape().to_vec(),
        );
        if sp.len() != 2 || sa.len() != 2 || sn.len() != 2 || sp[1] != sa[1] || sp[1] != sn[1] {
            return Err(Error::arg(format!("info_nce: incompatible shapes {sp:?} {sa:?} {sn:?}")));
        }
        if sp[0] == 0 || sa[0] == 0 {
            return Err(Error::degenerate("info_nce: empty positive or anchor set"));
        }
        if tau <= 0.0 || !tau.is_finite() {
            return Err(Error::arg(format!("info_nce: temperature must be positive, got {tau}")));
        }
        let terms = info_nce_terms(
            self.value(positives),
            self.value(anchors),
            self.value(negatives),
            tau,
        );
        let loss = terms.loss;
        let rg = self.rg(positives) || self.rg(anchors) || self.rg(negatives);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::InfoNce {
                positives,
                anchors,
                negatives,
                tau,
            },
            rg,
        ))
    }

    // ---- backward -------------------------------------------------------

    /// Reverse pass from a one-element `loss` node.
    pub fn backward(&self, loss: Var) -> Grads {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backprop(node, &g, &mut grads);
            grads[id] = Some(g);
        }
        Grads { grads }
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, t: Tensor) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => g.add_assign(&t),
            slot @ None => *slot = Some(t),
        }
    }

    fn acc_map(&self, grads: &mut [Option<Tensor>], v: Var, g: &Tensor, f: impl Fn(usize, f64) -> f64) {
        if !self.rg(v) {
            return;
        }
        let data = g.data().iter().enumerate().map(|(i, &gi)| f(i, gi)).collect();
        let t = Tensor::new(g.shape().to_vec(), data).expect("same shape");
        self.acc(grads, v, t);
    }

    fn backprop(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc_map(grads, *a, g, |_, gi| gi);
                self.acc_map(grads, *b, g, |_, gi| gi);
            }
            Op::Sub(a, b) => {
                self.acc_map(grads, *a, g, |_, gi| gi);
                self.acc_map(grads, *b, g, |_, gi| -gi);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.acc_map(grads, *a, g, |i, gi| gi * bv[i]);
                self.acc_map(grads, *b, g, |i, gi| gi * av[i]);
            }
            Op::MulBroadcast(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let hw = bv.len();
                self.acc_map(grads, *a, g, |i, gi| gi * bv[i % hw]);
                if self.rg(*b) {
                    let mut gb = vec![0.0; hw];
                    for (i, gi) in g.data().iter().enumerate() {
                        gb[i % hw] += gi * av[i];
                    }
                    let t = Tensor::new(self.value(*b).shape().to_vec(), gb).expect("shape");
                    self.acc(grads, *b, t);
                }
            }
            Op::MulScalarVar(x, s) => {
                let k = self.value(*s).item();
                self.acc_map(grads, *x, g, |_, gi| gi * k);
                if self.rg(*s) {
                    let xv = self.value(*x).data();
                    let d: f64 = g.data().iter().zip(xv).map(|(gi, xi)| gi * xi).sum();
                    self.acc(grads, *s, Tensor::new(self.value(*s).shape().to_vec(), vec![d]).expect("shape"));
                }
            }
            Op::AddConst(x) => self.acc_map(grads, *x, g, |_, gi| gi),
            Op::Scale(x, s) => self.acc_map(grads, *x, g, |_, gi| gi * s),
            Op::Abs(x) => {
                let xv = self.value(*x).data();
                self.acc_map(grads, *x, g, |i, gi| {
                    if xv[i] > 0.0 {
                        gi
                    } else if xv[i] < 0.0 {
                        -gi
                    } else {
                        0.0
                    }
                });
            }
            Op::Square(x) => {
                let xv = self.value(*x).data();
                self.acc_map(grads, *x, g, |i, gi| 2.0 * gi * xv[i]);
            }
            Op::Sqrt(x) => self.acc_map(grads, *x, g, |i, gi| if y[i] > 0.0 { gi * 0.5 / y[i] } else { 0.0 }),
            Op::LeakyRelu(x, s) => {
                let xv = self.value(*x).data();
                self.acc_map(grads, *x, g, |i, gi| if xv[i] > 0.0 { gi } else { gi * s });
            }
            Op::Sigmoid(x) => self.acc_map(grads, *x, g, |i, gi| gi * y[i] * (1.0 - y[i])),
            Op::Softplus(x) => {
                let xv = self.value(*x).data();
                self.acc_map(grads, *x, g, |i, gi| gi * sigmoid(xv[i]));
            }
            Op::Tanh(x) => self.acc_map(grads, *x, g, |i, gi| gi * (1.0 - y[i] * y[i])),
            Op::Exp(x) => self.acc_map(grads, *x, g, |i, gi| gi * y[i]),
            Op::LogFloor(x, floor) => {
                let xv = self.value(*x).data();
                self.acc_map(grads, *x, g, |i, gi| if xv[i] > *floor { gi / xv[i] } else { 0.0 });
            }
            Op::PowAbsEps(x, p, eps) => {
                let xv = self.value(*x).data();
                self.acc_map(grads, *x, g, |i, gi| {
                    let base = xv[i].abs() + eps;
                    let sign = if xv[i] > 0.0 {
                        1.0
                    } else if xv[i] < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                    gi * p * base.powf(p - 1.0) * sign
                });
            }
            Op::Sum(x) => {
                let gi = g.item();
                self.acc_map(grads, *x, self.value(*x), |_, _| gi);
            }
            Op::Mean(x) => {
                let n = self.value(*x).len() as f64;
                let gi = g.item() / n;
                self.acc_map(grads, *x, self.value(*x), |_, _| gi);
            }
            Op::SumAxis(x, ax) => {
                let gd = g.data();
                let ax = *ax;
                self.acc_map(grads, *x, self.value(*x), |i, _| gd[i % ax.inner + (i / (ax.len * ax.inner)) * ax.inner]);
            }
            Op::SoftmaxAxis(x, ax) => {
                if self.rg(*x) {
                    let gd = g.data();
                    let mut dx = vec![0.0; gd.len()];
                    for o in 0..ax.outer {
                        for i in 0..ax.inner {
                            let dot: f64 = (0..ax.len).map(|l| gd[ax.idx(o, l, i)] * y[ax.idx(o, l, i)]).sum();
                            for l in 0..ax.len {
                                let k = ax.idx(o, l, i);
                                dx[k] = y[k] * (gd[k] - dot);
                            }
                        }
                    }
                    self.acc(grads, *x, Tensor::new(g.shape().to_vec(), dx).expect("shape"));
                }
            }
            Op::LogSoftmaxAxis(x, ax) => {
                if self.rg(*x) {
                    let gd = g.data();
                    let mut dx = vec![0.0; gd.len()];
                    for o in 0..ax.outer {
                        for i in 0..ax.inner {
                            let gs: f64 = (0..ax.len).map(|l| gd[ax.idx(o, l, i)]).sum();
                            for l in 0..ax.len {
                                let k = ax.idx(o, l, i);
                                dx[k] = gd[k] - y[k].exp() * gs;
                            }
                        }
                    }
                    self.acc(grads, *x, Tensor::new(g.shape().to_vec(), dx).expect("shape"));
                }
            }
            Op::L2NormalizeAxis(x, ax) => {
                if self.rg(*x) {
                    let xv = self.value(*x).data();
                    let gd = g.data();
                    let mut dx = vec![0.0; gd.len()];
                    for o in 0..ax.outer {
                        for i in 0..ax.inner {
                            let n = ((0..ax.len).map(|l| xv[ax.idx(o, l, i)].powi(2)).sum::<f64>() + 1e-24).sqrt();
                            let dot: f64 = (0..ax.len).map(|l| gd[ax.idx(o, l, i)] * y[ax.idx(o, l, i)]).sum();
                            for l in 0..ax.len {
                                let k = ax.idx(o, l, i);
                                dx[k] = (gd[k] - y[k] * dot) / n;
                            }
                        }
                    }
                    self.acc(grads, *x, Tensor::new(g.shape().to_vec(), dx).expect("shape"));
                }
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                cols,
                taps,
            } => self.conv_backward(*input, *weight, *bias, cols, taps, g, grads),
            Op::UpsampleBilinear { input, ry, rx } => {
                if self.rg(*input) {
                    let (c, h, w) = self.value(*input).chw();
                    let (ho, wo) = (ry.a.len(), rx.a.len());
                    let gd = g.data();
                    let mut dx = vec![0.0; c * h * w];
                    for ci in 0..c {
                        let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
                        for oy in 0..ho {
                            let (y0, y1, ay) = (ry.i0[oy], ry.i1[oy], ry.a[oy]);
                            for ox in 0..wo {
                                let (x0, x1, ax) = (rx.i0[ox], rx.i1[ox], rx.a[ox]);
                                let gi = gd[(ci * ho + oy) * wo + ox];
                                plane[y0 * w + x0] += gi * (1.0 - ay) * (1.0 - ax);
                                plane[y0 * w + x1] += gi * (1.0 - ay) * ax;
                                plane[y1 * w + x0] += gi * ay * (1.0 - ax);
                                plane[y1 * w + x1] += gi * ay * ax;
                            }
                        }
                    }
                    self.acc(grads, *input, Tensor::new(vec![c, h, w], dx).expect("shape"));
                }
            }
            Op::UpsampleNearest(input, factor) => {
                if self.rg(*input) {
                    let (c, h, w) = self.value(*input).chw();
                    let (ho, wo) = (h * factor, w * factor);
                    let gd = g.data();
                    let mut dx = vec![0.0; c * h * w];
                    for ci in 0..c {
                        for oy in 0..ho {
                            for ox in 0..wo {
                                dx[(ci * h + oy / factor) * w + ox / factor] += gd[(ci * ho + oy) * wo + ox];
                            }
                        }
                    }
                    self.acc(grads, *input, Tensor::new(vec![c, h, w], dx).expect("shape"));
                }
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    if self.rg(p) {
                        let t = Tensor::new(self.value(p).shape().to_vec(), g.data()[off..off + n].to_vec())
                            .expect("shape");
                        self.acc(grads, p, t);
                    }
                    off += n;
                }
            }
            Op::SelectChannels(x, start) => {
                if self.rg(*x) {
                    let (c, h, w) = self.value(*x).chw();
                    let mut dx = vec![0.0; c * h * w];
                    let off = start * h * w;
                    dx[off..off + g.len()].copy_from_slice(g.data());
                    self.acc(grads, *x, Tensor::new(vec![c, h, w], dx).expect("shape"));
                }
            }
            Op::Reshape(x) => {
                let t = g.clone().reshape(self.value(*x).shape().to_vec()).expect("shape");
                self.acc(grads, *x, t);
            }
            Op::Warp { map, flow } => self.warp_backward(*map, *flow, g, grads),
            Op::CostVolume { ft, fw, radius } => self.cost_volume_backward(*ft, *fw, *radius, g, grads),
            Op::GatherPixels { input, pixels } => {
                if self.rg(*input) {
                    let (c, h, w) = self.value(*input).chw();
                    let hw = h * w;
                    let gd = g.data();
                    let mut dx = vec![0.0; c * hw];
                    for (n, &p) in pixels.iter().enumerate() {
                        for ci in 0..c {
                            dx[ci * hw + p] += gd[n * c + ci];
                        }
                    }
                    self.acc(grads, *input, Tensor::new(vec![c, h, w], dx).expect("shape"));
                }
            }
            Op::InfoNce {
                positives,
                anchors,
                negatives,
                tau,
            } => {
                let terms = info_nce_terms(
                    self.value(*positives),
                    self.value(*anchors),
                    self.value(*negatives),
                    *tau,
                );
                let s = g.item();
                let mut dp = terms.d_positives;
                dp.scale(s);
                let mut da = terms.d_anchors;
                da.scale(s);
                let mut dn = terms.d_negatives;
                dn.scale(s);
                self.acc(grads, *positives, dp);
                self.acc(grads, *anchors, da);
                self.acc(grads, *negatives, dn);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_backward(
        &self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        cols: &[f64],
        taps: &[usize],
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) {
        let ws = self.value(weight).shape();
        let (cout, cin, k) = (ws[0], ws[1], ws[2]);
        let kk = k * k;
        let kdim = cin * kk;
        let p = g.len() / cout;
        let gd = g.data();
        if let Some(b) = bias {
            if self.rg(b) {
                let db = (0..cout).map(|co| gd[co * p..(co + 1) * p].iter().sum()).collect();
                self.acc(grads, b, Tensor::new(vec![cout], db).expect("shape"));
            }
        }
        if self.rg(weight) {
            let mut dw = vec![0.0; cout * kdim];
            // SAFETY: dW[cout,kdim] = dOut[cout,p] * cols^T[p,kdim].
            unsafe {
                matrixmultiply::dgemm(
                    cout,
                    p,
                    kdim,
                    1.0,
                    gd.as_ptr(),
                    p as isize,
                    1,
                    cols.as_ptr(),
                    1,
                    p as isize,
                    0.0,
                    dw.as_mut_ptr(),
                    kdim as isize,
                    1,
                );
            }
            self.acc(grads, weight, Tensor::new(ws.to_vec(), dw).expect("shape"));
        }
        if self.rg(input) {
            let wv = self.value(weight).data();
            let mut dcols = vec![0.0; kdim * p];
            // SAFETY: dcols[kdim,p] = W^T[kdim,cout] * dOut[cout,p].
            unsafe {
                matrixmultiply::dgemm(
                    kdim,
                    cout,
                    p,
                    1.0,
                    wv.as_ptr(),
                    1,
                    kdim as isize,
                    gd.as_ptr(),
                    p as isize,
                    1,
                    0.0,
                    dcols.as_mut_ptr(),
                    p as isize,
                    1,
                );
            }
            let (c, h, w) = self.value(input).chw();
            let mut dx = vec![0.0; c * h * w];
            for ci in 0..cin {
                let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
                for t in 0..kk {
                    let row = &dcols[(ci * kk + t) * p..(ci * kk + t + 1) * p];
                    for (&s, &v) in taps[t * p..(t + 1) * p].iter().zip(row) {
                        plane[s] += v;
                    }
                }
            }
            self.acc(grads, input, Tensor::new(vec![c, h, w], dx).expect("shape"));
        }
    }

    fn warp_backward(&self, map: Var, flow: Var, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let (c, h, w) = self.value(map).chw();
        let hw = h * w;
        let src = self.value(map).data();
        let fl = self.value(flow).data();
        let gd = g.data();
        let want_map = self.rg(map);
        let want_flow = self.rg(flow);
        let mut dmap = if want_map { vec![0.0; c * hw] } else { Vec::new() };
        let mut dflow = if want_flow { vec![0.0; 2 * hw] } else { Vec::new() };
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                let tap = BilinearTap::new(x as f64 + fl[i], y as f64 + fl[hw + i], h, w);
                let (ax, ay) = (tap.ax, tap.ay);
                for ci in 0..c {
                    let gi = gd[ci * hw + i];
                    if gi == 0.0 {
                        continue;
                    }
                    if want_map {
                        let plane = &mut dmap[ci * hw..(ci + 1) * hw];
                        plane[tap.y0 * w + tap.x0] += gi * (1.0 - ay) * (1.0 - ax);
                        plane[tap.y0 * w + tap.x1] += gi * (1.0 - ay) * ax;
                        plane[tap.y1 * w + tap.x0] += gi * ay * (1.0 - ax);
                        plane[tap.y1 * w + tap.x1] += gi * ay * ax;
                    }
                    if want_flow {
                        let p = &src[ci * hw..(ci + 1) * hw];
                        let (v00, v01) = (p[tap.y0 * w + tap.x0], p[tap.y0 * w + tap.x1]);
                        let (v10, v11) = (p[tap.y1 * w + tap.x0], p[tap.y1 * w + tap.x1]);
                        if tap.gx {
                            dflow[i] += gi * ((1.0 - ay) * (v01 - v00) + ay * (v11 - v10));
                        }
                        if tap.gy {
                            dflow[hw + i] += gi * ((1.0 - ax) * (v10 - v00) + ax * (v11 - v01));
                        }
                    }
                }
            }
        }
        if want_map {
            self.acc(grads, map, Tensor::new(vec![c, h, w], dmap).expect("shape"));
        }
        if want_flow {
            self.acc(grads, flow, Tensor::new(vec![2, h, w], dflow).expect("shape"));
        }
    }

    fn cost_volume_backward(&self, ft: Var, fw: Var, radius: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let (f, h, w) = self.value(ft).chw();
        let hw = h * w;
        let a = self.value(ft).data();
        let b = self.value(fw).data();
        let gd = g.data();
        let (want_a, want_b) = (self.rg(ft), self.rg(fw));
        let mut da = vec![0.0; f * hw];
        let mut db = vec![0.0; f * hw];
        let side = 2 * radius + 1;
        let r = radius as isize;
        for dy in -r..=r {
            for dx in -r..=r {
                let ch = ((dy + r) as usize) * side + (dx + r) as usize;
                for y in 0..h {
                    let yy = y as isize + dy;
                    if yy < 0 || yy >= h as isize {
                        continue;
                    }
                    for x in 0..w {
                        let xx = x as isize + dx;
                        if xx < 0 || xx >= w as isize {
                            continue;
                        }
                        let (i, j) = (y * w + x, yy as usize * w + xx as usize);
                        let gi = gd[ch * hw + i];
                        for fi in 0..f {
                            if want_a {
                                da[fi * hw + i] += gi * b[fi * hw + j];
                            }
                            if want_b {
                                db[fi * hw + j] += gi * a[fi * hw + i];
                            }
                        }
                    }
                }
            }
        }
        if want_a {
            self.acc(grads, ft, Tensor::new(vec![f, h, w], da).expect("shape"));
        }
        if want_b {
            self.acc(grads, fw, Tensor::new(vec![f, h, w], db).expect("shape"));
        }
    }
}

struct InfoNceTerms {
    loss: f64,
    d_positives: Tensor,
    d_anchors: Tensor,
    d_negatives: Tensor,
}

fn info_nce_terms(pos: &Tensor, anc: &Tensor, neg: &Tensor, tau: f64) -> InfoNceTerms {
    let d = pos.shape()[1];
    let (np, na, nn) = (pos.shape()[0], anc.shape()[0], neg.shape()[0]);
    fn row(t: &Tensor, i: usize, d: usize) -> &[f64] {
        &t.data()[i * d..(i + 1) * d]
    }
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let norm = 1.0 / (np * na) as f64;

    let mut loss = 0.0;
    let mut dp = vec![0.0; np * d];
    let mut da = vec![0.0; na * d];
    let mut dn = vec![0.0; nn * d];
    for j in 0..np {
        let pj = row(pos, j, d);
        let negs: Vec<f64> = (0..nn).map(|i| dot(row(neg, i, d), pj) / tau).collect();
        let mneg = negs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        // d(loss)/d(neg score i) accumulates over anchors.
        let mut wneg = vec![0.0; nn];
        for k in 0..na {
            let ak = row(anc, k, d);
            let s = dot(pj, ak) / tau;
            let m = s.max(mneg);
            let es = (s - m).exp();
            let en: Vec<f64> = negs.iter().map(|n| (n - m).exp()).collect();
            let denom = es + en.iter().sum::<f64>();
            loss += (m + denom.ln() - s) * norm;
            let ds = (es / denom - 1.0) * norm;
            for (wi, e) in wneg.iter_mut().zip(&en) {
                *wi += e / denom * norm;
            }
            for t in 0..d {
                dp[j * d + t] += ds * ak[t] / tau;
                da[k * d + t] += ds * pj[t] / tau;
            }
        }
        for (i, wi) in wneg.iter().enumerate() {
            let ni = row(neg, i, d);
            for t in 0..d {
                dn[i * d + t] += wi * pj[t] / tau;
                dp[j * d + t] += wi * ni[t] / tau;
            }
        }
    }
    InfoNceTerms {
        loss,
        d_positives: Tensor::new(vec![np, d], dp).expect("shape"),
        d_anchors: Tensor::new(vec![na, d], da).expect("shape"),
        d_negatives: Tensor::new(vec![nn, d], dn).expect("shape"),
    }
}
