//! Reverse-mode gradient tape.
//!
//! Every primitive appends one node holding its forward value and the indices
//! of its inputs. Nodes are stored in creation order, which is a topological
//! order, so [`Tape::backward`] is a single reverse sweep that visits each node
//! once and accumulates gradients additively where values fan out.

use crate::error::{shape_err, DiffError, Result};
use crate::kernels::{self, ConvGeom};
use crate::param::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
}

impl Conv2dSpec {
    pub const fn new(stride: usize, padding: usize) -> Self {
        Conv2dSpec { stride, padding }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Deconv2dSpec {
    pub stride: usize,
    pub padding: usize,
    pub output_padding: usize,
}

impl Deconv2dSpec {
    pub const fn new(stride: usize, padding: usize, output_padding: usize) -> Self {
        Deconv2dSpec {
            stride,
            padding,
            output_padding,
        }
    }
}

/// Probability clipping used by the cross-entropy primitive.
pub const PROB_CLIP: f64 = 1e-7;

#[derive(Clone, Debug)]
enum Op<S> {
    Constant,
    Variable,
    Param(ParamId),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        spec: Conv2dSpec,
    },
    Deconv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        spec: Deconv2dSpec,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddBroadcastChannels {
        base: Var,
        feat: Var,
    },
    Scale(Var, S),
    AddScalar(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Concat(Vec<Var>),
    SliceChannels {
        x: Var,
        start: usize,
    },
    Upsample {
        x: Var,
        factor: usize,
    },
    Reshape(Var),
    Sum(Var),
    Blur {
        x: Var,
        kernel: Vec<S>,
        k: usize,
    },
    Bce {
        p: Var,
        target: Vec<S>,
        weight: Vec<S>,
    },
    WeightedSqErr {
        x: Var,
        target: Vec<S>,
        weight: Vec<S>,
    },
}

#[derive(Clone, Debug)]
struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    needs_grad: bool,
}

/// Records a forward computation for one training context.
#[derive(Debug)]
pub struct Tape<S> {
    nodes: Vec<Node<S>>,
    corrupt_conv_weight_grad: bool,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar loss with respect to the leaves of a tape.
#[derive(Debug)]
pub struct Gradients<S> {
    leaves: Vec<Option<Tensor<S>>>,
    params: Vec<(ParamId, usize)>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient with respect to a leaf (`variable` or `param`) node; `None` when unreachable.
    pub fn get(&self, v: Var) -> Option<&Tensor<S>> {
        self.leaves.get(v.0).and_then(|g| g.as_ref())
    }

    /// Adds the parameter gradients into the store's accumulators.
    pub fn accumulate_into(&self, store: &mut ParamStore<S>) {
        for &(id, node) in &self.params {
            if let Some(g) = &self.leaves[node] {
                store.get_mut(id).grad.add_assign(g);
            }
        }
    }
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(shape_err(op, format!("{:?} vs {:?}", a, b)));
    }
    Ok(())
}

fn sigmoid<S: Scalar>(v: S) -> S {
    if v >= S::zero() {
        S::one() / (S::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (S::one() + e)
    }
}

fn grad_slot<'a, S: Scalar>(
    grads: &'a mut [Option<Tensor<S>>],
    v: Var,
    shape: &[usize],
) -> &'a mut Tensor<S> {
    grads[v.0].get_or_insert_with(|| Tensor::zeros(shape))
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            corrupt_conv_weight_grad: false,
        }
    }

    /// Scales every convolution kernel gradient by 1.01. Only for exercising the
    /// gradient checker's failure path.
    pub fn inject_conv_weight_grad_fault(&mut self) {
        self.corrupt_conv_weight_grad = true;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, t: Tensor<S>) -> Var {
        self.push(t, Op::Constant, false)
    }

    /// A leaf whose gradient is reported by [`Gradients::get`].
    pub fn variable(&mut self, t: Tensor<S>) -> Var {
        self.push(t, Op::Variable, true)
    }

    /// Brings a parameter onto the tape. Call once per forward and reuse the `Var`.
    pub fn param(&mut self, store: &ParamStore<S>, id: ParamId) -> Var {
        self.push(store.get(id).value.clone(), Op::Param(id), true)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: Conv2dSpec) -> Result<Var> {
        let (n, c, h, wd) = self.value(x).dims4("conv2d")?;
        let (o, ci, kh, kw) = self.value(w).dims4("conv2d")?;
        if ci != c || kh != kw {
            return Err(shape_err(
                "conv2d",
                format!("input {:?} kernel {:?}", self.shape(x), self.shape(w)),
            ));
        }
        if spec.stride == 0 {
            return Err(DiffError::Invalid {
                op: "conv2d",
                detail: "stride must be >= 1".into(),
            });
        }
        if h + 2 * spec.padding < kh || wd + 2 * spec.padding < kw {
            return Err(shape_err("conv2d", "kernel larger than padded input"));
        }
        if let Some(b) = b {
            if self.shape(b) != [o] {
                return Err(shape_err("conv2d", format!("bias {:?}", self.shape(b))));
            }
        }
        let g = ConvGeom {
            c,
            h,
            w: wd,
            k: kh,
            stride: spec.stride,
            pad: spec.padding,
            oh: (h + 2 * spec.padding - kh) / spec.stride + 1,
            ow: (wd + 2 * spec.padding - kw) / spec.stride + 1,
        };
        let (r, p) = (g.rows(), g.cols());
        let mut out = Tensor::zeros(&[n, o, g.oh, g.ow]);
        let mut col = vec![S::zero(); r * p];
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            let bv = b.map(|b| self.value(b).data().to_vec());
            let od = out.data_mut();
            for ni in 0..n {
                kernels::im2col(&xv[ni * c * h * wd..(ni + 1) * c * h * wd], &g, &mut col);
                let on = &mut od[ni * o * p..(ni + 1) * o * p];
                if let Some(bv) = &bv {
                    for oi in 0..o {
                        on[oi * p..(oi + 1) * p].iter_mut().for_each(|v| *v = bv[oi]);
                    }
                }
                kernels::gemm_nn(wv, &col, on, o, r, p);
            }
        }
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        Ok(self.push(out, Op::Conv2d { x, w, b, spec }, ng))
    }

    /// Transposed convolution. Kernel layout is `(in_channels, out_channels, k, k)`.
    pub fn deconv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: Deconv2dSpec) -> Result<Var> {
        let (n, c, h, wd) = self.value(x).dims4("deconv2d")?;
        let (ci, o, kh, kw) = self.value(w).dims4("deconv2d")?;
        if ci != c || kh != kw {
            return Err(shape_err(
                "deconv2d",
                format!("input {:?} kernel {:?}", self.shape(x), self.shape(w)),
            ));
        }
        if spec.stride == 0 || spec.output_padding >= spec.stride {
            return Err(DiffError::Invalid {
                op: "deconv2d",
                detail: format!(
                    "stride {} output_padding {}",
                    spec.stride, spec.output_padding
                ),
            });
        }
        let full_h = (h - 1) * spec.stride + kh + spec.output_padding;
        let full_w = (wd - 1) * spec.stride + kw + spec.output_padding;
        if full_h <= 2 * spec.padding || full_w <= 2 * spec.padding {
            return Err(shape_err("deconv2d", "padding exceeds output size"));
        }
        if let Some(b) = b {
            if self.shape(b) != [o] {
                return Err(shape_err("deconv2d", format!("bias {:?}", self.shape(b))));
            }
        }
        let g = ConvGeom {
            c: o,
            h: full_h - 2 * spec.padding,
            w: full_w - 2 * spec.padding,
            k: kh,
            stride: spec.stride,
            pad: spec.padding,
            oh: h,
            ow: wd,
        };
        let (r, p) = (g.rows(), g.cols());
        let plane = g.h * g.w;
        let mut out = Tensor::zeros(&[n, o, g.h, g.w]);
        let mut col = vec![S::zero(); r * p];
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            let od = out.data_mut();
            for ni in 0..n {
                col.iter_mut().for_each(|v| *v = S::zero());
                kernels::gemm_tn(wv, &xv[ni * c * p..(ni + 1) * c * p], &mut col, c, r, p);
                let on = &mut od[ni * o * plane..(ni + 1) * o * plane];
                kernels::col2im(&col, &g, on);
                if let Some(b) = b {
                    let bv = self.nodes[b.0].value.data();
                    for oi in 0..o {
                        on[oi * plane..(oi + 1) * plane].iter_mut().for_each(|v| *v += bv[oi]);
                    }
                }
            }
        }
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        Ok(self.push(out, Op::Deconv2d { x, w, b, spec }, ng))
    }

    /// `x (N,F) · wᵀ (F,O) + b`
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (n, f) = match self.shape(x) {
            &[n, f] => (n, f),
            s => return Err(shape_err("linear", format!("input {:?}", s))),
        };
        let o = match self.shape(w) {
            &[o, wf] if wf == f => o,
            s => return Err(shape_err("linear", format!("weight {:?} for {} features", s, f))),
        };
        if let Some(b) = b {
            if self.shape(b) != [o] {
                return Err(shape_err("linear", format!("bias {:?}", self.shape(b))));
            }
        }
        let mut out = Tensor::zeros(&[n, o]);
        {
            let od = out.data_mut();
            if let Some(b) = b {
                let bv = self.nodes[b.0].value.data();
                for row in od.chunks_mut(o) {
                    row.copy_from_slice(bv);
                }
            }
            kernels::gemm_nt(self.value(x).data(), self.value(w).data(), od, n, o, f);
        }
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        Ok(self.push(out, Op::Linear { x, w, b }, ng))
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(S, S) -> S) -> Result<Tensor<S>> {
        same_shape(name, self.shape(a), self.shape(b))?;
        let av = self.value(a);
        let bv = self.value(b);
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_vec(av.shape(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "add", |x, y| x + y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "sub", |x, y| x - y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "mul", |x, y| x * y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Mul(a, b), ng))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "div", |x, y| x / y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Div(a, b), ng))
    }

    /// Adds a single-channel map `(N,1,H,W)` to every channel of `feat (N,C,H,W)`.
    pub fn add_broadcast_channels(&mut self, base: Var, feat: Var) -> Result<Var> {
        let (n, c1, h, w) = self.value(base).dims4("add_broadcast_channels")?;
        let (n2, c, h2, w2) = self.value(feat).dims4("add_broadcast_channels")?;
        if c1 != 1 || n != n2 || h != h2 || w != w2 {
            return Err(shape_err(
                "add_broadcast_channels",
                format!("{:?} onto {:?}", self.shape(base), self.shape(feat)),
            ));
        }
        let mut out = self.value(feat).clone();
        {
            let bd = self.value(base).data();
            let od = out.data_mut();
            let plane = h * w;
            for ni in 0..n {
                let src = &bd[ni * plane..(ni + 1) * plane];
                for ci in 0..c {
                    let off = (ni * c + ci) * plane;
                    for (o, &s) in od[off..off + plane].iter_mut().zip(src) {
                        *o += s;
                    }
                }
            }
        }
        let ng = self.ng(base) || self.ng(feat);
        Ok(self.push(out, Op::AddBroadcastChannels { base, feat }, ng))
    }

    pub fn scale(&mut self, x: Var, s: S) -> Var {
        let t = self.value(x).map(|v| v * s);
        let ng = self.ng(x);
        self.push(t, Op::Scale(x, s), ng)
    }

    pub fn add_scalar(&mut self, x: Var, s: S) -> Var {
        let t = self.value(x).map(|v| v + s);
        let ng = self.ng(x);
        self.push(t, Op::AddScalar(x), ng)
    }

    /// `1 - x`
    pub fn one_minus(&mut self, x: Var) -> Var {
        let neg = self.scale(x, -S::one());
        self.add_scalar(neg, S::one())
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.value(x).map(sigmoid);
        let ng = self.ng(x);
        self.push(t, Op::Sigmoid(x), ng)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| v.tanh());
        let ng = self.ng(x);
        self.push(t, Op::Tanh(x), ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| v.max(S::zero()));
        let ng = self.ng(x);
        self.push(t, Op::Relu(x), ng)
    }

    /// Concatenates along axis 1. All parts must agree on every other axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| shape_err("concat_channels", "no inputs"))?;
        let s0 = self.shape(*first).to_vec();
        if s0.len() < 2 {
            return Err(shape_err("concat_channels", format!("rank of {:?}", s0)));
        }
        let mut channels = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != s0.len() || s[0] != s0[0] || s[2..] != s0[2..] {
                return Err(shape_err("concat_channels", format!("{:?} vs {:?}", s0, s)));
            }
            channels += s[1];
        }
        let n = s0[0];
        let inner: usize = s0[2..].iter().product();
        let mut shape = s0.clone();
        shape[1] = channels;
        let mut data = Vec::with_capacity(n * channels * inner);
        for ni in 0..n {
            for &p in parts {
                let c = self.shape(p)[1];
                let d = self.value(p).data();
                data.extend_from_slice(&d[ni * c * inner..(ni + 1) * c * inner]);
            }
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        let out = Tensor::from_vec(&shape, data)?;
        Ok(self.push(out, Op::Concat(parts.to_vec()), ng))
    }

    /// Channels `start..start+len` of axis 1.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 || start + len > s[1] || len == 0 {
            return Err(shape_err(
                "slice_channels",
                format!("{}..{} of {:?}", start, start + len, s),
            ));
        }
        let (n, c) = (s[0], s[1]);
        let inner: usize = s[2..].iter().product();
        let d = self.value(x).data();
        let mut data = Vec::with_capacity(n * len * inner);
        for ni in 0..n {
            let off = (ni * c + start) * inner;
            data.extend_from_slice(&d[off..off + len * inner]);
        }
        let mut shape = s;
        shape[1] = len;
        let out = Tensor::from_vec(&shape, data)?;
        let ng = self.ng(x);
        Ok(self.push(out, Op::SliceChannels { x, start }, ng))
    }

    /// Nearest-neighbour spatial upsampling by an integer factor.
    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4("upsample_nearest")?;
        if factor == 0 {
            return Err(DiffError::Invalid {
                op: "upsample_nearest",
                detail: "factor must be >= 1".into(),
            });
        }
        let (oh, ow) = (h * factor, w * factor);
        let xd = self.value(x).data();
        let mut out = Tensor::zeros(&[n, c, oh, ow]);
        let od = out.data_mut();
        for plane in 0..n * c {
            for oy in 0..oh {
                for ox in 0..ow {
                    od[plane * oh * ow + oy * ow + ox] = xd[plane * h * w + (oy / factor) * w + ox / factor];
                }
            }
        }
        let ng = self.ng(x);
        Ok(self.push(out, Op::Upsample { x, factor }, ng))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape)?;
        let ng = self.ng(x);
        Ok(self.push(t, Op::Reshape(x), ng))
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let t = Tensor::scalar(self.value(x).sum());
        let ng = self.ng(x);
        self.push(t, Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        let s = self.sum(x);
        self.scale(s, S::one() / S::lit(n as f64))
    }

    /// Valid-mode per-plane correlation with a fixed square kernel (row-major, `k×k`).
    pub fn blur_valid(&mut self, x: Var, kernel: &[S], k: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4("blur_valid")?;
        if kernel.len() != k * k || k == 0 || k > h || k > w {
            return Err(shape_err(
                "blur_valid",
                format!("kernel {}x{} on {}x{}", k, k, h, w),
            ));
        }
        let (oh, ow) = (h - k + 1, w - k + 1);
        let mut out = Tensor::zeros(&[n, c, oh, ow]);
        {
            let xd = self.value(x).data();
            let od = out.data_mut();
            for plane in 0..n * c {
                kernels::blur_plane(
                    &xd[plane * h * w..(plane + 1) * h * w],
                    h,
                    w,
                    kernel,
                    k,
                    &mut od[plane * oh * ow..(plane + 1) * oh * ow],
                );
            }
        }
        let ng = self.ng(x);
        Ok(self.push(
            out,
            Op::Blur {
                x,
                kernel: kernel.to_vec(),
                k,
            },
            ng,
        ))
    }

    /// `Σ weight ⊙ H(p, target)` where `H` is binary cross-entropy on probabilities
    /// clipped to `[1e-7, 1 - 1e-7]`.
    pub fn bce_sum(&mut self, p: Var, target: &Tensor<S>, weight: &Tensor<S>) -> Result<Var> {
        same_shape("bce_sum", self.shape(p), target.shape())?;
        same_shape("bce_sum", self.shape(p), weight.shape())?;
        let eps = S::lit(PROB_CLIP);
        let mut acc = S::zero();
        for ((&pv, &t), &w) in self.value(p).data().iter().zip(target.data()).zip(weight.data()) {
            if w == S::zero() {
                continue;
            }
            let q = pv.max(eps).min(S::one() - eps);
            acc += -w * (t * q.ln() + (S::one() - t) * (S::one() - q).ln());
        }
        let ng = self.ng(p);
        Ok(self.push(
            Tensor::scalar(acc),
            Op::Bce {
                p,
                target: target.data().to_vec(),
                weight: weight.data().to_vec(),
            },
            ng,
        ))
    }

    /// `Σ weight ⊙ (x - target)²`
    pub fn weighted_sq_err_sum(&mut self, x: Var, target: &Tensor<S>, weight: &Tensor<S>) -> Result<Var> {
        same_shape("weighted_sq_err_sum", self.shape(x), target.shape())?;
        same_shape("weighted_sq_err_sum", self.shape(x), weight.shape())?;
        let acc = self
            .value(x)
            .data()
            .iter()
            .zip(target.data())
            .zip(weight.data())
            .map(|((&v, &t), &w)| w * (v - t) * (v - t))
            .sum();
        let ng = self.ng(x);
        Ok(self.push(
            Tensor::scalar(acc),
            Op::WeightedSqErr {
                x,
                target: target.data().to_vec(),
                weight: weight.data().to_vec(),
            },
            ng,
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(DiffError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<S>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::ones(lv.shape()));
        let mut leaves: Vec<Option<Tensor<S>>> = vec![None; self.nodes.len()];
        let mut params = Vec::new();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Constant => {}
                Op::Variable => leaves[i] = Some(g),
                Op::Param(id) => {
                    params.push((*id, i));
                    leaves[i] = Some(g);
                }
                op => self.backprop(op, &node.value, &g, &mut grads),
            }
        }
        params.reverse();
        Ok(Gradients { leaves, params })
    }

    /// Convenience: backward pass accumulated straight into the parameter store.
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore<S>) -> Result<()> {
        self.backward(loss)?.accumulate_into(store);
        Ok(())
    }

    fn backprop(&self, op: &Op<S>, out: &Tensor<S>, g: &Tensor<S>, grads: &mut [Option<Tensor<S>>]) {
        let gd = g.data();
        match op {
            Op::Constant | Op::Variable | Op::Param(_) => unreachable!(),
            Op::Conv2d { x, w, b, spec } => self.conv2d_backward(*x, *w, *b, *spec, g, grads),
            Op::Deconv2d { x, w, b, spec } => self.deconv2d_backward(*x, *w, *b, *spec, out, g, grads),
            Op::Linear { x, w, b } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (n, f) = (xv.shape()[0], xv.shape()[1]);
                let o = wv.shape()[0];
                if self.ng(*x) {
                    let gx = grad_slot(grads, *x, xv.shape());
                    kernels::gemm_nn(gd, wv.data(), gx.data_mut(), n, o, f);
                }
                if self.ng(*w) {
                    let gw = grad_slot(grads, *w, wv.shape());
                    kernels::gemm_tn(gd, xv.data(), gw.data_mut(), n, o, f);
                }
                if let Some(b) = b.filter(|b| self.ng(*b)) {
                    let gb = grad_slot(grads, b, &[o]);
                    for row in gd.chunks(o) {
                        for (a, &v) in gb.data_mut().iter_mut().zip(row) {
                            *a += v;
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.ng(v) {
                        grad_slot(grads, v, g.shape()).add_assign(g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.ng(*a) {
                    grad_slot(grads, *a, g.shape()).add_assign(g);
                }
                if self.ng(*b) {
                    let gb = grad_slot(grads, *b, g.shape());
                    for (d, &v) in gb.data_mut().iter_mut().zip(gd) {
                        *d -= v;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.ng(*a) {
                    let ga = grad_slot(grads, *a, g.shape());
                    for ((d, &v), &o) in ga.data_mut().iter_mut().zip(gd).zip(bv) {
                        *d += v * o;
                    }
                }
                if self.ng(*b) {
                    let gb = grad_slot(grads, *b, g.shape());
                    for ((d, &v), &o) in gb.data_mut().iter_mut().zip(gd).zip(av) {
                        *d += v * o;
                    }
                }
            }
            Op::Div(a, b) => {
                let bv = self.value(*b).data();
                if self.ng(*a) {
                    let ga = grad_slot(grads, *a, g.shape());
                    for ((d, &v), &den) in ga.data_mut().iter_mut().zip(gd).zip(bv) {
                        *d += v / den;
                    }
                }
                if self.ng(*b) {
                    let od = out.data();
                    let gb = grad_slot(grads, *b, g.shape());
                    for (((d, &v), &den), &q) in gb.data_mut().iter_mut().zip(gd).zip(bv).zip(od) {
                        *d -= v * q / den;
                    }
                }
            }
            Op::AddBroadcastChannels { base, feat } => {
                if self.ng(*feat) {
                    grad_slot(grads, *feat, g.shape()).add_assign(g);
                }
                if self.ng(*base) {
                    let bs = self.shape(*base).to_vec();
                    let (n, c, h, w) = (g.shape()[0], g.shape()[1], g.shape()[2], g.shape()[3]);
                    let plane = h * w;
                    let gb = grad_slot(grads, *base, &bs);
                    let gbd = gb.data_mut();
                    for ni in 0..n {
                        for ci in 0..c {
                            let off = (ni * c + ci) * plane;
                            for (d, &v) in gbd[ni * plane..(ni + 1) * plane].iter_mut().zip(&gd[off..off + plane]) {
                                *d += v;
                            }
                        }
                    }
                }
            }
            Op::Scale(x, s) => {
                if self.ng(*x) {
                    let gx = grad_slot(grads, *x, g.shape());
                    for (d, &v) in gx.data_mut().iter_mut().zip(gd) {
                        *d += v * *s;
                    }
                }
            }
            Op::AddScalar(x) => {
                if self.ng(*x) {
                    grad_slot(grads, *x, g.shape()).add_assign(g);
                }
            }
            Op::Sigmoid(x) => {
                let od = out.data();
                let gx = grad_slot(grads, *x, g.shape());
                for ((d, &v), &y) in gx.data_mut().iter_mut().zip(gd).zip(od) {
                    *d += v * y * (S::one() - y);
                }
            }
            Op::Tanh(x) => {
                let od = out.data();
                let gx = grad_slot(grads, *x, g.shape());
                for ((d, &v), &y) in gx.data_mut().iter_mut().zip(gd).zip(od) {
                    *d += v * (S::one() - y * y);
                }
            }
            Op::Relu(x) => {
                let xd = self.value(*x).data();
                let gx = grad_slot(grads, *x, g.shape());
                for ((d, &v), &xv) in gx.data_mut().iter_mut().zip(gd).zip(xd) {
                    if xv > S::zero() {
                        *d += v;
                    }
                }
            }
            Op::Concat(parts) => {
                let n = g.shape()[0];
                let total_c = g.shape()[1];
                let inner: usize = g.shape()[2..].iter().product();
                let mut c0 = 0;
                for &p in parts {
                    let ps = self.shape(p).to_vec();
                    let c = ps[1];
                    if self.ng(p) {
                        let gp = grad_slot(grads, p, &ps);
                        let gpd = gp.data_mut();
                        for ni in 0..n {
                            let src = &gd[(ni * total_c + c0) * inner..(ni * total_c + c0 + c) * inner];
                            for (d, &v) in gpd[ni * c * inner..(ni + 1) * c * inner].iter_mut().zip(src) {
                                *d += v;
                            }
                        }
                    }
                    c0 += c;
                }
            }
            Op::SliceChannels { x, start } => {
                let xs = self.shape(*x).to_vec();
                let (n, c) = (xs[0], xs[1]);
                let len = g.shape()[1];
                let inner: usize = xs[2..].iter().product();
                let gx = grad_slot(grads, *x, &xs);
                let gxd = gx.data_mut();
                for ni in 0..n {
                    let off = (ni * c + start) * inner;
                    for (d, &v) in gxd[off..off + len * inner]
                        .iter_mut()
                        .zip(&gd[ni * len * inner..(ni + 1) * len * inner])
                    {
                        *d += v;
                    }
                }
            }
            Op::Upsample { x, factor } => {
                let xs = self.shape(*x).to_vec();
                let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                let (oh, ow) = (h * factor, w * factor);
                let gx = grad_slot(grads, *x, &xs);
                let gxd = gx.data_mut();
                for plane in 0..n * c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            gxd[plane * h * w + (oy / factor) * w + ox / factor] += gd[plane * oh * ow + oy * ow + ox];
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                let xs = self.shape(*x).to_vec();
                let gx = grad_slot(grads, *x, &xs);
                for (d, &v) in gx.data_mut().iter_mut().zip(gd) {
                    *d += v;
                }
            }
            Op::Sum(x) => {
                let xs = self.shape(*x).to_vec();
                let gv = gd[0];
                let gx = grad_slot(grads, *x, &xs);
                gx.data_mut().iter_mut().for_each(|d| *d += gv);
            }
            Op::Blur { x, kernel, k } => {
                let xs = self.shape(*x).to_vec();
                let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                let (oh, ow) = (h - k + 1, w - k + 1);
                let gx = grad_slot(grads, *x, &xs);
                let gxd = gx.data_mut();
                for plane in 0..n * c {
                    kernels::blur_plane_adjoint(
                        &gd[plane * oh * ow..(plane + 1) * oh * ow],
                        h,
                        w,
                        kernel,
                        *k,
                        &mut gxd[plane * h * w..(plane + 1) * h * w],
                    );
                }
            }
            Op::Bce { p, target, weight } => {
                let eps = S::lit(PROB_CLIP);
                let gv = gd[0];
                let pd = self.value(*p).data();
                let ps = self.shape(*p).to_vec();
                let gp = grad_slot(grads, *p, &ps);
                for (((d, &pv), &t), &w) in gp.data_mut().iter_mut().zip(pd).zip(target).zip(weight) {
                    if w == S::zero() || pv <= eps || pv >= S::one() - eps {
                        continue;
                    }
                    *d += gv * w * (-t / pv + (S::one() - t) / (S::one() - pv));
                }
            }
            Op::WeightedSqErr { x, target, weight } => {
                let gv = gd[0];
                let two = S::lit(2.0);
                let xd = self.value(*x).data();
                let xs = self.shape(*x).to_vec();
                let gx = grad_slot(grads, *x, &xs);
                for (((d, &v), &t), &w) in gx.data_mut().iter_mut().zip(xd).zip(target).zip(weight) {
                    *d += gv * two * w * (v - t);
                }
            }
        }
    }

    fn conv2d_backward(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        spec: Conv2dSpec,
        g: &Tensor<S>,
        grads: &mut [Option<Tensor<S>>],
    ) {
        let xv = self.value(x);
        let wv = self.value(w);
        let (n, c, h, wd) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
        let (o, k) = (wv.shape()[0], wv.shape()[2]);
        let (oh, ow) = (g.shape()[2], g.shape()[3]);
        let geom = ConvGeom {
            c,
            h,
            w: wd,
            k,
            stride: spec.stride,
            pad: spec.padding,
            oh,
            ow,
        };
        let (r, p) = (geom.rows(), geom.cols());
        let gd = g.data();
        let mut col = vec![S::zero(); r * p];
        if self.ng(w) {
            let mut gw = vec![S::zero(); o * r];
            for ni in 0..n {
                kernels::im2col(&xv.data()[ni * c * h * wd..(ni + 1) * c * h * wd], &geom, &mut col);
                kernels::gemm_nt(&gd[ni * o * p..(ni + 1) * o * p], &col, &mut gw, o, r, p);
            }
            if self.corrupt_conv_weight_grad {
                gw.iter_mut().for_each(|v| *v *= S::lit(1.01));
            }
            let slot = grad_slot(grads, w, wv.shape());
            for (d, v) in slot.data_mut().iter_mut().zip(gw) {
                *d += v;
            }
        }
        if let Some(b) = b.filter(|b| self.ng(*b)) {
            let gb = grad_slot(grads, b, &[o]);
            let gbd = gb.data_mut();
            for ni in 0..n {
                for (oi, acc) in gbd.iter_mut().enumerate() {
                    *acc += gd[(ni * o + oi) * p..(ni * o + oi + 1) * p].iter().copied().sum();
                }
            }
        }
        if self.ng(x) {
            let gx = grad_slot(grads, x, xv.shape());
            let gxd = gx.data_mut();
            for ni in 0..n {
                col.iter_mut().for_each(|v| *v = S::zero());
                kernels::gemm_tn(wv.data(), &gd[ni * o * p..(ni + 1) * o * p], &mut col, o, r, p);
                kernels::col2im(&col, &geom, &mut gxd[ni * c * h * wd..(ni + 1) * c * h * wd]);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn deconv2d_backward(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        spec: Deconv2dSpec,
        out: &Tensor<S>,
        g: &Tensor<S>,
        grads: &mut [Option<Tensor<S>>],
    ) {
        let xv = self.value(x);
        let wv = self.value(w);
        let (n, c, h, wd) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
        let (o, k) = (wv.shape()[1], wv.shape()[2]);
        let (oh, ow) = (out.shape()[2], out.shape()[3]);
        let geom = ConvGeom {
            c: o,
            h: oh,
            w: ow,
            k,
            stride: spec.stride,
            pad: spec.padding,
            oh: h,
            ow: wd,
        };
        let (r, p) = (geom.rows(), geom.cols());
        let plane = oh * ow;
        let gd = g.data();
        let mut gcol = vec![S::zero(); r * p];
        let mut gw = if self.ng(w) { Some(vec![S::zero(); c * r]) } else { None };
        let mut gx = if self.ng(x) { Some(vec![S::zero(); xv.len()]) } else { None };
        if gw.is_some() || gx.is_some() {
            for ni in 0..n {
                kernels::im2col(&gd[ni * o * plane..(ni + 1) * o * plane], &geom, &mut gcol);
                if let Some(gx) = gx.as_mut() {
                    kernels::gemm_nn(wv.data(), &gcol, &mut gx[ni * c * p..(ni + 1) * c * p], c, r, p);
                }
                if let Some(gw) = gw.as_mut() {
                    kernels::gemm_nt(&xv.data()[ni * c * p..(ni + 1) * c * p], &gcol, gw, c, r, p);
                }
            }
        }
        if let Some(mut gw) = gw {
            if self.corrupt_conv_weight_grad {
                gw.iter_mut().for_each(|v| *v *= S::lit(1.01));
            }
            let slot = grad_slot(grads, w, wv.shape());
            for (d, v) in slot.data_mut().iter_mut().zip(gw) {
                *d += v;
            }
        }
        if let Some(gx) = gx {
            let slot = grad_slot(grads, x, xv.shape());
            for (d, v) in slot.data_mut().iter_mut().zip(gx) {
                *d += v;
            }
        }
        if let Some(b) = b.filter(|b| self.ng(*b)) {
            let gb = grad_slot(grads, b, &[o]);
            let gbd = gb.data_mut();
            for ni in 0..n {
                for (oi, acc) in gbd.iter_mut().enumerate() {
                    *acc += gd[(ni * o + oi) * plane..(ni * o + oi + 1) * plane].iter().copied().sum();
                }
            }
        }
    }
}
