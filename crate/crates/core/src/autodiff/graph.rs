//! Tape of recorded ops and the reverse pass over it.
//!
//! Nodes are appended in execution order, so the tape is already a
//! topological order; backward walks it back to front exactly once.

use alloc::collections::BTreeMap;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use super::kernels::{self, ConvGeom};
use super::param::{ParamId, ParameterStore};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// GELU tanh-approximation constant, sqrt(2/pi).
pub const GELU_K: f64 = 0.7978845608;
const GELU_C: f64 = 0.044715;
pub const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(pub(crate) usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Gelu,
    Sigmoid,
}

impl Activation {
    pub fn apply<T: Real>(self, x: T) -> T {
        match self {
            Activation::Relu => x.max(T::zero()),
            Activation::Sigmoid => sigmoid(x),
            Activation::Gelu => {
                let t = (T::of(GELU_K) * (x + T::of(GELU_C) * x * x * x)).tanh();
                T::of(0.5) * x * (T::one() + t)
            }
        }
    }

    pub fn derivative<T: Real>(self, x: T) -> T {
        match self {
            Activation::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Sigmoid => {
                let s = sigmoid(x);
                s * (T::one() - s)
            }
            Activation::Gelu => {
                let k = T::of(GELU_K);
                let c = T::of(GELU_C);
                let t = (k * (x + c * x * x * x)).tanh();
                let half = T::of(0.5);
                half * (T::one() + t)
                    + half * x * (T::one() - t * t) * k * (T::one() + T::of(3.0) * c * x * x)
            }
        }
    }
}

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `log(1 + exp(x))` without overflow.
#[inline]
pub fn softplus<T: Real>(x: T) -> T {
    if x > T::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvSpec {
    pub const fn same(k: usize) -> Self {
        Self {
            stride: 1,
            padding: k / 2,
            groups: 1,
        }
    }
}

/// Precomputed bilinear resampling: output cell `out` reads `weight * input[src]`.
#[derive(Clone, Debug, PartialEq)]
pub struct WarpTable {
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub taps: Vec<WarpTap>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WarpTap {
    pub out: u32,
    pub src: u32,
    pub weight: f64,
}

enum Op<T> {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `[C,H,W] * [1,H,W]`, the map broadcast over channels.
    MulMap(Var, Var),
    Scale(Var, T),
    Act(Activation, Var),
    SoftmaxAgents(Vec<Var>),
    Select(Var, usize),
    Upsample2x(Var),
    AvgPool2(Var),
    Concat(Vec<Var>),
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Sum(Var),
    Combine(Vec<(Var, f64)>),
    Materialize {
        a: Var,
        b: Var,
        d: Var,
    },
    Warp {
        x: Var,
        table: Arc<WarpTable>,
    },
    Focal {
        logits: Var,
        targets: Vec<T>,
        alpha: T,
        gamma: T,
        norm: T,
    },
    SmoothL1 {
        pred: Var,
        target: Vec<T>,
        mask: Vec<bool>,
        beta: T,
        norm: T,
    },
    DirCe {
        logits: Var,
        bins: Vec<u8>,
        mask: Vec<bool>,
        norm: T,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Per-node gradients produced by [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<Tensor<T>> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(&self.shapes[v.0], g.clone()).expect("shape recorded"))
    }
}

pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
    params: BTreeMap<ParamId, Var>,
    consumed: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::ShapeMismatch {
            op,
            expected: a.to_vec(),
            found: b.to_vec(),
        });
    }
    Ok(())
}

fn add_into<T: Real>(slot: &mut Option<Vec<T>>, g: Vec<T>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        None => *slot = Some(g),
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: BTreeMap::new(),
            consumed: false,
        }
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(
        &mut self,
        name: &'static str,
        value: Tensor<T>,
        op: Op<T>,
        requires_grad: bool,
    ) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Constant input; no gradient is tracked.
    pub fn input(&mut self, t: Tensor<T>) -> Result<Var> {
        self.push("input", t, Op::Leaf, false)
    }

    /// Input leaf whose gradient is reported by [`Gradients::get`].
    pub fn input_with_grad(&mut self, t: Tensor<T>) -> Result<Var> {
        self.push("input", t, Op::Leaf, true)
    }

    /// Leaf for a stored parameter. Frozen parameters enter without gradient
    /// tracking, so no gradient is ever computed for them.
    pub fn param(&mut self, store: &ParameterStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let p = store.get(id);
        self.nodes.push(Node {
            value: p.tensor.clone(),
            op: Op::Leaf,
            requires_grad: !p.frozen,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id, v);
        v
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let (ci, h, wd) = self.value(x).dims3()?;
        let ws = self.value(w).shape().to_vec();
        let [co, cig, kh, kw] = ws[..] else {
            return Err(Error::RankMismatch {
                expected: 4,
                found: ws.len(),
            });
        };
        if spec.groups == 0
            || ci % spec.groups != 0
            || co % spec.groups != 0
            || cig != ci / spec.groups
        {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                expected: vec![co, ci / spec.groups.max(1), kh, kw],
                found: ws,
            });
        }
        if kh % 2 == 0 || kw % 2 == 0 || !(1..=2).contains(&spec.stride) {
            return Err(Error::Precondition(alloc::format!(
                "conv2d needs odd kernels and stride 1 or 2, got {kh}x{kw} stride {}",
                spec.stride
            )));
        }
        if h + 2 * spec.padding < kh || wd + 2 * spec.padding < kw {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                expected: vec![kh, kw],
                found: vec![h, wd],
            });
        }
        if let Some(b) = b {
            same_shape("conv2d bias", &[co], self.value(b).shape())?;
        }
        let geom = ConvGeom {
            in_c: ci,
            in_h: h,
            in_w: wd,
            out_c: co,
            k_h: kh,
            k_w: kw,
            stride: spec.stride,
            padding: spec.padding,
            groups: spec.groups,
        };
        let out = kernels::conv_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &geom,
        );
        let value = Tensor::new(&[co, geom.out_h(), geom.out_w()], out)?;
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        self.push("conv2d", value, Op::Conv { x, w, b, geom }, rg)
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
    ) -> Result<(Tensor<T>, bool)> {
        same_shape(name, self.value(a).shape(), self.value(b).shape())?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok((Tensor::new(self.value(a).shape(), data)?, self.rg(&[a, b])))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (v, rg) = self.binary("add", a, b, |x, y| x + y)?;
        self.push("add", v, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (v, rg) = self.binary("sub", a, b, |x, y| x - y)?;
        self.push("sub", v, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (v, rg) = self.binary("mul", a, b, |x, y| x * y)?;
        self.push("mul", v, Op::Mul(a, b), rg)
    }

    /// Multiplies every channel of `x: [C,H,W]` by `map: [1,H,W]`.
    pub fn mul_map(&mut self, x: Var, map: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).dims3()?;
        same_shape("mul_map", &[1, h, w], self.value(map).shape())?;
        let m = self.value(map).data();
        let mut out = self.value(x).data().to_vec();
        for ch in 0..c {
            for (o, &mv) in out[ch * h * w..(ch + 1) * h * w].iter_mut().zip(m) {
                *o = *o * mv;
            }
        }
        let rg = self.rg(&[x, map]);
        self.push(
            "mul_map",
            Tensor::new(&[c, h, w], out)?,
            Op::MulMap(x, map),
            rg,
        )
    }

    pub fn scale(&mut self, x: Var, s: T) -> Result<Var> {
        let v = self.value(x);
        let out = Tensor::new(v.shape(), v.data().iter().map(|&a| a * s).collect())?;
        let rg = self.rg(&[x]);
        self.push("scale", out, Op::Scale(x, s), rg)
    }

    pub fn activation(&mut self, kind: Activation, x: Var) -> Result<Var> {
        let v = self.value(x);
        let out = Tensor::new(v.shape(), v.data().iter().map(|&a| kind.apply(a)).collect())?;
        let rg = self.rg(&[x]);
        self.push("activation", out, Op::Act(kind, x), rg)
    }

    /// Softmax across agents at every cell; returns one weight map per input,
    /// in input order. Accumulation follows input order.
    pub fn softmax_over_agents(&mut self, logits: &[Var]) -> Result<Vec<Var>> {
        let first = *logits.first().ok_or(Error::Empty("softmax_over_agents"))?;
        let shape = self.value(first).shape().to_vec();
        for &l in logits {
            same_shape("softmax_over_agents", &shape, self.value(l).shape())?;
        }
        let n = logits.len();
        let m = self.value(first).numel();
        let mut out = vec![T::zero(); n * m];
        for j in 0..m {
            let mut mx = T::neg_infinity();
            for &l in logits {
                mx = mx.max(self.value(l).data()[j]);
            }
            let mut s = T::zero();
            for (i, &l) in logits.iter().enumerate() {
                let e = (self.value(l).data()[j] - mx).exp();
                out[i * m + j] = e;
                s += e;
            }
            for i in 0..n {
                out[i * m + j] = out[i * m + j] / s;
            }
        }
        let mut stacked_shape = vec![n];
        stacked_shape.extend_from_slice(&shape);
        let rg = self.rg(logits);
        let stacked = self.push(
            "softmax_over_agents",
            Tensor::new(&stacked_shape, out)?,
            Op::SoftmaxAgents(logits.to_vec()),
            rg,
        )?;
        (0..n).map(|i| self.select(stacked, i)).collect()
    }

    /// Slice `index` along the leading axis.
    pub fn select(&mut self, src: Var, index: usize) -> Result<Var> {
        let shape = self.value(src).shape().to_vec();
        if shape.len() < 2 || index >= shape[0] {
            return Err(Error::ShapeMismatch {
                op: "select",
                expected: vec![index + 1],
                found: shape,
            });
        }
        let m: usize = shape[1..].iter().product();
        let data = self.value(src).data()[index * m..(index + 1) * m].to_vec();
        let rg = self.rg(&[src]);
        self.push(
            "select",
            Tensor::new(&shape[1..], data)?,
            Op::Select(src, index),
            rg,
        )
    }

    pub fn upsample_nearest2x(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).dims3()?;
        let src = self.value(x).data();
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = vec![T::zero(); c * oh * ow];
        for ch in 0..c {
            for y in 0..oh {
                let row_in = &src[(ch * h + y / 2) * w..(ch * h + y / 2 + 1) * w];
                let row_out = &mut out[(ch * oh + y) * ow..(ch * oh + y + 1) * ow];
                for (x2, o) in row_out.iter_mut().enumerate() {
                    *o = row_in[x2 / 2];
                }
            }
        }
        let rg = self.rg(&[x]);
        self.push(
            "upsample_nearest2x",
            Tensor::new(&[c, oh, ow], out)?,
            Op::Upsample2x(x),
            rg,
        )
    }

    /// 2x2 stride-2 average pooling.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).dims3()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::ShapeMismatch {
                op: "avg_pool2",
                expected: vec![c, h + h % 2, w + w % 2],
                found: vec![c, h, w],
            });
        }
        let src = self.value(x).data();
        let (oh, ow) = (h / 2, w / 2);
        let q = T::of(0.25);
        let out = (0..c * oh * ow)
            .map(|i| {
                let (ch, r) = (i / (oh * ow), i % (oh * ow));
                let (y, xx) = (2 * (r / ow), 2 * (r % ow));
                let at = |dy: usize, dx: usize| src[(ch * h + y + dy) * w + xx + dx];
                (at(0, 0) + at(0, 1) + at(1, 0) + at(1, 1)) * q
            })
            .collect();
        let rg = self.rg(&[x]);
        self.push(
            "avg_pool2",
            Tensor::new(&[c, oh, ow], out)?,
            Op::AvgPool2(x),
            rg,
        )
    }

    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or(Error::Empty("concat_channels"))?;
        let (_, h, w) = self.value(first).dims3()?;
        let mut total = 0;
        let mut out = Vec::new();
        for &x in xs {
            let (c, hh, ww) = self.value(x).dims3()?;
            same_shape("concat_channels", &[h, w], &[hh, ww])?;
            total += c;
            out.extend_from_slice(self.value(x).data());
        }
        let rg = self.rg(xs);
        self.push(
            "concat_channels",
            Tensor::new(&[total, h, w], out)?,
            Op::Concat(xs.to_vec()),
            rg,
        )
    }

    pub fn group_norm(&mut self, x: Var, groups: usize, gamma: Var, beta: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).dims3()?;
        if groups == 0 || c % groups != 0 {
            return Err(Error::Precondition(alloc::format!(
                "group_norm: {c} channels not divisible by {groups} groups"
            )));
        }
        same_shape("group_norm gamma", &[c], self.value(gamma).shape())?;
        same_shape("group_norm beta", &[c], self.value(beta).shape())?;
        let per = (c / groups) * h * w;
        let src = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![T::zero(); src.len()];
        let mut rstd = vec![T::zero(); groups];
        let mut out = vec![T::zero(); src.len()];
        for gi in 0..groups {
            let seg = &src[gi * per..(gi + 1) * per];
            let mean = seg.iter().map(|v| v.f64()).sum::<f64>() / per as f64;
            let var = seg
                .iter()
                .map(|v| (v.f64() - mean) * (v.f64() - mean))
                .sum::<f64>()
                / per as f64;
            let r = 1.0 / <f64 as num_traits::Float>::sqrt(var + NORM_EPS);
            rstd[gi] = T::of(r);
            for k in 0..per {
                let i = gi * per + k;
                let xn = T::of((src[i].f64() - mean) * r);
                xhat[i] = xn;
                let ch = i / (h * w);
                out[i] = g[ch] * xn + b[ch];
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        self.push(
            "group_norm",
            Tensor::new(&[c, h, w], out)?,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                xhat,
                rstd,
            },
            rg,
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().map(|v| v.f64()).sum::<f64>();
        let rg = self.rg(&[x]);
        self.push("sum", Tensor::scalar(T::of(s)), Op::Sum(x), rg)
    }

    /// `sum_i coef_i * v_i` over same-shaped inputs, accumulated in f64.
    pub fn combine(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let (first, _) = *terms.first().ok_or(Error::Empty("combine"))?;
        let shape = self.value(first).shape().to_vec();
        let mut acc = vec![0.0f64; self.value(first).numel()];
        for &(v, c) in terms {
            same_shape("combine", &shape, self.value(v).shape())?;
            for (a, x) in acc.iter_mut().zip(self.value(v).data()) {
                *a += c * x.f64();
            }
        }
        let vars: Vec<Var> = terms.iter().map(|t| t.0).collect();
        let rg = self.rg(&vars);
        let value = Tensor::new(&shape, acc.into_iter().map(T::of).collect())?;
        self.push("combine", value, Op::Combine(terms.to_vec()), rg)
    }

    /// `P[c,h,w] = sum_r A[r,c] * B[r,h] * D[r,w]`.
    pub fn materialize(&mut self, a: Var, b: Var, d: Var) -> Result<Var> {
        let (sa, sb, sd) = (
            self.value(a).shape(),
            self.value(b).shape(),
            self.value(d).shape(),
        );
        let (&[r, c], &[rb, h], &[rd, w]) = (sa, sb, sd) else {
            return Err(Error::RankMismatch {
                expected: 2,
                found: sa.len().max(sb.len()).max(sd.len()),
            });
        };
        if rb != r || rd != r {
            return Err(Error::ShapeMismatch {
                op: "materialize",
                expected: vec![r, r, r],
                found: vec![r, rb, rd],
            });
        }
        let (av, bv, dv) = (
            self.value(a).data(),
            self.value(b).data(),
            self.value(d).data(),
        );
        let mut out = vec![T::zero(); c * h * w];
        let mut bd = vec![T::zero(); h * w];
        for ri in 0..r {
            for y in 0..h {
                for x in 0..w {
                    bd[y * w + x] = bv[ri * h + y] * dv[ri * w + x];
                }
            }
            for ch in 0..c {
                let ac = av[ri * c + ch];
                for (o, &m) in out[ch * h * w..(ch + 1) * h * w].iter_mut().zip(&bd) {
                    *o += ac * m;
                }
            }
        }
        let rg = self.rg(&[a, b, d]);
        self.push(
            "materialize",
            Tensor::new(&[c, h, w], out)?,
            Op::Materialize { a, b, d },
            rg,
        )
    }

    pub fn warp(&mut self, x: Var, table: Arc<WarpTable>) -> Result<Var> {
        let (c, h, w) = self.value(x).dims3()?;
        same_shape("warp", &[table.in_h, table.in_w], &[h, w])?;
        let (oh, ow) = (table.out_h, table.out_w);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); c * oh * ow];
        for ch in 0..c {
            let (sp, op) = (
                &src[ch * h * w..(ch + 1) * h * w],
                &mut out[ch * oh * ow..(ch + 1) * oh * ow],
            );
            for t in &table.taps {
                op[t.out as usize] += T::of(t.weight) * sp[t.src as usize];
            }
        }
        let rg = self.rg(&[x]);
        self.push(
            "warp",
            Tensor::new(&[c, oh, ow], out)?,
            Op::Warp { x, table },
            rg,
        )
    }

    /// Sigmoid focal loss summed over cells and divided by `norm`.
    pub fn focal_loss(
        &mut self,
        logits: Var,
        targets: &Tensor<T>,
        alpha: T,
        gamma: T,
        norm: T,
    ) -> Result<Var> {
        same_shape("focal_loss", self.value(logits).shape(), targets.shape())?;
        let mut total = 0.0f64;
        for (&z, &y) in self.value(logits).data().iter().zip(targets.data()) {
            total += focal_term(z, y, alpha, gamma).f64();
        }
        let rg = self.rg(&[logits]);
        let value = Tensor::scalar(T::of(total / norm.f64()));
        self.push(
            "focal_loss",
            value,
            Op::Focal {
                logits,
                targets: targets.data().to_vec(),
                alpha,
                gamma,
                norm,
            },
            rg,
        )
    }

    /// Smooth-L1 summed over masked cells (all channels) divided by `norm`.
    pub fn smooth_l1(
        &mut self,
        pred: Var,
        target: &Tensor<T>,
        mask: &[bool],
        beta: T,
        norm: T,
    ) -> Result<Var> {
        let (k, h, w) = self.value(pred).dims3()?;
        same_shape("smooth_l1", &[k, h, w], target.shape())?;
        same_shape("smooth_l1 mask", &[h * w], &[mask.len()])?;
        let p = self.value(pred).data();
        let mut total = 0.0f64;
        for ch in 0..k {
            for (cell, &m) in mask.iter().enumerate() {
                if m {
                    let i = ch * h * w + cell;
                    total += smooth_l1_term(p[i] - target.data()[i], beta).f64();
                }
            }
        }
        let rg = self.rg(&[pred]);
        let value = Tensor::scalar(T::of(total / norm.f64()));
        self.push(
            "smooth_l1",
            value,
            Op::SmoothL1 {
                pred,
                target: target.data().to_vec(),
                mask: mask.to_vec(),
                beta,
                norm,
            },
            rg,
        )
    }

    /// Two-class softmax cross-entropy over masked cells divided by `norm`.
    pub fn direction_ce(
        &mut self,
        logits: Var,
        bins: &[u8],
        mask: &[bool],
        norm: T,
    ) -> Result<Var> {
        let (k, h, w) = self.value(logits).dims3()?;
        same_shape(
            "direction_ce",
            &[2, h * w, h * w],
            &[k, bins.len(), mask.len()],
        )?;
        let l = self.value(logits).data();
        let mut total = 0.0f64;
        for cell in 0..h * w {
            if mask[cell] {
                let (z0, z1) = (l[cell], l[h * w + cell]);
                let (zt, zo) = if bins[cell] == 1 { (z1, z0) } else { (z0, z1) };
                total += softplus(zo - zt).f64();
            }
        }
        let rg = self.rg(&[logits]);
        let value = Tensor::scalar(T::of(total / norm.f64()));
        self.push(
            "direction_ce",
            value,
            Op::DirCe {
                logits,
                bins: bins.to_vec(),
                mask: mask.to_vec(),
                norm,
            },
            rg,
        )
    }

    /// Reverse pass from the scalar `loss`. Parameter gradients are added to
    /// `store` (trainable parameters only); leaf gradients are returned.
    pub fn backward(&mut self, loss: Var, store: &mut ParameterStore<T>) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(Error::GraphConsumed);
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::NonScalarLoss(self.value(loss).shape().to_vec()));
        }
        self.consumed = true;
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<T>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.backprop_node(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        for (&id, &v) in &self.params {
            if !self.nodes[v.0].requires_grad {
                continue;
            }
            // Parameters used in the forward pass but cut off from the loss get an explicit zero.
            match &grads[v.0] {
                Some(g) => store.accumulate_grad(id, g)?,
                None => {
                    store.accumulate_grad(id, &vec![T::zero(); self.nodes[v.0].value.numel()])?
                }
            }
        }
        let shapes = self
            .nodes
            .iter()
            .map(|n| n.value.shape().to_vec())
            .collect();
        Ok(Gradients { grads, shapes })
    }

    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        let want = |v: Var| self.nodes[v.0].requires_grad;
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv { x, w, b, geom } => {
                if want(*x) {
                    add_into(
                        &mut grads[x.0],
                        kernels::conv_backward_input(g, val(*w), geom),
                    );
                }
                let bw = b.is_some_and(want);
                if want(*w) || bw {
                    let (dw, db) = kernels::conv_backward_weight(g, val(*x), geom);
                    if want(*w) {
                        add_into(&mut grads[w.0], dw);
                    }
                    if let (Some(b), true) = (b, bw) {
                        add_into(&mut grads[b.0], db);
                    }
                }
            }
            Op::Add(a, b) => {
                if want(*a) {
                    add_into(&mut grads[a.0], g.to_vec());
                }
                if want(*b) {
                    add_into(&mut grads[b.0], g.to_vec());
                }
            }
            Op::Sub(a, b) => {
                if want(*a) {
                    add_into(&mut grads[a.0], g.to_vec());
                }
                if want(*b) {
                    add_into(&mut grads[b.0], g.iter().map(|&v| -v).collect());
                }
            }
            Op::Mul(a, b) => {
                if want(*a) {
                    add_into(
                        &mut grads[a.0],
                        g.iter().zip(val(*b)).map(|(&gv, &bv)| gv * bv).collect(),
                    );
                }
                if want(*b) {
                    add_into(
                        &mut grads[b.0],
                        g.iter().zip(val(*a)).map(|(&gv, &av)| gv * av).collect(),
                    );
                }
            }
            Op::MulMap(x, map) => {
                let m = val(*map);
                let hw = m.len();
                if want(*x) {
                    add_into(
                        &mut grads[x.0],
                        g.iter()
                            .enumerate()
                            .map(|(k, &gv)| gv * m[k % hw])
                            .collect(),
                    );
                }
                if want(*map) {
                    let xv = val(*x);
                    let mut dm = vec![T::zero(); hw];
                    for (k, (&gv, &xx)) in g.iter().zip(xv).enumerate() {
                        dm[k % hw] += gv * xx;
                    }
                    add_into(&mut grads[map.0], dm);
                }
            }
            Op::Scale(x, s) => {
                add_into(&mut grads[x.0], g.iter().map(|&v| v * *s).collect());
            }
            Op::Act(kind, x) => {
                let xv = val(*x);
                add_into(
                    &mut grads[x.0],
                    g.iter()
                        .zip(xv)
                        .map(|(&gv, &a)| gv * kind.derivative(a))
                        .collect(),
                );
            }
            Op::SoftmaxAgents(inputs) => {
                let y = node.value.data();
                let m = y.len() / inputs.len();
                let mut dots = vec![T::zero(); m];
                for (k, (&gv, &yv)) in g.iter().zip(y).enumerate() {
                    dots[k % m] += gv * yv;
                }
                for (idx, inp) in inputs.iter().enumerate() {
                    if want(*inp) {
                        let d = (0..m)
                            .map(|j| y[idx * m + j] * (g[idx * m + j] - dots[j]))
                            .collect();
                        add_into(&mut grads[inp.0], d);
                    }
                }
            }
            Op::Select(src, index) => {
                let total = self.nodes[src.0].value.numel();
                let mut d = vec![T::zero(); total];
                d[index * g.len()..(index + 1) * g.len()].copy_from_slice(g);
                add_into(&mut grads[src.0], d);
            }
            Op::Upsample2x(x) => {
                let (c, h, w) = self.nodes[x.0].value.dims3()?;
                let ow = 2 * w;
                let mut d = vec![T::zero(); c * h * w];
                for ch in 0..c {
                    for y in 0..2 * h {
                        for x2 in 0..ow {
                            d[(ch * h + y / 2) * w + x2 / 2] += g[(ch * 2 * h + y) * ow + x2];
                        }
                    }
                }
                add_into(&mut grads[x.0], d);
            }
            Op::AvgPool2(x) => {
                let (c, h, w) = self.nodes[x.0].value.dims3()?;
                let ow = w / 2;
                let q = T::of(0.25);
                let d = (0..c * h * w)
                    .map(|k| {
                        let (ch, r) = (k / (h * w), k % (h * w));
                        g[(ch * (h / 2) + (r / w) / 2) * ow + (r % w) / 2] * q
                    })
                    .collect();
                add_into(&mut grads[x.0], d);
            }
            Op::Concat(xs) => {
                let mut off = 0;
                for x in xs {
                    let n = self.nodes[x.0].value.numel();
                    if want(*x) {
                        add_into(&mut grads[x.0], g[off..off + n].to_vec());
                    }
                    off += n;
                }
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                xhat,
                rstd,
            } => {
                let (c, h, w) = self.nodes[x.0].value.dims3()?;
                let hw = h * w;
                if want(*gamma) {
                    let mut dg = vec![T::zero(); c];
                    for (k, (&gv, &xn)) in g.iter().zip(xhat).enumerate() {
                        dg[k / hw] += gv * xn;
                    }
                    add_into(&mut grads[gamma.0], dg);
                }
                if want(*beta) {
                    let mut db = vec![T::zero(); c];
                    for (k, &gv) in g.iter().enumerate() {
                        db[k / hw] += gv;
                    }
                    add_into(&mut grads[beta.0], db);
                }
                if want(*x) {
                    let gam = val(*gamma);
                    let per = (c / groups) * hw;
                    let mut dx = vec![T::zero(); c * hw];
                    for gi in 0..*groups {
                        let (mut s1, mut s2) = (0.0f64, 0.0f64);
                        for k in gi * per..(gi + 1) * per {
                            let dxh = (g[k] * gam[k / hw]).f64();
                            s1 += dxh;
                            s2 += dxh * xhat[k].f64();
                        }
                        let (m1, m2) = (s1 / per as f64, s2 / per as f64);
                        let r = rstd[gi].f64();
                        for k in gi * per..(gi + 1) * per {
                            let dxh = (g[k] * gam[k / hw]).f64();
                            dx[k] = T::of(r * (dxh - m1 - xhat[k].f64() * m2));
                        }
                    }
                    add_into(&mut grads[x.0], dx);
                }
            }
            Op::Sum(x) => {
                let n = self.nodes[x.0].value.numel();
                add_into(&mut grads[x.0], vec![g[0]; n]);
            }
            Op::Combine(terms) => {
                for &(v, c) in terms {
                    if want(v) {
                        let cv = T::of(c);
                        add_into(&mut grads[v.0], g.iter().map(|&x| x * cv).collect());
                    }
                }
            }
            Op::Materialize { a, b, d } => {
                let (av, bv, dv) = (val(*a), val(*b), val(*d));
                let (r, c) = (
                    self.nodes[a.0].value.shape()[0],
                    self.nodes[a.0].value.shape()[1],
                );
                let h = self.nodes[b.0].value.shape()[1];
                let w = self.nodes[d.0].value.shape()[1];
                let (mut da, mut db, mut dd) = (
                    vec![T::zero(); r * c],
                    vec![T::zero(); r * h],
                    vec![T::zero(); r * w],
                );
                // gsum[h,w] = sum_c G[c,h,w] * A[r,c]
                let mut gsum = vec![T::zero(); h * w];
                for ri in 0..r {
                    gsum.iter_mut().for_each(|v| *v = T::zero());
                    for ch in 0..c {
                        let ac = av[ri * c + ch];
                        let plane = &g[ch * h * w..(ch + 1) * h * w];
                        let mut acc = T::zero();
                        for y in 0..h {
                            let by = bv[ri * h + y];
                            for x in 0..w {
                                let gv = plane[y * w + x];
                                acc += gv * by * dv[ri * w + x];
                                gsum[y * w + x] += gv * ac;
                            }
                        }
                        da[ri * c + ch] = acc;
                    }
                    for y in 0..h {
                        for x in 0..w {
                            let s = gsum[y * w + x];
                            db[ri * h + y] += s * dv[ri * w + x];
                            dd[ri * w + x] += s * bv[ri * h + y];
                        }
                    }
                }
                if want(*a) {
                    add_into(&mut grads[a.0], da);
                }
                if want(*b) {
                    add_into(&mut grads[b.0], db);
                }
                if want(*d) {
                    add_into(&mut grads[d.0], dd);
                }
            }
            Op::Warp { x, table } => {
                let (c, h, w) = self.nodes[x.0].value.dims3()?;
                let ohw = table.out_h * table.out_w;
                let mut dx = vec![T::zero(); c * h * w];
                for ch in 0..c {
                    let (dp, gp) = (
                        &mut dx[ch * h * w..(ch + 1) * h * w],
                        &g[ch * ohw..(ch + 1) * ohw],
                    );
                    for t in &table.taps {
                        dp[t.src as usize] += T::of(t.weight) * gp[t.out as usize];
                    }
                }
                add_into(&mut grads[x.0], dx);
            }
            Op::Focal {
                logits,
                targets,
                alpha,
                gamma,
                norm,
            } => {
                let scale = g[0] / *norm;
                let d = val(*logits)
                    .iter()
                    .zip(targets)
                    .map(|(&z, &y)| focal_grad(z, y, *alpha, *gamma) * scale)
                    .collect();
                add_into(&mut grads[logits.0], d);
            }
            Op::SmoothL1 {
                pred,
                target,
                mask,
                beta,
                norm,
            } => {
                let scale = g[0] / *norm;
                let p = val(*pred);
                let hw = mask.len();
                let d = p
                    .iter()
                    .zip(target)
                    .enumerate()
                    .map(|(k, (&pv, &tv))| {
                        if mask[k % hw] {
                            smooth_l1_grad(pv - tv, *beta) * scale
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                add_into(&mut grads[pred.0], d);
            }
            Op::DirCe {
                logits,
                bins,
                mask,
                norm,
            } => {
                let scale = g[0] / *norm;
                let l = val(*logits);
                let hw = mask.len();
                let mut d = vec![T::zero(); 2 * hw];
                for cell in 0..hw {
                    if mask[cell] {
                        let p1 = sigmoid(l[hw + cell] - l[cell]);
                        let y1 = if bins[cell] == 1 { T::one() } else { T::zero() };
                        d[hw + cell] = (p1 - y1) * scale;
                        d[cell] = (y1 - p1) * scale;
                    }
                }
                add_into(&mut grads[logits.0], d);
            }
        }
        Ok(())
    }
}

/// Per-cell sigmoid focal loss `-alpha_t (1 - p_t)^gamma log p_t`.
pub fn focal_term<T: Real>(z: T, y: T, alpha: T, gamma: T) -> T {
    let p = sigmoid(z);
    if y > T::of(0.5) {
        alpha * (T::one() - p).powf(gamma) * softplus(-z)
    } else {
        (T::one() - alpha) * p.powf(gamma) * softplus(z)
    }
}

fn focal_grad<T: Real>(z: T, y: T, alpha: T, gamma: T) -> T {
    let p = sigmoid(z);
    let q = T::one() - p;
    if y > T::of(0.5) {
        // d/dz of alpha q^g softplus(-z) = alpha [ -g q^g p softplus(-z) - q^(g+1) ]
        alpha * (-gamma * q.powf(gamma) * p * softplus(-z) - q.powf(gamma + T::one()))
    } else {
        (T::one() - alpha) * (gamma * p.powf(gamma) * q * softplus(z) + p.powf(gamma + T::one()))
    }
}

pub fn smooth_l1_term<T: Real>(d: T, beta: T) -> T {
    let a = d.abs();
    if a < beta {
        T::of(0.5) * d * d / beta
    } else {
        a - T::of(0.5) * beta
    }
}

fn smooth_l1_grad<T: Real>(d: T, beta: T) -> T {
    if d.abs() < beta {
        d / beta
    } else {
        d.signum()
    }
}
