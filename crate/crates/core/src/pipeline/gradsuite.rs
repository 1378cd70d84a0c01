//! Finite-difference checks over every graph op and over a small stage-2
//! forward pass.

use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{
    grad_check, relative_error, Activation, ConvSpec, Graph, ParamId, ParameterStore, Var,
};
use crate::config::{EncoderSpec, ExperimentConfig, GridConfig, PoseSpec, PyramidConfig};
use crate::error::Result;
use crate::geometry::AgentPose;
use crate::scene::{mix_seed, rng_from, warp_table};
use crate::tensor::{Real, Tensor};

use super::data::{generate_sample, hetero_agents, prepare, Split};
use super::model::{Model, PromptInit};
use super::plan::StagePlan;

/// Step for per-op checks, run in f64.
pub const OP_EPS: f64 = 1e-6;
/// Elementwise bound for per-op checks.
pub const OP_TOL: f64 = 1e-3;
/// Bound for the end-to-end check.
pub const E2E_TOL: f64 = 1e-2;

#[derive(Clone, Debug, PartialEq)]
pub struct OpCheck {
    pub op: String,
    pub max_rel_error: f64,
}

/// Values bounded away from zero so ReLU kinks stay outside the probe step.
fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let v: f64 = rng.sample(StandardNormal);
        if v.abs() < 0.05 {
            v.signum() * 0.05 + v
        } else {
            v
        }
    })
}

/// Scalar `sum(y * r)` for a fixed random `r`, so every output element
/// carries a distinct upstream gradient.
fn project(g: &mut Graph<f64>, y: Var, r: &Tensor<f64>) -> Result<Var> {
    let rv = g.input(r.clone())?;
    let m = g.mul(y, rv)?;
    g.sum(m)
}

/// Checks one op: `f` maps the probed input to an output tensor.
fn check<F>(
    rng: &mut ChaCha8Rng,
    name: &str,
    x: Tensor<f64>,
    out_shape: &[usize],
    mut f: F,
) -> Result<OpCheck>
where
    F: FnMut(&mut Graph<f64>, Var) -> Result<Var>,
{
    let r = rand_t(rng, out_shape);
    let e = grad_check(&x, OP_EPS, |g, v| {
        let y = f(g, v)?;
        project(g, y, &r)
    })?;
    Ok(OpCheck {
        op: name.into(),
        max_rel_error: e,
    })
}

/// Checks a scalar-valued op directly.
fn check_scalar<F>(name: &str, x: Tensor<f64>, f: F) -> Result<OpCheck>
where
    F: FnMut(&mut Graph<f64>, Var) -> Result<Var>,
{
    Ok(OpCheck {
        op: name.into(),
        max_rel_error: grad_check(&x, OP_EPS, f)?,
    })
}

/// Per-op checks in f64 for every differentiable op, each operand separately.
pub fn op_checks(seed: u64) -> Result<Vec<OpCheck>> {
    let mut rng = rng_from(mix_seed(seed, 0x6AD));
    let rng = &mut rng;
    let mut out = Vec::new();
    let (c, h, w) = (4usize, 5usize, 6usize);
    let x = rand_t(rng, &[c, h, w]);
    let other = rand_t(rng, &[c, h, w]);
    let map = rand_t(rng, &[1, h, w]);

    let k = rand_t(rng, &[6, c, 3, 3]);
    let bias = rand_t(rng, &[6]);
    let conv = |spec: ConvSpec| {
        move |g: &mut Graph<f64>, xv: Var, wv: Var, bv: Var| g.conv2d(xv, wv, Some(bv), spec)
    };
    let same = conv(ConvSpec::same(3));
    {
        let (k2, b2) = (k.clone(), bias.clone());
        out.push(check(rng, "conv2d.x", x.clone(), &[6, h, w], |g, v| {
            let (wv, bv) = (g.input(k2.clone())?, g.input(b2.clone())?);
            same(g, v, wv, bv)
        })?);
        let (x2, b2) = (x.clone(), bias.clone());
        out.push(check(rng, "conv2d.w", k.clone(), &[6, h, w], |g, v| {
            let (xv, bv) = (g.input(x2.clone())?, g.input(b2.clone())?);
            same(g, xv, v, bv)
        })?);
        let (x2, k2) = (x.clone(), k.clone());
        out.push(check(rng, "conv2d.b", bias.clone(), &[6, h, w], |g, v| {
            let (xv, wv) = (g.input(x2.clone())?, g.input(k2.clone())?);
            same(g, xv, wv, v)
        })?);
    }
    {
        let spec = ConvSpec {
            stride: 2,
            padding: 1,
            groups: 2,
        };
        let kg = rand_t(rng, &[6, c / 2, 3, 3]);
        let (ho, wo) = ((h + 2 - 3) / 2 + 1, (w + 2 - 3) / 2 + 1);
        let (k2, b2) = (kg.clone(), bias.clone());
        out.push(check(
            rng,
            "conv2d.strided_grouped.x",
            x.clone(),
            &[6, ho, wo],
            |g, v| {
                let (wv, bv) = (g.input(k2.clone())?, g.input(b2.clone())?);
                g.conv2d(v, wv, Some(bv), spec)
            },
        )?);
        let x2 = x.clone();
        out.push(check(
            rng,
            "conv2d.strided_grouped.w",
            kg,
            &[6, ho, wo],
            |g, v| {
                let xv = g.input(x2.clone())?;
                g.conv2d(xv, v, None, spec)
            },
        )?);
    }

    let with_other = |o: &Tensor<f64>| {
        let o = o.clone();
        move |g: &mut Graph<f64>| g.input(o.clone())
    };
    let oth = with_other(&other);
    out.push(check(rng, "add", x.clone(), &[c, h, w], |g, v| {
        let o = oth(g)?;
        g.add(v, o)
    })?);
    out.push(check(rng, "sub.lhs", x.clone(), &[c, h, w], |g, v| {
        let o = oth(g)?;
        g.sub(v, o)
    })?);
    out.push(check(rng, "sub.rhs", x.clone(), &[c, h, w], |g, v| {
        let o = oth(g)?;
        g.sub(o, v)
    })?);
    out.push(check(rng, "mul", x.clone(), &[c, h, w], |g, v| {
        let o = oth(g)?;
        g.mul(o, v)
    })?);
    let mp = with_other(&map);
    out.push(check(rng, "mul_map.x", x.clone(), &[c, h, w], |g, v| {
        let m = mp(g)?;
        g.mul_map(v, m)
    })?);
    out.push(check(
        rng,
        "mul_map.map",
        map.clone(),
        &[c, h, w],
        |g, v| {
            let o = oth(g)?;
            g.mul_map(o, v)
        },
    )?);
    out.push(check(rng, "scale", x.clone(), &[c, h, w], |g, v| {
        g.scale(v, -1.7)
    })?);
    for (name, a) in [
        ("relu", Activation::Relu),
        ("gelu", Activation::Gelu),
        ("sigmoid", Activation::Sigmoid),
    ] {
        out.push(check(rng, name, x.clone(), &[c, h, w], |g, v| {
            g.activation(a, v)
        })?);
    }

    let l1 = rand_t(rng, &[1, h, w]);
    let l2 = rand_t(rng, &[1, h, w]);
    let rs: Vec<Tensor<f64>> = (0..3).map(|_| rand_t(rng, &[1, h, w])).collect();
    for pos in 0..3 {
        let (l1, l2, rs) = (l1.clone(), l2.clone(), rs.clone());
        out.push(check_scalar(
            &alloc::format!("softmax_over_agents.{pos}"),
            map.clone(),
            move |g, v| {
                let (a, b) = (g.input(l1.clone())?, g.input(l2.clone())?);
                let mut logits = vec![a, b];
                logits.insert(pos, v);
                let ws = g.softmax_over_agents(&logits)?;
                let mut terms = Vec::new();
                for (wv, r) in ws.iter().zip(&rs) {
                    terms.push((project(g, *wv, r)?, 1.0));
                }
                g.combine(&terms)
            },
        )?);
    }

    let stacked = rand_t(rng, &[3, c, h, w]);
    out.push(check(rng, "select", stacked, &[c, h, w], |g, v| {
        g.select(v, 1)
    })?);
    out.push(check(
        rng,
        "upsample_nearest2x",
        x.clone(),
        &[c, 2 * h, 2 * w],
        |g, v| g.upsample_nearest2x(v),
    )?);
    let even = rand_t(rng, &[c, 4, 6]);
    out.push(check(rng, "avg_pool2", even, &[c, 2, 3], |g, v| {
        g.avg_pool2(v)
    })?);
    out.push(check(
        rng,
        "concat_channels",
        x.clone(),
        &[c + 1, h, w],
        |g, v| {
            let m = mp(g)?;
            g.concat_channels(&[m, v])
        },
    )?);

    let gamma = rand_t(rng, &[c]);
    let beta = rand_t(rng, &[c]);
    {
        let (ga, be) = (gamma.clone(), beta.clone());
        out.push(check(
            rng,
            "group_norm.x",
            x.clone(),
            &[c, h, w],
            |g, v| {
                let (gv, bv) = (g.input(ga.clone())?, g.input(be.clone())?);
                g.group_norm(v, 2, gv, bv)
            },
        )?);
        let (x2, be) = (x.clone(), beta.clone());
        out.push(check(
            rng,
            "group_norm.gamma",
            gamma.clone(),
            &[c, h, w],
            |g, v| {
                let (xv, bv) = (g.input(x2.clone())?, g.input(be.clone())?);
                g.group_norm(xv, 2, v, bv)
            },
        )?);
        let (x2, ga) = (x.clone(), gamma.clone());
        out.push(check(rng, "group_norm.beta", beta, &[c, h, w], |g, v| {
            let (xv, gv) = (g.input(x2.clone())?, g.input(ga.clone())?);
            g.group_norm(xv, 2, gv, v)
        })?);
    }

    out.push(check_scalar("sum", x.clone(), |g, v| {
        let s = g.sum(v)?;
        g.scale(s, 0.3)
    })?);
    out.push(check_scalar("combine", x.clone(), |g, v| {
        let s = g.sum(v)?;
        let q = g.mul(v, v)?;
        let q = g.sum(q)?;
        g.combine(&[(s, 2.0), (q, -0.5)])
    })?);

    let r = 3;
    let fa = rand_t(rng, &[r, c]);
    let fb = rand_t(rng, &[r, h]);
    let fd = rand_t(rng, &[r, w]);
    for which in 0..3 {
        let (fa, fb, fd) = (fa.clone(), fb.clone(), fd.clone());
        let probe = [&fa, &fb, &fd][which].clone();
        out.push(check(
            rng,
            ["materialize.a", "materialize.b", "materialize.d"][which],
            probe,
            &[c, h, w],
            move |g, v| {
                let mut vs = [
                    g.input(fa.clone())?,
                    g.input(fb.clone())?,
                    g.input(fd.clone())?,
                ];
                vs[which] = v;
                g.materialize(vs[0], vs[1], vs[2])
            },
        )?);
    }

    let grid = GridConfig {
        height: 8,
        width: 12,
        resolution: 0.5,
    };
    let table = Arc::new(warp_table(
        &grid,
        &AgentPose {
            x: 0.7,
            y: -0.4,
            yaw: 0.35,
        },
    ));
    let field = rand_t(rng, &[c, 8, 12]);
    out.push(check(rng, "warp", field, &[c, 8, 12], |g, v| {
        g.warp(v, table.clone())
    })?);

    let targets = Tensor::from_fn(&[1, h, w], |i| if i % 3 == 0 { 1.0 } else { 0.0 });
    out.push(check_scalar("focal_loss", map.clone(), |g, v| {
        g.focal_loss(v, &targets, 0.25, 2.0, 3.0)
    })?);
    let mask: Vec<bool> = (0..h * w).map(|i| i % 4 != 1).collect();
    let reg_t = rand_t(rng, &[5, h, w]);
    // Residuals straddle the quadratic/linear boundary of the smooth-L1 term.
    out.push(check_scalar(
        "smooth_l1",
        rand_t(rng, &[5, h, w]),
        |g, v| g.smooth_l1(v, &reg_t, &mask, 1.0 / 9.0, 2.0),
    )?);
    let bins: Vec<u8> = (0..h * w).map(|i| (i % 2) as u8).collect();
    out.push(check_scalar(
        "direction_ce",
        rand_t(rng, &[2, h, w]),
        |g, v| g.direction_ce(v, &bins, &mask, 2.0),
    )?);
    Ok(out)
}

/// Small configuration for the end-to-end check: C=4 on a 16 x 32 grid.
pub fn e2e_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::desk();
    cfg.grid = GridConfig {
        height: 16,
        width: 32,
        resolution: 0.8,
    };
    cfg.unified_channels = 4;
    cfg.scene.min_objects = 2;
    cfg.scene.max_objects = 3;
    cfg.scene.neighbor_slots = vec![
        PoseSpec {
            x: 4.0,
            y: 1.0,
            yaw: 0.3,
            jitter_xy: 0.0,
            jitter_yaw: 0.0
        };
        cfg.scene.neighbor_slots.len()
    ];
    cfg.pyramid = PyramidConfig {
        channels: vec![4, 8, 12],
        blocks: vec![1, 1, 1],
        cardinality: 2,
        fg_weights: vec![0.4; 3],
    };
    cfg.aligner.expansion = 2;
    let enc = |out: usize, act: Activation| EncoderSpec {
        enc_widths: vec![4],
        bev_widths: vec![4],
        kernel: 3,
        activation: act,
        out_channels: out,
    };
    for f in &mut cfg.families {
        f.sensor.range = 9.0;
    }
    cfg.families[0].encoder = enc(4, Activation::Relu);
    cfg.families[1].encoder = enc(6, Activation::Gelu);
    cfg
}

#[derive(Clone, Debug, PartialEq)]
pub struct E2eCheck {
    /// Max elementwise relative error over probed stage-2 parameters, f64.
    pub f64_max_rel_error: f64,
    /// Normwise relative error `|a - n| / max(|a|, |n|)` over the same elements, f32.
    pub f32_norm_rel_error: f64,
    /// Elementwise maximum in f32; dominated by near-zero gradients.
    pub f32_max_rel_error: f64,
    pub probed: usize,
}

fn stage2_model<T: Real>(cfg: &ExperimentConfig, seed: u64) -> Result<(Model<T>, Vec<ParamId>)> {
    let fam = &cfg.families[1].id;
    let mut m = Model::<T>::new(cfg, seed)?;
    m.add_lift(fam, 2, true, PromptInit::Random, seed)?;
    let plan = StagePlan::lift(cfg, fam);
    plan.apply(&mut m.store)?;
    let ids = m
        .store
        .iter()
        .filter(|(_, p)| !p.frozen)
        .map(|(id, _)| id)
        .collect();
    Ok((m, ids))
}

/// (analytic, central-difference) pairs of the full stage-2 loss over up to
/// `per_param` evenly strided elements of each trainable parameter.
fn e2e_pairs<T: Real>(
    cfg: &ExperimentConfig,
    seed: u64,
    eps: f64,
    per_param: usize,
) -> Result<Vec<(f64, f64)>> {
    let fam = cfg.families[1].id.clone();
    let rec = generate_sample(cfg, seed, Split::Train, 0)?;
    let p = prepare(cfg, &rec, hetero_agents(cfg, &rec, &[fam], true)?)?;
    let (mut m, ids) = stage2_model::<T>(cfg, seed)?;
    let mut store = core::mem::take(&mut m.store);
    let value = |s: &ParameterStore<T>, m: &mut Model<T>| -> Result<f64> {
        m.store = s.clone();
        let mut g = Graph::new();
        let mut pp = p.clone();
        let (st, out) = m.forward(&mut g, &mut pp, false)?;
        let loss = m.loss(&mut g, &pp, &st, &out)?.0;
        Ok(g.value(loss).item().f64())
    };
    m.store = store.clone();
    let mut g = Graph::new();
    let mut pp = p.clone();
    let (st, out) = m.forward(&mut g, &mut pp, false)?;
    let (loss, _) = m.loss(&mut g, &pp, &st, &out)?;
    g.backward(loss, &mut store)?;
    let mut pairs = Vec::new();
    for &id in &ids {
        let n = store.get(id).tensor.numel();
        let analytic: Vec<f64> = match &store.get(id).grad {
            Some(gr) => gr.data().iter().map(|v| v.f64()).collect(),
            None => vec![0.0; n],
        };
        let step = n.div_ceil(per_param.max(1)).max(1);
        for i in (0..n).step_by(step) {
            let orig = store.get(id).tensor.data()[i];
            store.get_mut(id).tensor.data_mut()[i] = orig + T::of(eps);
            let plus = value(&store, &mut m)?;
            store.get_mut(id).tensor.data_mut()[i] = orig - T::of(eps);
            let minus = value(&store, &mut m)?;
            store.get_mut(id).tensor.data_mut()[i] = orig;
            pairs.push((analytic[i], (plus - minus) / (2.0 * eps)));
        }
    }
    Ok(pairs)
}

/// Central-difference step of the f64 end-to-end pass; smaller steps hit
/// round-off on gradients near 1e-7.
pub const E2E_EPS_F64: f64 = 1e-4;
/// Step of the f32 end-to-end pass.
pub const E2E_EPS_F32: f64 = 1e-2;

/// Stage-2 check on two agents with a rank-2 prompt. Only aligner, prompt
/// and new foreground parameters are trainable and probed.
pub fn e2e_check(seed: u64, per_param: usize) -> Result<E2eCheck> {
    let cfg = e2e_config();
    let exact = e2e_pairs::<f64>(&cfg, seed, E2E_EPS_F64, per_param)?;
    let f64_err = exact
        .iter()
        .map(|&(a, n)| relative_error(a, n))
        .fold(0.0, f64::max);
    let pairs = e2e_pairs::<f32>(&cfg, seed, E2E_EPS_F32, per_param)?;
    let (mut num, mut den_a, mut den_n) = (0.0f64, 0.0f64, 0.0f64);
    for (a, n) in &pairs {
        num += (a - n) * (a - n);
        den_a += a * a;
        den_n += n * n;
    }
    let den = den_a.sqrt().max(den_n.sqrt()).max(1e-12);
    Ok(E2eCheck {
        f64_max_rel_error: f64_err,
        f32_norm_rel_error: num.sqrt() / den,
        f32_max_rel_error: pairs
            .iter()
            .map(|&(a, n)| relative_error(a, n))
            .fold(0.0, f64::max),
        probed: exact.len(),
    })
}
