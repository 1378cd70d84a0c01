//! Closed-form parameter and FLOP counts derived from the configuration alone.
//!
//! Nothing here builds a model; tests compare these numbers against stores
//! built by [`Model`](super::Model).

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autodiff::ParameterStore;
use crate::config::{AlignerConfig, ExperimentConfig, FamilySpec};
use crate::error::Result;
use crate::nn::REG_CHANNELS;
use crate::prompt::prompt_param_count;
use crate::scene::RAW_CHANNELS;
use crate::tensor::Real;

use super::plan::AblationRow;

pub fn conv_params(c_in: usize, c_out: usize, k: usize, groups: usize, bias: bool) -> usize {
    c_out * (c_in / groups * k * k + usize::from(bias))
}

pub fn norm_params(c: usize) -> usize {
    2 * c
}

/// `(enc, bev, out)` parameter counts of a family encoder.
pub fn encoder_params(f: &FamilySpec) -> (usize, usize, usize) {
    let e = &f.encoder;
    let mut c = RAW_CHANNELS;
    let mut stage = |widths: &[usize]| {
        let mut n = 0;
        for &o in widths {
            n += conv_params(c, o, e.kernel, 1, true);
            c = o;
        }
        n
    };
    let enc = stage(&e.enc_widths);
    let bev = stage(&e.bev_widths);
    (enc, bev, conv_params(c, e.out_channels, 1, 1, true))
}

pub fn resnext_block_params(c_in: usize, c_out: usize, stride: usize, card: usize) -> usize {
    let shortcut = if stride != 1 || c_in != c_out {
        conv_params(c_in, c_out, 1, 1, false)
    } else {
        0
    };
    conv_params(c_in, c_out, 1, 1, false)
        + conv_params(c_out, c_out, 3, card, false)
        + conv_params(c_out, c_out, 1, 1, false)
        + 3 * norm_params(c_out)
        + shortcut
}

/// Scale extractors, without foreground estimators.
pub fn pyramid_params(cfg: &ExperimentConfig) -> usize {
    let p = &cfg.pyramid;
    let mut c = cfg.unified_channels;
    let mut total = 0;
    for (&out, &n) in p.channels.iter().zip(&p.blocks) {
        total += resnext_block_params(c, out, 2, p.cardinality);
        total += (1..n)
            .map(|_| resnext_block_params(out, out, 1, p.cardinality))
            .sum::<usize>();
        c = out;
    }
    total
}

pub fn foreground_params(cfg: &ExperimentConfig) -> usize {
    cfg.pyramid
        .channels
        .iter()
        .map(|&c| conv_params(c, 1, 1, 1, true))
        .sum()
}

pub fn head_params(cfg: &ExperimentConfig) -> usize {
    let c: usize = cfg.pyramid.channels.iter().sum();
    conv_params(c, 1, 1, 1, true)
        + conv_params(c, REG_CHANNELS, 1, 1, true)
        + conv_params(c, 2, 1, 1, true)
}

pub fn aligner_params(c_k: usize, c: usize, a: &AlignerConfig) -> usize {
    let block = conv_params(c_k, c_k, a.kernel, c_k, true)
        + norm_params(c_k)
        + conv_params(c_k, a.expansion * c_k, 1, 1, true)
        + conv_params(a.expansion * c_k, c_k, 1, 1, true);
    a.depth * block + conv_params(c_k, c, 1, 1, true)
}

/// Trainable pieces of one family's stage-2 pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LiftCount {
    pub aligner: usize,
    pub prompt: usize,
    pub foreground: usize,
}

impl LiftCount {
    pub fn total(&self) -> usize {
        self.aligner + self.prompt + self.foreground
    }
}

pub fn lift_params(
    cfg: &ExperimentConfig,
    family: &str,
    rank: usize,
    low_rank: bool,
) -> Result<LiftCount> {
    let f = cfg.family(family)?;
    let (c, h, w) = (cfg.unified_channels, cfg.grid.height, cfg.grid.width);
    Ok(LiftCount {
        aligner: aligner_params(f.encoder.out_channels, c, &cfg.aligner),
        prompt: prompt_param_count(c, h, w, rank, low_rank),
        foreground: foreground_params(cfg),
    })
}

/// Trainable parameters of a freeze/tune ablation row for `family`.
pub fn ablation_params(
    cfg: &ExperimentConfig,
    family: &str,
    row: AblationRow,
    rank: usize,
) -> Result<usize> {
    let (enc, bev, out) = encoder_params(cfg.family(family)?);
    let l = lift_params(cfg, family, rank, cfg.prompt.low_rank)?;
    let encoder = match row {
        AblationRow::EncBev | AblationRow::EncBevLift => enc + bev + out,
        AblationRow::EncLift => enc,
        AblationRow::BevLift => bev + out,
        AblationRow::Lift => 0,
    };
    let prompt = if row.uses_prompt() { l.prompt } else { 0 };
    Ok(encoder + l.aligner + l.foreground + prompt)
}

/// Stage-1 trainable parameters: ego encoder, pyramid with estimators, head.
pub fn base_params(cfg: &ExperimentConfig) -> Result<usize> {
    let (e, b, o) = encoder_params(cfg.ego()?);
    Ok(e + b + o + pyramid_params(cfg) + foreground_params(cfg) + head_params(cfg))
}

fn conv_macs(c_in: usize, c_out: usize, k: usize, groups: usize, h: usize, w: usize) -> u64 {
    (c_out * (c_in / groups) * k * k * h * w) as u64
}

pub fn encoder_macs(f: &FamilySpec, h: usize, w: usize) -> u64 {
    let e = &f.encoder;
    let mut c = RAW_CHANNELS;
    let mut m = 0;
    for &o in e.enc_widths.iter().chain(&e.bev_widths) {
        m += conv_macs(c, o, e.kernel, 1, h, w);
        c = o;
    }
    m + conv_macs(c, e.out_channels, 1, 1, h, w)
}

pub fn aligner_macs(c_k: usize, c: usize, a: &AlignerConfig, h: usize, w: usize) -> u64 {
    let hid = a.expansion * c_k;
    let block = conv_macs(c_k, c_k, a.kernel, c_k, h, w)
        + conv_macs(c_k, hid, 1, 1, h, w)
        + conv_macs(hid, c_k, 1, 1, h, w);
    a.depth as u64 * block + conv_macs(c_k, c, 1, 1, h, w)
}

/// Outer-product cost of materializing a rank-`r` prompt.
pub fn prompt_macs(c: usize, h: usize, w: usize, r: usize) -> u64 {
    (r * (h * w + c * h * w)) as u64
}

/// One agent's trip through the shared scales and its foreground estimators.
pub fn pyramid_macs(cfg: &ExperimentConfig) -> u64 {
    let p = &cfg.pyramid;
    let (mut h, mut w) = (cfg.grid.height, cfg.grid.width);
    let mut c = cfg.unified_channels;
    let mut m = 0;
    for (&out, &n) in p.channels.iter().zip(&p.blocks) {
        for b in 0..n {
            let (ic, (ih, iw)) = if b == 0 { (c, (h, w)) } else { (out, (h, w)) };
            let (oh, ow) = if b == 0 { (ih / 2, iw / 2) } else { (ih, iw) };
            m += conv_macs(ic, out, 1, 1, ih, iw)
                + conv_macs(out, out, 3, p.cardinality, oh, ow)
                + conv_macs(out, out, 1, 1, oh, ow);
            if b == 0 {
                m += conv_macs(ic, out, 1, 1, oh, ow);
                (h, w) = (oh, ow);
            }
        }
        m += conv_macs(out, 1, 1, 1, h, w);
        c = out;
    }
    m
}

pub fn head_macs(cfg: &ExperimentConfig) -> u64 {
    let c: usize = cfg.pyramid.channels.iter().sum();
    conv_macs(
        c,
        1 + REG_CHANNELS + 2,
        1,
        1,
        cfg.grid.height,
        cfg.grid.width,
    )
}

/// Weighted aggregation: one multiply per feature element per agent.
pub fn fusion_macs(cfg: &ExperimentConfig, agents: usize) -> u64 {
    let (mut h, mut w) = (cfg.grid.height, cfg.grid.width);
    let mut m = 0;
    for &c in &cfg.pyramid.channels {
        (h, w) = (h / 2, w / 2);
        m += (agents * c * h * w) as u64;
    }
    m
}

/// Forward FLOPs (2 per multiply-accumulate) of one inference with the ego
/// plus `neighbors`, every non-ego family adapted at rank `rank`.
pub fn forward_flops(cfg: &ExperimentConfig, neighbors: &[String], rank: usize) -> Result<u64> {
    let (c, h, w) = (cfg.unified_channels, cfg.grid.height, cfg.grid.width);
    let mut m = encoder_macs(cfg.ego()?, h, w);
    for n in neighbors {
        let f = cfg.family(n)?;
        m += encoder_macs(f, h, w);
        if f.id != cfg.ego_family {
            m += aligner_macs(f.encoder.out_channels, c, &cfg.aligner, h, w);
            if cfg.prompt.low_rank {
                m += prompt_macs(c, h, w, rank);
            }
        }
    }
    let agents = neighbors.len() + 1;
    m += agents as u64 * pyramid_macs(cfg) + fusion_macs(cfg, agents) + head_macs(cfg);
    Ok(2 * m)
}

/// One row of a parameter report.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamRow {
    pub module: String,
    pub params: usize,
}

/// Per-module counts for the base model and every non-ego family's pair.
pub fn params_table(cfg: &ExperimentConfig) -> Result<Vec<ParamRow>> {
    let row = |m: String, p| ParamRow {
        module: m,
        params: p,
    };
    let mut rows = Vec::new();
    for f in &cfg.families {
        let (e, b, o) = encoder_params(f);
        rows.push(row(alloc::format!("encoder.{}", f.id), e + b + o));
    }
    rows.push(row("pyramid.scales".into(), pyramid_params(cfg)));
    rows.push(row("pyramid.foreground".into(), foreground_params(cfg)));
    rows.push(row("head".into(), head_params(cfg)));
    rows.push(row("stage1.trainable".into(), base_params(cfg)?));
    for f in cfg.hetero_families() {
        let l = lift_params(cfg, &f.id, cfg.prompt.rank, cfg.prompt.low_rank)?;
        rows.push(row(alloc::format!("aligner.{}", f.id), l.aligner));
        rows.push(row(alloc::format!("lift.{}", f.id), l.prompt));
        rows.push(row(alloc::format!("foreground_new.{}", f.id), l.foreground));
        rows.push(row(alloc::format!("stage2.{}.trainable", f.id), l.total()));
    }
    Ok(rows)
}

/// Sum of element counts over unfrozen parameters.
pub fn store_trainable<T: Real>(store: &ParameterStore<T>) -> usize {
    store
        .iter()
        .filter(|(_, p)| !p.frozen)
        .map(|(_, p)| p.tensor.numel())
        .sum()
}

/// Sum of element counts over parameters whose names start with `prefix`.
pub fn store_prefix<T: Real>(store: &ParameterStore<T>, prefix: &str) -> usize {
    store
        .iter()
        .filter(|(_, p)| p.name.starts_with(prefix))
        .map(|(_, p)| p.tensor.numel())
        .sum()
}
