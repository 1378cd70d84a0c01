//! Multi-scale occupancy-weighted fusion across agents.
//!
//! Agents are processed in ascending agent-id order regardless of input
//! order, so the fused output does not depend on how the caller lists them.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::autodiff::{Graph, ParameterStore, Var};
use crate::config::PyramidConfig;
use crate::error::{Error, Result};
use crate::nn::{build_scale, resnext_scale_forward, ForegroundSet, ResNeXtBlock};
use crate::tensor::Real;

/// Scale extractors shared across agents plus the stage-1 foreground estimators.
#[derive(Clone, Debug, PartialEq)]
pub struct Pyramid {
    pub in_c: usize,
    pub channels: Vec<usize>,
    pub scales: Vec<Vec<ResNeXtBlock>>,
    pub foreground: ForegroundSet,
}

impl Pyramid {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParameterStore<T>,
        in_c: usize,
        cfg: &PyramidConfig,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut scales = Vec::with_capacity(cfg.scales());
        let mut c = in_c;
        for (l, (&out, &n)) in cfg.channels.iter().zip(&cfg.blocks).enumerate() {
            scales.push(build_scale(
                store,
                &format!("pyramid.scale{}", l + 1),
                c,
                out,
                n,
                cfg.cardinality,
                rng,
            )?);
            c = out;
        }
        let foreground = ForegroundSet::new(store, "pyramid", &cfg.channels, rng)?;
        Ok(Self {
            in_c,
            channels: cfg.channels.clone(),
            scales,
            foreground,
        })
    }

    pub fn levels(&self) -> usize {
        self.channels.len()
    }

    /// Output channels of `H_e`.
    pub fn fused_channels(&self) -> usize {
        self.channels.iter().sum()
    }

    /// `F^(l)` for `l = 1..=L`.
    pub fn extract<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParameterStore<T>,
        x: Var,
    ) -> Result<Vec<Var>> {
        let (c, h, w) = g.value(x).dims3()?;
        if c != self.in_c {
            return Err(Error::ShapeMismatch {
                op: "pyramid_forward",
                expected: alloc::vec![self.in_c],
                found: alloc::vec![c],
            });
        }
        let d = 1usize << self.levels();
        if h % d != 0 || w % d != 0 {
            return Err(Error::Precondition(format!(
                "feature {h}x{w} not divisible by 2^{}",
                self.levels()
            )));
        }
        let mut out = Vec::with_capacity(self.levels());
        let mut cur = x;
        for blocks in &self.scales {
            cur = resnext_scale_forward(g, store, cur, blocks)?;
            out.push(cur);
        }
        Ok(out)
    }

    pub fn param_count_scales(&self) -> usize {
        self.scales
            .iter()
            .flatten()
            .map(ResNeXtBlock::param_count)
            .sum()
    }

    pub fn macs(&self, h: usize, w: usize) -> usize {
        let mut total = 0;
        let (mut hh, mut ww) = (h, w);
        for (l, blocks) in self.scales.iter().enumerate() {
            for (b, blk) in blocks.iter().enumerate() {
                total += blk.macs(hh, ww);
                if b == 0 {
                    (hh, ww) = (hh / 2, ww / 2);
                }
            }
            total += self.foreground.scales[l].macs(hh, ww);
        }
        total
    }
}

/// One agent's per-scale features and occupancy logits.
#[derive(Clone, Debug)]
pub struct AgentScales {
    pub agent_id: u32,
    pub features: Vec<Var>,
    pub occupancy: Vec<Var>,
}

/// Every intermediate of the fusion, agents in ascending id order.
#[derive(Clone, Debug)]
pub struct FusionState {
    pub agent_ids: Vec<u32>,
    /// `[agent][scale]`.
    pub features: Vec<Vec<Var>>,
    /// `[agent][scale]` raw logits `[1, H_l, W_l]`.
    pub occupancy: Vec<Vec<Var>>,
    /// `[agent][scale]` softmax weights.
    pub weights: Vec<Vec<Var>>,
    /// Per-scale fused features at scale resolution.
    pub fused: Vec<Var>,
    /// Concatenation of the fused scales upsampled to full resolution.
    pub h_e: Var,
}

/// One entry of [`occupancy_maps`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct OccupancyMap {
    pub agent_id: u32,
    /// 1-based scale index.
    pub scale: usize,
    pub logits: Var,
}

/// Weights, aggregates, upsamples and concatenates already-extracted agents.
pub fn fuse<T: Real>(g: &mut Graph<T>, mut agents: Vec<AgentScales>) -> Result<FusionState> {
    if agents.is_empty() {
        return Err(Error::Empty("pyramid_forward agents"));
    }
    agents.sort_by_key(|a| a.agent_id);
    if agents.windows(2).any(|w| w[0].agent_id == w[1].agent_id) {
        return Err(Error::Precondition(
            "duplicate agent id in fusion input".into(),
        ));
    }
    let levels = agents[0].features.len();
    for a in &agents {
        if a.features.len() != levels || a.occupancy.len() != levels {
            return Err(Error::ShapeMismatch {
                op: "pyramid_forward",
                expected: alloc::vec![levels, levels],
                found: alloc::vec![a.features.len(), a.occupancy.len()],
            });
        }
    }
    let n = agents.len();
    let mut weights: Vec<Vec<Var>> = (0..n).map(|_| Vec::with_capacity(levels)).collect();
    let mut fused = Vec::with_capacity(levels);
    let mut ups = Vec::with_capacity(levels);
    for l in 0..levels {
        let logits: Vec<Var> = agents.iter().map(|a| a.occupancy[l]).collect();
        let w = g.softmax_over_agents(&logits)?;
        let mut terms = Vec::with_capacity(n);
        for (i, a) in agents.iter().enumerate() {
            weights[i].push(w[i]);
            terms.push((g.mul_map(a.features[l], w[i])?, 1.0));
        }
        let f = g.combine(&terms)?;
        fused.push(f);
        let mut u = f;
        for _ in 0..=l {
            u = g.upsample_nearest2x(u)?;
        }
        ups.push(u);
    }
    let h_e = g.concat_channels(&ups)?;
    Ok(FusionState {
        agent_ids: agents.iter().map(|a| a.agent_id).collect(),
        features: agents.iter().map(|a| a.features.clone()).collect(),
        occupancy: agents.into_iter().map(|a| a.occupancy).collect(),
        weights,
        fused,
        h_e,
    })
}

/// Full fusion chain over ego-frame unified features. Each input names the
/// foreground estimator set used for that agent.
pub fn pyramid_forward<T: Real>(
    g: &mut Graph<T>,
    store: &ParameterStore<T>,
    pyramid: &Pyramid,
    inputs: &[(u32, Var, &ForegroundSet)],
) -> Result<FusionState> {
    if inputs.is_empty() {
        return Err(Error::Empty("pyramid_forward agents"));
    }
    let first = g.value(inputs[0].1).shape().to_vec();
    let mut order: Vec<usize> = (0..inputs.len()).collect();
    order.sort_by_key(|&i| inputs[i].0);
    let mut agents = Vec::with_capacity(inputs.len());
    for i in order {
        let (id, x, fg) = inputs[i];
        if g.value(x).shape() != first.as_slice() {
            return Err(Error::ShapeMismatch {
                op: "pyramid_forward",
                expected: first,
                found: g.value(x).shape().to_vec(),
            });
        }
        agents.push(scales_for(g, store, pyramid, id, x, fg)?);
    }
    fuse(g, agents)
}

/// Extraction and occupancy estimation for one agent.
pub fn scales_for<T: Real>(
    g: &mut Graph<T>,
    store: &ParameterStore<T>,
    pyramid: &Pyramid,
    agent_id: u32,
    x: Var,
    fg: &ForegroundSet,
) -> Result<AgentScales> {
    let features = pyramid.extract(g, store, x)?;
    let occupancy = features
        .iter()
        .enumerate()
        .map(|(l, &f)| fg.forward(g, store, l, f))
        .collect::<Result<_>>()?;
    Ok(AgentScales {
        agent_id,
        features,
        occupancy,
    })
}

/// Occupancy logits of every agent at every scale, agents in id order.
pub fn occupancy_maps(state: &FusionState) -> Vec<OccupancyMap> {
    let mut out = Vec::new();
    for (i, occ) in state.occupancy.iter().enumerate() {
        for (l, &logits) in occ.iter().enumerate() {
            out.push(OccupancyMap {
                agent_id: state.agent_ids[i],
                scale: l + 1,
                logits,
            });
        }
    }
    out
}
