//! Dataset samples, agent rosters, per-sample preparation and detection targets.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autodiff::WarpTable;
use crate::config::{ExperimentConfig, GridConfig};
use crate::error::{Error, Result};
use crate::geometry::{AgentPose, GtBox};
use crate::nn::{BoxCoder, REG_CHANNELS};
use crate::scene::{
    generate_scene, gt_masks, mix_seed, observe, sample_poses, shared_warp, visible_objects, Scene,
};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }

    fn tag(self) -> u64 {
        match self {
            Split::Train => 0x7A1,
            Split::Test => 0x7E5,
        }
    }
}

/// Everything needed to regenerate a sample's observations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub index: usize,
    pub seed: u64,
    pub scene: Scene,
    /// One pose per neighbor slot.
    pub poses: Vec<AgentPose>,
}

pub fn sample_seed(dataset_seed: u64, split: Split, index: usize) -> u64 {
    mix_seed(mix_seed(dataset_seed, split.tag()), index as u64)
}

pub fn generate_sample(
    cfg: &ExperimentConfig,
    dataset_seed: u64,
    split: Split,
    index: usize,
) -> Result<SampleRecord> {
    let seed = sample_seed(dataset_seed, split, index);
    Ok(SampleRecord {
        index,
        seed,
        scene: generate_scene(&cfg.scene, &cfg.grid, seed)?,
        poses: sample_poses(&cfg.scene.neighbor_slots, seed),
    })
}

pub fn generate_split(
    cfg: &ExperimentConfig,
    dataset_seed: u64,
    split: Split,
) -> Result<Vec<SampleRecord>> {
    let n = match split {
        Split::Train => cfg.scene.train_samples,
        Split::Test => cfg.scene.test_samples,
    };
    (0..n)
        .map(|i| generate_sample(cfg, dataset_seed, split, i))
        .collect()
}

/// An agent taking part in a sample. The ego has id 0; slot `s` has id `s + 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct AgentSpec {
    pub agent_id: u32,
    pub family: String,
    pub pose: AgentPose,
}

fn ego_spec(cfg: &ExperimentConfig) -> AgentSpec {
    AgentSpec {
        agent_id: 0,
        family: cfg.ego_family.clone(),
        pose: AgentPose::IDENTITY,
    }
}

fn slot_spec(rec: &SampleRecord, slot: usize, family: &str) -> Result<AgentSpec> {
    let pose = *rec
        .poses
        .get(slot)
        .ok_or_else(|| Error::Config(format!("sample has no neighbor slot {slot}")))?;
    Ok(AgentSpec {
        agent_id: slot as u32 + 1,
        family: family.into(),
        pose,
    })
}

/// Ego plus the homogeneous stage-1 neighbors.
pub fn base_agents(cfg: &ExperimentConfig, rec: &SampleRecord) -> Result<Vec<AgentSpec>> {
    let mut v = vec![ego_spec(cfg)];
    for &s in &cfg.train.base_neighbor_slots {
        v.push(slot_spec(rec, s, &cfg.ego_family)?);
    }
    Ok(v)
}

/// Heterogeneous neighbors at their family's slot, optionally with the ego.
pub fn hetero_agents(
    cfg: &ExperimentConfig,
    rec: &SampleRecord,
    families: &[String],
    include_ego: bool,
) -> Result<Vec<AgentSpec>> {
    let mut v = Vec::new();
    if include_ego {
        v.push(ego_spec(cfg));
    }
    for f in families {
        v.push(slot_spec(rec, cfg.slot_of(f)?, f)?);
    }
    if v.is_empty() {
        return Err(Error::Empty("agent roster"));
    }
    Ok(v)
}

/// Per-cell classification, regression and direction targets.
#[derive(Clone, Debug, PartialEq)]
pub struct DetTargets {
    /// `[1, H, W]` in {0, 1}.
    pub cls: Tensor,
    /// `[5, H, W]`, meaningful on positive cells only.
    pub reg: Tensor,
    pub bins: Vec<u8>,
    pub mask: Vec<bool>,
}

impl DetTargets {
    pub fn positives(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// A cell is positive when its center lies inside a box; it regresses that box.
pub fn build_targets(objects: &[GtBox], grid: &GridConfig, coder: &BoxCoder) -> DetTargets {
    let (h, w) = (grid.height, grid.width);
    let hw = h * w;
    let mut cls = vec![0.0f32; hw];
    let mut reg = vec![0.0f32; REG_CHANNELS * hw];
    let mut bins = vec![0u8; hw];
    let mut mask = vec![false; hw];
    for cell in 0..hw {
        let (cx, cy) = grid.cell_center(cell / w, cell % w);
        if let Some(b) = objects.iter().find(|b| b.contains(cx, cy)) {
            let (r, bin) = coder.encode(b, cx, cy);
            cls[cell] = 1.0;
            mask[cell] = true;
            bins[cell] = bin;
            for (k, v) in r.iter().enumerate() {
                reg[k * hw + cell] = *v;
            }
        }
    }
    DetTargets {
        cls: Tensor::new(&[1, h, w], cls).expect("target shape"),
        reg: Tensor::new(&[REG_CHANNELS, h, w], reg).expect("target shape"),
        bins,
        mask,
    }
}

#[derive(Clone, Debug)]
pub struct PreparedAgent {
    pub spec: AgentSpec,
    /// Raw observation in the agent's own frame.
    pub raw: Tensor,
    /// Absent for the identity pose.
    pub warp: Option<Arc<WarpTable>>,
    /// Foreground masks of the objects this agent sees, scales `1..=L`.
    pub masks: Vec<Tensor>,
}

/// Values of frozen sub-computations, filled on first use.
#[derive(Clone, Debug, Default)]
pub struct FeatureCache {
    /// Encoder output in the agent frame, per agent id.
    pub encoded: BTreeMap<u32, Tensor>,
    /// Per-scale features and occupancy logits, per agent id.
    pub scales: BTreeMap<u32, (Vec<Tensor>, Vec<Tensor>)>,
}

#[derive(Clone, Debug)]
pub struct Prepared {
    pub index: usize,
    pub agents: Vec<PreparedAgent>,
    /// Targets from the objects visible to any agent in the roster.
    pub targets: DetTargets,
    /// Every object in the scene; evaluation ground truth.
    pub gt: Vec<GtBox>,
    pub cache: FeatureCache,
}

/// Noise seed of agent `agent_id`'s observation in a sample.
pub fn observation_seed(rec: &SampleRecord, agent_id: u32) -> u64 {
    mix_seed(rec.seed, 0x0B5 + agent_id as u64)
}

/// Renders every agent's observation and builds masks and targets.
pub fn prepare(
    cfg: &ExperimentConfig,
    rec: &SampleRecord,
    agents: Vec<AgentSpec>,
) -> Result<Prepared> {
    let levels = cfg.pyramid.scales();
    let mut seen = vec![false; rec.scene.objects.len()];
    let mut out = Vec::with_capacity(agents.len());
    for spec in agents {
        let fam = cfg.family(&spec.family)?;
        let obs = observe(
            &rec.scene,
            &cfg.grid,
            &cfg.scene,
            &spec.pose,
            fam,
            spec.agent_id,
            observation_seed(rec, spec.agent_id),
        );
        let vis = visible_objects(&rec.scene.objects, &spec.pose, fam.sensor.range);
        for (i, o) in rec.scene.objects.iter().enumerate() {
            seen[i] |= vis.contains(o);
        }
        out.push(PreparedAgent {
            warp: shared_warp(&cfg.grid, &spec.pose),
            masks: gt_masks(&vis, &cfg.grid, levels)?,
            raw: obs.raw,
            spec,
        });
    }
    let visible: Vec<GtBox> = rec
        .scene
        .objects
        .iter()
        .zip(&seen)
        .filter(|(_, &s)| s)
        .map(|(o, _)| *o)
        .collect();
    Ok(Prepared {
        index: rec.index,
        agents: out,
        targets: build_targets(&visible, &cfg.grid, &BoxCoder::new(&cfg.head)),
        gt: rec.scene.objects.clone(),
        cache: FeatureCache::default(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn targets_round_trip_through_decode() {
        let cfg = ExperimentConfig::desk();
        let coder = BoxCoder::new(&cfg.head);
        let rec = generate_sample(&cfg, 3, Split::Train, 0).unwrap();
        let t = build_targets(&rec.scene.objects, &cfg.grid, &coder);
        let hw = cfg.grid.cells();
        assert!(t.positives() > 0);
        for cell in (0..hw).filter(|&c| t.mask[c]) {
            let (cx, cy) = cfg
                .grid
                .cell_center(cell / cfg.grid.width, cell % cfg.grid.width);
            let r: [f32; REG_CHANNELS] = core::array::from_fn(|k| t.reg.data()[k * hw + cell]);
            let b = coder.decode(r, t.bins[cell], cx, cy);
            assert!(rec
                .scene
                .objects
                .iter()
                .any(|o| (o.x - b.x).abs() < 1e-4 && (o.y - b.y).abs() < 1e-4));
        }
    }
}
