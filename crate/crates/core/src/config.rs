//! Experiment configuration. Every struct rejects unknown keys.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autodiff::Activation;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    /// Rows, along y.
    pub height: usize,
    /// Columns, along x.
    pub width: usize,
    /// Meters per cell.
    pub resolution: f32,
}

impl GridConfig {
    pub fn extent_x(&self) -> f64 {
        self.width as f64 * self.resolution as f64 / 2.0
    }

    pub fn extent_y(&self) -> f64 {
        self.height as f64 * self.resolution as f64 / 2.0
    }

    /// Center of cell `(row, col)` in meters.
    pub fn cell_center(&self, row: usize, col: usize) -> (f64, f64) {
        let r = self.resolution as f64;
        (
            (col as f64 + 0.5) * r - self.extent_x(),
            (row as f64 + 0.5) * r - self.extent_y(),
        )
    }

    /// Continuous `(row, col)` coordinate of a metric point; cell centers are integers.
    pub fn to_cell(&self, x: f64, y: f64) -> (f64, f64) {
        let r = self.resolution as f64;
        (
            (y + self.extent_y()) / r - 0.5,
            (x + self.extent_x()) / r - 0.5,
        )
    }

    pub fn cells(&self) -> usize {
        self.height * self.width
    }
}

/// Nominal neighbor placement with uniform jitter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseSpec {
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
    pub jitter_xy: f64,
    pub jitter_yaw: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneConfig {
    pub min_objects: usize,
    pub max_objects: usize,
    pub width_range: [f32; 2],
    pub length_range: [f32; 2],
    /// Fraction of objects aligned to a grid axis (plus jitter); the rest are uniform.
    pub axis_aligned_fraction: f32,
    pub heading_jitter: f32,
    /// Minimum free gap between objects, meters.
    pub spacing: f32,
    pub neighbor_slots: Vec<PoseSpec>,
    pub train_samples: usize,
    pub test_samples: usize,
}

/// Per-family sensor signature applied to the raw raster.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensorSpec {
    /// Cells farther than this from the agent are zeroed, meters.
    pub range: f32,
    pub noise_std: f32,
    /// Box-blur radius in cells (0 disables).
    pub blur_radius: usize,
    /// Drop probability for cells in the outer third of the range.
    pub far_dropout: f32,
    /// Additive occupancy bias growing linearly with distance, at full range.
    pub range_bias: f32,
    /// Per raw channel gain.
    pub gain: [f32; 4],
    /// Spurious object-like returns fixed in the sensor frame.
    pub phantoms: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderSpec {
    /// Hidden widths of the encoder stage.
    pub enc_widths: Vec<usize>,
    /// Hidden widths of the BEV backbone stage.
    pub bev_widths: Vec<usize>,
    pub kernel: usize,
    pub activation: Activation,
    /// Output channels `C_k`.
    pub out_channels: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FamilySpec {
    pub id: String,
    pub seed: u64,
    pub sensor: SensorSpec,
    pub encoder: EncoderSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PyramidConfig {
    pub channels: Vec<usize>,
    pub blocks: Vec<usize>,
    pub cardinality: usize,
    /// Foreground loss weight per scale.
    pub fg_weights: Vec<f32>,
}

impl PyramidConfig {
    pub fn scales(&self) -> usize {
        self.channels.len()
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.channels.len();
        if l == 0 || self.blocks.len() != l || self.fg_weights.len() != l {
            return Err(Error::Config(format!(
                "pyramid: channels ({}), blocks ({}) and fg_weights ({}) must have equal non-zero length",
                l,
                self.blocks.len(),
                self.fg_weights.len()
            )));
        }
        if self.channels.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "pyramid: channels must be strictly increasing, got {:?}",
                self.channels
            )));
        }
        if self.blocks.iter().any(|&b| b == 0) {
            return Err(Error::Config(
                "pyramid: every scale needs at least one block".to_string(),
            ));
        }
        if self.cardinality == 0 || self.channels.iter().any(|c| c % self.cardinality != 0) {
            return Err(Error::Config(format!(
                "pyramid: channels {:?} must be divisible by cardinality {}",
                self.channels, self.cardinality
            )));
        }
        if self.fg_weights.iter().any(|a| !a.is_finite() || *a < 0.0) {
            return Err(Error::Config(
                "pyramid: fg_weights must be finite and non-negative".to_string(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadConfig {
    pub anchor_width: f32,
    pub anchor_length: f32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlignerConfig {
    /// Number of ConvNeXt-style blocks before the channel projection.
    pub depth: usize,
    pub kernel: usize,
    pub expansion: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptConfig {
    pub rank: usize,
    pub init_std: f32,
    pub low_rank: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub base_epochs: usize,
    pub lift_epochs: usize,
    pub lr: f32,
    /// Neighbor slots joining the ego during homogeneous base training.
    pub base_neighbor_slots: Vec<usize>,
    pub stage2_include_ego: bool,
    pub focal_alpha: f32,
    pub focal_gamma: f32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub nms_iou: f32,
    pub score_threshold: f32,
    /// Families added one at a time after the ego.
    pub scenario: Vec<String>,
}

/// Optional name-pattern overrides for stage plans. A pattern is an exact
/// name or a prefix ending in `*`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StagePlanOverrides {
    #[serde(default)]
    pub base_trainable: Option<Vec<String>>,
    #[serde(default)]
    pub lift_trainable: Option<Vec<String>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub grid: GridConfig,
    pub scene: SceneConfig,
    pub unified_channels: usize,
    pub ego_family: String,
    pub families: Vec<FamilySpec>,
    pub pyramid: PyramidConfig,
    pub head: HeadConfig,
    pub aligner: AlignerConfig,
    pub prompt: PromptConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub sweep_ranks: Vec<usize>,
    #[serde(default)]
    pub stage_plans: StagePlanOverrides,
}

impl ExperimentConfig {
    pub fn family(&self, id: &str) -> Result<&FamilySpec> {
        self.families
            .iter()
            .find(|f| f.id == id)
            .ok_or_else(|| Error::Config(format!("family `{id}` is not defined")))
    }

    pub fn ego(&self) -> Result<&FamilySpec> {
        self.family(&self.ego_family)
    }

    /// Non-ego families in declaration order; the position is the neighbor slot.
    pub fn hetero_families(&self) -> impl Iterator<Item = &FamilySpec> {
        self.families
            .iter()
            .filter(move |f| f.id != self.ego_family)
    }

    pub fn slot_of(&self, family: &str) -> Result<usize> {
        self.hetero_families()
            .position(|f| f.id == family)
            .ok_or_else(|| Error::Config(format!("`{family}` is not a heterogeneous family")))
    }

    pub fn validate(&self) -> Result<()> {
        let levels = self.pyramid.scales();
        self.pyramid.validate()?;
        let div = 1usize << levels;
        if self.grid.height % div != 0 || self.grid.width % div != 0 || self.grid.height == 0 {
            return Err(Error::Config(format!(
                "grid {}x{} must be divisible by 2^{levels}",
                self.grid.height, self.grid.width
            )));
        }
        if !(self.grid.resolution > 0.0) {
            return Err(Error::Config(
                "grid.resolution must be positive".to_string(),
            ));
        }
        let s = &self.scene;
        if s.min_objects > s.max_objects {
            return Err(Error::Config(
                "scene.min_objects exceeds scene.max_objects".to_string(),
            ));
        }
        for r in [s.width_range, s.length_range] {
            if !(r[0] > 0.0 && r[0] <= r[1]) {
                return Err(Error::Config(format!("invalid size range {r:?}")));
            }
        }
        let mut seen: Vec<&str> = Vec::new();
        for f in &self.families {
            if seen.contains(&f.id.as_str()) {
                return Err(Error::Config(format!("family `{}` defined twice", f.id)));
            }
            seen.push(&f.id);
            let e = &f.encoder;
            if e.out_channels == 0
                || e.kernel % 2 == 0
                || e.enc_widths.iter().chain(&e.bev_widths).any(|&w| w == 0)
            {
                return Err(Error::Config(format!(
                    "family `{}`: widths must be >= 1 and kernel odd",
                    f.id
                )));
            }
        }
        let ego = self.ego()?;
        if ego.encoder.out_channels != self.unified_channels {
            return Err(Error::Config(format!(
                "ego family `{}` outputs {} channels but unified_channels is {}",
                ego.id, ego.encoder.out_channels, self.unified_channels
            )));
        }
        let n_hetero = self.hetero_families().count();
        if n_hetero > s.neighbor_slots.len() {
            return Err(Error::Config(format!(
                "{n_hetero} heterogeneous families but only {} neighbor slots",
                s.neighbor_slots.len()
            )));
        }
        if let Some(&bad) = self
            .train
            .base_neighbor_slots
            .iter()
            .find(|&&k| k >= s.neighbor_slots.len())
        {
            return Err(Error::Config(format!(
                "train.base_neighbor_slots references missing slot {bad}"
            )));
        }
        for id in &self.eval.scenario {
            self.slot_of(id)?;
        }
        if self.prompt.rank == 0 || self.sweep_ranks.contains(&0) {
            return Err(Error::Config("prompt rank must be >= 1".to_string()));
        }
        if self.aligner.kernel % 2 == 0 || self.aligner.expansion == 0 {
            return Err(Error::Config(
                "aligner kernel must be odd and expansion >= 1".to_string(),
            ));
        }
        if !(self.train.lr > 0.0) {
            return Err(Error::Config("train.lr must be positive".to_string()));
        }
        Ok(())
    }

    /// Built-in desk-scale configuration.
    pub fn desk() -> Self {
        let slot = |x: f64, y: f64| PoseSpec {
            x,
            y,
            yaw: 0.0,
            jitter_xy: 0.3,
            jitter_yaw: 0.05,
        };
        let sensor = |range: f32,
                      noise: f32,
                      blur: usize,
                      drop: f32,
                      bias: f32,
                      gain: [f32; 4],
                      phantoms: usize| SensorSpec {
            range,
            phantoms,
            noise_std: noise,
            blur_radius: blur,
            far_dropout: drop,
            range_bias: bias,
            gain,
        };
        let enc = |enc: Vec<usize>, bev: Vec<usize>, act: Activation, out: usize| EncoderSpec {
            enc_widths: enc,
            bev_widths: bev,
            kernel: 3,
            activation: act,
            out_channels: out,
        };
        ExperimentConfig {
            grid: GridConfig {
                height: 32,
                width: 64,
                resolution: 0.4,
            },
            scene: SceneConfig {
                min_objects: 4,
                max_objects: 8,
                width_range: [1.7, 2.1],
                length_range: [3.9, 4.8],
                axis_aligned_fraction: 0.8,
                heading_jitter: 0.1,
                spacing: 0.6,
                neighbor_slots: vec![slot(8.0, 0.0), slot(-8.0, 0.0), slot(2.0, 3.0)],
                train_samples: 200,
                test_samples: 60,
            },
            unified_channels: 8,
            ego_family: "m1".to_string(),
            families: vec![
                FamilySpec {
                    id: "m1".to_string(),
                    seed: 101,
                    sensor: sensor(6.5, 0.02, 0, 0.0, 0.0, [1.0, 1.0, 1.0, 1.0], 0),
                    encoder: enc(vec![8], vec![], Activation::Relu, 8),
                },
                FamilySpec {
                    id: "m2".to_string(),
                    seed: 202,
                    sensor: sensor(6.5, 0.08, 1, 0.15, 0.6, [0.8, 1.2, 1.2, 0.6], 4),
                    encoder: enc(vec![16, 32], vec![32, 32, 32], Activation::Gelu, 12),
                },
                FamilySpec {
                    id: "m3".to_string(),
                    seed: 303,
                    sensor: sensor(6.5, 0.04, 0, 0.05, 0.3, [1.3, 0.9, 0.9, 1.0], 3),
                    encoder: enc(vec![16, 32], vec![32, 32, 32], Activation::Relu, 10),
                },
                FamilySpec {
                    id: "m4".to_string(),
                    seed: 404,
                    sensor: sensor(5.5, 0.1, 1, 0.2, 0.5, [0.7, 1.0, 1.0, 0.8], 4),
                    encoder: enc(vec![16, 32], vec![48, 48], Activation::Sigmoid, 16),
                },
            ],
            pyramid: PyramidConfig {
                channels: vec![8, 16, 32],
                blocks: vec![1, 1, 1],
                cardinality: 4,
                fg_weights: vec![0.4, 0.4, 0.4],
            },
            head: HeadConfig {
                anchor_width: 2.0,
                anchor_length: 4.0,
            },
            aligner: AlignerConfig {
                depth: 1,
                kernel: 7,
                expansion: 4,
            },
            prompt: PromptConfig {
                rank: 8,
                init_std: 0.02,
                low_rank: true,
            },
            train: TrainConfig {
                base_epochs: 30,
                lift_epochs: 30,
                lr: 0.002,
                base_neighbor_slots: vec![0],
                stage2_include_ego: true,
                focal_alpha: 0.25,
                focal_gamma: 2.0,
            },
            eval: EvalConfig {
                nms_iou: 0.15,
                score_threshold: 0.1,
                scenario: vec!["m2".to_string(), "m3".to_string(), "m4".to_string()],
            },
            sweep_ranks: vec![4, 8, 16, 32, 64],
            stage_plans: StagePlanOverrides::default(),
        }
    }

    /// Architecture at the published scale: 64-channel unified space on a
    /// 128 x 256 grid, pyramid ladder [64, 128, 256] with [3, 5, 8] blocks.
    /// Used for parameter and FLOP accounting only.
    pub fn full_scale() -> Self {
        let mut cfg = Self::desk();
        cfg.grid = GridConfig {
            height: 128,
            width: 256,
            resolution: 0.8,
        };
        cfg.unified_channels = 64;
        cfg.pyramid = PyramidConfig {
            channels: vec![64, 128, 256],
            blocks: vec![3, 5, 8],
            cardinality: 32,
            fg_weights: vec![0.4, 0.4, 0.4],
        };
        cfg.train.base_epochs = 25;
        cfg.train.lift_epochs = 25;
        let e = &mut cfg.families;
        e[0].encoder = EncoderSpec {
            enc_widths: vec![64, 64],
            bev_widths: vec![64, 128, 128],
            kernel: 3,
            activation: Activation::Relu,
            out_channels: 64,
        };
        e[1].encoder = EncoderSpec {
            enc_widths: vec![64, 128, 128, 256],
            bev_widths: vec![256, 256, 256],
            kernel: 3,
            activation: Activation::Gelu,
            out_channels: 128,
        };
        e[2].encoder = EncoderSpec {
            enc_widths: vec![64, 128],
            bev_widths: vec![128, 256, 256],
            kernel: 3,
            activation: Activation::Relu,
            out_channels: 256,
        };
        e[3].encoder = EncoderSpec {
            enc_widths: vec![64, 128, 256, 256],
            bev_widths: vec![256, 256, 256, 256],
            kernel: 3,
            activation: Activation::Sigmoid,
            out_channels: 128,
        };
        cfg
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn built_in_configs_validate() {
        ExperimentConfig::desk().validate().unwrap();
        ExperimentConfig::full_scale().validate().unwrap();
    }

    #[test]
    fn pyramid_lengths_must_agree() {
        let mut p = ExperimentConfig::desk().pyramid;
        p.fg_weights.pop();
        assert!(p.validate().is_err());
    }

    #[test]
    fn pyramid_channels_strictly_increase() {
        let mut p = ExperimentConfig::desk().pyramid;
        p.channels = vec![16, 16, 32];
        assert!(p.validate().is_err());
    }

    #[test]
    fn undefined_scenario_family_rejected() {
        let mut c = ExperimentConfig::desk();
        c.eval.scenario.push("m9".to_string());
        assert!(c.validate().is_err());
    }

    #[test]
    fn cell_centers_round_trip() {
        let g = ExperimentConfig::desk().grid;
        let (x, y) = g.cell_center(3, 17);
        let (r, c) = g.to_cell(x, y);
        assert!((r - 3.0).abs() < 1e-9 && (c - 17.0).abs() < 1e-9);
    }
}
