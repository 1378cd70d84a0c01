//! Detection head, box coding and the 1x1 foreground estimators.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::{FRAC_PI_4, PI};

#[allow(unused_imports)]
use num_traits::Float;
use rand::Rng;

use super::layers::{Conv, Init};
use crate::autodiff::{sigmoid, ConvSpec, Graph, ParameterStore, Var};
use crate::config::{GridConfig, HeadConfig};
use crate::error::{Error, Result};
use crate::geometry::{wrap_angle, GtBox};
use crate::tensor::{Real, Tensor};

/// Regression channels: dx, dy, log w, log l, heading residual.
pub const REG_CHANNELS: usize = 5;

/// Splits a heading into a residual in `[-pi/4, 3pi/4)` and a direction bin `[theta >= 0]`.
pub fn heading_residual(theta: f64) -> (f64, u8) {
    let r = theta - PI * ((theta + FRAC_PI_4) / PI).floor();
    (r, u8::from(theta >= 0.0))
}

/// Inverse of [`heading_residual`]; the bin picks the half-turn.
pub fn heading_from(r: f64, bin: u8) -> f64 {
    let t = match (bin, r >= 0.0) {
        (1, true) | (0, false) => r,
        (1, false) => r + PI,
        _ => r - PI,
    };
    wrap_angle(t)
}

/// Single-anchor box coding relative to a cell center.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoxCoder {
    pub anchor_width: f32,
    pub anchor_length: f32,
}

impl BoxCoder {
    pub fn new(cfg: &HeadConfig) -> Self {
        Self {
            anchor_width: cfg.anchor_width,
            anchor_length: cfg.anchor_length,
        }
    }

    pub fn diagonal(&self) -> f64 {
        let (w, l) = (self.anchor_width as f64, self.anchor_length as f64);
        (w * w + l * l).sqrt()
    }

    pub fn encode(&self, b: &GtBox, cx: f64, cy: f64) -> ([f32; REG_CHANNELS], u8) {
        let d = self.diagonal();
        let (r, bin) = heading_residual(b.heading as f64);
        (
            [
                ((b.x as f64 - cx) / d) as f32,
                ((b.y as f64 - cy) / d) as f32,
                (b.width as f64 / self.anchor_width as f64).ln() as f32,
                (b.length as f64 / self.anchor_length as f64).ln() as f32,
                r as f32,
            ],
            bin,
        )
    }

    pub fn decode(&self, reg: [f32; REG_CHANNELS], bin: u8, cx: f64, cy: f64) -> GtBox {
        let d = self.diagonal();
        GtBox {
            x: (cx + reg[0] as f64 * d) as f32,
            y: (cy + reg[1] as f64 * d) as f32,
            width: ((reg[2] as f64).exp() * self.anchor_width as f64) as f32,
            length: ((reg[3] as f64).exp() * self.anchor_length as f64) as f32,
            heading: heading_from(reg[4] as f64, bin) as f32,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct HeadOut {
    /// `[1, H, W]` class logits.
    pub cls: Var,
    /// `[5, H, W]`.
    pub reg: Var,
    /// `[2, H, W]` direction logits.
    pub dir: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Head {
    pub in_c: usize,
    pub cls: Conv,
    pub reg: Conv,
    pub dir: Conv,
    pub coder: BoxCoder,
}

impl Head {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParameterStore<T>,
        in_c: usize,
        cfg: &HeadConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let pw = ConvSpec::same(1);
        Ok(Self {
            in_c,
            cls: Conv::new(store, "head.cls", in_c, 1, 1, pw, true, Init::Zero, rng)?,
            reg: Conv::new(
                store,
                "head.reg",
                in_c,
                REG_CHANNELS,
                1,
                pw,
                true,
                Init::Normal(0.01),
                rng,
            )?,
            dir: Conv::new(
                store,
                "head.dir",
                in_c,
                2,
                1,
                pw,
                true,
                Init::Normal(0.01),
                rng,
            )?,
            coder: BoxCoder::new(cfg),
        })
    }

    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParameterStore<T>,
        h_e: Var,
    ) -> Result<HeadOut> {
        let (c, _, _) = g.value(h_e).dims3()?;
        if c != self.in_c {
            return Err(Error::ShapeMismatch {
                op: "detect",
                expected: vec![self.in_c],
                found: vec![c],
            });
        }
        Ok(HeadOut {
            cls: self.cls.forward(g, store, h_e)?,
            reg: self.reg.forward(g, store, h_e)?,
            dir: self.dir.forward(g, store, h_e)?,
        })
    }

    pub fn param_count(&self) -> usize {
        self.cls.param_count() + self.reg.param_count() + self.dir.param_count()
    }

    pub fn macs(&self, h: usize, w: usize) -> usize {
        self.cls.macs(h, w) + self.reg.macs(h, w) + self.dir.macs(h, w)
    }
}

/// Per-cell decoded head output.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectionMap {
    pub prob: Vec<f32>,
    pub boxes: Vec<GtBox>,
    /// Probability of direction bin 1.
    pub dir_prob: Vec<f32>,
}

/// Decodes head tensors into a per-cell detection map.
pub fn detect(
    cls: &Tensor,
    reg: &Tensor,
    dir: &Tensor,
    coder: &BoxCoder,
    grid: &GridConfig,
) -> Result<DetectionMap> {
    let (h, w) = (grid.height, grid.width);
    let hw = h * w;
    for (t, c) in [(cls, 1), (reg, REG_CHANNELS), (dir, 2)] {
        if t.shape() != [c, h, w] {
            return Err(Error::ShapeMismatch {
                op: "detect",
                expected: vec![c, h, w],
                found: t.shape().to_vec(),
            });
        }
    }
    let (mut prob, mut boxes, mut dir_prob) = (
        Vec::with_capacity(hw),
        Vec::with_capacity(hw),
        Vec::with_capacity(hw),
    );
    for cell in 0..hw {
        let (cx, cy) = grid.cell_center(cell / w, cell % w);
        prob.push(sigmoid(cls.data()[cell]));
        let p1 = sigmoid(dir.data()[hw + cell] - dir.data()[cell]);
        dir_prob.push(p1);
        let r: [f32; REG_CHANNELS] = core::array::from_fn(|k| reg.data()[k * hw + cell]);
        boxes.push(coder.decode(r, u8::from(p1 >= 0.5), cx, cy));
    }
    Ok(DetectionMap {
        prob,
        boxes,
        dir_prob,
    })
}

/// One 1x1 `C_l -> 1` occupancy estimator per scale.
#[derive(Clone, Debug, PartialEq)]
pub struct ForegroundSet {
    pub prefix: String,
    pub scales: Vec<Conv>,
}

impl ForegroundSet {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParameterStore<T>,
        prefix: &str,
        channels: &[usize],
        rng: &mut R,
    ) -> Result<Self> {
        let scales = channels
            .iter()
            .enumerate()
            .map(|(l, &c)| {
                Conv::new(
                    store,
                    &format!("{prefix}.fg{}", l + 1),
                    c,
                    1,
                    1,
                    ConvSpec::same(1),
                    true,
                    Init::Normal(0.01),
                    rng,
                )
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            prefix: prefix.into(),
            scales,
        })
    }

    /// Raw occupancy logits `[1, H_l, W_l]` for scale index `l` (0-based).
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParameterStore<T>,
        l: usize,
        x: Var,
    ) -> Result<Var> {
        self.scales
            .get(l)
            .ok_or(Error::Empty("foreground scale"))?
            .forward(g, store, x)
    }

    pub fn param_count(&self) -> usize {
        self.scales.iter().map(Conv::param_count).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn residual_bins() {
        assert_eq!(heading_residual(0.3).1, 1);
        assert_eq!(heading_residual(-0.3).1, 0);
        for t in [-3.1, -2.0, -0.7, -0.1, 0.0, 0.2, 1.5, 2.5, 3.1] {
            let (r, b) = heading_residual(t);
            assert!((-FRAC_PI_4..3.0 * FRAC_PI_4).contains(&r));
            assert!((heading_from(r, b) - t).abs() < 1e-12, "{t}");
        }
    }

    #[test]
    fn zero_regression_decodes_to_anchor() {
        let c = BoxCoder {
            anchor_width: 2.0,
            anchor_length: 4.0,
        };
        let b = c.decode([0.0; 5], 1, 1.2, -0.4);
        assert_eq!(
            b,
            GtBox {
                x: 1.2,
                y: -0.4,
                width: 2.0,
                length: 4.0,
                heading: 0.0
            }
        );
    }
}
