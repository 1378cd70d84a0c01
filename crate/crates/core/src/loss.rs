//! Detection and foreground losses and their fixed-weight total.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Weight of the regression term in the total.
pub const REG_WEIGHT: f64 = 2.0;
/// Weight of the direction term in the total.
pub const DIR_WEIGHT: f64 = 0.2;
pub const SMOOTH_L1_BETA: f64 = 1.0;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub focal: f32,
    pub smooth_l1: f32,
    pub dir: f32,
    pub foreground: Vec<f32>,
    pub total: f32,
}

impl LossReport {
    /// `focal + 2 smooth_l1 + 0.2 dir + sum_l alpha_l fg_l` from the stored components.
    pub fn recompute_total(&self, alpha: &[f32]) -> f64 {
        self.focal as f64
            + REG_WEIGHT * self.smooth_l1 as f64
            + DIR_WEIGHT * self.dir as f64
            + self
                .foreground
                .iter()
                .zip(alpha)
                .map(|(&f, &a)| a as f64 * f as f64)
                .sum::<f64>()
    }
}

fn positives<T: Real>(targets: &Tensor<T>) -> Result<usize> {
    let mut n = 0;
    for &y in targets.data() {
        if y == T::one() {
            n += 1;
        } else if y != T::zero() {
            return Err(Error::Precondition(format!(
                "focal targets must be 0 or 1, got {}",
                y.f64()
            )));
        }
    }
    Ok(n)
}

/// Sigmoid focal loss summed over cells and divided by `max(#positives, 1)`.
pub fn focal_loss<T: Real>(
    g: &mut Graph<T>,
    logits: Var,
    targets: &Tensor<T>,
    alpha: f32,
    gamma: f32,
) -> Result<Var> {
    if targets.numel() == 0 {
        return Err(Error::Empty("focal_loss targets"));
    }
    let npos = positives(targets)?;
    g.focal_loss(
        logits,
        targets,
        T::of(alpha as f64),
        T::of(gamma as f64),
        T::of(npos.max(1) as f64),
    )
}

/// Smooth-L1 over all channels of the masked cells, averaged over those cells.
pub fn smooth_l1_loss<T: Real>(
    g: &mut Graph<T>,
    pred: Var,
    target: &Tensor<T>,
    mask: &[bool],
) -> Result<Var> {
    let npos = mask.iter().filter(|&&m| m).count();
    if npos == 0 {
        return Err(Error::NoPositives("smooth_l1"));
    }
    g.smooth_l1(
        pred,
        target,
        mask,
        T::of(SMOOTH_L1_BETA),
        T::of(npos as f64),
    )
}

/// Two-bin softmax cross-entropy averaged over masked cells.
pub fn direction_loss<T: Real>(
    g: &mut Graph<T>,
    logits: Var,
    bins: &[u8],
    mask: &[bool],
) -> Result<Var> {
    let npos = mask.iter().filter(|&&m| m).count();
    if npos == 0 {
        return Err(Error::NoPositives("direction"));
    }
    g.direction_ce(logits, bins, mask, T::of(npos as f64))
}

/// Focal loss of each agent's occupancy logits against its mask, summed over agents.
pub fn foreground_loss<T: Real>(
    g: &mut Graph<T>,
    occupancy: &[Var],
    masks: &[&Tensor<T>],
    alpha: f32,
    gamma: f32,
) -> Result<Var> {
    if occupancy.len() != masks.len() || occupancy.is_empty() {
        return Err(Error::ShapeMismatch {
            op: "foreground_loss",
            expected: alloc::vec![occupancy.len()],
            found: alloc::vec![masks.len()],
        });
    }
    let mut terms = Vec::with_capacity(occupancy.len());
    for (&o, m) in occupancy.iter().zip(masks) {
        if g.value(o).shape() != m.shape() {
            return Err(Error::ShapeMismatch {
                op: "foreground_loss",
                expected: m.shape().to_vec(),
                found: g.value(o).shape().to_vec(),
            });
        }
        terms.push((focal_loss(g, o, m, alpha, gamma)?, 1.0));
    }
    g.combine(&terms)
}

/// Component losses of one step. Regression and direction are absent when
/// the sample has no positive cell.
#[derive(Clone, Debug)]
pub struct LossTerms {
    pub focal: Var,
    pub smooth_l1: Option<Var>,
    pub dir: Option<Var>,
    /// One per scale.
    pub foreground: Vec<Var>,
}

/// Weighted total with fixed weights 1, 2 and 0.2 and per-scale `alpha`.
pub fn total_loss<T: Real>(
    g: &mut Graph<T>,
    terms: &LossTerms,
    alpha: &[f32],
) -> Result<(Var, LossReport)> {
    if alpha.len() != terms.foreground.len() {
        return Err(Error::ShapeMismatch {
            op: "total_loss",
            expected: alloc::vec![terms.foreground.len()],
            found: alloc::vec![alpha.len()],
        });
    }
    let mut parts = alloc::vec![(terms.focal, 1.0)];
    parts.extend(terms.smooth_l1.map(|v| (v, REG_WEIGHT)));
    parts.extend(terms.dir.map(|v| (v, DIR_WEIGHT)));
    parts.extend(
        terms
            .foreground
            .iter()
            .zip(alpha)
            .map(|(&v, &a)| (v, a as f64)),
    );
    let total = g.combine(&parts)?;
    let scalar = |v: Option<Var>| v.map_or(0.0, |v| g.value(v).item().f64() as f32);
    let report = LossReport {
        focal: scalar(Some(terms.focal)),
        smooth_l1: scalar(terms.smooth_l1),
        dir: scalar(terms.dir),
        foreground: terms.foreground.iter().map(|&v| scalar(Some(v))).collect(),
        total: scalar(Some(total)),
    };
    Ok((total, report))
}
