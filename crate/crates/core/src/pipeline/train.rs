//! Single-sample Adam training loop shared by both stages.

use alloc::format;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::loss::LossReport;
use crate::scene::{mix_seed, rng_from};

use super::adam::AdamState;
use super::data::{FeatureCache, Prepared};
use super::model::Model;
use super::plan::{Stage, StagePlan};

/// One row of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub stage: Stage,
    pub epoch: usize,
    pub sample: usize,
    pub report: LossReport,
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Stops after this many optimizer steps even mid-epoch.
    pub max_steps: Option<usize>,
    /// Overrides the plan's epoch count.
    pub epochs: Option<usize>,
}

/// Applies `plan` to the model's store, then runs Adam over `data` with one
/// sample per step in a seeded per-epoch order.
///
/// Per-sample feature caches are reset at the start; frozen sub-networks are
/// evaluated once per sample and reused.
pub fn train(
    model: &mut Model<f32>,
    plan: &StagePlan,
    data: &mut [Prepared],
    seed: u64,
    opts: &TrainOptions,
    mut log: impl FnMut(&LogRow),
) -> Result<Vec<LogRow>> {
    if data.is_empty() {
        return Err(Error::Empty("training set"));
    }
    plan.apply(&mut model.store)?;
    model.store.zero_grads();
    for p in data.iter_mut() {
        p.cache = FeatureCache::default();
    }
    let mut adam = AdamState::new(&model.store, plan.lr as f64);
    let mut rows = Vec::new();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let epochs = opts.epochs.unwrap_or(plan.epochs);
    let mut step = 0;
    'outer: for epoch in 0..epochs {
        order.sort_unstable();
        order.shuffle(&mut rng_from(mix_seed(seed, 0xE90C + epoch as u64)));
        for &i in &order {
            if opts.max_steps.is_some_and(|m| step >= m) {
                break 'outer;
            }
            let sample = &mut data[i];
            let mut g = Graph::<f32>::new();
            let (state, out) = model.forward(&mut g, sample, true)?;
            let (loss, report) = model.loss(&mut g, sample, &state, &out)?;
            if !report.total.is_finite() || !g.value(loss).is_finite() {
                return Err(Error::NonFiniteLoss {
                    step,
                    detail: format!("sample {} epoch {epoch}: {report:?}", sample.index),
                });
            }
            g.backward(loss, &mut model.store)?;
            adam.step(&mut model.store)?;
            let row = LogRow {
                step,
                stage: plan.stage,
                epoch,
                sample: sample.index,
                report,
            };
            log(&row);
            rows.push(row);
            step += 1;
        }
    }
    Ok(rows)
}
