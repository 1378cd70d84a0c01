//! Experiment steps shared by the command line and the tests.

use hetcp_core::config::ExperimentConfig;
use hetcp_core::pipeline::account::forward_flops;
use hetcp_core::pipeline::{
    base_agents, frame_of, hetero_agents, prepare, summarize, train, AblationRow, EvalResult,
    LogRow, Model, Prepared, PromptInit, SampleRecord, StagePlan, TrainOptions,
};

use crate::error::Result;
use crate::parallel::par_map;

pub fn prepare_base(cfg: &ExperimentConfig, records: &[SampleRecord]) -> Result<Vec<Prepared>> {
    par_map(records, |r| Ok(prepare(cfg, r, base_agents(cfg, r)?)?))
}

/// Stage-2 samples: the new family at its slot, with the ego when configured.
pub fn prepare_hetero(
    cfg: &ExperimentConfig,
    records: &[SampleRecord],
    family: &str,
) -> Result<Vec<Prepared>> {
    let fams = [family.to_string()];
    par_map(records, |r| {
        Ok(prepare(
            cfg,
            r,
            hetero_agents(cfg, r, &fams, cfg.train.stage2_include_ego)?,
        )?)
    })
}

/// Stage 1 from scratch.
pub fn run_base(
    cfg: &ExperimentConfig,
    train_set: &[SampleRecord],
    seed: u64,
    opts: &TrainOptions,
) -> Result<(Model<f32>, Vec<LogRow>)> {
    let mut model = Model::<f32>::new(cfg, seed)?;
    let mut data = prepare_base(cfg, train_set)?;
    let rows = train(
        &mut model,
        &StagePlan::base(cfg),
        &mut data,
        seed,
        opts,
        |_| {},
    )?;
    Ok((model, rows))
}

/// Which stage-2 parameters a run trains.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Lift,
    /// Aligner and new foreground estimator; the prompt stays at zero.
    AlignerOnly,
    Ablation(AblationRow),
}

impl Variant {
    pub fn plan(self, cfg: &ExperimentConfig, family: &str) -> StagePlan {
        match self {
            Variant::Lift => StagePlan::lift(cfg, family),
            Variant::AlignerOnly => StagePlan::aligner_only(cfg, family),
            Variant::Ablation(r) => StagePlan::ablation(cfg, family, r),
        }
    }

    pub fn init(self) -> PromptInit {
        match self {
            Variant::Lift => PromptInit::Random,
            Variant::AlignerOnly => PromptInit::Zero,
            Variant::Ablation(r) if r.uses_prompt() => PromptInit::Random,
            Variant::Ablation(_) => PromptInit::Zero,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Variant::Lift => "lift",
            Variant::AlignerOnly => "aligner-only",
            Variant::Ablation(r) => r.label(),
        }
    }
}

/// Adds a pair for `family` to a copy of `base` and trains it.
pub fn run_lift(
    base: &Model<f32>,
    train_set: &[SampleRecord],
    family: &str,
    rank: usize,
    variant: Variant,
    seed: u64,
    opts: &TrainOptions,
) -> Result<(Model<f32>, StagePlan, Vec<LogRow>)> {
    let cfg = &base.cfg;
    let mut model = base.clone();
    model.add_lift(family, rank, cfg.prompt.low_rank, variant.init(), seed)?;
    let plan = variant.plan(cfg, family);
    let mut data = prepare_hetero(cfg, train_set, family)?;
    let rows = train(&mut model, &plan, &mut data, seed, opts, |_| {})?;
    Ok((model, plan, rows))
}

/// Further epochs on an already registered pair.
pub fn finetune(
    model: &mut Model<f32>,
    train_set: &[SampleRecord],
    family: &str,
    seed: u64,
    opts: &TrainOptions,
) -> Result<(StagePlan, Vec<LogRow>)> {
    let plan = StagePlan::lift(&model.cfg, family);
    let mut data = prepare_hetero(&model.cfg, train_set, family)?;
    let rows = train(model, &plan, &mut data, seed, opts, |_| {})?;
    Ok((plan, rows))
}

/// Analytic forward FLOPs with the model's registered prompt ranks.
pub fn scenario_flops(model: &Model<f32>, scenario: &[String]) -> Result<u64> {
    let rank = scenario
        .iter()
        .filter_map(|f| model.lifts.get(f))
        .map(|p| p.rank)
        .max()
        .unwrap_or(model.cfg.prompt.rank);
    Ok(forward_flops(&model.cfg, scenario, rank)?)
}

/// Evaluation with frames inferred in parallel. Fails before inference when
/// a scenario family has no pair.
pub fn evaluate_par(
    model: &Model<f32>,
    records: &[SampleRecord],
    scenario: &[String],
) -> Result<EvalResult> {
    model.check_dispatch(scenario.iter().map(String::as_str))?;
    let frames = par_map(records, |r| frame_of(model, &model.cfg, r, scenario))?;
    Ok(summarize(
        model,
        scenario,
        &frames,
        scenario_flops(model, scenario)?,
    )?)
}

/// Mean total loss of the last epoch of a log.
pub fn last_epoch_loss(rows: &[LogRow]) -> Option<f64> {
    let last = rows.last()?.epoch;
    let tail: Vec<f64> = rows
        .iter()
        .filter(|r| r.epoch == last)
        .map(|r| r.report.total as f64)
        .collect();
    Some(tail.iter().sum::<f64>() / tail.len() as f64)
}
