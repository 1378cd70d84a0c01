//! Command-line definitions and command bodies.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use hetcp_core::config::ExperimentConfig;
use hetcp_core::pipeline::account::{
    ablation_params, forward_flops, lift_params, params_table, store_prefix, store_trainable,
};
use hetcp_core::pipeline::gradsuite::{e2e_check, op_checks, E2E_TOL, OP_TOL};
use hetcp_core::pipeline::{progressive, AblationRow, LogRow, TrainOptions};
use hetcp_core::prompt::prompt_param_count;
use serde::Serialize;
use serde_json::json;

use crate::config_io::{config_hash, load_config};
use crate::dataset::{self, Dataset};
use crate::error::{CliError, Result};
use crate::model_io::{lift_file, load_base, load_lift, save_base};
use crate::report::{write_loss_csv, write_pr_csv, write_rows_csv, Report};
use crate::run::{
    evaluate_par, finetune, last_epoch_loss, run_base, run_lift, scenario_flops, Variant,
};

#[derive(Debug, Parser)]
#[command(
    name = "hetcp",
    version,
    about = "Heterogeneous collaborative BEV detection with low-rank feature prompts"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Experiment configuration (JSON).
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Also write the JSON report here.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct Schedule {
    /// Overrides the configured epoch count.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Stops after this many optimizer steps.
    #[arg(long)]
    pub max_steps: Option<usize>,
}

impl Schedule {
    fn options(&self) -> TrainOptions {
        TrainOptions {
            epochs: self.epochs,
            max_steps: self.max_steps,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    Desk,
    Full,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Writes a synthetic dataset and its manifest.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Stage 1: homogeneous training of the ego encoder, pyramid and head.
    TrainBase {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Output checkpoint.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        schedule: Schedule,
        /// Per-step loss log (CSV).
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Stage 2: trains one family's aligner, prompt and foreground estimator.
    TrainLift {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        family: String,
        #[arg(long)]
        out: PathBuf,
        /// Prompt rank; defaults to the configured rank.
        #[arg(long)]
        rank: Option<usize>,
        /// Keeps the prompt at zero and trains the aligner and estimator only.
        #[arg(long, conflicts_with = "finetune_epochs")]
        aligner_only: bool,
        /// Continues training the pair in `--init` for this many epochs.
        #[arg(long, requires = "init")]
        finetune_epochs: Option<usize>,
        /// Existing lift checkpoint for `--finetune-epochs`.
        #[arg(long)]
        init: Option<PathBuf>,
        #[command(flatten)]
        schedule: Schedule,
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Progressive evaluation: the ego alone, then one added family at a time.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        base: PathBuf,
        /// Lift checkpoints, one per non-ego family in the scenario.
        #[arg(long = "lift")]
        lifts: Vec<PathBuf>,
        /// Families in order of addition, e.g. "+m2,+m3,+m4".
        #[arg(long)]
        scenario: Option<String>,
        /// Precision-recall curves (CSV).
        #[arg(long)]
        curves: Option<PathBuf>,
    },
    /// Freeze/tune ablation over the five stage-2 rows for one family.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        family: String,
        #[command(flatten)]
        schedule: Schedule,
        /// Row table (CSV).
        #[arg(long)]
        table: Option<PathBuf>,
    },
    /// Stage 2 at each prompt rank.
    SweepRank {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        family: String,
        /// Comma-separated ranks; defaults to the configured sweep.
        #[arg(long, value_delimiter = ',')]
        ranks: Option<Vec<usize>>,
        #[command(flatten)]
        schedule: Schedule,
        #[arg(long)]
        table: Option<PathBuf>,
    },
    /// Analytic parameter and FLOP accounting.
    ParamsReport {
        #[arg(long, conflicts_with = "preset")]
        config: Option<PathBuf>,
        #[arg(long)]
        preset: Option<Preset>,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Finite-difference checks of every graph op and of a stage-2 pass.
    GradCheck {
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        report: Option<PathBuf>,
    },
}

/// Outcome of a command: the report plus where to write it.
pub struct Outcome {
    pub report: Report,
    pub path: Option<PathBuf>,
    /// Failure to raise after the report is written.
    pub failure: Option<CliError>,
}

fn done(report: Report, path: &Option<PathBuf>) -> Result<Outcome> {
    Ok(Outcome {
        report,
        path: path.clone(),
        failure: None,
    })
}

/// Family list from "+m2,+m3" or "m2,m3".
pub fn parse_scenario(s: &str) -> Vec<String> {
    s.split(',')
        .map(|p| p.trim().trim_start_matches('+').trim().to_string())
        .filter(|p| !p.is_empty())
        .collect()
}

fn loss_metrics(rows: &[LogRow]) -> serde_json::Value {
    json!({
        "steps": rows.len(),
        "epochs": rows.last().map_or(0, |r| r.epoch + 1),
        "last_epoch_loss": last_epoch_loss(rows),
        "final_step_loss": rows.last().map(|r| r.report.total),
    })
}

fn write_log(path: &Option<PathBuf>, rows: &[LogRow]) -> Result<()> {
    path.as_deref().map_or(Ok(()), |p| write_loss_csv(p, rows))
}

fn load_data(cfg: &ExperimentConfig, dir: &Path) -> Result<Dataset> {
    dataset::load(cfg, dir)
}

pub fn execute(cli: Cli) -> Result<Outcome> {
    match cli.command {
        Command::GenData {
            config,
            out,
            seed,
            report,
        } => {
            let cfg = load_config(&config)?;
            let s = dataset::generate(&cfg, seed, &out)?;
            let mut r = Report::new("gen-data", config_hash(&cfg), Some(seed));
            r.metrics = serde_json::to_value(&s).expect("summary serializes");
            done(r, &report)
        }
        Command::TrainBase {
            common,
            data,
            out,
            schedule,
            log,
        } => {
            let cfg = load_config(&common.config)?;
            let ds = load_data(&cfg, &data)?;
            let (model, rows) = run_base(&cfg, &ds.train, common.seed, &schedule.options())?;
            save_base(&model, common.seed, &out)?;
            write_log(&log, &rows)?;
            let mut r = Report::new("train-base", config_hash(&cfg), Some(common.seed));
            r.metrics = loss_metrics(&rows);
            r.params = json!({ "trainable": store_trainable(&model.store), "total": model.store.iter().map(|(_, p)| p.tensor.numel()).sum::<usize>() });
            r.flops = json!({ "forward": forward_flops(&cfg, &[], cfg.prompt.rank)? });
            done(r, &common.report)
        }
        Command::TrainLift {
            common,
            data,
            base,
            family,
            out,
            rank,
            aligner_only,
            finetune_epochs,
            init,
            schedule,
            log,
        } => {
            let cfg = load_config(&common.config)?;
            let ds = load_data(&cfg, &data)?;
            let base_model = load_base(&cfg, &base)?;
            let (model, plan, rows, label) = match (finetune_epochs, init) {
                (Some(n), Some(init)) => {
                    let mut m = base_model;
                    let fam = load_lift(&mut m, &init)?;
                    if fam != family {
                        return Err(CliError::config(format!(
                            "{}: pair is for `{fam}`, not `{family}`",
                            init.display()
                        )));
                    }
                    let opts = TrainOptions {
                        epochs: Some(n),
                        max_steps: schedule.max_steps,
                    };
                    let (plan, rows) = finetune(&mut m, &ds.train, &family, common.seed, &opts)?;
                    (m, plan, rows, "finetune")
                }
                _ => {
                    let variant = if aligner_only {
                        Variant::AlignerOnly
                    } else {
                        Variant::Lift
                    };
                    let rank = rank.unwrap_or(cfg.prompt.rank);
                    let (m, plan, rows) = run_lift(
                        &base_model,
                        &ds.train,
                        &family,
                        rank,
                        variant,
                        common.seed,
                        &schedule.options(),
                    )?;
                    (m, plan, rows, variant.label())
                }
            };
            lift_file(&model, &family, &plan, label, common.seed)?.write(&out)?;
            write_log(&log, &rows)?;
            let pair = &model.lifts[&family];
            let formula = lift_params(&cfg, &family, pair.rank, pair.low_rank)?;
            let mut r = Report::new("train-lift", config_hash(&cfg), Some(common.seed));
            r.metrics = loss_metrics(&rows);
            r.metrics["variant"] = json!(label);
            r.metrics["family"] = json!(family);
            r.params = json!({
                "trainable": store_trainable(&model.store),
                "formula": formula.total(),
                "aligner": formula.aligner,
                "prompt": formula.prompt,
                "foreground": formula.foreground,
                "rank": pair.rank,
            });
            r.flops = json!({ "forward": scenario_flops(&model, std::slice::from_ref(&family))? });
            done(r, &common.report)
        }
        Command::Eval {
            common,
            data,
            base,
            lifts,
            scenario,
            curves,
        } => {
            let cfg = load_config(&common.config)?;
            let ds = load_data(&cfg, &data)?;
            let mut model = load_base(&cfg, &base)?;
            for l in &lifts {
                load_lift(&mut model, l)?;
            }
            let scenario = scenario
                .as_deref()
                .map_or_else(|| cfg.eval.scenario.clone(), parse_scenario);
            model.check_dispatch(scenario.iter().map(String::as_str))?;
            let ego = evaluate_par(&model, &ds.test, &[])?;
            let steps = progressive(&scenario)
                .iter()
                .map(|s| evaluate_par(&model, &ds.test, s))
                .collect::<Result<Vec<_>>>()?;
            if let Some(p) = &curves {
                let mut all = vec![
                    ("ego".to_string(), 0.5, &ego.curve50[..]),
                    ("ego".to_string(), 0.7, &ego.curve70[..]),
                ];
                for s in &steps {
                    let label = format!("+{}", s.scenario.join(",+"));
                    all.push((label.clone(), 0.5, &s.curve50[..]));
                    all.push((label, 0.7, &s.curve70[..]));
                }
                write_pr_csv(p, &all)?;
            }
            let brief = |e: &hetcp_core::pipeline::EvalResult| json!({ "scenario": e.scenario, "ap50": e.ap50, "ap70": e.ap70, "detections": e.detections, "frames": e.frames, "transmission": e.transmission });
            let mut r = Report::new("eval", config_hash(&cfg), Some(common.seed));
            r.metrics = json!({ "ego": brief(&ego), "progressive": steps.iter().map(brief).collect::<Vec<_>>() });
            r.params = json!({
                "per_family": scenario.iter().map(|f| (f.clone(), ["aligner.", "lift.", "foreground_new."].iter().map(|p| store_prefix(&model.store, &format!("{p}{f}."))).sum::<usize>())).collect::<std::collections::BTreeMap<_, _>>(),
            });
            r.flops = json!({ "ego": ego.flops, "progressive": steps.iter().map(|s| s.flops).collect::<Vec<_>>() });
            done(r, &common.report)
        }
        Command::Ablate {
            common,
            data,
            base,
            family,
            schedule,
            table,
        } => {
            let cfg = load_config(&common.config)?;
            let ds = load_data(&cfg, &data)?;
            let base_model = load_base(&cfg, &base)?;
            let rows = ablate(&base_model, &ds, &family, common.seed, &schedule.options())?;
            if let Some(p) = &table {
                write_rows_csv(p, &rows)?;
            }
            let mut r = Report::new("ablate", config_hash(&cfg), Some(common.seed));
            let get = |row: AblationRow| {
                rows.iter()
                    .find(|x| x.row == row.label())
                    .map_or(0, |x| x.trainable_params)
            };
            let ratio = get(AblationRow::Lift) as f64 / get(AblationRow::EncBev).max(1) as f64;
            r.metrics = json!({ "family": family, "rows": rows });
            r.params = json!({ "lift_over_enc_bev": ratio, "rows": rows.iter().map(|x| (x.row.clone(), x.trainable_params)).collect::<std::collections::BTreeMap<_, _>>() });
            r.flops = json!({ "forward": forward_flops(&cfg, std::slice::from_ref(&family), cfg.prompt.rank)? });
            done(r, &common.report)
        }
        Command::SweepRank {
            common,
            data,
            base,
            family,
            ranks,
            schedule,
            table,
        } => {
            let cfg = load_config(&common.config)?;
            let ds = load_data(&cfg, &data)?;
            let base_model = load_base(&cfg, &base)?;
            let ranks = ranks.unwrap_or_else(|| cfg.sweep_ranks.clone());
            let rows = sweep(
                &base_model,
                &ds,
                &family,
                &ranks,
                common.seed,
                &schedule.options(),
            )?;
            if let Some(p) = &table {
                write_rows_csv(p, &rows)?;
            }
            let mut r = Report::new("sweep-rank", config_hash(&cfg), Some(common.seed));
            r.metrics = json!({ "family": family, "rows": rows });
            r.params = json!({ "prompt": rows.iter().map(|x| x.prompt_params).collect::<Vec<_>>(), "trainable": rows.iter().map(|x| x.trainable_params).collect::<Vec<_>>() });
            r.flops = json!({ "forward": rows.iter().map(|x| x.flops).collect::<Vec<_>>() });
            done(r, &common.report)
        }
        Command::ParamsReport {
            config,
            preset,
            report,
        } => {
            let cfg = match (config, preset) {
                (Some(p), _) => load_config(&p)?,
                (None, Some(Preset::Full)) => ExperimentConfig::full_scale(),
                (None, _) => ExperimentConfig::desk(),
            };
            params_report(&cfg).map(|r| Outcome {
                report: r,
                path: report,
                failure: None,
            })
        }
        Command::GradCheck { seed, report } => {
            let ops = op_checks(seed)?;
            let e2e = e2e_check(seed, 4)?;
            let worst = ops.iter().map(|o| o.max_rel_error).fold(0.0, f64::max);
            let mut r = Report::new(
                "grad-check",
                config_hash(&hetcp_core::pipeline::gradsuite::e2e_config()),
                Some(seed),
            );
            r.metrics = json!({
                "ops": ops.iter().map(|o| json!({ "op": o.op, "max_rel_error": o.max_rel_error })).collect::<Vec<_>>(),
                "op_max_rel_error": worst,
                "op_tolerance": OP_TOL,
                "end_to_end": {
                    "f64_max_rel_error": e2e.f64_max_rel_error,
                    "f32_norm_rel_error": e2e.f32_norm_rel_error,
                    "f32_max_rel_error": e2e.f32_max_rel_error,
                    "probed": e2e.probed,
                    "tolerance": E2E_TOL,
                },
            });
            let failure = if worst >= OP_TOL
                || e2e.f64_max_rel_error >= E2E_TOL
                || e2e.f32_norm_rel_error >= E2E_TOL
            {
                Some(CliError::numeric(format!(
                    "gradient check failed: op {worst:.3e}, end-to-end {:.3e}/{:.3e}",
                    e2e.f64_max_rel_error, e2e.f32_norm_rel_error
                )))
            } else {
                None
            };
            Ok(Outcome {
                report: r,
                path: report,
                failure,
            })
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationResult {
    pub row: String,
    pub trainable_params: usize,
    /// Analytic count for the row.
    pub formula_params: usize,
    pub ap50: f32,
    pub ap70: f32,
    pub last_epoch_loss: Option<f64>,
}

/// The five freeze/tune rows, each trained from `base` and evaluated on the
/// ego plus `family`.
pub fn ablate(
    base: &hetcp_core::pipeline::Model<f32>,
    ds: &Dataset,
    family: &str,
    seed: u64,
    opts: &TrainOptions,
) -> Result<Vec<AblationResult>> {
    let cfg = &base.cfg;
    let scenario = [family.to_string()];
    AblationRow::ALL
        .iter()
        .map(|&row| {
            let (m, _, rows) = run_lift(
                base,
                &ds.train,
                family,
                cfg.prompt.rank,
                Variant::Ablation(row),
                seed,
                opts,
            )?;
            let e = evaluate_par(&m, &ds.test, &scenario)?;
            Ok(AblationResult {
                row: row.label().into(),
                trainable_params: store_trainable(&m.store),
                formula_params: ablation_params(cfg, family, row, cfg.prompt.rank)?,
                ap50: e.ap50,
                ap70: e.ap70,
                last_epoch_loss: last_epoch_loss(&rows),
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepResult {
    pub rank: usize,
    pub prompt_params: usize,
    pub trainable_params: usize,
    /// `R (C + H + W)` for the unified space.
    pub formula_prompt_params: usize,
    pub ap50: f32,
    pub ap70: f32,
    pub flops: u64,
}

pub fn sweep(
    base: &hetcp_core::pipeline::Model<f32>,
    ds: &Dataset,
    family: &str,
    ranks: &[usize],
    seed: u64,
    opts: &TrainOptions,
) -> Result<Vec<SweepResult>> {
    let cfg = &base.cfg;
    let scenario = [family.to_string()];
    ranks
        .iter()
        .map(|&rank| {
            let (m, _, _) = run_lift(base, &ds.train, family, rank, Variant::Lift, seed, opts)?;
            let e = evaluate_par(&m, &ds.test, &scenario)?;
            Ok(SweepResult {
                rank,
                prompt_params: store_prefix(&m.store, &format!("lift.{family}.")),
                trainable_params: store_trainable(&m.store),
                formula_prompt_params: prompt_param_count(
                    cfg.unified_channels,
                    cfg.grid.height,
                    cfg.grid.width,
                    rank,
                    true,
                ),
                ap50: e.ap50,
                ap70: e.ap70,
                flops: e.flops,
            })
        })
        .collect()
}

/// Accounting report: per-module table, stage-2 totals against the
/// Encoder+BEV row, and forward FLOPs as families are added.
pub fn params_report(cfg: &ExperimentConfig) -> Result<Report> {
    let table = params_table(cfg)?;
    let mut per_family = serde_json::Map::new();
    for f in cfg.hetero_families() {
        let l = lift_params(cfg, &f.id, cfg.prompt.rank, cfg.prompt.low_rank)?;
        let eb = ablation_params(cfg, &f.id, AblationRow::EncBev, cfg.prompt.rank)?;
        per_family.insert(
            f.id.clone(),
            json!({
                "lift_total": l.total(),
                "aligner": l.aligner,
                "prompt": l.prompt,
                "foreground": l.foreground,
                "enc_bev": eb,
                "lift_over_enc_bev": l.total() as f64 / eb as f64,
                "full_prompt": prompt_param_count(cfg.unified_channels, cfg.grid.height, cfg.grid.width, cfg.prompt.rank, false),
            }),
        );
    }
    let mut r = Report::new("params-report", config_hash(cfg), None);
    r.params = json!({ "table": table, "stage2": per_family });
    let steps = progressive(&cfg.eval.scenario);
    r.flops = json!({
        "ego": forward_flops(cfg, &[], cfg.prompt.rank)?,
        "progressive": steps.iter().map(|s| forward_flops(cfg, s, cfg.prompt.rank)).collect::<Result<Vec<_>, _>>()?,
    });
    r.metrics = json!({ "grid": [cfg.grid.height, cfg.grid.width], "unified_channels": cfg.unified_channels, "rank": cfg.prompt.rank });
    Ok(r)
}
