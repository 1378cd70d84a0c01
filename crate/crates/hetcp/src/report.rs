//! JSON reports and CSV curves. Reports carry no timings, so identical
//! inputs give identical bytes.

use std::fs;
use std::path::Path;

use hetcp_core::pipeline::{LogRow, PrPoint};
use serde::Serialize;
use serde_json::Value;

use crate::error::{CliError, IoContext, Result};

pub const SCHEMA: &str = "hetcp-report-1";
pub const GIT_DESCRIBE: &str = env!("HETCP_GIT_DESCRIBE");

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Report {
    pub schema: &'static str,
    pub command: String,
    pub config_hash: String,
    pub git_describe: &'static str,
    pub seed: Option<u64>,
    pub metrics: Value,
    pub params: Value,
    pub flops: Value,
}

impl Report {
    pub fn new(command: &str, config_hash: String, seed: Option<u64>) -> Self {
        Self {
            schema: SCHEMA,
            command: command.into(),
            config_hash,
            git_describe: GIT_DESCRIBE,
            seed,
            metrics: Value::Object(Default::default()),
            params: Value::Object(Default::default()),
            flops: Value::Object(Default::default()),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        ensure_parent(path)?;
        fs::write(path, self.to_json() + "\n").at(path)
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent().filter(|d| !d.as_os_str().is_empty()) {
        Some(d) => fs::create_dir_all(d).at(d),
        None => Ok(()),
    }
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> CliError + '_ {
    move |e| CliError::io(path, e)
}

/// One row per optimizer step with every loss component.
pub fn write_loss_csv(path: &Path, rows: &[LogRow]) -> Result<()> {
    ensure_parent(path)?;
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    let levels = rows.first().map_or(0, |r| r.report.foreground.len());
    let mut head: Vec<String> = [
        "step",
        "stage",
        "epoch",
        "sample",
        "focal",
        "smooth_l1",
        "dir",
    ]
    .map(String::from)
    .into();
    head.extend((0..levels).map(|l| format!("fg{}", l + 1)));
    head.push("total".into());
    w.write_record(&head).map_err(csv_err(path))?;
    for r in rows {
        let stage = serde_json::to_value(r.stage).expect("stage serializes");
        let mut rec = vec![
            r.step.to_string(),
            stage.as_str().unwrap_or_default().to_string(),
            r.epoch.to_string(),
            r.sample.to_string(),
            r.report.focal.to_string(),
            r.report.smooth_l1.to_string(),
            r.report.dir.to_string(),
        ];
        rec.extend(r.report.foreground.iter().map(f32::to_string));
        rec.push(r.report.total.to_string());
        w.write_record(&rec).map_err(csv_err(path))?;
    }
    w.flush().at(path)
}

/// Precision-recall points, one curve per `(label, iou)`.
pub fn write_pr_csv(path: &Path, curves: &[(String, f64, &[PrPoint])]) -> Result<()> {
    ensure_parent(path)?;
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    w.write_record(["curve", "iou", "recall", "precision"])
        .map_err(csv_err(path))?;
    for (label, iou, pts) in curves {
        for p in *pts {
            w.write_record([
                label.clone(),
                iou.to_string(),
                p.recall.to_string(),
                p.precision.to_string(),
            ])
            .map_err(csv_err(path))?;
        }
    }
    w.flush().at(path)
}

/// Generic table rows.
pub fn write_rows_csv<S: Serialize>(path: &Path, rows: &[S]) -> Result<()> {
    ensure_parent(path)?;
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    for r in rows {
        w.serialize(r).map_err(csv_err(path))?;
    }
    w.flush().at(path)
}
