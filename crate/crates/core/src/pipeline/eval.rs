//! Inference, greedy rotated NMS and all-point-interpolated average precision.

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::geometry::{rotated_iou, GtBox};
use crate::nn::detect;

use super::data::{hetero_agents, prepare, Prepared, SampleRecord};
use super::model::Model;

pub const IOU_THRESHOLDS: [f64; 2] = [0.5, 0.7];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub score: f32,
    pub bbox: GtBox,
}

/// Predictions and ground truth of one frame.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Frame {
    pub detections: Vec<Detection>,
    pub gt: Vec<GtBox>,
}

/// Keeps the highest-scoring box of every overlapping group. Output is in
/// descending score order; ties keep input order.
pub fn nms(mut dets: Vec<Detection>, iou: f64) -> Vec<Detection> {
    dets.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut keep: Vec<Detection> = Vec::new();
    for d in dets {
        let r = half_diag(&d.bbox);
        let clash = keep.iter().any(|k| {
            let reach = r + half_diag(&k.bbox);
            let (dx, dy) = (d.bbox.x - k.bbox.x, d.bbox.y - k.bbox.y);
            dx * dx + dy * dy < reach * reach && rotated_iou(&d.bbox, &k.bbox) > iou
        });
        if !clash {
            keep.push(d);
        }
    }
    keep
}

fn half_diag(b: &GtBox) -> f32 {
    0.5 * num_traits::Float::sqrt(b.width * b.width + b.length * b.length)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub recall: f64,
    pub precision: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApResult {
    pub iou: f64,
    pub ap: f64,
    /// Interpolated curve, one point per ranked detection.
    pub curve: Vec<PrPoint>,
}

/// True-positive flags of every detection in global rank order.
///
/// Ranking is by descending score, then frame index, then position within
/// the frame. A detection is compared with the ground-truth box of highest
/// IoU in its frame; it is a true positive when that IoU reaches
/// `iou` and the box was not claimed by an earlier detection.
pub fn rank_and_match(frames: &[Frame], iou: f64) -> Vec<bool> {
    let mut order: Vec<(usize, usize)> = frames
        .iter()
        .enumerate()
        .flat_map(|(f, fr)| (0..fr.detections.len()).map(move |i| (f, i)))
        .collect();
    order.sort_by(|a, b| {
        let (sa, sb) = (
            frames[a.0].detections[a.1].score,
            frames[b.0].detections[b.1].score,
        );
        sb.total_cmp(&sa).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1))
    });
    let mut claimed: Vec<Vec<bool>> = frames
        .iter()
        .map(|f| alloc::vec![false; f.gt.len()])
        .collect();
    order
        .into_iter()
        .map(|(f, i)| {
            let d = &frames[f].detections[i].bbox;
            let mut best: Option<(usize, f64)> = None;
            for (j, g) in frames[f].gt.iter().enumerate() {
                let o = rotated_iou(d, g);
                if best.is_none_or(|(_, b)| o > b) {
                    best = Some((j, o));
                }
            }
            match best {
                Some((j, o)) if o >= iou && !claimed[f][j] => {
                    claimed[f][j] = true;
                    true
                }
                _ => false,
            }
        })
        .collect()
}

/// All-point interpolated AP from ranked true-positive flags.
///
/// The sum runs over true positives in rank order, each contributing the
/// maximum precision at or after its rank, and is divided by `n_gt` last.
pub fn average_precision(tp: &[bool], n_gt: usize) -> (f64, Vec<PrPoint>) {
    if n_gt == 0 || tp.is_empty() {
        return (0.0, Vec::new());
    }
    let mut hits = 0usize;
    let raw: Vec<(f64, f64)> = tp
        .iter()
        .enumerate()
        .map(|(k, &t)| {
            hits += usize::from(t);
            (hits as f64 / n_gt as f64, hits as f64 / (k + 1) as f64)
        })
        .collect();
    let mut env = alloc::vec![0.0f64; raw.len()];
    let mut run = 0.0f64;
    for k in (0..raw.len()).rev() {
        run = run.max(raw[k].1);
        env[k] = run;
    }
    let mut sum = 0.0;
    for (k, &t) in tp.iter().enumerate() {
        if t {
            sum += env[k];
        }
    }
    let curve = raw
        .iter()
        .zip(&env)
        .map(|(&(r, _), &p)| PrPoint {
            recall: r,
            precision: p,
        })
        .collect();
    (sum / n_gt as f64, curve)
}

pub fn ap_at(frames: &[Frame], iou: f64) -> ApResult {
    let n_gt = frames.iter().map(|f| f.gt.len()).sum();
    let (ap, curve) = average_precision(&rank_and_match(frames, iou), n_gt);
    ApResult { iou, ap, curve }
}

/// Feature-map element counts a neighbor would send without and with alignment.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transmission {
    pub family: String,
    pub before_alignment: usize,
    pub after_alignment: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    /// Families present besides the ego.
    pub scenario: Vec<String>,
    pub ap50: f32,
    pub ap70: f32,
    pub curve50: Vec<PrPoint>,
    pub curve70: Vec<PrPoint>,
    pub frames: usize,
    pub detections: usize,
    pub trainable_params: usize,
    pub flops: u64,
    pub transmission: Vec<Transmission>,
}

/// Thresholded, suppressed detections of one prepared sample.
pub fn infer(model: &Model<f32>, p: &mut Prepared) -> Result<Vec<Detection>> {
    let mut g = Graph::<f32>::new();
    let (_, out) = model.forward(&mut g, p, false)?;
    let map = detect(
        g.value(out.cls),
        g.value(out.reg),
        g.value(out.dir),
        &model.head.coder,
        &model.cfg.grid,
    )?;
    let thr = model.cfg.eval.score_threshold;
    let dets = map
        .prob
        .iter()
        .zip(&map.boxes)
        .filter(|(&s, _)| s >= thr)
        .map(|(&score, &bbox)| Detection { score, bbox })
        .collect();
    Ok(nms(dets, model.cfg.eval.nms_iou as f64))
}

/// Prepares one evaluation sample: the ego plus `scenario` neighbors. The
/// ground truth is every object in the scene.
pub fn eval_sample(
    cfg: &ExperimentConfig,
    rec: &SampleRecord,
    scenario: &[String],
) -> Result<Prepared> {
    prepare(cfg, rec, hetero_agents(cfg, rec, scenario, true)?)
}

pub fn frame_of(
    model: &Model<f32>,
    cfg: &ExperimentConfig,
    rec: &SampleRecord,
    scenario: &[String],
) -> Result<Frame> {
    let mut p = eval_sample(cfg, rec, scenario)?;
    Ok(Frame {
        detections: infer(model, &mut p)?,
        gt: p.gt.clone(),
    })
}

/// Summarizes already-inferred frames.
pub fn summarize(
    model: &Model<f32>,
    scenario: &[String],
    frames: &[Frame],
    flops: u64,
) -> Result<EvalResult> {
    let [a50, a70] = IOU_THRESHOLDS.map(|t| ap_at(frames, t));
    let cfg = &model.cfg;
    let hw = cfg.grid.cells();
    let transmission = scenario
        .iter()
        .map(|f| {
            Ok(Transmission {
                family: f.clone(),
                before_alignment: model.encoder(f)?.out_channels() * hw,
                after_alignment: cfg.unified_channels * hw,
            })
        })
        .collect::<Result<_>>()?;
    Ok(EvalResult {
        scenario: scenario.to_vec(),
        ap50: a50.ap as f32,
        ap70: a70.ap as f32,
        curve50: a50.curve,
        curve70: a70.curve,
        frames: frames.len(),
        detections: frames.iter().map(|f| f.detections.len()).sum(),
        trainable_params: model
            .store
            .iter()
            .filter(|(_, p)| !p.frozen)
            .map(|(_, p)| p.tensor.numel())
            .sum(),
        flops,
        transmission,
    })
}

/// Sequential evaluation over `records`. Fails before any inference when a
/// scenario family has no adaptation pair.
pub fn evaluate(
    model: &Model<f32>,
    records: &[SampleRecord],
    scenario: &[String],
    flops: u64,
) -> Result<EvalResult> {
    model.check_dispatch(scenario.iter().map(String::as_str))?;
    if records.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    let frames = records
        .iter()
        .map(|r| frame_of(model, &model.cfg, r, scenario))
        .collect::<Result<Vec<_>>>()?;
    summarize(model, scenario, &frames, flops)
}

/// Prefixes `[f1]`, `[f1, f2]`, ... of a scenario, one per added family.
pub fn progressive(scenario: &[String]) -> Vec<Vec<String>> {
    (1..=scenario.len())
        .map(|n| scenario[..n].to_vec())
        .collect()
}
