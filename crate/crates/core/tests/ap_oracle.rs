//! AP against an independent brute-force precision/recall enumeration.

use hetcp_core::geometry::{rotated_iou, GtBox};
use hetcp_core::pipeline::{ap_at, average_precision, Detection, Frame};
use proptest::prelude::*;

/// Ranks by (-score, frame, index) with an explicit selection pass, matches
/// greedily, then sums for every true positive the best precision at any
/// later cut-off, found by a full scan.
fn oracle(frames: &[Frame], thr: f64) -> f64 {
    let n_gt: usize = frames.iter().map(|f| f.gt.len()).sum();
    let mut pending: Vec<(f32, usize, usize)> = Vec::new();
    for (f, fr) in frames.iter().enumerate() {
        for (i, d) in fr.detections.iter().enumerate() {
            pending.push((d.score, f, i));
        }
    }
    let mut ranked = Vec::new();
    while !pending.is_empty() {
        let mut best = 0;
        for k in 1..pending.len() {
            let (a, b) = (pending[k], pending[best]);
            let before = a.0 > b.0 || (a.0 == b.0 && (a.1, a.2) < (b.1, b.2));
            if before {
                best = k;
            }
        }
        ranked.push(pending.remove(best));
    }
    let mut claimed: Vec<Vec<bool>> = frames.iter().map(|f| vec![false; f.gt.len()]).collect();
    let mut tp = Vec::new();
    for &(_, f, i) in &ranked {
        let d = &frames[f].detections[i].bbox;
        let ious: Vec<f64> = frames[f].gt.iter().map(|g| rotated_iou(d, g)).collect();
        let mut j_best = None;
        for (j, &o) in ious.iter().enumerate() {
            if j_best.is_none_or(|jb: usize| o > ious[jb]) {
                j_best = Some(j);
            }
        }
        let hit = matches!(j_best, Some(j) if ious[j] >= thr && !claimed[f][j]);
        if hit {
            claimed[f][j_best.unwrap()] = true;
        }
        tp.push(hit);
    }
    if n_gt == 0 || tp.is_empty() {
        return 0.0;
    }
    let precision: Vec<f64> = (0..tp.len())
        .map(|k| tp[..=k].iter().filter(|&&t| t).count() as f64 / (k + 1) as f64)
        .collect();
    let mut sum = 0.0;
    for k in 0..tp.len() {
        if tp[k] {
            let mut best = 0.0f64;
            for &p in &precision[k..] {
                if p > best {
                    best = p;
                }
            }
            sum += best;
        }
    }
    sum / n_gt as f64
}

fn gt_box() -> impl Strategy<Value = GtBox> {
    (
        0.0f32..20.0,
        0.0f32..12.0,
        1.5f32..2.5,
        3.5f32..5.0,
        -1.0f32..1.0,
    )
        .prop_map(|(x, y, width, length, heading)| GtBox {
            x,
            y,
            width,
            length,
            heading,
        })
}

/// Detections are jittered copies of ground truth, duplicates or clutter.
fn frame() -> impl Strategy<Value = Frame> {
    prop::collection::vec(gt_box(), 0..=3).prop_flat_map(|gt| {
        let g2 = gt.clone();
        let det = (
            0usize..4,
            -0.8f32..0.8,
            -0.8f32..0.8,
            -0.3f32..0.3,
            0u8..10,
            gt_box(),
        )
            .prop_map(move |(pick, dx, dy, dh, s, clutter)| {
                let bbox = match g2.get(pick) {
                    Some(b) => GtBox {
                        x: b.x + dx,
                        y: b.y + dy,
                        heading: b.heading + dh,
                        ..*b
                    },
                    None => clutter,
                };
                Detection {
                    score: s as f32 / 10.0,
                    bbox,
                }
            });
        (Just(gt), prop::collection::vec(det, 0..=4))
            .prop_map(|(gt, detections)| Frame { detections, gt })
    })
}

fn instance() -> impl Strategy<Value = Vec<Frame>> {
    prop::collection::vec(frame(), 1..=3).prop_filter("at most five boxes", |fs| {
        fs.iter().map(|f| f.gt.len()).sum::<usize>() <= 5
    })
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 1000, ..ProptestConfig::default() })]

    #[test]
    fn ap_equals_brute_force(frames in instance()) {
        for thr in [0.5, 0.7] {
            prop_assert_eq!(ap_at(&frames, thr).ap, oracle(&frames, thr));
        }
    }
}

#[test]
fn hand_case_three_gt_four_predictions() {
    // TP, FP, TP, TP: envelope precisions 1, 3/4, 3/4.
    let (ap, _) = average_precision(&[true, false, true, true], 3);
    assert_eq!(ap, (1.0 + 0.75 + 0.75) / 3.0);
}
