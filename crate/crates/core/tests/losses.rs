//! Loss values against closed forms.

use hetcp_core::autodiff::Graph;
use hetcp_core::loss::{direction_loss, focal_loss, smooth_l1_loss, total_loss, LossTerms};
use hetcp_core::Tensor;

const LN2: f64 = std::f64::consts::LN_2;

#[test]
fn focal_at_zero_logits() {
    // p = 0.5 everywhere: each cell costs alpha_t * 0.5^gamma * ln 2.
    let (alpha, gamma) = (0.25f32, 2.0f32);
    let y = Tensor::<f64>::new(&[1, 2, 3], vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
    let mut g = Graph::<f64>::new();
    let z = g.input(Tensor::zeros(&[1, 2, 3])).unwrap();
    let l = focal_loss(&mut g, z, &y, alpha, gamma).unwrap();
    let expect = (2.0 * 0.25 + 4.0 * 0.75) * 0.25 * LN2 / 2.0;
    assert!((g.value(l).item() - expect).abs() < 1e-12);
}

#[test]
fn focal_without_positives_normalizes_by_one() {
    let y = Tensor::<f64>::zeros(&[1, 1, 4]);
    let mut g = Graph::<f64>::new();
    let z = g.input(Tensor::zeros(&[1, 1, 4])).unwrap();
    let l = focal_loss(&mut g, z, &y, 0.25, 2.0).unwrap();
    assert!((g.value(l).item() - 4.0 * 0.75 * 0.25 * LN2).abs() < 1e-12);
}

#[test]
fn smooth_l1_and_direction_closed_forms() {
    // Residuals 0.5 (quadratic: 0.125) and 3 (linear: 2.5) on one masked cell of two.
    let pred = Tensor::<f64>::new(&[2, 1, 2], vec![0.5, 9.0, 3.0, 9.0]).unwrap();
    let target = Tensor::<f64>::zeros(&[2, 1, 2]);
    let mask = [true, false];
    let mut g = Graph::<f64>::new();
    let p = g.input(pred).unwrap();
    let l = smooth_l1_loss(&mut g, p, &target, &mask).unwrap();
    assert!((g.value(l).item() - 2.625).abs() < 1e-12);

    let z = g.input(Tensor::zeros(&[2, 1, 2])).unwrap();
    let d = direction_loss(&mut g, z, &[1, 0], &mask).unwrap();
    assert!((g.value(d).item() - LN2).abs() < 1e-12);

    assert!(smooth_l1_loss(&mut g, p, &target, &[false, false]).is_err());
}

#[test]
fn total_uses_fixed_weights() {
    let mut g = Graph::<f64>::new();
    let s = |g: &mut Graph<f64>, v: f64| g.input(Tensor::scalar(v)).unwrap();
    let terms = LossTerms {
        focal: s(&mut g, 0.7),
        smooth_l1: Some(s(&mut g, 0.3)),
        dir: Some(s(&mut g, 0.5)),
        foreground: vec![s(&mut g, 1.0), s(&mut g, 2.0), s(&mut g, 4.0)],
    };
    let alpha = [0.4f32, 0.4, 0.4];
    let (t, r) = total_loss(&mut g, &terms, &alpha).unwrap();
    let expect = 0.7 + 2.0 * 0.3 + 0.2 * 0.5 + 0.4f32 as f64 * 7.0;
    assert!((g.value(t).item() - expect).abs() < 1e-12);
    assert!((r.recompute_total(&alpha) - r.total as f64).abs() < 1e-6);

    let no_pos = LossTerms {
        smooth_l1: None,
        dir: None,
        ..terms
    };
    let (t, r) = total_loss(&mut g, &no_pos, &alpha).unwrap();
    assert!((g.value(t).item() - (0.7 + 0.4f32 as f64 * 7.0)).abs() < 1e-12);
    assert_eq!((r.smooth_l1, r.dir), (0.0, 0.0));
    assert!(total_loss(&mut g, &no_pos, &alpha[..2]).is_err());
}
