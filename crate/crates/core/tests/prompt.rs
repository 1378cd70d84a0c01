//! Low-rank prompt construction, counting and additivity.

use hetcp_core::autodiff::{Graph, ParameterStore};
use hetcp_core::geometry::AgentPose;
use hetcp_core::prompt::{
    apply_prompt, materialize, prompt_param_count, Prompt, PromptFactors, PromptParams,
};
use hetcp_core::scene::BevFeature;
use hetcp_core::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn factors(r: usize, c: usize, h: usize, w: usize, seed: u64) -> PromptFactors {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = |n: usize, m: usize| Tensor::from_fn(&[n, m], |_| rng.random_range(-1.0f32..1.0));
    let (a, b, d) = (t(r, c), t(r, h), t(r, w));
    PromptFactors::new("m2", a, b, d).unwrap()
}

/// Sum of `R` outer products, accumulated in f64.
fn outer_sum(f: &PromptFactors) -> Vec<f64> {
    let (r, c, h, w) = f.dims().unwrap();
    let mut p = vec![0.0f64; c * h * w];
    for k in 0..r {
        for ci in 0..c {
            for y in 0..h {
                for x in 0..w {
                    p[(ci * h + y) * w + x] += f.a.data()[k * c + ci] as f64
                        * f.b.data()[k * h + y] as f64
                        * f.d.data()[k * w + x] as f64;
                }
            }
        }
    }
    p
}

#[test]
fn counts() {
    assert_eq!(prompt_param_count(64, 128, 256, 8, true), 3584);
    assert_eq!(prompt_param_count(64, 128, 256, 8, false), 2_097_152);
    let f = factors(3, 4, 5, 6, 0);
    assert_eq!(f.param_count(), 3 * (4 + 5 + 6));
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, ..ProptestConfig::default() })]

    #[test]
    fn rank_r_tensor_is_reproduced(r in 1usize..=8, c in 1usize..=8, h in 1usize..=12, w in 1usize..=12, seed in any::<u64>()) {
        let f = factors(r, c, h, w, seed);
        let p = materialize(&f).unwrap();
        prop_assert_eq!(p.shape(), &[c, h, w]);
        let oracle = outer_sum(&f);
        let mse = p.data().iter().zip(&oracle).map(|(&a, b)| (a as f64 - b).powi(2)).sum::<f64>() / oracle.len() as f64;
        prop_assert!(mse < 1e-6, "mse {mse}");
    }

    #[test]
    fn prompt_is_additive(seed in any::<u64>()) {
        let f = factors(2, 3, 4, 5, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let map = Tensor::from_fn(&[3, 4, 5], |_| rng.random_range(-3.0f32..3.0));
        let feat = BevFeature { map: map.clone(), agent_id: 1, type_id: "m2".into(), pose: AgentPose::IDENTITY };
        let dense = materialize(&f).unwrap();
        let out = apply_prompt(&feat, &Prompt::LowRank(f.clone())).unwrap();
        for ((o, x), p) in out.map.data().iter().zip(map.data()).zip(dense.data()) {
            prop_assert_eq!(*o, x + p);
        }

        let mut store = ParameterStore::<f32>::new();
        let params = PromptParams::register(&mut store, &Prompt::LowRank(f)).unwrap();
        let mut g = Graph::new();
        let xv = g.input(map.clone()).unwrap();
        let y = params.apply(&mut g, &store, xv).unwrap();
        for ((o, x), p) in g.value(y).data().iter().zip(map.data()).zip(dense.data()) {
            prop_assert_eq!(*o, x + p);
        }
    }
}

#[test]
fn concatenated_factors_add_prompts() {
    let (f1, f2) = (factors(2, 3, 4, 5, 1), factors(3, 3, 4, 5, 2));
    let both = f1.concat(&f2).unwrap();
    assert_eq!(both.rank(), 5);
    let (p1, p2, p) = (
        materialize(&f1).unwrap(),
        materialize(&f2).unwrap(),
        materialize(&both).unwrap(),
    );
    for ((a, b), c) in p1.data().iter().zip(p2.data()).zip(p.data()) {
        assert!((a + b - c).abs() < 1e-5);
    }
}

#[test]
fn zero_rank_is_rejected() {
    assert!(hetcp_core::prompt::init_prompt::<f32>("m2", 4, 4, 4, 0, 0.02, 1).is_err());
}
