//! Cross-agent fusion invariants.

use hetcp_core::autodiff::Graph;
use hetcp_core::pyramid::{fuse, AgentScales};
use hetcp_core::Tensor;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const CH: [usize; 3] = [2, 4, 6];
const H: usize = 16;
const W: usize = 24;

struct Agent {
    id: u32,
    features: Vec<Tensor>,
    occupancy: Vec<Tensor>,
}

fn random_agents(n: usize, seed: u64) -> Vec<Agent> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ids: Vec<u32> = (0..20).collect();
    ids.shuffle(&mut rng);
    (0..n)
        .map(|k| {
            let mut t =
                |shape: &[usize], s: f32| Tensor::from_fn(shape, |_| rng.random_range(-s..s));
            let dims: Vec<(usize, usize, usize)> = CH
                .iter()
                .enumerate()
                .map(|(l, &c)| (c, H >> (l + 1), W >> (l + 1)))
                .collect();
            Agent {
                id: ids[k],
                features: dims.iter().map(|&(c, h, w)| t(&[c, h, w], 2.0)).collect(),
                occupancy: dims.iter().map(|&(_, h, w)| t(&[1, h, w], 6.0)).collect(),
            }
        })
        .collect()
}

fn run(agents: &[Agent], order: &[usize]) -> (Graph<f32>, hetcp_core::pyramid::FusionState) {
    let mut g = Graph::new();
    let inputs = order
        .iter()
        .map(|&i| {
            let a = &agents[i];
            AgentScales {
                agent_id: a.id,
                features: a
                    .features
                    .iter()
                    .map(|t| g.input(t.clone()).unwrap())
                    .collect(),
                occupancy: a
                    .occupancy
                    .iter()
                    .map(|t| g.input(t.clone()).unwrap())
                    .collect(),
            }
        })
        .collect();
    let s = fuse(&mut g, inputs).unwrap();
    (g, s)
}

/// Nearest-neighbour upsampling by `2^k`, written out directly.
fn upsample(t: &Tensor, k: usize) -> Vec<f32> {
    let (c, h, w) = t.dims3().unwrap();
    let f = 1 << k;
    let mut out = Vec::with_capacity(c * h * w * f * f);
    for ch in 0..c {
        for y in 0..h * f {
            for x in 0..w * f {
                out.push(t.get3(ch, y / f, x / f));
            }
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 100, ..ProptestConfig::default() })]

    #[test]
    fn weights_sum_to_one_and_order_is_irrelevant(n in 1usize..=5, seed in any::<u64>()) {
        let agents = random_agents(n, seed);
        let fwd: Vec<usize> = (0..n).collect();
        let (g, s) = run(&agents, &fwd);
        for l in 0..CH.len() {
            let cells = g.value(s.weights[0][l]).numel();
            for j in 0..cells {
                let sum: f64 = (0..n).map(|i| g.value(s.weights[i][l]).data()[j] as f64).sum();
                prop_assert!((sum - 1.0).abs() <= 1e-6, "scale {l} cell {j}: {sum}");
            }
        }
        let mut perm = fwd.clone();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5EED));
        let (g2, s2) = run(&agents, &perm);
        let bits = |g: &Graph<f32>, v| g.value(v).data().iter().map(|x: &f32| x.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&g, s.h_e), bits(&g2, s2.h_e));
    }
}

#[test]
fn single_agent_passes_features_through() {
    for seed in 0..10 {
        let agents = random_agents(1, seed);
        let (g, s) = run(&agents, &[0]);
        for l in 0..CH.len() {
            assert!(g.value(s.weights[0][l]).data().iter().all(|&w| w == 1.0));
        }
        let expect: Vec<f32> = agents[0]
            .features
            .iter()
            .enumerate()
            .flat_map(|(l, f)| upsample(f, l + 1))
            .collect();
        assert_eq!(g.value(s.h_e).data(), &expect[..]);
        assert_eq!(g.value(s.h_e).shape(), &[CH.iter().sum::<usize>(), H, W]);
    }
}

#[test]
fn confident_agent_dominates() {
    let mut agents = random_agents(3, 4);
    for t in &mut agents[1].occupancy {
        t.data_mut().iter_mut().for_each(|v| *v = 40.0);
    }
    for k in [0, 2] {
        for t in &mut agents[k].occupancy {
            t.data_mut().iter_mut().for_each(|v| *v = -40.0);
        }
    }
    let (g, s) = run(&agents, &[0, 1, 2]);
    let i = s
        .agent_ids
        .iter()
        .position(|&id| id == agents[1].id)
        .unwrap();
    for l in 0..CH.len() {
        let fused = g.value(s.fused[l]).data();
        for (a, b) in fused.iter().zip(agents[1].features[l].data()) {
            assert!((a - b).abs() < 1e-5);
        }
        assert!(g.value(s.weights[i][l]).data().iter().all(|&w| w > 0.999));
    }
}

#[test]
fn duplicate_ids_and_empty_input_are_rejected() {
    let mut agents = random_agents(2, 1);
    agents[1].id = agents[0].id;
    let mut g = Graph::<f32>::new();
    let mk = |g: &mut Graph<f32>, a: &Agent| AgentScales {
        agent_id: a.id,
        features: a
            .features
            .iter()
            .map(|t| g.input(t.clone()).unwrap())
            .collect(),
        occupancy: a
            .occupancy
            .iter()
            .map(|t| g.input(t.clone()).unwrap())
            .collect(),
    };
    let inputs = vec![mk(&mut g, &agents[0]), mk(&mut g, &agents[1])];
    assert!(fuse(&mut g, inputs).is_err());
    assert!(fuse(&mut g, Vec::new()).is_err());
}
