//! Stage plans, accounting cross-checks and short training runs on the
//! small gradient-check configuration.

use hetcp_core::config::ExperimentConfig;
use hetcp_core::pipeline::account::{
    ablation_params, base_params, encoder_params, lift_params, params_table, store_prefix,
    store_trainable,
};
use hetcp_core::pipeline::gradsuite::e2e_config;
use hetcp_core::pipeline::*;
use hetcp_core::Error;

fn small() -> ExperimentConfig {
    let mut cfg = e2e_config();
    cfg.scene.train_samples = 6;
    cfg.scene.test_samples = 3;
    cfg
}

fn frozen_bits(m: &Model<f32>) -> Vec<(String, Vec<u32>)> {
    m.store
        .iter()
        .filter(|(_, p)| p.frozen)
        .map(|(_, p)| {
            (
                p.name.clone(),
                p.tensor.data().iter().map(|v| v.to_bits()).collect(),
            )
        })
        .collect()
}

#[test]
fn accounting_matches_built_models() {
    for cfg in [ExperimentConfig::desk(), small()] {
        let mut m = Model::<f32>::new(&cfg, 1).unwrap();
        for f in &cfg.families {
            let (e, b, o) = encoder_params(f);
            assert_eq!(
                store_prefix(&m.store, &format!("encoder.{}.", f.id)),
                e + b + o,
                "{}",
                f.id
            );
        }
        StagePlan::base(&cfg).apply(&mut m.store).unwrap();
        assert_eq!(store_trainable(&m.store), base_params(&cfg).unwrap());
        for f in cfg.hetero_families() {
            m.add_lift(&f.id, cfg.prompt.rank, true, PromptInit::Random, 1)
                .unwrap();
        }
        for f in cfg.hetero_families() {
            StagePlan::lift(&cfg, &f.id).apply(&mut m.store).unwrap();
            let l = lift_params(&cfg, &f.id, cfg.prompt.rank, true).unwrap();
            assert_eq!(store_trainable(&m.store), l.total(), "{}", f.id);
            assert_eq!(
                store_prefix(&m.store, &format!("lift.{}.", f.id)),
                cfg.prompt.rank * (cfg.unified_channels + cfg.grid.height + cfg.grid.width)
            );
            for row in AblationRow::ALL {
                StagePlan::ablation(&cfg, &f.id, row)
                    .apply(&mut m.store)
                    .unwrap();
                assert_eq!(
                    store_trainable(&m.store),
                    ablation_params(&cfg, &f.id, row, cfg.prompt.rank).unwrap(),
                    "{} {:?}",
                    f.id,
                    row
                );
            }
        }
        let table = params_table(&cfg).unwrap();
        assert!(table
            .iter()
            .any(|r| r.module == "stage1.trainable" && r.params == base_params(&cfg).unwrap()));
    }
}

#[test]
fn desk_lift_is_under_a_tenth_of_encoder_retraining() {
    let cfg = ExperimentConfig::desk();
    for f in cfg.hetero_families() {
        let lift = ablation_params(&cfg, &f.id, AblationRow::Lift, cfg.prompt.rank).unwrap();
        let eb = ablation_params(&cfg, &f.id, AblationRow::EncBev, cfg.prompt.rank).unwrap();
        assert!((lift as f64) < 0.1 * eb as f64, "{}: {lift} vs {eb}", f.id);
    }
}

#[test]
fn lift_plan_rejects_frozen_sets() {
    let mut cfg = small();
    cfg.stage_plans.lift_trainable = Some(vec!["aligner.{family}.*".into(), "head.*".into()]);
    let mut m = Model::<f32>::new(&cfg, 1).unwrap();
    m.add_lift("m2", 2, true, PromptInit::Random, 1).unwrap();
    let err = StagePlan::lift(&cfg, "m2").apply(&mut m.store).unwrap_err();
    assert!(matches!(err, Error::FrozenUpdate(_)), "{err:?}");
}

#[test]
fn stage2_leaves_frozen_parameters_bit_identical() {
    let cfg = small();
    let recs = generate_split(&cfg, 2, Split::Train).unwrap();
    let mut m = Model::<f32>::new(&cfg, 2).unwrap();
    m.add_lift("m2", 2, true, PromptInit::Random, 2).unwrap();
    let plan = StagePlan::lift(&cfg, "m2");
    plan.apply(&mut m.store).unwrap();
    let before = frozen_bits(&m);
    let trainable_before: Vec<f32> = m
        .store
        .iter()
        .filter(|(_, p)| !p.frozen)
        .flat_map(|(_, p)| p.tensor.data().to_vec())
        .collect();
    let mut data: Vec<Prepared> = recs
        .iter()
        .map(|r| {
            prepare(
                &cfg,
                r,
                hetero_agents(&cfg, r, &["m2".into()], true).unwrap(),
            )
            .unwrap()
        })
        .collect();
    let rows = train(
        &mut m,
        &plan,
        &mut data,
        2,
        &TrainOptions {
            max_steps: Some(12),
            epochs: Some(3),
        },
        |_| {},
    )
    .unwrap();
    assert_eq!(rows.len(), 12);
    assert_eq!(frozen_bits(&m), before);
    let trainable_after: Vec<f32> = m
        .store
        .iter()
        .filter(|(_, p)| !p.frozen)
        .flat_map(|(_, p)| p.tensor.data().to_vec())
        .collect();
    assert_ne!(trainable_after, trainable_before);
    for r in &rows {
        assert!(
            (r.report.recompute_total(&cfg.pyramid.fg_weights) - r.report.total as f64).abs()
                < 1e-6
        );
    }
}

#[test]
fn one_sample_overfits() {
    let cfg = small();
    let rec = generate_sample(&cfg, 5, Split::Train, 0).unwrap();
    let mut data = vec![prepare(&cfg, &rec, base_agents(&cfg, &rec).unwrap()).unwrap()];
    let mut m = Model::<f32>::new(&cfg, 5).unwrap();
    let mut plan = StagePlan::base(&cfg);
    plan.lr = 0.01;
    let rows = train(
        &mut m,
        &plan,
        &mut data,
        5,
        &TrainOptions {
            max_steps: None,
            epochs: Some(50),
        },
        |_| {},
    )
    .unwrap();
    let (first, last) = (rows[0].report.total, rows.last().unwrap().report.total);
    assert!(last < 0.5 * first, "{first} -> {last}");
}

#[test]
fn training_is_reproducible() {
    let cfg = small();
    let recs = generate_split(&cfg, 3, Split::Train).unwrap();
    let run = || {
        let mut m = Model::<f32>::new(&cfg, 3).unwrap();
        let mut data: Vec<Prepared> = recs
            .iter()
            .map(|r| prepare(&cfg, r, base_agents(&cfg, r).unwrap()).unwrap())
            .collect();
        let rows = train(
            &mut m,
            &StagePlan::base(&cfg),
            &mut data,
            3,
            &TrainOptions {
                max_steps: None,
                epochs: Some(2),
            },
            |_| {},
        )
        .unwrap();
        let bits: Vec<u32> = m
            .store
            .iter()
            .flat_map(|(_, p)| {
                p.tensor
                    .data()
                    .iter()
                    .map(|v| v.to_bits())
                    .collect::<Vec<_>>()
            })
            .collect();
        (bits, rows)
    };
    assert_eq!(run(), run());
}

#[test]
fn evaluation_requires_a_pair_for_every_family() {
    let cfg = small();
    let recs = generate_split(&cfg, 1, Split::Test).unwrap();
    let m = Model::<f32>::new(&cfg, 1).unwrap();
    let err = evaluate(&m, &recs, &["m2".to_string()], 0).unwrap_err();
    assert!(matches!(err, Error::MissingPair(_)), "{err:?}");
    assert!(evaluate(&m, &recs, &[], 0).is_ok());
}
