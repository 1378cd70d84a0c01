//! Which parameters each training stage may update.
//!
//! Patterns are parameter names, optionally ending in `*` for a prefix match.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autodiff::ParameterStore;
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::tensor::Real;

/// Prefixes a lift-stage plan may unfreeze.
pub const LIFT_ALLOWED: [&str; 3] = ["aligner.", "lift.", "foreground_new."];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Base,
    Lift,
}

/// Stage-2 freeze/tune rows. Everything but `Lift` also retrains parts of
/// the new family's encoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AblationRow {
    #[serde(rename = "Enc+BEV")]
    EncBev,
    #[serde(rename = "Enc+BEV+LIFT")]
    EncBevLift,
    #[serde(rename = "Enc+LIFT")]
    EncLift,
    #[serde(rename = "BEV+LIFT")]
    BevLift,
    #[serde(rename = "LIFT")]
    Lift,
}

impl AblationRow {
    pub const ALL: [AblationRow; 5] = [
        AblationRow::EncBev,
        AblationRow::EncBevLift,
        AblationRow::EncLift,
        AblationRow::BevLift,
        AblationRow::Lift,
    ];

    pub fn label(self) -> &'static str {
        match self {
            AblationRow::EncBev => "Enc+BEV",
            AblationRow::EncBevLift => "Enc+BEV+LIFT",
            AblationRow::EncLift => "Enc+LIFT",
            AblationRow::BevLift => "BEV+LIFT",
            AblationRow::Lift => "LIFT",
        }
    }

    pub fn uses_prompt(self) -> bool {
        !matches!(self, AblationRow::EncBev)
    }

    fn encoder_parts(self) -> &'static [&'static str] {
        match self {
            AblationRow::EncBev | AblationRow::EncBevLift => &["enc", "bev", "out"],
            AblationRow::EncLift => &["enc"],
            AblationRow::BevLift => &["bev", "out"],
            AblationRow::Lift => &[],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StagePlan {
    pub stage: Stage,
    pub trainable: Vec<String>,
    pub frozen: Vec<String>,
    pub epochs: usize,
    pub lr: f32,
    /// Set for freeze/tune ablation runs, which may unfreeze encoder parts.
    pub ablation: Option<AblationRow>,
}

pub fn pattern_matches(pattern: &str, name: &str) -> bool {
    match pattern.strip_suffix('*') {
        Some(prefix) => name.starts_with(prefix),
        None => pattern == name,
    }
}

fn family_prefixes(family: &str) -> [String; 3] {
    [
        format!("aligner.{family}.*"),
        format!("lift.{family}.*"),
        format!("foreground_new.{family}.*"),
    ]
}

impl StagePlan {
    pub fn base(cfg: &ExperimentConfig) -> Self {
        let trainable = cfg.stage_plans.base_trainable.clone().unwrap_or_else(|| {
            alloc::vec![
                format!("encoder.{}.*", cfg.ego_family),
                "pyramid.*".into(),
                "head.*".into()
            ]
        });
        let mut frozen: Vec<String> = cfg
            .families
            .iter()
            .filter(|f| f.id != cfg.ego_family)
            .map(|f| format!("encoder.{}.*", f.id))
            .collect();
        frozen.extend(LIFT_ALLOWED.iter().map(|p| format!("{p}*")));
        Self {
            stage: Stage::Base,
            trainable,
            frozen,
            epochs: cfg.train.base_epochs,
            lr: cfg.train.lr,
            ablation: None,
        }
    }

    /// Trains only `family`'s aligner, prompt and new foreground estimator.
    /// A `{family}` placeholder in configured patterns is substituted.
    pub fn lift(cfg: &ExperimentConfig, family: &str) -> Self {
        let trainable = match &cfg.stage_plans.lift_trainable {
            Some(p) => p.iter().map(|s| s.replace("{family}", family)).collect(),
            None => family_prefixes(family).into(),
        };
        Self {
            stage: Stage::Lift,
            trainable,
            frozen: alloc::vec!["encoder.*".into(), "pyramid.*".into(), "head.*".into()],
            epochs: cfg.train.lift_epochs,
            lr: cfg.train.lr,
            ablation: None,
        }
    }

    /// Lift plan without the prompt: aligner and new foreground estimator only.
    pub fn aligner_only(cfg: &ExperimentConfig, family: &str) -> Self {
        let [al, _, fg] = family_prefixes(family);
        Self {
            trainable: alloc::vec![al, fg],
            ..Self::lift(cfg, family)
        }
    }

    pub fn ablation(cfg: &ExperimentConfig, family: &str, row: AblationRow) -> Self {
        let [al, li, fg] = family_prefixes(family);
        let mut trainable: Vec<String> = row
            .encoder_parts()
            .iter()
            .map(|p| format!("encoder.{family}.{p}.*"))
            .collect();
        trainable.extend([al, fg]);
        if row.uses_prompt() {
            trainable.push(li);
        }
        Self {
            stage: Stage::Lift,
            trainable,
            frozen: alloc::vec!["pyramid.*".into(), "head.*".into()],
            epochs: cfg.train.lift_epochs,
            lr: cfg.train.lr,
            ablation: Some(row),
        }
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.trainable.iter().any(|p| pattern_matches(p, name))
    }

    /// Checks the plan against the store's names: no parameter is matched
    /// by both lists, and a lift plan stays inside the lift-allowed set.
    /// Parameters matched by neither list are frozen.
    pub fn validate<T: Real>(&self, store: &ParameterStore<T>) -> Result<()> {
        if self.epochs > 0 && !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        for (_, p) in store.iter() {
            let t = self.is_trainable(&p.name);
            if t && self.frozen.iter().any(|f| pattern_matches(f, &p.name)) {
                return Err(Error::FrozenUpdate(format!(
                    "`{}` (listed both trainable and frozen)",
                    p.name
                )));
            }
            if t && self.stage == Stage::Lift
                && self.ablation.is_none()
                && !LIFT_ALLOWED.iter().any(|a| p.name.starts_with(a))
            {
                return Err(Error::FrozenUpdate(format!(
                    "`{}` (outside the lift stage trainable set)",
                    p.name
                )));
            }
        }
        if !store.iter().any(|(_, p)| self.is_trainable(&p.name)) {
            return Err(Error::Config("stage plan selects no parameter".into()));
        }
        Ok(())
    }

    /// Validates, then sets every freeze flag of the store.
    pub fn apply<T: Real>(&self, store: &mut ParameterStore<T>) -> Result<()> {
        self.validate(store)?;
        let ids: Vec<_> = store
            .iter()
            .map(|(id, p)| (id, !self.is_trainable(&p.name)))
            .collect();
        for (id, frozen) in ids {
            store.set_frozen(id, frozen);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn store() -> ParameterStore<f32> {
        let mut s = ParameterStore::new();
        for n in [
            "encoder.m1.enc.0.w",
            "encoder.m2.bev.0.w",
            "pyramid.scale1.block0.reduce.w",
            "head.cls.w",
            "aligner.m2.proj.w",
            "lift.m2.A",
        ] {
            s.add(n, Tensor::zeros(&[1]), false).unwrap();
        }
        s
    }

    #[test]
    fn patterns() {
        assert!(pattern_matches("head.*", "head.cls.w"));
        assert!(!pattern_matches("head.*", "heads.cls.w"));
        assert!(pattern_matches("head.cls.w", "head.cls.w"));
        assert!(!pattern_matches("head.cls", "head.cls.w"));
    }

    #[test]
    fn lift_plan_freezes_everything_else() {
        let cfg = ExperimentConfig::desk();
        let mut s = store();
        StagePlan::lift(&cfg, "m2").apply(&mut s).unwrap();
        let trainable: Vec<_> = s
            .iter()
            .filter(|(_, p)| !p.frozen)
            .map(|(_, p)| p.name.clone())
            .collect();
        assert_eq!(trainable, ["aligner.m2.proj.w", "lift.m2.A"]);
    }

    #[test]
    fn lift_plan_reaching_outside_is_rejected() {
        let mut cfg = ExperimentConfig::desk();
        cfg.stage_plans.lift_trainable =
            Some(alloc::vec!["lift.{family}.*".into(), "pyramid.*".into()]);
        let mut s = store();
        assert!(matches!(
            StagePlan::lift(&cfg, "m2").apply(&mut s),
            Err(Error::FrozenUpdate(_))
        ));
        assert!(
            s.iter().all(|(_, p)| !p.frozen),
            "store untouched on failure"
        );
    }

    #[test]
    fn overlapping_lists_are_rejected() {
        let cfg = ExperimentConfig::desk();
        let mut p = StagePlan::base(&cfg);
        p.frozen.push("head.cls.w".into());
        assert!(matches!(p.validate(&store()), Err(Error::FrozenUpdate(_))));
    }

    #[test]
    fn ablation_rows_unfreeze_encoder_parts() {
        let cfg = ExperimentConfig::desk();
        let p = StagePlan::ablation(&cfg, "m2", AblationRow::BevLift);
        p.validate(&store()).unwrap();
        assert!(p.is_trainable("encoder.m2.bev.0.w"));
        assert!(!p.is_trainable("encoder.m2.enc.0.w"));
        assert!(!StagePlan::ablation(&cfg, "m2", AblationRow::EncBev).is_trainable("lift.m2.A"));
    }
}
