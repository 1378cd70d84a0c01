//! The full collaborative detector: family encoders, pyramid, head and
//! per-type adaptation pairs.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::autodiff::{Graph, ParameterStore, Var};
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::loss::{
    direction_loss, focal_loss, foreground_loss, smooth_l1_loss, total_loss, LossReport, LossTerms,
};
use crate::nn::{build_encoder_family, Aligner, Encoder, ForegroundSet, Head, HeadOut};
use crate::prompt::{init_prompt, FullPrompt, Prompt, PromptFactors, PromptParams};
use crate::pyramid::{fuse, scales_for, AgentScales, FusionState, Pyramid};
use crate::scene::{mix_seed, rng_from};
use crate::tensor::{Real, Tensor};

use super::data::{FeatureCache, Prepared, PreparedAgent};

/// Aligner, prompt and new foreground estimator for one agent type.
#[derive(Clone, Debug, PartialEq)]
pub struct LiftPair {
    pub family: String,
    pub aligner: Aligner,
    pub prompt: PromptParams,
    pub foreground: ForegroundSet,
    pub rank: usize,
    pub low_rank: bool,
}

/// How the prompt of a new pair starts.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PromptInit {
    Random,
    /// All-zero factors; with the factors frozen this is the aligner-only variant.
    Zero,
}

#[derive(Clone, Debug)]
pub struct Model<T: Real = f32> {
    pub cfg: ExperimentConfig,
    pub store: ParameterStore<T>,
    pub encoders: BTreeMap<String, Encoder>,
    pub pyramid: Pyramid,
    pub head: Head,
    pub lifts: BTreeMap<String, LiftPair>,
}

impl<T: Real> Model<T> {
    pub fn new(cfg: &ExperimentConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParameterStore::new();
        let mut encoders = BTreeMap::new();
        for f in &cfg.families {
            encoders.insert(f.id.clone(), build_encoder_family(&mut store, f)?);
        }
        let mut rng = rng_from(mix_seed(seed, 0xB0DE));
        let pyramid = Pyramid::new(&mut store, cfg.unified_channels, &cfg.pyramid, &mut rng)?;
        let head = Head::new(&mut store, pyramid.fused_channels(), &cfg.head, &mut rng)?;
        Ok(Self {
            cfg: cfg.clone(),
            store,
            encoders,
            pyramid,
            head,
            lifts: BTreeMap::new(),
        })
    }

    pub fn encoder(&self, family: &str) -> Result<&Encoder> {
        self.encoders
            .get(family)
            .ok_or_else(|| Error::Config(format!("family `{family}` is not defined")))
    }

    /// Registers an adaptation pair for `family` with a rank-`rank` prompt.
    pub fn add_lift(
        &mut self,
        family: &str,
        rank: usize,
        low_rank: bool,
        init: PromptInit,
        seed: u64,
    ) -> Result<()> {
        if family == self.cfg.ego_family {
            return Err(Error::Config(format!(
                "`{family}` is the ego family and needs no adaptation pair"
            )));
        }
        if self.lifts.contains_key(family) {
            return Err(Error::DuplicateParameter(format!("lift.{family}")));
        }
        let fam = self.cfg.family(family)?.clone();
        let (c, h, w) = (
            self.cfg.unified_channels,
            self.cfg.grid.height,
            self.cfg.grid.width,
        );
        let ck = self.encoder(family)?.out_channels();
        let pair_seed = mix_seed(seed, fam.seed);
        let mut rng = rng_from(mix_seed(pair_seed, 0xA116));
        let aligner = Aligner::new(&mut self.store, family, ck, c, &self.cfg.aligner, &mut rng)?;
        let prompt = if low_rank {
            let mut f: PromptFactors<T> = init_prompt(
                family,
                c,
                h,
                w,
                rank,
                self.cfg.prompt.init_std as f64,
                pair_seed,
            )?;
            if init == PromptInit::Zero {
                for t in [&mut f.a, &mut f.b, &mut f.d] {
                    t.data_mut().iter_mut().for_each(|v| *v = T::zero());
                }
            }
            Prompt::LowRank(f)
        } else {
            Prompt::Full(FullPrompt {
                type_id: family.into(),
                p: Tensor::zeros(&[c, h, w]),
            })
        };
        let prompt = PromptParams::register(&mut self.store, &prompt)?;
        let foreground = ForegroundSet::new(
            &mut self.store,
            &format!("foreground_new.{family}"),
            &self.cfg.pyramid.channels,
            &mut rng,
        )?;
        self.lifts.insert(
            family.into(),
            LiftPair {
                family: family.into(),
                aligner,
                prompt,
                foreground,
                rank,
                low_rank,
            },
        );
        Ok(())
    }

    /// Same model at another precision.
    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            cfg: self.cfg.clone(),
            store: self.store.cast(),
            encoders: self.encoders.clone(),
            pyramid: self.pyramid.clone(),
            head: self.head.clone(),
            lifts: self.lifts.clone(),
        }
    }

    /// True when every parameter whose name starts with one of `prefixes` is frozen.
    pub fn frozen_under(&self, prefixes: &[String]) -> bool {
        self.store
            .iter()
            .all(|(_, p)| p.frozen || !prefixes.iter().any(|pre| p.name.starts_with(pre.as_str())))
    }

    fn is_ego_type(&self, family: &str) -> bool {
        family == self.cfg.ego_family
    }

    /// Fails unless every non-ego family has an adaptation pair.
    pub fn check_dispatch<'a>(&self, families: impl IntoIterator<Item = &'a str>) -> Result<()> {
        for f in families {
            if !self.is_ego_type(f) && !self.lifts.contains_key(f) {
                return Err(Error::MissingPair(format!(
                    "no aligner/prompt pair for agent type `{f}`"
                )));
            }
        }
        Ok(())
    }

    /// Encoder output in the agent frame, through the cache when the encoder is frozen.
    fn encoded(
        &self,
        g: &mut Graph<T>,
        a: &PreparedAgent,
        cache: Option<&mut FeatureCache>,
    ) -> Result<Var> {
        let enc = self.encoder(&a.spec.family)?;
        let frozen = self.frozen_under(&[format!("encoder.{}.", a.spec.family)]);
        match cache {
            Some(c) if frozen => {
                if let Some(t) = c.encoded.get(&a.spec.agent_id) {
                    return g.input(t.cast());
                }
                let mut tmp = Graph::<T>::new();
                let raw = tmp.input(a.raw.cast())?;
                let out = enc.forward(&mut tmp, &self.store, raw)?;
                let t: Tensor = tmp.value(out).cast();
                c.encoded.insert(a.spec.agent_id, t.clone());
                g.input(t.cast())
            }
            _ => {
                let raw = g.input(a.raw.cast())?;
                enc.forward(g, &self.store, raw)
            }
        }
    }

    /// Unified ego-frame feature of one agent. Non-ego types are aligned on
    /// the sender side, warped, then prompted in the ego frame.
    pub fn unified_feature(
        &self,
        g: &mut Graph<T>,
        a: &PreparedAgent,
        cache: Option<&mut FeatureCache>,
    ) -> Result<Var> {
        let mut x = self.encoded(g, a, cache)?;
        let pair = if self.is_ego_type(&a.spec.family) {
            None
        } else {
            let pair = self.lifts.get(&a.spec.family).ok_or_else(|| {
                Error::MissingPair(format!(
                    "no aligner/prompt pair for agent type `{}`",
                    a.spec.family
                ))
            })?;
            x = pair.aligner.forward(g, &self.store, x, &a.spec.family)?;
            Some(pair)
        };
        if let Some(t) = &a.warp {
            x = g.warp(x, t.clone())?;
        }
        if let Some(pair) = pair {
            x = pair.prompt.apply(g, &self.store, x)?;
        }
        Ok(x)
    }

    fn foreground_for(&self, family: &str) -> Result<&ForegroundSet> {
        if self.is_ego_type(family) {
            Ok(&self.pyramid.foreground)
        } else {
            self.lifts
                .get(family)
                .map(|p| &p.foreground)
                .ok_or_else(|| {
                    Error::MissingPair(format!("no foreground estimator for agent type `{family}`"))
                })
        }
    }

    fn branch_prefixes(&self, family: &str) -> Vec<String> {
        let mut v = alloc::vec![format!("encoder.{family}."), String::from("pyramid.scale")];
        if self.is_ego_type(family) {
            v.push(String::from("pyramid.fg"));
        } else {
            v.extend([
                format!("aligner.{family}."),
                format!("lift.{family}."),
                format!("foreground_new.{family}."),
            ]);
        }
        v
    }

    fn agent_scales(
        &self,
        g: &mut Graph<T>,
        a: &PreparedAgent,
        mut cache: Option<&mut FeatureCache>,
    ) -> Result<AgentScales> {
        let id = a.spec.agent_id;
        let frozen = cache.is_some() && self.frozen_under(&self.branch_prefixes(&a.spec.family));
        if frozen {
            if let Some((f, o)) = cache.as_ref().and_then(|c| c.scales.get(&id)) {
                let features = f.iter().map(|t| g.input(t.cast())).collect::<Result<_>>()?;
                let occupancy = o.iter().map(|t| g.input(t.cast())).collect::<Result<_>>()?;
                return Ok(AgentScales {
                    agent_id: id,
                    features,
                    occupancy,
                });
            }
            let mut tmp = Graph::<T>::new();
            let x = self.unified_feature(&mut tmp, a, cache.as_deref_mut())?;
            let s = scales_for(
                &mut tmp,
                &self.store,
                &self.pyramid,
                id,
                x,
                self.foreground_for(&a.spec.family)?,
            )?;
            let grab =
                |vs: &[Var]| -> Vec<Tensor> { vs.iter().map(|&v| tmp.value(v).cast()).collect() };
            let entry = (grab(&s.features), grab(&s.occupancy));
            if let Some(c) = cache.as_deref_mut() {
                c.scales.insert(id, entry);
            }
            return self.agent_scales(g, a, cache);
        }
        let x = self.unified_feature(g, a, cache)?;
        scales_for(
            g,
            &self.store,
            &self.pyramid,
            id,
            x,
            self.foreground_for(&a.spec.family)?,
        )
    }

    /// Fusion and head over a prepared sample.
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        p: &mut Prepared,
        use_cache: bool,
    ) -> Result<(FusionState, HeadOut)> {
        self.check_dispatch(p.agents.iter().map(|a| a.spec.family.as_str()))?;
        let mut scales = Vec::with_capacity(p.agents.len());
        for a in &p.agents {
            let cache = if use_cache { Some(&mut p.cache) } else { None };
            scales.push(self.agent_scales(g, a, cache)?);
        }
        let state = fuse(g, scales)?;
        let out = self.head.forward(g, &self.store, state.h_e)?;
        Ok((state, out))
    }

    /// Detection plus foreground loss for one forward pass.
    pub fn loss(
        &self,
        g: &mut Graph<T>,
        p: &Prepared,
        state: &FusionState,
        out: &HeadOut,
    ) -> Result<(Var, LossReport)> {
        let tc = &self.cfg.train;
        let t = &p.targets;
        let focal = focal_loss(g, out.cls, &t.cls.cast(), tc.focal_alpha, tc.focal_gamma)?;
        let (smooth_l1, dir) = if t.positives() > 0 {
            (
                Some(smooth_l1_loss(g, out.reg, &t.reg.cast(), &t.mask)?),
                Some(direction_loss(g, out.dir, &t.bins, &t.mask)?),
            )
        } else {
            (None, None)
        };
        let levels = self.pyramid.levels();
        let mut foreground = Vec::with_capacity(levels);
        for l in 0..levels {
            let mut occ = Vec::with_capacity(state.agent_ids.len());
            let mut masks: Vec<Tensor<T>> = Vec::with_capacity(state.agent_ids.len());
            for (i, id) in state.agent_ids.iter().enumerate() {
                let a = p
                    .agents
                    .iter()
                    .find(|a| a.spec.agent_id == *id)
                    .ok_or(Error::Empty("agent masks"))?;
                occ.push(state.occupancy[i][l]);
                masks.push(a.masks[l].cast());
            }
            let refs: Vec<&Tensor<T>> = masks.iter().collect();
            foreground.push(foreground_loss(
                g,
                &occ,
                &refs,
                tc.focal_alpha,
                tc.focal_gamma,
            )?);
        }
        total_loss(
            g,
            &LossTerms {
                focal,
                smooth_l1,
                dir,
                foreground,
            },
            &self.cfg.pyramid.fg_weights,
        )
    }
}
