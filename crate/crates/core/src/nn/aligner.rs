//! Per-type feature aligner: ConvNeXt-style blocks then a 1x1 channel projection.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;

use super::layers::{Conv, Init, Norm};
use crate::autodiff::{Activation, ConvSpec, Graph, ParameterStore, Var};
use crate::config::AlignerConfig;
use crate::error::{Error, Result};
use crate::tensor::Real;

/// `x + project(gelu(expand(norm(depthwise(x)))))`.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignerBlock {
    pub depthwise: Conv,
    pub norm: Norm,
    pub expand: Conv,
    pub project: Conv,
}

impl AlignerBlock {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParameterStore<T>,
        name: &str,
        c: usize,
        cfg: &AlignerConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let dspec = ConvSpec {
            stride: 1,
            padding: cfg.kernel / 2,
            groups: c,
        };
        let pw = ConvSpec::same(1);
        let hidden = cfg.expansion * c;
        Ok(Self {
            depthwise: Conv::new(
                store,
                &format!("{name}.depthwise"),
                c,
                c,
                cfg.kernel,
                dspec,
                true,
                Init::He(1.0),
                rng,
            )?,
            norm: Norm::new(store, &format!("{name}.norm"), c, 1, 1.0)?,
            expand: Conv::new(
                store,
                &format!("{name}.expand"),
                c,
                hidden,
                1,
                pw,
                true,
                Init::He(1.0),
                rng,
            )?,
            project: Conv::new(
                store,
                &format!("{name}.project"),
                hidden,
                c,
                1,
                pw,
                true,
                Init::He(0.5),
                rng,
            )?,
        })
    }

    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParameterStore<T>,
        x: Var,
    ) -> Result<Var> {
        let mut h = self.depthwise.forward(g, store, x)?;
        h = self.norm.forward(g, store, h)?;
        h = self.expand.forward(g, store, h)?;
        h = g.activation(Activation::Gelu, h)?;
        h = self.project.forward(g, store, h)?;
        g.add(x, h)
    }

    pub fn param_count(&self) -> usize {
        self.depthwise.param_count()
            + self.norm.param_count()
            + self.expand.param_count()
            + self.project.param_count()
    }

    pub fn macs(&self, h: usize, w: usize) -> usize {
        self.depthwise.macs(h, w) + self.expand.macs(h, w) + self.project.macs(h, w)
    }
}

/// Maps one agent type's `(C_k, H, W)` features into the unified `(C, H, W)` space.
#[derive(Clone, Debug, PartialEq)]
pub struct Aligner {
    pub type_id: String,
    pub in_c: usize,
    pub out_c: usize,
    pub blocks: Vec<AlignerBlock>,
    pub proj: Conv,
}

impl Aligner {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParameterStore<T>,
        type_id: &str,
        in_c: usize,
        out_c: usize,
        cfg: &AlignerConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let base = format!("aligner.{type_id}");
        let blocks = (0..cfg.depth)
            .map(|i| AlignerBlock::new(store, &format!("{base}.block{i}"), in_c, cfg, rng))
            .collect::<Result<_>>()?;
        let proj = Conv::new(
            store,
            &format!("{base}.proj"),
            in_c,
            out_c,
            1,
            ConvSpec::same(1),
            true,
            Init::He(1.0),
            rng,
        )?;
        Ok(Self {
            type_id: type_id.into(),
            in_c,
            out_c,
            blocks,
            proj,
        })
    }

    /// Fails unless `type_id` names this aligner's family and the channel count matches.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParameterStore<T>,
        x: Var,
        type_id: &str,
    ) -> Result<Var> {
        if type_id != self.type_id {
            return Err(Error::MissingPair(format!(
                "aligner for `{}` applied to a `{type_id}` feature",
                self.type_id
            )));
        }
        let (c, _, _) = g.value(x).dims3()?;
        if c != self.in_c {
            return Err(Error::ShapeMismatch {
                op: "align",
                expected: alloc::vec![self.in_c],
                found: alloc::vec![c],
            });
        }
        let mut h = x;
        for b in &self.blocks {
            h = b.forward(g, store, h)?;
        }
        self.proj.forward(g, store, h)
    }

    pub fn param_count(&self) -> usize {
        self.blocks
            .iter()
            .map(AlignerBlock::param_count)
            .sum::<usize>()
            + self.proj.param_count()
    }

    pub fn macs(&self, h: usize, w: usize) -> usize {
        self.blocks.iter().map(|b| b.macs(h, w)).sum::<usize>() + self.proj.macs(h, w)
    }
}
