//! Bottleneck blocks with grouped 3x3 convolutions.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use super::layers::{Conv, Init, Norm};
use crate::autodiff::{Activation, ConvSpec, Graph, ParameterStore, Var};
use crate::error::{Error, Result};
use crate::tensor::Real;

/// `relu(main(x) + shortcut(x))` where main is
/// 1x1 -> norm -> relu -> grouped 3x3 (stride) -> norm -> relu -> 1x1 -> norm.
/// The last norm's gamma starts at zero.
#[derive(Clone, Debug, PartialEq)]
pub struct ResNeXtBlock {
    pub in_c: usize,
    pub out_c: usize,
    pub stride: usize,
    pub cardinality: usize,
    pub reduce: Conv,
    pub norm1: Norm,
    pub grouped: Conv,
    pub norm2: Norm,
    pub expand: Conv,
    pub norm3: Norm,
    /// 1x1 strided projection, present when stride or channels change.
    pub shortcut: Option<Conv>,
}

impl ResNeXtBlock {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParameterStore<T>,
        name: &str,
        in_c: usize,
        out_c: usize,
        stride: usize,
        cardinality: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if cardinality == 0 || out_c % cardinality != 0 {
            return Err(Error::Config(format!(
                "{name}: {out_c} channels not divisible by cardinality {cardinality}"
            )));
        }
        let mid = out_c;
        let pw = ConvSpec {
            stride: 1,
            padding: 0,
            groups: 1,
        };
        let reduce = Conv::new(
            store,
            &format!("{name}.reduce"),
            in_c,
            mid,
            1,
            pw,
            false,
            Init::He(1.0),
            rng,
        )?;
        let norm1 = Norm::new(store, &format!("{name}.norm1"), mid, cardinality, 1.0)?;
        let gspec = ConvSpec {
            stride,
            padding: 1,
            groups: cardinality,
        };
        let grouped = Conv::new(
            store,
            &format!("{name}.grouped"),
            mid,
            mid,
            3,
            gspec,
            false,
            Init::He(1.0),
            rng,
        )?;
        let norm2 = Norm::new(store, &format!("{name}.norm2"), mid, cardinality, 1.0)?;
        let expand = Conv::new(
            store,
            &format!("{name}.expand"),
            mid,
            out_c,
            1,
            pw,
            false,
            Init::He(1.0),
            rng,
        )?;
        let norm3 = Norm::new(store, &format!("{name}.norm3"), out_c, cardinality, 0.0)?;
        let shortcut = if stride != 1 || in_c != out_c {
            let sspec = ConvSpec {
                stride,
                padding: 0,
                groups: 1,
            };
            Some(Conv::new(
                store,
                &format!("{name}.shortcut"),
                in_c,
                out_c,
                1,
                sspec,
                false,
                Init::He(1.0),
                rng,
            )?)
        } else {
            None
        };
        Ok(Self {
            in_c,
            out_c,
            stride,
            cardinality,
            reduce,
            norm1,
            grouped,
            norm2,
            expand,
            norm3,
            shortcut,
        })
    }

    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParameterStore<T>,
        x: Var,
    ) -> Result<Var> {
        let mut h = self.reduce.forward(g, store, x)?;
        h = self.norm1.forward(g, store, h)?;
        h = g.activation(Activation::Relu, h)?;
        h = self.grouped.forward(g, store, h)?;
        h = self.norm2.forward(g, store, h)?;
        h = g.activation(Activation::Relu, h)?;
        h = self.expand.forward(g, store, h)?;
        h = self.norm3.forward(g, store, h)?;
        let s = match &self.shortcut {
            Some(c) => c.forward(g, store, x)?,
            None => x,
        };
        let sum = g.add(h, s)?;
        g.activation(Activation::Relu, sum)
    }

    pub fn param_count(&self) -> usize {
        self.reduce.param_count()
            + self.norm1.param_count()
            + self.grouped.param_count()
            + self.norm2.param_count()
            + self.expand.param_count()
            + self.norm3.param_count()
            + self.shortcut.as_ref().map_or(0, Conv::param_count)
    }

    /// Multiply-accumulates for an `h x w` input.
    pub fn macs(&self, h: usize, w: usize) -> usize {
        let (oh, ow) = self.grouped.out_hw(h, w);
        self.reduce.macs(h, w)
            + self.grouped.macs(h, w)
            + self.expand.macs(oh, ow)
            + self.shortcut.as_ref().map_or(0, |c| c.macs(h, w))
    }
}

/// One pyramid scale: the first block halves H and W.
pub fn build_scale<T: Real, R: Rng>(
    store: &mut ParameterStore<T>,
    name: &str,
    in_c: usize,
    out_c: usize,
    blocks: usize,
    cardinality: usize,
    rng: &mut R,
) -> Result<Vec<ResNeXtBlock>> {
    (0..blocks)
        .map(|b| {
            let (ic, stride) = if b == 0 { (in_c, 2) } else { (out_c, 1) };
            ResNeXtBlock::new(
                store,
                &format!("{name}.block{b}"),
                ic,
                out_c,
                stride,
                cardinality,
                rng,
            )
        })
        .collect()
}

pub fn resnext_scale_forward<T: Real>(
    g: &mut Graph<T>,
    store: &ParameterStore<T>,
    x: Var,
    blocks: &[ResNeXtBlock],
) -> Result<Var> {
    let (_, h, w) = g.value(x).dims3()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Precondition(format!(
            "scale input {h}x{w} has an odd dimension"
        )));
    }
    let mut y = x;
    for b in blocks {
        y = b.forward(g, store, y)?;
    }
    Ok(y)
}
