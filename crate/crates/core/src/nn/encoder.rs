//! Synthetic per-family encoders: `enc` convs, `bev` convs, then a 1x1 output projection.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use super::layers::{Conv, Init};
use crate::autodiff::{Activation, ConvSpec, Graph, ParameterStore, Var};
use crate::config::FamilySpec;
use crate::error::{Error, Result};
use crate::scene::{mix_seed, rng_from, RAW_CHANNELS};
use crate::tensor::Real;

#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    pub family: String,
    pub activation: Activation,
    pub enc: Vec<Conv>,
    pub bev: Vec<Conv>,
    pub out: Conv,
}

impl Encoder {
    pub fn out_channels(&self) -> usize {
        self.out.out_c
    }

    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParameterStore<T>,
        raw: Var,
    ) -> Result<Var> {
        let mut h = raw;
        for c in self.enc.iter().chain(&self.bev) {
            h = c.forward(g, store, h)?;
            h = g.activation(self.activation, h)?;
        }
        self.out.forward(g, store, h)
    }

    pub fn param_count(&self) -> usize {
        self.enc
            .iter()
            .chain(&self.bev)
            .map(Conv::param_count)
            .sum::<usize>()
            + self.out.param_count()
    }

    pub fn macs(&self, h: usize, w: usize) -> usize {
        self.enc
            .iter()
            .chain(&self.bev)
            .map(|c| c.macs(h, w))
            .sum::<usize>()
            + self.out.macs(h, w)
    }
}

/// Builds the family's encoder under `encoder.<id>` with parameters drawn
/// from the family seed, all marked frozen.
pub fn build_encoder_family<T: Real>(
    store: &mut ParameterStore<T>,
    spec: &FamilySpec,
) -> Result<Encoder> {
    let e = &spec.encoder;
    if e.kernel % 2 == 0
        || e.out_channels == 0
        || e.enc_widths.iter().chain(&e.bev_widths).any(|&w| w == 0)
    {
        return Err(Error::Config(format!(
            "family `{}`: widths must be >= 1 and the kernel odd",
            spec.id
        )));
    }
    let mut rng = rng_from(mix_seed(spec.seed, 0xE2C0));
    let base = format!("encoder.{}", spec.id);
    let first = store.len();
    let mut in_c = RAW_CHANNELS;
    let sp = ConvSpec::same(e.kernel);
    let mut stage = |store: &mut ParameterStore<T>,
                     part: &str,
                     widths: &[usize],
                     in_c: &mut usize|
     -> Result<Vec<Conv>> {
        widths
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                let c = Conv::new(
                    store,
                    &format!("{base}.{part}.{i}"),
                    *in_c,
                    w,
                    e.kernel,
                    sp,
                    true,
                    Init::He(1.0),
                    &mut rng,
                )?;
                *in_c = w;
                Ok(c)
            })
            .collect()
    };
    let enc = stage(store, "enc", &e.enc_widths, &mut in_c)?;
    let bev = stage(store, "bev", &e.bev_widths, &mut in_c)?;
    let out = Conv::new(
        store,
        &format!("{base}.out"),
        in_c,
        e.out_channels,
        1,
        ConvSpec::same(1),
        true,
        Init::He(1.0),
        &mut rng,
    )?;
    // Biases are drawn too so families differ in their output statistics.
    let mut brng = rng_from(mix_seed(spec.seed, 0xB1A5));
    let ids: Vec<_> = store.iter().skip(first).map(|(id, _)| id).collect();
    for id in ids {
        let p = store.get_mut(id);
        if p.name.ends_with(".b") {
            for v in p.tensor.data_mut() {
                *v = T::of(rand::Rng::random_range(&mut brng, -0.1..0.1));
            }
        }
        p.frozen = true;
    }
    Ok(Encoder {
        family: spec.id.clone(),
        activation: e.activation,
        enc,
        bev,
        out,
    })
}
