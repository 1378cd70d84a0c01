//! Parameterized convolution and group-norm layers backed by a [`ParameterStore`].

use alloc::format;

#[allow(unused_imports)]
use num_traits::Float;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{ConvSpec, Graph, ParamId, ParameterStore, Var};
use crate::error::Result;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Normal with std `gain * sqrt(2 / fan_in)`.
    He(f64),
    Normal(f64),
    Zero,
    /// Identity on the channel axis; requires `in_c == out_c` and odd `k`.
    Identity,
}

fn draw<T: Real, R: Rng>(rng: &mut R, n: usize, std: f64) -> alloc::vec::Vec<T> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            T::of(z * std)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conv {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub spec: ConvSpec,
    pub in_c: usize,
    pub out_c: usize,
    pub k: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real, R: Rng>(
        store: &mut ParameterStore<T>,
        name: &str,
        in_c: usize,
        out_c: usize,
        k: usize,
        spec: ConvSpec,
        bias: bool,
        init: Init,
        rng: &mut R,
    ) -> Result<Self> {
        let cig = in_c / spec.groups;
        let n = out_c * cig * k * k;
        let shape = [out_c, cig, k, k];
        let w = match init {
            Init::He(gain) => Tensor::new(
                &shape,
                draw(rng, n, gain * (2.0 / (cig * k * k) as f64).sqrt()),
            )?,
            Init::Normal(std) => Tensor::new(&shape, draw(rng, n, std))?,
            Init::Zero => Tensor::zeros(&shape),
            Init::Identity => {
                let c = k / 2;
                Tensor::from_fn(&shape, |i| {
                    let (o, rest) = (i / (cig * k * k), i % (cig * k * k));
                    let (ic, pos) = (rest / (k * k), rest % (k * k));
                    if pos == c * k + c && (cig == 1 || ic == o) {
                        T::one()
                    } else {
                        T::zero()
                    }
                })
            }
        };
        let w = store.add(format!("{name}.w"), w, false)?;
        let b = if bias {
            Some(store.add(format!("{name}.b"), Tensor::zeros(&[out_c]), false)?)
        } else {
            None
        };
        Ok(Self {
            w,
            b,
            spec,
            in_c,
            out_c,
            k,
        })
    }

    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParameterStore<T>,
        x: Var,
    ) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = self.b.map(|b| g.param(store, b));
        g.conv2d(x, w, b, self.spec)
    }

    pub fn param_count(&self) -> usize {
        self.out_c * (self.in_c / self.spec.groups) * self.k * self.k
            + if self.b.is_some() { self.out_c } else { 0 }
    }

    /// Output spatial size for an input of `h x w`.
    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let s = self.spec;
        (
            (h + 2 * s.padding - self.k) / s.stride + 1,
            (w + 2 * s.padding - self.k) / s.stride + 1,
        )
    }

    /// Multiply-accumulates for an input of `h x w`.
    pub fn macs(&self, h: usize, w: usize) -> usize {
        let (oh, ow) = self.out_hw(h, w);
        self.out_c * (self.in_c / self.spec.groups) * self.k * self.k * oh * ow
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
    pub channels: usize,
}

impl Norm {
    pub fn new<T: Real>(
        store: &mut ParameterStore<T>,
        name: &str,
        channels: usize,
        groups: usize,
        gamma: f64,
    ) -> Result<Self> {
        let g = store.add(
            format!("{name}.gamma"),
            Tensor::full(&[channels], T::of(gamma)),
            false,
        )?;
        let b = store.add(format!("{name}.beta"), Tensor::zeros(&[channels]), false)?;
        Ok(Self {
            gamma: g,
            beta: b,
            groups,
            channels,
        })
    }

    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParameterStore<T>,
        x: Var,
    ) -> Result<Var> {
        let (gm, bt) = (g.param(store, self.gamma), g.param(store, self.beta));
        g.group_norm(x, self.groups, gm, bt)
    }

    pub fn param_count(&self) -> usize {
        2 * self.channels
    }
}
