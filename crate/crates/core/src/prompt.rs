//! Low-rank additive feature prompts: `P[c,h,w] = sum_r A[r,c] B[r,h] D[r,w]`.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Graph, ParamId, ParameterStore, Var};
use crate::error::{Error, Result};
use crate::scene::{mix_seed, rng_from, BevFeature};
use crate::tensor::{Real, Tensor};

/// Rank-`R` factors of one agent type's prompt.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptFactors<T = f32> {
    pub type_id: String,
    /// `[R, C]`.
    pub a: Tensor<T>,
    /// `[R, H]`.
    pub b: Tensor<T>,
    /// `[R, W]`.
    pub d: Tensor<T>,
}

impl<T: Real> PromptFactors<T> {
    pub fn new(type_id: &str, a: Tensor<T>, b: Tensor<T>, d: Tensor<T>) -> Result<Self> {
        let f = Self {
            type_id: type_id.into(),
            a,
            b,
            d,
        };
        f.dims()?;
        Ok(f)
    }

    /// `(R, C, H, W)`.
    pub fn dims(&self) -> Result<(usize, usize, usize, usize)> {
        match (self.a.shape(), self.b.shape(), self.d.shape()) {
            (&[r, c], &[rb, h], &[rd, w]) if r == rb && r == rd => Ok((r, c, h, w)),
            (sa, sb, sd) => Err(Error::ShapeMismatch {
                op: "prompt factors",
                expected: alloc::vec![sa.first().copied().unwrap_or(0); 3],
                found: [sa, sb, sd]
                    .iter()
                    .map(|s| s.first().copied().unwrap_or(0))
                    .collect(),
            }),
        }
    }

    pub fn rank(&self) -> usize {
        self.a.shape()[0]
    }

    pub fn param_count(&self) -> usize {
        self.a.numel() + self.b.numel() + self.d.numel()
    }

    /// Factor concatenation: the sum of both prompts as one of rank `R1 + R2`.
    pub fn concat(&self, other: &PromptFactors<T>) -> Result<PromptFactors<T>> {
        let (r1, c, h, w) = self.dims()?;
        let (r2, c2, h2, w2) = other.dims()?;
        if (c, h, w) != (c2, h2, w2) {
            return Err(Error::ShapeMismatch {
                op: "prompt concat",
                expected: alloc::vec![c, h, w],
                found: alloc::vec![c2, h2, w2],
            });
        }
        let cat = |x: &Tensor<T>, y: &Tensor<T>, n: usize| {
            let mut v = x.data().to_vec();
            v.extend_from_slice(y.data());
            Tensor::new(&[r1 + r2, n], v)
        };
        PromptFactors::new(
            &self.type_id,
            cat(&self.a, &other.a, c)?,
            cat(&self.b, &other.b, h)?,
            cat(&self.d, &other.d, w)?,
        )
    }
}

/// Dense prompt with one parameter per feature element.
#[derive(Clone, Debug, PartialEq)]
pub struct FullPrompt<T = f32> {
    pub type_id: String,
    pub p: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Prompt<T = f32> {
    LowRank(PromptFactors<T>),
    Full(FullPrompt<T>),
}

impl<T: Real> Prompt<T> {
    pub fn type_id(&self) -> &str {
        match self {
            Prompt::LowRank(f) => &f.type_id,
            Prompt::Full(f) => &f.type_id,
        }
    }

    pub fn dense(&self) -> Result<Tensor<T>> {
        match self {
            Prompt::LowRank(f) => materialize(f),
            Prompt::Full(f) => Ok(f.p.clone()),
        }
    }
}

pub fn materialize<T: Real>(f: &PromptFactors<T>) -> Result<Tensor<T>> {
    let mut g = Graph::<T>::new();
    let (a, b, d) = (
        g.input(f.a.clone())?,
        g.input(f.b.clone())?,
        g.input(f.d.clone())?,
    );
    let p = g.materialize(a, b, d)?;
    Ok(g.value(p).clone())
}

/// `F'' = F' + P`; metadata is kept.
pub fn apply_prompt(f: &BevFeature, prompt: &Prompt) -> Result<BevFeature> {
    let p = prompt.dense()?;
    if p.shape() != f.map.shape() {
        return Err(Error::ShapeMismatch {
            op: "apply_prompt",
            expected: f.map.shape().to_vec(),
            found: p.shape().to_vec(),
        });
    }
    let data = f
        .map
        .data()
        .iter()
        .zip(p.data())
        .map(|(x, y)| x + y)
        .collect();
    Ok(BevFeature {
        map: Tensor::new(f.map.shape(), data)?,
        ..f.clone()
    })
}

/// `R (C + H + W)` for the factorized prompt, `C H W` for the dense one.
pub fn prompt_param_count(c: usize, h: usize, w: usize, r: usize, low_rank: bool) -> usize {
    if low_rank {
        r * (c + h + w)
    } else {
        c * h * w
    }
}

/// True when `R` exceeds `min(C, H, W)`.
pub fn rank_exceeds_recommended(c: usize, h: usize, w: usize, r: usize) -> bool {
    r > c.min(h).min(w)
}

/// Factors drawn i.i.d. from `N(0, std^2)`, deterministic per seed.
pub fn init_prompt<T: Real>(
    type_id: &str,
    c: usize,
    h: usize,
    w: usize,
    r: usize,
    std: f64,
    seed: u64,
) -> Result<PromptFactors<T>> {
    if r == 0 {
        return Err(Error::Precondition(format!(
            "prompt rank must be >= 1 (type `{type_id}`)"
        )));
    }
    let mut rng = rng_from(mix_seed(seed, 0x11F7));
    let mut draw = |n: usize, cols: usize| -> Result<Tensor<T>> {
        let v: Vec<T> = (0..n * cols)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                T::of(z * std)
            })
            .collect();
        Tensor::new(&[n, cols], v)
    };
    let (a, b, d) = (draw(r, c)?, draw(r, h)?, draw(r, w)?);
    PromptFactors::new(type_id, a, b, d)
}

/// Prompt parameters registered in a store under `lift.<type-id>`.
#[derive(Clone, Debug, PartialEq)]
pub enum PromptParams {
    LowRank { a: ParamId, b: ParamId, d: ParamId },
    Full { p: ParamId },
}

impl PromptParams {
    pub fn register<T: Real>(store: &mut ParameterStore<T>, prompt: &Prompt<T>) -> Result<Self> {
        let base = format!("lift.{}", prompt.type_id());
        Ok(match prompt {
            Prompt::LowRank(f) => PromptParams::LowRank {
                a: store.add(format!("{base}.A"), f.a.clone(), false)?,
                b: store.add(format!("{base}.B"), f.b.clone(), false)?,
                d: store.add(format!("{base}.D"), f.d.clone(), false)?,
            },
            Prompt::Full(f) => PromptParams::Full {
                p: store.add(format!("{base}.P"), f.p.clone(), false)?,
            },
        })
    }

    pub fn ids(&self) -> Vec<ParamId> {
        match *self {
            PromptParams::LowRank { a, b, d } => alloc::vec![a, b, d],
            PromptParams::Full { p } => alloc::vec![p],
        }
    }

    /// The dense prompt as a graph value.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParameterStore<T>) -> Result<Var> {
        match *self {
            PromptParams::LowRank { a, b, d } => {
                let (a, b, d) = (g.param(store, a), g.param(store, b), g.param(store, d));
                g.materialize(a, b, d)
            }
            PromptParams::Full { p } => Ok(g.param(store, p)),
        }
    }

    pub fn apply<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParameterStore<T>,
        x: Var,
    ) -> Result<Var> {
        let p = self.forward(g, store)?;
        g.add(x, p)
    }

    pub fn param_count<T: Real>(&self, store: &ParameterStore<T>) -> usize {
        self.ids()
            .iter()
            .map(|&id| store.get(id).tensor.numel())
            .sum()
    }

    /// Multiply-accumulates of materialization.
    pub fn macs<T: Real>(&self, store: &ParameterStore<T>) -> usize {
        match *self {
            PromptParams::LowRank { a, b, d } => {
                let (r, c) = (
                    store.get(a).tensor.shape()[0],
                    store.get(a).tensor.shape()[1],
                );
                let (h, w) = (
                    store.get(b).tensor.shape()[1],
                    store.get(d).tensor.shape()[1],
                );
                r * (h * w + c * h * w)
            }
            PromptParams::Full { .. } => 0,
        }
    }
}
