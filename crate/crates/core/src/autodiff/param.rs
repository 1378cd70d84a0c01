//! Named parameters with freeze flags.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Parameter<T = f32> {
    pub name: String,
    pub tensor: Tensor<T>,
    pub grad: Option<Tensor<T>>,
    pub frozen: bool,
}

/// Owns every parameter of a model, addressed by [`ParamId`] or unique name.
#[derive(Clone, Debug, Default)]
pub struct ParameterStore<T = f32> {
    params: Vec<Parameter<T>>,
    index: BTreeMap<String, ParamId>,
}

impl<T: Real> ParameterStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            index: BTreeMap::new(),
        }
    }

    pub fn add(
        &mut self,
        name: impl Into<String>,
        tensor: Tensor<T>,
        frozen: bool,
    ) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::DuplicateParameter(name));
        }
        let id = ParamId(self.params.len());
        self.index.insert(name.clone(), id);
        self.params.push(Parameter {
            name,
            tensor,
            grad: None,
            frozen,
        });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter<T>> {
        self.id(name).map(|id| &self.params[id.0])
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn set_frozen(&mut self, id: ParamId, frozen: bool) {
        self.params[id.0].frozen = frozen;
    }

    pub fn freeze_all(&mut self) {
        for p in &mut self.params {
            p.frozen = true;
        }
    }

    pub fn trainable_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| !p.frozen)
            .map(|p| p.tensor.numel())
            .sum()
    }

    pub fn total_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    /// Adds `grad` into the parameter's gradient slot. Frozen parameters
    /// reject accumulation.
    pub fn accumulate_grad(&mut self, id: ParamId, grad: &[T]) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.frozen {
            return Err(Error::FrozenUpdate(alloc::format!("`{}`", p.name)));
        }
        if grad.len() != p.tensor.numel() {
            return Err(Error::ShapeMismatch {
                op: "accumulate_grad",
                expected: p.tensor.shape().to_vec(),
                found: alloc::vec![grad.len()],
            });
        }
        match &mut p.grad {
            Some(g) => {
                for (a, &b) in g.data_mut().iter_mut().zip(grad) {
                    *a += b;
                }
            }
            None => {
                p.grad = Some(Tensor::new(p.tensor.shape(), grad.to_vec())?);
            }
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Copies values from `other` for every name present in both stores.
    /// Returns the number of parameters copied.
    pub fn copy_values_from(&mut self, other: &ParameterStore<T>) -> Result<usize> {
        let mut n = 0;
        for p in &mut self.params {
            if let Some(src) = other.by_name(&p.name) {
                if src.tensor.shape() != p.tensor.shape() {
                    return Err(Error::ShapeMismatch {
                        op: "copy_values_from",
                        expected: p.tensor.shape().to_vec(),
                        found: src.tensor.shape().to_vec(),
                    });
                }
                p.tensor = src.tensor.clone();
                n += 1;
            }
        }
        Ok(n)
    }

    /// Same names, shapes and freeze flags at a different precision.
    pub fn cast<U: Real>(&self) -> ParameterStore<U> {
        ParameterStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    tensor: p.tensor.cast(),
                    grad: p.grad.as_ref().map(Tensor::cast),
                    frozen: p.frozen,
                })
                .collect(),
            index: self.index.clone(),
        }
    }

    /// Subset of parameters whose names satisfy `keep`, preserving order.
    pub fn subset(&self, mut keep: impl FnMut(&str) -> bool) -> ParameterStore<T> {
        let mut out = ParameterStore::new();
        for p in &self.params {
            if keep(&p.name) {
                out.add(p.name.to_string(), p.tensor.clone(), p.frozen)
                    .expect("names are unique");
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique() {
        let mut s = ParameterStore::<f32>::new();
        s.add("a.w", Tensor::zeros(&[1]), false).unwrap();
        assert_eq!(
            s.add("a.w", Tensor::zeros(&[1]), false),
            Err(Error::DuplicateParameter("a.w".into()))
        );
    }

    #[test]
    fn frozen_rejects_accumulation() {
        let mut s = ParameterStore::<f32>::new();
        let id = s.add("a.w", Tensor::zeros(&[2]), true).unwrap();
        assert!(matches!(
            s.accumulate_grad(id, &[1.0, 1.0]),
            Err(Error::FrozenUpdate(_))
        ));
        assert!(s.get(id).grad.is_none());
    }

    #[test]
    fn accumulation_is_additive() {
        let mut s = ParameterStore::<f32>::new();
        let id = s.add("a.w", Tensor::zeros(&[2]), false).unwrap();
        s.accumulate_grad(id, &[1.0, 2.0]).unwrap();
        s.accumulate_grad(id, &[0.5, 0.5]).unwrap();
        assert_eq!(s.get(id).grad.as_ref().unwrap().data(), &[1.5, 2.5]);
    }
}
