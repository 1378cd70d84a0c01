//! Adam with bias correction over the trainable part of a [`ParameterStore`].

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;

use crate::autodiff::{ParamId, ParameterStore};
use crate::error::{Error, Result};
use crate::tensor::Real;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct AdamState<T: Real = f32> {
    pub lr: f64,
    pub step: u64,
    /// First and second moments, keyed by parameter; trainable parameters only.
    moments: BTreeMap<ParamId, (Vec<T>, Vec<T>)>,
}

impl<T: Real> AdamState<T> {
    /// Allocates moments for every parameter not frozen at construction time.
    pub fn new(store: &ParameterStore<T>, lr: f64) -> Self {
        let moments = store
            .iter()
            .filter(|(_, p)| !p.frozen)
            .map(|(id, p)| {
                (
                    id,
                    (
                        alloc::vec![T::zero(); p.tensor.numel()],
                        alloc::vec![T::zero(); p.tensor.numel()],
                    ),
                )
            })
            .collect();
        Self {
            lr,
            step: 0,
            moments,
        }
    }

    pub fn tracked(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.moments.keys().copied()
    }

    /// One update of every tracked parameter, then clears all gradients.
    ///
    /// Fails without touching any value when a tracked parameter has no
    /// gradient or was frozen after the state was built.
    pub fn step(&mut self, store: &mut ParameterStore<T>) -> Result<()> {
        for &id in self.moments.keys() {
            let p = store.get(id);
            if p.frozen {
                return Err(Error::FrozenUpdate(alloc::format!("`{}`", p.name)));
            }
            if p.grad.is_none() {
                return Err(Error::MissingGrad(p.name.clone()));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (T::of(BETA1), T::of(BETA2));
        let c1 = T::of(1.0 - BETA1.powi(t));
        let c2 = T::of(1.0 - BETA2.powi(t));
        let (lr, eps) = (T::of(self.lr), T::of(EPS));
        for (&id, (m, v)) in self.moments.iter_mut() {
            let p = store.get_mut(id);
            let g = p.grad.as_ref().expect("checked above");
            for (((x, &gi), mi), vi) in p
                .tensor
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = b1 * *mi + (T::one() - b1) * gi;
                *vi = b2 * *vi + (T::one() - b2) * gi * gi;
                let mh = *mi / c1;
                let vh = *vi / c2;
                *x = *x - lr * mh / (vh.sqrt() + eps);
            }
        }
        store.zero_grads();
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn first_step_on_square_moves_by_lr() {
        let mut s = ParameterStore::<f64>::new();
        let x = s.add("x", Tensor::scalar(1.0), false).unwrap();
        let mut a = AdamState::new(&s, 0.1);
        s.accumulate_grad(x, &[2.0]).unwrap();
        a.step(&mut s).unwrap();
        assert!((s.get(x).tensor.item() - 0.9).abs() < 1e-6);
        assert!(s.get(x).grad.is_none());
    }

    #[test]
    fn frozen_untouched_and_zero_grad_keeps_value() {
        let mut s = ParameterStore::<f32>::new();
        let f = s.add("f", Tensor::scalar(3.0), true).unwrap();
        let z = s.add("z", Tensor::scalar(5.0), false).unwrap();
        let mut a = AdamState::new(&s, 0.1);
        assert_eq!(a.tracked().collect::<Vec<_>>(), alloc::vec![z]);
        s.accumulate_grad(z, &[0.0]).unwrap();
        a.step(&mut s).unwrap();
        assert_eq!(s.get(f).tensor.item(), 3.0);
        assert_eq!(s.get(z).tensor.item(), 5.0);
    }

    #[test]
    fn missing_grad_is_an_error() {
        let mut s = ParameterStore::<f32>::new();
        s.add("z", Tensor::scalar(5.0), false).unwrap();
        let mut a = AdamState::new(&s, 0.1);
        assert!(matches!(a.step(&mut s), Err(Error::MissingGrad(_))));
    }

    #[test]
    fn refreezing_a_tracked_param_is_an_error() {
        let mut s = ParameterStore::<f32>::new();
        let z = s.add("z", Tensor::scalar(5.0), false).unwrap();
        let mut a = AdamState::new(&s, 0.1);
        s.accumulate_grad(z, &[1.0]).unwrap();
        s.set_frozen(z, true);
        assert!(matches!(a.step(&mut s), Err(Error::FrozenUpdate(_))));
        assert_eq!(s.get(z).tensor.item(), 5.0);
    }
}
