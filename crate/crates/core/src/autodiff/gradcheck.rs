//! Central finite-difference gradient checking.

use alloc::string::String;
use alloc::vec::Vec;

use super::graph::{Graph, Var};
use super::param::{ParamId, ParameterStore};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let den = analytic.abs().max(numeric.abs()).max(1e-8);
    (analytic - numeric).abs() / den
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name (or "input") and flat index of the worst element.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

impl GradCheckReport {
    fn record(&mut self, name: &str, index: usize, analytic: f64, numeric: f64) {
        let e = relative_error(analytic, numeric);
        self.checked += 1;
        if self.worst.is_none() || e > self.max_rel_error {
            self.max_rel_error = e;
            self.worst = Some((String::from(name), index));
        }
    }
}

fn eval<T: Real>(mut f: impl FnMut(&mut Graph<T>) -> Result<Var>) -> Result<f64> {
    let mut g = Graph::new();
    let out = f(&mut g)?;
    let v = g.value(out);
    if v.numel() != 1 {
        return Err(Error::NonScalarLoss(v.shape().to_vec()));
    }
    Ok(v.item().f64())
}

/// Max relative error between the analytic gradient of scalar `f` at `x`
/// and central differences with step `eps`.
pub fn grad_check<T: Real, F>(x: &Tensor<T>, eps: T, mut f: F) -> Result<f64>
where
    F: FnMut(&mut Graph<T>, Var) -> Result<Var>,
{
    let mut scratch = ParameterStore::new();
    let mut g = Graph::new();
    let xv = g.input_with_grad(x.clone())?;
    let loss = f(&mut g, xv)?;
    let base = g.value(loss).item().f64();
    let analytic = g
        .backward(loss, &mut scratch)?
        .get(xv)
        .unwrap_or_else(|| Tensor::zeros(x.shape()));

    let again = eval(|g| {
        let v = g.input(x.clone())?;
        f(g, v)
    })?;
    if again.to_bits() != base.to_bits() {
        return Err(Error::NonDeterministic);
    }

    let mut report = GradCheckReport::default();
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = eval(|g| {
            let v = g.input(probe.clone())?;
            f(g, v)
        })?;
        probe.data_mut()[i] = orig - eps;
        let minus = eval(|g| {
            let v = g.input(probe.clone())?;
            f(g, v)
        })?;
        probe.data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * eps.f64());
        report.record("input", i, analytic.data()[i].f64(), numeric);
    }
    Ok(report.max_rel_error)
}

/// Gradient check over stored parameters. At most `per_param` elements of
/// each parameter are probed, evenly strided, so large models stay cheap.
pub fn grad_check_params<T: Real, F>(
    store: &mut ParameterStore<T>,
    ids: &[ParamId],
    eps: T,
    per_param: usize,
    mut f: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph<T>, &ParameterStore<T>) -> Result<Var>,
{
    store.zero_grads();
    let mut g = Graph::new();
    let loss = f(&mut g, store)?;
    let base = g.value(loss).item().f64();
    g.backward(loss, store)?;
    if eval(|g| f(g, store))?.to_bits() != base.to_bits() {
        return Err(Error::NonDeterministic);
    }

    let mut report = GradCheckReport::default();
    for &id in ids {
        let n = store.get(id).tensor.numel();
        let name = store.get(id).name.clone();
        let analytic: Vec<f64> = match &store.get(id).grad {
            Some(g) => g.data().iter().map(|v| v.f64()).collect(),
            None => alloc::vec![0.0; n],
        };
        let step = n.div_ceil(per_param.max(1)).max(1);
        for i in (0..n).step_by(step) {
            let orig = store.get(id).tensor.data()[i];
            store.get_mut(id).tensor.data_mut()[i] = orig + eps;
            let plus = eval(|g| f(g, store))?;
            store.get_mut(id).tensor.data_mut()[i] = orig - eps;
            let minus = eval(|g| f(g, store))?;
            store.get_mut(id).tensor.data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps.f64());
            report.record(&name, i, analytic[i], numeric);
        }
    }
    store.zero_grads();
    Ok(report)
}
