//! Central finite-difference checks of tape gradients.

use super::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Outcome of a gradient check.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// max over components of `|analytic - numeric| / max(1, |analytic|)`
    pub max_rel_error: f64,
    /// number of components compared
    pub checked: usize,
}

fn check_eps(eps: f64) -> Result<()> {
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::GradCheck(format!("eps {eps} outside [1e-7, 1e-3]")));
    }
    Ok(())
}

fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(1.0)
}

/// Evenly spaced component indices, all of them when `limit` is `None`.
fn sample_indices(numel: usize, limit: Option<usize>) -> Vec<usize> {
    match limit {
        Some(l) if l < numel => (0..l).map(|i| i * numel / l).collect(),
        _ => (0..numel).collect(),
    }
}

fn scalar_of(tape: &Tape, v: Var) -> Result<f64> {
    let t = tape.value(v);
    if t.numel() != 1 {
        return Err(Error::GradCheck(format!(
            "function must be scalar-valued, got shape {:?}",
            t.shape()
        )));
    }
    Ok(t.item())
}

/// Max relative error between the tape gradient of `f` at `x` and central differences.
pub fn gradient_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    gradient_check_sampled(f, x, eps, None).map(|r| r.max_rel_error)
}

/// Like [`gradient_check`] but compares at most `limit` components.
pub fn gradient_check_sampled<F>(f: F, x: &Tensor, eps: f64, limit: Option<usize>) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    check_eps(eps)?;
    let eval = |input: Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.leaf(input)?;
        let out = f(&mut tape, v)?;
        scalar_of(&tape, out)
    };

    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone())?;
    let out = f(&mut tape, xv)?;
    let base = scalar_of(&tape, out)?;
    if eval(x.clone())?.to_bits() != base.to_bits() {
        return Err(Error::GradCheck("function is not deterministic".into()));
    }
    let grads = tape.backward(out)?;
    let analytic = grads.get(xv).expect("leaf gradient").clone();

    let mut worst: f64 = 0.0;
    let indices = sample_indices(x.numel(), limit);
    for &i in &indices {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        worst = worst.max(rel_error(analytic.data()[i], numeric));
    }
    Ok(GradCheckReport {
        max_rel_error: worst,
        checked: indices.len(),
    })
}

/// Gradient check of a loss with respect to stored parameters.
///
/// `f` builds the loss from `store`; each parameter in `ids` is perturbed in
/// place on a private copy. At most `limit` components per tensor are compared.
pub fn gradient_check_params<F>(
    f: F,
    store: &ParamStore,
    ids: &[ParamId],
    eps: f64,
    limit: Option<usize>,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    check_eps(eps)?;
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new();
        let out = f(&mut tape, s)?;
        scalar_of(&tape, out)
    };

    let mut tape = Tape::new();
    let out = f(&mut tape, store)?;
    let base = scalar_of(&tape, out)?;
    if eval(store)?.to_bits() != base.to_bits() {
        return Err(Error::GradCheck("function is not deterministic".into()));
    }
    let grads = tape.backward(out)?;

    let mut work = store.clone();
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for &id in ids {
        let numel = store.get(id).numel();
        let analytic = grads
            .param(id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(store.get(id).shape()));
        for i in sample_indices(numel, limit) {
            let orig = store.get(id).data()[i];
            work.get_mut(id).data_mut()[i] = orig + eps;
            let up = eval(&work)?;
            work.get_mut(id).data_mut()[i] = orig - eps;
            let down = eval(&work)?;
            work.get_mut(id).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            worst = worst.max(rel_error(analytic.data()[i], numeric));
            checked += 1;
        }
    }
    Ok(GradCheckReport {
        max_rel_error: worst,
        checked,
    })
}
