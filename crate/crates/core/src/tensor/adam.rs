use super::{Gradients, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

pub const DEFAULT_BETA1: f64 = 0.9;
pub const DEFAULT_BETA2: f64 = 0.999;
pub const DEFAULT_EPS: f64 = 1e-8;

/// Adam moment estimates, one pair of buffers per parameter slot.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    moments: Vec<Option<(Tensor, Tensor)>>,
}

impl Default for AdamState {
    fn default() -> Self {
        Self::new()
    }
}

impl AdamState {
    pub fn new() -> Self {
        Self {
            beta1: DEFAULT_BETA1,
            beta2: DEFAULT_BETA2,
            eps: DEFAULT_EPS,
            step: 0,
            moments: Vec::new(),
        }
    }

    /// First and second moments of `id`, if it has been updated at least once.
    pub fn moments(&self, id: ParamId) -> Option<(&Tensor, &Tensor)> {
        self.moments
            .get(id.index())
            .and_then(Option::as_ref)
            .map(|(m, v)| (m, v))
    }

    pub fn set_moments(&mut self, id: ParamId, m: Tensor, v: Tensor) {
        if self.moments.len() <= id.index() {
            self.moments.resize_with(id.index() + 1, || None);
        }
        self.moments[id.index()] = Some((m, v));
    }

    /// One bias-corrected Adam update of every parameter in `ids`.
    pub fn step(&mut self, params: &mut ParamStore, grads: &Gradients, ids: &[ParamId], lr: f64) -> Result<()> {
        if lr.is_nan() || lr <= 0.0 {
            return Err(Error::Optimizer(format!("learning rate must be positive, got {lr}")));
        }
        for &id in ids {
            let g = grads
                .param(id)
                .ok_or_else(|| Error::Optimizer(format!("missing gradient for {}", params.name(id))))?;
            if g.shape() != params.get(id).shape() {
                return Err(Error::shape(
                    "adam_step",
                    format!(
                        "{}: gradient {:?} vs parameter {:?}",
                        params.name(id),
                        g.shape(),
                        params.get(id).shape()
                    ),
                ));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        for &id in ids {
            let g = grads.param(id).expect("checked above");
            if self.moments.len() <= id.index() {
                self.moments.resize_with(id.index() + 1, || None);
            }
            let (m, v) =
                self.moments[id.index()].get_or_insert_with(|| (Tensor::zeros(g.shape()), Tensor::zeros(g.shape())));
            let p = params.get_mut(id).data_mut();
            for (((p, &gi), m), v) in p.iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                *m = b1 * *m + (1.0 - b1) * gi;
                *v = b2 * *v + (1.0 - b2) * gi * gi;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *p -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
