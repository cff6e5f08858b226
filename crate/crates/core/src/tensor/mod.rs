//! Dense `f64` tensors, a reverse-mode gradient tape, Adam, and finite-difference checks.

mod adam;
mod dense;
mod gradcheck;
mod params;
mod tape;

#[cfg(test)]
mod tests;

pub use adam::AdamState;
pub use dense::Tensor;
pub use gradcheck::{gradient_check, gradient_check_params, gradient_check_sampled, GradCheckReport};
pub use params::{ParamId, ParamStore};
pub use tape::{BatchNormMode, BatchStats, Gradients, Tape, Var};
