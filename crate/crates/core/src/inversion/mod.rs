//! Latent recovery: find `z*` with `G(z*) ≈ x` by gradient descent on the
//! binary cross-entropy between targets and generations.

mod config;
mod descent;
mod objective;
mod probe;

#[cfg(test)]
mod tests;

pub use config::{ConstraintPolicy, InversionConfig, Optimizer, Reduction};
pub use descent::{descend, init_latents, invert_batch, invert_batch_observed, Descent, InversionResult, StepView};
pub use objective::{bce_loss, bce_loss_reduced, clip_to_support, mean_abs_pixel_error, stats_regularizer};
pub use probe::{cross_gradient_probe, own_gradient, PROBE_STEP};
