use super::config::{ConstraintPolicy, InversionConfig};
use super::objective::{bce_loss_reduced, clip_to_support, mean_abs_pixel_error, stats_regularizer};
use crate::error::{Error, Result};
use crate::nn::{backward_input, forward, BnMode, Network};
use crate::prior::PriorSpec;
use crate::tensor::Tensor;
use crate::train::{adam_step, AdamState};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// `batch × dim` i.i.d. draws from `prior`.
pub fn init_latents(prior: &PriorSpec, batch: usize, dim: usize, seed: u64) -> Result<Tensor> {
    if batch == 0 || dim == 0 {
        return Err(Error::dim(format!("cannot draw a {batch}x{dim} latent batch")));
    }
    prior.sample(batch, dim, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Seed of the initial latents for restart `r`.
fn restart_seed(seed: u64, r: usize) -> u64 {
    seed.wrapping_add((r as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// State handed to an observer once per evaluated iterate.
pub struct StepView<'a> {
    pub restart: usize,
    pub iteration: usize,
    pub z: &'a Tensor,
    /// Objective value: cross-entropy plus any regularizer.
    pub loss: f64,
    pub bce: f64,
    pub grad: &'a Tensor,
}

/// Outcome of one descent from one initialization.
#[derive(Clone, Debug, PartialEq)]
pub struct Descent {
    pub z: Tensor,
    pub reconstructions: Tensor,
    /// Objective at every evaluated iterate, starting with the initialization.
    pub loss_history: Vec<f64>,
    pub final_bce: f64,
    /// Optimizer steps taken.
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InversionResult {
    pub z_star: Tensor,
    pub reconstructions: Tensor,
    pub loss_history: Vec<f64>,
    pub per_image_mae: Vec<f64>,
    pub mean_mae: f64,
    pub iterations_used: usize,
    pub restart_index_chosen: usize,
    pub restart_final_bce: Vec<f64>,
    pub converged: bool,
    pub bn_mode: BnMode,
}

fn check_inputs(g: &Network, targets: &Tensor, z: &Tensor, mode: BnMode) -> Result<()> {
    if targets.dims().get(1..) != Some(g.output_dims()) {
        return Err(Error::dim(format!(
            "targets {} do not match generator output {:?}",
            targets.shape(),
            g.output_dims()
        )));
    }
    let latent = g
        .latent_dim()
        .ok_or_else(|| Error::Config("generator input must be a flat latent vector".into()))?;
    if z.dims() != [targets.dims()[0], latent] {
        return Err(Error::dim(format!(
            "latents {} do not match {} targets of a {latent}-dimensional generator",
            z.shape(),
            targets.dims()[0]
        )));
    }
    if mode == BnMode::BatchStats && g.has_batchnorm() && targets.dims()[0] < 2 {
        return Err(Error::Mode("batch statistics need at least 2 targets".into()));
    }
    Ok(())
}

fn numeric_at(iteration: usize, e: Error) -> Error {
    match e {
        Error::Numeric { context } => Error::NonFiniteLoss { iteration, context },
        other => other,
    }
}

/// Gradient descent from the given initial latents until the relative loss
/// change stays below `tol` for `patience` consecutive iterations or
/// `max_iters` steps have been taken. `restarts` and `seed` are ignored.
pub fn descend(
    g: &Network,
    targets: &Tensor,
    prior: &PriorSpec,
    cfg: &InversionConfig,
    z0: Tensor,
    restart: usize,
    observer: &mut dyn FnMut(&StepView),
) -> Result<Descent> {
    cfg.validate(prior)?;
    let mode = cfg.resolved_bn_mode(g);
    check_inputs(g, targets, &z0, mode)?;
    z0.ensure_finite("initial latents")?;
    let clip = match (cfg.policy, prior) {
        (ConstraintPolicy::Clip, PriorSpec::Uniform { a, b }) => Some((*a, *b)),
        _ => None,
    };
    let mut z = match clip {
        Some((a, b)) => clip_to_support(&z0, a, b)?,
        None => z0,
    };
    let adam = cfg.adam();
    let mut state = AdamState::default();
    let mut history: Vec<f64> = Vec::new();
    let mut calm = 0;
    let mut it = 0;
    loop {
        let at = |e| numeric_at(it, e);
        let (recon, trace) = forward(g, &z, mode).map_err(at)?;
        let (bce, grad_recon) = bce_loss_reduced(targets, &recon, cfg.reduction).map_err(at)?;
        let mut grad = backward_input(g, &trace, &grad_recon).map_err(at)?;
        let mut loss = bce;
        if let (ConstraintPolicy::StatsRegularize { gamma1, gamma2 }, PriorSpec::Gaussian { mean, std }) =
            (cfg.policy, prior)
        {
            let (pen, pg) = stats_regularizer(&z, *mean, *std, gamma1, gamma2).map_err(at)?;
            loss += pen;
            grad = grad.axpby(1.0, &pg, 1.0)?;
        }
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                iteration: it,
                context: "inversion objective".into(),
            });
        }
        observer(&StepView {
            restart,
            iteration: it,
            z: &z,
            loss,
            bce,
            grad: &grad,
        });
        if let Some(&prev) = history.last() {
            let rel = (loss - prev).abs() / f64::max(prev, 1e-12);
            calm = if rel < cfg.tol { calm + 1 } else { 0 };
        }
        history.push(loss);
        let converged = calm >= cfg.patience;
        if converged || it == cfg.max_iters {
            return Ok(Descent {
                z,
                reconstructions: recon,
                loss_history: history,
                final_bce: bce,
                iterations: it,
                converged,
            });
        }
        match &adam {
            Some(a) => adam_step([&mut z], [&grad], &mut state, a)?,
            None => z = z.axpby(1.0, &grad, -cfg.alpha)?,
        }
        if let Some((a, b)) = clip {
            z = clip_to_support(&z, a, b)?;
        }
        it += 1;
    }
}

/// Inverts a batch of targets, keeping the restart with the lowest final
/// cross-entropy.
pub fn invert_batch(
    g: &Network,
    targets: &Tensor,
    prior: &PriorSpec,
    cfg: &InversionConfig,
) -> Result<InversionResult> {
    invert_batch_observed(g, targets, prior, cfg, |_| {})
}

/// [`invert_batch`] with a callback invoked at every evaluated iterate of
/// every restart.
pub fn invert_batch_observed(
    g: &Network,
    targets: &Tensor,
    prior: &PriorSpec,
    cfg: &InversionConfig,
    mut observer: impl FnMut(&StepView),
) -> Result<InversionResult> {
    cfg.validate(prior)?;
    let latent = g
        .latent_dim()
        .ok_or_else(|| Error::Config("generator input must be a flat latent vector".into()))?;
    let batch = targets
        .dims()
        .first()
        .copied()
        .ok_or_else(|| Error::dim("empty target batch"))?;
    let mut best: Option<(usize, Descent)> = None;
    let mut finals = Vec::with_capacity(cfg.restarts);
    for r in 0..cfg.restarts {
        let z0 = init_latents(prior, batch, latent, restart_seed(cfg.seed, r))?;
        let d = descend(g, targets, prior, cfg, z0, r, &mut observer)?;
        finals.push(d.final_bce);
        if best.as_ref().is_none_or(|(_, b)| d.final_bce < b.final_bce) {
            best = Some((r, d));
        }
    }
    let (chosen, d) = best.expect("at least one restart");
    let (per_image_mae, mean_mae) = mean_abs_pixel_error(targets, &d.reconstructions)?;
    Ok(InversionResult {
        z_star: d.z,
        reconstructions: d.reconstructions,
        loss_history: d.loss_history,
        per_image_mae,
        mean_mae,
        iterations_used: d.iterations,
        restart_index_chosen: chosen,
        restart_final_bce: finals,
        converged: d.converged,
        bn_mode: cfg.resolved_bn_mode(g),
    })
}
