use super::config::Reduction;
use super::objective::bce_loss_reduced;
use crate::error::{Error, Result};
use crate::nn::{backward_input, forward, BnMode, Network};
use crate::tensor::Tensor;

/// Forward-difference step of [`cross_gradient_probe`].
pub const PROBE_STEP: f64 = 1e-4;

fn check_pair(z: &Tensor, targets: &Tensor, i: usize, j: Option<usize>) -> Result<()> {
    let b = z.dims()[0];
    if targets.dims()[0] != b {
        return Err(Error::dim(format!("{} latents for {} targets", b, targets.dims()[0])));
    }
    if i >= b || j.is_some_and(|j| j >= b || j == i) {
        return Err(Error::dim(format!(
            "invalid sample pair ({i}, {j:?}) in a batch of {b}"
        )));
    }
    Ok(())
}

/// Mean cross-entropy of sample `i` when the whole batch is generated together.
fn sample_loss(g: &Network, z: &Tensor, targets: &Tensor, mode: BnMode, i: usize) -> Result<f64> {
    let (recon, _) = forward(g, z, mode)?;
    let (loss, _) = bce_loss_reduced(
        &targets.slice_batch(i, i + 1)?,
        &recon.slice_batch(i, i + 1)?,
        Reduction::Mean,
    )?;
    Ok(loss)
}

/// `max_c |L_i(z + h·e_{j,c}) − L_i(z)| / h`: how strongly sample `i`'s own
/// loss responds to the latent of a different sample `j`.
pub fn cross_gradient_probe(
    g: &Network,
    z: &Tensor,
    targets: &Tensor,
    mode: BnMode,
    i: usize,
    j: usize,
) -> Result<f64> {
    check_pair(z, targets, i, Some(j))?;
    let base = sample_loss(g, z, targets, mode, i)?;
    let d = z.dims()[1];
    let mut probe = z.clone();
    let mut worst: f64 = 0.0;
    for c in 0..d {
        let k = j * d + c;
        let orig = probe.data()[k];
        probe.data_mut()[k] = orig + PROBE_STEP;
        let moved = sample_loss(g, &probe, targets, mode, i)?;
        probe.data_mut()[k] = orig;
        worst = worst.max((moved - base).abs() / PROBE_STEP);
    }
    Ok(worst)
}

/// Analytic gradient of sample `i`'s mean cross-entropy with respect to its
/// own latent, with the batch generated together.
pub fn own_gradient(g: &Network, z: &Tensor, targets: &Tensor, mode: BnMode, i: usize) -> Result<Tensor> {
    check_pair(z, targets, i, None)?;
    let (recon, trace) = forward(g, z, mode)?;
    let (_, gi) = bce_loss_reduced(
        &targets.slice_batch(i, i + 1)?,
        &recon.slice_batch(i, i + 1)?,
        Reduction::Mean,
    )?;
    let per = gi.numel();
    let mut full = Tensor::zeros(recon.dims())?;
    full.data_mut()[i * per..(i + 1) * per].copy_from_slice(gi.data());
    let gz = backward_input(g, &trace, &full)?;
    gz.slice_batch(i, i + 1)?.reshape(&[z.dims()[1]])
}
