use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Probabilities are clamped to `[LOG_CLAMP, 1 − LOG_CLAMP]` before logarithms.
pub const LOG_CLAMP: f64 = 1e-7;

/// Clamped probability and the derivative of the clamp.
fn clamp(p: f64) -> (f64, f64) {
    if p < LOG_CLAMP {
        (LOG_CLAMP, 0.0)
    } else if p > 1.0 - LOG_CLAMP {
        (1.0 - LOG_CLAMP, 0.0)
    } else {
        (p, 1.0)
    }
}

fn check_probs(t: &Tensor, what: &str) -> Result<()> {
    t.ensure_finite(what)?;
    if t.data().iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(Error::Domain(format!("{what} must lie in [0, 1]")));
    }
    Ok(())
}

/// `−mean ln d_real − mean ln(1 − d_fake)` and its gradients with respect to
/// both score tensors.
pub fn discriminator_loss(d_real: &Tensor, d_fake: &Tensor) -> Result<(f64, Tensor, Tensor)> {
    check_probs(d_real, "discriminator scores on real data")?;
    check_probs(d_fake, "discriminator scores on generated data")?;
    let (nr, nf) = (d_real.numel() as f64, d_fake.numel() as f64);
    let mut loss = 0.0;
    let mut g_real = vec![0.0; d_real.numel()];
    for (g, &p) in g_real.iter_mut().zip(d_real.data()) {
        let (c, dc) = clamp(p);
        loss -= c.ln() / nr;
        *g = -dc / (c * nr);
    }
    let mut g_fake = vec![0.0; d_fake.numel()];
    for (g, &p) in g_fake.iter_mut().zip(d_fake.data()) {
        let (c, dc) = clamp(p);
        loss -= (1.0 - c).ln() / nf;
        *g = dc / ((1.0 - c) * nf);
    }
    Ok((
        loss,
        Tensor::from_vec(d_real.dims(), g_real)?,
        Tensor::from_vec(d_fake.dims(), g_fake)?,
    ))
}

/// Non-saturating generator objective `−mean ln d_fake` and its gradient.
pub fn generator_loss(d_fake: &Tensor) -> Result<(f64, Tensor)> {
    check_probs(d_fake, "discriminator scores on generated data")?;
    let n = d_fake.numel() as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; d_fake.numel()];
    for (g, &p) in grad.iter_mut().zip(d_fake.data()) {
        let (c, dc) = clamp(p);
        loss -= c.ln() / n;
        *g = -dc / (c * n);
    }
    Ok((loss, Tensor::from_vec(d_fake.dims(), grad)?))
}
