//! Batch normalization over the batch (and spatial) axes of each feature.

use crate::error::{Error, Result};
use crate::tensor::{channel_stats, Tensor};
use serde::{Deserialize, Serialize};

/// Variance offset inside the square root.
pub const BN_EPS: f64 = 1e-5;
/// Weight of the old running statistic in `new = m·old + (1−m)·batch`.
pub const BN_MOMENTUM: f64 = 0.9;

/// Where normalization statistics come from during a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BnMode {
    /// Statistics of the current batch; samples interact.
    BatchStats,
    /// Stored running statistics; every sample is processed independently.
    FixedStats,
}

/// `(batch, channels, spatial)` view of a 2-D `[B, F]` or 4-D `[B, C, H, W]` tensor.
pub(crate) fn bn_layout(x: &Tensor, features: usize) -> Result<(usize, usize, usize)> {
    let d = x.dims();
    let (b, c, s) = match d.len() {
        2 => (d[0], d[1], 1),
        4 => (d[0], d[1], d[2] * d[3]),
        _ => {
            return Err(Error::dim(format!(
                "batch norm expects 2-D or 4-D input, got {}",
                x.shape()
            )))
        }
    };
    if c != features {
        return Err(Error::dim(format!(
            "batch norm over {features} features applied to {}",
            x.shape()
        )));
    }
    Ok((b, c, s))
}

/// Everything the reverse pass needs from one batch-norm forward.
#[derive(Clone, Debug)]
pub(crate) struct BnCache {
    pub mode: BnMode,
    pub xhat: Tensor,
    pub inv_std: Vec<f64>,
    /// Batch statistics used for normalization (BatchStats only).
    pub batch_mean: Option<Vec<f64>>,
    pub batch_var: Option<Vec<f64>>,
}

pub(crate) fn bn_forward_cached(
    x: &Tensor,
    gain: &Tensor,
    shift: &Tensor,
    mode: BnMode,
    running: (&Tensor, &Tensor),
    eps: f64,
) -> Result<(Tensor, BnCache)> {
    if !(eps > 0.0) {
        return Err(Error::Config(format!("batch norm eps must be positive, got {eps}")));
    }
    let features = gain.numel();
    let (b, c, s) = bn_layout(x, features)?;
    for (name, t) in [
        ("shift", shift),
        ("running mean", running.0),
        ("running var", running.1),
    ] {
        if t.numel() != features {
            return Err(Error::dim(format!(
                "batch norm {name} has {} entries, expected {features}",
                t.numel()
            )));
        }
    }
    let (mean, var, batch) = match mode {
        BnMode::BatchStats => {
            if b < 2 {
                return Err(Error::Mode(format!(
                    "batch statistics need at least 2 samples, got {b}"
                )));
            }
            let (m, v) = channel_stats(x.data(), b, c, s);
            (m.clone(), v.clone(), Some((m, v)))
        }
        BnMode::FixedStats => (running.0.data().to_vec(), running.1.data().to_vec(), None),
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut xhat = vec![0.0; x.numel()];
    let mut y = vec![0.0; x.numel()];
    for bi in 0..b {
        for ch in 0..c {
            let base = (bi * c + ch) * s;
            let (m, is, g, sh) = (mean[ch], inv_std[ch], gain.data()[ch], shift.data()[ch]);
            for i in base..base + s {
                let h = (x.data()[i] - m) * is;
                xhat[i] = h;
                y[i] = h * g + sh;
            }
        }
    }
    let y = Tensor::from_parts(x.dims(), y);
    y.ensure_finite("batch norm")?;
    let (batch_mean, batch_var) = match batch {
        Some((m, v)) => (Some(m), Some(v)),
        None => (None, None),
    };
    Ok((
        y,
        BnCache {
            mode,
            xhat: Tensor::from_parts(x.dims(), xhat),
            inv_std,
            batch_mean,
            batch_var,
        },
    ))
}

/// `y = (x − m)/√(v + ε)·gain + shift`, with `(m, v)` chosen by `mode`.
pub fn batchnorm_forward(
    x: &Tensor,
    gain: &Tensor,
    shift: &Tensor,
    mode: BnMode,
    running: (&Tensor, &Tensor),
    eps: f64,
) -> Result<Tensor> {
    bn_forward_cached(x, gain, shift, mode, running, eps).map(|(y, _)| y)
}

pub(crate) fn bn_backward_input(cache: &BnCache, gain: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    let (b, c, s) = bn_layout(grad_out, gain.numel())?;
    let xhat = cache.xhat.data();
    let g = grad_out.data();
    let mut dx = vec![0.0; g.len()];
    match cache.mode {
        BnMode::FixedStats => {
            for bi in 0..b {
                for ch in 0..c {
                    let scale = gain.data()[ch] * cache.inv_std[ch];
                    let base = (bi * c + ch) * s;
                    for i in base..base + s {
                        dx[i] = g[i] * scale;
                    }
                }
            }
        }
        BnMode::BatchStats => {
            // dx = inv_std · (dxhat − mean(dxhat) − xhat · mean(dxhat · xhat))
            let n = (b * s) as f64;
            let mut sum_d = vec![0.0; c];
            let mut sum_dx = vec![0.0; c];
            for bi in 0..b {
                for ch in 0..c {
                    let gn = gain.data()[ch];
                    let base = (bi * c + ch) * s;
                    for i in base..base + s {
                        let d = g[i] * gn;
                        sum_d[ch] += d;
                        sum_dx[ch] += d * xhat[i];
                    }
                }
            }
            for bi in 0..b {
                for ch in 0..c {
                    let gn = gain.data()[ch];
                    let (md, mdx, is) = (sum_d[ch] / n, sum_dx[ch] / n, cache.inv_std[ch]);
                    let base = (bi * c + ch) * s;
                    for i in base..base + s {
                        dx[i] = is * (g[i] * gn - md - xhat[i] * mdx);
                    }
                }
            }
        }
    }
    let out = Tensor::from_parts(grad_out.dims(), dx);
    out.ensure_finite("batch norm backward")?;
    Ok(out)
}

/// Gradients of gain and shift.
pub(crate) fn bn_backward_params(cache: &BnCache, grad_out: &Tensor) -> Result<(Tensor, Tensor)> {
    let c = cache.inv_std.len();
    let (b, _, s) = bn_layout(grad_out, c)?;
    let mut dgain = vec![0.0; c];
    let mut dshift = vec![0.0; c];
    let (g, xhat) = (grad_out.data(), cache.xhat.data());
    for bi in 0..b {
        for ch in 0..c {
            let base = (bi * c + ch) * s;
            for i in base..base + s {
                dgain[ch] += g[i] * xhat[i];
                dshift[ch] += g[i];
            }
        }
    }
    let dgain = Tensor::from_parts(&[c], dgain);
    let dshift = Tensor::from_parts(&[c], dshift);
    dgain.ensure_finite("batch norm gain gradient")?;
    dshift.ensure_finite("batch norm shift gradient")?;
    Ok((dgain, dshift))
}
