use super::config::Reduction;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::train::LOG_CLAMP;

/// Guard added to the variance before the square root in the std derivative.
const STD_GUARD: f64 = 1e-12;

fn check_targets(target: &Tensor) -> Result<()> {
    target.ensure_finite("targets")?;
    if target.data().iter().any(|x| !(0.0..=1.0).contains(x)) {
        return Err(Error::Domain("targets must lie in [0, 1]".into()));
    }
    Ok(())
}

/// Mean binary cross-entropy over all pixels and samples, with its gradient
/// with respect to `recon`.
pub fn bce_loss(target: &Tensor, recon: &Tensor) -> Result<(f64, Tensor)> {
    bce_loss_reduced(target, recon, Reduction::Mean)
}

pub fn bce_loss_reduced(target: &Tensor, recon: &Tensor, reduction: Reduction) -> Result<(f64, Tensor)> {
    target.expect_same_shape(recon, "bce_loss")?;
    check_targets(target)?;
    recon.ensure_finite("reconstruction")?;
    let batch = target.dims()[0];
    let per = target.numel() / batch;
    let n = match reduction {
        Reduction::Mean => target.numel(),
        Reduction::PerSample => per,
    } as f64;
    let mut grad = vec![0.0; target.numel()];
    let mut loss = 0.0;
    for s in 0..batch {
        let mut sample = 0.0;
        for i in s * per..(s + 1) * per {
            let (x, r) = (target.data()[i], recon.data()[i]);
            let (g, dg) = if r < LOG_CLAMP {
                (LOG_CLAMP, 0.0)
            } else if r > 1.0 - LOG_CLAMP {
                (1.0 - LOG_CLAMP, 0.0)
            } else {
                (r, 1.0)
            };
            sample -= x * g.ln() + (1.0 - x) * (1.0 - g).ln();
            grad[i] = dg * (-x / g + (1.0 - x) / (1.0 - g)) / n;
        }
        loss += sample / n;
    }
    Ok((loss, Tensor::from_vec(target.dims(), grad)?))
}

/// `γ1(μ − μ̂)² + γ2(σ − σ̂)²` with `μ̂`, `σ̂` the mean and population std of
/// every entry of `z`, and its gradient.
pub fn stats_regularizer(z: &Tensor, mean: f64, std: f64, gamma1: f64, gamma2: f64) -> Result<(f64, Tensor)> {
    z.ensure_finite("latents")?;
    let n = z.numel() as f64;
    let mu = z.data().iter().sum::<f64>() / n;
    let var = z.data().iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
    let sd = var.sqrt();
    let penalty = gamma1 * (mean - mu).powi(2) + gamma2 * (std - sd).powi(2);
    let guarded = (var + STD_GUARD).sqrt();
    let gm = -2.0 * gamma1 * (mean - mu) / n;
    let gs = -2.0 * gamma2 * (std - sd) / (n * guarded);
    let grad = z.map(|v| gm + gs * (v - mu))?;
    Ok((penalty, grad))
}

pub fn clip_to_support(z: &Tensor, a: f64, b: f64) -> Result<Tensor> {
    z.map(|v| v.clamp(a, b))
}

/// Per-image mean absolute pixel error and its mean over the batch.
pub fn mean_abs_pixel_error(targets: &Tensor, recon: &Tensor) -> Result<(Vec<f64>, f64)> {
    targets.expect_same_shape(recon, "mean_abs_pixel_error")?;
    let batch = targets.dims()[0];
    let per = targets.numel() / batch;
    let per_image: Vec<f64> = targets
        .data()
        .chunks(per)
        .zip(recon.data().chunks(per))
        .map(|(x, r)| x.iter().zip(r).map(|(a, b)| (a - b).abs()).sum::<f64>() / per as f64)
        .collect();
    let mean = per_image.iter().sum::<f64>() / batch as f64;
    Ok((per_image, mean))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{fd_gradient, max_rel_err, random_tensor};
    use proptest::prelude::*;
    use std::f64::consts::LN_2;

    fn unit(dims: &[usize], seed: u64) -> Tensor {
        random_tensor(dims, seed).map(|v| 0.1 + 0.4 * (v + 1.0)).unwrap()
    }

    #[test]
    fn binary_target_reproduced_has_zero_gradient() {
        let x = random_tensor(&[3, 1, 4, 4], 1)
            .map(|v| if v > 0.0 { 1.0 } else { 0.0 })
            .unwrap();
        let (loss, g) = bce_loss(&x, &x).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
        let other = unit(&[3, 1, 4, 4], 2);
        assert!(bce_loss(&x, &other).unwrap().0 > loss);
        // Soft targets reproduced exactly also give an exact zero.
        let soft = unit(&[3, 1, 4, 4], 3);
        assert!(bce_loss(&soft, &soft).unwrap().1.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn half_reconstruction_costs_ln2() {
        let x = unit(&[2, 1, 3, 3], 4);
        let h = Tensor::full(&[2, 1, 3, 3], 0.5).unwrap();
        assert!((bce_loss(&x, &h).unwrap().0 - LN_2).abs() < 1e-15);
    }

    #[test]
    fn targets_outside_unit_interval_are_a_domain_error() {
        let x = Tensor::full(&[1, 1, 2, 2], 1.2).unwrap();
        let r = Tensor::full(&[1, 1, 2, 2], 0.5).unwrap();
        assert!(matches!(bce_loss(&x, &r), Err(Error::Domain(_))));
    }

    #[test]
    fn bce_gradient_matches_finite_differences() {
        let x = unit(&[3, 1, 4, 4], 5);
        let r = unit(&[3, 1, 4, 4], 6);
        for red in [Reduction::Mean, Reduction::PerSample] {
            let (_, g) = bce_loss_reduced(&x, &r, red).unwrap();
            let fd = fd_gradient(&r, 1e-5, |p| bce_loss_reduced(&x, p, red).unwrap().0);
            let err = max_rel_err(&g, &fd, 1e-3 * fd.max_abs());
            assert!(err < 1e-8, "{red:?}: {err}");
        }
    }

    #[test]
    fn per_sample_reduction_scales_the_mean() {
        let x = unit(&[4, 1, 3, 3], 7);
        let r = unit(&[4, 1, 3, 3], 8);
        let (m, _) = bce_loss(&x, &r).unwrap();
        let (s, _) = bce_loss_reduced(&x, &r, Reduction::PerSample).unwrap();
        assert!((4.0 * m - s).abs() < 1e-13);
    }

    #[test]
    fn regularizer_examples() {
        let z = Tensor::zeros(&[4, 5]).unwrap();
        let (p, g) = stats_regularizer(&z, 0.0, 1.0, 1.0, 1.0).unwrap();
        assert_eq!(p, 1.0);
        assert!(g.data().iter().all(|v| v.is_finite()));
        // Exactly mean 0, population std 1.
        let z = Tensor::from_vec(&[2, 2], vec![1.0, -1.0, 1.0, -1.0]).unwrap();
        let (p, g) = stats_regularizer(&z, 0.0, 1.0, 1.0, 1.0).unwrap();
        assert_eq!(p, 0.0);
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn regularizer_gradient_matches_finite_differences() {
        for seed in 0..5 {
            let z = random_tensor(&[6, 10], seed).map(|v| 0.3 + 2.0 * v).unwrap();
            let (_, g) = stats_regularizer(&z, 0.1, 1.0, 1.0, 0.7).unwrap();
            let fd = fd_gradient(&z, 1e-5, |p| stats_regularizer(p, 0.1, 1.0, 1.0, 0.7).unwrap().0);
            assert!(max_rel_err(&g, &fd, 1e-9) < 1e-6);
        }
    }

    #[test]
    fn clip_examples() {
        let z = Tensor::from_vec(&[1, 4], vec![1.3, -2.0, 0.5, -1.0]).unwrap();
        let c = clip_to_support(&z, -1.0, 1.0).unwrap();
        assert_eq!(c.data(), &[1.0, -1.0, 0.5, -1.0]);
    }

    #[test]
    fn mae_examples() {
        let x = unit(&[2, 1, 3, 3], 9);
        let (per, m) = mean_abs_pixel_error(&x, &x).unwrap();
        assert_eq!(per, vec![0.0, 0.0]);
        assert_eq!(m, 0.0);
        let ones = Tensor::full(&[2, 1, 3, 3], 1.0).unwrap();
        let zeros = Tensor::zeros(&[2, 1, 3, 3]).unwrap();
        assert_eq!(mean_abs_pixel_error(&ones, &zeros).unwrap().1, 1.0);
        assert!(mean_abs_pixel_error(&ones, &Tensor::zeros(&[2, 9]).unwrap()).is_err());
    }

    proptest! {
        #[test]
        fn clip_is_idempotent(seed in 0u64..500, a in -3.0f64..0.0, w in 0.1f64..3.0) {
            let z = random_tensor(&[5, 7], seed).map(|v| 4.0 * v).unwrap();
            let once = clip_to_support(&z, a, a + w).unwrap();
            prop_assert_eq!(clip_to_support(&once, a, a + w).unwrap(), once.clone());
            prop_assert!(once.data().iter().all(|v| (a..=a + w).contains(v)));
            let inside = clip_to_support(&once, a - 1.0, a + w + 1.0).unwrap();
            prop_assert_eq!(inside, once);
        }

        #[test]
        fn mean_mae_is_mean_of_per_image(seed in 0u64..500) {
            let x = unit(&[4, 1, 3, 3], seed);
            let r = unit(&[4, 1, 3, 3], seed + 1000);
            let (per, m) = mean_abs_pixel_error(&x, &r).unwrap();
            prop_assert!((per.iter().sum::<f64>() / 4.0 - m).abs() < 1e-15);
            prop_assert!(per.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
