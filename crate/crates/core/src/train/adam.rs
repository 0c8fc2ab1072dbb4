use crate::error::{Error, Result};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    /// Settings used for GAN training.
    pub const GAN: AdamConfig = AdamConfig {
        lr: 0.002,
        beta1: 0.5,
        beta2: 0.999,
        eps: 1e-8,
    };

    /// Settings used for latent inversion.
    pub const INVERSION: AdamConfig = AdamConfig {
        lr: 0.01,
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
    };

    pub fn validate(&self) -> Result<()> {
        let unit = |b: f64| b > 0.0 && b < 1.0;
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "adam learning rate must be positive, got {}",
                self.lr
            )));
        }
        if !unit(self.beta1) || !unit(self.beta2) {
            return Err(Error::Config(format!(
                "adam betas must lie in (0, 1), got {} and {}",
                self.beta1, self.beta2
            )));
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(Error::Config(format!("adam eps must be positive, got {}", self.eps)));
        }
        Ok(())
    }
}

/// First and second moments for a list of variables, plus the step count.
/// A default state adopts the shapes it sees on its first step.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl AdamState {
    pub fn timestep(&self) -> u64 {
        self.t
    }

    pub fn first_moments(&self) -> &[Tensor] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Tensor] {
        &self.v
    }
}

/// One bias-corrected Adam update, in place. Nothing is modified on error.
pub fn adam_step<'a, 'b>(
    vars: impl IntoIterator<Item = &'a mut Tensor>,
    grads: impl IntoIterator<Item = &'b Tensor>,
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    cfg.validate()?;
    let mut vars: Vec<&mut Tensor> = vars.into_iter().collect();
    let grads: Vec<&Tensor> = grads.into_iter().collect();
    if vars.len() != grads.len() {
        return Err(Error::dim(format!(
            "adam got {} variables but {} gradients",
            vars.len(),
            grads.len()
        )));
    }
    for (x, g) in vars.iter().zip(&grads) {
        x.expect_same_shape(g, "adam_step")?;
    }
    if state.t == 0 && state.m.is_empty() {
        state.m = grads.iter().map(|g| Tensor::zeros(g.dims())).collect::<Result<_>>()?;
        state.v = state.m.clone();
    }
    if state.m.len() != vars.len() {
        return Err(Error::dim(format!(
            "adam state tracks {} variables, step has {}",
            state.m.len(),
            vars.len()
        )));
    }
    for (m, g) in state.m.iter().zip(&grads) {
        m.expect_same_shape(g, "adam_step moments")?;
    }

    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for ((x, g), (m, v)) in vars
        .iter_mut()
        .zip(&grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        let (xs, gs) = (x.data_mut(), g.data());
        for (i, (m, v)) in m.data_mut().iter_mut().zip(v.data_mut()).enumerate() {
            let gi = gs[i];
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * gi;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * gi * gi;
            xs[i] -= cfg.lr * (*m / c1) / ((*v / c2).sqrt() + cfg.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::random_tensor;
    use proptest::prelude::*;

    #[test]
    fn zero_gradient_leaves_variables_unchanged() {
        let mut x = random_tensor(&[3, 4], 1);
        let before = x.clone();
        let g = Tensor::zeros(&[3, 4]).unwrap();
        let mut st = AdamState::default();
        adam_step([&mut x], [&g], &mut st, &AdamConfig::GAN).unwrap();
        assert_eq!(x, before);
        assert_eq!(st.timestep(), 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate_against_the_sign() {
        let mut x = Tensor::zeros(&[4]).unwrap();
        let g = Tensor::from_vec(&[4], vec![3.0, -0.5, 1e-2, -200.0]).unwrap();
        let mut st = AdamState::default();
        let cfg = AdamConfig::INVERSION;
        adam_step([&mut x], [&g], &mut st, &cfg).unwrap();
        for (xi, gi) in x.data().iter().zip(g.data()) {
            assert!((xi + cfg.lr * gi.signum()).abs() < 1e-8 * cfg.lr / gi.abs().min(1.0) + 1e-12);
        }
    }

    #[test]
    fn two_steps_match_hand_unrolled_recurrence() {
        let (b1, b2, lr, eps) = (0.5, 0.999, 0.002, 1e-8);
        let (x0, g1, g2) = (0.3_f64, 0.7_f64, -0.2_f64);
        let m1 = (1.0 - b1) * g1;
        let v1 = (1.0 - b2) * g1 * g1;
        let x1 = x0 - lr * (m1 / (1.0 - b1)) / ((v1 / (1.0 - b2)).sqrt() + eps);
        let m2 = b1 * m1 + (1.0 - b1) * g2;
        let v2 = b2 * v1 + (1.0 - b2) * g2 * g2;
        let x2 = x1 - lr * (m2 / (1.0 - b1 * b1)) / ((v2 / (1.0 - b2 * b2)).sqrt() + eps);

        let cfg = AdamConfig {
            lr,
            beta1: b1,
            beta2: b2,
            eps,
        };
        let mut x = Tensor::from_vec(&[1], vec![x0]).unwrap();
        let mut st = AdamState::default();
        for g in [g1, g2] {
            let g = Tensor::from_vec(&[1], vec![g]).unwrap();
            adam_step([&mut x], [&g], &mut st, &cfg).unwrap();
        }
        assert!((x.data()[0] - x2).abs() < 1e-12);
        assert_eq!(st.timestep(), 2);
    }

    #[test]
    fn mismatched_shapes_are_rejected_without_side_effects() {
        let mut x = Tensor::zeros(&[2, 2]).unwrap();
        let g = Tensor::zeros(&[4]).unwrap();
        let mut st = AdamState::default();
        assert!(matches!(
            adam_step([&mut x], [&g], &mut st, &AdamConfig::GAN),
            Err(Error::Dimension(_))
        ));
        assert_eq!(st.timestep(), 0);
        let g = Tensor::zeros(&[2, 2]).unwrap();
        adam_step([&mut x], [&g], &mut st, &AdamConfig::GAN).unwrap();
        let mut y = Tensor::zeros(&[3]).unwrap();
        let gy = Tensor::zeros(&[3]).unwrap();
        assert!(adam_step([&mut y], [&gy], &mut st, &AdamConfig::GAN).is_err());
        assert_eq!(st.timestep(), 1);
    }

    #[test]
    fn invalid_settings_are_rejected() {
        let mut bad = AdamConfig::GAN;
        bad.beta1 = 1.0;
        assert!(bad.validate().is_err());
        bad = AdamConfig::GAN;
        bad.lr = 0.0;
        assert!(bad.validate().is_err());
    }

    proptest! {
        #[test]
        fn moments_stay_finite_and_step_is_bounded(seed in 0u64..1000, scale in 1e-6f64..1e6) {
            let mut x = random_tensor(&[8], seed);
            let mut st = AdamState::default();
            let cfg = AdamConfig::GAN;
            for k in 0..5 {
                let g = random_tensor(&[8], seed + 100 + k).map(|v| v * scale).unwrap();
                let before = x.clone();
                adam_step([&mut x], [&g], &mut st, &cfg).unwrap();
                prop_assert!(st.first_moments()[0].data().iter().all(|v| v.is_finite()));
                prop_assert!(st.second_moments()[0].data().iter().all(|v| v.is_finite() && *v >= 0.0));
                // |m̂|/√v̂ ≤ (1−β1)/√(1−β2) bounds every Adam step.
                let bound = cfg.lr * (1.0 - cfg.beta1) / (1.0 - cfg.beta2).sqrt() * 1.0001;
                for (a, b) in x.data().iter().zip(before.data()) {
                    prop_assert!((a - b).abs() <= bound);
                }
            }
        }
    }
}
