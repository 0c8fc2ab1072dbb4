use crate::error::{Error, Result};
use crate::nn::{BnMode, Network};
use crate::prior::PriorSpec;
use crate::train::AdamConfig;
use serde::{Deserialize, Serialize};

/// How the prior constrains latent iterates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ConstraintPolicy {
    None,
    /// Project onto `[a, b]` after every step; uniform priors only.
    Clip,
    /// Penalize batch mean/std deviations from the prior; Gaussian priors only.
    StatsRegularize {
        gamma1: f64,
        gamma2: f64,
    },
}

impl ConstraintPolicy {
    pub fn check(&self, prior: &PriorSpec) -> Result<()> {
        match (self, prior) {
            (ConstraintPolicy::None, _) => Ok(()),
            (ConstraintPolicy::Clip, PriorSpec::Uniform { .. }) => Ok(()),
            (ConstraintPolicy::Clip, _) => Err(Error::Config("clipping needs a uniform prior".into())),
            (ConstraintPolicy::StatsRegularize { gamma1, gamma2 }, PriorSpec::Gaussian { .. }) => {
                if *gamma1 >= 0.0 && *gamma2 >= 0.0 && gamma1.is_finite() && gamma2.is_finite() {
                    Ok(())
                } else {
                    Err(Error::Config(format!(
                        "regularizer weights must be non-negative, got {gamma1}, {gamma2}"
                    )))
                }
            }
            (ConstraintPolicy::StatsRegularize { .. }, _) => {
                Err(Error::Config("statistics regularization needs a gaussian prior".into()))
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Optimizer {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

/// How per-pixel cross-entropies are combined.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    /// Mean over every pixel of every sample.
    Mean,
    /// Mean over pixels, summed over samples. Each latent then receives
    /// exactly the gradient it would get if inverted alone.
    PerSample,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InversionConfig {
    pub alpha: f64,
    pub optimizer: Optimizer,
    pub policy: ConstraintPolicy,
    /// `None` picks BatchStats for generators with batch norm, FixedStats otherwise.
    pub bn_mode: Option<BnMode>,
    pub reduction: Reduction,
    pub max_iters: usize,
    pub tol: f64,
    pub patience: usize,
    pub restarts: usize,
    pub seed: u64,
}

impl Default for InversionConfig {
    fn default() -> Self {
        let a = AdamConfig::INVERSION;
        InversionConfig {
            alpha: a.lr,
            optimizer: Optimizer::Adam {
                beta1: a.beta1,
                beta2: a.beta2,
                eps: a.eps,
            },
            policy: ConstraintPolicy::None,
            bn_mode: None,
            reduction: Reduction::Mean,
            max_iters: 1000,
            tol: 1e-5,
            patience: 10,
            restarts: 1,
            seed: 0,
        }
    }
}

impl InversionConfig {
    pub fn validate(&self, prior: &PriorSpec) -> Result<()> {
        prior.validated()?;
        self.policy.check(prior)?;
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("step size must be positive, got {}", self.alpha)));
        }
        if let Some(a) = self.adam() {
            a.validate()?;
        }
        if self.max_iters == 0 || self.restarts == 0 {
            return Err(Error::Config("max_iters and restarts must be at least 1".into()));
        }
        if !(self.tol > 0.0) {
            return Err(Error::Config(format!("tolerance must be positive, got {}", self.tol)));
        }
        Ok(())
    }

    pub(crate) fn adam(&self) -> Option<AdamConfig> {
        match self.optimizer {
            Optimizer::Sgd => None,
            Optimizer::Adam { beta1, beta2, eps } => Some(AdamConfig {
                lr: self.alpha,
                beta1,
                beta2,
                eps,
            }),
        }
    }

    /// The batch-norm mode actually used with generator `g`.
    pub fn resolved_bn_mode(&self, g: &Network) -> BnMode {
        self.bn_mode.unwrap_or(if g.has_batchnorm() {
            BnMode::BatchStats
        } else {
            BnMode::FixedStats
        })
    }
}
