//! Latent priors `P(Z)`.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PriorSpec {
    Uniform { a: f64, b: f64 },
    Gaussian { mean: f64, std: f64 },
}

impl PriorSpec {
    pub fn uniform(a: f64, b: f64) -> Result<Self> {
        PriorSpec::Uniform { a, b }.validated()
    }

    pub fn gaussian(mean: f64, std: f64) -> Result<Self> {
        PriorSpec::Gaussian { mean, std }.validated()
    }

    pub fn validated(self) -> Result<Self> {
        match self {
            PriorSpec::Uniform { a, b } if a.is_finite() && b.is_finite() && a < b => Ok(self),
            PriorSpec::Uniform { a, b } => Err(Error::Config(format!(
                "uniform prior needs finite a < b, got [{a}, {b}]"
            ))),
            PriorSpec::Gaussian { mean, std } if mean.is_finite() && std.is_finite() && std > 0.0 => Ok(self),
            PriorSpec::Gaussian { mean, std } => Err(Error::Config(format!(
                "gaussian prior needs finite mean and std > 0, got N({mean}, {std})"
            ))),
        }
    }

    /// `rows × dim` i.i.d. draws, row-major.
    pub fn sample<R: Rng + ?Sized>(&self, rows: usize, dim: usize, rng: &mut R) -> Result<Tensor> {
        let n = rows * dim;
        let data: Vec<f64> = match *self {
            PriorSpec::Uniform { a, b } => {
                let dist = Uniform::new_inclusive(a, b).map_err(|e| Error::Config(format!("uniform prior: {e}")))?;
                (0..n).map(|_| dist.sample(rng)).collect()
            }
            PriorSpec::Gaussian { mean, std } => {
                let dist = Normal::new(mean, std).map_err(|e| Error::Config(format!("gaussian prior: {e}")))?;
                (0..n).map(|_| dist.sample(rng)).collect()
            }
        };
        Tensor::from_vec(&[rows, dim], data)
    }
}

impl fmt::Display for PriorSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PriorSpec::Uniform { a, b } => write!(f, "uniform:{a},{b}"),
            PriorSpec::Gaussian { mean, std } => write!(f, "normal:{mean},{std}"),
        }
    }
}

/// Parses `uniform:a,b` or `normal:mu,sigma`.
impl FromStr for PriorSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("prior {s:?}: expected uniform:a,b or normal:mu,sigma"));
        let (kind, args) = s.split_once(':').ok_or_else(bad)?;
        let (x, y) = args.split_once(',').ok_or_else(bad)?;
        let x: f64 = x.trim().parse().map_err(|_| bad())?;
        let y: f64 = y.trim().parse().map_err(|_| bad())?;
        match kind {
            "uniform" => PriorSpec::uniform(x, y),
            "normal" | "gaussian" => PriorSpec::gaussian(x, y),
            _ => Err(bad()),
        }
    }
}
