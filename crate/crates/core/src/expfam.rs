//! One-parameter exponential families in canonical form,
//! `p(y | θ) = h(y) exp{θ y − ψ(θ)}`.
//!
//! The base measure `h(y)` never enters estimation and is dropped, so losses
//! here are negative log-likelihoods up to a per-observation constant.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{EsmError, Result};

/// Beyond this magnitude softplus and sigmoid return their asymptotes.
const ASYMPTOTE_CUTOFF: f64 = 35.0;

/// Slack for rounding near-integer responses when coercion is enabled.
pub const COERCE_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase")]
pub enum FamilySpec {
    /// Unit-variance Gaussian, `ψ(θ) = θ²/2`.
    Gaussian,
    /// Logistic regression, `ψ(θ) = log(1 + e^θ)`.
    Bernoulli,
    /// Log-linear counts, `ψ(θ) = e^θ`.
    Poisson,
    /// `n_trial` Bernoulli trials sharing one success probability.
    Binomial { n_trial: u32 },
}

impl FamilySpec {
    pub fn binomial(n_trial: u32) -> Result<Self> {
        let spec = FamilySpec::Binomial { n_trial };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            FamilySpec::Binomial { n_trial: 0 } => {
                Err(EsmError::config("n_trial", "binomial family needs n_trial >= 1"))
            }
            _ => Ok(()),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            FamilySpec::Gaussian => "gaussian",
            FamilySpec::Bernoulli => "bernoulli",
            FamilySpec::Poisson => "poisson",
            FamilySpec::Binomial { .. } => "binomial",
        }
    }

    /// Number of trials for the binomial family, `None` otherwise.
    pub fn n_trial(&self) -> Option<u32> {
        match self {
            FamilySpec::Binomial { n_trial } => Some(*n_trial),
            _ => None,
        }
    }

    /// Log-partition `ψ(θ)`. Propagates NaN; see [`FamilySpec::psi`] for the
    /// checked form.
    #[inline]
    pub fn log_partition(&self, theta: f64) -> f64 {
        match self {
            FamilySpec::Gaussian => 0.5 * theta * theta,
            FamilySpec::Bernoulli => softplus(theta),
            FamilySpec::Poisson => theta.exp(),
            FamilySpec::Binomial { n_trial } => f64::from(*n_trial) * softplus(theta),
        }
    }

    /// Conditional mean `ψ′(θ)`.
    #[inline]
    pub fn mean(&self, theta: f64) -> f64 {
        match self {
            FamilySpec::Gaussian => theta,
            FamilySpec::Bernoulli => sigmoid(theta),
            FamilySpec::Poisson => theta.exp(),
            FamilySpec::Binomial { n_trial } => f64::from(*n_trial) * sigmoid(theta),
        }
    }

    /// Conditional variance `ψ″(θ)`.
    #[inline]
    pub fn variance(&self, theta: f64) -> f64 {
        match self {
            FamilySpec::Gaussian => 1.0,
            FamilySpec::Bernoulli => logistic_variance(theta),
            FamilySpec::Poisson => theta.exp(),
            FamilySpec::Binomial { n_trial } => f64::from(*n_trial) * logistic_variance(theta),
        }
    }

    pub fn psi(&self, theta: f64) -> Result<f64> {
        check_finite(theta)?;
        Ok(self.log_partition(theta))
    }

    pub fn psi_prime(&self, theta: f64) -> Result<f64> {
        check_finite(theta)?;
        Ok(self.mean(theta))
    }

    pub fn psi_second(&self, theta: f64) -> Result<f64> {
        check_finite(theta)?;
        Ok(self.variance(theta))
    }

    /// Per-observation loss `−y f + ψ(f)` without validation.
    #[inline]
    pub fn loss(&self, y: f64, f: f64) -> f64 {
        -y * f + self.log_partition(f)
    }

    /// `∂/∂f` of [`FamilySpec::loss`], i.e. `ψ′(f) − y`.
    #[inline]
    pub fn loss_grad(&self, y: f64, f: f64) -> f64 {
        self.mean(f) - y
    }

    /// Checked per-observation loss. `row` is only used in the error message.
    pub fn nll_loss(&self, y: f64, f: f64, row: usize) -> Result<f64> {
        self.check_response(y, row)?;
        check_finite(f)?;
        Ok(self.loss(y, f))
    }

    pub fn nll_grad(&self, y: f64, f: f64, row: usize) -> Result<f64> {
        self.check_response(y, row)?;
        check_finite(f)?;
        Ok(self.loss_grad(y, f))
    }

    /// Bregman divergence of ψ between `f` and the truth `f0`:
    /// `−ψ′(f0)(f − f0) + ψ(f) − ψ(f0)`.
    pub fn bregman_loss(&self, f: f64, f0: f64) -> Result<f64> {
        check_finite(f)?;
        check_finite(f0)?;
        Ok(-self.mean(f0) * (f - f0) + self.log_partition(f) - self.log_partition(f0))
    }

    /// Open interval (or whole line) the mean `ψ′(θ)` ranges over.
    pub fn mean_range(&self) -> (f64, f64) {
        match self {
            FamilySpec::Gaussian => (f64::NEG_INFINITY, f64::INFINITY),
            FamilySpec::Bernoulli => (0.0, 1.0),
            FamilySpec::Poisson => (0.0, f64::INFINITY),
            FamilySpec::Binomial { n_trial } => (0.0, f64::from(*n_trial)),
        }
    }

    /// Fails unless `y` lies in the family support.
    pub fn check_response(&self, y: f64, row: usize) -> Result<()> {
        if !y.is_finite() {
            return Err(EsmError::data(row, format!("response {y} is not finite")));
        }
        let ok = match self {
            FamilySpec::Gaussian => true,
            FamilySpec::Bernoulli => y == 0.0 || y == 1.0,
            FamilySpec::Poisson => y >= 0.0 && y.fract() == 0.0,
            FamilySpec::Binomial { n_trial } => {
                y >= 0.0 && y <= f64::from(*n_trial) && y.fract() == 0.0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(EsmError::data(
                row,
                format!("response {y} outside the {} support{}", self.name(), self.support_hint()),
            ))
        }
    }

    /// Like [`FamilySpec::check_response`], but with `coerce` set, values
    /// within [`COERCE_TOLERANCE`] of an integer are rounded first for the
    /// discrete families.
    pub fn validate_response(&self, y: f64, row: usize, coerce: bool) -> Result<f64> {
        let y = if coerce && *self != FamilySpec::Gaussian {
            let rounded = y.round();
            if (y - rounded).abs() <= COERCE_TOLERANCE {
                rounded
            } else {
                y
            }
        } else {
            y
        };
        self.check_response(y, row)?;
        Ok(y)
    }

    fn support_hint(&self) -> String {
        match self {
            FamilySpec::Gaussian => String::new(),
            FamilySpec::Bernoulli => " {0, 1}".into(),
            FamilySpec::Poisson => " {0, 1, 2, ...}".into(),
            FamilySpec::Binomial { n_trial } => format!(" {{0, ..., {n_trial}}}"),
        }
    }
}

impl fmt::Display for FamilySpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FamilySpec::Binomial { n_trial } => write!(f, "binomial(n_trial={n_trial})"),
            other => f.write_str(other.name()),
        }
    }
}

impl FromStr for FamilySpec {
    type Err = EsmError;

    /// Parses a family name; binomial defaults to `n_trial = 1` and is usually
    /// adjusted by the caller.
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "gaussian" | "normal" => Ok(FamilySpec::Gaussian),
            "bernoulli" | "logistic" => Ok(FamilySpec::Bernoulli),
            "poisson" => Ok(FamilySpec::Poisson),
            "binomial" => Ok(FamilySpec::Binomial { n_trial: 1 }),
            other => Err(EsmError::config(
                "family",
                format!("unsupported family {other:?} (expected gaussian, bernoulli, poisson or binomial)"),
            )),
        }
    }
}

fn check_finite(theta: f64) -> Result<()> {
    if theta.is_finite() {
        Ok(())
    } else {
        Err(EsmError::Domain(format!("canonical parameter {theta} is not finite")))
    }
}

/// `log(1 + e^θ)` without overflow.
#[inline]
pub fn softplus(theta: f64) -> f64 {
    if theta > ASYMPTOTE_CUTOFF {
        theta
    } else if theta < -ASYMPTOTE_CUTOFF {
        theta.exp()
    } else {
        (-theta.abs()).exp().ln_1p() + theta.max(0.0)
    }
}

#[inline]
pub fn sigmoid(theta: f64) -> f64 {
    if theta > ASYMPTOTE_CUTOFF {
        1.0
    } else if theta < -ASYMPTOTE_CUTOFF {
        theta.exp()
    } else if theta >= 0.0 {
        1.0 / (1.0 + (-theta).exp())
    } else {
        let e = theta.exp();
        e / (1.0 + e)
    }
}

/// `σ(θ)(1 − σ(θ))`, evaluated as `e^{−|θ|} / (1 + e^{−|θ|})²`.
#[inline]
fn logistic_variance(theta: f64) -> f64 {
    let e = (-theta.abs()).exp();
    e / ((1.0 + e) * (1.0 + e))
}
