use serde::{Deserialize, Serialize};

use crate::constraint::ConstraintParams;
use crate::error::{Error, Result};

/// How the per-channel scale between measured and re-synthesized data is
/// estimated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScaleEstimator {
    /// Mean of per-sample ratios over samples above the magnitude guard.
    #[default]
    RatioMean,
    /// `⟨x̃, x̂⟩ / ⟨x̂, x̂⟩`.
    LeastSquares,
}

/// Every tunable of the solvers and the PSF / missing-data stages.
///
/// Deserializes from JSON with missing keys taking their defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub blocks: usize,
    pub max_iters: usize,
    /// Iteration cap per block for the missing-data refinement.
    pub md_max_iters: usize,
    pub tol: f64,
    pub xi: f64,
    pub rho: f64,
    pub gamma: f64,
    pub alpha1: f64,
    pub alpha2: f64,
    /// R-MINT regularization, relative to the largest diagonal entry of `HᵀH`.
    pub delta: f64,
    /// Channels per lateral block in R-MINT.
    pub lateral_block: usize,
    pub psf_len: usize,
    /// Position of the impulse in the R-MINT target.
    pub target_delay: usize,
    pub missing_data: bool,
    pub scale_estimator: ScaleEstimator,
    /// Recorded with run outputs; the solvers themselves are deterministic.
    pub seed: u64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            blocks: 2,
            max_iters: 500,
            md_max_iters: 500,
            tol: 1e-8,
            xi: 1e-4,
            rho: 2.55,
            gamma: 2.4,
            alpha1: 0.1,
            alpha2: 2.7e-5,
            delta: 1e-3,
            lateral_block: 8,
            psf_len: 16,
            target_delay: 0,
            missing_data: false,
            scale_estimator: ScaleEstimator::RatioMean,
            seed: 0,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::invalid(format!("{name} must be positive, got {v}")))
            }
        };
        let nonneg = |name: &str, v: f64| {
            if v.is_finite() && v >= 0.0 {
                Ok(())
            } else {
                Err(Error::invalid(format!("{name} must be non-negative, got {v}")))
            }
        };
        if self.blocks == 0 {
            return Err(Error::invalid("blocks must be at least 1"));
        }
        if self.max_iters == 0 || self.md_max_iters == 0 {
            return Err(Error::invalid("iteration caps must be at least 1"));
        }
        if self.lateral_block == 0 {
            return Err(Error::invalid("lateral block size must be at least 1"));
        }
        if self.psf_len < 2 {
            return Err(Error::invalid(format!(
                "PSF length must be at least 2, got {}",
                self.psf_len
            )));
        }
        nonneg("tol", self.tol)?;
        nonneg("xi", self.xi)?;
        positive("rho", self.rho)?;
        positive("gamma", self.gamma)?;
        nonneg("alpha1", self.alpha1)?;
        nonneg("alpha2", self.alpha2)?;
        nonneg("delta", self.delta)?;
        Ok(())
    }

    pub fn constraint(&self) -> Result<ConstraintParams> {
        ConstraintParams::new(self.xi, self.rho, self.gamma)
    }
}
