//! ITU-logit matching functions `M_xy(μ_x0, μ_0y)`.
//!
//! With logit heterogeneity at temperature `σ`, equilibrium match masses are
//! `μ_xy = exp(-D_xy(-σ log μ_x0, -σ log μ_0y) / σ)`. The map is
//! homogeneous of degree one in the singles' masses for every `σ > 0`, and
//! reduces to the classical Choo–Siow form for TU at `σ = 1`.

use serde::{Deserialize, Serialize};

use crate::bargaining::DistanceSpec;
use crate::error::{ItuError, Result};

/// Which functional form turns singles' masses into match masses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "type")]
pub enum MatchVariant {
    /// The ITU-logit matching function generated by the distance function.
    #[default]
    Generic,
    /// `μ_xy = μ_x0 μ_0y e^{(α+γ)/σ}`, homogeneous of degree two.
    /// Only for comparison; equilibrium solvers reject it.
    DagsvikMenzel { alpha: f64, gamma: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchFnSpec {
    pub distance: DistanceSpec,
    #[serde(default = "default_sigma")]
    pub sigma: f64,
    #[serde(default)]
    pub variant: MatchVariant,
}

fn default_sigma() -> f64 {
    1.0
}

#[inline]
fn logaddexp(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + ((a - m).exp() + (b - m).exp()).ln()
}

impl MatchFnSpec {
    pub fn new(distance: DistanceSpec) -> Self {
        MatchFnSpec {
            distance,
            sigma: 1.0,
            variant: MatchVariant::Generic,
        }
    }

    pub fn with_sigma(mut self, sigma: f64) -> Self {
        self.sigma = sigma;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma.is_finite() && self.sigma > 0.0) {
            return Err(ItuError::validation(
                "sigma",
                format!("must be finite and > 0, got {}", self.sigma),
            ));
        }
        if let MatchVariant::DagsvikMenzel { alpha, gamma } = self.variant {
            if !alpha.is_finite() || !gamma.is_finite() {
                return Err(ItuError::validation(
                    "variant",
                    "Dagsvik-Menzel affinities must be finite",
                ));
            }
        }
        self.distance.validate().map_err(|e| e.within("distance"))
    }

    /// Mass of `(x, y)` matches given the singles' masses.
    pub fn match_mass(&self, mu_x0: f64, mu_0y: f64) -> Result<f64> {
        self.validate()?;
        check_masses(mu_x0, mu_0y)?;
        Ok(self.log_mass(mu_x0.ln(), mu_0y.ln()).exp())
    }

    /// `(∂M/∂μ_x0, ∂M/∂μ_0y)`.
    pub fn match_mass_grad(&self, mu_x0: f64, mu_0y: f64) -> Result<(f64, f64)> {
        self.validate()?;
        check_masses(mu_x0, mu_0y)?;
        let (la, lb) = (mu_x0.ln(), mu_0y.ln());
        let mass = self.log_mass(la, lb).exp();
        let (eu, ev) = self.log_elasticities(la, lb);
        Ok((mass * eu / mu_x0, mass * ev / mu_0y))
    }

    /// `log M` as a function of `(log μ_x0, log μ_0y)`, using closed forms
    /// selected by the distance tag.
    pub fn log_mass(&self, la: f64, lb: f64) -> f64 {
        let s = self.sigma;
        if let MatchVariant::DagsvikMenzel { alpha, gamma } = self.variant {
            return la + lb + (alpha + gamma) / s;
        }
        match &self.distance {
            DistanceSpec::TU { phi } => 0.5 * la + 0.5 * lb + phi / (2.0 * s),
            DistanceSpec::NTU { alpha, gamma } => (la + alpha / s).min(lb + gamma / s),
            DistanceSpec::LTU { lambda, zeta, phi } => {
                let t = lambda + zeta;
                (lambda * la + zeta * lb) / t + phi / (s * t)
            }
            DistanceSpec::ETU {
                alpha,
                gamma,
                tau,
                budget,
            } => {
                let r = s / tau;
                -(tau / s) * (logaddexp(-alpha / tau - r * la, -gamma / tau - r * lb) - budget.ln())
            }
            other => log_mass_generic(other, s, la, lb),
        }
    }

    /// Elasticities `(∂log M/∂log μ_x0, ∂log M/∂log μ_0y)`.
    pub fn log_elasticities(&self, la: f64, lb: f64) -> (f64, f64) {
        if let MatchVariant::DagsvikMenzel { .. } = self.variant {
            return (1.0, 1.0);
        }
        let s = self.sigma;
        self.distance.grad(-s * la, -s * lb)
    }
}

/// `log M` through the distance function with no closed-form shortcut.
pub fn log_mass_generic(distance: &DistanceSpec, sigma: f64, la: f64, lb: f64) -> f64 {
    -distance.eval(-sigma * la, -sigma * lb) / sigma
}

fn check_masses(mu_x0: f64, mu_0y: f64) -> Result<()> {
    if !(mu_x0.is_finite() && mu_x0 > 0.0 && mu_0y.is_finite() && mu_0y > 0.0) {
        return Err(ItuError::domain(format!(
            "singles' masses must be finite and > 0, got ({mu_x0}, {mu_0y})"
        )));
    }
    Ok(())
}
