//! Markets, matchings and equilibrium outcomes.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::bargaining::DistanceSpec;
use crate::error::{ItuError, Result};
use crate::matchfn::{MatchFnSpec, MatchVariant};

/// How singles' masses map to match masses in this market.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum MarketVariant {
    /// ITU-logit matching functions derived from the pair technologies.
    #[default]
    ItuLogit,
    /// Dagsvik–Menzel comparison form; every technology must be NTU and the
    /// affinities are read from it. Evaluation only.
    DagsvikMenzel,
}

/// Two-sided market: types, masses and one bargaining technology per pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MarketFile", into = "MarketFile")]
pub struct Market {
    pub men: Vec<String>,
    pub women: Vec<String>,
    pub n: DVector<f64>,
    pub m: DVector<f64>,
    /// Row-major `|X|·|Y|` technologies: pair `(x, y)` at `x·|Y| + y`.
    pub tech: Vec<DistanceSpec>,
    pub sigma: f64,
    pub variant: MarketVariant,
    pub full_assignment: bool,
}

impl Market {
    /// Market with generated labels `x1..`, `y1..` and `σ = 1`.
    pub fn new(n: Vec<f64>, m: Vec<f64>, tech: impl Fn(usize, usize) -> DistanceSpec) -> Market {
        let (nx, ny) = (n.len(), m.len());
        Market {
            men: (1..=nx).map(|i| format!("x{i}")).collect(),
            women: (1..=ny).map(|j| format!("y{j}")).collect(),
            n: DVector::from_vec(n),
            m: DVector::from_vec(m),
            tech: (0..nx * ny).map(|k| tech(k / ny, k % ny)).collect(),
            sigma: 1.0,
            variant: MarketVariant::ItuLogit,
            full_assignment: false,
        }
    }

    pub fn with_sigma(mut self, sigma: f64) -> Market {
        self.sigma = sigma;
        self
    }

    pub fn nx(&self) -> usize {
        self.n.len()
    }

    pub fn ny(&self) -> usize {
        self.m.len()
    }

    pub fn tech(&self, x: usize, y: usize) -> &DistanceSpec {
        &self.tech[x * self.ny() + y]
    }

    pub fn pair_key(&self, x: usize, y: usize) -> String {
        format!("{}|{}", self.men[x], self.women[y])
    }

    /// Matching function of pair `(x, y)`.
    pub fn matchfn(&self, x: usize, y: usize) -> MatchFnSpec {
        let distance = self.tech(x, y).clone();
        let variant = match (self.variant, &distance) {
            (MarketVariant::DagsvikMenzel, DistanceSpec::NTU { alpha, gamma }) => MatchVariant::DagsvikMenzel {
                alpha: *alpha,
                gamma: *gamma,
            },
            _ => MatchVariant::Generic,
        };
        MatchFnSpec {
            distance,
            sigma: self.sigma,
            variant,
        }
    }

    /// Same market with masses multiplied by `t`.
    pub fn scaled(&self, t: f64) -> Market {
        let mut out = self.clone();
        out.n *= t;
        out.m *= t;
        out
    }

    pub fn validate(&self) -> Result<()> {
        let (nx, ny) = (self.nx(), self.ny());
        if nx == 0 || ny == 0 {
            return Err(ItuError::validation(
                if nx == 0 { "men" } else { "women" },
                "at least one type is required",
            ));
        }
        if self.men.len() != nx || self.women.len() != ny {
            return Err(ItuError::validation("men", "labels and masses differ in length"));
        }
        for (side, labels) in [("men", &self.men), ("women", &self.women)] {
            let mut seen = std::collections::HashSet::new();
            for (i, l) in labels.iter().enumerate() {
                if l.contains('|') {
                    return Err(ItuError::validation(
                        format!("{side}[{i}].label"),
                        "must not contain '|'",
                    ));
                }
                if !seen.insert(l) {
                    return Err(ItuError::validation(
                        format!("{side}[{i}].label"),
                        format!("duplicate label {l:?}"),
                    ));
                }
            }
        }
        for (i, &v) in self.n.iter().enumerate() {
            if !(v.is_finite() && v > 0.0) {
                return Err(ItuError::validation(
                    format!("men[{i}].n"),
                    format!("must be finite and > 0, got {v}"),
                ));
            }
        }
        for (j, &v) in self.m.iter().enumerate() {
            if !(v.is_finite() && v > 0.0) {
                return Err(ItuError::validation(
                    format!("women[{j}].m"),
                    format!("must be finite and > 0, got {v}"),
                ));
            }
        }
        if !(self.sigma.is_finite() && self.sigma > 0.0) {
            return Err(ItuError::validation(
                "sigma",
                format!("must be finite and > 0, got {}", self.sigma),
            ));
        }
        if self.tech.len() != nx * ny {
            return Err(ItuError::validation(
                "tech",
                format!("expected {} technologies, got {}", nx * ny, self.tech.len()),
            ));
        }
        for x in 0..nx {
            for y in 0..ny {
                let t = self.tech(x, y);
                t.validate()
                    .map_err(|e| e.within(&format!("tech.{}", self.pair_key(x, y))))?;
                if self.variant == MarketVariant::DagsvikMenzel && !matches!(t, DistanceSpec::NTU { .. }) {
                    return Err(ItuError::validation(
                        format!("tech.{}", self.pair_key(x, y)),
                        "the Dagsvik-Menzel variant requires NTU technologies",
                    ));
                }
            }
        }
        Ok(())
    }

    /// Rejects markets whose matching functions the solvers cannot handle.
    pub(crate) fn require_solvable(&self) -> Result<()> {
        self.validate()?;
        if self.variant == MarketVariant::DagsvikMenzel {
            return Err(ItuError::validation(
                "variant",
                "the Dagsvik-Menzel matching function is evaluation-only and cannot be solved",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MenEntry {
    pub label: String,
    pub n: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WomenEntry {
    pub label: String,
    pub m: f64,
}

/// On-disk market schema; technologies are keyed `"<x>|<y>"`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarketFile {
    pub men: Vec<MenEntry>,
    pub women: Vec<WomenEntry>,
    pub tech: BTreeMap<String, DistanceSpec>,
    #[serde(default = "one")]
    pub sigma: f64,
    #[serde(default)]
    pub variant: MarketVariant,
    #[serde(default)]
    pub full_assignment: bool,
}

fn one() -> f64 {
    1.0
}

impl TryFrom<MarketFile> for Market {
    type Error = ItuError;

    fn try_from(f: MarketFile) -> Result<Market> {
        let men: Vec<String> = f.men.iter().map(|e| e.label.clone()).collect();
        let women: Vec<String> = f.women.iter().map(|e| e.label.clone()).collect();
        let mut tech = Vec::with_capacity(men.len() * women.len());
        for x in &men {
            for y in &women {
                let key = format!("{x}|{y}");
                match f.tech.get(&key) {
                    Some(spec) => tech.push(spec.clone()),
                    None => {
                        return Err(ItuError::validation(
                            format!("tech.{key}"),
                            "missing technology for pair",
                        ))
                    }
                }
            }
        }
        if f.tech.len() != tech.len() {
            let known: std::collections::HashSet<String> = men
                .iter()
                .flat_map(|x| women.iter().map(move |y| format!("{x}|{y}")))
                .collect();
            let extra = f.tech.keys().find(|k| !known.contains(*k)).cloned().unwrap_or_default();
            return Err(ItuError::validation(
                format!("tech.{extra}"),
                "technology for unknown pair",
            ));
        }
        let market = Market {
            men,
            women,
            n: DVector::from_iterator(f.men.len(), f.men.iter().map(|e| e.n)),
            m: DVector::from_iterator(f.women.len(), f.women.iter().map(|e| e.m)),
            tech,
            sigma: f.sigma,
            variant: f.variant,
            full_assignment: f.full_assignment,
        };
        market.validate()?;
        Ok(market)
    }
}

impl From<Market> for MarketFile {
    fn from(mk: Market) -> MarketFile {
        let mut tech = BTreeMap::new();
        for x in 0..mk.nx() {
            for y in 0..mk.ny() {
                tech.insert(mk.pair_key(x, y), mk.tech(x, y).clone());
            }
        }
        MarketFile {
            men: mk
                .men
                .iter()
                .zip(mk.n.iter())
                .map(|(l, &n)| MenEntry { label: l.clone(), n })
                .collect(),
            women: mk
                .women
                .iter()
                .zip(mk.m.iter())
                .map(|(l, &m)| WomenEntry { label: l.clone(), m })
                .collect(),
            tech,
            sigma: mk.sigma,
            variant: mk.variant,
            full_assignment: mk.full_assignment,
        }
    }
}

/// Masses of couples and singles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matching {
    #[serde(with = "crate::io::nested")]
    pub mu: DMatrix<f64>,
    #[serde(with = "crate::io::flat")]
    pub mu_x0: DVector<f64>,
    #[serde(with = "crate::io::flat")]
    pub mu_0y: DVector<f64>,
}

impl Matching {
    /// Sup-norm of the two accounting identities against `(n, m)`.
    pub fn accounting_residual(&self, n: &DVector<f64>, m: &DVector<f64>) -> f64 {
        let rows = self.mu.column_sum();
        let cols = self.mu.row_sum();
        let mut r: f64 = 0.0;
        for x in 0..n.len() {
            r = r.max((self.mu_x0[x] + rows[x] - n[x]).abs());
        }
        for y in 0..m.len() {
            r = r.max((self.mu_0y[y] + cols[y] - m[y]).abs());
        }
        r
    }

    /// Smallest mass in the matching; positive iff interior.
    pub fn min_mass(&self) -> f64 {
        self.mu.min().min(self.mu_x0.min()).min(self.mu_0y.min())
    }
}

/// Solver bookkeeping attached to an outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct Diagnostics {
    pub solver: String,
    pub iterations: usize,
    /// Last step size of the outer iteration.
    pub step: f64,
    /// Last equation residual (accounting for IPFP, excess demand for Jacobi).
    pub residual: f64,
    /// Outer iterations at which some `μ_0y` increased (IPFP only).
    pub monotonicity_violations: usize,
}

/// Equilibrium matching plus systematic utilities and wedges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquilibriumOutcome {
    pub matching: Matching,
    #[serde(rename = "U", with = "crate::io::nested")]
    pub u: DMatrix<f64>,
    #[serde(rename = "V", with = "crate::io::nested")]
    pub v: DMatrix<f64>,
    #[serde(rename = "W", with = "crate::io::nested")]
    pub w: DMatrix<f64>,
    pub diagnostics: Diagnostics,
}

impl EquilibriumOutcome {
    /// Utilities implied by an interior matching through the log-odds formulas
    /// `U = σ log(μ_xy/μ_x0)`, `V = σ log(μ_xy/μ_0y)`.
    pub fn from_matching(matching: Matching, sigma: f64, diagnostics: Diagnostics) -> EquilibriumOutcome {
        let (nx, ny) = matching.mu.shape();
        let u = DMatrix::from_fn(nx, ny, |x, y| {
            sigma * (matching.mu[(x, y)].ln() - matching.mu_x0[x].ln())
        });
        let v = DMatrix::from_fn(nx, ny, |x, y| {
            sigma * (matching.mu[(x, y)].ln() - matching.mu_0y[y].ln())
        });
        let w = &u - &v;
        EquilibriumOutcome {
            matching,
            u,
            v,
            w,
            diagnostics,
        }
    }
}
