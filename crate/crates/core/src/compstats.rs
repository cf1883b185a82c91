//! First-order comparative statics of the logit equilibrium in the population
//! masses.
//!
//! Differentiating the log-odds identities `U = ∇G*(μ)`, `V = ∇H*(μ)` and the
//! frontier condition `D(U, V) = 0` gives the linear system
//!
//! ```text
//! (∂_u D ∂²G* + ∂_v D ∂²H*) δμ = ∂_u D ∂²G* (μ δn / n) + ∂_v D ∂²H* (μ δm / m)
//! δU = ∂²G* (δμ − μ δn / n),    δV = ∂²H* (δμ − μ δm / m)
//! ```
//!
//! with pairs indexed row-major (`x·|Y| + y`) and `∂_u D`, `∂_v D` diagonal.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{ItuError, Result};
use crate::market::{EquilibriumOutcome, Market, Matching};
use crate::par::{self, Exec};

/// Condition estimates above this are treated as singular.
pub const MAX_CONDITION: f64 = 1e14;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompstatsResult {
    #[serde(with = "crate::io::nested")]
    pub delta_mu: DMatrix<f64>,
    #[serde(rename = "delta_U", with = "crate::io::nested")]
    pub delta_u: DMatrix<f64>,
    #[serde(rename = "delta_V", with = "crate::io::nested")]
    pub delta_v: DMatrix<f64>,
    /// 2-norm condition estimate of the system matrix.
    pub condition: f64,
    /// Set when some technology is kinked and active-branch partials were used.
    pub best_effort: bool,
}

/// Welfare derivatives of `u_x = σ log(n_x/μ_x0)` and `v_y = σ log(m_y/μ_0y)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SymmetryReport {
    /// `∂u_x/∂n_x'`, `|X|×|X|`.
    #[serde(with = "crate::io::nested")]
    pub within_men: DMatrix<f64>,
    /// `∂v_y/∂m_y'`, `|Y|×|Y|`.
    #[serde(with = "crate::io::nested")]
    pub within_women: DMatrix<f64>,
    /// `∂u_x/∂m_y`, `|X|×|Y|`.
    #[serde(with = "crate::io::nested")]
    pub cross_men: DMatrix<f64>,
    /// `∂v_y/∂n_x`, `|Y|×|X|`.
    #[serde(with = "crate::io::nested")]
    pub cross_women: DMatrix<f64>,
    /// `max |∂u_x/∂n_x' − ∂u_x'/∂n_x|` and the same for women.
    pub within_asymmetry: f64,
    /// `max |∂u_x/∂m_y − ∂v_y/∂n_x|`.
    pub cross_asymmetry: f64,
    pub best_effort: bool,
}

/// `∂²G*` and `∂²H*` of the logit model at an interior matching, as
/// `|X||Y| × |X||Y|` matrices (scaled by `σ`).
pub fn hessians_logit(market: &Market, matching: &Matching) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let (nx, ny) = (market.nx(), market.ny());
    if matching.mu.shape() != (nx, ny) || matching.mu_x0.len() != nx || matching.mu_0y.len() != ny {
        return Err(ItuError::validation("matching", "dimensions do not match the market"));
    }
    if !(matching.min_mass() > 0.0) {
        return Err(ItuError::domain("comparative statics need an interior matching"));
    }
    let s = market.sigma;
    let k = nx * ny;
    let mut hg = DMatrix::zeros(k, k);
    let mut hh = DMatrix::zeros(k, k);
    for x in 0..nx {
        for y in 0..ny {
            let i = x * ny + y;
            for y2 in 0..ny {
                hg[(i, x * ny + y2)] = s / matching.mu_x0[x];
            }
            for x2 in 0..nx {
                hh[(i, x2 * ny + y)] = s / matching.mu_0y[y];
            }
            hg[(i, i)] += s / matching.mu[(x, y)];
            hh[(i, i)] += s / matching.mu[(x, y)];
        }
    }
    Ok((hg, hh))
}

fn condition_number(a: &DMatrix<f64>) -> f64 {
    let sv = a.clone().singular_values();
    let max = sv.max();
    let min = sv.min();
    if min > 0.0 {
        max / min
    } else {
        f64::INFINITY
    }
}

fn solve_dense(a: DMatrix<f64>, rhs: &DVector<f64>) -> Result<(DVector<f64>, f64)> {
    let condition = condition_number(&a);
    if !(condition < MAX_CONDITION) {
        return Err(ItuError::Numerical {
            message: "comparative statics system is singular".into(),
            condition,
        });
    }
    let sol = a.lu().solve(rhs).ok_or(ItuError::Numerical {
        message: "LU factorization failed".into(),
        condition,
    })?;
    Ok((sol, condition))
}

struct Prepared {
    hg: DMatrix<f64>,
    hh: DMatrix<f64>,
    du: DVector<f64>,
    dv: DVector<f64>,
    mu: DVector<f64>,
    best_effort: bool,
}

fn prepare(market: &Market, outcome: &EquilibriumOutcome) -> Result<Prepared> {
    market.validate()?;
    let (hg, hh) = hessians_logit(market, &outcome.matching)?;
    let (nx, ny) = (market.nx(), market.ny());
    let mut du = DVector::zeros(nx * ny);
    let mut dv = DVector::zeros(nx * ny);
    let mut mu = DVector::zeros(nx * ny);
    let mut best_effort = false;
    for x in 0..nx {
        for y in 0..ny {
            let i = x * ny + y;
            let tech = market.tech(x, y);
            let (a, b) = tech.grad(outcome.u[(x, y)], outcome.v[(x, y)]);
            du[i] = a;
            dv[i] = b;
            mu[i] = outcome.matching.mu[(x, y)];
            best_effort |= !tech.is_smooth();
        }
    }
    Ok(Prepared {
        hg,
        hh,
        du,
        dv,
        mu,
        best_effort,
    })
}

fn scaled_masses(
    market: &Market,
    mu: &DVector<f64>,
    delta_n: &DVector<f64>,
    delta_m: &DVector<f64>,
) -> (DVector<f64>, DVector<f64>) {
    let ny = market.ny();
    let rn = DVector::from_fn(mu.len(), |i, _| mu[i] * delta_n[i / ny] / market.n[i / ny]);
    let rm = DVector::from_fn(mu.len(), |i, _| mu[i] * delta_m[i % ny] / market.m[i % ny]);
    (rn, rm)
}

fn check_deltas(market: &Market, delta_n: &DVector<f64>, delta_m: &DVector<f64>) -> Result<()> {
    if delta_n.len() != market.nx() {
        return Err(ItuError::validation(
            "delta_n",
            format!("expected {} entries", market.nx()),
        ));
    }
    if delta_m.len() != market.ny() {
        return Err(ItuError::validation(
            "delta_m",
            format!("expected {} entries", market.ny()),
        ));
    }
    if delta_n.iter().chain(delta_m.iter()).any(|v| !v.is_finite()) {
        return Err(ItuError::validation("delta", "perturbations must be finite"));
    }
    Ok(())
}

fn delta_from_prepared(
    market: &Market,
    p: &Prepared,
    delta_n: &DVector<f64>,
    delta_m: &DVector<f64>,
) -> Result<CompstatsResult> {
    let (nx, ny) = (market.nx(), market.ny());
    let (rn, rm) = scaled_masses(market, &p.mu, delta_n, delta_m);
    let du = DMatrix::from_diagonal(&p.du);
    let dv = DMatrix::from_diagonal(&p.dv);
    let a = &du * &p.hg + &dv * &p.hh;
    let rhs = &du * (&p.hg * &rn) + &dv * (&p.hh * &rm);
    let (dmu, condition) = solve_dense(a, &rhs)?;
    let dut = &p.hg * (&dmu - &rn);
    let dvt = &p.hh * (&dmu - &rm);
    let shape = |v: &DVector<f64>| DMatrix::from_fn(nx, ny, |x, y| v[x * ny + y]);
    Ok(CompstatsResult {
        delta_mu: shape(&dmu),
        delta_u: shape(&dut),
        delta_v: shape(&dvt),
        condition,
        best_effort: p.best_effort,
    })
}

/// `(δμ, δU, δV)` induced by population changes `(δn, δm)`.
pub fn delta_matching(
    market: &Market,
    outcome: &EquilibriumOutcome,
    delta_n: &DVector<f64>,
    delta_m: &DVector<f64>,
) -> Result<CompstatsResult> {
    check_deltas(market, delta_n, delta_m)?;
    let p = prepare(market, outcome)?;
    delta_from_prepared(market, &p, delta_n, delta_m)
}

/// The transferable-utility specialization
/// `δμ = (∂²G* + ∂²H*)⁻¹ [∂²G* μδn/n + ∂²H* μδm/m]`, evaluated directly.
pub fn delta_mu_tu(
    market: &Market,
    matching: &Matching,
    delta_n: &DVector<f64>,
    delta_m: &DVector<f64>,
) -> Result<DMatrix<f64>> {
    check_deltas(market, delta_n, delta_m)?;
    let (hg, hh) = hessians_logit(market, matching)?;
    let (nx, ny) = (market.nx(), market.ny());
    let mu = DVector::from_fn(nx * ny, |i, _| matching.mu[(i / ny, i % ny)]);
    let (rn, rm) = scaled_masses(market, &mu, delta_n, delta_m);
    let rhs = &hg * &rn + &hh * &rm;
    let (dmu, _) = solve_dense(hg + hh, &rhs)?;
    Ok(DMatrix::from_fn(nx, ny, |x, y| dmu[x * ny + y]))
}

/// Welfare derivatives with respect to every population mass, from unit
/// perturbations chained through `δu_x = Σ_y (μ_xy/n_x) δU_xy` and
/// `δv_y = Σ_x (μ_xy/m_y) δV_xy` (plus the direct effect of own mass on the
/// average, which is zero for logit welfare at fixed utilities).
pub fn symmetry_diagnostic(market: &Market, outcome: &EquilibriumOutcome, exec: Exec) -> Result<SymmetryReport> {
    let p = prepare(market, outcome)?;
    let (nx, ny) = (market.nx(), market.ny());
    let mu = &outcome.matching.mu;
    // column j < nx perturbs n_j, otherwise m_{j - nx}
    let columns = par::try_map_range(exec, nx + ny, |j| {
        let mut dn = DVector::zeros(nx);
        let mut dm = DVector::zeros(ny);
        if j < nx {
            dn[j] = 1.0;
        } else {
            dm[j - nx] = 1.0;
        }
        let r = delta_from_prepared(market, &p, &dn, &dm)?;
        let du = DVector::from_fn(nx, |x, _| {
            (0..ny)
                .map(|y| mu[(x, y)] / market.n[x] * r.delta_u[(x, y)])
                .sum::<f64>()
        });
        let dv = DVector::from_fn(ny, |y, _| {
            (0..nx)
                .map(|x| mu[(x, y)] / market.m[y] * r.delta_v[(x, y)])
                .sum::<f64>()
        });
        Ok::<_, ItuError>((du, dv))
    })?;
    let within_men = DMatrix::from_fn(nx, nx, |x, j| columns[j].0[x]);
    let cross_women = DMatrix::from_fn(ny, nx, |y, j| columns[j].1[y]);
    let cross_men = DMatrix::from_fn(nx, ny, |x, k| columns[nx + k].0[x]);
    let within_women = DMatrix::from_fn(ny, ny, |y, k| columns[nx + k].1[y]);
    let within_asymmetry = (&within_men - within_men.transpose())
        .amax()
        .max((&within_women - within_women.transpose()).amax());
    let cross_asymmetry = (&cross_men - cross_women.transpose()).amax();
    Ok(SymmetryReport {
        within_men,
        within_women,
        cross_men,
        cross_women,
        within_asymmetry,
        cross_asymmetry,
        best_effort: p.best_effort,
    })
}
