//! Matching function equilibrium with full assignment.
//!
//! Without an outside option the singles' masses are replaced by fixed effects
//! `a_x`, `b_y` with `μ_xy = exp(-D_xy(a_x, b_y)/σ)`, pinned down by the row and
//! column accounting equations. The equations are dependent (both sides sum to
//! the total mass), so one coordinate is pinned.
//!
//! Note that the solution set of the accounting system is a one-parameter
//! family. Moving the pin traces that family; the matching is constant along it
//! only when the family is a symmetry of every `D_xy`, which holds for TU
//! (shift `a` up and `b` down) and for LTU with a common ratio `λ/ζ`, but not for
//! general ITU technologies.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::equilibrium::{logsumexp, SolverOptions};
use crate::error::{ItuError, Result};
use crate::market::{Market, Matching};
use crate::par;
use crate::roots::{expand_bracket, newton_bisect, RootOptions};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Men,
    Women,
}

/// Which fixed effect is held at which value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub side: Side,
    pub index: usize,
    pub value: f64,
}

impl Default for Normalization {
    fn default() -> Self {
        Normalization {
            side: Side::Men,
            index: 0,
            value: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixedEffects {
    #[serde(with = "crate::io::flat")]
    pub a: DVector<f64>,
    #[serde(with = "crate::io::flat")]
    pub b: DVector<f64>,
    pub normalization: Normalization,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FullAssignment {
    pub matching: Matching,
    pub effects: FixedEffects,
    pub iterations: usize,
    /// Largest row or column accounting residual.
    pub residual: f64,
}

/// `μ_xy = exp(-D_xy(a_x, b_y)/σ)`.
pub fn full_masses(market: &Market, a: &DVector<f64>, b: &DVector<f64>) -> DMatrix<f64> {
    let s = market.sigma;
    DMatrix::from_fn(market.nx(), market.ny(), |x, y| {
        (-market.tech(x, y).eval(a[x], b[y]) / s).exp()
    })
}

/// Row residuals `Σ_y μ_xy − n_x` and column residuals `Σ_x μ_xy − m_y`.
pub fn accounting_residuals(market: &Market, a: &DVector<f64>, b: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
    let mu = full_masses(market, a, b);
    (mu.column_sum() - &market.n, mu.row_sum().transpose() - &market.m)
}

/// Solves `log Σ_k exp(-D_k(t)/σ) = log total` in `t`; the left side is
/// strictly decreasing in `t` for isotone technologies.
fn solve_effect<F>(total: f64, sigma: f64, start: f64, terms: F) -> Result<f64>
where
    F: Fn(f64) -> Vec<(f64, f64)>,
{
    let lt = total.ln();
    let h = |t: f64| -> (f64, f64) {
        let parts = terms(t);
        let l = logsumexp(parts.iter().map(|p| -p.0 / sigma));
        let d = -parts.iter().map(|&(dv, g)| (-dv / sigma - l).exp() * g).sum::<f64>() / sigma;
        (l - lt, d)
    };
    let h0 = h(start).0;
    if h0 == 0.0 {
        return Ok(start);
    }
    let step = if h0 > 0.0 { 1.0 } else { -1.0 };
    // bounded frontiers cap the achievable mass; the equation may have no root
    let (lo, hi) = expand_bracket(|t| h(t).0, start, step, 64).map_err(|_| {
        ItuError::Initialization(format!(
            "no fixed effect attains mass {total}: the technologies cap the achievable match mass"
        ))
    })?;
    newton_bisect(h, lo, hi, RootOptions::default())
}

/// Full-assignment equilibrium by alternating coordinate solves on the fixed
/// effects, skipping the pinned coordinate.
pub fn solve_full(market: &Market, opts: &SolverOptions, norm: Normalization) -> Result<FullAssignment> {
    market.require_solvable()?;
    opts.validate()?;
    let (nx, ny) = (market.nx(), market.ny());
    let (tn, tm) = (market.n.sum(), market.m.sum());
    if (tn - tm).abs() > 1e-9 * tn.max(tm) {
        return Err(ItuError::validation(
            "women",
            format!("full assignment needs equal total masses, got {tn} men and {tm} women"),
        ));
    }
    let limit = match norm.side {
        Side::Men => nx,
        Side::Women => ny,
    };
    if norm.index >= limit || !norm.value.is_finite() {
        return Err(ItuError::validation(
            "normalization",
            "pinned coordinate out of range or value not finite",
        ));
    }
    let sigma = market.sigma;
    let mut a = DVector::from_element(nx, 0.0);
    let mut b = DVector::from_element(ny, 0.0);
    match norm.side {
        Side::Men => a[norm.index] = norm.value,
        Side::Women => b[norm.index] = norm.value,
    }
    let mut trace = Vec::new();
    for it in 1..=opts.max_iter {
        let a_old = a.clone();
        let b_old = b.clone();
        let new_a = par::try_map_range(opts.exec, nx, |x| {
            if norm.side == Side::Men && x == norm.index {
                return Ok(a[x]);
            }
            solve_effect(market.n[x], sigma, a[x], |t| {
                (0..ny)
                    .map(|y| {
                        let d = market.tech(x, y);
                        (d.eval(t, b[y]), d.grad(t, b[y]).0)
                    })
                    .collect()
            })
        })?;
        a = DVector::from_vec(new_a);
        let new_b = par::try_map_range(opts.exec, ny, |y| {
            if norm.side == Side::Women && y == norm.index {
                return Ok(b[y]);
            }
            solve_effect(market.m[y], sigma, b[y], |t| {
                (0..nx)
                    .map(|x| {
                        let d = market.tech(x, y);
                        (d.eval(a[x], t), d.grad(a[x], t).1)
                    })
                    .collect()
            })
        })?;
        b = DVector::from_vec(new_b);
        let step = (&a - &a_old).amax().max((&b - &b_old).amax());
        let (rx, ry) = accounting_residuals(market, &a, &b);
        let residual = rx.amax().max(ry.amax());
        trace.push(step.max(residual));
        if trace.len() > 1000 {
            trace.remove(0);
        }
        if step < opts.tol && residual <= opts.tol {
            let mu = full_masses(market, &a, &b);
            return Ok(FullAssignment {
                matching: Matching {
                    mu,
                    mu_x0: DVector::zeros(nx),
                    mu_0y: DVector::zeros(ny),
                },
                effects: FixedEffects {
                    a,
                    b,
                    normalization: norm,
                },
                iterations: it,
                residual,
            });
        }
    }
    Err(ItuError::Convergence {
        solver: "full_assignment".into(),
        iterations: opts.max_iter,
        residual: trace.last().copied().unwrap_or(f64::NAN),
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bargaining::DistanceSpec;
    use approx::assert_abs_diff_eq;

    fn opts() -> SolverOptions {
        SolverOptions::tol(1e-12)
    }

    #[test]
    fn one_by_one_tu() {
        let mk = Market::new(vec![1.0], vec![1.0], |_, _| DistanceSpec::TU { phi: 0.0 });
        let fa = solve_full(&mk, &opts(), Normalization::default()).unwrap();
        assert_abs_diff_eq!(fa.matching.mu[(0, 0)], 1.0, epsilon = 1e-12);
        assert_eq!(fa.effects.a[0], 0.0);
        assert_abs_diff_eq!(fa.effects.b[0], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn symmetric_two_by_two() {
        let mk = Market::new(vec![1.0, 1.0], vec![1.0, 1.0], |_, _| DistanceSpec::TU { phi: 0.0 });
        let fa = solve_full(&mk, &opts(), Normalization::default()).unwrap();
        for v in fa.matching.mu.iter() {
            assert_abs_diff_eq!(*v, 0.5, epsilon = 1e-11);
        }
        assert_abs_diff_eq!(fa.effects.a[1], 0.0, epsilon = 1e-11);
        // exp(-(0 + b)/2) = 0.5
        assert_abs_diff_eq!(fa.effects.b[0], 2.0 * 2f64.ln(), epsilon = 1e-11);
        assert_abs_diff_eq!(fa.effects.b[0], fa.effects.b[1], epsilon = 1e-11);
    }

    #[test]
    fn tu_pin_invariance() {
        let mk = Market::new(vec![0.7, 1.3, 1.0], vec![1.2, 1.8], |x, y| DistanceSpec::TU {
            phi: (x as f64) - 0.5 * (y as f64) + 0.3 * (x * y) as f64,
        });
        let base = solve_full(&mk, &opts(), Normalization::default()).unwrap();
        let other = solve_full(
            &mk,
            &opts(),
            Normalization {
                side: Side::Women,
                index: 1,
                value: 2.5,
            },
        )
        .unwrap();
        assert!((&base.matching.mu - &other.matching.mu).amax() < 1e-10);
        assert_eq!(other.effects.b[1], 2.5);
    }

    #[test]
    fn itu_pin_moves_matching() {
        let mk = Market::new(vec![1.0, 1.0], vec![1.0, 1.0], |x, y| DistanceSpec::ETU {
            alpha: 0.2 * x as f64,
            gamma: -0.1 * y as f64,
            tau: 0.3 + x as f64 + 2.0 * y as f64,
            budget: 2.0,
        });
        let base = solve_full(&mk, &opts(), Normalization::default()).unwrap();
        let moved = solve_full(
            &mk,
            &opts(),
            Normalization {
                value: 0.3,
                ..Normalization::default()
            },
        )
        .unwrap();
        assert!(base.residual <= 1e-12 && moved.residual <= 1e-12);
        assert!((&base.matching.mu - &moved.matching.mu).amax() > 1e-4);
    }

    #[test]
    fn residual_dependency() {
        let mk = Market::new(vec![0.7, 1.3], vec![1.2, 0.8], |x, y| DistanceSpec::ETU {
            alpha: x as f64,
            gamma: y as f64,
            tau: 0.5,
            budget: 2.0,
        });
        let a = DVector::from_vec(vec![0.3, -1.0]);
        let b = DVector::from_vec(vec![0.1, 0.9]);
        let (rx, ry) = accounting_residuals(&mk, &a, &b);
        assert_abs_diff_eq!(rx.sum(), ry.sum(), epsilon = 1e-12);
    }

    #[test]
    fn rejects_unbalanced() {
        let mk = Market::new(vec![1.0], vec![2.0], |_, _| DistanceSpec::TU { phi: 0.0 });
        assert!(matches!(
            solve_full(&mk, &opts(), Normalization::default()),
            Err(ItuError::Validation { .. })
        ));
    }
}
