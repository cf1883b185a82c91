//! Aggregate equilibrium with partial assignment.
//!
//! Two independent routes are provided:
//!
//! * [`solve_ipfp`] alternates exact per-type rebalancing of singles' masses
//!   through the matching functions (any `σ > 0`);
//! * [`solve_jacobi`] finds the wedges `W` that zero the excess demand
//!   `Z(W) = ∇H(𝒱(W)) − ∇G(𝒰(W))` by simultaneous coordinate root solves
//!   (`σ = 1`).
//!
//! Both return an [`EquilibriumOutcome`]; [`verify`] checks one against the
//! equilibrium conditions without trusting the solver that produced it.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::bargaining::WedgeBounds;
use crate::error::{ItuError, Result};
use crate::market::{Diagnostics, EquilibriumOutcome, Market, Matching};
use crate::matchfn::MatchFnSpec;
use crate::par::{self, Exec};
use crate::roots::{expand_bracket, newton_bisect, RootOptions};

/// Relative slack below which an increase of `μ_0y` between outer
/// iterations is attributed to rounding rather than counted as a violation.
pub const MONOTONICITY_SLACK: f64 = 1e-13;

const TRACE_CAP: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    pub tol: f64,
    pub max_iter: usize,
    #[serde(skip)]
    pub exec: Exec,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            tol: 1e-10,
            max_iter: 10_000,
            exec: Exec::Parallel,
        }
    }
}

impl SolverOptions {
    pub fn tol(tol: f64) -> Self {
        SolverOptions {
            tol,
            ..Default::default()
        }
    }

    pub fn with_exec(mut self, exec: Exec) -> Self {
        self.exec = exec;
        self
    }

    pub fn with_max_iter(mut self, max_iter: usize) -> Self {
        self.max_iter = max_iter;
        self
    }

    pub(crate) fn validate(&self) -> Result<()> {
        if !(self.tol.is_finite() && self.tol > 0.0) {
            return Err(ItuError::validation(
                "tol",
                format!("must be finite and > 0, got {}", self.tol),
            ));
        }
        if self.max_iter == 0 {
            return Err(ItuError::validation("max_iter", "must be at least 1"));
        }
        Ok(())
    }
}

/// `log(Σ exp(x_i))` without overflow; `-∞` for an empty input.
pub(crate) fn logsumexp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    if m == f64::INFINITY {
        return m;
    }
    m + xs.map(|x| (x - m).exp()).sum::<f64>().ln()
}

#[inline]
fn logistic(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// Solves `e^s + Σ_k exp(ℓ_k(s)) = total` for `s = log(singles)`, where each
/// `ℓ_k` is a log match mass with elasticity `e_k(s) = dℓ_k/ds ≥ 0`.
///
/// Works on `log(lhs) − log(total)`, which is strictly increasing in `s`,
/// so arbitrarily small singles' masses never underflow the bracket.
pub(crate) fn solve_log_singles<F>(total: f64, terms: F) -> Result<f64>
where
    F: Fn(f64) -> (f64, f64),
{
    // terms(s) returns (log Σ_k M_k, Σ_k M_k e_k / Σ_k M_k)
    let lt = total.ln();
    let g = |s: f64| -> (f64, f64) {
        let (lm, el) = terms(s);
        let l = logsumexp([s, lm].into_iter());
        let w_self = (s - l).exp();
        let w_match = (lm - l).exp();
        (l - lt, w_self + w_match * el)
    };
    let hi = lt;
    let (ghi, _) = g(hi);
    if ghi == 0.0 {
        return Ok(hi);
    }
    let (lo, hi) = expand_bracket(|s| g(s).0, hi, -1.0, 64)?;
    newton_bisect(g, lo, hi, RootOptions::default())
}

/// `(log Σ_k M_k, weighted elasticity)` for the partners of one type.
fn aggregate<I: Iterator<Item = (f64, f64)>>(items: I) -> (f64, f64) {
    let v: Vec<(f64, f64)> = items.collect();
    let l = logsumexp(v.iter().map(|p| p.0));
    if l == f64::NEG_INFINITY {
        return (l, 0.0);
    }
    let e = v.iter().map(|&(lm, el)| (lm - l).exp() * el).sum();
    (l, e)
}

fn ipfp_x_side(fns: &[MatchFnSpec], ny: usize, total: f64, x: usize, lb: &[f64]) -> Result<f64> {
    solve_log_singles(total, |s| {
        aggregate((0..ny).map(|y| {
            let f = &fns[x * ny + y];
            (f.log_mass(s, lb[y]), f.log_elasticities(s, lb[y]).0)
        }))
    })
}

fn ipfp_y_side(fns: &[MatchFnSpec], nx: usize, ny: usize, total: f64, y: usize, la: &[f64]) -> Result<f64> {
    solve_log_singles(total, |t| {
        aggregate((0..nx).map(|x| {
            let f = &fns[x * ny + y];
            (f.log_mass(la[x], t), f.log_elasticities(la[x], t).1)
        }))
    })
}

fn push_trace(trace: &mut Vec<f64>, v: f64) {
    if trace.len() == TRACE_CAP {
        trace.remove(0);
    }
    trace.push(v);
}

/// Matching-function equilibrium by iterative proportional fitting.
///
/// Starting from `μ_0y = m_y`, each outer iteration solves every man type's
/// accounting equation for `μ_x0` given the women's singles, then every woman
/// type's equation given the new `μ_x0`. Stops when
/// `sup_y |Δμ_0y| < tol` and the accounting residual is at most `tol`.
pub fn solve_ipfp(market: &Market, opts: &SolverOptions) -> Result<EquilibriumOutcome> {
    solve_ipfp_traced(market, opts, |_| {})
}

/// [`solve_ipfp`] with a callback receiving `μ_0y` after each outer iteration.
pub fn solve_ipfp_traced<F>(market: &Market, opts: &SolverOptions, mut observe: F) -> Result<EquilibriumOutcome>
where
    F: FnMut(&DVector<f64>),
{
    market.require_solvable()?;
    opts.validate()?;
    let (nx, ny) = (market.nx(), market.ny());
    let fns: Vec<MatchFnSpec> = (0..nx * ny).map(|k| market.matchfn(k / ny, k % ny)).collect();
    let mut lb: Vec<f64> = market.m.iter().map(|m| m.ln()).collect();
    let mut trace = Vec::new();
    let mut violations = 0;
    for it in 1..=opts.max_iter {
        let la = par::try_map_range(opts.exec, nx, |x| ipfp_x_side(&fns, ny, market.n[x], x, &lb))?;
        let new_lb = par::try_map_range(opts.exec, ny, |y| ipfp_y_side(&fns, nx, ny, market.m[y], y, &la))?;
        let mut step: f64 = 0.0;
        let mut violated = false;
        for y in 0..ny {
            let (old, new) = (lb[y].exp(), new_lb[y].exp());
            step = step.max((new - old).abs());
            if new > old * (1.0 + MONOTONICITY_SLACK) {
                violated = true;
            }
        }
        if violated {
            violations += 1;
        }
        lb = new_lb;
        observe(&DVector::from_iterator(ny, lb.iter().map(|l| l.exp())));
        // women's equations hold by construction; measure the men's
        let residual = (0..nx)
            .map(|x| {
                let total: f64 = la[x].exp()
                    + (0..ny)
                        .map(|y| fns[x * ny + y].log_mass(la[x], lb[y]).exp())
                        .sum::<f64>();
                (total - market.n[x]).abs()
            })
            .fold(0.0, f64::max);
        push_trace(&mut trace, step.max(residual));
        if step < opts.tol && residual <= opts.tol {
            let matching = Matching {
                mu: DMatrix::from_fn(nx, ny, |x, y| fns[x * ny + y].log_mass(la[x], lb[y]).exp()),
                mu_x0: DVector::from_iterator(nx, la.iter().map(|l| l.exp())),
                mu_0y: DVector::from_iterator(ny, lb.iter().map(|l| l.exp())),
            };
            let diagnostics = Diagnostics {
                solver: "ipfp".into(),
                iterations: it,
                step,
                residual,
                monotonicity_violations: violations,
            };
            return Ok(outcome_from_log_singles(
                &fns,
                &la,
                &lb,
                market.sigma,
                matching,
                diagnostics,
            ));
        }
    }
    Err(ItuError::Convergence {
        solver: "ipfp".into(),
        iterations: opts.max_iter,
        residual: trace.last().copied().unwrap_or(f64::NAN),
        trace,
    })
}

fn outcome_from_log_singles(
    fns: &[MatchFnSpec],
    la: &[f64],
    lb: &[f64],
    sigma: f64,
    matching: Matching,
    diagnostics: Diagnostics,
) -> EquilibriumOutcome {
    let (nx, ny) = (la.len(), lb.len());
    // utilities from log masses directly: exact even when masses underflow
    let lmu = DMatrix::from_fn(nx, ny, |x, y| fns[x * ny + y].log_mass(la[x], lb[y]));
    let u = DMatrix::from_fn(nx, ny, |x, y| sigma * (lmu[(x, y)] - la[x]));
    let v = DMatrix::from_fn(nx, ny, |x, y| sigma * (lmu[(x, y)] - lb[y]));
    let w = &u - &v;
    EquilibriumOutcome {
        matching,
        u,
        v,
        w,
        diagnostics,
    }
}

/// Wedge bounds of every pair, checking that each man type's upper bounds
/// are all finite or all infinite, and likewise each woman type's lower bounds.
pub fn check_wedge_assumption(market: &Market) -> Result<Vec<WedgeBounds>> {
    let (nx, ny) = (market.nx(), market.ny());
    let bounds: Vec<WedgeBounds> = market.tech.iter().map(|t| t.wedge_bounds()).collect::<Result<_>>()?;
    for x in 0..nx {
        let finite = (0..ny).filter(|&y| bounds[x * ny + y].upper_finite()).count();
        if finite != 0 && finite != ny {
            return Err(ItuError::validation(
                format!("men[{x}]"),
                "maximal utilities must be finite with all partner types or with none",
            ));
        }
    }
    for y in 0..ny {
        let finite = (0..nx).filter(|&x| bounds[x * ny + y].lower_finite()).count();
        if finite != 0 && finite != nx {
            return Err(ItuError::validation(
                format!("women[{y}]"),
                "maximal utilities must be finite with all partner types or with none",
            ));
        }
    }
    Ok(bounds)
}

/// Frozen log-partition terms of the other coordinates.
struct JacobiContext<'a> {
    market: &'a Market,
    u: DMatrix<f64>,
    v: DMatrix<f64>,
}

impl JacobiContext<'_> {
    fn new<'a>(market: &'a Market, w: &DMatrix<f64>) -> JacobiContext<'a> {
        let (nx, ny) = (market.nx(), market.ny());
        let mut u = DMatrix::zeros(nx, ny);
        let mut v = DMatrix::zeros(nx, ny);
        for x in 0..nx {
            for y in 0..ny {
                let (a, b) = market.tech(x, y).wedge_uv(w[(x, y)]);
                u[(x, y)] = a;
                v[(x, y)] = b;
            }
        }
        JacobiContext { market, u, v }
    }

    /// `log(1 + Σ_{y' ≠ y} e^{U_xy'})` and `log(1 + Σ_{x' ≠ x} e^{V_x'y})`.
    fn others(&self, x: usize, y: usize) -> (f64, f64) {
        let (nx, ny) = (self.market.nx(), self.market.ny());
        let lx = logsumexp(std::iter::once(0.0).chain((0..ny).filter(move |&k| k != y).map(|k| self.u[(x, k)])));
        let ly = logsumexp(std::iter::once(0.0).chain((0..nx).filter(move |&k| k != x).map(|k| self.v[(k, y)])));
        (lx, ly)
    }

    /// Own-coordinate excess demand and its derivative at wedge `w`.
    fn z_own(&self, x: usize, y: usize, lx: f64, ly: f64, w: f64) -> (f64, f64) {
        let tech = self.market.tech(x, y);
        let (u, v) = tech.wedge_uv(w);
        let du = tech.wedge_slope(w);
        let (n, m) = (self.market.n[x], self.market.m[y]);
        let ps = logistic(u - lx);
        let pd = logistic(v - ly);
        let z = m * pd - n * ps;
        let dz = m * pd * (1.0 - pd) * (du - 1.0) - n * ps * (1.0 - ps) * du;
        (z, dz)
    }
}

/// Excess demand `Z_xy(W) = ∂H/∂V_xy(𝒱(W)) − ∂G/∂U_xy(𝒰(W))` under logit
/// heterogeneity with `σ = 1`.
pub fn excess_demand(market: &Market, w: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    market.validate()?;
    let (nx, ny) = (market.nx(), market.ny());
    if w.shape() != (nx, ny) {
        return Err(ItuError::validation(
            "W",
            format!("expected a {nx}x{ny} wedge matrix, got {:?}", w.shape()),
        ));
    }
    if w.iter().any(|x| !x.is_finite()) {
        return Err(ItuError::domain("wedges must be finite"));
    }
    Ok(excess_demand_unchecked(market, w))
}

pub(crate) fn excess_demand_unchecked(market: &Market, w: &DMatrix<f64>) -> DMatrix<f64> {
    let ctx = JacobiContext::new(market, w);
    let (nx, ny) = (market.nx(), market.ny());
    let lx: Vec<f64> = (0..nx)
        .map(|x| logsumexp(std::iter::once(0.0).chain((0..ny).map(|y| ctx.u[(x, y)]))))
        .collect();
    let ly: Vec<f64> = (0..ny)
        .map(|y| logsumexp(std::iter::once(0.0).chain((0..nx).map(|x| ctx.v[(x, y)]))))
        .collect();
    DMatrix::from_fn(nx, ny, |x, y| {
        market.m[y] * (ctx.v[(x, y)] - ly[y]).exp() - market.n[x] * (ctx.u[(x, y)] - lx[x]).exp()
    })
}

/// Equilibrium wedges by Jacobi iteration on the excess demand.
///
/// Starts from a uniform `W⁰` large enough that `Z(W⁰) ≤ 0`; every outer
/// iteration replaces each `W_xy` by the root of its own `Z_xy` with the
/// other wedges frozen at the previous iterate. Stops when the largest wedge
/// step is below `tol` and `‖Z‖_∞ ≤ tol`.
pub fn solve_jacobi(market: &Market, opts: &SolverOptions) -> Result<EquilibriumOutcome> {
    market.require_solvable()?;
    opts.validate()?;
    if market.sigma != 1.0 {
        return Err(ItuError::validation(
            "sigma",
            "the wedge solver is only defined at sigma = 1",
        ));
    }
    let bounds = check_wedge_assumption(market)?;
    let (nx, ny) = (market.nx(), market.ny());
    let base = DMatrix::from_fn(nx, ny, |x, y| {
        let b = bounds[x * ny + y];
        if b.upper_finite() {
            b.upper.max(0.0)
        } else {
            0.0
        }
    });

    let mut w = None;
    for k in 0..=60 {
        let trial = base.add_scalar(2f64.powi(k));
        if excess_demand_unchecked(market, &trial).iter().all(|&z| z <= 0.0) {
            w = Some(trial);
            break;
        }
    }
    let mut w = w.ok_or_else(|| {
        ItuError::Initialization("no starting wedge with nonpositive excess demand up to 2^60".into())
    })?;

    let mut trace = Vec::new();
    for it in 1..=opts.max_iter {
        let ctx = JacobiContext::new(market, &w);
        let updated = par::try_map_range(opts.exec, nx * ny, |k| {
            let (x, y) = (k / ny, k % ny);
            let (lx, ly) = ctx.others(x, y);
            let w0 = w[(x, y)];
            let z0 = ctx.z_own(x, y, lx, ly, w0).0;
            if z0 == 0.0 {
                return Ok(w0);
            }
            let step = if z0 > 0.0 { 1.0 } else { -1.0 };
            let (lo, hi) = expand_bracket(|t| ctx.z_own(x, y, lx, ly, t).0, w0, step, 64)?;
            newton_bisect(|t| ctx.z_own(x, y, lx, ly, t), lo, hi, RootOptions::default())
        })?;
        let new_w = DMatrix::from_vec(ny, nx, updated).transpose();
        let step = (&new_w - &w).amax();
        w = new_w;
        let z = excess_demand_unchecked(market, &w);
        let residual = z.amax();
        push_trace(&mut trace, step.max(residual));
        if step < opts.tol && residual <= opts.tol {
            let diagnostics = Diagnostics {
                solver: "jacobi".into(),
                iterations: it,
                step,
                residual,
                monotonicity_violations: 0,
            };
            return Ok(outcome_from_wedges(market, &w, diagnostics));
        }
    }
    Err(ItuError::Convergence {
        solver: "jacobi".into(),
        iterations: opts.max_iter,
        residual: trace.last().copied().unwrap_or(f64::NAN),
        trace,
    })
}

/// Assembles the outcome at wedges `W`: `μ = ∇G(𝒰(W))`, singles from the
/// logit shares on each side.
pub fn outcome_from_wedges(market: &Market, w: &DMatrix<f64>, diagnostics: Diagnostics) -> EquilibriumOutcome {
    let ctx = JacobiContext::new(market, w);
    let (nx, ny) = (market.nx(), market.ny());
    let lx: Vec<f64> = (0..nx)
        .map(|x| logsumexp(std::iter::once(0.0).chain((0..ny).map(|y| ctx.u[(x, y)]))))
        .collect();
    let ly: Vec<f64> = (0..ny)
        .map(|y| logsumexp(std::iter::once(0.0).chain((0..nx).map(|x| ctx.v[(x, y)]))))
        .collect();
    let matching = Matching {
        mu: DMatrix::from_fn(nx, ny, |x, y| market.n[x] * (ctx.u[(x, y)] - lx[x]).exp()),
        mu_x0: DVector::from_iterator(nx, (0..nx).map(|x| market.n[x] * (-lx[x]).exp())),
        mu_0y: DVector::from_iterator(ny, (0..ny).map(|y| market.m[y] * (-ly[y]).exp())),
    };
    EquilibriumOutcome {
        matching,
        u: ctx.u,
        v: ctx.v,
        w: w.clone(),
        diagnostics,
    }
}

/// Sup-norm residuals of the equilibrium conditions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResidualReport {
    /// Population accounting `μ_x0 + Σ_y μ_xy = n_x`, `μ_0y + Σ_x μ_xy = m_y`.
    pub accounting: f64,
    /// Feasibility on the frontier `D_xy(U_xy, V_xy) = 0`.
    pub feasibility: f64,
    /// Consistency `μ_xy = M_xy(μ_x0, μ_0y)`.
    pub matching_function: f64,
    /// Wedge consistency `W = U − V`.
    pub wedge: f64,
    /// Smallest mass; positive iff the matching is interior.
    pub min_mass: f64,
}

impl ResidualReport {
    /// Largest of the equality residuals.
    pub fn max_residual(&self) -> f64 {
        self.accounting
            .max(self.feasibility)
            .max(self.matching_function)
            .max(self.wedge)
    }
}

/// Measures how far an outcome is from being an equilibrium of `market`.
/// Never fails: malformed pieces show up as infinite or NaN residuals.
pub fn verify(market: &Market, outcome: &EquilibriumOutcome) -> ResidualReport {
    let mt = &outcome.matching;
    let (nx, ny) = (market.nx(), market.ny());
    let shapes_ok = mt.mu.shape() == (nx, ny)
        && mt.mu_x0.len() == nx
        && mt.mu_0y.len() == ny
        && outcome.u.shape() == (nx, ny)
        && outcome.v.shape() == (nx, ny)
        && outcome.w.shape() == (nx, ny)
        && market.tech.len() == nx * ny;
    if !shapes_ok {
        return ResidualReport {
            accounting: f64::INFINITY,
            feasibility: f64::INFINITY,
            matching_function: f64::INFINITY,
            wedge: f64::INFINITY,
            min_mass: f64::NAN,
        };
    }
    let mut feasibility: f64 = 0.0;
    let mut matching_function: f64 = 0.0;
    let mut wedge: f64 = 0.0;
    for x in 0..nx {
        for y in 0..ny {
            let (u, v) = (outcome.u[(x, y)], outcome.v[(x, y)]);
            feasibility = feasibility.max(market.tech(x, y).eval(u, v).abs());
            let f = market.matchfn(x, y);
            let predicted = f.log_mass(mt.mu_x0[x].ln(), mt.mu_0y[y].ln()).exp();
            matching_function = matching_function.max((mt.mu[(x, y)] - predicted).abs());
            wedge = wedge.max((outcome.w[(x, y)] - (u - v)).abs());
        }
    }
    ResidualReport {
        accounting: mt.accounting_residual(&market.n, &market.m),
        feasibility,
        matching_function,
        wedge,
        min_mass: mt.min_mass(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bargaining::DistanceSpec;
    use approx::assert_abs_diff_eq;

    fn one_by_one(spec: DistanceSpec, n: f64, m: f64) -> Market {
        Market::new(vec![n], vec![m], move |_, _| spec.clone())
    }

    fn tight() -> SolverOptions {
        SolverOptions::tol(1e-13)
    }

    #[test]
    fn ipfp_symmetric_tu() {
        let mk = one_by_one(DistanceSpec::TU { phi: 0.0 }, 1.0, 1.0);
        let out = solve_ipfp(&mk, &tight()).unwrap();
        assert_abs_diff_eq!(out.matching.mu[(0, 0)], 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(out.matching.mu_x0[0], 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(out.matching.mu_0y[0], 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(out.w[(0, 0)], 0.0, epsilon = 1e-10);
    }

    #[test]
    fn ipfp_ntu_matches_bisection_oracle() {
        let mk = one_by_one(DistanceSpec::NTU { alpha: 0.0, gamma: 0.0 }, 1.0, 2.0);
        let out = solve_ipfp(&mk, &tight()).unwrap();
        // oracle: μ = min(a, b), a + μ = 1, b + μ = 2; bisection on a
        let (mut lo, mut hi) = (0.0f64, 1.0f64);
        for _ in 0..200 {
            let a = 0.5 * (lo + hi);
            let b = {
                // b + min(a, b) = 2
                let (mut l, mut h) = (0.0f64, 2.0f64);
                for _ in 0..200 {
                    let mid = 0.5 * (l + h);
                    if mid + a.min(mid) > 2.0 {
                        h = mid
                    } else {
                        l = mid
                    }
                }
                0.5 * (l + h)
            };
            if a + a.min(b) > 1.0 {
                hi = a
            } else {
                lo = a
            }
        }
        let a = 0.5 * (lo + hi);
        assert_abs_diff_eq!(out.matching.mu_x0[0], a, epsilon = 1e-10);
        assert_abs_diff_eq!(out.matching.mu[(0, 0)], 1.0 - a, epsilon = 1e-10);
    }

    #[test]
    fn vanishing_surplus_kills_matches() {
        let mk = Market::new(vec![1.0, 2.0], vec![1.5, 0.5], |_, _| DistanceSpec::TU { phi: -100.0 });
        let out = solve_ipfp(&mk, &tight()).unwrap();
        assert!(out.matching.mu.amax() < 1e-20);
        assert_abs_diff_eq!(out.matching.mu_x0[1], 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(out.matching.mu_0y[0], 1.5, epsilon = 1e-12);
    }

    #[test]
    fn jacobi_agrees_with_ipfp() {
        let mk = Market::new(vec![1.0, 2.0], vec![1.5, 0.7, 1.1], |x, y| match (x + y) % 3 {
            0 => DistanceSpec::TU {
                phi: 0.5 * x as f64 - 0.2 * y as f64,
            },
            1 => DistanceSpec::ETU {
                alpha: 0.3,
                gamma: -0.1 * y as f64,
                tau: 0.5 + x as f64,
                budget: 2.0,
            },
            _ => DistanceSpec::LTU {
                lambda: 0.6,
                zeta: 1.4,
                phi: 0.2,
            },
        });
        let a = solve_ipfp(&mk, &tight()).unwrap();
        let b = solve_jacobi(&mk, &SolverOptions::tol(1e-12)).unwrap();
        assert!((&a.matching.mu - &b.matching.mu).amax() < 1e-9);
        let rep = verify(&mk, &b);
        assert!(rep.max_residual() < 1e-9, "{rep:?}");
    }

    #[test]
    fn jacobi_handles_ntu() {
        let mk = Market::new(vec![1.0, 1.0], vec![1.0, 1.0], |x, y| DistanceSpec::NTU {
            alpha: 0.2 * x as f64,
            gamma: -0.3 * y as f64,
        });
        let a = solve_ipfp(&mk, &tight()).unwrap();
        let b = solve_jacobi(&mk, &SolverOptions::tol(1e-12)).unwrap();
        assert!((&a.matching.mu - &b.matching.mu).amax() < 1e-9);
    }

    #[test]
    fn jacobi_rejects_mixed_bounds_and_sigma() {
        let mk = Market::new(vec![1.0], vec![1.0, 1.0], |_, y| {
            if y == 0 {
                DistanceSpec::NTU { alpha: 0.0, gamma: 0.0 }
            } else {
                DistanceSpec::TU { phi: 0.0 }
            }
        });
        assert!(matches!(solve_jacobi(&mk, &tight()), Err(ItuError::Validation { .. })));
        let mk = one_by_one(DistanceSpec::TU { phi: 0.0 }, 1.0, 1.0).with_sigma(0.5);
        assert!(matches!(solve_jacobi(&mk, &tight()), Err(ItuError::Validation { .. })));
    }

    #[test]
    fn excess_demand_examples() {
        let mk = one_by_one(DistanceSpec::TU { phi: 0.0 }, 1.0, 1.0);
        let z = excess_demand(&mk, &DMatrix::zeros(1, 1)).unwrap();
        assert_abs_diff_eq!(z[(0, 0)], 0.0, epsilon = 1e-15);
        let z1 = excess_demand(&mk, &DMatrix::from_element(1, 1, 0.5)).unwrap();
        assert!(z1[(0, 0)] < 0.0);
        // doubling n doubles the supply term: Z(n) = demand - n * share
        let w = DMatrix::from_element(1, 1, 0.3);
        let mk2 = one_by_one(DistanceSpec::TU { phi: 0.0 }, 2.0, 1.0);
        let z1 = excess_demand(&mk, &w).unwrap()[(0, 0)];
        let z2 = excess_demand(&mk2, &w).unwrap()[(0, 0)];
        let share = 1.0 / (1.0 + (-0.15f64).exp());
        assert_abs_diff_eq!(z1 - z2, share, epsilon = 1e-14);
        assert!(excess_demand(&mk, &DMatrix::from_element(1, 1, f64::NAN)).is_err());
    }

    #[test]
    fn verify_detects_perturbation() {
        let mk = one_by_one(DistanceSpec::TU { phi: 0.0 }, 1.0, 1.0);
        let mut out = solve_ipfp(&mk, &tight()).unwrap();
        assert!(verify(&mk, &out).max_residual() <= 1e-10);
        out.matching.mu[(0, 0)] += 0.1;
        assert_abs_diff_eq!(verify(&mk, &out).accounting, 0.1, epsilon = 1e-10);
    }

    #[test]
    fn ipfp_rejects_dagsvik_menzel() {
        let mut mk = one_by_one(DistanceSpec::NTU { alpha: 0.0, gamma: 0.0 }, 1.0, 1.0);
        mk.variant = crate::market::MarketVariant::DagsvikMenzel;
        assert!(matches!(solve_ipfp(&mk, &tight()), Err(ItuError::Validation { .. })));
    }

    #[test]
    fn ipfp_reports_non_convergence() {
        let mk = Market::new(vec![1.0, 2.0], vec![1.0, 3.0], |x, y| DistanceSpec::TU {
            phi: (x + 2 * y) as f64,
        });
        match solve_ipfp(&mk, &SolverOptions::tol(1e-14).with_max_iter(2)) {
            Err(ItuError::Convergence { iterations, trace, .. }) => {
                assert_eq!(iterations, 2);
                assert_eq!(trace.len(), 2);
            }
            other => panic!("unexpected {other:?}"),
        }
    }
}
