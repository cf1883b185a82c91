//! Steady-state search-and-matching equilibrium with imperfectly
//! transferable utility.
//!
//! Singles meet at Poisson rate `ρ` times the mass of singles on the other
//! side, matches dissolve at rate `δ`, and flow values are discounted at `r`.
//! Writing `u_x = rU_x`, `v_y = rV_y` for the flow values of being single, a
//! steady state satisfies
//!
//! ```text
//! u_x = ρ Σ_y μ_0y max{0, −D_xy(u_x, v_y)}
//! v_y = ρ Σ_x μ_x0 max{0, −D_xy(u_x, v_y)}
//! μ_xy = (ρ/δ) μ_x0 μ_0y 1{D_xy(u_x, v_y) ≤ 0}
//! n_x = μ_x0 + Σ_y μ_xy,   m_y = μ_0y + Σ_x μ_xy
//! ```
//!
//! The solver alternates exact mass solves for a frozen acceptance set with
//! damped updates of the values.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::bargaining::DistanceSpec;
use crate::equilibrium::SolverOptions;
use crate::error::{ItuError, Result};
use crate::market::{Market, Matching};
use crate::par;
use crate::roots::{expand_bracket, newton_bisect, RootOptions};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SearchParams {
    /// Meeting intensity per unit mass of singles on the other side.
    pub rho: f64,
    /// Match destruction intensity.
    pub delta: f64,
    /// Discount rate.
    pub r: f64,
}

impl SearchParams {
    pub fn validate(&self) -> Result<()> {
        for (field, v) in [("rho", self.rho), ("delta", self.delta), ("r", self.r)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(ItuError::validation(field, format!("must be finite and > 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Match surplus `S = −D(u, v)/(r + δ)`; partners match iff `S ≥ 0`.
pub fn match_surplus(spec: &DistanceSpec, u: f64, v: f64, params: &SearchParams) -> f64 {
    -spec.eval(u, v) / (params.r + params.delta)
}

/// Sup-norms of the residual families at a candidate steady state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SearchResiduals {
    pub value_men: f64,
    pub value_women: f64,
    pub flow: f64,
    pub accounting: f64,
}

impl SearchResiduals {
    pub fn max(&self) -> f64 {
        self.value_men.max(self.value_women).max(self.flow).max(self.accounting)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchOutcome {
    pub matching: Matching,
    #[serde(with = "crate::io::flat")]
    pub u: DVector<f64>,
    #[serde(with = "crate::io::flat")]
    pub v: DVector<f64>,
    /// Acceptance set `D_xy(u_x, v_y) ≤ 0`, row-major by man type.
    pub accepted: Vec<Vec<bool>>,
    pub residuals: SearchResiduals,
    pub iterations: usize,
    /// Residual after every outer iteration.
    pub trace: Vec<f64>,
}

fn acceptance(market: &Market, u: &DVector<f64>, v: &DVector<f64>) -> Vec<Vec<bool>> {
    (0..market.nx())
        .map(|x| {
            (0..market.ny())
                .map(|y| market.tech(x, y).eval(u[x], v[y]) <= 0.0)
                .collect()
        })
        .collect()
}

/// Masses of singles for a frozen acceptance set.
///
/// The accounting equations are the stationarity conditions of
/// `Σ e^s − n·s + Σ e^t − m·t + (ρ/δ) Σ_A e^{s_x + t_y}`, which is strictly
/// convex in `(s, t) = (log μ_x0, log μ_0y)`; Newton with backtracking on that
/// objective converges from any start.
pub fn singles_for_acceptance(
    n: &DVector<f64>,
    m: &DVector<f64>,
    accepted: &[Vec<bool>],
    k: f64,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let (nx, ny) = (n.len(), m.len());
    let dim = nx + ny;
    let objective = |z: &DVector<f64>| -> f64 {
        let mut f = 0.0;
        for x in 0..nx {
            f += z[x].exp() - n[x] * z[x];
        }
        for y in 0..ny {
            f += z[nx + y].exp() - m[y] * z[nx + y];
        }
        for x in 0..nx {
            for y in 0..ny {
                if accepted[x][y] {
                    f += k * (z[x] + z[nx + y]).exp();
                }
            }
        }
        f
    };
    let mut z = DVector::from_fn(dim, |i, _| if i < nx { n[i].ln() } else { m[i - nx].ln() });
    let scale = n.amax().max(m.amax());
    for _ in 0..200 {
        let mut g = DVector::zeros(dim);
        let mut h = DMatrix::zeros(dim, dim);
        for x in 0..nx {
            g[x] = z[x].exp() - n[x];
            h[(x, x)] = z[x].exp();
        }
        for y in 0..ny {
            g[nx + y] = z[nx + y].exp() - m[y];
            h[(nx + y, nx + y)] = z[nx + y].exp();
        }
        for x in 0..nx {
            for y in 0..ny {
                if accepted[x][y] {
                    let e = k * (z[x] + z[nx + y]).exp();
                    g[x] += e;
                    g[nx + y] += e;
                    h[(x, x)] += e;
                    h[(nx + y, nx + y)] += e;
                    h[(x, nx + y)] += e;
                    h[(nx + y, x)] += e;
                }
            }
        }
        if g.amax() <= 1e-15 * scale {
            break;
        }
        let step = h
            .cholesky()
            .ok_or(ItuError::Numerical {
                message: "singles' mass Hessian not positive definite".into(),
                condition: f64::INFINITY,
            })?
            .solve(&g);
        let f0 = objective(&z);
        let slope = g.dot(&step);
        let mut t = 1.0;
        loop {
            let trial = &z - t * &step;
            if objective(&trial) <= f0 - 1e-4 * t * slope || t < 1e-12 {
                z = trial;
                break;
            }
            t *= 0.5;
        }
    }
    Ok((
        DVector::from_fn(nx, |i, _| z[i].exp()),
        DVector::from_fn(ny, |j, _| z[nx + j].exp()),
    ))
}

/// Root in `w ≥ 0` of `w − ρ Σ_k mass_k max{0, −D_k(w)}`, which is strictly
/// increasing in `w`.
fn value_root<F>(rho: f64, masses: &[f64], eval: F) -> Result<f64>
where
    F: Fn(usize, f64) -> (f64, f64),
{
    let f = |w: f64| -> (f64, f64) {
        let mut val = w;
        let mut der = 1.0;
        for (k, &mass) in masses.iter().enumerate() {
            let (d, g) = eval(k, w);
            if d < 0.0 {
                val += rho * mass * d;
                der += rho * mass * g;
            }
        }
        (val, der)
    };
    let f0 = f(0.0).0;
    if f0 >= 0.0 {
        return Ok(0.0);
    }
    let (lo, hi) = expand_bracket(|w| f(w).0, 0.0, 1.0, 64)?;
    newton_bisect(f, lo, hi, RootOptions::default())
}

struct State {
    matching: Matching,
    accepted: Vec<Vec<bool>>,
    residuals: SearchResiduals,
}

fn evaluate_state(market: &Market, params: &SearchParams, u: &DVector<f64>, v: &DVector<f64>) -> Result<State> {
    let (nx, ny) = (market.nx(), market.ny());
    let k = params.rho / params.delta;
    let accepted = acceptance(market, u, v);
    let (mx0, m0y) = singles_for_acceptance(&market.n, &market.m, &accepted, k)?;
    let mu = DMatrix::from_fn(nx, ny, |x, y| if accepted[x][y] { k * mx0[x] * m0y[y] } else { 0.0 });
    let matching = Matching {
        mu,
        mu_x0: mx0,
        mu_0y: m0y,
    };
    let residuals = steady_state_residuals(market, params, &matching, u, v);
    Ok(State {
        matching,
        accepted,
        residuals,
    })
}

fn flow_residual(market: &Market, params: &SearchParams, mt: &Matching, accepted: &[Vec<bool>]) -> f64 {
    let k = params.rho / params.delta;
    let mut r: f64 = 0.0;
    for x in 0..market.nx() {
        for y in 0..market.ny() {
            let target = if accepted[x][y] {
                k * mt.mu_x0[x] * mt.mu_0y[y]
            } else {
                0.0
            };
            r = r.max((mt.mu[(x, y)] - target).abs());
        }
    }
    r
}

/// Steady state by damped fixed-point iteration from the default start
/// `u = v = 0` (or `init` when given).
///
/// Each iteration freezes the acceptance set at the current values, computes
/// the singles' masses exactly, then updates `u` given `v` and `v` given the
/// new `u` by exact scalar solves of the value equations. The new values are
/// blended with relaxation `ω` (initially 0.5); a blend that increases the
/// residual is retried with `ω` halved.
pub fn solve_steady_state(
    market: &Market,
    params: &SearchParams,
    opts: &SolverOptions,
    init: Option<(DVector<f64>, DVector<f64>)>,
) -> Result<SearchOutcome> {
    market.validate()?;
    params.validate()?;
    opts.validate()?;
    let (nx, ny) = (market.nx(), market.ny());
    let (mut u, mut v) = match init {
        Some((u0, v0)) => {
            if u0.len() != nx || v0.len() != ny || u0.iter().chain(v0.iter()).any(|w| !w.is_finite()) {
                return Err(ItuError::validation(
                    "init",
                    "initial values must be finite with one per type",
                ));
            }
            (u0, v0)
        }
        None => (DVector::zeros(nx), DVector::zeros(ny)),
    };
    let mut state = evaluate_state(market, params, &u, &v)?;
    let mut res = state.residuals.max();
    let mut trace = vec![res];
    let mut omega = 0.5;
    for it in 1..=opts.max_iter {
        if res <= opts.tol {
            return Ok(finish(u, v, state, it - 1, trace));
        }
        let mass_x0: Vec<f64> = state.matching.mu_x0.iter().copied().collect();
        let mass_0y: Vec<f64> = state.matching.mu_0y.iter().copied().collect();
        let u_new = DVector::from_vec(par::try_map_range(opts.exec, nx, |x| {
            value_root(params.rho, &mass_0y, |y, w| {
                let t = market.tech(x, y);
                (t.eval(w, v[y]), t.grad(w, v[y]).0)
            })
        })?);
        let v_new = DVector::from_vec(par::try_map_range(opts.exec, ny, |y| {
            value_root(params.rho, &mass_x0, |x, w| {
                let t = market.tech(x, y);
                (t.eval(u_new[x], w), t.grad(u_new[x], w).1)
            })
        })?);
        let mut w = omega;
        loop {
            let cu = &u * (1.0 - w) + &u_new * w;
            let cv = &v * (1.0 - w) + &v_new * w;
            let cand = evaluate_state(market, params, &cu, &cv)?;
            let cres = cand.residuals.max();
            if cres <= res || w < 1e-6 {
                u = cu;
                v = cv;
                state = cand;
                res = cres;
                break;
            }
            w *= 0.5;
        }
        // recover toward the nominal relaxation after a successful step
        omega = (2.0 * w).min(0.5);
        trace.push(res);
    }
    if res <= opts.tol {
        let iters = opts.max_iter;
        return Ok(finish(u, v, state, iters, trace));
    }
    Err(ItuError::Convergence {
        solver: "search".into(),
        iterations: opts.max_iter,
        residual: res,
        trace,
    })
}

fn finish(u: DVector<f64>, v: DVector<f64>, state: State, iterations: usize, trace: Vec<f64>) -> SearchOutcome {
    SearchOutcome {
        matching: state.matching,
        u,
        v,
        accepted: state.accepted,
        residuals: state.residuals,
        iterations,
        trace,
    }
}

/// Residuals of an arbitrary candidate `(μ, u, v)` against the steady-state
/// equations, with the acceptance set derived from `(u, v)`.
pub fn steady_state_residuals(
    market: &Market,
    params: &SearchParams,
    matching: &Matching,
    u: &DVector<f64>,
    v: &DVector<f64>,
) -> SearchResiduals {
    let (nx, ny) = (market.nx(), market.ny());
    let accepted = acceptance(market, u, v);
    let surplus = DMatrix::from_fn(nx, ny, |x, y| (-market.tech(x, y).eval(u[x], v[y])).max(0.0));
    let value_men = (0..nx)
        .map(|x| (u[x] - params.rho * (0..ny).map(|y| matching.mu_0y[y] * surplus[(x, y)]).sum::<f64>()).abs())
        .fold(0.0, f64::max);
    let value_women = (0..ny)
        .map(|y| (v[y] - params.rho * (0..nx).map(|x| matching.mu_x0[x] * surplus[(x, y)]).sum::<f64>()).abs())
        .fold(0.0, f64::max);
    SearchResiduals {
        value_men,
        value_women,
        flow: flow_residual(market, params, matching, &accepted),
        accounting: matching.accounting_residual(&market.n, &market.m),
    }
}
