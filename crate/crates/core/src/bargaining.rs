//! Bargaining sets described by their distance-to-frontier function.
//!
//! A proper bargaining set `F` is encoded by `D(u, v) = min { z : (u - z, v - z) ∈ F }`,
//! the signed diagonal distance from `(u, v)` to the Pareto frontier. `D ≤ 0`
//! exactly on the feasible set, `D` is isotone, and `D(u + a, v + a) = D(u, v) + a`.
//! Unions of sets become pointwise minima and intersections pointwise maxima,
//! which is how piecewise schedules and discrete public-good choices are built.

use serde::{Deserialize, Serialize};

use crate::error::{ItuError, Result};

/// One discrete public-good option: affinities and the income left for
/// private consumption once the good is bought.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PublicGoodOption {
    pub alpha: f64,
    pub gamma: f64,
    pub budget: f64,
}

/// Closed description of a pairwise bargaining technology.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type")]
pub enum DistanceSpec {
    /// Transferable utility: `u + v ≤ phi`.
    TU {
        phi: f64,
    },
    /// Non-transferable utility: `u ≤ alpha`, `v ≤ gamma`.
    NTU {
        alpha: f64,
        gamma: f64,
    },
    /// Linearly transferable utility: `lambda·u + zeta·v ≤ phi`.
    LTU {
        lambda: f64,
        zeta: f64,
        phi: f64,
    },
    /// Exponentially transferable utility:
    /// `exp((u - alpha)/tau) + exp((v - gamma)/tau) ≤ budget`.
    ETU {
        alpha: f64,
        gamma: f64,
        tau: f64,
        budget: f64,
    },
    /// Worker/firm pair whose gross wage is taxed on a convex schedule.
    /// `thresholds` holds `t¹ < … < tᴷ`, `rates` holds `τ⁰ < τ¹ < … < τᴷ`.
    TaxSchedule {
        alpha: f64,
        gamma: f64,
        thresholds: Vec<f64>,
        rates: Vec<f64>,
    },
    /// Finite menu of public goods, each an ETU set with common `tau`.
    PublicGoods {
        options: Vec<PublicGoodOption>,
        tau: f64,
    },
    Union {
        children: Vec<DistanceSpec>,
    },
    Intersection {
        children: Vec<DistanceSpec>,
    },
}

/// Range of wedges `w = u - v` on which the frontier is strictly downward sloping.
///
/// `upper` is the wedge at which the first partner's utility reaches its cap
/// (`+∞` when it never does), `lower` the wedge below which the second
/// partner's utility is capped. Wedge utilities are well defined for every
/// finite `w`; the bounds classify the frontier's flat pieces.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WedgeBounds {
    pub lower: f64,
    pub upper: f64,
}

impl WedgeBounds {
    pub const UNBOUNDED: WedgeBounds = WedgeBounds {
        lower: f64::NEG_INFINITY,
        upper: f64::INFINITY,
    };

    pub fn upper_finite(&self) -> bool {
        self.upper.is_finite()
    }

    pub fn lower_finite(&self) -> bool {
        self.lower.is_finite()
    }
}

#[inline]
fn logaddexp(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Softmax weight of `a` against `b`, computed without overflow.
#[inline]
fn weight(a: f64, b: f64) -> f64 {
    if a >= b {
        1.0 / (1.0 + (b - a).exp())
    } else {
        let e = (a - b).exp();
        e / (1.0 + e)
    }
}

#[inline]
fn etu(alpha: f64, gamma: f64, tau: f64, budget: f64, u: f64, v: f64) -> f64 {
    tau * (logaddexp((u - alpha) / tau, (v - gamma) / tau) - budget.ln())
}

#[inline]
fn etu_partials(alpha: f64, gamma: f64, tau: f64, u: f64, v: f64) -> (f64, f64) {
    let p = weight((u - alpha) / tau, (v - gamma) / tau);
    (p, 1.0 - p)
}

/// LTU pieces of a convex tax schedule: `(lambda, zeta, phi)` per bracket.
///
/// Bracket `k` covers gross wages in `[tᵏ, tᵏ⁺¹]` (with `t⁰ = 0`) where the
/// worker keeps `αᵏ + (1 - τᵏ)(w - tᵏ)` and `αᵏ⁺¹ = αᵏ + (1 - τᵏ)(tᵏ⁺¹ - tᵏ)`.
/// With the firm paying `w = γ - v`, the bracket is the LTU set
/// `u + (1 - τᵏ) v ≤ αᵏ - (1 - τᵏ) tᵏ + (1 - τᵏ) γ`.
pub fn tax_schedule_pieces(alpha: f64, gamma: f64, thresholds: &[f64], rates: &[f64]) -> Vec<(f64, f64, f64)> {
    let mut pieces = Vec::with_capacity(rates.len());
    let mut alpha_k = alpha;
    let mut t_k = 0.0;
    for (k, &rate) in rates.iter().enumerate() {
        if k > 0 {
            let t_next = thresholds[k - 1];
            alpha_k += (1.0 - rates[k - 1]) * (t_next - t_k);
            t_k = t_next;
        }
        let keep = 1.0 - rate;
        pieces.push((1.0, keep, alpha_k - keep * t_k + keep * gamma));
    }
    pieces
}

#[inline]
fn ltu(lambda: f64, zeta: f64, phi: f64, u: f64, v: f64) -> f64 {
    (lambda * u + zeta * v - phi) / (lambda + zeta)
}

fn positive(field: &str, x: f64) -> Result<()> {
    if x.is_finite() && x > 0.0 {
        Ok(())
    } else {
        Err(ItuError::validation(field, format!("must be finite and > 0, got {x}")))
    }
}

fn finite(field: &str, x: f64) -> Result<()> {
    if x.is_finite() {
        Ok(())
    } else {
        Err(ItuError::validation(field, format!("must be finite, got {x}")))
    }
}

impl DistanceSpec {
    /// Short tag matching the JSON `type` field.
    pub fn tag(&self) -> &'static str {
        match self {
            DistanceSpec::TU { .. } => "TU",
            DistanceSpec::NTU { .. } => "NTU",
            DistanceSpec::LTU { .. } => "LTU",
            DistanceSpec::ETU { .. } => "ETU",
            DistanceSpec::TaxSchedule { .. } => "TaxSchedule",
            DistanceSpec::PublicGoods { .. } => "PublicGoods",
            DistanceSpec::Union { .. } => "Union",
            DistanceSpec::Intersection { .. } => "Intersection",
        }
    }

    /// Checks the structural invariants. Errors name the offending field.
    pub fn validate(&self) -> Result<()> {
        match self {
            DistanceSpec::TU { phi } => finite("phi", *phi),
            DistanceSpec::NTU { alpha, gamma } => {
                finite("alpha", *alpha)?;
                finite("gamma", *gamma)
            }
            DistanceSpec::LTU { lambda, zeta, phi } => {
                positive("lambda", *lambda)?;
                positive("zeta", *zeta)?;
                finite("phi", *phi)
            }
            DistanceSpec::ETU {
                alpha,
                gamma,
                tau,
                budget,
            } => {
                finite("alpha", *alpha)?;
                finite("gamma", *gamma)?;
                positive("tau", *tau)?;
                positive("budget", *budget)
            }
            DistanceSpec::TaxSchedule {
                alpha,
                gamma,
                thresholds,
                rates,
            } => {
                finite("alpha", *alpha)?;
                finite("gamma", *gamma)?;
                if rates.len() != thresholds.len() + 1 {
                    return Err(ItuError::validation(
                        "rates",
                        format!(
                            "expected {} rates for {} thresholds, got {}",
                            thresholds.len() + 1,
                            thresholds.len(),
                            rates.len()
                        ),
                    ));
                }
                for (k, t) in thresholds.iter().enumerate() {
                    finite(&format!("thresholds[{k}]"), *t)?;
                    if k > 0 && !(thresholds[k - 1] < *t) {
                        return Err(ItuError::validation("thresholds", "must be strictly increasing"));
                    }
                }
                if let Some(t1) = thresholds.first() {
                    if !(*t1 > 0.0) {
                        return Err(ItuError::validation("thresholds[0]", "must be > 0"));
                    }
                }
                for (k, r) in rates.iter().enumerate() {
                    if !(r.is_finite() && *r >= 0.0 && *r < 1.0) {
                        return Err(ItuError::validation(
                            format!("rates[{k}]"),
                            format!("must lie in [0, 1), got {r}"),
                        ));
                    }
                    if k > 0 && !(rates[k - 1] < *r) {
                        return Err(ItuError::validation("rates", "must be strictly increasing"));
                    }
                }
                Ok(())
            }
            DistanceSpec::PublicGoods { options, tau } => {
                positive("tau", *tau)?;
                if options.is_empty() {
                    return Err(ItuError::validation("options", "must be nonempty"));
                }
                for (g, o) in options.iter().enumerate() {
                    let p = format!("options[{g}]");
                    finite(&format!("{p}.alpha"), o.alpha)?;
                    finite(&format!("{p}.gamma"), o.gamma)?;
                    positive(&format!("{p}.budget"), o.budget)?;
                }
                Ok(())
            }
            DistanceSpec::Union { children } | DistanceSpec::Intersection { children } => {
                if children.is_empty() {
                    return Err(ItuError::validation("children", "must be nonempty"));
                }
                for (k, c) in children.iter().enumerate() {
                    c.validate().map_err(|e| e.within(&format!("children[{k}]")))?;
                }
                Ok(())
            }
        }
    }

    /// `D(u, v)` after validating the spec and the arguments.
    pub fn evaluate(&self, u: f64, v: f64) -> Result<f64> {
        self.validate()?;
        if !u.is_finite() || !v.is_finite() {
            return Err(ItuError::domain(format!("non-finite utilities ({u}, {v})")));
        }
        Ok(self.eval(u, v))
    }

    /// `D(u, v)` on a spec already known to be valid.
    pub fn eval(&self, u: f64, v: f64) -> f64 {
        match self {
            DistanceSpec::TU { phi } => (u + v - phi) / 2.0,
            DistanceSpec::NTU { alpha, gamma } => (u - alpha).max(v - gamma),
            DistanceSpec::LTU { lambda, zeta, phi } => ltu(*lambda, *zeta, *phi, u, v),
            DistanceSpec::ETU {
                alpha,
                gamma,
                tau,
                budget,
            } => etu(*alpha, *gamma, *tau, *budget, u, v),
            DistanceSpec::TaxSchedule {
                alpha,
                gamma,
                thresholds,
                rates,
            } => tax_schedule_pieces(*alpha, *gamma, thresholds, rates)
                .into_iter()
                .map(|(l, z, p)| ltu(l, z, p, u, v))
                .fold(f64::NEG_INFINITY, f64::max),
            DistanceSpec::PublicGoods { options, tau } => options
                .iter()
                .map(|o| etu(o.alpha, o.gamma, *tau, o.budget, u, v))
                .fold(f64::INFINITY, f64::min),
            DistanceSpec::Union { children } => children.iter().map(|c| c.eval(u, v)).fold(f64::INFINITY, f64::min),
            DistanceSpec::Intersection { children } => {
                children.iter().map(|c| c.eval(u, v)).fold(f64::NEG_INFINITY, f64::max)
            }
        }
    }

    /// `(∂D/∂u, ∂D/∂v)` with validation.
    pub fn partials(&self, u: f64, v: f64) -> Result<(f64, f64)> {
        self.validate()?;
        if !u.is_finite() || !v.is_finite() {
            return Err(ItuError::domain(format!("non-finite utilities ({u}, {v})")));
        }
        Ok(self.grad(u, v))
    }

    /// Partial derivatives on a valid spec. At kinks of min/max variants the
    /// active branch is differentiated, ties going to the first branch.
    pub fn grad(&self, u: f64, v: f64) -> (f64, f64) {
        match self {
            DistanceSpec::TU { .. } => (0.5, 0.5),
            DistanceSpec::NTU { alpha, gamma } => {
                if u - alpha >= v - gamma {
                    (1.0, 0.0)
                } else {
                    (0.0, 1.0)
                }
            }
            DistanceSpec::LTU { lambda, zeta, .. } => {
                let s = lambda + zeta;
                (lambda / s, zeta / s)
            }
            DistanceSpec::ETU { alpha, gamma, tau, .. } => etu_partials(*alpha, *gamma, *tau, u, v),
            DistanceSpec::TaxSchedule {
                alpha,
                gamma,
                thresholds,
                rates,
            } => {
                let pieces = tax_schedule_pieces(*alpha, *gamma, thresholds, rates);
                let (l, z, _) = argbest(&pieces, |&(l, z, p)| ltu(l, z, p, u, v), true);
                (l / (l + z), z / (l + z))
            }
            DistanceSpec::PublicGoods { options, tau } => {
                let o = argbest(options, |o| etu(o.alpha, o.gamma, *tau, o.budget, u, v), false);
                etu_partials(o.alpha, o.gamma, *tau, u, v)
            }
            DistanceSpec::Union { children } => argbest(children, |c| c.eval(u, v), false).grad(u, v),
            DistanceSpec::Intersection { children } => argbest(children, |c| c.eval(u, v), true).grad(u, v),
        }
    }

    /// Whether `D` is smooth everywhere (no min/max branches).
    pub fn is_smooth(&self) -> bool {
        matches!(
            self,
            DistanceSpec::TU { .. } | DistanceSpec::LTU { .. } | DistanceSpec::ETU { .. }
        )
    }

    /// Whether any leaf of the spec is NTU, i.e. the frontier can have flat pieces.
    fn has_flat_pieces(&self) -> bool {
        match self {
            DistanceSpec::NTU { .. } => true,
            DistanceSpec::Union { children } | DistanceSpec::Intersection { children } => {
                children.iter().any(|c| c.has_flat_pieces())
            }
            _ => false,
        }
    }

    /// Frontier point with wedge `w`: `U(w) = -D(0, -w)`, `V(w) = U(w) - w`.
    pub fn wedge_utilities(&self, w: f64) -> Result<(f64, f64)> {
        self.validate()?;
        if !w.is_finite() {
            return Err(ItuError::domain(format!("wedge must be finite, got {w}")));
        }
        Ok(self.wedge_uv(w))
    }

    /// Unchecked [`wedge_utilities`](Self::wedge_utilities).
    pub fn wedge_uv(&self, w: f64) -> (f64, f64) {
        let u = -self.eval(0.0, -w);
        (u, u - w)
    }

    /// Derivative of `U(w)`; `V'(w) = U'(w) - 1`.
    pub fn wedge_slope(&self, w: f64) -> f64 {
        self.grad(0.0, -w).1
    }

    /// Locates the flat pieces of the frontier on the geometric grid `±2^k`,
    /// `k = 0..=60`, refining detected kinks by bisection.
    pub fn wedge_bounds(&self) -> Result<WedgeBounds> {
        self.validate()?;
        if !self.has_flat_pieces() {
            return Ok(WedgeBounds::UNBOUNDED);
        }
        const FLAT: f64 = 1e-12;
        let mut grid: Vec<f64> = (0..=60).rev().map(|k| -(2f64.powi(k))).collect();
        grid.extend((0..=60).map(|k| 2f64.powi(k)));
        let u_of = |w: f64| -self.eval(0.0, -w);
        let v_of = |w: f64| -self.eval(w, 0.0);

        // U flat from some grid point onwards: upper bound
        let mut upper = f64::INFINITY;
        let top = u_of(*grid.last().unwrap());
        if (top - u_of(grid[grid.len() - 2])).abs() < FLAT {
            let first_flat = grid.iter().position(|&w| (top - u_of(w)).abs() < FLAT).unwrap();
            let mut hi = grid[first_flat];
            let mut lo = if first_flat == 0 {
                hi - 1.0
            } else {
                grid[first_flat - 1]
            };
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if mid <= lo || mid >= hi {
                    break;
                }
                if (top - u_of(mid)).abs() < FLAT {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            upper = hi;
        }

        // V flat for all sufficiently negative wedges: lower bound
        let mut lower = f64::NEG_INFINITY;
        let bottom = v_of(grid[0]);
        if (bottom - v_of(grid[1])).abs() < FLAT {
            let last_flat = grid.iter().rposition(|&w| (bottom - v_of(w)).abs() < FLAT).unwrap();
            let mut lo = grid[last_flat];
            let mut hi = if last_flat + 1 == grid.len() {
                lo + 1.0
            } else {
                grid[last_flat + 1]
            };
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if mid <= lo || mid >= hi {
                    break;
                }
                if (bottom - v_of(mid)).abs() < FLAT {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            lower = lo;
        }
        Ok(WedgeBounds { lower, upper })
    }

    /// Intersection of LTU children equivalent to a tax schedule.
    pub fn tax_schedule_as_intersection(&self) -> Option<DistanceSpec> {
        match self {
            DistanceSpec::TaxSchedule {
                alpha,
                gamma,
                thresholds,
                rates,
            } => Some(DistanceSpec::Intersection {
                children: tax_schedule_pieces(*alpha, *gamma, thresholds, rates)
                    .into_iter()
                    .map(|(lambda, zeta, phi)| DistanceSpec::LTU { lambda, zeta, phi })
                    .collect(),
            }),
            _ => None,
        }
    }

    /// Union of ETU children equivalent to a public-goods menu.
    pub fn public_goods_as_union(&self) -> Option<DistanceSpec> {
        match self {
            DistanceSpec::PublicGoods { options, tau } => Some(DistanceSpec::Union {
                children: options
                    .iter()
                    .map(|o| DistanceSpec::ETU {
                        alpha: o.alpha,
                        gamma: o.gamma,
                        tau: *tau,
                        budget: o.budget,
                    })
                    .collect(),
            }),
            _ => None,
        }
    }
}

/// First element minimizing (or maximizing) `key`.
fn argbest<T, F: Fn(&T) -> f64>(items: &[T], key: F, maximize: bool) -> &T {
    let mut best = &items[0];
    let mut best_val = key(best);
    for it in &items[1..] {
        let val = key(it);
        if (maximize && val > best_val) || (!maximize && val < best_val) {
            best = it;
            best_val = val;
        }
    }
    best
}
