//! One-to-many matching: firms hire bundles of workers.
//!
//! A bundle `b ∈ ℕ^X` counts the workers of each type hired by one firm. With
//! transferable output `Φ_by`, the distance to the frontier is
//! `D_by(u, v) = (Σ_x b_x u_x + v_y − Φ_by)/(s_b + 1)` where `s_b = Σ_x b_x`.
//! Logit heterogeneity gives `μ_by = exp(−D_by)`, `μ_x0 = exp(−u_x)` and the
//! clearing system
//!
//! ```text
//! Σ_y Σ_b b_x exp(−D_by) + exp(−u_x) = n_x
//! Σ_b exp(−D_by) = m_y
//! ```
//!
//! The sums run over all of `ℕ^X`; here they are truncated to bundles of at
//! most `max_bundle_size` workers. The solver is experimental: no existence or
//! uniqueness result backs it, and failures are reported as values.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::equilibrium::logsumexp;
use crate::error::{ItuError, Result};
use crate::roots::{expand_bracket, newton_bisect, RootOptions};

/// Largest number of worker types accepted by the enumeration.
pub const MAX_WORKER_TYPES: usize = 4;
/// Largest bundle size accepted by the enumeration.
pub const MAX_BUNDLE_SIZE: usize = 6;
pub const DEFAULT_BUNDLE_SIZE: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Bundle {
    pub counts: Vec<u32>,
}

impl Bundle {
    pub fn size(&self) -> u32 {
        self.counts.iter().sum()
    }

    /// Table key, e.g. `b=[2,0,1]`.
    pub fn key(&self) -> String {
        let inner: Vec<String> = self.counts.iter().map(|c| c.to_string()).collect();
        format!("b=[{}]", inner.join(","))
    }

    pub fn parse(key: &str) -> Result<Bundle> {
        let bad = || ItuError::validation(format!("phi.{key}"), "bundle keys look like b=[2,0,1]");
        let inner = key
            .strip_prefix("b=[")
            .and_then(|s| s.strip_suffix(']'))
            .ok_or_else(bad)?;
        let counts = if inner.trim().is_empty() {
            Vec::new()
        } else {
            inner
                .split(',')
                .map(|c| c.trim().parse::<u32>().map_err(|_| bad()))
                .collect::<Result<Vec<u32>>>()?
        };
        Ok(Bundle { counts })
    }
}

/// Every bundle over `nx` worker types with at most `max_size` workers,
/// ordered by size and then lexicographically.
pub fn enumerate_bundles(nx: usize, max_size: usize) -> Vec<Bundle> {
    fn rec(prefix: &mut Vec<u32>, left: usize, remaining: u32, out: &mut Vec<Vec<u32>>) {
        if left == 0 {
            out.push(prefix.clone());
            return;
        }
        for c in 0..=remaining {
            prefix.push(c);
            rec(prefix, left - 1, remaining - c, out);
            prefix.pop();
        }
    }
    let mut all = Vec::new();
    rec(&mut Vec::new(), nx, max_size as u32, &mut all);
    let mut bundles: Vec<Bundle> = all.into_iter().map(|counts| Bundle { counts }).collect();
    bundles.sort_by_key(|b| (b.size(), b.counts.clone()));
    bundles
}

/// `D_by(u, v_y) = (Σ_x b_x u_x + v_y − Φ_by)/(s_b + 1)`.
pub fn distance_otm(phi_by: f64, b: &Bundle, u: &[f64], v_y: f64) -> f64 {
    let wage_bill: f64 = b
        .counts
        .iter()
        .zip(u)
        .filter(|(c, _)| **c > 0)
        .map(|(&c, &ux)| c as f64 * ux)
        .sum();
    (wage_bill + v_y - phi_by) / (b.size() as f64 + 1.0)
}

/// A one-to-many economy with a TU output table over the enumerated bundles.
#[derive(Debug, Clone, PartialEq)]
pub struct OtmEconomy {
    pub workers: Vec<String>,
    pub firms: Vec<String>,
    pub n: Vec<f64>,
    pub m: Vec<f64>,
    pub bundles: Vec<Bundle>,
    /// `phi[y][k]` is the output of firm type `y` with bundle `bundles[k]`.
    pub phi: Vec<Vec<f64>>,
    pub max_bundle_size: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WorkerEntry {
    pub label: String,
    pub n: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FirmEntry {
    pub label: String,
    pub m: f64,
}

/// On-disk schema: `phi` maps firm label → bundle key → output.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OtmFile {
    pub workers: Vec<WorkerEntry>,
    pub firms: Vec<FirmEntry>,
    pub phi: BTreeMap<String, BTreeMap<String, f64>>,
    #[serde(default)]
    pub max_bundle_size: Option<usize>,
}

impl OtmEconomy {
    /// Builds the economy, reading `Φ_by` from `phi(y, bundle)` for every
    /// enumerated bundle.
    pub fn new(
        n: Vec<f64>,
        m: Vec<f64>,
        max_bundle_size: usize,
        phi: impl Fn(usize, &Bundle) -> f64,
    ) -> Result<OtmEconomy> {
        check_limits(n.len(), max_bundle_size)?;
        let bundles = enumerate_bundles(n.len(), max_bundle_size);
        let table = (0..m.len())
            .map(|y| bundles.iter().map(|b| phi(y, b)).collect())
            .collect();
        let econ = OtmEconomy {
            workers: (1..=n.len()).map(|i| format!("x{i}")).collect(),
            firms: (1..=m.len()).map(|j| format!("y{j}")).collect(),
            n,
            m,
            bundles,
            phi: table,
            max_bundle_size,
        };
        econ.validate()?;
        Ok(econ)
    }

    /// Reads a file schema; `max_bundle_size` overrides the file value.
    pub fn from_file(file: &OtmFile, max_bundle_size: Option<usize>) -> Result<OtmEconomy> {
        let size = max_bundle_size.or(file.max_bundle_size).unwrap_or(DEFAULT_BUNDLE_SIZE);
        let nx = file.workers.len();
        check_limits(nx, size)?;
        let bundles = enumerate_bundles(nx, size);
        let mut phi = Vec::with_capacity(file.firms.len());
        for f in &file.firms {
            let row = file
                .phi
                .get(&f.label)
                .ok_or_else(|| ItuError::validation(format!("phi.{}", f.label), "missing output table for firm"))?;
            for key in row.keys() {
                let b = Bundle::parse(key).map_err(|e| e.within(&format!("phi.{}", f.label)))?;
                if b.counts.len() != nx {
                    return Err(ItuError::validation(
                        format!("phi.{}.{key}", f.label),
                        format!("bundle must have {nx} counts"),
                    ));
                }
            }
            let mut vals = Vec::with_capacity(bundles.len());
            for b in &bundles {
                let v = row.get(&b.key()).ok_or_else(|| {
                    ItuError::validation(format!("phi.{}.{}", f.label, b.key()), "missing output for bundle")
                })?;
                vals.push(*v);
            }
            phi.push(vals);
        }
        let econ = OtmEconomy {
            workers: file.workers.iter().map(|w| w.label.clone()).collect(),
            firms: file.firms.iter().map(|f| f.label.clone()).collect(),
            n: file.workers.iter().map(|w| w.n).collect(),
            m: file.firms.iter().map(|f| f.m).collect(),
            bundles,
            phi,
            max_bundle_size: size,
        };
        econ.validate()?;
        Ok(econ)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n.is_empty() || self.m.is_empty() {
            return Err(ItuError::validation(
                "workers",
                "at least one worker and one firm type are required",
            ));
        }
        for (i, &v) in self.n.iter().enumerate() {
            if !(v.is_finite() && v > 0.0) {
                return Err(ItuError::validation(
                    format!("workers[{i}].n"),
                    format!("must be finite and > 0, got {v}"),
                ));
            }
        }
        for (j, &v) in self.m.iter().enumerate() {
            if !(v.is_finite() && v > 0.0) {
                return Err(ItuError::validation(
                    format!("firms[{j}].m"),
                    format!("must be finite and > 0, got {v}"),
                ));
            }
        }
        for (y, row) in self.phi.iter().enumerate() {
            for (k, v) in row.iter().enumerate() {
                if !v.is_finite() {
                    return Err(ItuError::validation(
                        format!("phi.{}.{}", self.firms[y], self.bundles[k].key()),
                        "must be finite (use a large negative value for infeasible bundles)",
                    ));
                }
            }
        }
        Ok(())
    }

    /// `log μ_by = −D_by(u, v)`.
    fn log_mass(&self, y: usize, k: usize, u: &[f64], v_y: f64) -> f64 {
        -distance_otm(self.phi[y][k], &self.bundles[k], u, v_y)
    }
}

fn check_limits(nx: usize, size: usize) -> Result<()> {
    if nx > MAX_WORKER_TYPES {
        return Err(ItuError::validation(
            "workers",
            format!("bundle enumeration supports at most {MAX_WORKER_TYPES} worker types, got {nx}"),
        ));
    }
    if size > MAX_BUNDLE_SIZE {
        return Err(ItuError::validation(
            "max_bundle_size",
            format!("must be at most {MAX_BUNDLE_SIZE}, got {size}"),
        ));
    }
    Ok(())
}

/// Worker- and firm-side residuals of the truncated clearing system.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClearingResidual {
    pub workers: Vec<f64>,
    pub firms: Vec<f64>,
    /// Bundles entering the truncated sums.
    pub bundles_enumerated: usize,
    pub max_bundle_size: usize,
}

impl ClearingResidual {
    pub fn sup(&self) -> f64 {
        self.workers.iter().chain(&self.firms).fold(0.0, |a, b| a.max(b.abs()))
    }
}

pub fn clearing_residual(econ: &OtmEconomy, u: &[f64], v: &[f64]) -> ClearingResidual {
    let (nx, ny) = (econ.n.len(), econ.m.len());
    let mut workers: Vec<f64> = (0..nx).map(|x| (-u[x]).exp() - econ.n[x]).collect();
    let mut firms: Vec<f64> = (0..ny).map(|y| -econ.m[y]).collect();
    for y in 0..ny {
        for (k, b) in econ.bundles.iter().enumerate() {
            let mass = econ.log_mass(y, k, u, v[y]).exp();
            firms[y] += mass;
            for x in 0..nx {
                workers[x] += b.counts[x] as f64 * mass;
            }
        }
    }
    ClearingResidual {
        workers,
        firms,
        bundles_enumerated: econ.bundles.len(),
        max_bundle_size: econ.max_bundle_size,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum OtmOutcome {
    Converged {
        experimental: bool,
        u: Vec<f64>,
        v: Vec<f64>,
        /// `mu_by[y][k]` for bundle `bundles[k]`.
        mu_by: Vec<Vec<f64>>,
        mu_x0: Vec<f64>,
        bundles: Vec<String>,
        iterations: usize,
        residual: f64,
    },
    Failed {
        experimental: bool,
        reason: String,
        iterations: usize,
        history: Vec<f64>,
    },
}

impl OtmOutcome {
    pub fn is_converged(&self) -> bool {
        matches!(self, OtmOutcome::Converged { .. })
    }
}

/// Solves one strictly decreasing log-equation `log Σ_k w_k exp(ℓ_k(t)) = log total`
/// given terms `(log w_k + ℓ_k(t), dℓ_k/dt)`.
fn solve_coordinate<F>(total: f64, start: f64, terms: F) -> Result<f64>
where
    F: Fn(f64) -> Vec<(f64, f64)>,
{
    let lt = total.ln();
    let h = |t: f64| -> (f64, f64) {
        let parts = terms(t);
        let l = logsumexp(parts.iter().map(|p| p.0));
        let d = parts.iter().map(|&(lw, g)| (lw - l).exp() * g).sum::<f64>();
        (l - lt, d)
    };
    let h0 = h(start).0;
    if h0 == 0.0 {
        return Ok(start);
    }
    let step = if h0 > 0.0 { 1.0 } else { -1.0 };
    let (lo, hi) = expand_bracket(|t| h(t).0, start, step, 64)?;
    newton_bisect(h, lo, hi, RootOptions::default())
}

/// Best-effort Gauss–Seidel on the clearing system: each worker type's
/// equation is solved exactly in `u_x`, then each firm type's in `v_y`.
pub fn solve_experimental(econ: &OtmEconomy, tol: f64, max_iter: usize) -> Result<OtmOutcome> {
    econ.validate()?;
    if !(tol.is_finite() && tol > 0.0) {
        return Err(ItuError::validation("tol", "must be finite and > 0"));
    }
    let (nx, ny) = (econ.n.len(), econ.m.len());
    let mut u: Vec<f64> = econ.n.iter().map(|n| -n.ln()).collect();
    let mut v: Vec<f64> = econ.m.iter().map(|m| -m.ln()).collect();
    let mut history = Vec::new();
    for it in 1..=max_iter {
        for x in 0..nx {
            let solved = solve_coordinate(econ.n[x], u[x], |t| {
                let mut uu = u.clone();
                uu[x] = t;
                let mut parts = vec![(-t, -1.0)];
                for y in 0..ny {
                    for (k, b) in econ.bundles.iter().enumerate() {
                        let c = b.counts[x];
                        if c > 0 {
                            let s1 = b.size() as f64 + 1.0;
                            parts.push(((c as f64).ln() + econ.log_mass(y, k, &uu, v[y]), -(c as f64) / s1));
                        }
                    }
                }
                parts
            });
            match solved {
                Ok(t) => u[x] = t,
                Err(e) => return Ok(failed(format!("worker {}: {e}", econ.workers[x]), it, history)),
            }
        }
        for y in 0..ny {
            let solved = solve_coordinate(econ.m[y], v[y], |t| {
                econ.bundles
                    .iter()
                    .enumerate()
                    .map(|(k, b)| (econ.log_mass(y, k, &u, t), -1.0 / (b.size() as f64 + 1.0)))
                    .collect()
            });
            match solved {
                Ok(t) => v[y] = t,
                Err(e) => return Ok(failed(format!("firm {}: {e}", econ.firms[y]), it, history)),
            }
        }
        let res = clearing_residual(econ, &u, &v).sup();
        history.push(res);
        if !res.is_finite() {
            return Ok(failed("residual became non-finite".into(), it, history));
        }
        if res <= tol {
            let mu_by = (0..ny)
                .map(|y| {
                    (0..econ.bundles.len())
                        .map(|k| econ.log_mass(y, k, &u, v[y]).exp())
                        .collect()
                })
                .collect();
            return Ok(OtmOutcome::Converged {
                experimental: true,
                mu_x0: u.iter().map(|ux| (-ux).exp()).collect(),
                u,
                v,
                mu_by,
                bundles: econ.bundles.iter().map(|b| b.key()).collect(),
                iterations: it,
                residual: res,
            });
        }
    }
    Ok(failed(
        format!("no convergence within {max_iter} iterations"),
        max_iter,
        history,
    ))
}

fn failed(reason: String, iterations: usize, history: Vec<f64>) -> OtmOutcome {
    OtmOutcome::Failed {
        experimental: true,
        reason,
        iterations,
        history,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn enumeration_and_keys() {
        let bs = enumerate_bundles(2, 2);
        let keys: Vec<String> = bs.iter().map(|b| b.key()).collect();
        assert_eq!(keys, ["b=[0,0]", "b=[0,1]", "b=[1,0]", "b=[0,2]", "b=[1,1]", "b=[2,0]"]);
        assert_eq!(Bundle::parse("b=[2,0,1]").unwrap().counts, vec![2, 0, 1]);
        assert!(Bundle::parse("2,0,1").is_err());
    }

    #[test]
    fn distance_examples() {
        let empty = Bundle { counts: vec![0, 0] };
        assert_eq!(distance_otm(0.0, &empty, &[3.0, -1.0], 0.0), 0.0);
        let single = Bundle { counts: vec![0, 1] };
        assert_eq!(distance_otm(1.5, &single, &[9.0, 0.5], 2.0), (0.5 + 2.0 - 1.5) / 2.0);
        let b = Bundle { counts: vec![2, 1] };
        let (u, v) = ([0.3, -0.7], 0.2);
        let t = 1.7;
        let shifted = distance_otm(0.9, &b, &[u[0] + t, u[1] + t], v + t);
        assert_abs_diff_eq!(shifted, distance_otm(0.9, &b, &u, v) + t, epsilon = 1e-12);
    }

    #[test]
    fn zero_surplus_pins_workers() {
        let econ = OtmEconomy::new(vec![2.0], vec![1.0], 2, |_, b| if b.size() == 0 { 0.0 } else { -1e4 }).unwrap();
        let u = [-(2f64.ln())];
        let r = clearing_residual(&econ, &u, &[0.0]);
        assert_abs_diff_eq!(r.workers[0], 0.0, epsilon = 1e-12);
        let r = clearing_residual(&econ, &[0.0], &[0.0]);
        assert_abs_diff_eq!(r.workers[0], 1.0 - 2.0, epsilon = 1e-12);
    }

    #[test]
    fn solver_converges_on_size_one() {
        let econ = OtmEconomy::new(
            vec![1.0, 2.0],
            vec![1.5],
            1,
            |_, b| if b.size() == 0 { 0.0 } else { 0.5 },
        )
        .unwrap();
        let out = solve_experimental(&econ, 1e-12, 10_000).unwrap();
        assert!(out.is_converged(), "{out:?}");
    }

    #[test]
    fn missing_entry_is_validation_error() {
        let file = OtmFile {
            workers: vec![WorkerEntry {
                label: "w".into(),
                n: 1.0,
            }],
            firms: vec![FirmEntry {
                label: "f".into(),
                m: 1.0,
            }],
            phi: BTreeMap::from([("f".to_string(), BTreeMap::from([("b=[0]".to_string(), 0.0)]))]),
            max_bundle_size: Some(1),
        };
        match OtmEconomy::from_file(&file, None) {
            Err(ItuError::Validation { field, .. }) => assert_eq!(field, "phi.f.b=[1]"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
