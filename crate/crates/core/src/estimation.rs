//! Maximum-likelihood estimation of parametric logit matching models.
//!
//! Each pair `(x, y)` carries a smooth template (TU, LTU or ETU) whose numeric
//! fields are affine in `λ ∈ ℝ^K`. With `θ = (λ, u, v)` the household
//! probabilities are
//!
//! ```text
//! π_xy = e^{−D_xy(λ, u_x, v_y)}/N,   π_x0 = e^{−u_x}/N,   π_0y = e^{−v_y}/N,
//! ```
//!
//! `N` being the sum of the numerators, and the per-household log-likelihood is
//! `ℓ = −(Σ π̂_xy D_xy + Σ π̂_x0 u_x + Σ π̂_0y v_y + ln N)`.
//!
//! Writing `D_x0 = u_x` and `D_0y = v_y`, the score is `∇ℓ = E_π[∇D] − E_π̂[∇D]`
//! and the Fisher information is `Σ_a π_a s_a s_aᵀ` with
//! `s_a = −∇D_a + E_π[∇D]`.
//!
//! Translation invariance of every distance function makes `(0, 1, 1)` a flat
//! direction of `ℓ`: `θ` is identified only up to a common shift of `u` and `v`
//! (more if the basis is collinear with such shifts). The information matrix is
//! therefore inverted on its range and the null space is reported.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution};
use serde::{Deserialize, Serialize};

use crate::bargaining::DistanceSpec;
use crate::equilibrium::logsumexp;
use crate::error::{ItuError, Result};
use crate::par::{self, Exec};

/// Eigenvalues of the information matrix below this fraction of the largest
/// one are treated as zero.
pub const FLAT_CUTOFF: f64 = 1e-10;

/// `constant + Σ_k coef_k λ_k`. Deserializes from a bare number as well.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "AffineRepr")]
pub struct Affine {
    pub constant: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub coef: Vec<f64>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum AffineRepr {
    Constant(f64),
    Full {
        #[serde(default)]
        constant: f64,
        #[serde(default)]
        coef: Vec<f64>,
    },
}

impl From<AffineRepr> for Affine {
    fn from(r: AffineRepr) -> Self {
        match r {
            AffineRepr::Constant(constant) => Affine { constant, coef: vec![] },
            AffineRepr::Full { constant, coef } => Affine { constant, coef },
        }
    }
}

impl Affine {
    pub fn constant(c: f64) -> Self {
        Affine {
            constant: c,
            coef: vec![],
        }
    }

    pub fn linear(coef: Vec<f64>) -> Self {
        Affine { constant: 0.0, coef }
    }

    pub fn at(&self, lambda: &[f64]) -> f64 {
        self.constant + self.coef.iter().zip(lambda).map(|(c, l)| c * l).sum::<f64>()
    }

    fn coef_k(&self, k: usize) -> f64 {
        self.coef.get(k).copied().unwrap_or(0.0)
    }

    fn validate(&self, k: usize, field: &str) -> Result<()> {
        if !self.constant.is_finite() || self.coef.iter().any(|c| !c.is_finite()) {
            return Err(ItuError::validation(field, "coefficients must be finite"));
        }
        if !self.coef.is_empty() && self.coef.len() != k {
            return Err(ItuError::validation(
                field,
                format!("expected {k} coefficients, got {}", self.coef.len()),
            ));
        }
        Ok(())
    }
}

/// A smooth distance-function family with affine numeric fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", deny_unknown_fields)]
pub enum Template {
    TU {
        phi: Affine,
    },
    LTU {
        lambda: Affine,
        zeta: Affine,
        phi: Affine,
    },
    ETU {
        alpha: Affine,
        gamma: Affine,
        tau: Affine,
        budget: Affine,
    },
}

impl Template {
    fn fields(&self) -> Vec<(&'static str, &Affine)> {
        match self {
            Template::TU { phi } => vec![("phi", phi)],
            Template::LTU { lambda, zeta, phi } => vec![("lambda", lambda), ("zeta", zeta), ("phi", phi)],
            Template::ETU {
                alpha,
                gamma,
                tau,
                budget,
            } => vec![("alpha", alpha), ("gamma", gamma), ("tau", tau), ("budget", budget)],
        }
    }

    /// The distance function at parameter `λ`.
    pub fn at(&self, lambda: &[f64]) -> DistanceSpec {
        match self {
            Template::TU { phi } => DistanceSpec::TU { phi: phi.at(lambda) },
            Template::LTU { lambda: l, zeta, phi } => DistanceSpec::LTU {
                lambda: l.at(lambda),
                zeta: zeta.at(lambda),
                phi: phi.at(lambda),
            },
            Template::ETU {
                alpha,
                gamma,
                tau,
                budget,
            } => DistanceSpec::ETU {
                alpha: alpha.at(lambda),
                gamma: gamma.at(lambda),
                tau: tau.at(lambda),
                budget: budget.at(lambda),
            },
        }
    }

    /// `D`, `∂D/∂λ`, `∂D/∂u`, `∂D/∂v` on a spec already validated at `λ`.
    fn eval_with_grad(&self, spec: &DistanceSpec, k: usize, u: f64, v: f64) -> (f64, Vec<f64>, f64, f64) {
        let d = spec.eval(u, v);
        let (du, dv) = spec.grad(u, v);
        // derivative of D with respect to each numeric field, in `fields()` order
        let dfield: Vec<f64> = match spec {
            DistanceSpec::TU { .. } => vec![-0.5],
            DistanceSpec::LTU { lambda, zeta, .. } => {
                let s = lambda + zeta;
                vec![(u - d) / s, (v - d) / s, -1.0 / s]
            }
            DistanceSpec::ETU {
                alpha,
                gamma,
                tau,
                budget,
            } => vec![-du, -dv, (d - du * (u - alpha) - dv * (v - gamma)) / tau, -tau / budget],
            _ => unreachable!("templates only produce smooth variants"),
        };
        let fields = self.fields();
        let dl = (0..k)
            .map(|j| fields.iter().zip(&dfield).map(|((_, a), g)| a.coef_k(j) * g).sum())
            .collect();
        (d, dl, du, dv)
    }
}

/// Parametric family over `|X| × |Y|` pairs (row-major cells).
#[derive(Debug, Clone, PartialEq)]
pub struct ParametricModel {
    pub men: Vec<String>,
    pub women: Vec<String>,
    pub num_params: usize,
    pub cells: Vec<Template>,
}

/// On-disk model schema. Exactly one of `tu_basis` (a `K × X × Y` array with
/// `Φ_xy = Σ_k λ_k φ_kxy`) or `cells` (templates keyed `"x|y"`) must be given.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub men: Vec<String>,
    pub women: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_params: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tu_basis: Option<Vec<Vec<Vec<f64>>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cells: Option<BTreeMap<String, serde_json::Value>>,
}

impl ParametricModel {
    /// TU family `Φ_xy = Σ_k λ_k φ_kxy` from `K` basis matrices.
    pub fn tu_linear(basis: &[DMatrix<f64>]) -> Result<ParametricModel> {
        let k = basis.len();
        let (nx, ny) = basis
            .first()
            .map(|b| b.shape())
            .ok_or_else(|| ItuError::validation("tu_basis", "at least one basis matrix is required"))?;
        if basis.iter().any(|b| b.shape() != (nx, ny)) {
            return Err(ItuError::validation("tu_basis", "basis matrices must share one shape"));
        }
        let cells = (0..nx * ny)
            .map(|c| Template::TU {
                phi: Affine::linear(basis.iter().map(|b| b[(c / ny, c % ny)]).collect()),
            })
            .collect();
        let model = ParametricModel {
            men: (1..=nx).map(|i| format!("x{i}")).collect(),
            women: (1..=ny).map(|j| format!("y{j}")).collect(),
            num_params: k,
            cells,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn from_file(file: &ModelFile) -> Result<ParametricModel> {
        let (nx, ny) = (file.men.len(), file.women.len());
        let model = match (&file.tu_basis, &file.cells) {
            (Some(basis), None) => {
                let mats = basis
                    .iter()
                    .enumerate()
                    .map(|(k, rows)| {
                        crate::io::nested::from_rows(rows)
                            .map_err(|e| ItuError::validation(format!("tu_basis[{k}]"), e))
                    })
                    .collect::<Result<Vec<_>>>()?;
                if mats.iter().any(|m| m.shape() != (nx, ny)) {
                    return Err(ItuError::validation(
                        "tu_basis",
                        format!("each basis must be {nx}×{ny}"),
                    ));
                }
                let mut m = ParametricModel::tu_linear(&mats)?;
                m.men = file.men.clone();
                m.women = file.women.clone();
                if file.num_params.is_some_and(|k| k != m.num_params) {
                    return Err(ItuError::validation("num_params", "does not match the basis length"));
                }
                m
            }
            (None, Some(cells)) => {
                let k = file
                    .num_params
                    .ok_or_else(|| ItuError::validation("num_params", "required with `cells`"))?;
                let mut out = Vec::with_capacity(nx * ny);
                for x in &file.men {
                    for y in &file.women {
                        let key = format!("{x}|{y}");
                        let field = format!("cells.{key}");
                        let raw = cells
                            .get(&key)
                            .ok_or_else(|| ItuError::validation(&field, "missing template for pair"))?;
                        let tag = raw.get("type").and_then(|t| t.as_str()).unwrap_or("");
                        if !matches!(tag, "TU" | "LTU" | "ETU") {
                            return Err(ItuError::validation(
                                format!("{field}.type"),
                                format!("estimation needs a twice-differentiable family (TU, LTU or ETU), got `{tag}`"),
                            ));
                        }
                        let t: Template = serde_json::from_value(raw.clone())
                            .map_err(|e| ItuError::validation(&field, e.to_string()))?;
                        out.push(t);
                    }
                }
                if cells.len() != nx * ny {
                    return Err(ItuError::validation(
                        "cells",
                        "contains keys that are not men|women pairs",
                    ));
                }
                ParametricModel {
                    men: file.men.clone(),
                    women: file.women.clone(),
                    num_params: k,
                    cells: out,
                }
            }
            _ => {
                return Err(ItuError::validation(
                    "model",
                    "give exactly one of `tu_basis` or `cells`",
                ));
            }
        };
        model.validate()?;
        Ok(model)
    }

    pub fn nx(&self) -> usize {
        self.men.len()
    }

    pub fn ny(&self) -> usize {
        self.women.len()
    }

    /// Length of `θ = (λ, u, v)`.
    pub fn dim(&self) -> usize {
        self.num_params + self.nx() + self.ny()
    }

    pub fn validate(&self) -> Result<()> {
        if self.men.is_empty() || self.women.is_empty() {
            return Err(ItuError::validation("men", "at least one type per side is required"));
        }
        if self.cells.len() != self.nx() * self.ny() {
            return Err(ItuError::validation("cells", "one template per pair is required"));
        }
        for (c, t) in self.cells.iter().enumerate() {
            let key = format!("cells.{}|{}", self.men[c / self.ny()], self.women[c % self.ny()]);
            for (name, a) in t.fields() {
                a.validate(self.num_params, &format!("{key}.{name}"))?;
            }
        }
        Ok(())
    }

    /// Splits `θ` into `(λ, u, v)`.
    pub fn split<'a>(&self, theta: &'a [f64]) -> (&'a [f64], &'a [f64], &'a [f64]) {
        let (l, rest) = theta.split_at(self.num_params);
        let (u, v) = rest.split_at(self.nx());
        (l, u, v)
    }

    pub fn join(lambda: &[f64], u: &[f64], v: &[f64]) -> DVector<f64> {
        DVector::from_iterator(
            lambda.len() + u.len() + v.len(),
            lambda.iter().chain(u).chain(v).copied(),
        )
    }

    /// Distance functions at parameter `λ`, validated.
    pub fn specs(&self, lambda: &[f64]) -> Result<Vec<DistanceSpec>> {
        self.cells
            .iter()
            .enumerate()
            .map(|(c, t)| {
                let s = t.at(lambda);
                s.validate().map_err(|e| {
                    e.within(&format!(
                        "cells.{}|{}",
                        self.men[c / self.ny()],
                        self.women[c % self.ny()]
                    ))
                })?;
                Ok(s)
            })
            .collect()
    }

    /// Per-household-type `D_a` and `∇_θ D_a`, in the order couples
    /// (row-major), single men, single women.
    fn distances(&self, theta: &[f64]) -> Result<(Vec<f64>, Vec<Vec<(usize, f64)>>)> {
        if theta.len() != self.dim() {
            return Err(ItuError::validation(
                "theta",
                format!("expected length {}, got {}", self.dim(), theta.len()),
            ));
        }
        if theta.iter().any(|t| !t.is_finite()) {
            return Err(ItuError::domain("non-finite parameter vector"));
        }
        let (lambda, u, v) = self.split(theta);
        let (k, nx, ny) = (self.num_params, self.nx(), self.ny());
        let specs = self.specs(lambda)?;
        let mut d = Vec::with_capacity(nx * ny + nx + ny);
        let mut g = Vec::with_capacity(d.capacity());
        for (c, (t, s)) in self.cells.iter().zip(&specs).enumerate() {
            let (x, y) = (c / ny, c % ny);
            let (dv, dl, du, dvv) = t.eval_with_grad(s, k, u[x], v[y]);
            if !dv.is_finite() {
                return Err(ItuError::domain(format!("non-finite distance at pair {c}")));
            }
            d.push(dv);
            let mut sparse: Vec<(usize, f64)> = dl.into_iter().enumerate().filter(|(_, g)| *g != 0.0).collect();
            sparse.push((k + x, du));
            sparse.push((k + nx + y, dvv));
            g.push(sparse);
        }
        for x in 0..nx {
            d.push(u[x]);
            g.push(vec![(k + x, 1.0)]);
        }
        for y in 0..ny {
            d.push(v[y]);
            g.push(vec![(k + nx + y, 1.0)]);
        }
        Ok((d, g))
    }

    /// Model-implied household probabilities at `θ`.
    pub fn probabilities(&self, theta: &[f64]) -> Result<ObservedSample> {
        let (d, _) = self.distances(theta)?;
        let p = softmax_neg(&d);
        Ok(ObservedSample::from_flat(self.nx(), self.ny(), &p, f64::INFINITY))
    }
}

/// `π_a ∝ e^{−D_a}` and `ln N`.
fn softmax_neg(d: &[f64]) -> Vec<f64> {
    let ln_n = logsumexp(d.iter().map(|x| -x));
    d.iter().map(|x| (-x - ln_n).exp()).collect()
}

/// Empirical household frequencies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservedSample {
    #[serde(with = "crate::io::nested")]
    pub pi_xy: DMatrix<f64>,
    #[serde(with = "crate::io::flat")]
    pub pi_x0: DVector<f64>,
    #[serde(with = "crate::io::flat")]
    pub pi_0y: DVector<f64>,
    /// Sample size; `inf` marks a population (model-implied) distribution.
    #[serde(rename = "N_hat")]
    pub n_hat: f64,
}

impl ObservedSample {
    fn from_flat(nx: usize, ny: usize, p: &[f64], n_hat: f64) -> ObservedSample {
        ObservedSample {
            pi_xy: DMatrix::from_fn(nx, ny, |x, y| p[x * ny + y]),
            pi_x0: DVector::from_fn(nx, |x, _| p[nx * ny + x]),
            pi_0y: DVector::from_fn(ny, |y, _| p[nx * ny + nx + y]),
            n_hat,
        }
    }

    /// Frequencies from household counts.
    pub fn from_counts(mu: &DMatrix<f64>, mu_x0: &DVector<f64>, mu_0y: &DVector<f64>) -> Result<ObservedSample> {
        let total = mu.sum() + mu_x0.sum() + mu_0y.sum();
        if !(total.is_finite() && total > 0.0) {
            return Err(ItuError::validation("count", "total count must be positive"));
        }
        let s = ObservedSample {
            pi_xy: mu / total,
            pi_x0: mu_x0 / total,
            pi_0y: mu_0y / total,
            n_hat: total,
        };
        s.validate()?;
        Ok(s)
    }

    /// Flat view in household order (couples row-major, single men, single women).
    pub fn flat(&self) -> Vec<f64> {
        let mut out: Vec<f64> = self.pi_xy.transpose().iter().copied().collect();
        out.extend(self.pi_x0.iter());
        out.extend(self.pi_0y.iter());
        out
    }

    pub fn validate(&self) -> Result<()> {
        let flat = self.flat();
        if flat.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(ItuError::validation("pi", "frequencies must be finite and nonnegative"));
        }
        let total: f64 = flat.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(ItuError::validation(
                "pi",
                format!("frequencies must sum to 1, got {total}"),
            ));
        }
        if !(self.n_hat >= 1.0) {
            return Err(ItuError::validation("N_hat", "sample size must be at least 1"));
        }
        Ok(())
    }

    fn check_shape(&self, model: &ParametricModel) -> Result<()> {
        if self.pi_xy.shape() != (model.nx(), model.ny()) {
            return Err(ItuError::validation("pi_xy", "shape does not match the model"));
        }
        Ok(())
    }
}

/// Per-household log-likelihood `ℓ(θ)`.
pub fn log_likelihood(model: &ParametricModel, theta: &[f64], sample: &ObservedSample) -> Result<f64> {
    sample.check_shape(model)?;
    let (d, _) = model.distances(theta)?;
    let ln_n = logsumexp(d.iter().map(|x| -x));
    let weighted: f64 = sample
        .flat()
        .iter()
        .zip(&d)
        .filter(|(p, _)| **p > 0.0)
        .map(|(p, x)| p * x)
        .sum();
    Ok(-(weighted + ln_n))
}

/// `ℓ` and its analytic gradient.
fn value_and_score(model: &ParametricModel, theta: &[f64], sample: &ObservedSample) -> Result<(f64, DVector<f64>)> {
    sample.check_shape(model)?;
    let (d, g) = model.distances(theta)?;
    let pi = softmax_neg(&d);
    let ln_n = logsumexp(d.iter().map(|x| -x));
    let hat = sample.flat();
    let mut value = ln_n;
    let mut score = DVector::zeros(model.dim());
    for a in 0..d.len() {
        if hat[a] > 0.0 {
            value += hat[a] * d[a];
        }
        for &(i, gi) in &g[a] {
            score[i] += (pi[a] - hat[a]) * gi;
        }
    }
    Ok((-value, score))
}

/// Analytic gradient of [`log_likelihood`] with respect to `θ = (λ, u, v)`.
pub fn score(model: &ParametricModel, theta: &[f64], sample: &ObservedSample) -> Result<DVector<f64>> {
    value_and_score(model, theta, sample).map(|(_, s)| s)
}

/// `ℐ(θ) = Σ_a π_a(θ) s_a s_aᵀ`, computed exactly over all household types.
pub fn fisher_information(model: &ParametricModel, theta: &[f64]) -> Result<DMatrix<f64>> {
    let (d, g) = model.distances(theta)?;
    let pi = softmax_neg(&d);
    let p = model.dim();
    let mut mean = DVector::zeros(p);
    for a in 0..d.len() {
        for &(i, gi) in &g[a] {
            mean[i] += pi[a] * gi;
        }
    }
    let mut info = DMatrix::zeros(p, p);
    for a in 0..d.len() {
        let mut s = mean.clone();
        for &(i, gi) in &g[a] {
            s[i] -= gi;
        }
        info.ger(pi[a], &s, &s, 1.0);
    }
    Ok((&info + info.transpose()) * 0.5)
}

/// Range inverse of a symmetric PSD matrix and the eigenvectors spanning its
/// (numerical) null space.
pub fn pseudo_inverse(m: &DMatrix<f64>) -> (DMatrix<f64>, Vec<DVector<f64>>) {
    let eig = m.clone().symmetric_eigen();
    let top = eig.eigenvalues.iter().fold(0.0f64, |a, b| a.max(b.abs()));
    let n = m.nrows();
    let mut inv = DMatrix::zeros(n, n);
    let mut null = Vec::new();
    for (i, &ev) in eig.eigenvalues.iter().enumerate() {
        let vec = eig.eigenvectors.column(i).into_owned();
        if ev > FLAT_CUTOFF * top && top > 0.0 {
            inv.ger(1.0 / ev, &vec, &vec, 1.0);
        } else {
            // fix the sign so reports are deterministic
            let pivot = vec
                .iter()
                .copied()
                .fold(0.0f64, |a, b| if b.abs() > a.abs() { b } else { a });
            null.push(if pivot < 0.0 { -vec } else { vec });
        }
    }
    ((&inv + inv.transpose()) * 0.5, null)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    /// Stop when the sup-norm of the score is at most this.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            tol: 1e-6,
            max_iter: 2000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub lambda: Vec<f64>,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    /// `θ̂ = (λ̂, û, v̂)`.
    pub theta: Vec<f64>,
    pub loglik: f64,
    pub score_sup: f64,
    /// `ℐ(θ̂)⁺ / N̂` (range inverse when `ℐ` is singular).
    #[serde(with = "crate::io::nested")]
    pub variance: DMatrix<f64>,
    pub standard_errors: Vec<f64>,
    /// Unit directions along which the likelihood is (numerically) flat.
    pub flat_directions: Vec<Vec<f64>>,
    pub iterations: usize,
    /// Score sup-norm after each iteration.
    pub trace: Vec<f64>,
}

impl FitResult {
    /// Two-sided 95% Wald interval for `λ_k`.
    pub fn wald_interval(&self, k: usize) -> (f64, f64) {
        let h = 1.959963984540054 * self.standard_errors[k];
        (self.lambda[k] - h, self.lambda[k] + h)
    }
}

/// Default starting point: `λ = 0`, `u_x = −ln π̂_x0`, `v_y = −ln π̂_0y`
/// (empty cells are floored at half an observation).
pub fn default_init(model: &ParametricModel, sample: &ObservedSample) -> DVector<f64> {
    let floor = if sample.n_hat.is_finite() {
        0.5 / sample.n_hat
    } else {
        1e-12
    };
    let u: Vec<f64> = sample.pi_x0.iter().map(|p| -p.max(floor).ln()).collect();
    let v: Vec<f64> = sample.pi_0y.iter().map(|p| -p.max(floor).ln()).collect();
    ParametricModel::join(&vec![0.0; model.num_params], &u, &v)
}

/// Joint maximum likelihood over `θ` by BFGS with a backtracking line search.
pub fn fit_mle(
    model: &ParametricModel,
    sample: &ObservedSample,
    init: Option<&DVector<f64>>,
    opts: FitOptions,
) -> Result<FitResult> {
    model.validate()?;
    sample.validate()?;
    sample.check_shape(model)?;
    if !(opts.tol.is_finite() && opts.tol > 0.0) || opts.max_iter == 0 {
        return Err(ItuError::validation("tol", "needs tol > 0 and max_iter ≥ 1"));
    }
    let mut theta = match init {
        Some(t) => t.clone(),
        None => default_init(model, sample),
    };
    let p = model.dim();
    // minimize f = −ℓ
    let eval = |t: &DVector<f64>| value_and_score(model, t.as_slice(), sample).map(|(l, s)| (-l, -s));
    let (mut f, mut g) = eval(&theta).map_err(|e| e.within("init"))?;
    let mut h_inv = DMatrix::<f64>::identity(p, p);
    let mut trace = Vec::new();
    let mut iterations = 0;
    while g.amax() > opts.tol {
        if iterations == opts.max_iter {
            return Err(ItuError::Optimization {
                message: format!("score sup-norm {:e} after {} iterations", g.amax(), iterations),
                trace,
            });
        }
        iterations += 1;
        let mut dir = -(&h_inv * &g);
        if dir.dot(&g) >= 0.0 {
            h_inv = DMatrix::identity(p, p);
            dir = -g.clone();
        }
        let slope = dir.dot(&g);
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..80 {
            let cand = &theta + &dir * step;
            if let Ok((fc, gc)) = eval(&cand) {
                let armijo = fc <= f + 1e-4 * step * slope;
                // near the optimum f differences drown in rounding; accept
                // steps that stay level and reduce the gradient
                let level = (fc - f).abs() <= 1e-14 * (1.0 + f.abs()) && gc.amax() < g.amax();
                if fc.is_finite() && (armijo || level) {
                    accepted = Some((cand, fc, gc));
                    break;
                }
            }
            step *= 0.5;
        }
        let Some((cand, fc, gc)) = accepted else {
            if h_inv != DMatrix::identity(p, p) {
                h_inv = DMatrix::identity(p, p);
                trace.push(g.amax());
                continue;
            }
            return Err(ItuError::Optimization {
                message: format!("line search failed with score sup-norm {:e}", g.amax()),
                trace,
            });
        };
        let s = &cand - &theta;
        let y = &gc - &g;
        let sy = s.dot(&y);
        if sy > 1e-14 * s.norm() * y.norm() {
            let rho = 1.0 / sy;
            let hy = &h_inv * &y;
            let yhy = y.dot(&hy);
            // BFGS inverse update: H ← H − ρ(s yᵀH + H y sᵀ) + (ρ² yᵀHy + ρ) s sᵀ
            h_inv.ger(-rho, &s, &hy, 1.0);
            h_inv.ger(-rho, &hy, &s, 1.0);
            h_inv.ger(rho * rho * yhy + rho, &s, &s, 1.0);
        }
        theta = cand;
        f = fc;
        g = gc;
        trace.push(g.amax());
        if trace.len() > 1000 {
            trace.remove(0);
        }
    }
    let info = fisher_information(model, theta.as_slice())?;
    let (inv, null) = pseudo_inverse(&info);
    let n_hat = sample.n_hat;
    let variance = if n_hat.is_finite() { inv / n_hat } else { inv * 0.0 };
    let (lambda, u, v) = model.split(theta.as_slice());
    Ok(FitResult {
        lambda: lambda.to_vec(),
        u: u.to_vec(),
        v: v.to_vec(),
        standard_errors: variance.diagonal().iter().map(|d| d.max(0.0).sqrt()).collect(),
        theta: theta.as_slice().to_vec(),
        loglik: -f,
        score_sup: g.amax(),
        variance,
        flat_directions: null.into_iter().map(|d| d.as_slice().to_vec()).collect(),
        iterations,
        trace,
    })
}

/// Draws `N̂` i.i.d. households from `π(θ)` (multinomial via sequential
/// binomials), deterministically in `seed`.
pub fn sample_synthetic(model: &ParametricModel, theta: &[f64], n_hat: u64, seed: u64) -> Result<ObservedSample> {
    if n_hat == 0 {
        return Err(ItuError::validation("N_hat", "sample size must be at least 1"));
    }
    let probs = model.probabilities(theta)?.flat();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut remaining = n_hat;
    let mut mass = 1.0;
    let mut counts = vec![0u64; probs.len()];
    for (a, &p) in probs.iter().enumerate() {
        if remaining == 0 {
            break;
        }
        let q = if a + 1 == probs.len() {
            1.0
        } else {
            (p / mass).clamp(0.0, 1.0)
        };
        let draw = Binomial::new(remaining, q)
            .map_err(|e| ItuError::domain(format!("binomial draw: {e}")))?
            .sample(&mut rng);
        counts[a] = draw;
        remaining -= draw;
        mass -= p;
    }
    let n = n_hat as f64;
    let freqs: Vec<f64> = counts.iter().map(|&c| c as f64 / n).collect();
    Ok(ObservedSample::from_flat(model.nx(), model.ny(), &freqs, n))
}

/// Fits `reps` independent synthetic samples drawn at `theta` with seeds
/// `seed, seed + 1, …`, in parallel when enabled.
pub fn monte_carlo(
    model: &ParametricModel,
    theta: &[f64],
    n_hat: u64,
    reps: usize,
    seed: u64,
    opts: FitOptions,
    exec: Exec,
) -> Vec<Result<FitResult>> {
    par::map_range(exec, reps, |r| {
        let sample = sample_synthetic(model, theta, n_hat, seed.wrapping_add(r as u64))?;
        fit_mle(model, &sample, None, opts)
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct CsvRow {
    x_label: String,
    y_label: String,
    count: f64,
}

/// Reads `x_label,y_label,count` rows; `0` in the woman (man) column marks a
/// single man (woman). Repeated rows accumulate.
pub fn read_sample_csv<R: Read>(reader: R, model: &ParametricModel) -> Result<ObservedSample> {
    let (nx, ny) = (model.nx(), model.ny());
    let mut mu = DMatrix::zeros(nx, ny);
    let mut mx = DVector::zeros(nx);
    let mut my = DVector::zeros(ny);
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    for (line, row) in rdr.deserialize::<CsvRow>().enumerate() {
        let field = format!("row[{}]", line + 1);
        let row = row.map_err(|e| ItuError::validation(&field, e.to_string()))?;
        if !(row.count.is_finite() && row.count >= 0.0) {
            return Err(ItuError::validation(
                format!("{field}.count"),
                "must be finite and nonnegative",
            ));
        }
        let x = model.men.iter().position(|l| *l == row.x_label);
        let y = model.women.iter().position(|l| *l == row.y_label);
        match (x, y, row.x_label.as_str(), row.y_label.as_str()) {
            (Some(x), Some(y), _, _) => mu[(x, y)] += row.count,
            (Some(x), None, _, "0") => mx[x] += row.count,
            (None, Some(y), "0", _) => my[y] += row.count,
            (None, _, l, _) if l != "0" => {
                return Err(ItuError::validation(
                    format!("{field}.x_label"),
                    format!("unknown man type `{l}`"),
                ))
            }
            (_, _, _, l) => {
                return Err(ItuError::validation(
                    format!("{field}.y_label"),
                    format!("unknown woman type `{l}`"),
                ))
            }
        }
    }
    ObservedSample::from_counts(&mu, &mx, &my)
}

/// Writes the sample as integer-rounded counts in the CSV ingestion format.
pub fn write_sample_csv<W: Write>(writer: W, model: &ParametricModel, sample: &ObservedSample) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let io = |e: csv::Error| ItuError::domain(format!("csv write: {e}"));
    let count = |p: f64| (p * sample.n_hat).round();
    for x in 0..model.nx() {
        for y in 0..model.ny() {
            w.serialize(CsvRow {
                x_label: model.men[x].clone(),
                y_label: model.women[y].clone(),
                count: count(sample.pi_xy[(x, y)]),
            })
            .map_err(io)?;
        }
    }
    for x in 0..model.nx() {
        w.serialize(CsvRow {
            x_label: model.men[x].clone(),
            y_label: "0".into(),
            count: count(sample.pi_x0[x]),
        })
        .map_err(io)?;
    }
    for y in 0..model.ny() {
        w.serialize(CsvRow {
            x_label: "0".into(),
            y_label: model.women[y].clone(),
            count: count(sample.pi_0y[y]),
        })
        .map_err(io)?;
    }
    w.flush().map_err(|e| ItuError::domain(format!("csv write: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn toy_model() -> ParametricModel {
        ParametricModel::tu_linear(&[
            DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]),
            DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]),
        ])
        .unwrap()
    }

    fn etu_model() -> ParametricModel {
        let cells = (0..4)
            .map(|c| Template::ETU {
                alpha: Affine {
                    constant: 0.1 * c as f64,
                    coef: vec![1.0, 0.0],
                },
                gamma: Affine {
                    constant: -0.2,
                    coef: vec![0.0, (c % 2) as f64],
                },
                tau: Affine::constant(0.5 + 0.3 * c as f64),
                budget: Affine::constant(2.0),
            })
            .collect();
        ParametricModel {
            men: vec!["a".into(), "b".into()],
            women: vec!["c".into(), "d".into()],
            num_params: 2,
            cells,
        }
    }

    #[test]
    fn one_by_one_formula() {
        let model = ParametricModel::tu_linear(&[DMatrix::from_element(1, 1, 1.0)]).unwrap();
        let l3 = 3f64.ln();
        let third = 1.0 / 3.0;
        let sample = ObservedSample::from_flat(1, 1, &[third, third, third], 30.0);
        // D = (u + v − 0)/2 = ln 3 and N = 3·(1/3) = 1
        let ll = log_likelihood(&model, &[0.0, l3, l3], &sample).unwrap();
        assert_abs_diff_eq!(ll, -(third * l3 + third * l3 + third * l3 + 0.0), epsilon = 1e-14);
    }

    #[test]
    fn score_matches_finite_differences() {
        for model in [toy_model(), etu_model()] {
            let theta = [0.4, -0.3, 0.2, 0.7, -0.1, 0.5];
            let pop = model.probabilities(&[0.1, 0.2, 0.0, 0.3, 0.6, 0.1]).unwrap();
            let s = score(&model, &theta, &pop).unwrap();
            for i in 0..theta.len() {
                let h = 1e-6;
                let mut tp = theta;
                let mut tm = theta;
                tp[i] += h;
                tm[i] -= h;
                let fd = (log_likelihood(&model, &tp, &pop).unwrap() - log_likelihood(&model, &tm, &pop).unwrap())
                    / (2.0 * h);
                assert!((fd - s[i]).abs() <= 1e-6 * (1.0 + s[i].abs()), "{i}: {fd} vs {}", s[i]);
            }
        }
    }

    #[test]
    fn score_vanishes_at_population() {
        let model = etu_model();
        let theta = [0.3, -0.2, 0.1, 0.4, 0.2, -0.3];
        let pop = model.probabilities(&theta).unwrap();
        assert!(score(&model, &theta, &pop).unwrap().amax() < 1e-14);
    }

    #[test]
    fn shift_is_flat() {
        let model = toy_model();
        let theta = [0.3, -0.2, 0.1, 0.4, 0.2, -0.3];
        let shifted = [0.3, -0.2, 1.1, 1.4, 1.2, 0.7];
        let pop = model.probabilities(&[0.0; 6]).unwrap();
        assert_abs_diff_eq!(
            log_likelihood(&model, &theta, &pop).unwrap(),
            log_likelihood(&model, &shifted, &pop).unwrap(),
            epsilon = 1e-12
        );
        let info = fisher_information(&model, &theta).unwrap();
        let (_, null) = pseudo_inverse(&info);
        assert_eq!(null.len(), 1);
        let e = DVector::from_vec(vec![0.0, 0.0, 1.0, 1.0, 1.0, 1.0]).normalize();
        assert_abs_diff_eq!(null[0].dot(&e).abs(), 1.0, epsilon = 1e-8);
    }

    #[test]
    fn information_equality() {
        let model = etu_model();
        let theta = [0.2, 0.1, 0.3, -0.2, 0.4, 0.1];
        let pop = model.probabilities(&theta).unwrap();
        let info = fisher_information(&model, &theta).unwrap();
        assert!((&info - info.transpose()).amax() < 1e-12);
        let h = 1e-5;
        for i in 0..6 {
            let mut tp = theta;
            let mut tm = theta;
            tp[i] += h;
            tm[i] -= h;
            let col = (score(&model, &tp, &pop).unwrap() - score(&model, &tm, &pop).unwrap()) / (2.0 * h);
            for j in 0..6 {
                assert!((-col[j] - info[(j, i)]).abs() < 1e-4 * (1.0 + info[(j, i)].abs()));
            }
        }
    }

    #[test]
    fn fit_recovers_population() {
        let model = toy_model();
        let truth = [1.0, -0.5, 0.3, 0.1, -0.2, 0.4];
        let mut pop = model.probabilities(&truth).unwrap();
        pop.n_hat = 1e5;
        let fit = fit_mle(&model, &pop, None, FitOptions::default()).unwrap();
        assert!(fit.score_sup <= 1e-6);
        assert_abs_diff_eq!(fit.lambda[0], 1.0, epsilon = 1e-5);
        assert_abs_diff_eq!(fit.lambda[1], -0.5, epsilon = 1e-5);
        // u − v differences are identified
        assert_abs_diff_eq!(fit.u[0] - fit.v[0], truth[2] - truth[4], epsilon = 1e-5);
        assert_eq!(fit.flat_directions.len(), 1);
        assert!((&fit.variance - fit.variance.transpose()).amax() < 1e-12);
    }

    #[test]
    fn zero_cells_are_fine() {
        let model = toy_model();
        let mu = DMatrix::from_row_slice(2, 2, &[40.0, 0.0, 3.0, 25.0]);
        let s = ObservedSample::from_counts(
            &mu,
            &DVector::from_vec(vec![10.0, 7.0]),
            &DVector::from_vec(vec![9.0, 6.0]),
        )
        .unwrap();
        assert!(log_likelihood(&model, &[0.0; 6], &s).unwrap().is_finite());
    }

    #[test]
    fn sampling_is_deterministic_and_consistent() {
        let model = toy_model();
        let theta = [1.0, -0.5, 0.0, 0.0, 0.0, 0.0];
        let a = sample_synthetic(&model, &theta, 1000, 7).unwrap();
        assert_eq!(a, sample_synthetic(&model, &theta, 1000, 7).unwrap());
        assert_abs_diff_eq!(a.flat().iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        let big = sample_synthetic(&model, &theta, 10_000_000, 1).unwrap();
        let pop = model.probabilities(&theta).unwrap();
        let err = big
            .flat()
            .iter()
            .zip(pop.flat())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-3);
        let dominant = sample_synthetic(&model, &[60.0, 0.0, 0.0, 0.0, 0.0, 0.0], 1000, 3).unwrap();
        assert!(dominant.pi_xy[(0, 0)] + dominant.pi_xy[(1, 1)] > 0.999);
    }

    #[test]
    fn csv_round_trip() {
        let model = toy_model();
        let sample = sample_synthetic(&model, &[1.0, -0.5, 0.0, 0.0, 0.0, 0.0], 500, 11).unwrap();
        let mut buf = Vec::new();
        write_sample_csv(&mut buf, &model, &sample).unwrap();
        let back = read_sample_csv(buf.as_slice(), &model).unwrap();
        assert!((back.pi_xy - &sample.pi_xy).amax() < 1e-15);
        assert_eq!(back.n_hat, 500.0);
        let bad = "x_label,y_label,count\nx9,y1,3\n";
        match read_sample_csv(bad.as_bytes(), &model) {
            Err(ItuError::Validation { field, .. }) => assert_eq!(field, "row[1].x_label"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn rejects_non_smooth_family() {
        let file: ModelFile = serde_json::from_str(
            r#"{"men":["a"],"women":["b"],"num_params":1,
                "cells":{"a|b":{"type":"NTU","alpha":0,"gamma":0}}}"#,
        )
        .unwrap();
        match ParametricModel::from_file(&file) {
            Err(ItuError::Validation { field, .. }) => assert_eq!(field, "cells.a|b.type"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn model_file_templates() {
        let file: ModelFile = serde_json::from_str(
            r#"{"men":["a"],"women":["b"],"num_params":1,
                "cells":{"a|b":{"type":"ETU","alpha":{"coef":[1.0]},"gamma":0,"tau":0.5,"budget":2}}}"#,
        )
        .unwrap();
        let m = ParametricModel::from_file(&file).unwrap();
        assert_eq!(
            m.cells[0].at(&[0.7]),
            DistanceSpec::ETU {
                alpha: 0.7,
                gamma: 0.0,
                tau: 0.5,
                budget: 2.0
            }
        );
    }
}
