//! Welfare derivatives of `u_x = σ log(n_x/μ_x0)` against re-solving.

mod common;

use itu_match::compstats::symmetry_diagnostic;
use itu_match::{solve_ipfp, DistanceSpec, Exec, Market, SolverOptions};
use nalgebra::{DMatrix, DVector};
use rand::Rng;

fn opts() -> SolverOptions {
    SolverOptions::tol(1e-13).with_max_iter(100_000)
}

fn welfare(mk: &Market) -> (DVector<f64>, DVector<f64>) {
    let o = solve_ipfp(mk, &opts()).unwrap();
    let s = mk.sigma;
    (
        DVector::from_fn(mk.nx(), |x, _| s * (mk.n[x] / o.matching.mu_x0[x]).ln()),
        DVector::from_fn(mk.ny(), |y, _| s * (mk.m[y] / o.matching.mu_0y[y]).ln()),
    )
}

/// `∂u_x/∂n_j` (columns j) and `∂v_y/∂n_j` by central differences.
fn fd_men(mk: &Market) -> (DMatrix<f64>, DMatrix<f64>) {
    let h = 1e-6;
    let mut du = DMatrix::zeros(mk.nx(), mk.nx());
    let mut dv = DMatrix::zeros(mk.ny(), mk.nx());
    for j in 0..mk.nx() {
        let (mut p, mut q) = (mk.clone(), mk.clone());
        p.n[j] += h;
        q.n[j] -= h;
        let ((up, vp), (uq, vq)) = (welfare(&p), welfare(&q));
        du.set_column(j, &((up - uq) / (2.0 * h)));
        dv.set_column(j, &((vp - vq) / (2.0 * h)));
    }
    (du, dv)
}

fn heterogeneous_etu() -> Market {
    let taus = [[0.2, 3.0, 1.0], [1.5, 0.4, 0.7]];
    Market::new(vec![1.0, 1.5], vec![1.2, 0.8, 0.9], |x, y| DistanceSpec::ETU {
        alpha: 0.1 * x as f64,
        gamma: -0.2 * y as f64,
        tau: taus[x][y],
        budget: 2.0,
    })
}

#[test]
fn diagnostic_matches_resolving() {
    let mk = heterogeneous_etu();
    let out = solve_ipfp(&mk, &opts()).unwrap();
    let rep = symmetry_diagnostic(&mk, &out, Exec::Parallel).unwrap();
    let (du, dv) = fd_men(&mk);
    assert!((&rep.within_men - &du).amax() < 1e-6, "{} vs {}", rep.within_men, du);
    assert!((&rep.cross_women - &dv).amax() < 1e-6, "{} vs {}", rep.cross_women, dv);
}

#[test]
fn heterogeneous_etu_breaks_within_symmetry() {
    // the within-men block is symmetric only when ∂_v D/∂_u D agrees across
    // the men's pairs; heterogeneous τ breaks that
    let mk = heterogeneous_etu();
    let out = solve_ipfp(&mk, &opts()).unwrap();
    let rep = symmetry_diagnostic(&mk, &out, Exec::Parallel).unwrap();
    let (du, _) = fd_men(&mk);
    assert!((du[(0, 1)] - du[(1, 0)]).abs() > 1e-2);
    assert!(rep.within_asymmetry > 1e-2);
}

#[test]
fn common_ratio_ltu_keeps_within_symmetry() {
    let mut rng = common::rng(77);
    for _ in 0..5 {
        let ratio = rng.random_range(0.3..3.0);
        let mk = common::random_market(&mut rng, 4, |r| {
            let zeta = r.random_range(0.3..2.0);
            DistanceSpec::LTU {
                lambda: ratio * zeta,
                zeta,
                phi: r.random_range(-2.0..2.0),
            }
        });
        let out = solve_ipfp(&mk, &opts()).unwrap();
        let rep = symmetry_diagnostic(&mk, &out, Exec::Sequential).unwrap();
        assert!(rep.within_asymmetry < 1e-9, "{}", rep.within_asymmetry);
    }
}

#[test]
fn tu_symmetric_across_sides() {
    let mut rng = common::rng(78);
    for _ in 0..5 {
        let mk = common::random_market(&mut rng, 4, common::tu).with_sigma(rng.random_range(0.5..2.0));
        let out = solve_ipfp(&mk, &opts()).unwrap();
        let rep = symmetry_diagnostic(&mk, &out, Exec::Parallel).unwrap();
        assert!(rep.cross_asymmetry < 1e-9 && rep.within_asymmetry < 1e-9);
    }
}
