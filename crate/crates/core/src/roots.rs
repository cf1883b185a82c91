//! Safeguarded scalar root finding: Newton steps inside a maintained sign
//! bracket, with bisection whenever Newton leaves the bracket or stalls.

use crate::error::{ItuError, Result};

#[derive(Debug, Clone, Copy)]
pub struct RootOptions {
    /// Absolute tolerance on |f(x)|.
    pub ftol: f64,
    /// Relative tolerance on the bracket width.
    pub xtol: f64,
    pub max_iter: usize,
}

impl Default for RootOptions {
    fn default() -> Self {
        RootOptions {
            ftol: 1e-15,
            xtol: 1e-15,
            max_iter: 200,
        }
    }
}

/// Finds a root of `f` in `[lo, hi]`, where `f` returns `(value, derivative)`.
///
/// `f(lo)` and `f(hi)` must have opposite signs (or one of them be zero).
/// The derivative is only used to propose steps; a wrong or zero derivative
/// degrades the method to bisection but never breaks the bracket.
pub fn newton_bisect<F>(mut f: F, mut lo: f64, mut hi: f64, opts: RootOptions) -> Result<f64>
where
    F: FnMut(f64) -> (f64, f64),
{
    if !(lo <= hi) {
        return Err(ItuError::domain(format!("invalid bracket [{lo}, {hi}]")));
    }
    let (flo, _) = f(lo);
    if flo == 0.0 {
        return Ok(lo);
    }
    let (fhi, _) = f(hi);
    if fhi == 0.0 {
        return Ok(hi);
    }
    if !flo.is_finite() || !fhi.is_finite() || flo.signum() == fhi.signum() {
        return Err(ItuError::domain(format!(
            "root not bracketed: f({lo}) = {flo}, f({hi}) = {fhi}"
        )));
    }
    // orient so that f(lo) < 0 < f(hi) in the bookkeeping below
    let increasing = flo < 0.0;

    let mut x = 0.5 * (lo + hi);
    let mut dx_old = hi - lo;
    let mut dx = dx_old;
    let (mut fx, mut dfx) = f(x);
    for _ in 0..opts.max_iter {
        if !fx.is_finite() {
            return Err(ItuError::domain(format!("non-finite function value at {x}")));
        }
        if fx.abs() <= opts.ftol {
            return Ok(x);
        }
        if (fx < 0.0) == increasing {
            lo = x;
        } else {
            hi = x;
        }
        if hi - lo <= opts.xtol * (1.0 + x.abs()) {
            return Ok(0.5 * (lo + hi));
        }
        let newton = x - fx / dfx;
        let inside = dfx.is_finite() && dfx != 0.0 && newton > lo && newton < hi;
        // Newton only while it shrinks faster than bisection would
        if inside && (2.0 * fx).abs() <= (dx_old * dfx).abs() {
            dx_old = dx;
            dx = newton - x;
            x = newton;
        } else {
            dx_old = dx;
            dx = 0.5 * (hi - lo);
            x = lo + dx;
        }
        let next = f(x);
        fx = next.0;
        dfx = next.1;
    }
    Ok(x)
}

/// Moves away from `start` in steps `step, 2·step, 4·step, …` until the sign
/// of `f` differs from its sign at `start`. Returns the bracket in increasing
/// order. `step` may be negative to search downwards.
pub fn expand_bracket<F>(mut f: F, start: f64, step: f64, max_doublings: usize) -> Result<(f64, f64)>
where
    F: FnMut(f64) -> f64,
{
    let f0 = f(start);
    if f0 == 0.0 {
        return Ok((start, start));
    }
    let mut prev = start;
    let mut h = step;
    for _ in 0..=max_doublings {
        let x = start + h;
        let fx = f(x);
        if fx == 0.0 || (fx.is_finite() && fx.signum() != f0.signum()) {
            return Ok(if x < prev { (x, prev) } else { (prev, x) });
        }
        prev = x;
        h *= 2.0;
    }
    Err(ItuError::Initialization(format!(
        "could not bracket a root from {start} with step {step} in {max_doublings} doublings"
    )))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn finds_sqrt_two() {
        let r = newton_bisect(|x| (x * x - 2.0, 2.0 * x), 0.0, 2.0, RootOptions::default()).unwrap();
        assert!((r - 2f64.sqrt()).abs() < 1e-14);
    }

    #[test]
    fn decreasing_function() {
        let r = newton_bisect(|x| (1.0 - x.exp(), -x.exp()), -3.0, 4.0, RootOptions::default()).unwrap();
        assert!(r.abs() < 1e-14);
    }

    #[test]
    fn bad_derivative_still_converges() {
        let r = newton_bisect(|x| (x.powi(3) - 0.5, 0.0), 0.0, 1.0, RootOptions::default()).unwrap();
        assert!((r - 0.5f64.cbrt()).abs() < 1e-12);
    }

    #[test]
    fn kinked_function() {
        // derivative jumps at 0.3
        let f = |x: f64| {
            if x < 0.3 {
                (x - 0.3 + 0.1, 1.0)
            } else {
                (10.0 * (x - 0.3) + 0.1, 10.0)
            }
        };
        let r = newton_bisect(f, -1.0, 1.0, RootOptions::default()).unwrap();
        assert!((r - 0.2).abs() < 1e-13);
    }

    #[test]
    fn unbracketed_is_error() {
        assert!(newton_bisect(|x| (x * x + 1.0, 2.0 * x), -1.0, 1.0, RootOptions::default()).is_err());
    }

    #[test]
    fn expands_down() {
        let (a, b) = expand_bracket(|x| x + 37.0, 0.0, -1.0, 60).unwrap();
        assert!(a <= -37.0 && b >= -37.0);
    }
}
