//! Adaptive Simpson quadrature on the real line with user breakpoints.

use crate::error::{Error, Result};

const MAX_DEPTH: u32 = 40;

/// Integrates `f` over `[lo, hi]` to absolute tolerance `tol`.
pub fn adaptive_simpson<F: Fn(f64) -> f64>(f: &F, lo: f64, hi: f64, tol: f64) -> Result<f64> {
    if !(lo.is_finite() && hi.is_finite() && lo <= hi) || !(tol > 0.0) {
        return Err(Error::InvalidInput(format!(
            "bad quadrature request on [{lo}, {hi}] with tolerance {tol}"
        )));
    }
    if lo == hi {
        return Ok(0.0);
    }
    let (fa, fb) = (f(lo), f(hi));
    let mid = 0.5 * (lo + hi);
    let fm = f(mid);
    let whole = (hi - lo) / 6.0 * (fa + 4.0 * fm + fb);
    let v = recurse(f, lo, hi, fa, fm, fb, whole, tol, MAX_DEPTH);
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::QuadratureFailure { lo, hi })
    }
}

#[allow(clippy::too_many_arguments)]
fn recurse<F: Fn(f64) -> f64>(
    f: &F,
    a: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
    tol: f64,
    depth: u32,
) -> f64 {
    let m = 0.5 * (a + b);
    let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
    let (flm, frm) = (f(lm), f(rm));
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    let delta = left + right - whole;
    if !delta.is_finite() {
        return f64::NAN;
    }
    if depth == 0 || delta.abs() <= 15.0 * tol {
        return left + right + delta / 15.0;
    }
    recurse(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1)
        + recurse(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)
}

/// Integrates over consecutive pieces between sorted `breakpoints`, sharing
/// the tolerance equally between pieces.
pub fn integrate_pieces<F: Fn(f64) -> f64>(f: &F, breakpoints: &[f64], tol: f64) -> Result<f64> {
    if breakpoints.len() < 2 {
        return Err(Error::InvalidInput("need at least two breakpoints".into()));
    }
    let piece_tol = tol / (breakpoints.len() - 1) as f64;
    breakpoints
        .windows(2)
        .map(|w| adaptive_simpson(f, w[0], w[1], piece_tol))
        .sum()
}
