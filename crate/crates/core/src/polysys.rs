//! The polynomial system whose solvability defines the exponent `rbar(m)`.
//!
//! For `m` unknown triples `(s_l, t1_l, t2_l)` and degree `r` the system is
//!
//! ```text
//! sum_l sum_{n1 + 2 n2 = beta} s_l^2 t1_l^n1 t2_l^n2 / (n1! n2!) = 0,  beta = 1..=r.
//! ```
//!
//! `rbar(m)` is the smallest `r` with no non-trivial solution. Non-triviality
//! is imposed by normalizing every candidate before evaluation: the weights
//! `w_l = s_l^2` are rescaled to sum to one with each `s_l` floored at
//! `s_min` after scaling to unit norm, and `(t1, t2)` is rescaled by
//! `(t1 / c, t2 / c^2)` so that `sum_l w_l t1_l^2 = 1`. Each equation is
//! homogeneous under that rescaling, so the normalization loses no solutions
//! with `t1 != 0`.
//!
//! The search minimizes a scale-free residual in which each equation is
//! divided by the summed magnitude of its terms. The plain sum of squares is
//! dominated by the `1 / (n1! n2!)` factors at high degree, so its size says
//! little about how close the system is to being solvable; the scale-free
//! form reads as the squared relative cancellation in each equation.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use rand::Rng;

/// Largest degree supported by the factorial table.
pub const MAX_DEGREE: usize = 16;

/// Known values of `rbar(m)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RBar {
    Exact(u32),
    /// Only a lower bound is known.
    LowerBound(u32),
}

pub fn r_bar(m: usize) -> Result<RBar> {
    match m {
        0 => Err(Error::InvalidInput("rbar needs m >= 1".into())),
        1 => Ok(RBar::Exact(1)),
        2 => Ok(RBar::Exact(4)),
        3 => Ok(RBar::Exact(6)),
        _ => Ok(RBar::LowerBound(7)),
    }
}

fn factorials() -> [f64; MAX_DEGREE + 1] {
    let mut f = [1.0; MAX_DEGREE + 1];
    for n in 1..=MAX_DEGREE {
        f[n] = f[n - 1] * n as f64;
    }
    f
}

/// Sum of squared equation values at `(s, t1, t2)`, without normalization.
pub fn residual(r: usize, s: &[f64], t1: &[f64], t2: &[f64]) -> Result<f64> {
    if r == 0 || r > MAX_DEGREE {
        return Err(Error::UnsupportedOrder {
            order: r,
            max: MAX_DEGREE,
        });
    }
    if s.len() != t1.len() || s.len() != t2.len() || s.is_empty() {
        return Err(Error::InvalidInput(
            "s, t1 and t2 must be non-empty and of equal length".into(),
        ));
    }
    let w: Vec<f64> = s.iter().map(|x| x * x).collect();
    Ok(weighted_residual(r, &w, t1, t2, &factorials()))
}

/// Value of each equation `beta = 1..=r` with the sum of the absolute values
/// of its terms.
fn equations(r: usize, w: &[f64], t1: &[f64], t2: &[f64], fact: &[f64]) -> Vec<(f64, f64)> {
    (1..=r)
        .map(|beta| {
            let mut value = 0.0;
            let mut scale = 0.0;
            for n2 in 0..=beta / 2 {
                let n1 = beta - 2 * n2;
                let c = fact[n1] * fact[n2];
                for (wl, (a, b)) in w.iter().zip(t1.iter().zip(t2)) {
                    let term = wl * a.powi(n1 as i32) * b.powi(n2 as i32) / c;
                    value += term;
                    scale += term.abs();
                }
            }
            (value, scale)
        })
        .collect()
}

fn weighted_residual(r: usize, w: &[f64], t1: &[f64], t2: &[f64], fact: &[f64]) -> f64 {
    equations(r, w, t1, t2, fact)
        .iter()
        .map(|(v, _)| v * v)
        .sum()
}

/// Scale-free residual: every equation is divided by the sum of the
/// absolute values of its terms, so each contributes at most one and the
/// value does not depend on how `(t1, t2)` is scaled. An equation whose
/// terms all vanish contributes zero.
fn relative_residual(r: usize, w: &[f64], t1: &[f64], t2: &[f64], fact: &[f64]) -> f64 {
    equations(r, w, t1, t2, fact)
        .iter()
        .filter(|(_, s)| *s > 0.0)
        .map(|(v, s)| (v / s) * (v / s))
        .sum()
}

/// [`residual`] with every equation divided by the total size of its terms.
pub fn scaled_residual(r: usize, s: &[f64], t1: &[f64], t2: &[f64]) -> Result<f64> {
    residual(r, s, t1, t2)?;
    let w: Vec<f64> = s.iter().map(|x| x * x).collect();
    Ok(relative_residual(r, &w, t1, t2, &factorials()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolySysConfig {
    pub starts: usize,
    pub seed: u64,
    /// Residual below which a solution counts as found.
    pub found_tol: f64,
    pub s_min: f64,
    /// Function evaluations per Nelder-Mead run.
    pub max_evals: usize,
}

impl Default for PolySysConfig {
    fn default() -> Self {
        PolySysConfig {
            starts: 200,
            seed: 0,
            found_tol: 1e-10,
            s_min: 0.1,
            max_evals: 20_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Solution {
    pub s: Vec<f64>,
    pub t1: Vec<f64>,
    pub t2: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolySysReport {
    pub m: usize,
    pub r: usize,
    pub found: bool,
    /// Scale-free residual at the best point (the search objective).
    pub best_residual: f64,
    /// Plain sum of squared equation values at the best point.
    pub best_absolute_residual: f64,
    pub starts: usize,
    pub seed: u64,
    pub best_point: Solution,
}

/// Maps an unconstrained search point to a normalized candidate
/// `(w, t1, t2)` with `sum w = 1` and `sum w t1^2 = 1`.
fn normalize(v: &[f64], m: usize, s_min: f64) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let raw: Vec<f64> = v[..m].iter().map(|x| x.abs()).collect();
    let norm = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
    let s: Vec<f64> = raw
        .iter()
        .map(|x| {
            if norm > 0.0 {
                (x / norm).max(s_min)
            } else {
                1.0
            }
        })
        .collect();
    let total: f64 = s.iter().map(|x| x * x).sum();
    let w: Vec<f64> = s.iter().map(|x| x * x / total).collect();
    let t1 = &v[m..2 * m];
    let t2 = &v[2 * m..];
    let c = w
        .iter()
        .zip(t1)
        .map(|(wl, a)| wl * a * a)
        .sum::<f64>()
        .sqrt()
        .max(f64::MIN_POSITIVE);
    (
        w,
        t1.iter().map(|a| a / c).collect(),
        t2.iter().map(|b| b / (c * c)).collect(),
    )
}

/// Minimizes the scale-free residual of normalized candidates from many
/// random starts.
pub fn find_nontrivial(m: usize, r: usize, cfg: &PolySysConfig) -> Result<PolySysReport> {
    if m == 0 {
        return Err(Error::InvalidInput("m must be at least 1".into()));
    }
    if r == 0 || r > MAX_DEGREE {
        return Err(Error::UnsupportedOrder {
            order: r,
            max: MAX_DEGREE,
        });
    }
    if cfg.starts == 0 || !(cfg.s_min > 0.0 && cfg.s_min <= 1.0) {
        return Err(Error::InvalidInput(
            "need at least one start and s_min in (0, 1]".into(),
        ));
    }
    let fact = factorials();
    let objective = |v: &[f64]| {
        let (w, t1, t2) = normalize(v, m, cfg.s_min);
        relative_residual(r, &w, &t1, &t2, &fact)
    };
    let (best_v, best_f) = (0..cfg.starts)
        .into_par_iter()
        .map(|start| {
            let mut rng = rng::stream(cfg.seed, start as u64);
            let x0: Vec<f64> = (0..3 * m)
                .map(|q| match q / m {
                    0 => rng.random_range(0.1..1.0),
                    1 => rng.random_range(-1.0..1.0),
                    _ => rng.random_range(-5.0..5.0),
                })
                .collect();
            let (x, _) = nelder_mead(&objective, &x0, 0.1, cfg.max_evals);
            nelder_mead(&objective, &x, 0.05, cfg.max_evals)
        })
        .reduce_with(|a, b| if b.1 < a.1 { b } else { a })
        .expect("at least one start");
    let (w, t1, t2) = normalize(&best_v, m, cfg.s_min);
    Ok(PolySysReport {
        m,
        r,
        found: best_f < cfg.found_tol,
        best_residual: best_f,
        best_absolute_residual: weighted_residual(r, &w, &t1, &t2, &fact),
        starts: cfg.starts,
        seed: cfg.seed,
        best_point: Solution {
            s: w.iter().map(|x| x.sqrt()).collect(),
            t1,
            t2,
        },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RBarVerification {
    pub m: usize,
    pub r_bar: u32,
    /// Search at `rbar - 1`, where a solution should exist.
    pub below: PolySysReport,
    /// Search at `rbar`, where none should exist.
    pub at: PolySysReport,
    /// Residual that the search at `rbar` must stay above.
    pub separation: f64,
    pub consistent: bool,
}

/// Checks that a solution is found at `rbar(m) - 1` and that the best
/// residual at `rbar(m)` stays above `separation`.
pub fn verify_r_bar(m: usize, cfg: &PolySysConfig, separation: f64) -> Result<RBarVerification> {
    let rb = match r_bar(m)? {
        RBar::Exact(r) if r >= 2 => r,
        RBar::Exact(r) => {
            return Err(Error::Unsupported(format!(
                "rbar({m}) = {r} has no lower degree to search"
            )))
        }
        RBar::LowerBound(r) => {
            return Err(Error::Unsupported(format!(
                "only the lower bound rbar({m}) >= {r} is known"
            )))
        }
    };
    let below = find_nontrivial(m, rb as usize - 1, cfg)?;
    let at = find_nontrivial(m, rb as usize, cfg)?;
    let consistent = below.found && at.best_residual > separation;
    Ok(RBarVerification {
        m,
        r_bar: rb,
        below,
        at,
        separation,
        consistent,
    })
}

/// Nelder-Mead simplex search with the standard coefficients.
fn nelder_mead<F: Fn(&[f64]) -> f64>(
    f: &F,
    x0: &[f64],
    step: f64,
    max_evals: usize,
) -> (Vec<f64>, f64) {
    let n = x0.len();
    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(n + 1);
    simplex.push((x0.to_vec(), f(x0)));
    for i in 0..n {
        let mut x = x0.to_vec();
        x[i] += if x[i].abs() > 1e-8 {
            step * x[i].abs().max(0.5)
        } else {
            step
        };
        let fx = f(&x);
        simplex.push((x, fx));
    }
    let mut evals = n + 1;
    let blend = |a: &[f64], b: &[f64], t: f64| -> Vec<f64> {
        a.iter().zip(b).map(|(x, y)| x + t * (y - x)).collect()
    };
    while evals < max_evals {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let best = simplex[0].1;
        let worst = simplex[n].1;
        if worst - best <= 1e-30 + 1e-15 * best.abs() {
            let spread = simplex[1..]
                .iter()
                .flat_map(|(x, _)| x.iter().zip(&simplex[0].0).map(|(a, b)| (a - b).abs()))
                .fold(0.0, f64::max);
            if spread < 1e-13 {
                break;
            }
        }
        let centroid: Vec<f64> = (0..n)
            .map(|q| simplex[..n].iter().map(|(x, _)| x[q]).sum::<f64>() / n as f64)
            .collect();
        let xr = blend(&centroid, &simplex[n].0, -1.0);
        let fr = f(&xr);
        evals += 1;
        if fr < simplex[0].1 {
            let xe = blend(&centroid, &simplex[n].0, -2.0);
            let fe = f(&xe);
            evals += 1;
            simplex[n] = if fe < fr { (xe, fe) } else { (xr, fr) };
        } else if fr < simplex[n - 1].1 {
            simplex[n] = (xr, fr);
        } else {
            let (xc, fc) = if fr < simplex[n].1 {
                let xc = blend(&centroid, &xr, 0.5);
                let fc = f(&xc);
                (xc, fc)
            } else {
                let xc = blend(&centroid, &simplex[n].0, 0.5);
                let fc = f(&xc);
                (xc, fc)
            };
            evals += 1;
            if fc < simplex[n].1.min(fr) {
                simplex[n] = (xc, fc);
            } else {
                let x_best = simplex[0].0.clone();
                for vertex in simplex.iter_mut().skip(1) {
                    vertex.0 = blend(&x_best, &vertex.0, 0.5);
                    vertex.1 = f(&vertex.0);
                }
                evals += n;
            }
        }
    }
    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    simplex.swap_remove(0)
}
