//! Gaussian derivative calculus.
//!
//! Derivatives of `f(y | mu, sigma)` in the location are closed-form through
//! probabilists' Hermite polynomials:
//!
//! ```text
//! d^n f / d mu^n = sigma^{-n/2} He_n(z) f,   z = (y - mu) / sqrt(sigma)
//! ```
//!
//! and because `sigma` is the variance, `f` solves the heat equation
//! `d^2 f / d mu^2 = 2 df / d sigma`, so every variance derivative reduces to
//! two location derivatives with a factor one half.

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{gaussian_pdf, MixingMeasure};

/// Largest location-derivative order [`mean_derivative`] evaluates.
pub const MAX_MEAN_ORDER: usize = 32;

/// Largest total order `l1 + l2` of a [`DerivativeOrder`].
pub const MAX_TOTAL_ORDER: usize = 16;

/// Default cutoff on the column-normalized smallest singular value.
pub const DEFAULT_RANK_THRESHOLD: f64 = 1e-8;

/// `He_n(z)` by the three-term recurrence.
pub fn hermite_he(n: usize, z: f64) -> f64 {
    let (mut prev, mut cur) = (1.0, z);
    if n == 0 {
        return prev;
    }
    for k in 1..n {
        let next = z * cur - k as f64 * prev;
        prev = cur;
        cur = next;
    }
    cur
}

fn check_sigma(sigma: f64) -> Result<()> {
    if sigma > 0.0 && sigma.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!(
            "variance must be positive and finite, got {sigma}"
        )))
    }
}

/// `order`-th derivative of `f(y | mu, sigma)` with respect to `mu`.
pub fn mean_derivative(order: usize, y: f64, mu: f64, sigma: f64) -> Result<f64> {
    check_sigma(sigma)?;
    if order > MAX_MEAN_ORDER {
        return Err(Error::UnsupportedOrder {
            order,
            max: MAX_MEAN_ORDER,
        });
    }
    let sd = sigma.sqrt();
    let z = (y - mu) / sd;
    Ok(hermite_he(order, z) * gaussian_pdf(y, mu, sigma) / sd.powi(order as i32))
}

/// Orders of differentiation in the mean (`l1`) and variance (`l2`) experts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DerivativeOrder {
    pub l1: usize,
    pub l2: usize,
}

impl DerivativeOrder {
    pub fn new(l1: usize, l2: usize) -> Result<Self> {
        if l1 + l2 > MAX_TOTAL_ORDER {
            return Err(Error::UnsupportedOrder {
                order: l1 + l2,
                max: MAX_TOTAL_ORDER,
            });
        }
        Ok(DerivativeOrder { l1, l2 })
    }

    /// Location-derivative order after applying the heat identity.
    pub fn reduced(&self) -> usize {
        self.l1 + 2 * self.l2
    }
}

/// `d^{l1 + l2} f / d mu^{l1} d sigma^{l2} = 2^{-l2} d^{l1 + 2 l2} f / d mu^{l1 + 2 l2}`.
pub fn mixed_partial(ord: DerivativeOrder, y: f64, mu: f64, sigma: f64) -> Result<f64> {
    let ord = DerivativeOrder::new(ord.l1, ord.l2)?;
    Ok(mean_derivative(ord.reduced(), y, mu, sigma)? / 2f64.powi(ord.l2 as i32))
}

/// Residuals of `d^2 f / d mu^2 - 2 df / d sigma`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PdeResidual {
    /// Central differences with the requested step.
    pub finite_difference: f64,
    /// Hermite route against the closed-form variance derivative.
    pub exact: f64,
}

pub fn check_heat_pde(y: f64, mu: f64, sigma: f64, fd_step: f64) -> Result<PdeResidual> {
    check_sigma(sigma)?;
    if !(fd_step > 0.0) || sigma <= 2.0 * fd_step {
        return Err(Error::InvalidStep {
            step: fd_step,
            sigma,
        });
    }
    let h = fd_step;
    let f = |m: f64, s: f64| gaussian_pdf(y, m, s);
    let d2_mu = (f(mu + h, sigma) - 2.0 * f(mu, sigma) + f(mu - h, sigma)) / (h * h);
    let d_sigma = (f(mu, sigma + h) - f(mu, sigma - h)) / (2.0 * h);
    let r = y - mu;
    let d_sigma_exact = f(mu, sigma) * (r * r / (2.0 * sigma * sigma) - 0.5 / sigma);
    Ok(PdeResidual {
        finite_difference: (d2_mu - 2.0 * d_sigma).abs(),
        exact: (mean_derivative(2, y, mu, sigma)? - 2.0 * d_sigma_exact).abs(),
    })
}

/// Evaluation lattice for the rank test: every `x` paired with every `y`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub xs: Vec<Vec<f64>>,
    pub ys: Vec<f64>,
}

impl GridSpec {
    pub fn len(&self) -> usize {
        self.xs.len() * self.ys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Tensor lattice with Gauss-Hermite nodes rescaled to `[-x_half_width,
    /// x_half_width]` per covariate coordinate, and `y_points` equispaced
    /// responses covering every component mean over the `x` nodes plus six
    /// standard deviations of the widest component.
    pub fn lattice(
        measures: &[&MixingMeasure],
        x_nodes: usize,
        x_half_width: f64,
        y_points: usize,
    ) -> Result<Self> {
        let first = measures
            .first()
            .ok_or_else(|| Error::InvalidInput("no measures for the lattice".into()))?;
        if x_nodes < 2 || y_points < 2 {
            return Err(Error::InvalidInput(
                "lattice needs at least 2 nodes per axis".into(),
            ));
        }
        let d = first.dim();
        let per_dim = if d <= 1 {
            x_nodes
        } else {
            ((x_nodes as f64).powf(1.0 / d as f64).floor() as usize).max(2)
        };
        let nodes = hermite_nodes(per_dim);
        let scale = x_half_width / nodes.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let nodes: Vec<f64> = nodes.iter().map(|v| v * scale).collect();
        let mut xs: Vec<Vec<f64>> = vec![vec![]];
        for _ in 0..d {
            xs = xs
                .into_iter()
                .flat_map(|p| {
                    nodes.iter().map(move |&v| {
                        let mut q = p.clone();
                        q.push(v);
                        q
                    })
                })
                .collect();
        }
        let (mut lo, mut hi, mut sigma_max) = (f64::INFINITY, f64::NEG_INFINITY, 0.0f64);
        for m in measures {
            for atom in m.atoms() {
                sigma_max = sigma_max.max(atom.sigma);
                for x in &xs {
                    let mu = atom.mean(x);
                    lo = lo.min(mu);
                    hi = hi.max(mu);
                }
            }
        }
        let pad = 6.0 * sigma_max.sqrt();
        let (lo, hi) = (lo - pad, hi + pad);
        let ys = (0..y_points)
            .map(|i| lo + (hi - lo) * i as f64 / (y_points - 1) as f64)
            .collect();
        Ok(GridSpec { xs, ys })
    }
}

/// Roots of `He_n` (Golub-Welsch).
fn hermite_nodes(n: usize) -> Vec<f64> {
    let jacobi = DMatrix::from_fn(n, n, |i, j| {
        if i + 1 == j || j + 1 == i {
            (i.max(j) as f64).sqrt()
        } else {
            0.0
        }
    });
    let mut nodes: Vec<f64> = SymmetricEigen::new(jacobi)
        .eigenvalues
        .iter()
        .copied()
        .collect();
    nodes.sort_by(f64::total_cmp);
    nodes
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistinguishabilityScore {
    pub smallest_singular_value: f64,
    pub is_distinguishable: bool,
    pub threshold: f64,
    /// Number of distinct functions tested (columns of the matrix).
    pub functions: usize,
    pub grid_points: usize,
}

/// Column-normalized rank test of the derivative family of `g_star` together
/// with `g0`.
///
/// For atom `i` the family `{d^{l1+l2} f / dh1^{l1} dh2^{l2} : l1 + l2 <= r_i}`
/// collapses under the heat identity to the location derivatives of orders
/// `0..=2 r_i`; only those distinct functions enter the matrix, so the score
/// measures dependence beyond the identity itself.
pub fn distinguishability_score(
    g_star: &MixingMeasure,
    g0: &MixingMeasure,
    r: &[usize],
    grid: &GridSpec,
    threshold: f64,
) -> Result<DistinguishabilityScore> {
    if r.len() != g_star.len() {
        return Err(Error::InvalidInput(format!(
            "order vector has {} entries for {} atoms",
            r.len(),
            g_star.len()
        )));
    }
    if let Some(&ri) = r.iter().find(|&&ri| ri > MAX_TOTAL_ORDER) {
        return Err(Error::UnsupportedOrder {
            order: ri,
            max: MAX_TOTAL_ORDER,
        });
    }
    if let Some(x) = grid.xs.iter().find(|x| x.len() != g_star.dim()) {
        return Err(Error::InvalidInput(format!(
            "grid covariate of dimension {} for measures of dimension {}",
            x.len(),
            g_star.dim()
        )));
    }
    let mut columns: Vec<(usize, usize)> = Vec::new();
    for (i, &ri) in r.iter().enumerate() {
        columns.extend((0..=2 * ri).map(|order| (i, order)));
    }
    let functions = columns.len() + 1;
    let points = grid.len();
    if points < 2 * functions {
        return Err(Error::InvalidGrid { points, functions });
    }

    let cells: Vec<(&[f64], f64)> = grid
        .xs
        .iter()
        .flat_map(|x| grid.ys.iter().map(move |&y| (x.as_slice(), y)))
        .collect();
    let evaluated: Vec<Vec<f64>> = columns
        .par_iter()
        .map(|&(i, order)| {
            let atom = &g_star.atoms()[i];
            cells
                .iter()
                .map(|&(x, y)| mean_derivative(order, y, atom.mean(x), atom.sigma))
                .collect::<Result<Vec<f64>>>()
        })
        .chain(rayon::iter::once(Ok(cells
            .iter()
            .map(|&(x, y)| g0.density(x, y))
            .collect())))
        .collect::<Result<_>>()?;

    let mut mat = DMatrix::zeros(points, functions);
    for (c, col) in evaluated.iter().enumerate() {
        let norm = col.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            // a column that vanishes on the grid is trivially dependent
            continue;
        }
        for (rix, v) in col.iter().enumerate() {
            mat[(rix, c)] = v / norm;
        }
    }
    let smallest = mat
        .singular_values()
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min);
    Ok(DistinguishabilityScore {
        smallest_singular_value: smallest,
        is_distinguishable: smallest > threshold,
        threshold,
        functions,
        grid_points: points,
    })
}
