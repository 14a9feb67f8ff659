//! Total Variation and Hellinger distances between deviated models, and the
//! probe that measures how TV compares with the Voronoi losses near the truth.
//!
//! Both distances factor through the covariate law:
//! `V = E_X[ 1/2 int |p(y|X) - q(y|X)| dy ]`, so they are estimated by Monte
//! Carlo over standard normal covariates and adaptive Simpson quadrature in
//! `y`. The quadrature is split at every component mean plus
//! `{1, 2, 4, 8}` standard deviations on each side, which keeps narrow
//! components from slipping between nodes.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    gaussian_pdf, Atom, CovariateSampler, DeviatedModel, MixingMeasure, StandardNormalCovariates,
};
use crate::quadrature::integrate_pieces;
use crate::rng;
use crate::voronoi::{LossContext, LossKind};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistanceConfig {
    /// Number of covariate draws.
    pub samples: usize,
    /// Absolute tolerance of each inner integral.
    pub tol: f64,
    /// Half-width of the integration range in standard deviations.
    pub cover_sd: f64,
    pub seed: u64,
}

impl Default for DistanceConfig {
    fn default() -> Self {
        DistanceConfig {
            samples: 2000,
            tol: 1e-8,
            cover_sd: 8.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistanceEstimate {
    pub estimate: f64,
    pub std_error: f64,
    pub samples: usize,
}

/// Covariate draws shared by every evaluation with the same config.
pub fn covariate_draws(dim: usize, cfg: &DistanceConfig) -> Result<Vec<Vec<f64>>> {
    if cfg.samples == 0 {
        return Err(Error::InvalidInput(
            "need at least one covariate draw".into(),
        ));
    }
    if !(cfg.tol > 0.0 && cfg.cover_sd > 0.0) {
        return Err(Error::InvalidInput(
            "quadrature tolerance and cover must be positive".into(),
        ));
    }
    let sampler = StandardNormalCovariates { dim };
    let mut rng = rng::stream(cfg.seed, 0);
    Ok((0..cfg.samples)
        .map(|_| {
            let mut x = vec![0.0; dim];
            sampler.sample(&mut rng, &mut x);
            x
        })
        .collect())
}

fn breakpoints(comps: &[(f64, f64, f64)], cover_sd: f64) -> Vec<f64> {
    let sd_max = comps.iter().map(|c| c.2.sqrt()).fold(0.0, f64::max);
    let lo = comps.iter().map(|c| c.1).fold(f64::INFINITY, f64::min) - cover_sd * sd_max;
    let hi = comps.iter().map(|c| c.1).fold(f64::NEG_INFINITY, f64::max) + cover_sd * sd_max;
    let mut pts = vec![lo, hi];
    for &(_, mu, var) in comps {
        let sd = var.sqrt();
        for k in [0.0, 1.0, 2.0, 4.0, cover_sd] {
            for s in [-1.0, 1.0] {
                let y = mu + s * k * sd;
                if y > lo && y < hi {
                    pts.push(y);
                }
            }
        }
    }
    pts.sort_by(f64::total_cmp);
    pts.dedup();
    pts
}

fn conditional_density(comps: &[(f64, f64, f64)], y: f64) -> f64 {
    comps
        .iter()
        .map(|&(w, mu, var)| w * gaussian_pdf(y, mu, var))
        .sum()
}

/// Inner integral of `g(p(y|x), q(y|x))` for every covariate draw, with one
/// retry on a wider range.
fn inner_integrals<G>(
    m1: &DeviatedModel,
    m2: &DeviatedModel,
    xs: &[Vec<f64>],
    cfg: &DistanceConfig,
    g: G,
) -> Result<Vec<f64>>
where
    G: Fn(f64, f64) -> f64 + Sync,
{
    if m1.dim() != m2.dim() {
        return Err(Error::InvalidInput(
            "models differ in covariate dimension".into(),
        ));
    }
    xs.par_iter()
        .map(|x| {
            let c1 = m1.conditional_components(x);
            let c2 = m2.conditional_components(x);
            let both: Vec<(f64, f64, f64)> = c1.iter().chain(&c2).copied().collect();
            let f = |y: f64| g(conditional_density(&c1, y), conditional_density(&c2, y));
            integrate_pieces(&f, &breakpoints(&both, cfg.cover_sd), cfg.tol)
                .or_else(|_| integrate_pieces(&f, &breakpoints(&both, 1.5 * cfg.cover_sd), cfg.tol))
        })
        .collect()
}

fn mean_and_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// `V(p, q) = 1/2 int |p - q|` on fixed covariate draws.
pub fn total_variation_on(
    m1: &DeviatedModel,
    m2: &DeviatedModel,
    xs: &[Vec<f64>],
    cfg: &DistanceConfig,
) -> Result<DistanceEstimate> {
    let per_x = inner_integrals(m1, m2, xs, cfg, |p, q| 0.5 * (p - q).abs())?;
    let (mean, se) = mean_and_se(&per_x);
    Ok(DistanceEstimate {
        estimate: mean.clamp(0.0, 1.0),
        std_error: se,
        samples: xs.len(),
    })
}

/// `h(p, q) = (1/2 int (sqrt p - sqrt q)^2)^{1/2}` on fixed covariate draws.
pub fn hellinger_on(
    m1: &DeviatedModel,
    m2: &DeviatedModel,
    xs: &[Vec<f64>],
    cfg: &DistanceConfig,
) -> Result<DistanceEstimate> {
    let per_x = inner_integrals(m1, m2, xs, cfg, |p, q| {
        let d = p.sqrt() - q.sqrt();
        0.5 * d * d
    })?;
    let (h2, se2) = mean_and_se(&per_x);
    let h = h2.clamp(0.0, 1.0).sqrt();
    Ok(DistanceEstimate {
        estimate: h,
        std_error: if h > 0.0 { se2 / (2.0 * h) } else { 0.0 },
        samples: xs.len(),
    })
}

pub fn total_variation(
    m1: &DeviatedModel,
    m2: &DeviatedModel,
    cfg: &DistanceConfig,
) -> Result<DistanceEstimate> {
    total_variation_on(m1, m2, &covariate_draws(m1.dim(), cfg)?, cfg)
}

pub fn hellinger(
    m1: &DeviatedModel,
    m2: &DeviatedModel,
    cfg: &DistanceConfig,
) -> Result<DistanceEstimate> {
    hellinger_on(m1, m2, &covariate_draws(m1.dim(), cfg)?, cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub samples_per_shell: usize,
    /// Random directions tried per shell before the shell is given up.
    pub max_attempts: usize,
    /// Relative accuracy of the shell hit `|loss / eps - 1|`.
    pub shell_tol: f64,
    pub distance: DistanceConfig,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            samples_per_shell: 100,
            max_attempts: 400,
            shell_tol: 1e-3,
            distance: DistanceConfig {
                samples: 500,
                tol: 1e-7,
                ..DistanceConfig::default()
            },
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShellResult {
    pub epsilon: f64,
    /// Minimum of `V / loss` over accepted perturbations.
    pub min_ratio: f64,
    pub samples: usize,
    pub attempts: usize,
    pub skipped: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub loss: LossKind,
    pub shells: Vec<ShellResult>,
}

impl ProbeReport {
    /// `(epsilon, min_ratio, samples)` rows.
    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["epsilon", "min_ratio", "samples"])?;
        for s in &self.shells {
            out.write_record(&[
                format!("{:?}", s.epsilon),
                format!("{:?}", s.min_ratio),
                s.samples.to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}

/// A random direction in `(lambda, weights, a, b, log sigma)` coordinates.
#[derive(Debug, Clone)]
struct Direction {
    lambda: f64,
    logits: Vec<f64>,
    atoms: Vec<(Vec<f64>, f64, f64)>,
}

impl Direction {
    fn draw<R: Rng>(rng: &mut R, truth: &MixingMeasure) -> Self {
        let mut z = || -> f64 { rng.sample(StandardNormal) };
        Direction {
            lambda: z(),
            logits: (0..truth.len()).map(|_| z()).collect(),
            atoms: truth
                .atoms()
                .iter()
                .map(|a| ((0..a.dim()).map(|_| z()).collect(), z(), z()))
                .collect(),
        }
    }

    /// The truth moved by `t` along this direction, or `None` when it leaves
    /// the parameter space.
    fn apply(
        &self,
        t: f64,
        lambda_star: f64,
        truth: &MixingMeasure,
    ) -> Option<(f64, MixingMeasure)> {
        let lambda = lambda_star + t * self.lambda;
        if !(0.0..=1.0).contains(&lambda) {
            return None;
        }
        let raw: Vec<f64> = truth
            .weights()
            .iter()
            .zip(&self.logits)
            .map(|(p, d)| p * (t * d).exp())
            .collect();
        let total: f64 = raw.iter().sum();
        let atoms = truth
            .atoms()
            .iter()
            .zip(&self.atoms)
            .map(|(a, (da, db, ds))| {
                Atom::new(
                    a.a.iter().zip(da).map(|(x, d)| x + t * d).collect(),
                    a.b + t * db,
                    a.sigma * (t * ds).exp(),
                )
            })
            .collect::<Result<Vec<_>>>()
            .ok()?;
        let g = MixingMeasure::new(raw.iter().map(|w| w / total).collect(), atoms).ok()?;
        Some((lambda, g))
    }
}

/// Step `t` along `dir` where the loss equals `eps`, found by doubling and
/// bisection.
fn hit_shell(
    ctx: &LossContext,
    kind: LossKind,
    dir: &Direction,
    eps: f64,
    rel_tol: f64,
) -> Option<(f64, f64, MixingMeasure)> {
    let loss_at = |t: f64| -> Option<(f64, f64, MixingMeasure)> {
        let (lambda, g) = dir.apply(t, ctx.lambda_star, &ctx.g_star)?;
        let v = ctx.evaluate(kind, lambda, &g).ok()?.value;
        Some((v, lambda, g))
    };
    let mut hi = eps;
    let mut lo = 0.0;
    loop {
        let (v, ..) = loss_at(hi)?;
        if v >= eps {
            break;
        }
        lo = hi;
        hi *= 2.0;
        if hi > 1e3 {
            return None;
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let (v, lambda, g) = loss_at(mid)?;
        if (v / eps - 1.0).abs() <= rel_tol {
            return Some((v, lambda, g));
        }
        if v < eps {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    None
}

/// Minimum of `V / loss` over random perturbations of the truth on shells
/// `loss = eps`. Directions are shared across shells.
pub fn tv_lower_bound_probe(
    ctx: &LossContext,
    kind: LossKind,
    eps_grid: &[f64],
    cfg: &ProbeConfig,
) -> Result<ProbeReport> {
    ctx.check_kind(kind)?;
    if eps_grid.is_empty() || eps_grid.iter().any(|e| !(*e > 0.0)) {
        return Err(Error::InvalidInput("epsilons must be positive".into()));
    }
    if eps_grid.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::InvalidInput(
            "epsilon grid must be decreasing".into(),
        ));
    }
    if cfg.samples_per_shell == 0 || cfg.max_attempts < cfg.samples_per_shell {
        return Err(Error::InvalidInput(
            "need samples_per_shell >= 1 and max_attempts >= samples_per_shell".into(),
        ));
    }
    let truth = DeviatedModel::new(ctx.lambda_star, ctx.g_star.clone(), ctx.g0.clone())?;
    let xs = covariate_draws(truth.dim(), &cfg.distance)?;
    let mut rng = rng::stream(cfg.seed, 1);
    let dirs: Vec<Direction> = (0..cfg.max_attempts)
        .map(|_| Direction::draw(&mut rng, &ctx.g_star))
        .collect();
    let mut shells = Vec::with_capacity(eps_grid.len());
    for &eps in eps_grid {
        let mut hits = Vec::with_capacity(cfg.samples_per_shell);
        let mut attempts = 0;
        for dir in &dirs {
            if hits.len() == cfg.samples_per_shell {
                break;
            }
            attempts += 1;
            if let Some(hit) = hit_shell(ctx, kind, dir, eps, cfg.shell_tol) {
                hits.push(hit);
            }
        }
        let ratios: Vec<f64> = hits
            .par_iter()
            .map(|(loss, lambda, g)| {
                let m = DeviatedModel::new(*lambda, g.clone(), ctx.g0.clone())?;
                Ok(total_variation_on(&m, &truth, &xs, &cfg.distance)?.estimate / loss)
            })
            .collect::<Result<_>>()?;
        shells.push(ShellResult {
            epsilon: eps,
            min_ratio: ratios.iter().copied().fold(f64::INFINITY, f64::min),
            samples: ratios.len(),
            attempts,
            skipped: ratios.is_empty(),
        });
    }
    Ok(ProbeReport { loss: kind, shells })
}
