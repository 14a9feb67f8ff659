//! Maximum likelihood for `(lambda, G)` by expectation maximization.
//!
//! The deviated model is treated as a `(k0 + k)`-component mixture whose
//! first `k0` components are frozen at `g0`. The E-step computes posterior
//! component probabilities in log space; the M-step updates `lambda` from
//! the mass not explained by `g0`, the weights under the floor `xi`, and each
//! expert by weighted least squares. Every parameter is confined to a box,
//! and iterations where a bound or the floor binds are flagged.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{log_sum_exp, Atom, Dataset, DeviatedModel, MixingMeasure};
use crate::rng;

/// Ridge added to singular weighted normal equations.
pub const RIDGE_JITTER: f64 = 1e-8;

/// Responsibility mass below which a component keeps its parameters.
const MIN_COMPONENT_MASS: f64 = 1e-10;

const PARALLEL_ROWS: usize = 8192;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParameterBox {
    pub a: (f64, f64),
    pub b: (f64, f64),
    pub sigma: (f64, f64),
}

impl Default for ParameterBox {
    fn default() -> Self {
        ParameterBox {
            a: (-10.0, 10.0),
            b: (-10.0, 10.0),
            sigma: (1e-4, 25.0),
        }
    }
}

impl ParameterBox {
    fn validate(&self) -> Result<()> {
        let ok = |(lo, hi): (f64, f64)| lo.is_finite() && hi.is_finite() && lo < hi;
        if !(ok(self.a) && ok(self.b) && ok(self.sigma) && self.sigma.0 > 0.0) {
            return Err(Error::InvalidInput(format!(
                "invalid parameter box {self:?}"
            )));
        }
        Ok(())
    }

    pub fn contains(&self, atom: &Atom) -> bool {
        let inside = |v: f64, (lo, hi): (f64, f64)| v >= lo && v <= hi;
        atom.a.iter().all(|&v| inside(v, self.a))
            && inside(atom.b, self.b)
            && inside(atom.sigma, self.sigma)
    }

    /// Clips into the box; the flag reports whether anything moved.
    pub fn clip(&self, atom: &mut Atom) -> bool {
        let mut moved = false;
        let mut clamp = |v: &mut f64, (lo, hi): (f64, f64)| {
            let c = v.clamp(lo, hi);
            if c != *v {
                moved = true;
                *v = c;
            }
        };
        for v in &mut atom.a {
            clamp(v, self.a);
        }
        clamp(&mut atom.b, self.b);
        clamp(&mut atom.sigma, self.sigma);
        moved
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitStrategy {
    /// Atoms uniform in the box, `lambda` uniform in `[0.1, 0.9]`.
    RandomInBox,
    /// Gaussian noise of standard deviation `scale` around a known truth
    /// (multiplicative on `sigma`).
    PerturbTruth {
        scale: f64,
        lambda: f64,
        truth: MixingMeasure,
    },
    /// Intercepts from response quantiles and slopes from a pooled regression.
    DataDriven,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmConfig {
    pub k: usize,
    pub max_iters: usize,
    /// Absolute log-likelihood change that ends a run.
    pub tol: f64,
    pub restarts: usize,
    /// Weight floor.
    pub xi: f64,
    pub bounds: ParameterBox,
    pub init: InitStrategy,
    pub seed: u64,
}

impl EmConfig {
    pub fn new(k: usize, init: InitStrategy) -> Self {
        EmConfig {
            k,
            max_iters: 1000,
            tol: 1e-8,
            restarts: 10,
            xi: 1e-3,
            bounds: ParameterBox::default(),
            init,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::InvalidInput("k must be at least 1".into()));
        }
        if !(self.xi > 0.0 && self.xi * (self.k as f64) < 1.0) {
            return Err(Error::InvalidInput(format!(
                "weight floor {} must lie in (0, 1/k)",
                self.xi
            )));
        }
        if self.restarts == 0 || !(self.tol >= 0.0) {
            return Err(Error::InvalidInput(
                "need at least one restart and a non-negative tolerance".into(),
            ));
        }
        if let InitStrategy::PerturbTruth { scale, lambda, .. } = &self.init {
            if !(*scale >= 0.0 && (0.0..=1.0).contains(lambda)) {
                return Err(Error::InvalidInput(
                    "perturbation scale must be non-negative and lambda in [0, 1]".into(),
                ));
            }
        }
        self.bounds.validate()
    }
}

/// Row-stochastic `n x (k + 1)` matrix; column 0 belongs to `g0`.
#[derive(Debug, Clone, PartialEq)]
pub struct Responsibilities {
    cols: usize,
    values: Vec<f64>,
}

impl Responsibilities {
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if cols < 2 || rows.iter().any(|r| r.len() != cols) {
            return Err(Error::InvalidInput(
                "responsibility rows must share a width of at least 2".into(),
            ));
        }
        Ok(Responsibilities {
            cols,
            values: rows.concat(),
        })
    }

    pub fn rows(&self) -> usize {
        self.values.len() / self.cols
    }

    /// Number of columns, `k + 1`.
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.values[t * self.cols..(t + 1) * self.cols]
    }

    pub fn get(&self, t: usize, c: usize) -> f64 {
        self.values[t * self.cols + c]
    }

    /// Largest `|row sum - 1|`.
    pub fn max_row_sum_error(&self) -> f64 {
        self.values
            .chunks(self.cols)
            .map(|r| (r.iter().sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

fn g0_log_density(g0: &MixingMeasure, data: &Dataset) -> Vec<f64> {
    let means: Vec<Vec<f64>> = g0.atoms().iter().map(|a| data.means(a)).collect();
    let mut terms = vec![0.0; g0.len()];
    data.responses()
        .iter()
        .enumerate()
        .map(|(t, &y)| {
            for (c, (w, atom)) in g0.iter().enumerate() {
                terms[c] = w.ln() + atom.log_density_at_mean(means[c][t], y);
            }
            log_sum_exp(&terms)
        })
        .collect()
}

/// E-step with a precomputed `log g0(y_t | x_t)`; also returns the
/// log-likelihood of `model`.
fn e_step_cached(
    model: &DeviatedModel,
    data: &Dataset,
    log_g0: &[f64],
) -> Result<(Responsibilities, f64)> {
    let g = model.mixture();
    let cols = g.len() + 1;
    let log_out = (1.0 - model.lambda()).ln();
    let log_in = model.lambda().ln();
    let means: Vec<Vec<f64>> = g.atoms().iter().map(|a| data.means(a)).collect();
    let log_w: Vec<f64> = g.weights().iter().map(|w| log_in + w.ln()).collect();
    let mut values = vec![0.0; data.len() * cols];
    let fill = |t: usize, row: &mut [f64]| -> Result<f64> {
        let y = data.responses()[t];
        row[0] = log_out + log_g0[t];
        for (i, atom) in g.atoms().iter().enumerate() {
            row[i + 1] = log_w[i] + atom.log_density_at_mean(means[i][t], y);
        }
        let norm = log_sum_exp(row);
        if !norm.is_finite() {
            return Err(Error::NumericalDegeneracy { index: t });
        }
        for v in row.iter_mut() {
            *v = (*v - norm).exp();
        }
        Ok(norm)
    };
    let ll: f64 = if data.len() >= PARALLEL_ROWS {
        values
            .par_chunks_mut(cols)
            .enumerate()
            .map(|(t, row)| fill(t, row))
            .collect::<Result<Vec<f64>>>()?
            .iter()
            .sum()
    } else {
        let mut total = 0.0;
        for (t, row) in values.chunks_mut(cols).enumerate() {
            total += fill(t, row)?;
        }
        total
    };
    Ok((Responsibilities { cols, values }, ll))
}

/// Posterior probabilities of `g0` (column 0) and each fitted expert.
pub fn e_step(model: &DeviatedModel, data: &Dataset) -> Result<Responsibilities> {
    check_data(model, data)?;
    let log_g0 = g0_log_density(model.g0(), data);
    Ok(e_step_cached(model, data, &log_g0)?.0)
}

fn check_data(model: &DeviatedModel, data: &Dataset) -> Result<()> {
    if data.dim() != model.dim() {
        return Err(Error::InvalidInput(format!(
            "dataset dimension {} does not match model dimension {}",
            data.dim(),
            model.dim()
        )));
    }
    Ok(())
}

/// Maximizer of `sum_i m_i log p_i` over `{p : p_i >= xi, sum p = 1}`:
/// `p_i = max(xi, c m_i)` with `c` set by the sum constraint. The flag
/// reports whether the floor binds.
pub fn floor_weights(mass: &[f64], xi: f64) -> (Vec<f64>, bool) {
    let k = mass.len();
    let mut clamped = vec![false; k];
    loop {
        let free_mass: f64 = mass
            .iter()
            .zip(&clamped)
            .filter(|(_, &c)| !c)
            .map(|(m, _)| m)
            .sum();
        let n_clamped = clamped.iter().filter(|&&c| c).count();
        let c = (1.0 - xi * n_clamped as f64) / free_mass;
        let mut changed = false;
        for i in 0..k {
            if !clamped[i] && !(c * mass[i] >= xi) {
                clamped[i] = true;
                changed = true;
            }
        }
        if !changed {
            let p = (0..k)
                .map(|i| if clamped[i] { xi } else { c * mass[i] })
                .collect();
            return (p, n_clamped > 0);
        }
    }
}

/// Weighted least squares of `y` on `(x, 1)`; returns `(a, b)`.
fn weighted_regression(data: &Dataset, weights: &[f64]) -> (Vec<f64>, f64) {
    let d = data.dim();
    let mut xtx = DMatrix::<f64>::zeros(d + 1, d + 1);
    let mut xty = DVector::<f64>::zeros(d + 1);
    let mut row = vec![1.0; d + 1];
    for (t, (&w, &y)) in weights.iter().zip(data.responses()).enumerate() {
        if w == 0.0 {
            continue;
        }
        for j in 0..d {
            row[j] = data.column(j)[t];
        }
        for p in 0..=d {
            xty[p] += w * row[p] * y;
            for q in 0..=p {
                xtx[(p, q)] += w * row[p] * row[q];
            }
        }
    }
    for p in 0..=d {
        for q in 0..p {
            xtx[(q, p)] = xtx[(p, q)];
        }
    }
    let beta = match xtx.clone().cholesky() {
        Some(ch) => ch.solve(&xty),
        None => {
            let ridged = xtx + DMatrix::<f64>::identity(d + 1, d + 1) * RIDGE_JITTER;
            match ridged.clone().cholesky() {
                Some(ch) => ch.solve(&xty),
                None => ridged
                    .pseudo_inverse(1e-14)
                    .map(|pinv| pinv * &xty)
                    .unwrap_or_else(|_| DVector::zeros(d + 1)),
            }
        }
    };
    (beta.rows(0, d).iter().copied().collect(), beta[d])
}

/// M-step output: the updated model and whether any bound or the weight
/// floor was active.
#[derive(Debug, Clone, PartialEq)]
pub struct MStep {
    pub model: DeviatedModel,
    pub clipped: bool,
}

/// Maximizes the expected complete-data log-likelihood. Components with no
/// responsibility mass keep their parameters from `previous`.
pub fn m_step(
    resp: &Responsibilities,
    data: &Dataset,
    previous: &DeviatedModel,
    cfg: &EmConfig,
) -> Result<MStep> {
    check_data(previous, data)?;
    let k = previous.mixture().len();
    if resp.rows() != data.len() || resp.cols() != k + 1 {
        return Err(Error::InvalidInput(format!(
            "responsibilities are {} x {}, expected {} x {}",
            resp.rows(),
            resp.cols(),
            data.len(),
            k + 1
        )));
    }
    let n = data.len();
    let lambda = (resp
        .values
        .chunks(resp.cols)
        .map(|r| 1.0 - r[0])
        .sum::<f64>()
        / n as f64)
        .clamp(0.0, 1.0);
    let mut mass = vec![0.0; k];
    for r in resp.values.chunks(resp.cols) {
        for i in 0..k {
            mass[i] += r[i + 1];
        }
    }
    let total: f64 = mass.iter().sum();
    let mut clipped = false;
    let weights = if total > MIN_COMPONENT_MASS {
        let (p, floored) = floor_weights(&mass, cfg.xi);
        clipped |= floored;
        p
    } else {
        previous.mixture().weights().to_vec()
    };
    let mut atoms = Vec::with_capacity(k);
    let mut w = vec![0.0; n];
    for i in 0..k {
        let prev = &previous.mixture().atoms()[i];
        if mass[i] <= MIN_COMPONENT_MASS {
            atoms.push(prev.clone());
            continue;
        }
        for (t, wt) in w.iter_mut().enumerate() {
            *wt = resp.get(t, i + 1);
        }
        let (a, b) = weighted_regression(data, &w);
        let mut atom = Atom { a, b, sigma: 1.0 };
        let mu = data.means(&atom);
        let sse: f64 = w
            .iter()
            .zip(mu.iter().zip(data.responses()))
            .map(|(wt, (m, y))| wt * (y - m) * (y - m))
            .sum();
        atom.sigma = sse / mass[i];
        if !(atom.b.is_finite() && atom.sigma.is_finite() && atom.a.iter().all(|v| v.is_finite())) {
            atoms.push(prev.clone());
            clipped = true;
            continue;
        }
        clipped |= cfg.bounds.clip(&mut atom);
        atoms.push(atom);
    }
    let model = DeviatedModel::new(
        lambda,
        MixingMeasure::normalized(weights, atoms)?,
        previous.g0().clone(),
    )?;
    Ok(MStep { model, clipped })
}

fn uniform(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    rng.random_range(lo..=hi)
}

/// Initial model for one restart. Expert `i` draws from its own stream so
/// relabeling components relabels their initial values.
pub fn init_params(
    data: &Dataset,
    g0: &MixingMeasure,
    cfg: &EmConfig,
    restart: usize,
) -> Result<DeviatedModel> {
    cfg.validate()?;
    let seed = rng::derive_seed(cfg.seed, restart as u64);
    let mut lambda_rng = rng::stream(seed, 0);
    let d = data.dim();
    let k = cfg.k;
    let bx = &cfg.bounds;
    let (lambda, weights, mut atoms) = match &cfg.init {
        InitStrategy::RandomInBox => {
            let atoms = (0..k)
                .map(|i| {
                    let mut r = rng::stream(seed, i as u64 + 1);
                    let a = (0..d).map(|_| uniform(&mut r, bx.a)).collect();
                    let b = uniform(&mut r, bx.b);
                    let s = uniform(&mut r, bx.sigma);
                    Atom::new(a, b, s)
                })
                .collect::<Result<Vec<_>>>()?;
            (
                lambda_rng.random_range(0.1..=0.9),
                vec![1.0 / k as f64; k],
                atoms,
            )
        }
        InitStrategy::PerturbTruth {
            scale,
            lambda,
            truth,
        } => {
            if truth.dim() != d {
                return Err(Error::InvalidInput(
                    "truth dimension does not match the data".into(),
                ));
            }
            let ks = truth.len();
            let mut weights = vec![0.0; k];
            let mut atoms = Vec::with_capacity(k);
            for i in 0..k {
                let j = i % ks;
                let copies = (k - j).div_ceil(ks);
                weights[i] = truth.weights()[j] / copies as f64;
                let base = &truth.atoms()[j];
                let mut r = rng::stream(seed, i as u64 + 1);
                let mut z = || -> f64 { scale * r.sample::<f64, _>(StandardNormal) };
                let a = base.a.iter().map(|v| v + z()).collect();
                let b = base.b + z();
                let s = base.sigma * z().exp();
                atoms.push(Atom::new(a, b, s)?);
            }
            let l = (lambda + 0.2 * scale * lambda_rng.sample::<f64, _>(StandardNormal)).abs();
            (l.min(1.0), weights, atoms)
        }
        InitStrategy::DataDriven => {
            let n = data.len();
            let (a, b0) = weighted_regression(data, &vec![1.0; n]);
            let pooled = Atom {
                a: a.clone(),
                b: b0,
                sigma: 1.0,
            };
            let resid: Vec<f64> = data
                .means(&pooled)
                .iter()
                .zip(data.responses())
                .map(|(m, y)| y - m)
                .collect();
            let var = resid.iter().map(|r| r * r).sum::<f64>() / n as f64;
            let mut sorted = resid.clone();
            sorted.sort_by(f64::total_cmp);
            let sd = var.sqrt();
            let atoms = (0..k)
                .map(|i| {
                    let q = sorted[(((i as f64 + 0.5) / k as f64) * n as f64) as usize % n];
                    let jitter = if restart == 0 {
                        0.0
                    } else {
                        let mut r = rng::stream(seed, i as u64 + 1);
                        0.25 * sd * r.sample::<f64, _>(StandardNormal)
                    };
                    Atom::new(a.clone(), b0 + q + jitter, (var / k as f64).max(bx.sigma.0))
                })
                .collect::<Result<Vec<_>>>()?;
            (0.5, vec![1.0 / k as f64; k], atoms)
        }
    };
    for atom in &mut atoms {
        cfg.bounds.clip(atom);
    }
    let (weights, _) = floor_weights(&weights, cfg.xi);
    DeviatedModel::new(
        lambda,
        MixingMeasure::normalized(weights, atoms)?,
        g0.clone(),
    )
}

/// One EM run from a given starting point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmRun {
    pub model: DeviatedModel,
    pub log_likelihood: f64,
    /// Log-likelihood of the start followed by one entry per iteration.
    pub trace: Vec<f64>,
    /// `clipped[i]` flags the iteration producing `trace[i + 1]`.
    pub clipped: Vec<bool>,
    pub converged: bool,
    pub max_row_sum_error: f64,
}

impl EmRun {
    /// Smallest log-likelihood increment over unflagged iterations.
    pub fn min_increment(&self) -> f64 {
        self.trace
            .windows(2)
            .zip(&self.clipped)
            .filter(|(_, &c)| !c)
            .map(|(w, _)| w[1] - w[0])
            .fold(f64::INFINITY, f64::min)
    }

    pub fn iterations(&self) -> usize {
        self.clipped.len()
    }
}

/// Runs EM from `init` until the log-likelihood changes by less than
/// `cfg.tol` or `cfg.max_iters` iterations have run.
pub fn fit_from(data: &Dataset, init: DeviatedModel, cfg: &EmConfig) -> Result<EmRun> {
    check_data(&init, data)?;
    let log_g0 = g0_log_density(init.g0(), data);
    let (mut resp, mut ll) = e_step_cached(&init, data, &log_g0)?;
    let mut model = init;
    let mut trace = vec![ll];
    let mut clipped = Vec::new();
    let mut max_row_sum_error = resp.max_row_sum_error();
    let mut converged = false;
    for _ in 0..cfg.max_iters {
        let step = m_step(&resp, data, &model, cfg)?;
        let (next_resp, next_ll) = e_step_cached(&step.model, data, &log_g0)?;
        max_row_sum_error = max_row_sum_error.max(next_resp.max_row_sum_error());
        trace.push(next_ll);
        clipped.push(step.clipped);
        model = step.model;
        resp = next_resp;
        let delta = (next_ll - ll).abs();
        ll = next_ll;
        if delta < cfg.tol {
            converged = true;
            break;
        }
    }
    Ok(EmRun {
        model,
        log_likelihood: ll,
        trace,
        clipped,
        converged,
        max_row_sum_error,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub model: DeviatedModel,
    pub log_likelihood: f64,
    pub trace: Vec<f64>,
    pub clipped: Vec<bool>,
    pub restart: usize,
    pub converged: bool,
    /// Largest E-step row-sum error over every restart.
    pub max_row_sum_error: f64,
    /// Smallest unflagged log-likelihood increment over every restart.
    pub min_increment: f64,
    pub failed_restarts: usize,
}

impl FitResult {
    pub fn lambda_hat(&self) -> f64 {
        self.model.lambda()
    }

    pub fn g_hat(&self) -> &MixingMeasure {
        self.model.mixture()
    }
}

/// Multistart EM; keeps the restart with the highest final log-likelihood.
pub fn fit_mle(data: &Dataset, g0: &MixingMeasure, cfg: &EmConfig) -> Result<FitResult> {
    cfg.validate()?;
    if g0.dim() != data.dim() {
        return Err(Error::InvalidInput(
            "g0 dimension does not match the data".into(),
        ));
    }
    let runs: Vec<Result<EmRun>> = (0..cfg.restarts)
        .into_par_iter()
        .map(|r| fit_from(data, init_params(data, g0, cfg, r)?, cfg))
        .collect();
    let mut failures = Vec::new();
    let mut best: Option<(usize, EmRun)> = None;
    let mut max_row_sum_error: f64 = 0.0;
    let mut min_increment = f64::INFINITY;
    for (r, run) in runs.into_iter().enumerate() {
        match run {
            Ok(run) if run.log_likelihood.is_finite() => {
                max_row_sum_error = max_row_sum_error.max(run.max_row_sum_error);
                min_increment = min_increment.min(run.min_increment());
                if best
                    .as_ref()
                    .is_none_or(|(_, b)| run.log_likelihood > b.log_likelihood)
                {
                    best = Some((r, run));
                }
            }
            Ok(run) => failures.push(format!(
                "restart {r}: log-likelihood {}",
                run.log_likelihood
            )),
            Err(e) => failures.push(format!("restart {r}: {e}")),
        }
    }
    let (restart, run) = best.ok_or_else(|| {
        Error::FitFailure(format!("all restarts failed: {}", failures.join("; ")))
    })?;
    Ok(FitResult {
        model: run.model,
        log_likelihood: run.log_likelihood,
        trace: run.trace,
        clipped: run.clipped,
        restart,
        converged: run.converged,
        max_row_sum_error,
        min_increment,
        failed_restarts: failures.len(),
    })
}
