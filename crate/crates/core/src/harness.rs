//! Convergence-rate studies: sample from the truth, fit by EM, score the fit,
//! and read the rate off a log-log regression of the mean score on `n`.

use std::io::Write;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::em::{fit_mle, EmConfig, FitResult, InitStrategy, ParameterBox};
use crate::error::{Error, Result};
use crate::metrics::{covariate_draws, hellinger_on, DistanceConfig};
use crate::model::{sample_dataset, Atom, DeviatedModel, MixingMeasure, StandardNormalCovariates};
use crate::rng::derive_seed;
use crate::voronoi::{loss_vanishing, LossContext, LossKind, RBarTable, Regime, DEFAULT_MATCH_TOL};

/// Environment variable capping worker threads.
pub const THREADS_ENV: &str = "DMOE_THREADS";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Metric {
    D1,
    D2,
    D4,
    VanishingLambda,
    VanishingLambdaTimesD3,
    Hellinger,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TruthSection {
    pub lambda: f64,
    pub weights: Vec<f64>,
    pub atoms: Vec<Atom>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitKind {
    RandomInBox,
    PerturbTruth,
    DataDriven,
}

fn default_max_iters() -> usize {
    1000
}
fn default_tol() -> f64 {
    1e-8
}
fn default_restarts() -> usize {
    10
}
fn default_xi() -> f64 {
    1e-3
}
fn default_init() -> InitKind {
    InitKind::PerturbTruth
}
fn default_init_scale() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitSection {
    pub k: usize,
    #[serde(default = "default_max_iters")]
    pub max_iters: usize,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_restarts")]
    pub restarts: usize,
    #[serde(default = "default_xi")]
    pub xi: f64,
    #[serde(default = "default_init")]
    pub init: InitKind,
    /// Noise scale for `perturb_truth` starts.
    #[serde(default = "default_init_scale")]
    pub init_scale: f64,
    #[serde(default)]
    pub bounds: ParameterBox,
}

fn default_trials() -> usize {
    20
}
fn default_failure_budget() -> f64 {
    0.05
}
fn default_match_tol() -> f64 {
    DEFAULT_MATCH_TOL
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudySection {
    pub metric: Metric,
    pub n_grid: Vec<usize>,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default)]
    pub seed: u64,
    /// Largest tolerated fraction of failed fits.
    #[serde(default = "default_failure_budget")]
    pub failure_budget: f64,
    #[serde(default = "default_match_tol")]
    pub match_tol: f64,
    #[serde(default)]
    pub rbar: RBarTable,
    /// Used by the Hellinger metric.
    #[serde(default)]
    pub distance: DistanceConfig,
}

/// A rate study as read from TOML (`[truth]`, `[g0]`, `[fit]`, `[study]`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RateStudyConfig {
    pub truth: TruthSection,
    pub g0: MixingMeasure,
    pub fit: FitSection,
    pub study: StudySection,
}

impl RateStudyConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RateStudyConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn truth_measure(&self) -> Result<MixingMeasure> {
        MixingMeasure::new(self.truth.weights.clone(), self.truth.atoms.clone())
    }

    pub fn truth_model(&self) -> Result<DeviatedModel> {
        DeviatedModel::new(self.truth.lambda, self.truth_measure()?, self.g0.clone())
    }

    pub fn validate(&self) -> Result<()> {
        self.truth_model()?;
        let s = &self.study;
        if s.n_grid.len() < 3 || s.n_grid.windows(2).any(|w| w[1] <= w[0]) || s.n_grid[0] == 0 {
            return Err(Error::InvalidInput(
                "n_grid must be strictly increasing with at least 3 positive entries".into(),
            ));
        }
        if s.trials == 0 {
            return Err(Error::InvalidInput("trials must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&s.failure_budget) {
            return Err(Error::InvalidInput(
                "failure_budget must lie in [0, 1]".into(),
            ));
        }
        self.em_config(0)?.validate()
    }

    /// EM settings for one trial.
    pub fn em_config(&self, seed: u64) -> Result<EmConfig> {
        let f = &self.fit;
        let init = match f.init {
            InitKind::RandomInBox => InitStrategy::RandomInBox,
            InitKind::DataDriven => InitStrategy::DataDriven,
            InitKind::PerturbTruth => InitStrategy::PerturbTruth {
                scale: f.init_scale,
                lambda: self.truth.lambda,
                truth: self.truth_measure()?,
            },
        };
        Ok(EmConfig {
            k: f.k,
            max_iters: f.max_iters,
            tol: f.tol,
            restarts: f.restarts,
            xi: f.xi,
            bounds: f.bounds,
            init,
            seed,
        })
    }

    fn loss_context(&self) -> Result<LossContext> {
        LossContext::new(
            self.truth.lambda,
            self.truth_measure()?,
            self.g0.clone(),
            self.study.match_tol,
            self.study.rbar,
        )
    }

    /// Refuses metrics whose theory does not cover the truth's regime.
    pub fn check_metric(&self) -> Result<Regime> {
        let ctx = self.loss_context()?;
        let regime = ctx.regime();
        let lambda_star = self.truth.lambda;
        let mismatch = || Error::RegimeMismatch {
            metric: format!("{:?}", self.study.metric),
            regime: format!("{regime} with lambda* = {lambda_star}"),
        };
        match self.study.metric {
            Metric::D1 | Metric::D2 | Metric::D4 => {
                if lambda_star == 0.0 {
                    return Err(mismatch());
                }
                ctx.check_kind(loss_kind(self.study.metric))?;
            }
            Metric::VanishingLambda => {
                if lambda_star != 0.0 || regime != Regime::Distinguishable {
                    return Err(mismatch());
                }
            }
            Metric::VanishingLambdaTimesD3 => {
                if lambda_star != 0.0 || regime == Regime::Distinguishable {
                    return Err(mismatch());
                }
            }
            Metric::Hellinger => {}
        }
        Ok(regime)
    }
}

fn loss_kind(m: Metric) -> LossKind {
    match m {
        Metric::D2 => LossKind::D2,
        Metric::D4 => LossKind::D4,
        _ => LossKind::D1,
    }
}

/// Outcome of one `(n, trial)` pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub n: usize,
    pub trial: usize,
    pub metric_value: Option<f64>,
    pub lambda_hat: Option<f64>,
    pub converged: bool,
    pub iterations: usize,
    /// Smallest unflagged log-likelihood increment over all restarts.
    pub min_increment: Option<f64>,
    pub max_row_sum_error: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerN {
    pub n: usize,
    pub mean: f64,
    pub stderr: f64,
    /// Trials without a positive metric value (failed fits included).
    pub excluded: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogLogFit {
    pub slope: f64,
    pub intercept: f64,
    pub ci95: (f64, f64),
    pub points: usize,
    pub excluded: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateStudyResult {
    pub config: RateStudyConfig,
    pub regime: Regime,
    pub per_n: Vec<PerN>,
    pub slope: f64,
    pub intercept: f64,
    pub ci95: (f64, f64),
    pub failures: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aborted: Option<String>,
    pub version: String,
    pub wall_seconds: f64,
    pub trials: Vec<TrialRecord>,
}

impl RateStudyResult {
    /// `n,trial,metric_value,lambda_hat,converged`; failed fits leave the
    /// numeric fields empty.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["n", "trial", "metric_value", "lambda_hat", "converged"])?;
        let num = |v: Option<f64>| v.map(|x| format!("{x:?}")).unwrap_or_default();
        for t in &self.trials {
            out.write_record(&[
                t.n.to_string(),
                t.trial.to_string(),
                num(t.metric_value),
                num(t.lambda_hat),
                t.converged.to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}

/// OLS of `log value` on `log n`, skipping non-positive values.
pub fn fit_loglog_slope(points: &[(f64, f64)]) -> Result<LogLogFit> {
    let used: Vec<(f64, f64)> = points
        .iter()
        .filter(|(n, v)| *n > 0.0 && *v > 0.0 && v.is_finite())
        .map(|(n, v)| (n.ln(), v.ln()))
        .collect();
    let excluded = points.len() - used.len();
    if used.len() < 3 {
        return Err(Error::InsufficientData(used.len()));
    }
    let m = used.len() as f64;
    let mx = used.iter().map(|p| p.0).sum::<f64>() / m;
    let my = used.iter().map(|p| p.1).sum::<f64>() / m;
    let sxx: f64 = used.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    if sxx == 0.0 {
        return Err(Error::InvalidInput("all n values coincide".into()));
    }
    let sxy: f64 = used.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let rss: f64 = used
        .iter()
        .map(|p| {
            let r = p.1 - intercept - slope * p.0;
            r * r
        })
        .sum();
    let se = (rss / (m - 2.0) / sxx).sqrt();
    let t = StudentsT::new(0.0, 1.0, m - 2.0)
        .map_err(|e| Error::InvalidInput(e.to_string()))?
        .inverse_cdf(0.975);
    Ok(LogLogFit {
        slope,
        intercept,
        ci95: (slope - t * se, slope + t * se),
        points: used.len(),
        excluded,
    })
}

/// Applies `DMOE_THREADS` to the global worker pool. Returns the cap, if any.
pub fn configure_threads_from_env() -> Result<Option<usize>> {
    let Ok(v) = std::env::var(THREADS_ENV) else {
        return Ok(None);
    };
    let n: usize =
        v.trim().parse().ok().filter(|&n| n > 0).ok_or_else(|| {
            Error::InvalidInput(format!("{THREADS_ENV} must be a positive integer"))
        })?;
    // a pool that is already initialized keeps its size
    let _ = rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global();
    Ok(Some(n))
}

struct Scorer {
    metric: Metric,
    ctx: LossContext,
    truth: DeviatedModel,
    xs: Vec<Vec<f64>>,
    distance: DistanceConfig,
}

impl Scorer {
    fn score(&self, fit: &FitResult) -> Result<f64> {
        let (lambda, g) = (fit.lambda_hat(), fit.g_hat());
        let rbar = &self.ctx.rbar;
        Ok(match self.metric {
            Metric::D1 | Metric::D2 | Metric::D4 => {
                self.ctx.evaluate(loss_kind(self.metric), lambda, g)?.value
            }
            Metric::VanishingLambda => {
                loss_vanishing(lambda, Some(g), Some(&self.ctx.g0), true, rbar)?.value
            }
            Metric::VanishingLambdaTimesD3 => {
                loss_vanishing(lambda, Some(g), Some(&self.ctx.g0), false, rbar)?.value
            }
            Metric::Hellinger => {
                hellinger_on(&fit.model, &self.truth, &self.xs, &self.distance)?.estimate
            }
        })
    }
}

/// Seed of trial `trial` at sample size `n`.
pub fn trial_seed(seed: u64, n: usize, trial: usize) -> u64 {
    derive_seed(derive_seed(seed, n as u64), trial as u64)
}

fn run_trial(cfg: &RateStudyConfig, scorer: &Scorer, n: usize, trial: usize) -> TrialRecord {
    let seed = trial_seed(cfg.study.seed, n, trial);
    let outcome = (|| -> Result<(f64, FitResult)> {
        let data = sample_dataset(
            &scorer.truth,
            &StandardNormalCovariates {
                dim: scorer.truth.dim(),
            },
            n,
            seed,
        )?;
        let fit = fit_mle(&data, &cfg.g0, &cfg.em_config(derive_seed(seed, 1))?)?;
        Ok((scorer.score(&fit)?, fit))
    })();
    match outcome {
        Ok((value, fit)) => TrialRecord {
            n,
            trial,
            metric_value: Some(value),
            lambda_hat: Some(fit.lambda_hat()),
            converged: fit.converged,
            iterations: fit.clipped.len(),
            min_increment: Some(fit.min_increment),
            max_row_sum_error: Some(fit.max_row_sum_error),
            error: None,
        },
        Err(e) => TrialRecord {
            n,
            trial,
            metric_value: None,
            lambda_hat: None,
            converged: false,
            iterations: 0,
            min_increment: None,
            max_row_sum_error: None,
            error: Some(e.to_string()),
        },
    }
}

fn summarize(n: usize, records: &[TrialRecord]) -> PerN {
    let vals: Vec<f64> = records
        .iter()
        .filter_map(|r| r.metric_value)
        .filter(|v| *v > 0.0 && v.is_finite())
        .collect();
    let m = vals.len() as f64;
    let mean = if vals.is_empty() {
        f64::NAN
    } else {
        vals.iter().sum::<f64>() / m
    };
    let stderr = if vals.len() < 2 {
        f64::NAN
    } else {
        (vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (m - 1.0) / m).sqrt()
    };
    PerN {
        n,
        mean,
        stderr,
        excluded: records.len() - vals.len(),
    }
}

/// Runs every `(n, trial)` pair. When failed fits exceed the failure budget
/// the study stops early and `aborted` explains why; completed trials are
/// kept.
pub fn run_rate_study(cfg: &RateStudyConfig) -> Result<RateStudyResult> {
    let start = Instant::now();
    cfg.validate()?;
    let regime = cfg.check_metric()?;
    let truth = cfg.truth_model()?;
    let scorer = Scorer {
        metric: cfg.study.metric,
        ctx: cfg.loss_context()?,
        xs: if cfg.study.metric == Metric::Hellinger {
            covariate_draws(truth.dim(), &cfg.study.distance)?
        } else {
            vec![]
        },
        truth,
        distance: cfg.study.distance,
    };
    let total = cfg.study.n_grid.len() * cfg.study.trials;
    let budget = (cfg.study.failure_budget * total as f64).floor() as usize;
    let mut trials = Vec::with_capacity(total);
    let mut per_n = Vec::new();
    let mut failures = 0;
    let mut aborted = None;
    for &n in &cfg.study.n_grid {
        let records: Vec<TrialRecord> = (0..cfg.study.trials)
            .into_par_iter()
            .map(|t| run_trial(cfg, &scorer, n, t))
            .collect();
        failures += records.iter().filter(|r| r.error.is_some()).count();
        per_n.push(summarize(n, &records));
        trials.extend(records);
        if failures > budget {
            aborted = Some(format!(
                "{failures} failed fits exceed the budget of {budget} (of {total} trials)"
            ));
            break;
        }
    }
    let points: Vec<(f64, f64)> = per_n.iter().map(|p| (p.n as f64, p.mean)).collect();
    let (slope, intercept, ci95) = match fit_loglog_slope(&points) {
        Ok(f) => (f.slope, f.intercept, f.ci95),
        Err(e) if aborted.is_some() => {
            let _ = e;
            (f64::NAN, f64::NAN, (f64::NAN, f64::NAN))
        }
        Err(e) => return Err(e),
    };
    Ok(RateStudyResult {
        config: cfg.clone(),
        regime,
        per_n,
        slope,
        intercept,
        ci95,
        failures,
        aborted,
        version: env!("CARGO_PKG_VERSION").to_string(),
        wall_seconds: start.elapsed().as_secs_f64(),
        trials,
    })
}
