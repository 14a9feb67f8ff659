//! `dmoe`: simulate, fit and score deviated Gaussian mixtures of experts.
//!
//! Exit status is 0 on success, 1 on invalid input or usage, and 2 when a
//! numerical procedure fails.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use dmoe_core::em::{fit_mle, EmConfig, InitStrategy};
use dmoe_core::gauss::{distinguishability_score, GridSpec, DEFAULT_RANK_THRESHOLD};
use dmoe_core::harness::{configure_threads_from_env, run_rate_study, RateStudyConfig};
use dmoe_core::metrics::{hellinger, total_variation, DistanceConfig, DistanceEstimate};
use dmoe_core::model::{sample_dataset, StandardNormalCovariates};
use dmoe_core::polysys::{verify_r_bar, PolySysConfig};
use dmoe_core::voronoi::{
    classify_regime, loss_d3, loss_vanishing, LossContext, LossKind, RBarTable, Regime,
    DEFAULT_MATCH_TOL,
};
use dmoe_core::{Dataset, DeviatedModel, Error, MixingMeasure, Result};

#[derive(Parser)]
#[command(name = "dmoe", version, about = "Deviated Gaussian mixture of experts toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw a dataset from a model and write it as CSV.
    Simulate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output file (stdout when omitted).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fit `(lambda, G)` by multistart EM with `g0` known.
    Fit {
        #[arg(long)]
        data: PathBuf,
        /// `g0` as a mixture document or a bare atom.
        #[arg(long)]
        g0: PathBuf,
        #[arg(long)]
        k: usize,
        #[arg(long, default_value_t = 1000)]
        max_iters: usize,
        #[arg(long, default_value_t = 1e-8)]
        tol: f64,
        #[arg(long, default_value_t = 10)]
        restarts: usize,
        #[arg(long, default_value_t = 1e-3)]
        xi: f64,
        #[arg(long, value_enum, default_value_t = InitArg::DataDriven)]
        init: InitArg,
        /// Model document whose mixture seeds `perturb-truth` starts.
        #[arg(long)]
        truth: Option<PathBuf>,
        #[arg(long, default_value_t = 0.5)]
        init_scale: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Loss between a fitted model and the truth.
    Loss {
        /// Model document or the output of `fit`.
        #[arg(long)]
        fitted: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long, value_enum)]
        metric: LossArg,
        #[arg(long, default_value_t = DEFAULT_MATCH_TOL)]
        match_tol: f64,
        /// Exponent for cells of four or more fitted atoms.
        #[arg(long)]
        rbar_fallback: Option<u32>,
    },
    /// Convergence-rate study from a TOML configuration.
    RateStudy {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the seed in the configuration.
        #[arg(long)]
        seed: Option<u64>,
        /// Summary JSON (stdout when omitted).
        #[arg(long)]
        json: Option<PathBuf>,
        /// Per-trial CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// The polynomial system behind the loss exponents.
    Polysys {
        #[command(subcommand)]
        action: PolysysCommand,
    },
    /// Rank test of the derivative family of a mixture against `g0`.
    Distinguish {
        /// Model document; its mixture is tested against its `g0`.
        #[arg(long)]
        model: PathBuf,
        /// Orders `r_i`, one per atom, comma separated.
        #[arg(long, value_delimiter = ',', required = true)]
        r: Vec<usize>,
        #[arg(long, default_value_t = 64)]
        x_nodes: usize,
        #[arg(long, default_value_t = 3.0)]
        x_half_width: f64,
        #[arg(long, default_value_t = 64)]
        y_points: usize,
        #[arg(long, default_value_t = DEFAULT_RANK_THRESHOLD)]
        threshold: f64,
    },
    /// Total Variation and Hellinger distances between two models.
    Distance {
        #[arg(long)]
        first: PathBuf,
        #[arg(long)]
        second: PathBuf,
        #[arg(long, default_value_t = 2000)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Subcommand)]
enum PolysysCommand {
    /// Search for solutions at `rbar(m) - 1` and `rbar(m)`.
    Verify {
        #[arg(long)]
        m: usize,
        #[arg(long, default_value_t = 200)]
        starts: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Best residual at `rbar(m)` must exceed this.
        #[arg(long, default_value_t = 1e-4)]
        separation: f64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum InitArg {
    RandomInBox,
    PerturbTruth,
    DataDriven,
}

#[derive(Clone, Copy, ValueEnum)]
enum LossArg {
    D1,
    D2,
    D3,
    D4,
    VanishingLambda,
    VanishingLambdaTimesD3,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
}

fn emit<T: Serialize>(value: &T, path: Option<&Path>) -> Result<()> {
    match path {
        Some(p) => {
            let mut w = BufWriter::new(File::create(p)?);
            serde_json::to_writer_pretty(&mut w, value)?;
            writeln!(w)?;
            w.flush()?;
        }
        None => {
            let mut out = io::stdout().lock();
            serde_json::to_writer_pretty(&mut out, value)?;
            writeln!(out)?;
        }
    }
    Ok(())
}

/// Reads a model document, or the `model` entry of a `fit` result.
fn read_model(path: &Path) -> Result<DeviatedModel> {
    let mut value: serde_json::Value = read_json(path)?;
    if let Some(inner) = value.get_mut("model").map(serde_json::Value::take) {
        value = inner;
    }
    Ok(serde_json::from_value(value)?)
}

/// Reads `g0` either as a model document's reference or directly.
fn read_reference(path: &Path) -> Result<MixingMeasure> {
    let value: serde_json::Value = read_json(path)?;
    if let Ok(m) = serde_json::from_value::<MixingMeasure>(value.clone()) {
        return Ok(m);
    }
    let atom = serde_json::from_value(value)?;
    MixingMeasure::single(atom)
}

#[derive(Serialize)]
struct Distances {
    total_variation: DistanceEstimate,
    hellinger: DistanceEstimate,
}

fn run(cli: Cli) -> Result<()> {
    configure_threads_from_env()?;
    match cli.command {
        Command::Simulate {
            model,
            n,
            seed,
            out,
        } => {
            let m: DeviatedModel = read_model(&model)?;
            let data = sample_dataset(&m, &StandardNormalCovariates { dim: m.dim() }, n, seed)?;
            match out {
                Some(p) => data.write_csv(BufWriter::new(File::create(p)?)),
                None => data.write_csv(io::stdout().lock()),
            }
        }
        Command::Fit {
            data,
            g0,
            k,
            max_iters,
            tol,
            restarts,
            xi,
            init,
            truth,
            init_scale,
            seed,
        } => {
            let data = Dataset::read_csv(BufReader::new(File::open(data)?))?;
            let g0 = read_reference(&g0)?;
            let init = match init {
                InitArg::RandomInBox => InitStrategy::RandomInBox,
                InitArg::DataDriven => InitStrategy::DataDriven,
                InitArg::PerturbTruth => {
                    let path = truth.ok_or_else(|| {
                        Error::InvalidInput("perturb-truth needs --truth".into())
                    })?;
                    let t: DeviatedModel = read_model(&path)?;
                    InitStrategy::PerturbTruth {
                        scale: init_scale,
                        lambda: t.lambda(),
                        truth: t.mixture().clone(),
                    }
                }
            };
            let cfg = EmConfig {
                max_iters,
                tol,
                restarts,
                xi,
                seed,
                ..EmConfig::new(k, init)
            };
            emit(&fit_mle(&data, &g0, &cfg)?, None)
        }
        Command::Loss {
            fitted,
            truth,
            metric,
            match_tol,
            rbar_fallback,
        } => {
            let fitted: DeviatedModel = read_model(&fitted)?;
            let truth: DeviatedModel = read_model(&truth)?;
            let rbar = RBarTable {
                fallback_exponent: rbar_fallback,
            };
            let ctx = LossContext::new(
                truth.lambda(),
                truth.mixture().clone(),
                truth.g0().clone(),
                match_tol,
                rbar,
            )?;
            let (lambda, g) = (fitted.lambda(), fitted.mixture());
            let report = match metric {
                LossArg::D1 => ctx.evaluate(LossKind::D1, lambda, g)?,
                LossArg::D2 => {
                    ctx.check_kind(LossKind::D2)?;
                    ctx.evaluate(LossKind::D2, lambda, g)?
                }
                LossArg::D4 => {
                    ctx.check_kind(LossKind::D4)?;
                    ctx.evaluate(LossKind::D4, lambda, g)?
                }
                LossArg::D3 => loss_d3(g, truth.mixture(), &rbar)?,
                LossArg::VanishingLambda | LossArg::VanishingLambdaTimesD3 => {
                    let distinguishable =
                        classify_regime(truth.mixture(), Some(truth.g0()), match_tol)?.regime
                            == Regime::Distinguishable;
                    let want = matches!(metric, LossArg::VanishingLambda);
                    if distinguishable != want {
                        return Err(Error::RegimeMismatch {
                            metric: if want {
                                "VanishingLambda".into()
                            } else {
                                "VanishingLambdaTimesD3".into()
                            },
                            regime: ctx.regime().to_string(),
                        });
                    }
                    loss_vanishing(lambda, Some(g), Some(truth.g0()), distinguishable, &rbar)?
                }
            };
            emit(&report, None)
        }
        Command::RateStudy {
            config,
            seed,
            json,
            csv,
        } => {
            let mut cfg = RateStudyConfig::from_toml(&std::fs::read_to_string(config)?)?;
            if let Some(s) = seed {
                cfg.study.seed = s;
            }
            let result = run_rate_study(&cfg)?;
            if let Some(p) = csv {
                result.write_csv(BufWriter::new(File::create(p)?))?;
            }
            emit(&result, json.as_deref())?;
            match result.aborted {
                Some(reason) => Err(Error::StudyAborted(reason)),
                None => Ok(()),
            }
        }
        Command::Polysys {
            action:
                PolysysCommand::Verify {
                    m,
                    starts,
                    seed,
                    separation,
                },
        } => {
            let cfg = PolySysConfig {
                starts,
                seed,
                ..PolySysConfig::default()
            };
            emit(&verify_r_bar(m, &cfg, separation)?, None)
        }
        Command::Distinguish {
            model,
            r,
            x_nodes,
            x_half_width,
            y_points,
            threshold,
        } => {
            let m: DeviatedModel = read_model(&model)?;
            let grid = GridSpec::lattice(&[m.mixture(), m.g0()], x_nodes, x_half_width, y_points)?;
            emit(
                &distinguishability_score(m.mixture(), m.g0(), &r, &grid, threshold)?,
                None,
            )
        }
        Command::Distance {
            first,
            second,
            samples,
            seed,
        } => {
            let a: DeviatedModel = read_model(&first)?;
            let b: DeviatedModel = read_model(&second)?;
            let cfg = DistanceConfig {
                samples,
                seed,
                ..DistanceConfig::default()
            };
            emit(
                &Distances {
                    total_variation: total_variation(&a, &b, &cfg)?,
                    hellinger: hellinger(&a, &b, &cfg)?,
                },
                None,
            )
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 2 } else { 1 })
        }
    }
}
