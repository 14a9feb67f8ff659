use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("derivative order {order} exceeds the supported maximum {max}")]
    UnsupportedOrder { order: usize, max: usize },

    #[error("finite-difference step {step} is too large for variance {sigma}")]
    InvalidStep { step: f64, sigma: f64 },

    #[error("evaluation grid has {points} points but {functions} functions are tested (need at least twice as many points)")]
    InvalidGrid { points: usize, functions: usize },

    #[error("no loss exponent is defined for a Voronoi cell of cardinality {cardinality}")]
    UnsupportedCellSize { cardinality: usize },

    #[error("mixing proportion {lambda} produces negative weight {weight} at atom {index}")]
    InvalidProportion {
        lambda: f64,
        index: usize,
        weight: f64,
    },

    #[error("normalizer s(lambda) = {0} is not positive")]
    DegenerateNormalizer(f64),

    #[error("invalid configuration: {0}")]
    InvalidConfiguration(String),

    #[error("missing reference measure: {0}")]
    MissingReference(&'static str),

    #[error("metric {metric} is not valid for regime {regime}")]
    RegimeMismatch { metric: String, regime: String },

    #[error("all mixture components underflow at data index {index}")]
    NumericalDegeneracy { index: usize },

    #[error("EM fit failed: {0}")]
    FitFailure(String),

    #[error("quadrature did not converge on [{lo}, {hi}]")]
    QuadratureFailure { lo: f64, hi: f64 },

    #[error("need at least 3 positive points for a slope fit, got {0}")]
    InsufficientData(usize),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("study aborted: {0}")]
    StudyAborted(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Toml(#[from] toml::de::Error),
}

impl Error {
    /// True for failures of a numerical procedure (as opposed to bad input).
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NumericalDegeneracy { .. }
                | Error::FitFailure(_)
                | Error::QuadratureFailure { .. }
                | Error::DegenerateNormalizer(_)
                | Error::StudyAborted(_)
        )
    }
}

pub(crate) fn ensure_finite(name: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!("{name} is not finite ({v})")))
    }
}
