use thiserror::Error;

#[derive(Debug, Error)]
pub enum MehlerError {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("time {time} is not aligned to the base grid (step {step})")]
    Misaligned { time: f64, step: f64 },

    #[error("numerical blow-up while integrating at t = {0}")]
    NumericalBlowup(f64),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("propagator cache miss for ({s}, {t}) after freeze")]
    CacheMiss { s: f64, t: f64 },

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("atom limit exceeded: {count} atoms > cap {cap}")]
    AtomCap { count: usize, cap: usize },

    #[error("stability violation: {0}")]
    StabilityViolation(String),

    #[error("periodicity check failed: {0}")]
    Periodicity(String),

    #[error("range condition violated: {0}")]
    Range(String),

    #[error("control synthesis failed: {0}")]
    Control(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("{check}: {source}")]
    Check {
        check: String,
        #[source]
        source: Box<MehlerError>,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl MehlerError {
    pub fn in_check(self, check: &str) -> Self {
        MehlerError::Check { check: check.to_string(), source: Box::new(self) }
    }

    /// Whether the error stems from user configuration rather than a computation.
    pub fn is_config(&self) -> bool {
        match self {
            MehlerError::Config(_) | MehlerError::Io(_) => true,
            MehlerError::Check { source, .. } => source.is_config(),
            _ => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, MehlerError>;
