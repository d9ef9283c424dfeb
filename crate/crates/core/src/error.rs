use std::fmt;

/// Which clause of the doubly stochastic mixing assumption a matrix violated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MixingViolation {
    NotSquare,
    Asymmetry,
    NegativeEntry,
    DiagonalOutOfRange,
    RowSum,
    EigenvalueOutOfRange,
    SpectralGap,
}

impl fmt::Display for MixingViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            MixingViolation::NotSquare => "not-square",
            MixingViolation::Asymmetry => "asymmetry",
            MixingViolation::NegativeEntry => "negative-entry",
            MixingViolation::DiagonalOutOfRange => "diagonal-out-of-range",
            MixingViolation::RowSum => "row-sum",
            MixingViolation::EigenvalueOutOfRange => "eigenvalue-out-of-range",
            MixingViolation::SpectralGap => "sigma2-not-below-one",
        };
        f.write_str(name)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("singular input: smallest singular value {sigma_min:e} vs largest {sigma_max:e}")]
    SingularInput { sigma_min: f64, sigma_max: f64 },

    #[error("dimension mismatch in {context}: expected {expected:?}, found {found:?}")]
    Dimension {
        context: &'static str,
        expected: (usize, usize),
        found: (usize, usize),
    },

    #[error("matrix is not a Stiefel point: orthonormality residual {residual:e}")]
    NotOnManifold { residual: f64 },

    #[error("invalid size: {0}")]
    InvalidSize(String),

    #[error("graph generation failed after {attempts} attempts (n={n}, p={p})")]
    GenerationFailure { n: usize, p: f64, attempts: usize },

    #[error("invalid graph: {0}")]
    InvalidGraph(String),

    #[error("invalid mixing matrix ({violation}): {detail}")]
    InvalidMixing {
        violation: MixingViolation,
        detail: String,
    },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid radius: delta={delta} must lie in [0, R={radius})")]
    InvalidRadius { delta: f64, radius: f64 },

    #[error("arithmetic mean outside the projection tube: dist={dist:e}")]
    TubeViolation { dist: f64 },

    #[error("out of range: {0}")]
    OutOfRange(String),

    #[error("format error in field `{field}`: {detail}")]
    Format { field: &'static str, detail: String },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("agent {agent}{}: {source}", iteration.map(|k| format!(" at iteration {k}")).unwrap_or_default())]
    Agent {
        agent: usize,
        iteration: Option<usize>,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn at_agent(self, agent: usize, iteration: Option<usize>) -> Error {
        Error::Agent {
            agent,
            iteration,
            source: Box::new(self),
        }
    }

    /// Stamps the iteration onto an agent-tagged error.
    pub(crate) fn with_iteration(self, k: usize) -> Error {
        match self {
            Error::Agent { agent, source, .. } => Error::Agent {
                agent,
                iteration: Some(k),
                source,
            },
            other => other,
        }
    }

    /// True for failures caused by the numerics (singular projections, tube exits),
    /// as opposed to bad configuration or bad data.
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::SingularInput { .. }
            | Error::NotOnManifold { .. }
            | Error::TubeViolation { .. }
            | Error::OutOfRange(_) => true,
            Error::Agent { source, .. } => source.is_numerical(),
            _ => false,
        }
    }

    pub fn is_data(&self) -> bool {
        match self {
            Error::Format { .. } | Error::Io(_) => true,
            Error::Agent { source, .. } => source.is_data(),
            _ => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
