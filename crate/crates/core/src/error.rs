use thiserror::Error;

/// Every failure the library can report.
///
/// The CLI maps variants onto process exit codes with [`Error::exit_code`].
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("config error: {0}")]
    Config(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("evaluation error: {0}")]
    Evaluation(String),
    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),
    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },
    #[error("range error: {0}")]
    Range(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("dependency error: {0}")]
    Dependency(String),
    #[error("incompatible checkpoint: {0}")]
    Compatibility(String),
    #[error("loss diverged in phase {phase} at epoch {epoch}")]
    Divergence { phase: String, epoch: usize },
    #[error("internal invariant violated: {0}")]
    Invariant(String),
    #[error("data error: {0}")]
    Data(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn format(offset: u64, msg: impl Into<String>) -> Self {
        Error::Format {
            offset,
            msg: msg.into(),
        }
    }

    /// 2 = configuration, 3 = data, 4 = numeric or I/O abort.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Contract(_) | Error::Compatibility(_) | Error::Domain(_) => 2,
            Error::Format { .. } | Error::Data(_) | Error::Range(_) | Error::Dependency(_) => 3,
            Error::Dimension { .. }
            | Error::Evaluation(_)
            | Error::NonFiniteGradient(_)
            | Error::Divergence { .. }
            | Error::Invariant(_)
            | Error::Io(_) => 4,
        }
    }
}
