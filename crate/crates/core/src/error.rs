use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// The dephasing model violates an assumption the closed-form expressions rely on.
    #[error("invalid model: {0}")]
    InvalidModel(String),

    /// Log-sensitivity divides by the nominal error, which is (numerically) zero here.
    #[error("degenerate controller: nominal error {0:e} is too small for log-sensitivity")]
    DegenerateController(f64),

    #[error("numerical integrity failure: {0}")]
    NumericalIntegrity(String),

    #[error("controller synthesis failed: {0}")]
    Synthesis(String),

    #[error("malformed data: {0}")]
    Format(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Whether the failure indicates corrupted numerics rather than bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::NumericalIntegrity(_))
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
