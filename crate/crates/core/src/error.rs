use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid user-supplied configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// Malformed data file or inconsistent record layout.
    #[error("format error: {0}")]
    Format(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    /// A solver failed or produced non-finite values.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// State norm exceeded the divergence bound during simulation.
    #[error("simulation became unstable at step {step} (|x| = {norm:.3e})")]
    Instability { step: usize, norm: f64 },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// Process exit code: 2 for configuration and format problems, 3 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Format(_) | Error::Io { .. } | Error::Json(_) | Error::Csv(_) => 2,
            Error::InsufficientData(_) => 2,
            Error::Numerical(_) | Error::Instability { .. } => 3,
        }
    }
}
