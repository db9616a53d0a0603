use thiserror::Error;

/// Errors raised while building, decomposing or fitting a multitier chain.
#[derive(Debug, Error)]
pub enum Error {
    #[error("structure error: {0}")]
    Structure(String),
    #[error("chain error: {0}")]
    Chain(String),
    #[error("balance failure at {stage}: {detail}")]
    Balance { stage: String, detail: String },
    #[error("not applicable: {0}")]
    NotApplicable(String),
    #[error("estimation error: {0}")]
    Estimation(String),
    #[error("{file}:{line}: {message}")]
    Parse { file: String, line: usize, message: String },
    #[error("data error: {0}")]
    Data(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("unsupported: {0}")]
    Unsupported(String),
}

pub type Result<T> = std::result::Result<T, Error>;
