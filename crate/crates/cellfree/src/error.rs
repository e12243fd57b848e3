use thiserror::Error;

#[derive(Debug, Error)]
pub enum CellFreeError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("numerical error: {0}")]
    Numerical(String),
    #[error("infeasible: {0}")]
    Infeasible(String),
    #[error("no convergence after {iterations} iterations: {what}")]
    NonConvergence { what: String, iterations: usize },
    #[error("setup {setup}: {source}")]
    Setup {
        setup: usize,
        #[source]
        source: Box<CellFreeError>,
    },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, CellFreeError>;
