use thiserror::Error;

/// Errors raised by the library. Variants are coarse on purpose: the CLI maps
/// them onto exit codes (configuration vs. numerical failure).
#[derive(Debug, Error)]
pub enum IvError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("rank deficiency in {what}")]
    RankDeficient { what: String },

    #[error("technical condition violated: {0}")]
    Condition(String),

    #[error("argument out of domain: {0}")]
    Domain(String),

    #[error("no convergence in {what}: {detail}")]
    Convergence { what: String, detail: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("cannot parse field `{column}` on line {line}: {value:?}")]
    Parse {
        line: usize,
        column: String,
        value: String,
    },

    #[error("missing column `{0}`")]
    MissingColumn(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl IvError {
    /// True for errors caused by user input rather than by the numerics.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            IvError::Dimension(_)
                | IvError::Config(_)
                | IvError::Parse { .. }
                | IvError::MissingColumn(_)
                | IvError::Io(_)
                | IvError::Csv(_)
                | IvError::Domain(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, IvError>;
