use thiserror::Error;

pub type Result<T> = std::result::Result<T, FraError>;

/// Every failure the library can report. The CLI maps variants onto exit codes.
#[derive(Debug, Error)]
pub enum FraError {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("sampling error: no eligible {category} negative for {key}")]
    Sampling { category: &'static str, key: String },

    #[error("load error: {0}")]
    Load(String),

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<FraError>,
    },

    #[error("non-finite loss at step {step}: {breakdown}")]
    NonFinite { step: u64, breakdown: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl FraError {
    pub fn config(msg: impl Into<String>) -> Self {
        FraError::Config(msg.into())
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        FraError::Contract(msg.into())
    }

    pub fn input(msg: impl Into<String>) -> Self {
        FraError::Input(msg.into())
    }

    pub fn load(msg: impl Into<String>) -> Self {
        FraError::Load(msg.into())
    }

    /// True for errors caused by bad configuration or inputs rather than by computation.
    pub fn is_validation(&self) -> bool {
        match self {
            FraError::Config(_)
            | FraError::Input(_)
            | FraError::Load(_)
            | FraError::Dimension { .. }
            | FraError::Csv(_)
            | FraError::Json(_) => true,
            FraError::Stage { source, .. } => source.is_validation(),
            _ => false,
        }
    }
}

pub trait StageExt<T> {
    fn stage(self, stage: &'static str) -> Result<T>;
}

impl<T> StageExt<T> for Result<T> {
    fn stage(self, stage: &'static str) -> Result<T> {
        self.map_err(|e| FraError::Stage {
            stage,
            source: Box::new(e),
        })
    }
}
