use thiserror::Error;

/// Errors produced by feature stores, the adapter stack, training, and
/// retrieval evaluation.
#[derive(Debug, Error)]
pub enum Error {
    #[error("empty feature map")]
    EmptyFeatureMap,

    #[error("non-finite feature")]
    NonFiniteFeature,

    #[error("degenerate vector")]
    DegenerateVector,

    #[error("unrecognized format")]
    UnrecognizedFormat,

    #[error("corrupt feature file")]
    CorruptFeatureFile,

    #[error("duplicate record id: {0}")]
    DuplicateRecordId(String),

    #[error("adapter/input dim mismatch: adapter takes {expected}, input has {actual}")]
    AdapterDimMismatch { expected: usize, actual: usize },

    #[error("residual requires equal dims: d0={d0}, d={d}")]
    ResidualDimMismatch { d0: usize, d: usize },

    #[error("degenerate adapted vector at record {0}")]
    DegenerateAdaptedVector(usize),

    #[error("reverter/input dim mismatch: reverter takes {expected}, input has {actual}")]
    ReverterDimMismatch { expected: usize, actual: usize },

    #[error("no references")]
    NoReferences,

    #[error("temperature must be positive, got {0}")]
    NonPositiveTemperature(f64),

    #[error("reconstruction shape mismatch: {left} vs {right}")]
    ReconstructionShapeMismatch { left: String, right: String },

    #[error("gradient blow-up in parameter block `{0}`")]
    GradientBlowUp(&'static str),

    #[error("pseudo-labeling collapsed: {0} consecutive fully-masked iterations")]
    PseudoLabelingCollapsed(usize),

    #[error("corrupt checkpoint")]
    CorruptCheckpoint,

    #[error("checkpoint version mismatch: expected {expected}, found {found}")]
    CheckpointVersionMismatch { expected: u32, found: u32 },

    #[error("checkpoint shape mismatch: {0}")]
    CheckpointShapeMismatch(String),

    #[error("missing geo-tag for reference `{0}`")]
    MissingGeoTag(String),

    #[error("ground truth ids not found: {0}")]
    UnknownGroundTruthIds(String),

    #[error("{0}")]
    InvalidInput(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
