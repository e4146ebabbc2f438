use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown dataset `{0}`")]
    UnknownDataset(String),
    #[error("invalid task partition: {0}")]
    Partition(String),
    #[error("invalid noise spec: {0}")]
    Noise(String),
    #[error("unknown task {0}")]
    UnknownTask(usize),
    #[error("head for task {0} is already expanded")]
    AlreadyExpanded(usize),
    #[error("head for task {0} is not expanded")]
    NotExpanded(usize),
    #[error("architecture mismatch: {0}")]
    ArchitectureMismatch(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("non-finite density score at sample {index}")]
    NonFiniteScore { index: usize },
    #[error("label {0} is not registered with the flow")]
    UnregisteredLabel(usize),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("missing continual-learning anchor for task {0}")]
    MissingAnchor(usize),
    #[error("replay requested without a flow snapshot")]
    MissingSnapshot,
    #[error("accuracy matrix: {0}")]
    Matrix(String),
    #[error("erasure diverged at step {step}; pre-erasure parameters restored")]
    ErasureDiverged { step: usize },
    #[error("config: {0}")]
    Config(String),
    #[error("data format: {0}")]
    Format(String),
    #[error("training failed on task {task}: {reason}")]
    Training { task: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
