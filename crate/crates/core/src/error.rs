use svla_numerics::NumericsError;

#[derive(Debug, thiserror::Error)]
pub enum SvlaError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("placement failed: {0}")]
    Placement(String),
    #[error("degenerate camera rig: {0}")]
    DegenerateRig(String),
    #[error("infeasible expert plan: {0}")]
    Infeasible(String),
    #[error("dataset: {0}")]
    Dataset(String),
    #[error("config: {0}")]
    Config(String),
    #[error("shape: {0}")]
    Shape(String),
    #[error("unknown word `{word}`; vocabulary: {vocab}")]
    UnknownWord { word: String, vocab: String },
    #[error("invalid query: {0}")]
    Query(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("missing target: {0}")]
    MissingTarget(String),
}
