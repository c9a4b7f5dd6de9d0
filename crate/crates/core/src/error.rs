use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid geometry: {0}")]
    Geometry(String),

    #[error("invalid gadget spec: {0}")]
    Gadget(String),

    #[error("empty gadget")]
    EmptyGadget,

    #[error("invalid replay rounds: {0}")]
    Rounds(String),

    #[error("invalid noise model: {0}")]
    Noise(String),

    #[error("invalid sweep grid: {0}")]
    Grid(String),

    #[error("dataset has no measurement for B={b}, N={n}")]
    MissingCell { b: u64, n: u64 },

    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("cannot merge matrices: {0}")]
    Merge(String),

    #[error("matrix: {0}")]
    Matrix(String),

    #[error("invalid inference config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
