use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid scene: {0}")]
    InvalidScene(String),
    #[error("invalid viewpoint: {0}")]
    InvalidViewpoint(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("non-finite field parameters")]
    NonFiniteParams,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("keyframe pool is empty")]
    EmptyPool,
    #[error("empty batch")]
    EmptyBatch,
    #[error("band unreachable: no feasible candidate after {attempts} attempts")]
    BandUnreachable { attempts: usize },
    #[error("no reachable candidate")]
    NoReachableCandidate,
    #[error("goal unreachable after {iterations} iterations")]
    GoalUnreachable { iterations: usize },
    #[error("endpoint violates clearance: {0}")]
    EndpointInCollision(String),
    #[error("image too small for SSIM window: {width}x{height}")]
    ImageTooSmall { width: usize, height: usize },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("empty point cloud")]
    EmptyCloud,
    #[error("no density crossings found")]
    NoCrossings,
    #[error("degenerate variance in correlation input")]
    DegenerateVariance,
    #[error("insufficient checkpoints: need at least {needed}, got {got}")]
    InsufficientCheckpoints { needed: usize, got: usize },
    #[error("checkpoint format: {0}")]
    Checkpoint(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("png encoding: {0}")]
    Png(#[from] png::EncodingError),
    #[error("config parse: {0}")]
    Toml(#[from] toml::de::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("worker thread failed: {0}")]
    Worker(String),
}

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
