use std::path::PathBuf;

/// Crate-wide error type. Variants map onto the CLI exit codes: config
/// problems exit 2, I/O problems exit 3, numeric failures exit 4.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("degenerate direction vectors: {0}")]
    DegenerateDirections(String),

    #[error("direction vectors are not orthonormal: {0}")]
    InvalidDirections(String),

    #[error("grasp width {0} outside [0, w_max={1}]")]
    WidthOutOfRange(f64, f64),

    #[error("negative grasp width: {0}")]
    NegativeWidth(f64),

    #[error("invalid shape parameters for {category}: {reason}")]
    InvalidShapeParams { category: String, reason: String },

    #[error("point cloud is missing normals")]
    MissingNormals,

    #[error("empty point cloud")]
    EmptyCloud,

    #[error("non-finite input: {0}")]
    NonFiniteInput(String),

    #[error("training diverged: {0}")]
    DivergenceDetected(String),

    #[error("degenerate rotation 6d encoding")]
    DegenerateRotation,

    #[error("invalid config: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {reason}")]
    Format { path: PathBuf, reason: String },
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// Process exit code for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Io { .. } | Error::Format { .. } => 3,
            _ => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
