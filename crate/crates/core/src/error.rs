use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Errors produced by geometry, solvers, denoising and I/O.
#[derive(Debug, Error)]
pub enum Error {
    #[error("point is behind the camera")]
    PointBehindCamera,

    #[error("undistortion did not converge within the iteration cap")]
    NoConvergence,

    #[error("matrix is not an orthonormal rotation")]
    NonOrthonormalRotation,

    #[error("depth must be strictly positive, got {0}")]
    NonPositiveDepth(f64),

    #[error("degenerate configuration: {0}")]
    DegenerateConfiguration(String),

    #[error("numerical failure: {0}")]
    NumericalFailure(String),

    #[error("corner grid incomplete: expected {expected} corners, got {got}")]
    GridIncomplete { expected: usize, got: usize },

    #[error("RANSAC consensus too small: {found} inliers of {total} points")]
    InsufficientInliers { found: usize, total: usize },

    #[error("ray is parallel to the plane")]
    RayParallelToPlane,

    #[error("ray-plane intersection lies behind the camera")]
    NegativeIntersection,

    #[error("plane fit failed: {0}")]
    PlaneFitFailed(#[source] Box<Error>),

    #[error("image {0} has no usable depth measurement")]
    MissingDepth(usize),

    #[error("groundtruth missing: {0}")]
    MissingGroundtruth(String),

    #[error("requested subset exceeds the dataset: {0}")]
    SubsetTooLarge(String),

    #[error("pose sampling exhausted {0} rejection attempts")]
    RejectionExhausted(usize),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("unsupported schema version {found}, expected {expected}")]
    SchemaVersionMismatch { found: u32, expected: u32 },

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn degenerate(msg: impl Into<String>) -> Self {
        Error::DegenerateConfiguration(msg.into())
    }

    pub(crate) fn numerical(msg: impl Into<String>) -> Self {
        Error::NumericalFailure(msg.into())
    }

    pub(crate) fn stage(stage: &'static str, source: Error) -> Self {
        Error::Stage {
            stage,
            source: Box::new(source),
        }
    }
}
