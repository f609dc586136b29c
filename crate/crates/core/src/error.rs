use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("no information: every track has zero precision")]
    NoInformation,

    #[error("initialization failed: {0}")]
    InitFailure(String),

    #[error("tracking lost at keyframe {keyframe}: {tracks} usable tracks, need {required}")]
    TrackingLost {
        keyframe: usize,
        tracks: usize,
        required: usize,
    },

    #[error("solver failure: {0}")]
    SolverFailure(String),

    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("point cloud is empty")]
    EmptyCloud,

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code used by the command-line runner.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::InitFailure(_) => 3,
            Error::TrackingLost { .. } => 4,
            Error::SolverFailure(_) => 5,
            _ => 1,
        }
    }
}
