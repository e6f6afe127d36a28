use thiserror::Error;

/// Everything that can go wrong inside the estimation pipeline.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("newick parse error at byte {pos}: {msg}")]
    Parse { pos: usize, msg: String },

    #[error("invalid topology: {0}")]
    Topology(String),

    #[error("invalid edge id {0}")]
    InvalidEdge(usize),

    #[error("edges must be distinct (got {0} twice)")]
    SameEdge(usize),

    #[error("invalid parameter box: {0}")]
    ParamBox(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("tree has {leaves} leaves; enumeration is limited to {limit}")]
    TooLarge { leaves: usize, limit: usize },

    #[error("degenerate parameter: {0}")]
    Degenerate(String),

    #[error("leaf pattern has zero probability at a boundary parameter")]
    ZeroProbability,

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("scan budget exceeded: {0}")]
    Budget(String),

    #[error("sample file: {0}")]
    Samples(String),

    #[error("config: {0}")]
    Config(String),

    #[error("io: {0}")]
    Io(String),
}

impl Error {
    /// Numerical failures, as opposed to bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Degenerate(_) | Error::ZeroProbability | Error::NonFinite(_)
        )
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
