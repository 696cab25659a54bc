use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("invalid design matrix: {0}")]
    InvalidDesign(String),

    #[error("invalid prior: {0}")]
    InvalidPrior(String),

    #[error("invalid kernel: {0}")]
    InvalidKernel(String),

    #[error("invalid valuation: {0}")]
    InvalidValuation(String),

    #[error("conditioning cube has zero prior mass (coordinate {coordinate})")]
    EmptyMass { coordinate: usize },

    #[error("exact optimisation over {size} items exceeds the brute-force limit of {limit}")]
    TooLargeForExact { size: usize, limit: usize },

    #[error("query block is not diagonally dominant: {0}")]
    NotDiagonallyDominant(String),

    #[error("design restricted to the query rows is rank deficient (sigma_min = {sigma_min:e}, sigma_max = {sigma_max:e})")]
    RankDeficient { sigma_min: f64, sigma_max: f64 },

    #[error("grand bundle pricing is single-bidder only, got {bidders} bidders")]
    MultiBidderUnsupported { bidders: usize },

    #[error("epsilon net dimension {0} is above the supported maximum of 4")]
    DimensionTooLarge(usize),

    #[error("covariance matrix is not positive semidefinite (min eigenvalue {0:e})")]
    NotPsd(f64),

    #[error("joint too large for exhaustive enumeration: {0}")]
    TooLarge(String),

    #[error("invalid joint table: {0}")]
    InvalidJoint(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("config error at `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("io error: {0}")]
    Io(String),
}

impl Error {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
