//! Novel category discovery via rank statistics, at desk scale.
//!
//! The pipeline learns a shared representation in three stages (self-supervised
//! rotation pretext, supervised fine-tune on the labelled classes, joint
//! discovery training) and clusters a disjoint unlabelled set into a known
//! number of new classes. Pairwise pseudo-labels come from comparing the top-k
//! ranked feature dimensions of sample pairs; evaluation uses Hungarian-matched
//! clustering accuracy.

pub mod config;
pub mod data;
pub mod eval;
pub mod losses;
pub mod model;
pub mod ndcore;
pub mod pipeline;
pub mod rankstats;
pub mod rng;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("parse error at byte {offset}: {msg}")]
    Parse { offset: usize, msg: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("invalid state: {0}")]
    State(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("incompatible checkpoint: {0}")]
    Incompatible(String),
    #[error("missing dependency: {0}")]
    Dependency(String),
    #[error("configuration invalid:\n  {}", .0.join("\n  "))]
    Config(Vec<String>),
}

impl Error {
    /// CLI exit code contract: 1 validation, 2 dependency, 3 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Dependency(_) => 2,
            Error::Numeric(_) => 3,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
