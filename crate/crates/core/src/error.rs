use std::path::PathBuf;

use stochsr_tensor::TensorError;
use thiserror::Error;

use crate::collab::CurveRow;
use crate::generator::DegradationGenerator;
use crate::sr::SrModel;
use crate::unpaired::LogRow;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("sizing error: {0}")]
    Sizing(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("failed to load {} file(s): {}", .0.len(), format_failures(.0))]
    Load(Vec<(PathBuf, String)>),

    #[error("missing input: {0}")]
    Missing(String),

    #[error("stale artifact: {0}")]
    Stale(String),

    #[error("internal invariant violated: {0}")]
    Invariant(String),

    #[error("training diverged at step {} (loss {})", .0.step, .0.loss)]
    Diverged(Box<Divergence>),

    #[error("SR training diverged at step {} (loss {})", .0.step, .0.loss)]
    SrDiverged(Box<SrDivergence>),

    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit status: 2 bad configuration, 3 missing input,
    /// 4 divergence, 5 stale artifact, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Argument(_) => 2,
            Error::Missing(_) | Error::Load(_) => 3,
            Error::Diverged(_) | Error::SrDiverged(_) | Error::Numeric(_) => 4,
            Error::Stale(_) => 5,
            _ => 1,
        }
    }
}

/// State recovered from a diverged degrader run.
#[derive(Debug)]
pub struct Divergence {
    pub member: Option<usize>,
    pub step: usize,
    pub loss: f64,
    /// Parameters from the last step whose losses were finite and bounded.
    pub last_good: DegradationGenerator,
    pub log: Vec<LogRow>,
}

/// State recovered from a diverged SR run.
#[derive(Debug)]
pub struct SrDivergence {
    pub step: usize,
    pub loss: f64,
    pub last_good: Vec<SrModel>,
    pub curves: Vec<CurveRow>,
}

fn format_failures(f: &[(PathBuf, String)]) -> String {
    f.iter()
        .map(|(p, e)| format!("{} ({e})", p.display()))
        .collect::<Vec<_>>()
        .join(", ")
}

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.into();
    move |source| Error::Io { path, source }
}
