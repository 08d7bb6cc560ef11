use std::path::{Path, PathBuf};

use occdir_core::backbone::BackboneError;
use occdir_core::codec::CodecError;
use occdir_core::corpus::CorpusError;
use occdir_core::flow::FlowError;
use occdir_core::grid::GridError;
use occdir_core::metrics::MetricError;
use occdir_core::text::TextError;
use occdir_core::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Bad config, flags or input documents; exit code 2.
    #[error("validation error: {0}")]
    Validation(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed file: {0}")]
    Format(String),
    #[error("judge endpoint unreachable after {attempts} attempts: {last}")]
    EndpointUnreachable { attempts: u32, last: String },
    #[error("training aborted at iteration {iteration}: {source}; last good checkpoint {checkpoint:?}")]
    TrainingAborted {
        iteration: u64,
        checkpoint: Option<PathBuf>,
        #[source]
        source: FlowError,
    },
    #[error("{0}")]
    Runtime(String),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Text(#[from] TextError),
    #[error(transparent)]
    Backbone(#[from] BackboneError),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Error::Io { path: path.to_path_buf(), source }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Validation(_) => 2,
            _ => 3,
        }
    }
}
