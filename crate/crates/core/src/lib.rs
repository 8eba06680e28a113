//! Document-level relation extraction with graph-guided evidence attention.
//!
//! The crate is organized bottom-up:
//!
//! - [`numerics`]: a small reverse-mode differentiation tape over shaped arrays
//! - [`corpus`]: DocRED-format documents, flattening with mention markers,
//!   evidence vectors, and a synthetic corpus generator
//! - [`encoder`]: pluggable context encoders and long-input windowing
//! - [`gega`]: entity pooling, attention concentration, multi-head graph
//!   convolution, the averaging transformer stack, pair signals and the
//!   grouped bilinear classifier
//! - [`losses`]: adaptive-threshold loss and the evidence KL objectives
//! - [`pipeline`]: teacher/student training, silver annotation, checkpoints
//!   and single/fusion inference
//! - [`metrics`]: F1, Ign-F1, Evi-F1 and the official result format
//!
//! Everything numeric is generic over [`Scalar`]; the aliases at the crate
//! root fix it to `f64`, which is what training and checkpoints use.

pub mod corpus;
pub mod encoder;
pub mod gega;
pub mod losses;
pub mod metrics;
pub mod numerics;
pub mod pipeline;
mod scalar;

pub use scalar::Scalar;

use thiserror::Error;

pub type Tensor = numerics::DiffTensor<f64>;
pub type Tape = numerics::Tape<f64>;
pub type Params = numerics::ParamStore<f64>;
pub type Model = gega::GegaModel<f64>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Numerics(#[from] numerics::NumericsError),
    #[error(transparent)]
    Corpus(#[from] corpus::CorpusError),
    #[error(transparent)]
    Encoder(#[from] encoder::EncoderError),
    #[error(transparent)]
    Gega(#[from] gega::GegaError),
    #[error("configuration: {0}")]
    Config(String),
    #[error("{0}")]
    Pipeline(String),
    #[error("non-finite loss at step {step} in document `{document}`")]
    NonFiniteLoss { step: usize, document: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("json error in {path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub(crate) fn json(path: impl AsRef<std::path::Path>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
