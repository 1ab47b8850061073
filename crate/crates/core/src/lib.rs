//! CollaboNet: several single-entity-type BiLSTM-CRF taggers that feed each
//! other their encoder states through a trainable weighted max pooling.
//!
//! The crate is organised bottom-up:
//!
//! * [`autodiff`]: dense tensors and reverse-mode differentiation.
//! * [`embedding`]: word lookup plus the character CNN word embedding.
//! * [`encoder`]: the bidirectional LSTM.
//! * [`crf`]: emission layer, token and sentence losses, Viterbi.
//! * [`collab`]: single-task models and the phase schedule that trains them
//!   as collaborators.
//! * [`corpus`]: CoNLL reading/writing, tag schemes, dev split, batching.
//! * [`eval`]: BIOES repair, exact-match scores and the error taxonomy.
//! * [`train`]: optimizer, dropout, configuration and checkpoints.

pub mod autodiff;
pub mod collab;
pub mod corpus;
pub mod crf;
pub mod embedding;
pub mod encoder;
pub mod eval;
pub mod rng;
pub mod synthetic;
pub mod tag;
pub mod train;

pub use autodiff::{Bindings, Gradients, Graph, GraphError, NodeId, Tensor};
pub use tag::{Span, Tag, NUM_TAGS};

/// Trainable tensors of one model keyed by name.
pub type ParamSet = Bindings;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("{source_name}:{line}: {message}")]
    Parse {
        source_name: String,
        line: usize,
        message: String,
    },
    #[error("invalid tag sequence: {0}")]
    InvalidTags(String),
    #[error("config: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
