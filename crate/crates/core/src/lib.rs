//! Fine-grained gating for word/character token representations and
//! document-query interaction in neural reading comprehension.
//!
//! The crate is layered bottom-up:
//!
//! - [`tensor`], [`tape`]: dense `f64` tensors and define-by-run reverse-mode
//!   differentiation.
//! - [`recurrent`]: GRU and LSTM cells and sequence runners.
//! - [`features`], [`token_repr`]: token feature vectors and the word/character
//!   combiners (concatenation, scalar gate, fine-grained gate, ...).
//! - [`doc_query`]: gated-attention and fine-grained document-query
//!   interaction layers.
//! - [`reader`]: the K-layer reader with cloze, span and tag heads.
//! - [`harness`]: datasets, synthetic corpora, training, metrics, checkpoints
//!   and gate reports.

mod cells;
pub mod doc_query;
pub mod error;
pub mod exec;
pub mod features;
pub mod gradcheck;
pub mod harness;
mod kernels;
pub mod params;
pub mod reader;
pub mod recurrent;
pub mod tape;
pub mod tensor;
pub mod token_repr;

pub use error::{Error, Result};
pub use exec::Execution;
pub use kernels::sigmoid;
pub use params::{ParamGrads, ParamId, ParamSet};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
