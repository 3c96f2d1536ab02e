//! Gated-Attention Reader for cloze-style question answering.
//!
//! The crate is layered bottom-up:
//!
//! * [`tensor`] — dense `f64` tensors and a reverse-mode autodiff tape.
//! * [`params`] — named parameter storage, initialization and checkpoints.
//! * [`seq`] — GRU cell and bidirectional GRU encoders.
//! * [`reader`] — embeddings, the multi-hop gated-attention stack, pointer-sum scoring.
//! * [`corpus`] — cloze examples, file formats, vocabularies, synthetic tasks, batching.
//! * [`train`] — loss, ADAM, clipping, learning-rate schedule and the training loop.
//! * [`evalviz`] — accuracy, significance tests, ablation sweeps and attention export.

pub mod corpus;
pub mod error;
pub mod evalviz;
pub mod params;
pub mod reader;
pub mod seq;
pub mod tensor;
pub mod train;


pub use corpus::{ClozeExample, EncodedExample, Vocab};
pub use reader::{GatingKind, Model, ReaderConfig, ReaderParams};
pub use error::{Error, Result};
pub use params::{ParamId, ParamSet};

pub use tensor::{Tape, Tensor, Var};
pub use train::TrainConfig;

