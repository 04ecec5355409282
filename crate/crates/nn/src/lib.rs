//! A compact BERT-style sequence classifier written directly against `ndarray`.
//!
//! Sequences are packed row-wise (no padding): a [`Batch`] holds the token ids
//! of every sequence back to back plus the offsets where each one starts. All
//! dense layers operate on the packed `[tokens, hidden]` matrix and attention
//! runs per sequence slice. Every layer exposes a forward pass that returns a
//! cache and a backward pass that accumulates parameter gradients, so training
//! needs no autograd machinery.

pub mod checkpoint;
pub mod encoder;
mod error;
pub mod layers;
pub mod lora;
pub mod loss;
pub mod optim;
pub mod param;
pub mod safetensors;
pub mod tokenizer;

pub use encoder::{Batch, BertConfig, ForwardMode, Pooling, SequenceClassifier};
pub use error::{NnError, Result};
pub use lora::LoraSpec;
pub use optim::AdamW;
pub use param::{ParamCensus, ParamMut, Parameters};
pub use tokenizer::WordPiece;
