//! Fallacy detection for climate misinformation.
//!
//! The crate covers the whole workflow around a twelve-label fallacy
//! classifier: the label taxonomy, dataset handling and curation, metrics,
//! fine-tuning with a staged hyperparameter sweep, zero-shot LLM baselines
//! and a prediction service.

pub mod artifact;
pub mod corpus;
pub mod curation;
pub mod inference;
pub mod llm;
pub mod metrics;
pub mod taxonomy;
pub mod training;

pub use corpus::{Dataset, Sample, Split};
pub use taxonomy::{parse_label, Fallacy};
