//! Skill evaluation from segmented activity recordings.
//!
//! The pipeline encodes per-frame descriptors as Fisher Vectors
//! ([`encoding`]), summarizes each action-unit segment with a stacked LSTM
//! classifier ([`action_unit`]), and compares two recordings by the distance
//! between Siamese-LSTM embeddings of their action-unit feature lists
//! ([`siamese`]). [`evaluation`] scores pairs, computes ROC/AUC and runs
//! subject-disjoint cross-validation on data from [`synth_data`].

pub mod action_unit;
pub mod encoding;
pub mod error;
pub mod evaluation;
pub mod lstm;
pub mod pipeline;
pub mod seed;
pub mod selftest;
pub mod siamese;
pub mod synth_data;
pub mod tensor_file;

pub use error::{Error, Result};
