//! Person recognition in photo albums as sequence prediction.
//!
//! A photo is a set of person instances, each described by precomputed
//! feature vectors, plus a global scene feature. The model walks the
//! instances in some order with an LSTM whose first input is the scene and
//! whose later inputs jointly embed the previously assigned identity with the
//! current instance, so co-occurrence between people and scene priors both
//! shape each prediction.

pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod experiment;
pub mod layers;
pub mod data;
pub mod numcore;
pub mod seeding;
pub mod inference;
pub mod seqmodel;
pub mod training;

pub use error::{Error, Result};
