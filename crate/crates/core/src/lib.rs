//! Continuous affective trajectories from timestamped emotion soft labels.
//!
//! The pipeline reads a conversational corpus, attaches six-way emotion
//! distributions to every utterance, derives time features, interpolates
//! every column with segmented cubic Hermite splines, and trains a
//! continuous-time recurrent model whose latent state drives steering
//! vectors for a decoder.

// `!(x > 0.0)` style guards are meant to reject NaN too
#![allow(clippy::neg_cmp_op_on_partial_ord)]
#![allow(clippy::needless_range_loop)]

pub mod affectmodel;
pub mod annotate;
pub mod cemoflow;
pub mod error;
pub mod ingest;
pub mod odecore;
pub mod pipeline;
pub mod seed;
pub mod spline;
pub mod steering;
pub mod synthetic;
pub mod temporal;

pub use error::{Error, Result};
