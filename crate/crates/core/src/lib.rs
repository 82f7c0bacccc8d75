//! Temporal-gating transformer for next-app prediction.
//!
//! The crate is organised bottom-up:
//!
//! * [`autodiff`]: reverse-mode differentiation over dense `f64` arrays.
//! * [`data`]: log ingestion, filtering, sessionisation, windowing and the
//!   standard, cold-start and time-based split protocols.
//! * [`synth`]: seeded synthetic usage logs with a closed-form Bayes ceiling.
//! * [`model`]: Fourier feature encoding, hour encoding, transformer encoder,
//!   user fusion, temporal gate and classifier.
//! * [`train`]: Adam, early stopping, grid search.
//! * [`eval`]: HR/MRR/NDCG@K, gate reports and the category Jaccard score.
//! * [`baselines`]: most-frequently and most-recently used predictors.

pub mod autodiff;
pub mod baselines;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod rng;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
