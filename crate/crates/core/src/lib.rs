//! Analysis toolkit for multimodal isometric rehabilitation-robot trials:
//! sEMG preprocessing, ideal-force reconstruction and force metrics, exact
//! Mann-Whitney statistics, NMF muscle synergies with clustering, and
//! two-state HMM subtask classification error.

pub mod adapter;
pub mod dsp;
pub mod error;
pub mod gamesync;
pub mod hmm;
pub mod ingest;
pub mod metrics;
pub mod model;
pub mod seed;
pub mod stats;
pub mod synergy;
pub mod synth;

pub use error::{Error, Result};
pub use model::*;
