//! Station-level bike flow forecasting.
//!
//! Ride records are binned into hourly inflow/outflow per station. Three
//! station graphs (distance, interaction, correlation) are normalized and
//! fused with learned element-wise weights; the fused graph convolves the
//! flow snapshots, which feed an LSTM encoder-decoder. A fully connected
//! head turns the encoder state plus context features into the forecast,
//! and Monte Carlo dropout plus validation residuals give intervals.

mod blob;
pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod graphs;
pub mod ingest;
pub mod network;
pub mod pipeline;
pub mod synth;
pub mod train;
pub mod uncertainty;

pub use config::{Fingerprint, PipelineConfig, Variant};
pub use error::{Error, ErrorCategory, Result};
