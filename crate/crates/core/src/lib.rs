//! Source-free domain adaptation for time-series classification by compositional
//! reconstruction: a frozen source-trained U-net, a source-replay branch and a
//! VQ offset-compensation branch, followed by stability-weighted test-time ensembling.

pub mod adapt;
pub mod cli;
pub mod config;
pub mod datamodel;
pub mod error;
pub mod eval;
pub mod ingest;
pub mod losses;
pub mod models;
pub mod tta;

pub use error::{Error, Result};
