//! Context-as-transform few-shot class-incremental learning on spectrograms.
//!
//! Observations are canonicalized through a learned, approximately invertible
//! context transform, embedded, and classified against prototypes that are
//! shrunk toward a prior in proportion to their context uncertainty.

pub mod config;
pub mod error;
pub mod experiment;
pub mod frontend;
pub mod harness;
pub mod nets;
pub mod rng;
pub mod selftest;
pub mod spectrogram;
pub mod strategy;
pub mod training;
pub mod transform;
pub mod ucpc;

pub use error::{Error, Result};
pub use spectrogram::{SpecShape, Spectrogram};
pub use transform::{ContextBounds, ContextParams};
