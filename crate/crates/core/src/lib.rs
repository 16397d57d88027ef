//! Text-only membership inference for contrastive dual encoders.
//!
//! A query identity is inverted into the modality space by randomized
//! gradient ascent; the similarity and variability of the optimized
//! embeddings are scored by an ensemble of one-class detectors fit on a
//! gibberish baseline.

pub mod auditor;
pub mod baseline;
pub mod bridge;
pub mod defenses;
pub mod detectors;
pub mod enhancement;
pub mod error;
pub mod inversion;
pub mod io;
pub mod linalg;
pub mod rng;
pub mod testbed;
pub mod theory;

pub use error::{Result, UmidError};
pub use inversion::{compute_stats, latent_inversion, InversionConfig, InversionStats, Statistics};
pub use testbed::{DualEncoder, Embedding, EncoderPair, IdentityRecord, TestbedConfig};
