//! Audio-visual video parsing.
//!
//! The crate provides a small reverse-mode autodiff engine ([`tensorgrad`]),
//! plain and global-context-aware attention ([`attention`]), the hybrid
//! attention parser with adversarial modality training ([`parser`]), the
//! training objectives ([`losses`]), audio-visual grounding pretraining
//! ([`grounding`]), segment/event-level evaluation ([`metrics`]) and the file
//! formats plus synthetic data generator ([`data`]).

pub mod attention;
pub mod data;
pub mod error;
pub mod grounding;
pub mod losses;
pub mod metrics;
pub mod parser;
pub mod tensorgrad;
pub mod verify;

pub use error::{Error, Result};
