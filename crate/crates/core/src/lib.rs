//! Sound separation conditioned on classifier embeddings.
//!
//! Signals flow `synthdata` -> `frontend` -> `classifier` -> `embeddings` ->
//! `separator`, with `objectives` supplying losses and metrics.

pub mod audio;
pub mod classifier;
pub mod embeddings;
mod error;
pub mod frontend;
pub mod objectives;
pub mod separator;
pub mod synthdata;

pub use audio::AudioClip;
pub use error::{CondsepError, Result};
