//! Video forgery detection and localization.
//!
//! The pipeline tiles frames into fixed-size analysis blocks, embeds each
//! block with a forensic-trace extractor and a scene-context extractor, fuses
//! the per-block embeddings with a transformer encoder whose output is
//! squeezed into spatial attention maps, and scores the frame with a
//! detection head (forged / authentic) and a localization head (per-block
//! tamper probability). Supporting modules provide synthetic tamper corpus
//! generation, a staged training loop, inference post-processing, and
//! metric evaluation.

pub mod attention;
pub mod autograd;
pub mod checkpoint;
pub mod datagen;
pub mod error;
pub mod evaluation;
pub mod features;
pub mod geometry;
pub mod heads;
pub mod model;
pub mod nn;
pub mod postprocess;
pub mod training;

pub use error::{Error, Result};
