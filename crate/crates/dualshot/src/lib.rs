//! A dual-shot pyramid face detector built for desk-scale experimentation:
//! balanced anchor sampling, context-supervised pyramid anchors, a densely
//! connected context prediction module, multi-task training, and
//! WIDER-protocol evaluation.
//!
//! The guide under `book/` walks through each subsystem; its code snippets are
//! compiled and run as doctests, so the narrative cannot drift from the code.

pub mod anchors;
pub mod config;
pub mod dataio;
pub mod sampling;
pub mod losses;
pub mod network;
pub mod tensor;
pub mod training;
pub mod error;
pub mod geometry;

pub use config::DetectorConfig;
pub use error::{Error, Result};
