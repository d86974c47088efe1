//! Zero-shot anomaly detection with learnable object-agnostic prompts
//! on frozen CLIP-style towers.
//!
//! The crate trains four small prompt banks (global/local x
//! normal/anomaly) plus per-layer deep tokens against a frozen text
//! tower, scores images with a frozen vision tower that runs an extra
//! value-value attention stream for patch features, and fuses per-layer
//! similarity maps into a smoothed pixel anomaly map.

pub mod archive;
pub mod backbone;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod objectives;
pub mod prompt;
pub mod scoring;
pub mod text;
pub mod train;
pub mod vision;
pub mod viz;

pub use error::{GlocalError, Result};
