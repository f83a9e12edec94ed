//! Conditional neural fields as decoders for 2D semantic segmentation.
//!
//! A small CNN encodes an image into a feature map; a coordinate network
//! then predicts a class for every queried point, conditioned on a code
//! derived from the feature map. Three conditioning families are provided
//! (concatenation, FiLM and cross-attention) over global, local, combined
//! or token-set codes.
//!
//! All numeric kernels live in [`diffcore`] and carry hand-written
//! backward passes recorded on a small reverse-mode tape.

pub mod data;
pub mod decoders;
pub mod diffcore;
pub mod encoder;
pub mod error;
pub mod fields;
pub mod harness;
pub mod metrics;

pub use error::{Error, Result};
