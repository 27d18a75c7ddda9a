//! Prototype-guided one-shot semantic segmentation.
//!
//! A shared encoder maps support and query images to stride-8 feature maps.
//! The support mask pools a class prototype from the support features; the
//! prototype is broadcast, concatenated with query features, fused (single
//! convolution or pyramid fusion) and classified into foreground/background by
//! an atrous head. Training adds a self-prototype branch on the support image
//! and a multi-class segmentation loss on the encoder features; inference can
//! refine the prototype with one pooled from its own first-pass prediction.

pub mod checkpoint;
pub mod data;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod fusion;
pub mod heads;
pub mod inference;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod params;
pub mod prototype;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
