//! Desk-scale framework for dual-sensor contrastive pre-training.
//!
//! Two satellite sensors (a 2-channel radar and a 3-channel optical
//! instrument) image the same scenes at different times. Co-located scene
//! pairs become positive examples for a contrastive objective; the resulting
//! encoders are transferred to semantic segmentation and evaluated under a
//! fixed sub-sampling protocol. A synthetic paired-scene generator stands in
//! for the real archives so the whole pipeline runs on one machine.

pub mod augment;
pub mod config;
pub mod datamodel;
pub mod error;
pub mod eval;
pub mod loss;
pub mod model;
pub mod nn;
pub mod normalize;
pub mod pairing;
pub mod rng;
pub mod synthetic;
pub mod trainer;

pub use error::{Error, Result};
