//! Few-shot image classification with continual local replacement.
//!
//! A backbone is trained on base classes together with locally replaced
//! copies of its training images. On each novel-class episode the backbone
//! is frozen and a fresh classifier is tuned on the support set; before every
//! tuning epoch after the first, unlabeled images of the episode are
//! pseudo-labeled and used as donors to locally replace support images.

pub mod bench;
pub mod data;
pub mod error;
pub mod model;
pub mod numerics;
pub mod pipeline;
pub mod replacement;

pub use error::{Error, Result};
