//! Blind splice localization from camera-model features.
//!
//! A small convolutional network is trained to identify camera models from
//! image patches. Its first layer is a bank of learned residual filters kept
//! close to high-pass by a penalty, and a mutual-information term discourages
//! the deep features from tracking image content. At test time the
//! penultimate features of overlapping patches are split into two groups by a
//! Gaussian mixture; the smaller group marks the spliced region.

pub mod data;
pub mod error;
pub mod localizer;
pub mod metrics;
pub mod mi;
pub mod network;
pub mod selfcheck;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
