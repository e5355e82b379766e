//! Unsupervised target/clutter disentanglement for SAR-like imagery.
//!
//! The pipeline couples a learnable Morlet wavelet scattering front end
//! with multi-level slot attention: visual tokens drive slot competition
//! while scattering tokens, folded in through a mean-shifted spatial map
//! and a fusion map, keep the attention anchored on structurally
//! distinctive regions. Two slots (target, background) are refined over
//! `T` iterations and decoded back to visual features through a spatial
//! broadcast decoder; the training signal is feature reconstruction.
//!
//! Everything is self-contained: a synthetic speckled-scene generator
//! stands in for real SAR data, and a small reverse-mode engine
//! (`numerics`) provides gradients for every primitive.

pub mod error;
pub mod numerics;
pub mod seed;

pub mod scattering;

pub mod encoders;

pub mod mlsa;

pub mod decoder;

pub mod metrics;

pub mod synthgen;

pub mod model;

pub mod trainer;

pub use error::{Error, Result};
