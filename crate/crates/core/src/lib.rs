//! Visual object tracker with an attention-driven LSTM controller and
//! two external template memories, trained end to end with a built-in
//! reverse-mode differentiation engine.

pub mod attention;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod controller;
pub mod dataset;
pub mod error;
pub mod feature_net;
pub mod geometry;
pub mod gradcheck;
pub mod image;
pub mod kernels;
pub mod memory;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod params;
pub mod pipeline;
pub mod template;
pub mod synth;
pub mod tensor;
pub mod tracker;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};

/// Seeded generator used for initialization, dropout and sampling.
pub type Rng = rand_chacha::ChaCha8Rng;
