//! Feedback-stabilized patch-autoregressive forecasting: a plant
//! (encoder, frozen backbone, head), a residual observer closing the loop,
//! a two-stage training curriculum, and a linear stability laboratory for
//! the error dynamics.

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod numerics;
pub mod observer;
pub mod parallel;
pub mod plant;
pub mod rng;
pub mod rollout;
pub mod series;
pub mod stability;
pub mod synthetic;
pub mod training;

pub use error::{Error, Result};
