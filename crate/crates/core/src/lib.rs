//! Residual bird's-eye-view world model on synthetic driving scenes.
//!
//! The crate generates procedural driving episodes, encodes noisy top-down
//! observations into BEV latent states, rolls future states forward by
//! predicting residual changes conditioned on ego actions, decodes 4D
//! semantic occupancy, and plans ego trajectories under three
//! forecasting/planning coupling schemes. Everything runs in `f64` on the
//! CPU and is reproducible from a single run seed.

pub mod ad;
pub mod encoder;
pub mod error;
pub mod footprint;
pub mod gridworld;
pub mod harness;
pub mod heads;
pub mod metrics;
pub mod model;
pub mod objectives;
pub mod predictor;
pub mod rng;

pub use error::{EpisodeError, ModelError};
