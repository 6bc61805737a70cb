//! Trajectory prediction by grid-based maximum-entropy inverse reinforcement
//! learning: a reward over a drivable grid is learned from demonstrations,
//! plans are sampled from the induced soft-optimal policy, clustered, decoded
//! into Bézier trajectories and refined.

pub mod adaptor;
pub mod api;
pub mod bench;
pub mod bezier;
pub mod config;
pub mod error;
pub mod irl;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod refiner;
pub mod render;
pub mod sampler;
pub mod scene;

pub use error::{Error, Result};
