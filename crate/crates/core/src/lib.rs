pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod datapipe;
pub mod error;
pub mod evalkit;
pub mod flow_toy;
pub mod geometry;
pub mod map;
pub mod pipeline;
pub mod rectifier;
pub mod scenario_gen;
pub mod scene;
pub mod world_sim;

pub use error::{Error, Result};
