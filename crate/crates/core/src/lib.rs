//! Edge-guided semantic image synthesis with pixel-wise, multi-scale and
//! cross-scale contrastive learning, trained on a procedural shapes world.

pub mod config;
pub mod contrastive;
pub mod data;
pub mod discriminator;
mod error;
pub mod eval;
pub mod generator;
pub mod nn;
pub mod semantic;
pub mod similarity;
pub mod training;
pub mod verify;

pub use config::Config;
pub use error::{Error, Result};
