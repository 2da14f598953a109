//! Multi-domain unpaired image-to-image translation with a pre-trained,
//! frozen style encoder.
//!
//! Pipeline: [`toy`] or external data → [`data`] manifest and split →
//! [`style`] encoder pre-training → adversarial [`training`] of the
//! [`generator`] against the [`discriminator`] → [`evaluation`].

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod discriminator;
pub mod error;
pub mod evaluation;
pub mod generator;
pub mod losses;
pub mod nn;
pub mod rng;
pub mod style;
pub mod toy;
pub mod training;

pub use config::TrainConfig;
pub use error::{Error, Result};
