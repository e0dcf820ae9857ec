//! Multi-view attention regularized metric learning for terrain landmark
//! recognition, with the terrain-relative-navigation evaluation protocols.

pub mod autograd;
pub mod backbone;
pub mod conv;
pub mod data;
pub mod eigencam;
pub mod error;
pub mod evaluator;
pub mod experiment;
pub mod gradcheck;
pub mod metric_losses;
pub mod model;
pub mod mars;
pub mod nn;
pub mod optim;
pub mod params;
pub mod plot;
pub mod sampling;
pub mod tensor;
pub mod trainer;
pub mod transforms;

pub use error::{Error, Result};
