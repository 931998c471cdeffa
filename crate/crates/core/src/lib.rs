pub mod attribution;
pub mod brain_encoder;
pub mod cli;
pub mod config;
pub mod ensembler;
pub mod error;
pub mod evaluator;
pub mod feature_store;
pub mod layer_gating;
pub mod modality;
pub mod nn;
pub mod params;
pub mod plot;
pub mod ridge_baseline;
pub mod trainer;

pub use error::{Error, Result};
