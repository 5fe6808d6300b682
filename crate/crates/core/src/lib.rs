//! Toy-scale content/style decoupled latent diffusion for style transfer,
//! with the pipeline that builds content/style/stylized training triplets.

pub mod cas;
pub mod config;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod image;
pub mod inference;
pub mod model;
pub mod nn;
pub mod params;
pub mod pipeline;
pub mod synthetic;
pub mod training;

pub use error::{Error, Result};
pub use image::{Image, LatentCodec};
pub use model::{ConditionSet, CsgoModel, InjectionConfig, ModelConfig};
pub use params::ParamStore;
