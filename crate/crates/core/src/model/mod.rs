//! The style-transfer network and its building blocks.

pub mod checkpoint;
mod config;
mod csgo;
pub mod encoder;
pub mod layers;
pub mod text;
pub mod unet;

pub use config::{InjectionConfig, ModelConfig};
pub use csgo::{ConditionSet, CsgoModel, Guided};
pub use encoder::{ContentProjection, PatchEncoder, Resampler};
pub use text::{TextEncoder, Tokenizer};
pub use unet::{BaseUnet, ControlBranch, ControlResiduals, UnetConditions, FUSION_SITES};
