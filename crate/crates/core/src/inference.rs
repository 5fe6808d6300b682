//! The three generation modes: image-driven transfer, text-driven
//! synthesis, and text-edited transfer.

use serde::{Deserialize, Serialize};

use crate::diffusion::{DdimSampler, NoiseSchedule};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::model::{CsgoModel, InjectionConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Transfer,
    TextDriven,
    TextEdit,
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "transfer" => Ok(Mode::Transfer),
            "text" | "text_driven" => Ok(Mode::TextDriven),
            "edit" | "text_edit" => Ok(Mode::TextEdit),
            other => Err(Error::invalid(format!(
                "unknown mode {other:?} (expected transfer, text or edit)"
            ))),
        }
    }
}

/// Sampler settings shared by all modes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferenceConfig {
    /// Keys left out of a partial table take the inference defaults.
    #[serde(deserialize_with = "inference_injection")]
    pub injection: InjectionConfig,
    pub steps: usize,
    /// Clamp the predicted clean latent to `[-c, c]` each step; the codec's
    /// latents lie in `[-1, 1]`.
    pub clip_sample: Option<f64>,
}

fn inference_injection<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<InjectionConfig, D::Error> {
    #[derive(Deserialize)]
    #[serde(deny_unknown_fields)]
    struct Partial {
        delta_c: Option<f64>,
        lambda_c: Option<f64>,
        lambda_s: Option<f64>,
        cfg_w: Option<f64>,
        n_style_tokens: Option<usize>,
    }
    let p = Partial::deserialize(d)?;
    let base = InjectionConfig::inference();
    Ok(InjectionConfig {
        delta_c: p.delta_c.unwrap_or(base.delta_c),
        lambda_c: p.lambda_c.unwrap_or(base.lambda_c),
        lambda_s: p.lambda_s.unwrap_or(base.lambda_s),
        cfg_w: p.cfg_w.unwrap_or(base.cfg_w),
        n_style_tokens: p.n_style_tokens.unwrap_or(base.n_style_tokens),
    })
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            injection: InjectionConfig::inference(),
            steps: 50,
            clip_sample: Some(1.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationRequest {
    pub mode: Mode,
    pub content: Option<Image>,
    pub style: Image,
    pub prompt: String,
    pub config: InferenceConfig,
    pub seed: u64,
}

impl GenerationRequest {
    pub fn validate(&self) -> Result<()> {
        match (self.mode, self.content.is_some()) {
            (Mode::Transfer | Mode::TextEdit, false) => {
                Err(Error::invalid(format!("{:?} mode requires a content image", self.mode)))
            }
            (Mode::TextDriven, true) => Err(Error::invalid("text-driven mode does not take a content image")),
            _ => {
                if self.config.steps == 0 {
                    return Err(Error::invalid("steps must be positive"));
                }
                self.config.injection.validate()
            }
        }
    }
}

/// Shared path of every mode: one conditional and one null prediction per
/// step, noise drawn from the request seed.
fn run(
    model: &CsgoModel,
    schedule: &NoiseSchedule,
    prompt: &str,
    content: Option<&Image>,
    style: &Image,
    config: &InferenceConfig,
    seed: u64,
) -> Result<Image> {
    let contents = content.map(|c| [c]);
    let cond = model.conditions(&[prompt], contents.as_ref().map(|c| &c[..]), Some(&[style]))?;
    let sampler = DdimSampler {
        clip_sample: config.clip_sample,
    };
    let z = sampler.sample(
        &model.guided(config.injection),
        &cond,
        schedule,
        config.injection.cfg_w,
        config.steps,
        seed,
    )?;
    let mut images = model.codec().decode_images(&z)?;
    let image = images
        .pop()
        .ok_or_else(|| Error::invalid("sampler returned an empty batch"))?;
    debug_assert!(image.in_unit_range());
    Ok(image)
}

/// All three streams active; the prompt is the content caption.
pub fn style_transfer(model: &CsgoModel, schedule: &NoiseSchedule, request: &GenerationRequest) -> Result<Image> {
    if request.mode != Mode::Transfer {
        return Err(Error::invalid("style_transfer expects mode transfer"));
    }
    request.validate()?;
    run(
        model,
        schedule,
        &request.prompt,
        request.content.as_ref(),
        &request.style,
        &request.config,
        request.seed,
    )
}

/// Content streams nulled and the control branch disabled.
pub fn text_driven_synthesis(
    model: &CsgoModel,
    schedule: &NoiseSchedule,
    request: &GenerationRequest,
) -> Result<Image> {
    if request.mode != Mode::TextDriven {
        return Err(Error::invalid("text_driven_synthesis expects mode text_driven"));
    }
    request.validate()?;
    let mut config = request.config;
    config.injection.delta_c = 0.;
    run(
        model,
        schedule,
        &request.prompt,
        None,
        &request.style,
        &config,
        request.seed,
    )
}

/// Transfer with the caller's edited prompt fed to both the base network
/// and the control branch.
pub fn text_edit_transfer(model: &CsgoModel, schedule: &NoiseSchedule, request: &GenerationRequest) -> Result<Image> {
    if request.mode != Mode::TextEdit {
        return Err(Error::invalid("text_edit_transfer expects mode text_edit"));
    }
    request.validate()?;
    run(
        model,
        schedule,
        &request.prompt,
        request.content.as_ref(),
        &request.style,
        &request.config,
        request.seed,
    )
}

/// Dispatches on the request mode.
pub fn generate(model: &CsgoModel, schedule: &NoiseSchedule, request: &GenerationRequest) -> Result<Image> {
    match request.mode {
        Mode::Transfer => style_transfer(model, schedule, request),
        Mode::TextDriven => text_driven_synthesis(model, schedule, request),
        Mode::TextEdit => text_edit_transfer(model, schedule, request),
    }
}
