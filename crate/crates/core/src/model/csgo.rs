use candle_core::{DType, Device, Tensor};

use super::config::{InjectionConfig, ModelConfig};
use super::encoder::{ContentProjection, PatchEncoder, Resampler};
use super::text::{TextEncoder, Tokenizer};
use super::unet::{BaseUnet, ControlBranch, ControlResiduals, UnetConditions};
use crate::diffusion::{LatentState, NoisePrediction, NoisePredictor};
use crate::error::{Error, Result};
use crate::image::{Image, LatentCodec};
use crate::params::ParamStore;

/// Conditioning for a batch. A stream is null for a sample when its image is
/// absent or its drop flag is set; null samples use the learned null tokens.
#[derive(Debug, Clone)]
pub struct ConditionSet {
    /// Token ids (B, text_len).
    pub caption_ids: Tensor,
    /// Content images (B, 3, H, W).
    pub content: Option<Tensor>,
    /// Style images (B, 3, H, W).
    pub style: Option<Tensor>,
    pub drop_text: Vec<bool>,
    pub drop_content: Vec<bool>,
    pub drop_style: Vec<bool>,
}

impl ConditionSet {
    pub fn batch_size(&self) -> Result<usize> {
        Ok(self.caption_ids.dim(0)?)
    }

    /// Same batch with every stream nulled.
    pub fn nulled(&self) -> Result<Self> {
        let b = self.batch_size()?;
        Ok(Self {
            caption_ids: self.caption_ids.clone(),
            content: None,
            style: None,
            drop_text: vec![true; b],
            drop_content: vec![true; b],
            drop_style: vec![true; b],
        })
    }

    pub fn without_content(mut self) -> Self {
        self.content = None;
        self.drop_content.iter_mut().for_each(|d| *d = true);
        self
    }

    pub fn without_style(mut self) -> Self {
        self.style = None;
        self.drop_style.iter_mut().for_each(|d| *d = true);
        self
    }

    fn validate(&self, cfg: &ModelConfig) -> Result<usize> {
        let b = self.batch_size()?;
        let (_, len) = self.caption_ids.dims2()?;
        if len != cfg.text_len {
            return Err(Error::shape(cfg.text_len, len));
        }
        for flags in [&self.drop_text, &self.drop_content, &self.drop_style] {
            if flags.len() != b {
                return Err(Error::shape(b, flags.len()));
            }
        }
        for img in [&self.content, &self.style].into_iter().flatten() {
            let expected = [b, 3, cfg.image_size, cfg.image_size];
            if img.dims() != expected {
                return Err(Error::shape(expected, img.dims()));
            }
        }
        Ok(b)
    }
}

/// The assembled network: text encoder, shared image encoder with separate
/// content and style heads, base UNet, control branch, and null tokens.
#[derive(Debug, Clone)]
pub struct CsgoModel {
    config: ModelConfig,
    store: ParamStore,
    dtype: DType,
    device: Device,
    codec: LatentCodec,
    tokenizer: Tokenizer,
    text: TextEncoder,
    image_encoder: PatchEncoder,
    content_proj: ContentProjection,
    style_proj: Resampler,
    null_text: Tensor,
    null_content: Tensor,
    null_style: Tensor,
    unet: BaseUnet,
    control: ControlBranch,
}

impl CsgoModel {
    /// Builds a freshly initialized model whose control branch mirrors the
    /// base encoder.
    pub fn new(config: ModelConfig, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        let model = Self::build(config, ParamStore::new(seed), dtype, device)?;
        model.init_control_branch()?;
        Ok(model)
    }

    /// Builds the modules over an existing parameter store (creating any
    /// parameters that are missing).
    pub fn build(config: ModelConfig, store: ParamStore, dtype: DType, device: &Device) -> Result<Self> {
        config.validate()?;
        let vb = store.var_builder(dtype, device);
        Self::from_var_builder(config, store, vb, dtype, device)
    }

    /// Builds the modules from an arbitrary VarBuilder, e.g. one that adds
    /// adapter deltas to stored weights. `store` is kept for bookkeeping.
    pub fn from_var_builder(
        config: ModelConfig,
        store: ParamStore,
        vb: candle_nn::VarBuilder,
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        let tokenizer = Tokenizer;
        let d = config.encoder_dim;
        let zero = candle_nn::Init::Const(0.);
        let text = TextEncoder::new(tokenizer.vocab_size(), config.text_len, config.text_dim, vb.pp("text"))?;
        let image_encoder = PatchEncoder::new(config.patch_size, d, vb.pp("image_encoder"))?;
        let content_proj = ContentProjection::new(d, vb.pp("content_proj"))?;
        let style_proj = Resampler::new(
            d,
            config.n_style_tokens,
            config.resampler_layers,
            config.resampler_heads,
            vb.pp("style_proj"),
        )?;
        let null = vb.pp("null");
        let null_text = null.get_with_hints((config.text_len, config.text_dim), "text", zero)?;
        let null_content = null.get_with_hints((config.content_tokens(), d), "content", zero)?;
        let null_style = null.get_with_hints((config.n_style_tokens, d), "style", zero)?;
        let unet = BaseUnet::new(&config, vb.pp("unet"))?;
        let control = ControlBranch::new(&config, vb.pp("control"))?;
        Ok(Self {
            codec: LatentCodec {
                factor: config.latent_factor,
            },
            config,
            store,
            dtype,
            device: device.clone(),
            tokenizer,
            text,
            image_encoder,
            content_proj,
            style_proj,
            null_text,
            null_content,
            null_style,
            unet,
            control,
        })
    }

    /// Copies the base encoder path (time embedding, input conv, down
    /// stages, middle stage) into the control branch. The hint and output
    /// convolutions are left at zero.
    pub fn init_control_branch(&self) -> Result<usize> {
        self.store.copy_prefix("unet.", "control.")
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn codec(&self) -> LatentCodec {
        self.codec
    }

    pub fn tokenizer(&self) -> &Tokenizer {
        &self.tokenizer
    }

    pub fn unet(&self) -> &BaseUnet {
        &self.unet
    }

    pub fn control(&self) -> &ControlBranch {
        &self.control
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn tokenize(&self, captions: &[&str]) -> Result<Tensor> {
        self.tokenizer
            .encode_batch(captions, self.config.text_len, &self.device)
    }

    /// Conditions with every stream present and nothing dropped.
    pub fn conditions(
        &self,
        captions: &[&str],
        content: Option<&[&Image]>,
        style: Option<&[&Image]>,
    ) -> Result<ConditionSet> {
        let b = captions.len();
        let to_tensor = |imgs: &[&Image]| -> Result<Tensor> {
            if imgs.len() != b {
                return Err(Error::shape(b, imgs.len()));
            }
            Image::batch_tensor(imgs, self.dtype, &self.device)
        };
        Ok(ConditionSet {
            caption_ids: self.tokenize(captions)?,
            content: content.map(to_tensor).transpose()?,
            style: style.map(to_tensor).transpose()?,
            drop_text: vec![false; b],
            drop_content: vec![content.is_none(); b],
            drop_style: vec![style.is_none(); b],
        })
    }

    /// Raw image tokens (B, o, d).
    pub fn encode_image(&self, images: &Tensor) -> Result<Tensor> {
        self.image_encoder.encode(images)
    }

    pub fn style_project(&self, raw: &Tensor) -> Result<Tensor> {
        self.style_proj.project(raw)
    }

    pub fn content_project(&self, raw: &Tensor) -> Result<Tensor> {
        self.content_proj.project(raw)
    }

    /// Selects `null` for dropped samples: `keep * actual + drop * null`,
    /// exact for 0/1 masks.
    fn select(&self, actual: Option<Tensor>, null: &Tensor, drop: &[bool]) -> Result<Tensor> {
        let b = drop.len();
        let null_b = null.unsqueeze(0)?.broadcast_as((b, null.dim(0)?, null.dim(1)?))?;
        let actual = match actual {
            Some(a) if drop.iter().any(|d| !d) => a,
            _ => return Ok(null_b.contiguous()?),
        };
        if drop.iter().all(|d| !d) {
            return Ok(actual);
        }
        let keep: Vec<f64> = drop.iter().map(|d| if *d { 0. } else { 1. }).collect();
        let keep = Tensor::from_vec(keep, (b, 1, 1), &self.device)?.to_dtype(self.dtype)?;
        let dropped = keep.affine(-1., 1.)?;
        Ok((actual.broadcast_mul(&keep)? + null_b.broadcast_mul(&dropped)?)?)
    }

    pub fn text_tokens(&self, cond: &ConditionSet) -> Result<Tensor> {
        let actual = self.text.forward(&cond.caption_ids)?;
        self.select(Some(actual), &self.null_text, &cond.drop_text)
    }

    pub fn content_tokens(&self, cond: &ConditionSet) -> Result<Tensor> {
        let actual = match &cond.content {
            Some(img) if cond.drop_content.iter().any(|d| !d) => Some(self.content_project(&self.encode_image(img)?)?),
            _ => None,
        };
        self.select(actual, &self.null_content, &cond.drop_content)
    }

    pub fn style_tokens(&self, cond: &ConditionSet) -> Result<Tensor> {
        let actual = match &cond.style {
            Some(img) if cond.drop_style.iter().any(|d| !d) => Some(self.style_project(&self.encode_image(img)?)?),
            _ => None,
        };
        self.select(actual, &self.null_style, &cond.drop_style)
    }

    /// Content image in latent space; zero rows for null samples.
    pub fn control_hint(&self, cond: &ConditionSet, like: &Tensor) -> Result<Tensor> {
        match &cond.content {
            Some(img) if cond.drop_content.iter().any(|d| !d) => {
                let latent = self.codec.encode(img)?;
                let keep: Vec<f64> = cond.drop_content.iter().map(|d| if *d { 0. } else { 1. }).collect();
                let keep = Tensor::from_vec(keep, (latent.dim(0)?, 1, 1, 1), &self.device)?.to_dtype(self.dtype)?;
                Ok(latent.broadcast_mul(&keep)?)
            }
            _ => Ok(like.zeros_like()?),
        }
    }

    /// Runs the control branch with explicit style tokens.
    pub fn control_forward(
        &self,
        z: &Tensor,
        timesteps: &[usize],
        cond: &ConditionSet,
        text: &Tensor,
        style_tokens: &Tensor,
        lambda_s: f64,
    ) -> Result<ControlResiduals> {
        let hint = self.control_hint(cond, z)?;
        self.control
            .forward(z, timesteps, &hint, text, Some((style_tokens, lambda_s)))
    }

    /// Noise prediction for a batch with one timestep per sample.
    pub fn predict_batch(
        &self,
        z: &Tensor,
        timesteps: &[usize],
        cond: &ConditionSet,
        cfg: &InjectionConfig,
    ) -> Result<Tensor> {
        self.predict_traced(z, timesteps, cond, cfg, None)
    }

    pub fn predict_traced(
        &self,
        z: &Tensor,
        timesteps: &[usize],
        cond: &ConditionSet,
        cfg: &InjectionConfig,
        trace: Option<&mut Vec<(Tensor, Tensor)>>,
    ) -> Result<Tensor> {
        cfg.validate()?;
        if cfg.n_style_tokens != self.config.n_style_tokens {
            return Err(Error::invalid(format!(
                "injection config asks for {} style tokens, model has {}",
                cfg.n_style_tokens, self.config.n_style_tokens
            )));
        }
        let b = cond.validate(&self.config)?;
        let s = self.config.latent_size();
        let expected = [b, 3, s, s];
        if z.dims() != expected {
            return Err(Error::shape(expected, z.dims()));
        }
        if timesteps.len() != b {
            return Err(Error::shape(b, timesteps.len()));
        }
        let text = self.text_tokens(cond)?;
        let content = if cfg.lambda_c != 0. {
            Some(self.content_tokens(cond)?)
        } else {
            None
        };
        let style = if cfg.lambda_s != 0. {
            Some(self.style_tokens(cond)?)
        } else {
            None
        };
        let residuals = if cfg.delta_c != 0. {
            let hint = self.control_hint(cond, z)?;
            let style_in = style.as_ref().map(|t| (t, cfg.lambda_s));
            Some(self.control.forward(z, timesteps, &hint, &text, style_in)?)
        } else {
            None
        };
        let eps = self.unet.forward(
            z,
            timesteps,
            UnetConditions {
                text: &text,
                content: content.as_ref().map(|t| (t, cfg.lambda_c)),
                style: style.as_ref().map(|t| (t, cfg.lambda_s)),
                residuals: residuals.as_ref().map(|r| (r, cfg.delta_c)),
            },
            trace,
        )?;
        Ok(eps)
    }

    /// Single-timestep prediction for a latent state.
    pub fn csgo_predict(
        &self,
        state: &LatentState,
        cond: &ConditionSet,
        cfg: &InjectionConfig,
    ) -> Result<NoisePrediction> {
        let b = state.z.dim(0)?;
        let eps = self.predict_batch(&state.z, &vec![state.t; b], cond, cfg)?;
        crate::diffusion::ensure_finite(&eps, "noise prediction")?;
        Ok(NoisePrediction(eps))
    }

    /// A sampler-facing view with a fixed injection config.
    pub fn guided(&self, cfg: InjectionConfig) -> Guided<'_> {
        Guided { model: self, cfg }
    }
}

/// [`CsgoModel`] bound to an [`InjectionConfig`] for sampling. The null
/// prediction drops every stream.
#[derive(Debug, Clone, Copy)]
pub struct Guided<'a> {
    pub model: &'a CsgoModel,
    pub cfg: InjectionConfig,
}

impl NoisePredictor for Guided<'_> {
    type Conditions = ConditionSet;

    fn latent_shape(&self) -> (usize, usize, usize) {
        let s = self.model.config.latent_size();
        (3, s, s)
    }

    fn dtype(&self) -> DType {
        self.model.dtype
    }

    fn device(&self) -> &Device {
        &self.model.device
    }

    fn predict(&self, state: &LatentState, conditions: Option<&ConditionSet>) -> Result<NoisePrediction> {
        match conditions {
            Some(c) => self.model.csgo_predict(state, c, &self.cfg),
            None => {
                let b = state.z.dim(0)?;
                let ids = Tensor::zeros((b, self.model.config.text_len), DType::U32, &self.model.device)?;
                let null = ConditionSet {
                    caption_ids: ids,
                    content: None,
                    style: None,
                    drop_text: vec![true; b],
                    drop_content: vec![true; b],
                    drop_style: vec![true; b],
                };
                self.model.csgo_predict(state, &null, &self.cfg)
            }
        }
    }
}
