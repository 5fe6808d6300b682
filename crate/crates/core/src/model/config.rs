use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture hyperparameters of the toy network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Square RGB input resolution.
    pub image_size: usize,
    /// Average-pool factor of the latent codec.
    pub latent_factor: usize,
    /// Channel widths of the two resolution levels.
    pub widths: [usize; 2],
    pub norm_groups: usize,
    pub time_dim: usize,
    pub attn_heads: usize,
    pub text_dim: usize,
    pub text_len: usize,
    pub patch_size: usize,
    pub encoder_dim: usize,
    pub n_style_tokens: usize,
    pub resampler_layers: usize,
    pub resampler_heads: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            latent_factor: 2,
            widths: [32, 64],
            norm_groups: 8,
            time_dim: 128,
            attn_heads: 4,
            text_dim: 64,
            text_len: 8,
            patch_size: 8,
            encoder_dim: 64,
            n_style_tokens: 8,
            resampler_layers: 2,
            resampler_heads: 4,
        }
    }
}

impl ModelConfig {
    /// The smallest configuration the architecture supports: 8x8 images and
    /// a 4x4 latent. Used for gradient checks.
    pub fn tiny() -> Self {
        Self {
            image_size: 8,
            latent_factor: 2,
            widths: [8, 16],
            norm_groups: 4,
            time_dim: 16,
            attn_heads: 2,
            text_dim: 8,
            text_len: 4,
            patch_size: 4,
            encoder_dim: 8,
            n_style_tokens: 2,
            resampler_layers: 1,
            resampler_heads: 2,
        }
    }

    pub fn latent_size(&self) -> usize {
        self.image_size / self.latent_factor
    }

    pub fn content_tokens(&self) -> usize {
        let side = self.image_size / self.patch_size;
        side * side
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::invalid(msg));
        if self.latent_factor == 0 || self.image_size % self.latent_factor != 0 {
            return fail(format!(
                "image size {} is not divisible by latent factor {}",
                self.image_size, self.latent_factor
            ));
        }
        if self.latent_size() % 2 != 0 {
            return fail(format!("latent size {} must be even", self.latent_size()));
        }
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return fail(format!(
                "image size {} is not divisible by patch size {}",
                self.image_size, self.patch_size
            ));
        }
        for w in self.widths {
            if w == 0 || w % self.norm_groups != 0 || w % self.attn_heads != 0 {
                return fail(format!(
                    "width {w} must be a positive multiple of norm_groups and attn_heads"
                ));
            }
        }
        if self.encoder_dim % self.resampler_heads != 0 {
            return fail("encoder_dim must be divisible by resampler_heads".into());
        }
        if self.n_style_tokens == 0 || self.text_len == 0 || self.time_dim < 2 {
            return fail("n_style_tokens, text_len and time_dim must be positive".into());
        }
        Ok(())
    }
}

/// The scalar injection knobs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InjectionConfig {
    /// Weight of the control-branch residuals fused into the decoder.
    pub delta_c: f64,
    /// Weight of the content cross-attention in the down blocks.
    pub lambda_c: f64,
    /// Weight of the style cross-attention in the up blocks and the branch.
    pub lambda_s: f64,
    /// Classifier-free guidance factor.
    pub cfg_w: f64,
    pub n_style_tokens: usize,
}

impl Default for InjectionConfig {
    fn default() -> Self {
        Self::training()
    }
}

impl InjectionConfig {
    pub fn training() -> Self {
        Self {
            delta_c: 1.0,
            lambda_c: 1.0,
            lambda_s: 1.0,
            cfg_w: 7.5,
            n_style_tokens: ModelConfig::default().n_style_tokens,
        }
    }

    pub fn inference() -> Self {
        Self {
            delta_c: 0.5,
            ..Self::training()
        }
    }

    pub fn with_tokens(mut self, n: usize) -> Self {
        self.n_style_tokens = n;
        self
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("delta_c", self.delta_c),
            ("lambda_c", self.lambda_c),
            ("lambda_s", self.lambda_s),
        ] {
            if !v.is_finite() || v < 0. {
                return Err(Error::invalid(format!("{name} = {v} must be finite and >= 0")));
            }
        }
        if !self.cfg_w.is_finite() {
            return Err(Error::invalid("cfg_w must be finite"));
        }
        if self.n_style_tokens == 0 {
            return Err(Error::invalid("n_style_tokens must be at least 1"));
        }
        Ok(())
    }
}
