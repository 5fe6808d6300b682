//! The base denoiser and its zero-initialized control branch.
//!
//! Layout (latent side `s`, widths `w0`, `w1`):
//!
//! ```text
//! conv_in -> down.0 (w0, s) -> downsample -> down.1 (w1, s/2) -> mid (w1, s/2)
//!   -> up.0 (w1, s/2) -> upsample -> up.1 (w0, s) -> conv_out
//! ```
//!
//! Down stages carry content attention, up stages carry style attention,
//! and the outputs of `mid`, `up.0`, and `up.1` are the fusion sites where
//! control residuals are added.

use candle_core::{Module, Tensor};
use candle_nn::{GroupNorm, VarBuilder};

use super::config::ModelConfig;
use super::layers::{ResBlock, SpatialAttention, Stage, TimeEmbedding};
use crate::error::{Error, Result};
use crate::nn::{conv2d, zero_conv2d, Conv2d};

pub const FUSION_SITES: usize = 3;

/// Per-site residuals `C_i` in fusion order: middle block, then each up
/// block.
#[derive(Debug, Clone)]
pub struct ControlResiduals {
    pub per_block: Vec<Tensor>,
}

impl ControlResiduals {
    pub fn is_all_zero(&self) -> Result<bool> {
        for t in &self.per_block {
            let m = t.abs()?.flatten_all()?.max(0)?.to_dtype(candle_core::DType::F64)?;
            if m.to_scalar::<f64>()? != 0. {
                return Ok(false);
            }
        }
        Ok(true)
    }
}

/// Conditioning tokens handed to the base network.
#[derive(Debug, Clone, Copy)]
pub struct UnetConditions<'a> {
    pub text: &'a Tensor,
    /// Content tokens and `lambda_c`.
    pub content: Option<(&'a Tensor, f64)>,
    /// Style tokens and `lambda_s`.
    pub style: Option<(&'a Tensor, f64)>,
    /// Control residuals and `delta_c`.
    pub residuals: Option<(&'a ControlResiduals, f64)>,
}

fn stage(
    in_c: usize,
    out_c: usize,
    cfg: &ModelConfig,
    injection: Option<&str>,
    vb: VarBuilder,
) -> candle_core::Result<Stage> {
    Ok(Stage {
        res: ResBlock::new(in_c, out_c, cfg.time_dim, cfg.norm_groups, vb.pp("res"))?,
        attn: SpatialAttention::new(
            out_c,
            cfg.text_dim,
            cfg.attn_heads,
            injection.map(|name| (name, cfg.encoder_dim)),
            vb.pp("attn"),
        )?,
    })
}

#[derive(Debug, Clone)]
pub struct BaseUnet {
    time: TimeEmbedding,
    conv_in: Conv2d,
    down: [Stage; 2],
    downsample: Conv2d,
    mid: Stage,
    up: [Stage; 2],
    norm_out: GroupNorm,
    conv_out: Conv2d,
}

impl BaseUnet {
    pub fn new(cfg: &ModelConfig, vb: VarBuilder) -> candle_core::Result<Self> {
        let [w0, w1] = cfg.widths;
        let down = vb.pp("down");
        let up = vb.pp("up");
        Ok(Self {
            time: TimeEmbedding::new(cfg.time_dim, vb.pp("time"))?,
            conv_in: conv2d(3, w0, 3, 1, 1, vb.pp("conv_in"))?,
            down: [
                stage(w0, w0, cfg, Some("content"), down.pp("0"))?,
                stage(w0, w1, cfg, Some("content"), down.pp("1"))?,
            ],
            downsample: conv2d(w0, w0, 3, 2, 1, vb.pp("downsample"))?,
            mid: stage(w1, w1, cfg, None, vb.pp("mid"))?,
            up: [
                stage(w1 + w1, w1, cfg, Some("style"), up.pp("0"))?,
                stage(w1 + w0, w0, cfg, Some("style"), up.pp("1"))?,
            ],
            norm_out: candle_nn::group_norm(cfg.norm_groups, w0, 1e-5, vb.pp("norm_out"))?,
            conv_out: conv2d(w0, 3, 3, 1, 1, vb.pp("conv_out"))?,
        })
    }

    /// Predicts noise for `z` (B, 3, s, s). When `trace` is given, the block
    /// output before and after fusion is recorded for every fusion site.
    pub fn forward(
        &self,
        z: &Tensor,
        timesteps: &[usize],
        cond: UnetConditions<'_>,
        mut trace: Option<&mut Vec<(Tensor, Tensor)>>,
    ) -> Result<Tensor> {
        let temb = self.time.forward(timesteps, z)?;
        if let Some((res, _)) = cond.residuals {
            if res.per_block.len() != FUSION_SITES {
                return Err(Error::shape(FUSION_SITES, res.per_block.len()));
            }
        }
        let mut fuse = |site: usize, d: Tensor| -> Result<Tensor> {
            let fused = match cond.residuals {
                Some((res, delta)) if delta != 0. => {
                    let c = &res.per_block[site];
                    if c.dims() != d.dims() {
                        return Err(Error::shape(d.dims(), c.dims()));
                    }
                    (&d + c.affine(delta, 0.)?)?
                }
                _ => d.clone(),
            };
            if let Some(trace) = trace.as_deref_mut() {
                trace.push((d, fused.clone()));
            }
            Ok(fused)
        };

        let h = self.conv_in.forward(z)?;
        let skip0 = self.down[0].forward(&h, &temb, cond.text, cond.content)?;
        let h = self.downsample.forward(&skip0)?;
        let skip1 = self.down[1].forward(&h, &temb, cond.text, cond.content)?;
        let h = self.mid.forward(&skip1, &temb, cond.text, None)?;
        let h = fuse(0, h)?;
        let h = Tensor::cat(&[&h, &skip1], 1)?;
        let h = self.up[0].forward(&h, &temb, cond.text, cond.style)?;
        let h = fuse(1, h)?;
        let (_, _, s, _) = skip0.dims4()?;
        let h = h.upsample_nearest2d(s, s)?;
        let h = Tensor::cat(&[&h, &skip0], 1)?;
        let h = self.up[1].forward(&h, &temb, cond.text, cond.style)?;
        let h = fuse(2, h)?;
        let h = self.norm_out.forward(&h)?.silu()?;
        Ok(self.conv_out.forward(&h)?)
    }
}

/// Trainable copy of the base encoder path. Its outputs pass through
/// zero-initialized 1x1 convolutions, so a fresh branch produces exactly
/// zero residuals.
#[derive(Debug, Clone)]
pub struct ControlBranch {
    time: TimeEmbedding,
    conv_in: Conv2d,
    hint: Conv2d,
    down: [Stage; 2],
    downsample: Conv2d,
    mid: Stage,
    zero_out: [Conv2d; FUSION_SITES],
}

impl ControlBranch {
    /// Builds the branch parameters. Call [`super::CsgoModel::init_control_branch`]
    /// (or copy weights) to mirror the base encoder.
    pub fn new(cfg: &ModelConfig, vb: VarBuilder) -> candle_core::Result<Self> {
        let [w0, w1] = cfg.widths;
        let down = vb.pp("down");
        let hint_vb = vb.pp("hint");
        let hint = Conv2d::new(
            hint_vb.get_with_hints((w0, 3, 3, 3), "weight", candle_nn::Init::Const(0.))?,
            Some(hint_vb.get_with_hints(w0, "bias", candle_nn::Init::Const(0.))?),
            1,
            1,
        );
        let zero = vb.pp("zero_out");
        Ok(Self {
            time: TimeEmbedding::new(cfg.time_dim, vb.pp("time"))?,
            conv_in: conv2d(3, w0, 3, 1, 1, vb.pp("conv_in"))?,
            hint,
            down: [
                stage(w0, w0, cfg, Some("style"), down.pp("0"))?,
                stage(w0, w1, cfg, Some("style"), down.pp("1"))?,
            ],
            downsample: conv2d(w0, w0, 3, 2, 1, vb.pp("downsample"))?,
            mid: stage(w1, w1, cfg, Some("style"), vb.pp("mid"))?,
            zero_out: [
                zero_conv2d(w1, w1, zero.pp("mid"))?,
                zero_conv2d(w1, w1, zero.pp("up0"))?,
                zero_conv2d(w0, w0, zero.pp("up1"))?,
            ],
        })
    }

    /// `hint`: latent-space content image (B, 3, s, s), zeros for a null
    /// content stream. Style attention inside the branch is scaled by
    /// `lambda_s`.
    pub fn forward(
        &self,
        z: &Tensor,
        timesteps: &[usize],
        hint: &Tensor,
        text: &Tensor,
        style: Option<(&Tensor, f64)>,
    ) -> Result<ControlResiduals> {
        if hint.dims() != z.dims() {
            return Err(Error::shape(z.dims(), hint.dims()));
        }
        let temb = self.time.forward(timesteps, z)?;
        let h = (self.conv_in.forward(z)? + self.hint.forward(hint)?)?;
        let d0 = self.down[0].forward(&h, &temb, text, style)?;
        let h = self.downsample.forward(&d0)?;
        let d1 = self.down[1].forward(&h, &temb, text, style)?;
        let m = self.mid.forward(&d1, &temb, text, style)?;
        Ok(ControlResiduals {
            per_block: vec![
                self.zero_out[0].forward(&m)?,
                self.zero_out[1].forward(&d1)?,
                self.zero_out[2].forward(&d0)?,
            ],
        })
    }
}
