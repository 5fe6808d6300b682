//! Image tokens: the shared patch encoder and the two projection heads.

use candle_core::{DType, Module, Tensor};
use candle_nn::{Init, Linear, VarBuilder};

use super::layers::{CrossAttention, FeedForward};
use crate::error::{Error, Result};
use crate::nn::{linear_zero_bias, LayerNorm};

/// Non-overlapping patch embedding followed by a per-token MLP. Tokens do
/// not mix, so each output row depends only on its own patch.
#[derive(Debug, Clone)]
pub struct PatchEncoder {
    embed: Linear,
    mlp: Linear,
    patch: usize,
    dim: usize,
}

impl PatchEncoder {
    pub fn new(patch: usize, dim: usize, vb: VarBuilder) -> candle_core::Result<Self> {
        Ok(Self {
            embed: linear_zero_bias(3 * patch * patch, dim, vb.pp("embed"))?,
            mlp: linear_zero_bias(dim, dim, vb.pp("mlp"))?,
            patch,
            dim,
        })
    }

    pub fn patch_size(&self) -> usize {
        self.patch
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// (B, 3, H, W) in `[0, 1]` to (B, o, dim) with `o = (H/p)(W/p)`.
    pub fn encode(&self, images: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = images.dims4()?;
        if c != 3 {
            return Err(Error::shape(3, c));
        }
        let p = self.patch;
        if h % p != 0 || w % p != 0 {
            return Err(Error::invalid(format!(
                "image size {h}x{w} is not divisible by patch size {p}"
            )));
        }
        let flat = images.to_dtype(DType::F64)?.flatten_all()?;
        let (lo, hi) = (flat.min(0)?.to_scalar::<f64>()?, flat.max(0)?.to_scalar::<f64>()?);
        if lo < 0. || hi > 1. {
            return Err(Error::invalid(format!(
                "pixel values must lie in [0, 1], found [{lo}, {hi}]"
            )));
        }
        let (gh, gw) = (h / p, w / p);
        let patches = images
            .reshape((b, c, gh, p, gw, p))?
            .permute((0, 2, 4, 1, 3, 5))?
            .reshape((b, gh * gw, c * p * p))?;
        let tokens = self.embed.forward(&patches)?.gelu()?;
        Ok(self.mlp.forward(&tokens)?)
    }
}

/// Plain linear token projection for the content stream.
#[derive(Debug, Clone)]
pub struct ContentProjection {
    base: Tensor,
    delta: Tensor,
}

impl ContentProjection {
    /// The weight is `I + delta` with a zero-initialized `delta`, so a fresh
    /// projection is the identity.
    pub fn new(dim: usize, vb: VarBuilder) -> candle_core::Result<Self> {
        let delta = vb.get_with_hints((dim, dim), "delta", Init::Const(0.))?;
        let base = Tensor::eye(dim, delta.dtype(), delta.device())?;
        Ok(Self { base, delta })
    }

    /// A fixed projection with the given (out, in) weight.
    pub fn from_weight(weight: Tensor) -> candle_core::Result<Self> {
        let delta = weight.zeros_like()?;
        Ok(Self { base: weight, delta })
    }

    pub fn weight(&self) -> candle_core::Result<Tensor> {
        &self.base + &self.delta
    }

    pub fn project(&self, raw: &Tensor) -> Result<Tensor> {
        let d = raw.dim(candle_core::D::Minus1)?;
        if d != self.base.dim(1)? {
            return Err(Error::shape(self.base.dim(1)?, d));
        }
        Ok(raw.broadcast_matmul(&self.weight()?.t()?)?)
    }
}

#[derive(Debug, Clone)]
struct ResamplerLayer {
    norm_media: LayerNorm,
    norm_latents: LayerNorm,
    attn: CrossAttention,
    norm_ff: LayerNorm,
    ff: FeedForward,
}

/// Learned latent queries that cross-attend to an arbitrary number of input
/// tokens and always return `n_latents` tokens.
#[derive(Debug, Clone)]
pub struct Resampler {
    latents: Tensor,
    proj_in: Linear,
    layers: Vec<ResamplerLayer>,
    dim: usize,
}

impl Resampler {
    /// Attention and feed-forward output projections start at zero, so the
    /// freshly built module returns the latent queries unchanged.
    pub fn new(dim: usize, n_latents: usize, depth: usize, heads: usize, vb: VarBuilder) -> candle_core::Result<Self> {
        let latents = vb.get_with_hints(
            (n_latents, dim),
            "latents",
            Init::Randn {
                mean: 0.,
                stdev: (dim as f64).powf(-0.5),
            },
        )?;
        let proj_in = linear_zero_bias(dim, dim, vb.pp("proj_in"))?;
        let layers = (0..depth)
            .map(|i| {
                let vb = vb.pp(format!("layers.{i}"));
                Ok(ResamplerLayer {
                    norm_media: LayerNorm::new(dim, vb.pp("norm_media"))?,
                    norm_latents: LayerNorm::new(dim, vb.pp("norm_latents"))?,
                    attn: CrossAttention::new(dim, dim, heads, true, vb.pp("attn"))?,
                    norm_ff: LayerNorm::new(dim, vb.pp("norm_ff"))?,
                    ff: FeedForward::new(dim, 2, true, vb.pp("ff"))?,
                })
            })
            .collect::<candle_core::Result<Vec<_>>>()?;
        Ok(Self {
            latents,
            proj_in,
            layers,
            dim,
        })
    }

    pub fn n_latents(&self) -> usize {
        self.latents.dim(0).unwrap_or(0)
    }

    pub fn latent_queries(&self) -> &Tensor {
        &self.latents
    }

    /// (B, o, dim) to (B, n_latents, dim) for any `o >= 1`.
    pub fn project(&self, raw: &Tensor) -> Result<Tensor> {
        let (b, o, d) = raw.dims3()?;
        if d != self.dim {
            return Err(Error::shape(self.dim, d));
        }
        if o == 0 {
            return Err(Error::invalid("resampler needs at least one input token"));
        }
        let media = self.proj_in.forward(raw)?;
        let mut latents = self
            .latents
            .unsqueeze(0)?
            .broadcast_as((b, self.n_latents(), d))?
            .contiguous()?;
        for layer in &self.layers {
            let normed_latents = layer.norm_latents.forward(&latents)?;
            let kv = Tensor::cat(&[&layer.norm_media.forward(&media)?, &normed_latents], 1)?;
            latents = (&latents + layer.attn.forward(&normed_latents, &kv)?)?;
            latents = (&latents + layer.ff.forward(&layer.norm_ff.forward(&latents)?)?)?;
        }
        Ok(latents)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use candle_core::{Device, IndexOp};

    fn dev() -> Device {
        Device::Cpu
    }

    #[test]
    fn patch_token_shape() {
        let store = ParamStore::new(0);
        let enc = PatchEncoder::new(8, 64, store.var_builder(DType::F32, &dev())).unwrap();
        let img = Tensor::zeros((1, 3, 32, 32), DType::F32, &dev()).unwrap();
        assert_eq!(enc.encode(&img).unwrap().dims(), &[1, 16, 64]);
    }

    #[test]
    fn zero_image_zero_tokens() {
        let store = ParamStore::new(0);
        let enc = PatchEncoder::new(4, 16, store.var_builder(DType::F64, &dev())).unwrap();
        let img = Tensor::zeros((2, 3, 8, 8), DType::F64, &dev()).unwrap();
        let out = enc.encode(&img).unwrap().abs().unwrap().max_all().unwrap();
        assert_eq!(out.to_scalar::<f64>().unwrap(), 0.);
    }

    #[test]
    fn patch_locality() {
        let store = ParamStore::new(3);
        let enc = PatchEncoder::new(4, 16, store.var_builder(DType::F64, &dev())).unwrap();
        let a = Tensor::rand(0f64, 1., (1, 3, 8, 8), &dev()).unwrap();
        // Change only the bottom-right patch (grid row 1, col 1 -> token 3).
        let mut data = a.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        for c in 0..3 {
            for y in 4..8 {
                for x in 4..8 {
                    let i = (c * 8 + y) * 8 + x;
                    data[i] = 1. - data[i];
                }
            }
        }
        let b = Tensor::from_vec(data, (1, 3, 8, 8), &dev()).unwrap();
        let ta = enc.encode(&a).unwrap().i(0).unwrap().to_vec2::<f64>().unwrap();
        let tb = enc.encode(&b).unwrap().i(0).unwrap().to_vec2::<f64>().unwrap();
        for row in 0..4 {
            if row == 3 {
                assert_ne!(ta[row], tb[row]);
            } else {
                assert_eq!(ta[row], tb[row]);
            }
        }
    }

    #[test]
    fn encoder_rejects_bad_input() {
        let store = ParamStore::new(0);
        let enc = PatchEncoder::new(8, 8, store.var_builder(DType::F32, &dev())).unwrap();
        let odd = Tensor::zeros((1, 3, 12, 16), DType::F32, &dev()).unwrap();
        assert!(enc.encode(&odd).is_err());
        let bright = Tensor::full(1.5f32, (1, 3, 8, 8), &dev()).unwrap();
        assert!(enc.encode(&bright).is_err());
    }

    #[test]
    fn content_projection_fixtures() {
        let store = ParamStore::new(0);
        let proj = ContentProjection::new(4, store.var_builder(DType::F64, &dev())).unwrap();
        let x = Tensor::randn(0f64, 1., (1, 3, 4), &dev()).unwrap();
        let flat = |t: &Tensor| t.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(flat(&proj.project(&x).unwrap()), flat(&x));
        let zero = x.zeros_like().unwrap();
        assert!(flat(&proj.project(&zero).unwrap()).iter().all(|v| *v == 0.));

        let two = ContentProjection::from_weight((Tensor::eye(4, DType::F64, &dev()).unwrap() * 2.).unwrap()).unwrap();
        let got = flat(&two.project(&x).unwrap());
        // Direct matrix evaluation: y_j = sum_k W_jk x_k with W = 2I.
        let xs = flat(&x);
        for (chunk_y, chunk_x) in got.chunks(4).zip(xs.chunks(4)) {
            for j in 0..4 {
                let expected: f64 = (0..4).map(|k| if j == k { 2. * chunk_x[k] } else { 0. }).sum();
                assert!((chunk_y[j] - expected).abs() < 1e-15);
            }
        }
        assert!(proj
            .project(&Tensor::zeros((1, 2, 5), DType::F64, &dev()).unwrap())
            .is_err());
    }

    #[test]
    fn resampler_shape_contract() {
        let store = ParamStore::new(0);
        let r = Resampler::new(16, 6, 2, 4, store.var_builder(DType::F32, &dev())).unwrap();
        for o in [1, 16, 64] {
            let raw = Tensor::randn(0f32, 1., (2, o, 16), &dev()).unwrap();
            assert_eq!(r.project(&raw).unwrap().dims(), &[2, 6, 16]);
        }
        assert!(r
            .project(&Tensor::zeros((1, 3, 8), DType::F32, &dev()).unwrap())
            .is_err());
    }

    #[test]
    fn resampler_zero_input_returns_queries() {
        let store = ParamStore::new(0);
        let r = Resampler::new(16, 6, 2, 4, store.var_builder(DType::F64, &dev())).unwrap();
        let raw = Tensor::zeros((1, 16, 16), DType::F64, &dev()).unwrap();
        let out = r.project(&raw).unwrap().i(0).unwrap().to_vec2::<f64>().unwrap();
        assert_eq!(out, r.latent_queries().to_vec2::<f64>().unwrap());
    }
}
