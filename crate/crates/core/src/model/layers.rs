use candle_core::{Module, Tensor, D};
use candle_nn::{GroupNorm, Linear, VarBuilder};

use crate::nn::{conv2d, linear_zero_bias, zero_linear, Conv2d, LayerNorm};

/// Multi-head attention of `queries` over `context` tokens, returning the
/// projected attention output (no residual).
#[derive(Debug, Clone)]
pub struct CrossAttention {
    to_q: Linear,
    to_k: Linear,
    to_v: Linear,
    to_out: Linear,
    heads: usize,
}

impl CrossAttention {
    pub fn new(
        query_dim: usize,
        context_dim: usize,
        heads: usize,
        zero_out: bool,
        vb: VarBuilder,
    ) -> candle_core::Result<Self> {
        let inner = query_dim;
        let to_q = candle_nn::linear_no_bias(query_dim, inner, vb.pp("to_q"))?;
        let to_k = candle_nn::linear_no_bias(context_dim, inner, vb.pp("to_k"))?;
        let to_v = candle_nn::linear_no_bias(context_dim, inner, vb.pp("to_v"))?;
        let to_out = if zero_out {
            zero_linear(inner, query_dim, vb.pp("to_out"))?
        } else {
            linear_zero_bias(inner, query_dim, vb.pp("to_out"))?
        };
        Ok(Self {
            to_q,
            to_k,
            to_v,
            to_out,
            heads,
        })
    }

    fn split_heads(&self, xs: &Tensor) -> candle_core::Result<Tensor> {
        let (b, n, c) = xs.dims3()?;
        xs.reshape((b, n, self.heads, c / self.heads))?
            .transpose(1, 2)?
            .contiguous()
    }

    /// `queries`: (B, N, Dq); `context`: (B, M, Dc).
    pub fn forward(&self, queries: &Tensor, context: &Tensor) -> candle_core::Result<Tensor> {
        let (b, n, _) = queries.dims3()?;
        let q = self.split_heads(&self.to_q.forward(queries)?)?;
        let k = self.split_heads(&self.to_k.forward(context)?)?;
        let v = self.split_heads(&self.to_v.forward(context)?)?;
        let head_dim = q.dim(D::Minus1)?;
        let scores = (q.matmul(&k.t()?)? / (head_dim as f64).sqrt())?;
        let weights = candle_nn::ops::softmax(&scores, D::Minus1)?;
        let out = weights
            .matmul(&v)?
            .transpose(1, 2)?
            .reshape((b, n, self.heads * head_dim))?;
        self.to_out.forward(&out)
    }
}

/// Two-layer GELU MLP.
#[derive(Debug, Clone)]
pub struct FeedForward {
    up: Linear,
    down: Linear,
}

impl FeedForward {
    pub fn new(dim: usize, mult: usize, zero_out: bool, vb: VarBuilder) -> candle_core::Result<Self> {
        let up = linear_zero_bias(dim, dim * mult, vb.pp("up"))?;
        let down = if zero_out {
            zero_linear(dim * mult, dim, vb.pp("down"))?
        } else {
            linear_zero_bias(dim * mult, dim, vb.pp("down"))?
        };
        Ok(Self { up, down })
    }
}

impl Module for FeedForward {
    fn forward(&self, xs: &Tensor) -> candle_core::Result<Tensor> {
        self.down.forward(&self.up.forward(xs)?.gelu()?)
    }
}

/// Sinusoidal features followed by a SiLU MLP.
#[derive(Debug, Clone)]
pub struct TimeEmbedding {
    fc1: Linear,
    fc2: Linear,
    dim: usize,
}

impl TimeEmbedding {
    pub fn new(dim: usize, vb: VarBuilder) -> candle_core::Result<Self> {
        Ok(Self {
            fc1: candle_nn::linear(dim, dim, vb.pp("fc1"))?,
            fc2: candle_nn::linear(dim, dim, vb.pp("fc2"))?,
            dim,
        })
    }

    pub fn forward(&self, timesteps: &[usize], like: &Tensor) -> candle_core::Result<Tensor> {
        let feats = crate::nn::timestep_embedding(timesteps, self.dim, like.dtype(), like.device())?;
        self.fc2.forward(&self.fc1.forward(&feats)?.silu()?)
    }
}

/// GroupNorm-SiLU-conv twice, with timestep conditioning and a skip path.
#[derive(Debug, Clone)]
pub struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    time_proj: Linear,
    norm2: GroupNorm,
    conv2: Conv2d,
    shortcut: Option<Conv2d>,
}

impl ResBlock {
    pub fn new(in_c: usize, out_c: usize, time_dim: usize, groups: usize, vb: VarBuilder) -> candle_core::Result<Self> {
        let in_groups = if in_c % groups == 0 { groups } else { 1 };
        Ok(Self {
            norm1: candle_nn::group_norm(in_groups, in_c, 1e-5, vb.pp("norm1"))?,
            conv1: conv2d(in_c, out_c, 3, 1, 1, vb.pp("conv1"))?,
            time_proj: candle_nn::linear(time_dim, out_c, vb.pp("time_proj"))?,
            norm2: candle_nn::group_norm(groups, out_c, 1e-5, vb.pp("norm2"))?,
            conv2: conv2d(out_c, out_c, 3, 1, 1, vb.pp("conv2"))?,
            shortcut: if in_c != out_c {
                Some(conv2d(in_c, out_c, 1, 1, 0, vb.pp("shortcut"))?)
            } else {
                None
            },
        })
    }

    pub fn forward(&self, xs: &Tensor, temb: &Tensor) -> candle_core::Result<Tensor> {
        let h = self.conv1.forward(&self.norm1.forward(xs)?.silu()?)?;
        let t = self.time_proj.forward(&temb.silu()?)?.unsqueeze(2)?.unsqueeze(3)?;
        let h = h.broadcast_add(&t)?;
        let h = self.conv2.forward(&self.norm2.forward(&h)?.silu()?)?;
        let skip = match &self.shortcut {
            Some(conv) => conv.forward(xs)?,
            None => xs.clone(),
        };
        h + skip
    }
}

/// Text cross-attention over the spatial tokens of a feature map, plus an
/// optional decoupled injection attention whose output is scaled:
/// `h + Attn(h, text) + scale * Attn'(h, tokens)`.
#[derive(Debug, Clone)]
pub struct SpatialAttention {
    norm: LayerNorm,
    text: CrossAttention,
    injection: Option<(String, CrossAttention)>,
}

impl SpatialAttention {
    pub fn new(
        channels: usize,
        text_dim: usize,
        heads: usize,
        injection: Option<(&str, usize)>,
        vb: VarBuilder,
    ) -> candle_core::Result<Self> {
        let injection = match injection {
            Some((name, dim)) => Some((
                name.to_string(),
                CrossAttention::new(channels, dim, heads, false, vb.pp(name))?,
            )),
            None => None,
        };
        Ok(Self {
            norm: LayerNorm::new(channels, vb.pp("norm"))?,
            text: CrossAttention::new(channels, text_dim, heads, false, vb.pp("text"))?,
            injection,
        })
    }

    /// Whether this block carries an injection attention.
    pub fn has_injection(&self) -> bool {
        self.injection.is_some()
    }

    /// `injected`: condition tokens and their scale. A zero scale skips the
    /// attention entirely, which is exactly `h + 0`.
    pub fn forward(&self, xs: &Tensor, text: &Tensor, injected: Option<(&Tensor, f64)>) -> candle_core::Result<Tensor> {
        let (b, c, h, w) = xs.dims4()?;
        let tokens = xs.flatten_from(2)?.transpose(1, 2)?.contiguous()?;
        let normed = self.norm.forward(&tokens)?;
        let mut out = (&tokens + self.text.forward(&normed, text)?)?;
        if let (Some((_, attn)), Some((cond, scale))) = (&self.injection, injected) {
            if scale != 0. {
                out = (out + attn.forward(&normed, cond)?.affine(scale, 0.)?)?;
            }
        }
        out.transpose(1, 2)?.reshape((b, c, h, w))
    }
}

/// A resolution level: residual block followed by spatial attention.
#[derive(Debug, Clone)]
pub struct Stage {
    pub res: ResBlock,
    pub attn: SpatialAttention,
}

impl Stage {
    pub fn forward(
        &self,
        xs: &Tensor,
        temb: &Tensor,
        text: &Tensor,
        injected: Option<(&Tensor, f64)>,
    ) -> candle_core::Result<Tensor> {
        let h = self.res.forward(xs, temb)?;
        self.attn.forward(&h, text, injected)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use candle_core::{DType, Device};

    #[test]
    fn attention_shapes() {
        let store = ParamStore::new(1);
        let vb = store.var_builder(DType::F32, &Device::Cpu);
        let attn = CrossAttention::new(16, 8, 4, false, vb).unwrap();
        let q = Tensor::ones((2, 5, 16), DType::F32, &Device::Cpu).unwrap();
        let ctx = Tensor::ones((2, 3, 8), DType::F32, &Device::Cpu).unwrap();
        assert_eq!(attn.forward(&q, &ctx).unwrap().dims(), &[2, 5, 16]);
    }

    #[test]
    fn zero_scale_injection_is_skipped() {
        let store = ParamStore::new(2);
        let vb = store.var_builder(DType::F64, &Device::Cpu);
        let block = SpatialAttention::new(8, 4, 2, Some(("style", 6)), vb).unwrap();
        let dev = Device::Cpu;
        let x = Tensor::randn(0f64, 1., (1, 8, 2, 2), &dev).unwrap();
        let text = Tensor::randn(0f64, 1., (1, 3, 4), &dev).unwrap();
        let s1 = Tensor::randn(0f64, 1., (1, 2, 6), &dev).unwrap();
        let s2 = Tensor::randn(0f64, 1., (1, 2, 6), &dev).unwrap();
        let a = block.forward(&x, &text, Some((&s1, 0.))).unwrap();
        let b = block.forward(&x, &text, Some((&s2, 0.))).unwrap();
        let c = block.forward(&x, &text, None).unwrap();
        let flat = |t: &Tensor| t.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(flat(&a), flat(&b));
        assert_eq!(flat(&a), flat(&c));
        let d = block.forward(&x, &text, Some((&s1, 1.))).unwrap();
        assert_ne!(flat(&a), flat(&d));
    }
}
