//! Content alignment: distance between style-stripped features, and the
//! complementary distance between the stripped statistics themselves.

use std::sync::Arc;

use candle_core::{DType, Device, Module};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::nn::{conv2d, Conv2d};
use crate::params::ParamStore;

/// Default lower bound on the per-channel standard deviation.
pub const ADA_EPSILON: f64 = 1e-6;

/// Maps an image to a (tokens, channels) feature matrix.
pub trait FeatureExtractor: Send + Sync {
    fn descriptor(&self) -> String;

    fn channels(&self) -> usize;

    /// Row-major (tokens, channels).
    fn extract(&self, image: &Image) -> Result<Features>;
}

impl<T: FeatureExtractor + ?Sized> FeatureExtractor for Arc<T> {
    fn descriptor(&self) -> String {
        (**self).descriptor()
    }

    fn channels(&self) -> usize {
        (**self).channels()
    }

    fn extract(&self, image: &Image) -> Result<Features> {
        (**self).extract(image)
    }
}

/// A dense (tokens, channels) matrix in f64.
#[derive(Debug, Clone, PartialEq)]
pub struct Features {
    tokens: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Features {
    pub fn new(tokens: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != tokens * channels {
            return Err(Error::shape(tokens * channels, data.len()));
        }
        Ok(Self { tokens, channels, data })
    }

    /// One column per channel.
    pub fn from_columns(columns: &[Vec<f64>]) -> Result<Self> {
        let channels = columns.len();
        let tokens = columns.first().map_or(0, Vec::len);
        if columns.iter().any(|c| c.len() != tokens) {
            return Err(Error::invalid("feature columns have different lengths"));
        }
        let data = (0..tokens).flat_map(|t| columns.iter().map(move |c| c[t])).collect();
        Self::new(tokens, channels, data)
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, token: usize, channel: usize) -> f64 {
        self.data[token * self.channels + channel]
    }

    /// Per-channel mean and population standard deviation over tokens.
    pub fn channel_stats(&self) -> Vec<(f64, f64)> {
        let n = self.tokens as f64;
        (0..self.channels)
            .map(|c| {
                let mean = (0..self.tokens).map(|t| self.get(t, c)).sum::<f64>() / n;
                let var = (0..self.tokens).map(|t| (self.get(t, c) - mean).powi(2)).sum::<f64>() / n;
                (mean, var.sqrt())
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CasResult {
    pub score: f64,
    pub extractor: String,
}

/// `(F - mean) / max(std, epsilon)` per channel across tokens.
pub fn ada_normalize(features: &Features, epsilon: f64) -> Result<Features> {
    if features.tokens < 2 {
        return Err(Error::invalid(format!(
            "ada normalization needs at least 2 tokens, got {}",
            features.tokens
        )));
    }
    if !(epsilon > 0.) {
        return Err(Error::invalid("epsilon must be positive"));
    }
    let stats = features.channel_stats();
    let data = features
        .data
        .chunks(features.channels)
        .flat_map(|row| {
            row.iter()
                .zip(&stats)
                .map(|(v, (mean, std))| (v - mean) / std.max(epsilon))
                .collect::<Vec<_>>()
        })
        .collect();
    Features::new(features.tokens, features.channels, data)
}

fn check_same_shape(a: &Features, b: &Features) -> Result<()> {
    if (a.tokens, a.channels) != (b.tokens, b.channels) {
        return Err(Error::shape((a.tokens, a.channels), (b.tokens, b.channels)));
    }
    Ok(())
}

/// Squared Euclidean distance between Ada-normalized feature matrices.
pub fn cas_from_features(a: &Features, b: &Features) -> Result<f64> {
    check_same_shape(a, b)?;
    let na = ada_normalize(a, ADA_EPSILON)?;
    let nb = ada_normalize(b, ADA_EPSILON)?;
    Ok(na.data.iter().zip(&nb.data).map(|(x, y)| (x - y).powi(2)).sum())
}

fn check_resolution(a: &Image, b: &Image) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::invalid(format!(
            "image resolutions differ: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

pub fn cas(extractor: &dyn FeatureExtractor, a: &Image, b: &Image) -> Result<CasResult> {
    check_resolution(a, b)?;
    let score = cas_from_features(&extractor.extract(a)?, &extractor.extract(b)?)?;
    if !score.is_finite() {
        return Err(Error::NonFinite("content alignment score".into()));
    }
    Ok(CasResult {
        score,
        extractor: extractor.descriptor(),
    })
}

/// Euclidean distance between the concatenated per-channel (mean, std)
/// vectors: exactly the statistics that Ada normalization removes.
pub fn style_stat_distance_from_features(a: &Features, b: &Features) -> Result<f64> {
    check_same_shape(a, b)?;
    let sq: f64 = a
        .channel_stats()
        .iter()
        .zip(b.channel_stats())
        .map(|((ma, sa), (mb, sb))| (ma - mb).powi(2) + (sa - sb).powi(2))
        .sum();
    Ok(sq.sqrt())
}

pub fn style_stat_distance(extractor: &dyn FeatureExtractor, a: &Image, b: &Image) -> Result<f64> {
    check_resolution(a, b)?;
    style_stat_distance_from_features(&extractor.extract(a)?, &extractor.extract(b)?)
}

/// Pixels as tokens, RGB as channels.
#[derive(Debug, Clone, Copy, Default)]
pub struct PixelExtractor;

impl FeatureExtractor for PixelExtractor {
    fn descriptor(&self) -> String {
        "pixels".into()
    }

    fn channels(&self) -> usize {
        Image::CHANNELS
    }

    fn extract(&self, image: &Image) -> Result<Features> {
        let data = image.data().iter().map(|v| *v as f64).collect();
        Features::new(image.height() * image.width(), Image::CHANNELS, data)
    }
}

/// A fixed random convolution stack (3x3 conv, ReLU, 3x3 stride-2 conv).
/// Spatial positions of the output map are the tokens.
#[derive(Debug, Clone)]
pub struct ConvFeatureExtractor {
    conv1: Conv2d,
    conv2: Conv2d,
    channels: usize,
    seed: u64,
}

impl ConvFeatureExtractor {
    pub fn new(channels: usize, seed: u64) -> Result<Self> {
        if channels == 0 {
            return Err(Error::invalid("extractor needs at least one channel"));
        }
        let store = ParamStore::new(seed);
        let vb = store.var_builder(DType::F64, &Device::Cpu);
        Ok(Self {
            conv1: conv2d(3, channels, 3, 1, 1, vb.pp("conv1"))?,
            conv2: conv2d(channels, channels, 3, 2, 1, vb.pp("conv2"))?,
            channels,
            seed,
        })
    }
}

impl Default for ConvFeatureExtractor {
    fn default() -> Self {
        Self::new(16, 0).expect("default extractor")
    }
}

impl FeatureExtractor for ConvFeatureExtractor {
    fn descriptor(&self) -> String {
        format!("conv-stack(c={},seed={})", self.channels, self.seed)
    }

    fn channels(&self) -> usize {
        self.channels
    }

    fn extract(&self, image: &Image) -> Result<Features> {
        let x = image.to_tensor(DType::F64, &Device::Cpu)?.unsqueeze(0)?;
        let h = self.conv2.forward(&self.conv1.forward(&x)?.relu()?)?.squeeze(0)?;
        let (c, hh, ww) = h.dims3()?;
        let data = h.reshape((c, hh * ww))?.t()?.flatten_all()?.to_vec1::<f64>()?;
        Features::new(hh * ww, c, data)
    }
}

/// Extractor by name: `pixels` or `conv`.
pub fn extractor_by_name(name: &str, seed: u64) -> Result<Arc<dyn FeatureExtractor>> {
    match name {
        "pixels" => Ok(Arc::new(PixelExtractor)),
        "conv" => Ok(Arc::new(ConvFeatureExtractor::new(16, seed)?)),
        other => Err(Error::invalid(format!(
            "unknown extractor {other:?} (expected pixels or conv)"
        ))),
    }
}
