//! Triplet training: per-stream condition dropout, the noise-prediction
//! loss on the stylized target, and a deterministic Adam loop.

use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{forward_noise_batch, randn_like_shape, NoiseSchedule};
use crate::error::{Error, Result};
use crate::image::{Image, LatentCodec};
use crate::model::{checkpoint, ConditionSet, CsgoModel, InjectionConfig};

/// Loss above which a run is considered diverged.
pub const DIVERGENCE_THRESHOLD: f64 = 1e4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub drop_rate_text: f64,
    pub drop_rate_content: f64,
    pub drop_rate_style: f64,
    pub learning_rate: f64,
    pub steps: usize,
    pub seed: u64,
    pub batch_size: usize,
    /// Parameter-name prefixes excluded from optimization.
    pub freeze: Vec<String>,
    /// Save an intermediate checkpoint every this many steps (0 disables).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            drop_rate_text: 0.15,
            drop_rate_content: 0.15,
            drop_rate_style: 0.15,
            learning_rate: 1e-4,
            steps: 1000,
            seed: 0,
            batch_size: 8,
            freeze: Vec::new(),
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, r) in [
            ("drop_rate_text", self.drop_rate_text),
            ("drop_rate_content", self.drop_rate_content),
            ("drop_rate_style", self.drop_rate_style),
        ] {
            if !(0. ..=1.).contains(&r) {
                return Err(Error::invalid(format!("{name} = {r} must lie in [0, 1]")));
            }
        }
        if !(self.learning_rate > 0. && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning_rate must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be positive"));
        }
        Ok(())
    }
}

/// One training record held in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct TripletSample {
    pub content: Image,
    pub style: Image,
    pub target: Image,
    pub caption: String,
}

/// A batch of content, style, and target images (B, 3, H, W), caption ids
/// (B, L), and per-sample drop masks.
#[derive(Debug, Clone)]
pub struct TrainingBatch {
    pub content: Tensor,
    pub style: Tensor,
    pub target: Tensor,
    pub captions: Tensor,
    pub drop_text: Vec<bool>,
    pub drop_content: Vec<bool>,
    pub drop_style: Vec<bool>,
}

impl TrainingBatch {
    pub fn from_samples(model: &CsgoModel, samples: &[&TripletSample]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::invalid("training batch must be nonempty"));
        }
        let (dtype, device) = (model.dtype(), model.device());
        let stack = |f: fn(&TripletSample) -> &Image| -> Result<Tensor> {
            let imgs: Vec<&Image> = samples.iter().map(|s| f(s)).collect();
            Image::batch_tensor(&imgs, dtype, device)
        };
        let captions: Vec<&str> = samples.iter().map(|s| s.caption.as_str()).collect();
        let b = samples.len();
        let batch = Self {
            content: stack(|s| &s.content)?,
            style: stack(|s| &s.style)?,
            target: stack(|s| &s.target)?,
            captions: model.tokenize(&captions)?,
            drop_text: vec![false; b],
            drop_content: vec![false; b],
            drop_style: vec![false; b],
        };
        batch.validate()?;
        Ok(batch)
    }

    pub fn len(&self) -> usize {
        self.drop_text.len()
    }

    pub fn is_empty(&self) -> bool {
        self.drop_text.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let b = self.target.dim(0)?;
        for n in [
            self.content.dim(0)?,
            self.style.dim(0)?,
            self.captions.dim(0)?,
            self.drop_text.len(),
            self.drop_content.len(),
            self.drop_style.len(),
        ] {
            if n != b {
                return Err(Error::shape(b, n));
            }
        }
        crate::diffusion::ensure_finite(&self.target, "training targets")
    }

    pub fn conditions(&self) -> ConditionSet {
        ConditionSet {
            caption_ids: self.captions.clone(),
            content: Some(self.content.clone()),
            style: Some(self.style.clone()),
            drop_text: self.drop_text.clone(),
            drop_content: self.drop_content.clone(),
            drop_style: self.drop_style.clone(),
        }
    }
}

/// Independently drops each stream of each sample with its configured
/// probability. Draw order per sample: text, content, style.
pub fn drop_conditions<R: Rng>(batch: &TrainingBatch, config: &TrainConfig, rng: &mut R) -> TrainingBatch {
    let mut out = batch.clone();
    for i in 0..batch.len() {
        out.drop_text[i] = batch.drop_text[i] || rng.random::<f64>() < config.drop_rate_text;
        out.drop_content[i] = batch.drop_content[i] || rng.random::<f64>() < config.drop_rate_content;
        out.drop_style[i] = batch.drop_style[i] || rng.random::<f64>() < config.drop_rate_style;
    }
    out
}

/// A noise predictor trainable on [`TrainingBatch`]es.
pub trait EpsilonModel {
    fn codec(&self) -> LatentCodec;

    fn predict_eps(&self, z_t: &Tensor, timesteps: &[usize], batch: &TrainingBatch) -> Result<Tensor>;
}

impl EpsilonModel for CsgoModel {
    fn codec(&self) -> LatentCodec {
        CsgoModel::codec(self)
    }

    fn predict_eps(&self, z_t: &Tensor, timesteps: &[usize], batch: &TrainingBatch) -> Result<Tensor> {
        let cfg = InjectionConfig::training().with_tokens(self.config().n_style_tokens);
        self.predict_batch(z_t, timesteps, &batch.conditions(), &cfg)
    }
}

/// Everything one loss evaluation drew and produced.
#[derive(Debug, Clone)]
pub struct LossTrace {
    pub loss: Tensor,
    pub timesteps: Vec<usize>,
    pub noise: Tensor,
    pub z_t: Tensor,
    pub x0: Tensor,
}

/// Per-sample uniform timestep and Gaussian noise (drawn in that order),
/// applied to the target image's latent; returns the mean squared error.
pub fn diffusion_loss_traced<M: EpsilonModel, R: Rng>(
    model: &M,
    batch: &TrainingBatch,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<LossTrace> {
    if batch.is_empty() {
        return Err(Error::invalid("training batch must be nonempty"));
    }
    let x0 = model.codec().encode(&batch.target)?;
    let timesteps: Vec<usize> = (0..batch.len())
        .map(|_| rng.random_range(0..schedule.num_steps()))
        .collect();
    let noise = randn_like_shape(rng, x0.dims(), x0.dtype(), x0.device())?;
    let z_t = forward_noise_batch(schedule, &x0, &timesteps, &noise)?;
    let eps = model.predict_eps(&z_t, &timesteps, batch)?;
    if eps.dims() != noise.dims() {
        return Err(Error::shape(noise.dims(), eps.dims()));
    }
    let loss = (&eps - &noise)?.sqr()?.mean_all()?;
    let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("diffusion loss at timesteps {timesteps:?}")));
    }
    Ok(LossTrace {
        loss,
        timesteps,
        noise,
        z_t,
        x0,
    })
}

pub fn diffusion_loss<M: EpsilonModel, R: Rng>(
    model: &M,
    batch: &TrainingBatch,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<Tensor> {
    Ok(diffusion_loss_traced(model, batch, schedule, rng)?.loss)
}

/// Mean of the first and last `window` losses.
pub fn smoothed_endpoints(losses: &[f64], window: usize) -> Option<(f64, f64)> {
    let w = window.min(losses.len());
    if w == 0 {
        return None;
    }
    let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
    Some((mean(&losses[..w]), mean(&losses[losses.len() - w..])))
}

/// Where a run writes its artifacts.
#[derive(Debug, Clone, Default)]
pub struct TrainOutputs {
    pub checkpoint: Option<PathBuf>,
    pub loss_csv: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub losses: Vec<f64>,
    pub checkpoints: Vec<PathBuf>,
}

fn interval_path(final_path: &Path, step: usize) -> PathBuf {
    let stem = final_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "checkpoint".into());
    final_path.with_file_name(format!("{stem}-step{step}.safetensors"))
}

/// Trains `model` in place. Batches come from reshuffled passes over
/// `data`; with equal seeds, runs are identical.
pub fn train(
    model: &CsgoModel,
    data: &[TripletSample],
    schedule: &NoiseSchedule,
    config: &TrainConfig,
    outputs: &TrainOutputs,
) -> Result<TrainReport> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    let injection = InjectionConfig::training().with_tokens(model.config().n_style_tokens);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let vars = model.store().trainable(&config.freeze);
    let mut opt = AdamW::new(
        vars.clone(),
        ParamsAdamW {
            lr: config.learning_rate,
            weight_decay: 0.,
            ..Default::default()
        },
    )?;
    let mut csv = match &outputs.loss_csv {
        Some(path) => {
            if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
                std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
            let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
            writeln!(f, "step,loss").map_err(|e| Error::io(path, e))?;
            Some((f, path.clone()))
        }
        None => None,
    };
    let mut order: Vec<usize> = Vec::new();
    let mut losses = Vec::with_capacity(config.steps);
    let mut checkpoints = Vec::new();
    let batch_size = config.batch_size.min(data.len());
    for step in 1..=config.steps {
        let mut picks = Vec::with_capacity(batch_size);
        while picks.len() < batch_size {
            if order.is_empty() {
                order = (0..data.len()).collect();
                order.shuffle(&mut rng);
                order.reverse();
            }
            picks.push(order.pop().expect("refilled above"));
        }
        let samples: Vec<&TripletSample> = picks.iter().map(|&i| &data[i]).collect();
        let batch = drop_conditions(&TrainingBatch::from_samples(model, &samples)?, config, &mut rng);
        let loss = diffusion_loss(model, &batch, schedule, &mut rng)?;
        let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if !value.is_finite() || value > DIVERGENCE_THRESHOLD {
            return Err(Error::Diverged { step, loss: value });
        }
        if !vars.is_empty() {
            opt.backward_step(&loss)?;
        }
        losses.push(value);
        if let Some((f, path)) = csv.as_mut() {
            writeln!(f, "{step},{value}").map_err(|e| Error::io(&*path, e))?;
        }
        if step % 50 == 0 || step == 1 {
            log::info!("step {step}/{} loss {value:.5}", config.steps);
        }
        if let Some(final_path) = &outputs.checkpoint {
            if config.checkpoint_every > 0 && step % config.checkpoint_every == 0 && step != config.steps {
                let path = interval_path(final_path, step);
                checkpoint::save(model, &injection, &path)?;
                checkpoints.push(path);
            }
        }
    }
    if let Some(path) = &outputs.checkpoint {
        checkpoint::save(model, &injection, path)?;
        checkpoints.push(path.clone());
    }
    Ok(TrainReport { losses, checkpoints })
}

/// Convenience for tests and benches: a seeded standard-normal latent batch.
pub fn random_latents(seed: u64, dims: &[usize], dtype: DType, device: &Device) -> Result<Tensor> {
    randn_like_shape(&mut ChaCha8Rng::seed_from_u64(seed), dims, dtype, device)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn tiny_batch(model: &CsgoModel, b: usize) -> TrainingBatch {
        let s = model.config().image_size;
        let samples: Vec<TripletSample> = (0..b)
            .map(|i| TripletSample {
                content: Image::filled(s, s, [0.1 * i as f32, 0.2, 0.3]),
                style: Image::filled(s, s, [0.9, 0.1 * i as f32, 0.5]),
                target: Image::from_fn(s, s, |y, x| [(x + y) as f32 / (2 * s) as f32, 0.4, 0.1 * i as f32]),
                caption: "a [vcp]".into(),
            })
            .collect();
        let refs: Vec<&TripletSample> = samples.iter().collect();
        TrainingBatch::from_samples(model, &refs).unwrap()
    }

    fn tiny_model() -> CsgoModel {
        CsgoModel::new(ModelConfig::tiny(), 0, DType::F32, &Device::Cpu).unwrap()
    }

    #[test]
    fn trivial_drop_rates() {
        let model = tiny_model();
        let batch = tiny_batch(&model, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let none = TrainConfig {
            drop_rate_text: 0.,
            drop_rate_content: 0.,
            drop_rate_style: 0.,
            ..Default::default()
        };
        let kept = drop_conditions(&batch, &none, &mut rng);
        assert!(kept
            .drop_text
            .iter()
            .chain(&kept.drop_content)
            .chain(&kept.drop_style)
            .all(|d| !d));
        let all = TrainConfig {
            drop_rate_text: 1.,
            drop_rate_content: 1.,
            drop_rate_style: 1.,
            ..Default::default()
        };
        let dropped = drop_conditions(&batch, &all, &mut rng);
        assert!(dropped
            .drop_text
            .iter()
            .chain(&dropped.drop_content)
            .chain(&dropped.drop_style)
            .all(|d| *d));
    }

    #[test]
    fn rejects_bad_rates() {
        let cfg = TrainConfig {
            drop_rate_style: 1.5,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn loss_is_nonnegative_and_finite() {
        let model = tiny_model();
        let batch = tiny_batch(&model, 3);
        let schedule = NoiseSchedule::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let v = diffusion_loss(&model, &batch, &schedule, &mut rng)
            .unwrap()
            .to_scalar::<f32>()
            .unwrap();
        assert!(v.is_finite() && v >= 0.);
    }

    #[test]
    fn zero_steps_keep_initialization() {
        let model = tiny_model();
        let before = model.store().snapshot().unwrap();
        let s = model.config().image_size;
        let data = vec![TripletSample {
            content: Image::filled(s, s, [0.5; 3]),
            style: Image::filled(s, s, [0.2; 3]),
            target: Image::filled(s, s, [0.7; 3]),
            caption: "a [vcp]".into(),
        }];
        let cfg = TrainConfig {
            steps: 0,
            ..Default::default()
        };
        let report = train(&model, &data, &NoiseSchedule::default(), &cfg, &TrainOutputs::default()).unwrap();
        assert!(report.losses.is_empty());
        let after = model.store().snapshot().unwrap();
        for (k, v) in before {
            let a = v.flatten_all().unwrap().to_vec1::<f32>().unwrap();
            let b = after[&k].flatten_all().unwrap().to_vec1::<f32>().unwrap();
            assert_eq!(a, b, "{k}");
        }
    }

    #[test]
    fn smoothing_endpoints() {
        assert_eq!(smoothed_endpoints(&[4., 2., 1., 1.], 2), Some((3., 1.)));
        assert_eq!(smoothed_endpoints(&[], 3), None);
    }
}
