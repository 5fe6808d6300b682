//! Toy low-rank adapter generator. An adapter set is trained on a single
//! image; its down-block part is treated as the content part and its
//! up-block part as the style part. Candidates come from the base model
//! with the content part of one image and the style part of another.

use std::collections::{BTreeMap, HashMap};
use std::hash::{Hash, Hasher};
use std::sync::{Arc, Mutex};

use candle_core::{DType, Device, Shape, Tensor, Var};
use candle_nn::var_builder::SimpleBackend;
use candle_nn::{AdamW, Init, Optimizer, ParamsAdamW, VarBuilder};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::CandidateGenerator;
use crate::diffusion::{DdimSampler, NoiseSchedule};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::model::{ConditionSet, CsgoModel, InjectionConfig};
use crate::params::ParamStore;
use crate::training::{diffusion_loss, TrainingBatch, TripletSample, DIVERGENCE_THRESHOLD};

pub const CONTENT_PREFIX: &str = "unet.down.";
pub const STYLE_PREFIX: &str = "unet.up.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdapterConfig {
    pub rank: usize,
    pub train_steps: usize,
    pub learning_rate: f64,
    /// Copies of the image per step, each with its own timestep and noise.
    pub batch_size: usize,
    pub sample_steps: usize,
    pub prompt: String,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            rank: 64,
            train_steps: 1000,
            learning_rate: 1e-3,
            batch_size: 4,
            sample_steps: 20,
            prompt: "a [vcp]".into(),
        }
    }
}

/// Low-rank factors `(A, B)` per adapted weight; the weight update is
/// `B A` reshaped to the weight's shape. `B` starts at zero.
#[derive(Debug, Clone)]
pub struct AdapterSet {
    factors: BTreeMap<String, (Var, Var)>,
}

impl AdapterSet {
    /// Factors for every matrix or convolution weight under the content and
    /// style prefixes, with rank capped by the flattened weight size.
    pub fn new(base: &CsgoModel, rank: usize, seed: u64) -> Result<Self> {
        if rank == 0 {
            return Err(Error::invalid("adapter rank must be positive"));
        }
        let store = ParamStore::new(seed);
        let vb = store.var_builder(base.dtype(), base.device());
        let mut factors = BTreeMap::new();
        for (name, var) in base.store().vars() {
            if !(name.starts_with(CONTENT_PREFIX) || name.starts_with(STYLE_PREFIX)) || var.rank() < 2 {
                continue;
            }
            let dims = var.dims();
            let (out, inner) = (dims[0], dims[1..].iter().product::<usize>());
            let r = rank.min(out).min(inner);
            let (a_name, b_name) = (format!("{name}.lora_a"), format!("{name}.lora_b"));
            let stdev = 1. / (inner as f64).sqrt();
            vb.get_with_hints((r, inner), &a_name, Init::Randn { mean: 0., stdev })?;
            vb.get_with_hints((out, r), &b_name, Init::Const(0.))?;
            let var = |n: &str| store.get(n).expect("factor was just created");
            factors.insert(name, (var(&a_name), var(&b_name)));
        }
        Ok(Self { factors })
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.factors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.factors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.factors.is_empty()
    }

    /// Largest inner dimension over all factor pairs.
    pub fn max_rank(&self) -> usize {
        self.factors.values().map(|(a, _)| a.dims()[0]).max().unwrap_or(0)
    }

    pub fn factors(&self, name: &str) -> Option<(&Var, &Var)> {
        self.factors.get(name).map(|(a, b)| (a, b))
    }

    fn vars(&self) -> Vec<Var> {
        self.factors
            .values()
            .flat_map(|(a, b)| [a.clone(), b.clone()])
            .collect()
    }

    /// Only the factors whose names start with `prefix`.
    pub fn part(&self, prefix: &str) -> Self {
        Self {
            factors: self
                .factors
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// Union of two disjoint sets.
    pub fn merge(&self, other: &Self) -> Self {
        let mut factors = self.factors.clone();
        factors.extend(other.factors.iter().map(|(k, v)| (k.clone(), v.clone())));
        Self { factors }
    }

    /// Content part of `content`, style part of `style`.
    pub fn combine(content: &Self, style: &Self) -> Self {
        content.part(CONTENT_PREFIX).merge(&style.part(STYLE_PREFIX))
    }

    /// The base model with every adapted weight replaced by `W + B A`.
    pub fn apply(&self, base: &CsgoModel) -> Result<CsgoModel> {
        let backend = AdaptedBackend {
            base: base.store().clone(),
            factors: self.factors.clone(),
        };
        let vb = VarBuilder::from_backend(Box::new(backend), base.dtype(), base.device().clone());
        CsgoModel::from_var_builder(
            base.config().clone(),
            base.store().clone(),
            vb,
            base.dtype(),
            base.device(),
        )
    }
}

struct AdaptedBackend {
    base: ParamStore,
    factors: BTreeMap<String, (Var, Var)>,
}

impl SimpleBackend for AdaptedBackend {
    fn get(&self, s: Shape, name: &str, h: Init, dtype: DType, dev: &Device) -> candle_core::Result<Tensor> {
        let w = SimpleBackend::get(&self.base, s.clone(), name, h, dtype, dev)?;
        match self.factors.get(name) {
            Some((a, b)) => w + b.as_tensor().matmul(a.as_tensor())?.reshape(s)?,
            None => Ok(w),
        }
    }

    fn get_unchecked(&self, name: &str, dtype: DType, dev: &Device) -> candle_core::Result<Tensor> {
        self.base.get_unchecked(name, dtype, dev)
    }

    fn contains_tensor(&self, name: &str) -> bool {
        self.base.contains_tensor(name)
    }
}

/// Conditions with only the prompt active.
fn prompt_only(model: &CsgoModel, prompt: &str) -> Result<ConditionSet> {
    model.conditions(&[prompt], None, None)
}

fn image_key(image: &Image) -> u64 {
    let mut h = std::collections::hash_map::DefaultHasher::new();
    image.dims().hash(&mut h);
    for v in image.data() {
        v.to_bits().hash(&mut h);
    }
    h.finish()
}

/// Fits an adapter set to one image under the prompt, with both image
/// streams null.
pub fn train_adapter(
    base: &CsgoModel,
    image: &Image,
    config: &AdapterConfig,
    schedule: &NoiseSchedule,
    seed: u64,
) -> Result<AdapterSet> {
    let set = AdapterSet::new(base, config.rank, seed)?;
    let mut opt = AdamW::new(
        set.vars(),
        ParamsAdamW {
            lr: config.learning_rate,
            weight_decay: 0.,
            ..Default::default()
        },
    )?;
    let sample = TripletSample {
        content: image.clone(),
        style: image.clone(),
        target: image.clone(),
        caption: config.prompt.clone(),
    };
    if config.batch_size == 0 {
        return Err(Error::invalid("adapter batch size must be positive"));
    }
    let copies = vec![&sample; config.batch_size];
    let mut batch = TrainingBatch::from_samples(base, &copies)?;
    batch.drop_content = vec![true; config.batch_size];
    batch.drop_style = vec![true; config.batch_size];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for step in 1..=config.train_steps {
        let model = set.apply(base)?;
        let loss = diffusion_loss(&model, &batch, schedule, &mut rng)?;
        let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if !value.is_finite() || value > DIVERGENCE_THRESHOLD {
            return Err(Error::Diverged { step, loss: value });
        }
        opt.backward_step(&loss)?;
    }
    Ok(set)
}

/// Samples `n` images from the base model under an adapter set.
pub fn sample_with_adapters(
    base: &CsgoModel,
    adapters: &AdapterSet,
    config: &AdapterConfig,
    schedule: &NoiseSchedule,
    n: usize,
    seed: u64,
) -> Result<Vec<Image>> {
    let model = adapters.apply(base)?;
    let cond = prompt_only(&model, &config.prompt)?;
    let injection = InjectionConfig {
        delta_c: 0.,
        lambda_c: 0.,
        lambda_s: 0.,
        cfg_w: 1.,
        n_style_tokens: base.config().n_style_tokens,
    };
    let sampler = DdimSampler { clip_sample: Some(1.) };
    (0..n as u64)
        .map(|k| {
            let z = sampler.sample(
                &model.guided(injection),
                &cond,
                schedule,
                1.,
                config.sample_steps,
                seed.wrapping_add(k),
            )?;
            Ok(model.codec().decode_images(&z)?.remove(0))
        })
        .collect()
}

/// Candidate generator over a fixed base model. Adapter sets are cached per
/// distinct image and seeded from the image itself, so the cache never
/// changes results.
pub struct AdapterGenerator {
    base: CsgoModel,
    config: AdapterConfig,
    schedule: NoiseSchedule,
    cache: Mutex<HashMap<u64, Arc<AdapterSet>>>,
}

impl AdapterGenerator {
    pub fn new(base: CsgoModel, config: AdapterConfig, schedule: NoiseSchedule) -> Self {
        Self {
            base,
            config,
            schedule,
            cache: Mutex::new(HashMap::new()),
        }
    }

    pub fn adapters_for(&self, image: &Image) -> Result<Arc<AdapterSet>> {
        let key = image_key(image);
        if let Some(set) = self.cache.lock().unwrap().get(&key) {
            return Ok(set.clone());
        }
        let set = Arc::new(train_adapter(&self.base, image, &self.config, &self.schedule, key)?);
        self.cache.lock().unwrap().insert(key, set.clone());
        Ok(set)
    }

    /// Candidates from the content part of `content`'s adapters and the
    /// style part of `style`'s.
    pub fn combined(&self, content: &Image, style: &Image, n: usize, seed: u64) -> Result<Vec<Image>> {
        let c = self.adapters_for(content)?;
        let s = self.adapters_for(style)?;
        let set = AdapterSet::combine(&c, &s);
        sample_with_adapters(&self.base, &set, &self.config, &self.schedule, n, seed)
    }
}

impl CandidateGenerator for AdapterGenerator {
    fn descriptor(&self) -> String {
        format!("adapter(rank={},steps={})", self.config.rank, self.config.train_steps)
    }

    fn generate(&self, content: &Image, style: &Image, n: usize, seed: u64) -> Result<Vec<Image>> {
        let s = self.base.config().image_size;
        if content.dims() != (s, s) || style.dims() != (s, s) {
            return Err(Error::invalid(format!(
                "adapter generator works at {s}x{s}, got content {:?} and style {:?}",
                content.dims(),
                style.dims()
            )));
        }
        self.combined(content, style, n, seed)
    }
}
