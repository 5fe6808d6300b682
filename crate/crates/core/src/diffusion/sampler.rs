use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{cfg_combine, randn_like_shape, LatentState, NoisePrediction, NoiseSchedule};
use crate::error::{Error, Result};

/// Anything that predicts noise for a latent under optional conditions.
/// `None` requests the null-condition prediction used by guidance.
pub trait NoisePredictor {
    type Conditions;

    /// (channels, height, width) of one latent.
    fn latent_shape(&self) -> (usize, usize, usize);

    fn dtype(&self) -> DType;

    fn device(&self) -> &Device;

    fn predict(&self, state: &LatentState, conditions: Option<&Self::Conditions>) -> Result<NoisePrediction>;
}

/// Evenly spaced timesteps ending at the last training step, descending.
pub fn ddim_timesteps(num_train_steps: usize, num_inference_steps: usize) -> Result<Vec<usize>> {
    if num_inference_steps == 0 {
        return Err(Error::invalid("num_inference_steps must be positive"));
    }
    if num_inference_steps > num_train_steps {
        return Err(Error::invalid(format!(
            "num_inference_steps {num_inference_steps} exceeds schedule length {num_train_steps}"
        )));
    }
    let ratio = num_train_steps as f64 / num_inference_steps as f64;
    Ok((0..num_inference_steps)
        .map(|i| (num_train_steps as f64 - i as f64 * ratio).round() as usize - 1)
        .collect())
}

/// Deterministic DDIM (eta = 0) with classifier-free guidance.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct DdimSampler {
    /// Clamp the predicted clean latent to `[-c, c]` at every step.
    pub clip_sample: Option<f64>,
}

impl DdimSampler {
    pub fn sample<M: NoisePredictor>(
        &self,
        model: &M,
        conditions: &M::Conditions,
        schedule: &NoiseSchedule,
        w: f64,
        num_inference_steps: usize,
        seed: u64,
    ) -> Result<Tensor> {
        let timesteps = ddim_timesteps(schedule.num_steps(), num_inference_steps)?;
        let (c, h, wd) = model.latent_shape();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut z = randn_like_shape(&mut rng, &[1, c, h, wd], model.dtype(), model.device())?;
        for (i, &t) in timesteps.iter().enumerate() {
            let state = LatentState { z: z.clone(), t };
            let eps_cond = model.predict(&state, Some(conditions))?;
            let eps_uncond = model.predict(&state, None)?;
            let eps = cfg_combine(&eps_cond, &eps_uncond, w)?.into_tensor();
            let a_t = schedule.alpha_bar_at(t)?;
            let a_prev = match timesteps.get(i + 1) {
                Some(&tp) => schedule.alpha_bar_at(tp)?,
                None => 1.0,
            };
            let x0 = (&z - eps.affine((1. - a_t).sqrt(), 0.)?)?.affine(1. / a_t.sqrt(), 0.)?;
            let x0 = match self.clip_sample {
                Some(c) => x0.clamp(-c, c)?,
                None => x0,
            };
            z = (x0.affine(a_prev.sqrt(), 0.)? + eps.affine((1. - a_prev).sqrt(), 0.)?)?;
        }
        Ok(z)
    }
}

/// Unclipped DDIM sampling from seeded Gaussian noise.
pub fn sample<M: NoisePredictor>(
    model: &M,
    conditions: &M::Conditions,
    schedule: &NoiseSchedule,
    w: f64,
    num_inference_steps: usize,
    seed: u64,
) -> Result<Tensor> {
    DdimSampler::default().sample(model, conditions, schedule, w, num_inference_steps, seed)
}
