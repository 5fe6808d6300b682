//! Noise schedules, forward noising, guidance, and the deterministic sampler.

mod sampler;
mod schedule;

pub use sampler::{ddim_timesteps, sample, DdimSampler, NoisePredictor};
pub use schedule::{NoiseSchedule, ScheduleKind};

use candle_core::{DType, Device, Tensor};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// A noised latent batch `z` (B, C, H, W) at integer timestep `t`.
#[derive(Debug, Clone)]
pub struct LatentState {
    pub z: Tensor,
    pub t: usize,
}

/// Predicted noise, same shape as the latent it was computed from.
#[derive(Debug, Clone)]
pub struct NoisePrediction(pub Tensor);

impl NoisePrediction {
    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }
}

pub fn ensure_finite(t: &Tensor, what: &str) -> Result<()> {
    let values = t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

/// Standard-normal tensor drawn from `rng` in row-major order.
pub fn randn_like_shape<R: Rng>(rng: &mut R, dims: &[usize], dtype: DType, device: &Device) -> Result<Tensor> {
    let n: usize = dims.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    Ok(Tensor::from_vec(data, dims, device)?.to_dtype(dtype)?)
}

/// `sqrt(alpha_bar[t]) * x0 + sqrt(1 - alpha_bar[t]) * noise`.
pub fn forward_noise(schedule: &NoiseSchedule, x0: &Tensor, t: usize, noise: &Tensor) -> Result<LatentState> {
    if x0.dims() != noise.dims() {
        return Err(Error::shape(x0.dims(), noise.dims()));
    }
    let a = schedule.alpha_bar_at(t)?;
    let z = (x0.affine(a.sqrt(), 0.)? + noise.affine((1. - a).sqrt(), 0.)?)?;
    Ok(LatentState { z, t })
}

/// Per-sample forward noising of a (B, ...) batch with one timestep per row.
pub fn forward_noise_batch(
    schedule: &NoiseSchedule,
    x0: &Tensor,
    timesteps: &[usize],
    noise: &Tensor,
) -> Result<Tensor> {
    if x0.dims() != noise.dims() {
        return Err(Error::shape(x0.dims(), noise.dims()));
    }
    let b = x0.dim(0)?;
    if timesteps.len() != b {
        return Err(Error::shape(b, timesteps.len()));
    }
    let mut signal = Vec::with_capacity(b);
    let mut noise_scale = Vec::with_capacity(b);
    for &t in timesteps {
        let a = schedule.alpha_bar_at(t)?;
        signal.push(a.sqrt());
        noise_scale.push((1. - a).sqrt());
    }
    let mut coef_dims = vec![1; x0.rank()];
    coef_dims[0] = b;
    let signal = Tensor::from_vec(signal, coef_dims.as_slice(), x0.device())?.to_dtype(x0.dtype())?;
    let noise_scale = Tensor::from_vec(noise_scale, coef_dims.as_slice(), x0.device())?.to_dtype(x0.dtype())?;
    Ok((x0.broadcast_mul(&signal)? + noise.broadcast_mul(&noise_scale)?)?)
}

/// Classifier-free guidance: `w * cond + (1 - w) * uncond`.
///
/// Evaluated as `uncond + w * (cond - uncond)`, with `w == 1` returning
/// `cond` directly, so that the identities at `w = 0`, `w = 1`, and
/// `cond == uncond` hold exactly in floating point.
pub fn cfg_combine(cond: &NoisePrediction, uncond: &NoisePrediction, w: f64) -> Result<NoisePrediction> {
    if cond.0.dims() != uncond.0.dims() {
        return Err(Error::shape(cond.0.dims(), uncond.0.dims()));
    }
    if w == 1. {
        return Ok(cond.clone());
    }
    let delta = (&cond.0 - &uncond.0)?;
    Ok(NoisePrediction((&uncond.0 + delta.affine(w, 0.)?)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;

    fn scalar(v: f64) -> Tensor {
        Tensor::new(&[v], &Device::Cpu).unwrap()
    }

    fn value(t: &Tensor) -> f64 {
        t.to_vec1::<f64>().unwrap()[0]
    }

    #[test]
    fn zero_noise_limit() {
        let s = NoiseSchedule::from_alpha_bar(vec![1.0, 0.5]).unwrap();
        let z = forward_noise(&s, &scalar(3.0), 0, &scalar(7.0)).unwrap();
        assert_eq!(value(&z.z), 3.0);
    }

    #[test]
    fn pure_noise_limit() {
        let s = NoiseSchedule::from_alpha_bar(vec![1.0, 1e-300]).unwrap();
        let z = forward_noise(&s, &scalar(3.0), 1, &scalar(7.0)).unwrap();
        assert!((value(&z.z) - 7.0).abs() < 1e-12);
    }

    #[test]
    fn quarter_signal() {
        let s = NoiseSchedule::from_alpha_bar(vec![1.0, 0.25]).unwrap();
        let z = forward_noise(&s, &scalar(2.0), 1, &scalar(1.0)).unwrap();
        let expected = 0.5 * 2.0 + 0.75f64.sqrt();
        assert!((value(&z.z) - expected).abs() < 1e-12);
        assert!((value(&z.z) - 1.8660254).abs() < 1e-7);
    }

    #[test]
    fn forward_noise_errors() {
        let s = NoiseSchedule::default();
        let x = Tensor::zeros((2, 3), DType::F64, &Device::Cpu).unwrap();
        let n = Tensor::zeros((3, 2), DType::F64, &Device::Cpu).unwrap();
        assert!(forward_noise(&s, &x, 0, &n).is_err());
        assert!(forward_noise(&s, &x, 1000, &x).is_err());
    }

    #[test]
    fn batch_matches_single() {
        let s = NoiseSchedule::default();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let x = randn_like_shape(&mut rng, &[2, 3, 4, 4], DType::F64, &Device::Cpu).unwrap();
        let n = randn_like_shape(&mut rng, &[2, 3, 4, 4], DType::F64, &Device::Cpu).unwrap();
        let batch = forward_noise_batch(&s, &x, &[10, 900], &n).unwrap();
        for (i, t) in [10, 900].into_iter().enumerate() {
            let single = forward_noise(&s, &x.get(i).unwrap(), t, &n.get(i).unwrap()).unwrap();
            let d = (batch.get(i).unwrap() - single.z).unwrap().abs().unwrap();
            assert!(d.max_all().unwrap().to_scalar::<f64>().unwrap() < 1e-12);
        }
    }

    #[test]
    fn cfg_identities() {
        let c = NoisePrediction(Tensor::new(&[1.0f64, -2.5, 3.3], &Device::Cpu).unwrap());
        let u = NoisePrediction(Tensor::new(&[0.1f64, 0.7, -9.0], &Device::Cpu).unwrap());
        let as_vec = |p: &NoisePrediction| p.0.to_vec1::<f64>().unwrap();
        assert_eq!(as_vec(&cfg_combine(&c, &u, 1.0).unwrap()), as_vec(&c));
        assert_eq!(as_vec(&cfg_combine(&c, &u, 0.0).unwrap()), as_vec(&u));
        let g = cfg_combine(&NoisePrediction(scalar(1.0)), &NoisePrediction(scalar(0.0)), 7.5).unwrap();
        assert_eq!(as_vec(&g), vec![7.5]);
        let bad = NoisePrediction(scalar(1.0));
        assert!(cfg_combine(&c, &bad, 2.0).is_err());
    }

    proptest! {
        #[test]
        fn cfg_collapses_for_equal_branches(vals in prop::collection::vec(-1e3f64..1e3, 1..16), w in -20f64..20.) {
            let e = NoisePrediction(Tensor::new(vals.as_slice(), &Device::Cpu).unwrap());
            let out = cfg_combine(&e, &e, w).unwrap();
            prop_assert_eq!(out.0.to_vec1::<f64>().unwrap(), vals);
        }

        #[test]
        fn forward_noise_is_linear(seed in 0u64..1000, a in -4f64..4., t in 0usize..1000) {
            let s = NoiseSchedule::default();
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let x = randn_like_shape(&mut rng, &[3, 4], DType::F64, &Device::Cpu).unwrap();
            let n = randn_like_shape(&mut rng, &[3, 4], DType::F64, &Device::Cpu).unwrap();
            let lhs = forward_noise(&s, &x.affine(a, 0.).unwrap(), t, &n.affine(a, 0.).unwrap()).unwrap().z;
            let rhs = forward_noise(&s, &x, t, &n).unwrap().z.affine(a, 0.).unwrap();
            let d = (lhs - rhs).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
            prop_assert!(d < 1e-12);
        }

        #[test]
        fn zero_noise_scales_norm(seed in 0u64..1000, t in 0usize..1000) {
            let s = NoiseSchedule::default();
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let x = randn_like_shape(&mut rng, &[5], DType::F64, &Device::Cpu).unwrap();
            let z = forward_noise(&s, &x, t, &x.zeros_like().unwrap()).unwrap().z;
            let norm = |v: &Tensor| v.sqr().unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap().sqrt();
            let expected = s.alpha_bar()[t].sqrt() * norm(&x);
            prop_assert!((norm(&z) - expected).abs() < 1e-12);
        }
    }
}
