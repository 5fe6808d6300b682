//! Parameter storage with seeded, reproducible initialization.
//!
//! candle's CPU device cannot be seeded, so every random initializer is
//! drawn from a ChaCha stream owned by the store. Parameters are created
//! lazily the first time a layer asks for them, which makes the creation
//! order (and therefore the random stream) a function of the model
//! construction code only.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use candle_core::{DType, Device, Shape, Tensor, Var};
use candle_nn::init::NormalOrUniform;
use candle_nn::var_builder::SimpleBackend;
use candle_nn::{Init, VarBuilder};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

struct Inner {
    vars: BTreeMap<String, Var>,
    rng: ChaCha8Rng,
}

/// A named collection of trainable variables.
#[derive(Clone)]
pub struct ParamStore {
    inner: Arc<Mutex<Inner>>,
}

impl std::fmt::Debug for ParamStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ParamStore").field("len", &self.len()).finish()
    }
}

fn sample_init(rng: &mut ChaCha8Rng, shape: &Shape, init: Init) -> Vec<f64> {
    let n = shape.elem_count();
    let normal = |rng: &mut ChaCha8Rng, mean: f64, std: f64| -> Vec<f64> {
        (0..n)
            .map(|_| mean + std * rng.sample::<f64, _>(StandardNormal))
            .collect()
    };
    let uniform =
        |rng: &mut ChaCha8Rng, lo: f64, up: f64| -> Vec<f64> { (0..n).map(|_| rng.random_range(lo..up)).collect() };
    match init {
        Init::Const(c) => vec![c; n],
        Init::Randn { mean, stdev } => normal(rng, mean, stdev),
        Init::Uniform { lo, up } => uniform(rng, lo, up),
        Init::Kaiming {
            dist,
            fan,
            non_linearity,
        } => {
            let fan = fan.for_shape(shape);
            let std = non_linearity.gain() / (fan as f64).sqrt();
            match dist {
                NormalOrUniform::Normal => normal(rng, 0., std),
                NormalOrUniform::Uniform => {
                    let bound = 3f64.sqrt() * std;
                    uniform(rng, -bound, bound)
                }
            }
        }
    }
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        Self {
            inner: Arc::new(Mutex::new(Inner {
                vars: BTreeMap::new(),
                rng: ChaCha8Rng::seed_from_u64(seed),
            })),
        }
    }

    pub fn var_builder(&self, dtype: DType, device: &Device) -> VarBuilder<'static> {
        VarBuilder::from_backend(Box::new(self.clone()), dtype, device.clone())
    }

    pub fn len(&self) -> usize {
        self.inner.lock().unwrap().vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn names(&self) -> Vec<String> {
        self.inner.lock().unwrap().vars.keys().cloned().collect()
    }

    pub fn get(&self, name: &str) -> Option<Var> {
        self.inner.lock().unwrap().vars.get(name).cloned()
    }

    /// All variables sorted by name.
    pub fn vars(&self) -> Vec<(String, Var)> {
        self.inner
            .lock()
            .unwrap()
            .vars
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    /// Variables whose names do not start with any of `frozen_prefixes`.
    pub fn trainable(&self, frozen_prefixes: &[String]) -> Vec<Var> {
        self.vars()
            .into_iter()
            .filter(|(name, _)| !frozen_prefixes.iter().any(|p| name.starts_with(p.as_str())))
            .map(|(_, v)| v)
            .collect()
    }

    pub fn set(&self, name: &str, value: &Tensor) -> Result<()> {
        let var = self
            .get(name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter {name}")))?;
        if var.dims() != value.dims() {
            return Err(Error::shape(var.dims(), value.dims()));
        }
        var.set(&value.to_dtype(var.dtype())?)?;
        Ok(())
    }

    /// Copies every variable under `from` into the variable with the same
    /// suffix under `to`, when one exists with a matching shape. Returns the
    /// number of tensors copied.
    pub fn copy_prefix(&self, from: &str, to: &str) -> Result<usize> {
        let vars = self.vars();
        let mut copied = 0;
        for (name, dst) in &vars {
            let Some(suffix) = name.strip_prefix(to) else {
                continue;
            };
            let src_name = format!("{from}{suffix}");
            if let Some((_, src)) = vars.iter().find(|(n, _)| *n == src_name) {
                if src.dims() == dst.dims() {
                    dst.set(&src.as_tensor().copy()?)?;
                    copied += 1;
                }
            }
        }
        Ok(copied)
    }

    /// Snapshot of every parameter value, detached from the graph.
    pub fn snapshot(&self) -> Result<BTreeMap<String, Tensor>> {
        self.vars()
            .into_iter()
            .map(|(name, var)| Ok((name, var.as_tensor().copy()?.detach())))
            .collect()
    }

    /// Overwrites parameters from `values`; every stored parameter must be
    /// present with the right shape.
    pub fn load(&self, values: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, var) in self.vars() {
            let value = values
                .get(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            if value.dims() != var.dims() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name}: expected shape {:?}, found {:?}",
                    var.dims(),
                    value.dims()
                )));
            }
            var.set(&value.to_dtype(var.dtype())?)?;
        }
        if let Some(extra) = values.keys().find(|k| self.get(k).is_none()) {
            return Err(Error::Checkpoint(format!("unexpected tensor {extra}")));
        }
        Ok(())
    }
}

impl SimpleBackend for ParamStore {
    fn get(&self, s: Shape, name: &str, h: Init, dtype: DType, dev: &Device) -> candle_core::Result<Tensor> {
        let mut inner = self.inner.lock().unwrap();
        if let Some(var) = inner.vars.get(name) {
            if var.shape() != &s {
                candle_core::bail!(
                    "parameter {name} requested with shape {s:?}, stored as {:?}",
                    var.shape()
                );
            }
            return Ok(var.as_tensor().clone());
        }
        let data = sample_init(&mut inner.rng, &s, h);
        let tensor = Tensor::from_vec(data, s, dev)?.to_dtype(dtype)?;
        let var = Var::from_tensor(&tensor)?;
        let out = var.as_tensor().clone();
        inner.vars.insert(name.to_string(), var);
        Ok(out)
    }

    fn get_unchecked(&self, name: &str, dtype: DType, _dev: &Device) -> candle_core::Result<Tensor> {
        let inner = self.inner.lock().unwrap();
        match inner.vars.get(name) {
            Some(var) => var.as_tensor().to_dtype(dtype),
            None => candle_core::bail!("unknown parameter {name}"),
        }
    }

    fn contains_tensor(&self, name: &str) -> bool {
        self.inner.lock().unwrap().vars.contains_key(name)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_init() {
        let dev = Device::Cpu;
        let build = |seed| {
            let store = ParamStore::new(seed);
            let vb = store.var_builder(DType::F32, &dev);
            let w = vb
                .get_with_hints((3, 4), "w", candle_nn::init::DEFAULT_KAIMING_NORMAL)
                .unwrap();
            w.flatten_all().unwrap().to_vec1::<f32>().unwrap()
        };
        assert_eq!(build(7), build(7));
        assert_ne!(build(7), build(8));
    }

    #[test]
    fn copy_prefix_matches_suffixes() {
        let dev = Device::Cpu;
        let store = ParamStore::new(0);
        let vb = store.var_builder(DType::F32, &dev);
        let a = vb.pp("a").get_with_hints(3, "w", Init::Const(2.)).unwrap();
        let b = vb.pp("b").get_with_hints(3, "w", Init::Const(0.)).unwrap();
        vb.pp("b").get_with_hints(3, "only_b", Init::Const(5.)).unwrap();
        assert_eq!(store.copy_prefix("a.", "b.").unwrap(), 1);
        assert_eq!(a.to_vec1::<f32>().unwrap(), b.to_vec1::<f32>().unwrap());
    }
}
