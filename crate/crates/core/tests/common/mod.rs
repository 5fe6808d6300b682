#![allow(dead_code)]

use candle_core::{DType, Device, Tensor};
use csgo_core::synthetic::random_triplets;
use csgo_core::training::TripletSample;
use csgo_core::{CsgoModel, ModelConfig};

pub fn samples(n: usize, seed: u64, size: usize) -> Vec<TripletSample> {
    random_triplets(n, seed, size)
        .iter()
        .map(|t| {
            let (content, style, target) = t.images(size);
            TripletSample {
                content,
                style,
                target,
                caption: t.content.caption(),
            }
        })
        .collect()
}

pub fn tiny_model(seed: u64) -> CsgoModel {
    CsgoModel::new(ModelConfig::tiny(), seed, DType::F32, &Device::Cpu).unwrap()
}

pub fn tiny_model_f64(seed: u64) -> CsgoModel {
    CsgoModel::new(ModelConfig::tiny(), seed, DType::F64, &Device::Cpu).unwrap()
}

pub fn values(t: &Tensor) -> Vec<f64> {
    t.to_dtype(DType::F64)
        .unwrap()
        .flatten_all()
        .unwrap()
        .to_vec1()
        .unwrap()
}
