use std::hint::black_box;

use candle_core::{DType, Device, Module, Tensor};
use criterion::{criterion_group, criterion_main, Criterion};
use csgo_core::cas::{cas, ConvFeatureExtractor};
use csgo_core::diffusion::{DdimSampler, NoiseSchedule};
use csgo_core::nn::Conv2d;
use csgo_core::synthetic::random_triplets;
use csgo_core::training::random_latents;
use csgo_core::{CsgoModel, InjectionConfig, ModelConfig};

fn conv(c: &mut Criterion) {
    let dev = Device::Cpu;
    let x = random_latents(0, &[8, 64, 16, 16], DType::F32, &dev).unwrap();
    let w = random_latents(1, &[64, 64, 3, 3], DType::F32, &dev).unwrap();
    let layer = Conv2d::new(w, Some(Tensor::zeros(64, DType::F32, &dev).unwrap()), 1, 1);
    c.bench_function("conv3x3 8x64x16x16", |b| {
        b.iter(|| layer.forward(black_box(&x)).unwrap())
    });
    c.bench_function("conv3x3 forward+backward", |b| {
        let var = candle_core::Var::from_tensor(&x).unwrap();
        b.iter(|| {
            let y = layer.forward(var.as_tensor()).unwrap();
            y.sqr().unwrap().sum_all().unwrap().backward().unwrap()
        })
    });
}

fn model(c: &mut Criterion) {
    let cfg = ModelConfig::default();
    let model = CsgoModel::new(cfg.clone(), 0, DType::F32, &Device::Cpu).unwrap();
    let (content, style, _) = random_triplets(1, 0, cfg.image_size)[0].images(cfg.image_size);
    let cond = model
        .conditions(&["a circle"], Some(&[&content]), Some(&[&style]))
        .unwrap();
    let inj = InjectionConfig::inference().with_tokens(cfg.n_style_tokens);
    let s = cfg.latent_size();
    let z = random_latents(2, &[1, 3, s, s], DType::F32, &Device::Cpu).unwrap();
    c.bench_function("predict_batch default model", |b| {
        b.iter(|| model.predict_batch(black_box(&z), &[500], &cond, &inj).unwrap())
    });
    let schedule = NoiseSchedule::default();
    let sampler = DdimSampler { clip_sample: Some(1.) };
    c.bench_function("ddim single step", |b| {
        b.iter(|| {
            sampler
                .sample(&model.guided(inj), &cond, &schedule, inj.cfg_w, 1, 0)
                .unwrap()
        })
    });
}

fn metric(c: &mut Criterion) {
    let extractor = ConvFeatureExtractor::default();
    let (a, _, b) = random_triplets(1, 3, 32)[0].images(32);
    c.bench_function("cas conv 32x32", |bench| {
        bench.iter(|| cas(&extractor, black_box(&a), black_box(&b)).unwrap())
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(20);
    targets = conv, model, metric
}
criterion_main!(benches);
