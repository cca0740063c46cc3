use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use foldgen_core::folding::{embed_and_fold, FoldSpec, VisualTables};
use foldgen_core::params::{GroupSet, ModelConfig, ModelParams};
use foldgen_core::quantizer::{encode, Codebook};
use foldgen_core::rng::SplitMix64;
use foldgen_core::sampler::{generate_caption, generate_image, Guidance, SamplingRule};
use foldgen_core::sequencer::{Sequencer, TaskSample};
use foldgen_core::shapes::{caption_of, gen_scene, render};
use foldgen_core::trainer::{batch_gradients, batch_loss, DEFAULT_LAMBDA};
use foldgen_core::vocab::Vocab;

fn batch(cfg: &ModelConfig, n: usize) -> Vec<TaskSample> {
    let seq = Sequencer::new(Vocab::standard(), cfg.fold);
    let cb = Codebook::palette(8);
    (0..n)
        .map(|i| {
            let scene = gen_scene(i as u64);
            let grid = encode(&render(&scene, 64).unwrap(), &cb).unwrap();
            if i % 2 == 0 {
                seq.build_understanding(&grid, &caption_of(&scene)).unwrap()
            } else {
                seq.build_generation(&caption_of(&scene), &grid, false).unwrap()
            }
        })
        .collect()
}

fn training(c: &mut Criterion) {
    let cfg = ModelConfig::small(64, 2);
    let p = ModelParams::init(cfg, 1).unwrap();
    let b = batch(&cfg, 8);
    c.bench_function("loss d64 batch8", |bench| {
        bench.iter(|| batch_loss(black_box(&p), &b, DEFAULT_LAMBDA).unwrap())
    });
    c.bench_function("gradients d64 batch8", |bench| {
        bench.iter(|| batch_gradients(black_box(&p), &b, DEFAULT_LAMBDA, GroupSet::ALL).unwrap())
    });
}

fn folding(c: &mut Criterion) {
    let cb = Codebook::palette(8);
    let grid = encode(&render(&gen_scene(3), 512).unwrap(), &cb).unwrap();
    let spec = FoldSpec::new(2, 8);
    let tables = VisualTables::zeros(cb.k(), 8, grid.h(), spec.patch_len(), 64);
    c.bench_function("embed and fold 512px 2x8", |bench| {
        bench.iter(|| embed_and_fold(black_box(&grid), &tables, spec).unwrap())
    });
    let img = render(&gen_scene(5), 512).unwrap();
    c.bench_function("encode 512px", |bench| bench.iter(|| encode(black_box(&img), &cb).unwrap()));
}

fn sampling(c: &mut Criterion) {
    let cfg = ModelConfig::small(64, 2);
    let p = ModelParams::init(cfg, 2).unwrap();
    let cb = Codebook::palette(8);
    let rule = SamplingRule::top_k(8, 1.0, 0);
    let caption = caption_of(&gen_scene(7));
    c.bench_function("generate 64px cfg", |bench| {
        bench.iter(|| generate_image(black_box(&p), &cb, &caption, Guidance::Cfg(7.5), &rule, (8, 8)).unwrap())
    });
    let img = render(&gen_scene(9), 64).unwrap();
    c.bench_function("caption 64px", |bench| {
        bench.iter(|| generate_caption(black_box(&p), &cb, &img, &SamplingRule::greedy()).unwrap())
    });
    let mut rng = SplitMix64::new(4);
    let logits: Vec<f64> = (0..p.head.k()).map(|_| rng.normal()).collect();
    c.bench_function("guide k8", |bench| {
        bench.iter(|| foldgen_core::head::guide(black_box(&logits), &logits, 7.5))
    });
}

criterion_group!(benches, training, folding, sampling);
criterion_main!(benches);
