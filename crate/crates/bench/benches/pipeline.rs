use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spoofscope::corpus::Label;
use spoofscope::datagen::{gen_bonafide, CorpusConfig};
use spoofscope::frontend::{compute_fbank, patchify};
use spoofscope::metrics::{eer, min_tdcf, ScoreRecord, TdcfCosts};
use spoofscope::model::{Detector, ModelConfig};
use spoofscope::tensor::Matrix;
use spoofscope::train::{batch_gradients, diagnose, Example, TrainConfig};
use spoofscope::wavelet::dwt2;

fn frontend(c: &mut Criterion) {
    let w = gen_bonafide(1, 1.3).unwrap();
    let cfg = ModelConfig::desk().frontend;
    c.bench_function("fbank 1.3 s", |b| b.iter(|| compute_fbank(black_box(&w), &cfg).unwrap()));
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let grid = Matrix::from_fn(128, 1024, |_, _| rng.random_range(-1.0..1.0));
    c.bench_function("dwt2 128x1024", |b| b.iter(|| dwt2(black_box(&grid)).unwrap()));
}

fn desk_examples(n: usize) -> Vec<Example> {
    let corpus = CorpusConfig::default();
    let fb = ModelConfig::desk().frontend;
    (0..n)
        .map(|i| {
            let (w, label) = if i % 2 == 0 {
                (corpus.bonafide_item(i).unwrap(), Label::Bonafide)
            } else {
                (corpus.spoof_item(i).unwrap(), Label::Spoof)
            };
            Example {
                utt_id: format!("u{i}"),
                label,
                patches: patchify(&compute_fbank(&w, &fb).unwrap()).unwrap(),
            }
        })
        .collect()
}

fn model(c: &mut Criterion) {
    let det = Detector::new(ModelConfig::desk(), 3).unwrap();
    let data = desk_examples(16);
    let sets: Vec<_> = data.iter().map(|e| e.patches.clone()).collect();
    c.bench_function("inference, 16 clips", |b| b.iter(|| diagnose(&det, black_box(&sets)).unwrap()));
    let batch: Vec<&Example> = data.iter().collect();
    let cfg = TrainConfig::desk();
    let mut g = c.benchmark_group("training");
    g.sample_size(10);
    g.bench_function("batch gradients, 16 clips", |b| {
        b.iter(|| batch_gradients(&det, black_box(&batch), 7, &cfg.loss, cfg.reconstruction_scope).unwrap())
    });
    g.finish();
}

fn metrics(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let records: Vec<ScoreRecord> = (0..10_000)
        .map(|i| {
            let bona = i % 2 == 0;
            let s = rng.random_range(-1.0..1.0) + if bona { 0.5 } else { 0.0 };
            ScoreRecord::new(format!("u{i}"), Label::from_bonafide(bona), s)
        })
        .collect();
    let costs = TdcfCosts::default();
    c.bench_function("eer, 10k scores", |b| b.iter(|| eer(black_box(&records)).unwrap()));
    c.bench_function("min t-DCF, 10k scores", |b| b.iter(|| min_tdcf(black_box(&records), &costs).unwrap()));
}

criterion_group!(benches, frontend, model, metrics);
criterion_main!(benches);
