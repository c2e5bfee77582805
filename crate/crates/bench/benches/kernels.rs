use std::collections::BTreeSet;

use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};

use adnarrate_core::alignment::VisionAdapter;
use adnarrate_core::contextual_ema::{em_iterate, gaussian_mixture};
use adnarrate_core::dataio::{gen_synthetic, normalize_words, SyntheticSpec};
use adnarrate_core::metrics::{cider, CiderConfig};
use adnarrate_core::narration::{all_logits, assemble_prompt, train_stage2, DecoderConfig, Stage2Config};
use adnarrate_core::numerics::rng;
use adnarrate_core::Tensor;

fn matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    for n in [32, 64, 128] {
        let mut r = rng::seeded(n as u64);
        let a: Tensor<f32> = rng::normal(&mut r, &[n, n], 1.0);
        let b: Tensor<f32> = rng::normal(&mut r, &[n, n], 1.0);
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| black_box(a.matmul(&b).unwrap()))
        });
    }
    group.finish();
}

fn em(c: &mut Criterion) {
    let mut r = rng::seeded(1);
    // one default window: 16 clips × 4 vectors, 32 channels, 32 bases
    let h = gaussian_mixture(&mut r, 64, 8, 32, 0.3);
    let m0: Tensor<f64> = rng::normal(&mut r, &[32, 32], 0.2);
    c.bench_function("em_iterate R=3 K=32", |b| {
        b.iter(|| black_box(em_iterate(&h, &m0, 3, 0.05).unwrap()))
    });
}

fn decoder_forward(c: &mut Criterion) {
    let cfg = DecoderConfig::new(200);
    let store = cfg.init_params::<f32>(0);
    let names = vec![vec![]; 16];
    let prompt = assemble_prompt(4, &names, Some(&[10, 11, 12, 13]), cfg.context).unwrap();
    let visual: Tensor<f32> = rng::normal(&mut rng::seeded(2), &[64, cfg.width], 1.0);
    let tokens: Vec<u32> = prompt.target.clone();
    c.bench_function("decoder forward, 16-clip prompt", |b| {
        b.iter(|| black_box(all_logits(&store, &cfg, &visual, &prompt.slots, &tokens)))
    });
}

fn cider_corpus(c: &mut Criterion) {
    let corpus = gen_synthetic(&SyntheticSpec::default()).unwrap();
    let refs: Vec<Vec<String>> = corpus.records().iter().map(|r| normalize_words(&r.ad_text)).collect();
    let cands: Vec<Vec<String>> = refs.iter().rev().cloned().collect();
    c.bench_function("cider 224 pairs", |b| {
        b.iter(|| black_box(cider(&cands, &refs, CiderConfig::default())))
    });
}

fn train_epoch(c: &mut Criterion) {
    let spec = SyntheticSpec {
        num_movies: 1,
        clips_per_movie: 24,
        ..SyntheticSpec::default()
    };
    let corpus = gen_synthetic(&spec).unwrap();
    let names: BTreeSet<String> = spec.character_names().into_iter().collect();
    let config = Stage2Config {
        epochs: 1,
        ..Stage2Config::default()
    };
    let mut group = c.benchmark_group("stage2");
    group.sample_size(10);
    group.bench_function("one epoch, 9 windows", |b| {
        b.iter(|| black_box(train_stage2(&corpus, VisionAdapter::init(32), names.clone(), &config).unwrap()))
    });
    group.finish();
}

criterion_group!(benches, matmul, em, decoder_forward, cider_corpus, train_epoch);
criterion_main!(benches);
