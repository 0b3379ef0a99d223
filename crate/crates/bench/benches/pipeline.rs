use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tfmt_core::encoder::encode;
use tfmt_core::losses::mmd;
use tfmt_core::model::{ema_update, region_pass};
use tfmt_core::optim::Adam;
use tfmt_core::trainer::{corpus_lexicon, train_step};
use tfmt_core::{synth_corpus, EncoderConfig, LabeledSentence, MmdConfig, ModelParams, SynthConfig, TaskMode, TrainConfig};

fn model(seed: u64) -> ModelParams {
    ModelParams::init(EncoderConfig::default(), TaskMode::Aste, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn sentence(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("tok{}", i % 11)).collect()
}

fn bench_forward(c: &mut Criterion) {
    let params = model(0);
    let mut g = c.benchmark_group("forward");
    for n in [8, 16, 24] {
        let toks = sentence(n);
        g.bench_with_input(BenchmarkId::new("encode", n), &toks, |b, t| {
            b.iter(|| encode(black_box(t), &params.encoder).unwrap())
        });
        g.bench_with_input(BenchmarkId::new("region_pass", n), &toks, |b, t| {
            b.iter(|| region_pass(&params, black_box(t), 0.3).unwrap())
        });
    }
    g.finish();
}

fn bench_mmd(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut g = c.benchmark_group("mmd");
    for size in [8, 32, 128] {
        let mut draw = || -> Vec<Vec<f64>> { (0..size).map(|_| (0..48).map(|_| rng.gen()).collect()).collect() };
        let (x, y) = (draw(), draw());
        g.bench_function(BenchmarkId::from_parameter(size), |b| {
            b.iter(|| mmd(black_box(&x), black_box(&y), &MmdConfig::default()))
        });
    }
    g.finish();
}

fn bench_train_step(c: &mut Criterion) {
    let corpus = synth_corpus(&SynthConfig::default()).unwrap();
    let cfg = TrainConfig::default();
    let lexicon = corpus_lexicon(&corpus.target_unlabeled);
    let src: Vec<&LabeledSentence> = corpus.source_train.iter().take(cfg.batch).collect();
    let tgt: Vec<&LabeledSentence> = corpus.target_unlabeled.iter().take(cfg.batch).collect();
    let mut student = model(2);
    let mut teacher = model(3);
    let mut opt = Adam::new(&student, cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    c.bench_function("train_step", |b| {
        b.iter(|| {
            train_step(&mut student, &mut opt, Some(&mut teacher), &src, &tgt, &cfg, &lexicon, &mut rng).unwrap()
        })
    });
    let s = model(5);
    c.bench_function("ema_update", |b| b.iter(|| ema_update(&mut teacher, black_box(&s), 0.6).unwrap()));
}

criterion_group!(benches, bench_forward, bench_mmd, bench_train_step);
criterion_main!(benches);
