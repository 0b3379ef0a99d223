use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tfmt_core::detector::TaskMode;
use tfmt_core::encoder::EncoderConfig;
use tfmt_core::model::{ema_update, region_pass, ModelParams};
use tfmt_core::trainer::teacher_pseudo_label;

fn micro() -> EncoderConfig {
    EncoderConfig {
        d: 8,
        layers: 1,
        vocab_buckets: 64,
        window: 1,
        max_n: 16,
    }
}

#[test]
fn ema_gap_contracts_geometrically() {
    let lambda = 0.6;
    for seed in 0..5 {
        let student = ModelParams::init(micro(), TaskMode::Aste, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let mut teacher =
            ModelParams::init(micro(), TaskMode::Aste, &mut ChaCha8Rng::seed_from_u64(seed + 100)).unwrap();
        let gap0 = teacher.max_abs_diff(&student).unwrap();
        for _ in 0..10 {
            ema_update(&mut teacher, &student, lambda).unwrap();
        }
        let gap = teacher.max_abs_diff(&student).unwrap();
        let want = lambda.powi(10) * gap0;
        assert!(((gap - want) / want).abs() < 1e-9, "seed {seed}: {gap} vs {want}");
    }
}

#[test]
fn ema_endpoints() {
    let s = ModelParams::init(micro(), TaskMode::Aope, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let t0 = ModelParams::init(micro(), TaskMode::Aope, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    let mut t = t0.clone();
    ema_update(&mut t, &s, 1.0).unwrap();
    assert_eq!(t, t0);
    ema_update(&mut t, &s, 0.0).unwrap();
    assert_eq!(t, s);
}

fn sharpened_teacher(seed: u64) -> ModelParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ModelParams::init(micro(), TaskMode::Aste, &mut rng).unwrap();
    let scale = rng.gen_range(1.0..60.0);
    p.detector.cls_w.data.iter_mut().for_each(|w| *w *= scale);
    p
}

fn sentence(rng: &mut ChaCha8Rng) -> Vec<String> {
    let n = rng.gen_range(3..=12);
    (0..n).map(|_| format!("t{}", rng.gen_range(0..40))).collect()
}

#[test]
fn retained_labels_clear_the_threshold() {
    let (eta, kappa) = (0.98, 0.3);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut retained = 0;
    for seed in 0..100 {
        let teacher = sharpened_teacher(seed);
        for _ in 0..3 {
            let toks = sentence(&mut rng);
            let labels = teacher_pseudo_label(&teacher, &toks, eta, kappa).unwrap();
            for pl in &labels {
                let fg = &pl.probs[TaskMode::Aste.foreground()];
                assert!(fg.iter().copied().fold(0.0, f64::max) >= eta);
                assert!(pl.confidence >= eta);
            }
            let pass = region_pass(&teacher, &toks, kappa).unwrap();
            let eligible = pass.probs.iter().filter(|p| p.confidence(TaskMode::Aste) >= eta).count();
            assert_eq!(labels.len(), eligible, "filter dropped an eligible proposal");
            retained += labels.len();
        }
    }
    assert!(retained > 0, "no teacher state produced a confident label");
}

#[test]
fn threshold_one_retains_nothing_below_certainty() {
    let teacher = ModelParams::init(micro(), TaskMode::Aste, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let toks: Vec<String> = "a b c d e".split(' ').map(String::from).collect();
    assert!(teacher_pseudo_label(&teacher, &toks, 1.0, 0.3).unwrap().is_empty());
    let all = teacher_pseudo_label(&teacher, &toks, 0.0, 0.3).unwrap();
    assert_eq!(all.len(), region_pass(&teacher, &toks, 0.3).unwrap().proposals.len());
}
