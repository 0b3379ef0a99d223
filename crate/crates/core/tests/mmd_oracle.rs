use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tfmt_core::losses::{mmd, MmdConfig};

/// Literal kernel sums with the median heuristic over the pooled sample.
fn oracle(x: &[Vec<f64>], y: &[Vec<f64>]) -> f64 {
    if x.is_empty() || y.is_empty() {
        return 0.0;
    }
    let pooled: Vec<&Vec<f64>> = x.iter().chain(y).collect();
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt();
    let mut ds = Vec::new();
    for i in 0..pooled.len() {
        for j in i + 1..pooled.len() {
            ds.push(dist(pooled[i], pooled[j]));
        }
    }
    ds.sort_by(f64::total_cmp);
    let med = if ds.is_empty() {
        0.0
    } else if ds.len() % 2 == 1 {
        ds[ds.len() / 2]
    } else {
        0.5 * (ds[ds.len() / 2 - 1] + ds[ds.len() / 2])
    };
    let sigma = if med > 0.0 { med } else { 1.0 };
    let k = |a: &[f64], b: &[f64]| (-dist(a, b).powi(2) / (2.0 * sigma * sigma)).exp();
    let mut kxx = 0.0;
    for a in x {
        for b in x {
            kxx += k(a, b);
        }
    }
    let mut kyy = 0.0;
    for a in y {
        for b in y {
            kyy += k(a, b);
        }
    }
    let mut kxy = 0.0;
    for a in x {
        for b in y {
            kxy += k(a, b);
        }
    }
    let (m, n) = (x.len() as f64, y.len() as f64);
    (kxx / (m * m) + kyy / (n * n) - 2.0 * kxy / (m * n)).max(0.0)
}

fn sample(rng: &mut ChaCha8Rng, count: usize, dim: usize, shift: f64) -> Vec<Vec<f64>> {
    (0..count)
        .map(|_| (0..dim).map(|_| rng.gen_range(-1.0..1.0) + shift).collect())
        .collect()
}

fn random_pairs() -> Vec<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    (0..100)
        .map(|_| {
            let dim = rng.gen_range(1..=16);
            let (m, n) = (rng.gen_range(1..=8), rng.gen_range(1..=8));
            let shift = rng.gen_range(0.0..2.0);
            (sample(&mut rng, m, dim, 0.0), sample(&mut rng, n, dim, shift))
        })
        .collect()
}

#[test]
fn matches_double_loop_oracle() {
    let cfg = MmdConfig::default();
    for (k, (x, y)) in random_pairs().iter().enumerate() {
        let got = mmd(x, y, &cfg);
        let want = oracle(x, y);
        assert!((got - want).abs() < 1e-10, "pair {k}: {got} vs {want}");
    }
}

#[test]
fn zero_on_identical_sets() {
    let cfg = MmdConfig::default();
    for (x, _) in random_pairs() {
        assert!(mmd(&x, &x, &cfg).abs() < 1e-12);
    }
}

#[test]
fn symmetric_and_nonnegative() {
    let cfg = MmdConfig::default();
    for (x, y) in random_pairs() {
        let (xy, yx) = (mmd(&x, &y, &cfg), mmd(&y, &x, &cfg));
        assert!(xy >= 0.0);
        assert!((xy - yx).abs() < 1e-12, "{xy} vs {yx}");
    }
}

#[test]
fn single_point_sets_use_fallback_bandwidth() {
    let x = vec![vec![0.0, 0.0]];
    let y = vec![vec![0.0, 0.0]];
    assert_eq!(mmd(&x, &y, &MmdConfig::default()), 0.0);
    let y = vec![vec![3.0, 4.0]];
    let want = 2.0 - 2.0 * (-25.0f64 / (2.0 * 25.0)).exp();
    assert!((mmd(&x, &y, &MmdConfig::default()) - want).abs() < 1e-12);
}
