use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tfmt_core::detector::{propose_regions, topk_prune, ScoredCell};
use tfmt_core::tagging::Rect;

fn brute_force(n: usize, b: &[ScoredCell], e: &[ScoredCell]) -> BTreeSet<Rect> {
    let bs: BTreeSet<(usize, usize)> = b.iter().map(|c| (c.i, c.j)).collect();
    let es: BTreeSet<(usize, usize)> = e.iter().map(|c| (c.i, c.j)).collect();
    let mut out = BTreeSet::new();
    for a in 0..n {
        for bb in 0..n {
            for c in 0..n {
                for d in 0..n {
                    if bs.contains(&(a, bb)) && es.contains(&(c, d)) && a <= c && bb <= d {
                        out.insert(Rect::new(a, bb, c, d));
                    }
                }
            }
        }
    }
    out
}

#[test]
fn proposals_match_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for case in 0..1000 {
        let n = rng.gen_range(1..=10);
        let kappa = rng.gen_range(0.05..1.5);
        let pb: Vec<f64> = (0..n * n).map(|_| rng.gen()).collect();
        let pe: Vec<f64> = (0..n * n).map(|_| rng.gen()).collect();
        let b = topk_prune(&pb, n, kappa);
        let e = topk_prune(&pe, n, kappa);
        let got = propose_regions(&b, &e);
        for p in &got {
            assert!(p.rect.a <= p.rect.c && p.rect.b <= p.rect.d, "case {case}: {:?}", p.rect);
        }
        let rects: Vec<Rect> = got.iter().map(|p| p.rect).collect();
        let set: BTreeSet<Rect> = rects.iter().copied().collect();
        assert_eq!(set.len(), rects.len(), "case {case}: duplicate proposals");
        assert_eq!(set, brute_force(n, &b, &e), "case {case}");
    }
}

#[test]
fn topk_keeps_the_highest_scores() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..200 {
        let n = rng.gen_range(1..=9);
        let kappa = rng.gen_range(0.05..1.0);
        let s: Vec<f64> = (0..n * n).map(|_| rng.gen()).collect();
        let kept = topk_prune(&s, n, kappa);
        let k = ((kappa * n as f64 - 1e-9).ceil() as usize).max(1).min(n * n);
        assert_eq!(kept.len(), k);
        let floor = kept.iter().map(|c| c.score).fold(f64::INFINITY, f64::min);
        let above = s.iter().filter(|&&x| x > floor).count();
        assert!(above < k);
    }
}
