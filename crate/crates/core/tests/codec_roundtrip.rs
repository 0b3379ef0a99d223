use std::collections::BTreeSet;

use proptest::prelude::*;
use tfmt_core::corpus::{LabeledSentence, Polarity, Sentence, Span, Triplet};
use tfmt_core::tagging::{decode_cell_table, decode_regions, encode_cell_labels, encode_region_labels, Rect};

fn labeled(n: usize, triplets: Vec<Triplet>) -> LabeledSentence {
    let toks = (0..n).map(|i| format!("w{i}")).collect();
    LabeledSentence::new(Sentence::new(toks).unwrap(), triplets).unwrap()
}

fn sorted(ts: &[Triplet]) -> Vec<Triplet> {
    let mut v = ts.to_vec();
    v.sort();
    v.dedup();
    v
}

fn region_roundtrip(ls: &LabeledSentence) -> Vec<Triplet> {
    let (_, gold) = encode_region_labels(ls).unwrap();
    let regions: Vec<_> = gold.iter().map(|g| (g.rect, g.cls)).collect();
    sorted(&decode_regions(&regions))
}

fn corner_distinct(ts: &[Triplet]) -> bool {
    let mut seen = BTreeSet::new();
    ts.iter().all(|t| {
        let r = Rect::from_spans(t.aspect, t.opinion);
        seen.insert(((r.a, r.b), (r.c, r.d)))
    })
}

fn separated(spans: &BTreeSet<Span>) -> bool {
    let v: Vec<&Span> = spans.iter().collect();
    v.windows(2).all(|w| w[0].end + 1 < w[1].start)
}

/// Non-adjacent, non-overlapping same-type spans, no token shared between an
/// aspect and an opinion, and at most one polarity per pair.
fn cell_domain(ts: &[Triplet]) -> bool {
    let aspects: BTreeSet<Span> = ts.iter().map(|t| t.aspect).collect();
    let opinions: BTreeSet<Span> = ts.iter().map(|t| t.opinion).collect();
    let pairs: BTreeSet<(Span, Span)> = ts.iter().map(Triplet::pair).collect();
    separated(&aspects)
        && separated(&opinions)
        && aspects.iter().all(|a| opinions.iter().all(|o| !a.overlaps(o)))
        && pairs.len() == ts.len()
}

fn all_spans(n: usize) -> Vec<Span> {
    (0..n).flat_map(|s| (s..n).map(move |e| Span::new(s, e))).collect()
}

fn span_strategy(n: usize) -> impl Strategy<Value = Span> {
    (0..n, 0..n).prop_map(|(x, y)| Span::new(x.min(y), x.max(y)))
}

fn polarity() -> impl Strategy<Value = Polarity> {
    prop::sample::select(Polarity::ALL.to_vec())
}

/// Sentence length and a corner-distinct triplet list.
fn region_case() -> impl Strategy<Value = (usize, Vec<Triplet>)> {
    (1usize..=12).prop_flat_map(|n| {
        let t = (span_strategy(n), span_strategy(n), polarity()).prop_map(|(a, o, p)| Triplet::new(a, o, p));
        prop::collection::vec(t, 0..=6).prop_map(move |ts| {
            let mut kept: Vec<Triplet> = Vec::new();
            for t in ts {
                let mut with = kept.clone();
                with.push(t);
                if corner_distinct(&with) {
                    kept = with;
                }
            }
            (n, kept)
        })
    })
}

/// Lays out separated aspect/opinion spans left to right, then links a
/// subset of aspect-opinion pairs.
fn cell_case() -> impl Strategy<Value = (usize, Vec<Triplet>)> {
    let piece = (any::<bool>(), 1usize..=3, 1usize..=2);
    (prop::collection::vec(piece, 1..=6), prop::collection::vec((any::<bool>(), polarity()), 36)).prop_map(
        |(pieces, links)| {
            let mut pos = 0;
            let (mut aspects, mut opinions) = (Vec::new(), Vec::new());
            for (is_aspect, len, gap) in pieces {
                let s = Span::new(pos, pos + len - 1);
                if is_aspect { aspects.push(s) } else { opinions.push(s) }
                pos += len + gap;
            }
            let mut ts = Vec::new();
            for (i, a) in aspects.iter().enumerate() {
                for (j, o) in opinions.iter().enumerate() {
                    let (keep, p) = links[(i * 6 + j) % links.len()];
                    if keep {
                        ts.push(Triplet::new(*a, *o, p));
                    }
                }
            }
            (pos.max(1), ts)
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 1000, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn region_codec_is_identity_on_corner_distinct_sets((n, ts) in region_case()) {
        let ls = labeled(n, ts.clone());
        prop_assert_eq!(region_roundtrip(&ls), sorted(&ts));
    }

    #[test]
    fn cell_codec_is_identity_on_its_domain((n, ts) in cell_case()) {
        prop_assume!(cell_domain(&ts));
        let ls = labeled(n, ts.clone());
        let tbl = encode_cell_labels(&ls).unwrap();
        prop_assert_eq!(decode_cell_table(&tbl), sorted(&ts));
    }
}

#[test]
fn exhaustive_small_sets_roundtrip() {
    let mut region_checked = 0usize;
    let mut cell_checked = 0usize;
    for n in 1..=5 {
        let spans = all_spans(n);
        let singles: Vec<Triplet> = spans
            .iter()
            .flat_map(|&a| spans.iter().flat_map(move |&o| Polarity::ALL.map(|p| Triplet::new(a, o, p))))
            .collect();
        let mut sets: Vec<Vec<Triplet>> = vec![Vec::new()];
        sets.extend(singles.iter().map(|&t| vec![t]));
        for i in 0..singles.len() {
            for j in i + 1..singles.len() {
                sets.push(vec![singles[i], singles[j]]);
            }
        }
        for ts in sets {
            let ls = labeled(n, ts.clone());
            if corner_distinct(&ts) {
                assert_eq!(region_roundtrip(&ls), sorted(&ts), "region n={n} {ts:?}");
                region_checked += 1;
            }
            if cell_domain(&ts) {
                let tbl = encode_cell_labels(&ls).unwrap();
                assert_eq!(decode_cell_table(&tbl), sorted(&ts), "cell n={n} {ts:?}");
                cell_checked += 1;
            }
        }
    }
    assert!(region_checked > 200_000, "{region_checked}");
    assert!(cell_checked > 1_000, "{cell_checked}");
}

#[test]
fn shared_corners_are_outside_the_region_domain() {
    let t1 = Triplet::new(Span::new(0, 1), Span::new(3, 3), Polarity::Pos);
    let t2 = Triplet::new(Span::new(0, 1), Span::new(3, 3), Polarity::Neg);
    assert!(!corner_distinct(&[t1, t2]));
    let got = region_roundtrip(&labeled(4, vec![t1, t2]));
    assert_eq!(got.len(), 2, "both classes survive decoding but the corner labels are shared");
}

#[test]
fn adjacent_aspects_merge_under_cell_decoding() {
    let ts = vec![
        Triplet::new(Span::single(0), Span::single(3), Polarity::Pos),
        Triplet::new(Span::single(1), Span::single(3), Polarity::Pos),
    ];
    assert!(!cell_domain(&ts));
    let tbl = encode_cell_labels(&labeled(4, ts)).unwrap();
    assert_eq!(
        decode_cell_table(&tbl),
        vec![Triplet::new(Span::new(0, 1), Span::single(3), Polarity::Pos)]
    );
}
