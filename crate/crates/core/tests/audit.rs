use tfmt_core::corpus::{Polarity, Span, Triplet};
use tfmt_core::eval::{audit_pseudo_labels, categorize, AuditCounts, ErrorCategory};

use ErrorCategory::*;
use Polarity::*;

fn t(a: (usize, usize), o: (usize, usize), p: Polarity) -> Triplet {
    Triplet::new(Span::new(a.0, a.1), Span::new(o.0, o.1), p)
}

fn cases() -> Vec<(Triplet, Vec<Triplet>, ErrorCategory)> {
    let g = t((1, 2), (4, 4), Pos);
    vec![
        (g, vec![g], Correct),
        (t((1, 2), (4, 4), Neg), vec![g], SentimentError),
        (t((1, 2), (4, 4), Neu), vec![g], SentimentError),
        (t((1, 1), (4, 4), Pos), vec![g], WordsMisLocalized),
        (t((2, 3), (4, 5), Pos), vec![g], WordsMisLocalized),
        (t((0, 2), (4, 4), Pos), vec![g], WordsMisLocalized),
        (t((1, 1), (4, 4), Neg), vec![g], Error),
        (t((0, 0), (4, 4), Pos), vec![g], Error),
        (t((1, 2), (5, 5), Pos), vec![g], Error),
        (t((6, 6), (8, 8), Neu), vec![], Error),
        (t((1, 2), (4, 4), Neg), vec![t((0, 0), (3, 3), Neg), g], SentimentError),
        (t((1, 2), (4, 4), Neg), vec![t((1, 2), (4, 4), Pos), t((1, 2), (4, 4), Neg)], Correct),
    ]
}

#[test]
fn twelve_hand_built_cases() {
    let cases = cases();
    assert_eq!(cases.len(), 12);
    for (k, (pseudo, gold, want)) in cases.iter().enumerate() {
        assert_eq!(categorize(pseudo, gold), *want, "case {k}");
    }
}

#[test]
fn counts_sum_to_retained_labels() {
    let cases = cases();
    let mut counts = AuditCounts::default();
    for (p, g, _) in &cases {
        counts.merge(&audit_pseudo_labels(&[*p], g));
    }
    assert_eq!(counts.total(), cases.len());
    for cat in [Correct, SentimentError, WordsMisLocalized, Error] {
        let want = cases.iter().filter(|(_, _, c)| *c == cat).count();
        assert_eq!(counts.get(cat), want, "{cat:?}");
    }
}

#[test]
fn audit_is_permutation_invariant() {
    let gold = vec![t((1, 2), (4, 4), Pos), t((6, 6), (8, 9), Neg)];
    let pseudo = vec![t((1, 1), (4, 4), Pos), t((6, 6), (8, 9), Pos), t((3, 3), (0, 0), Neu)];
    let a = audit_pseudo_labels(&pseudo, &gold);
    assert_eq!(a.total(), 3);
    let mut p = pseudo;
    p.reverse();
    let mut g = gold;
    g.reverse();
    assert_eq!(audit_pseudo_labels(&p, &g), a);
}
