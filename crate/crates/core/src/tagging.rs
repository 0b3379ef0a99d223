//! Codecs between triplet sets and the two table tagging schemes.
//!
//! Rows of the table index aspect tokens and columns index opinion tokens.
//! The region scheme marks each triplet by its top-left (B) and bottom-right
//! (E) corner; the cell scheme marks aspect/opinion tokens on the diagonal
//! and the polarity on every crossing cell.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::corpus::{LabeledSentence, Polarity, Span, Triplet};
use crate::error::{Error, Result};

/// Rectangle `(a, b, c, d)`: rows `a..=c` (aspect), columns `b..=d` (opinion).
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Rect {
    pub a: usize,
    pub b: usize,
    pub c: usize,
    pub d: usize,
}

impl Rect {
    pub fn new(a: usize, b: usize, c: usize, d: usize) -> Self {
        debug_assert!(a <= c && b <= d, "malformed rect ({a},{b},{c},{d})");
        Rect { a, b, c, d }
    }

    pub fn from_spans(aspect: Span, opinion: Span) -> Self {
        Rect::new(aspect.start, opinion.start, aspect.end, opinion.end)
    }

    pub fn aspect(&self) -> Span {
        Span::new(self.a, self.c)
    }

    pub fn opinion(&self) -> Span {
        Span::new(self.b, self.d)
    }

    pub fn is_valid(&self) -> bool {
        self.a <= self.c && self.b <= self.d
    }
}

/// Region class; the classifier index mapping is POS=0, NEU=1, NEG=2, INVALID=3.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum RegionClass {
    Pos,
    Neu,
    Neg,
    Invalid,
}

impl RegionClass {
    pub const ALL: [RegionClass; 4] = [
        RegionClass::Pos,
        RegionClass::Neu,
        RegionClass::Neg,
        RegionClass::Invalid,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn polarity(self) -> Option<Polarity> {
        match self {
            RegionClass::Pos => Some(Polarity::Pos),
            RegionClass::Neu => Some(Polarity::Neu),
            RegionClass::Neg => Some(Polarity::Neg),
            RegionClass::Invalid => None,
        }
    }
}

impl From<Polarity> for RegionClass {
    fn from(p: Polarity) -> Self {
        match p {
            Polarity::Pos => RegionClass::Pos,
            Polarity::Neu => RegionClass::Neu,
            Polarity::Neg => RegionClass::Neg,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct GoldRegion {
    pub rect: Rect,
    pub cls: RegionClass,
}

/// Binary corner maps `y^B`, `y^E`, row-major `n × n`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BoundaryLabels {
    pub n: usize,
    pub b: Vec<u8>,
    pub e: Vec<u8>,
}

impl BoundaryLabels {
    pub fn zeros(n: usize) -> Self {
        BoundaryLabels {
            n,
            b: vec![0; n * n],
            e: vec![0; n * n],
        }
    }

    pub fn b_at(&self, i: usize, j: usize) -> u8 {
        self.b[i * self.n + j]
    }

    pub fn e_at(&self, i: usize, j: usize) -> u8 {
        self.e[i * self.n + j]
    }
}

pub fn encode_region_labels(ls: &LabeledSentence) -> Result<(BoundaryLabels, Vec<GoldRegion>)> {
    let n = ls.len();
    let mut labels = BoundaryLabels::zeros(n);
    let mut regions = Vec::with_capacity(ls.triplets.len());
    for t in &ls.triplets {
        if !t.aspect.fits(n) || !t.opinion.fits(n) {
            return Err(Error::SpanOutOfBounds(format!(
                "{:?}/{:?} in a sentence of {n} tokens",
                t.aspect, t.opinion
            )));
        }
        let rect = Rect::from_spans(t.aspect, t.opinion);
        labels.b[rect.a * n + rect.b] = 1;
        labels.e[rect.c * n + rect.d] = 1;
        regions.push(GoldRegion {
            rect,
            cls: t.polarity.into(),
        });
    }
    Ok((labels, regions))
}

/// Drops INVALID regions and converts the rest to triplets, deduplicated and
/// sorted by `(a, b, c, d)`.
pub fn decode_regions(regions: &[(Rect, RegionClass)]) -> Vec<Triplet> {
    let set: BTreeSet<(Rect, RegionClass)> = regions
        .iter()
        .filter(|(_, cls)| *cls != RegionClass::Invalid)
        .copied()
        .collect();
    set.into_iter()
        .filter_map(|(r, cls)| {
            cls.polarity()
                .map(|p| Triplet::new(r.aspect(), r.opinion(), p))
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum CellLabel {
    None,
    A,
    O,
    Pos,
    Neu,
    Neg,
}

impl CellLabel {
    pub const ALL: [CellLabel; 6] = [
        CellLabel::None,
        CellLabel::A,
        CellLabel::O,
        CellLabel::Pos,
        CellLabel::Neu,
        CellLabel::Neg,
    ];

    /// Labels other than NONE.
    pub const FOREGROUND: [CellLabel; 5] = [
        CellLabel::A,
        CellLabel::O,
        CellLabel::Pos,
        CellLabel::Neu,
        CellLabel::Neg,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn polarity(self) -> Option<Polarity> {
        match self {
            CellLabel::Pos => Some(Polarity::Pos),
            CellLabel::Neu => Some(Polarity::Neu),
            CellLabel::Neg => Some(Polarity::Neg),
            _ => None,
        }
    }
}

impl From<Polarity> for CellLabel {
    fn from(p: Polarity) -> Self {
        match p {
            Polarity::Pos => CellLabel::Pos,
            Polarity::Neu => CellLabel::Neu,
            Polarity::Neg => CellLabel::Neg,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CellTable {
    pub n: usize,
    pub cells: Vec<CellLabel>,
}

impl CellTable {
    pub fn empty(n: usize) -> Self {
        CellTable {
            n,
            cells: vec![CellLabel::None; n * n],
        }
    }

    pub fn get(&self, i: usize, j: usize) -> CellLabel {
        self.cells[i * self.n + j]
    }

    pub fn set(&mut self, i: usize, j: usize, label: CellLabel) {
        self.cells[i * self.n + j] = label;
    }
}

pub fn encode_cell_labels(ls: &LabeledSentence) -> Result<CellTable> {
    let n = ls.len();
    let mut tbl = CellTable::empty(n);
    let place = |tbl: &mut CellTable, i: usize, j: usize, want: CellLabel| -> Result<()> {
        match tbl.get(i, j) {
            CellLabel::None => {
                tbl.set(i, j, want);
                Ok(())
            }
            have if have == want => Ok(()),
            have => Err(Error::CellConflict(format!(
                "cell ({i},{j}) labelled both {have:?} and {want:?}"
            ))),
        }
    };
    for t in &ls.triplets {
        if !t.aspect.fits(n) || !t.opinion.fits(n) {
            return Err(Error::SpanOutOfBounds(format!(
                "{:?}/{:?} in a sentence of {n} tokens",
                t.aspect, t.opinion
            )));
        }
        for i in t.aspect.start..=t.aspect.end {
            place(&mut tbl, i, i, CellLabel::A)?;
        }
        for j in t.opinion.start..=t.opinion.end {
            place(&mut tbl, j, j, CellLabel::O)?;
        }
    }
    for t in &ls.triplets {
        for i in t.aspect.start..=t.aspect.end {
            for j in t.opinion.start..=t.opinion.end {
                place(&mut tbl, i, j, t.polarity.into())?;
            }
        }
    }
    Ok(tbl)
}

fn diagonal_runs(tbl: &CellTable, label: CellLabel) -> Vec<Span> {
    let mut out = Vec::new();
    let mut start = None;
    for i in 0..tbl.n {
        match (tbl.get(i, i) == label, start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                out.push(Span::new(s, i - 1));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        out.push(Span::new(s, tbl.n - 1));
    }
    out
}

/// Majority polarity over the crossing cells; `None` when the crossing has
/// no sentiment cells or the top count is tied.
pub fn majority_polarity(labels: impl IntoIterator<Item = CellLabel>) -> Option<Polarity> {
    let mut counts = [0usize; 3];
    for l in labels {
        if let Some(p) = l.polarity() {
            counts[p.index()] += 1;
        }
    }
    let best = *counts.iter().max()?;
    if best == 0 || counts.iter().filter(|&&c| c == best).count() > 1 {
        return None;
    }
    Polarity::ALL.into_iter().find(|p| counts[p.index()] == best)
}

/// Reads aspect/opinion spans from diagonal runs and the polarity of each
/// pair from its crossing cells. Off-diagonal A/O and diagonal sentiment
/// labels are ignored.
pub fn decode_cell_table(tbl: &CellTable) -> Vec<Triplet> {
    let aspects = diagonal_runs(tbl, CellLabel::A);
    let opinions = diagonal_runs(tbl, CellLabel::O);
    let mut out = Vec::new();
    for &a in &aspects {
        for &o in &opinions {
            let crossing = (a.start..=a.end)
                .flat_map(|i| (o.start..=o.end).map(move |j| (i, j)))
                .filter(|(i, j)| i != j)
                .map(|(i, j)| tbl.get(i, j));
            if let Some(p) = majority_polarity(crossing) {
                out.push(Triplet::new(a, o, p));
            }
        }
    }
    out.sort();
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Sentence;

    fn fried_rice() -> LabeledSentence {
        LabeledSentence::new(
            Sentence::from_text("The fried rice is amazing here .").unwrap(),
            vec![Triplet::new(Span::new(1, 2), Span::single(4), Polarity::Pos)],
        )
        .unwrap()
    }

    #[test]
    fn region_encoding_of_fried_rice() {
        let (labels, regions) = encode_region_labels(&fried_rice()).unwrap();
        assert_eq!(labels.b_at(1, 4), 1);
        assert_eq!(labels.e_at(2, 4), 1);
        assert_eq!(labels.b.iter().map(|&x| x as usize).sum::<usize>(), 1);
        assert_eq!(labels.e.iter().map(|&x| x as usize).sum::<usize>(), 1);
        assert_eq!(
            regions,
            vec![GoldRegion {
                rect: Rect::new(1, 4, 2, 4),
                cls: RegionClass::Pos
            }]
        );
    }

    #[test]
    fn region_encoding_edge_cases() {
        let empty = LabeledSentence::unlabeled(Sentence::from_text("a b c").unwrap());
        let (labels, regions) = encode_region_labels(&empty).unwrap();
        assert!(labels.b.iter().chain(&labels.e).all(|&x| x == 0));
        assert!(regions.is_empty());

        let single = LabeledSentence::new(
            Sentence::from_text("a b c").unwrap(),
            vec![Triplet::new(Span::single(0), Span::single(2), Polarity::Neg)],
        )
        .unwrap();
        let (labels, _) = encode_region_labels(&single).unwrap();
        assert_eq!((labels.b_at(0, 2), labels.e_at(0, 2)), (1, 1));
    }

    #[test]
    fn decode_drops_invalid() {
        assert_eq!(
            decode_regions(&[(Rect::new(1, 4, 2, 4), RegionClass::Pos)]),
            vec![Triplet::new(Span::new(1, 2), Span::single(4), Polarity::Pos)]
        );
        assert!(decode_regions(&[(Rect::new(0, 1, 0, 1), RegionClass::Invalid)]).is_empty());
    }

    #[test]
    fn cell_encoding_of_fried_rice() {
        let tbl = encode_cell_labels(&fried_rice()).unwrap();
        for i in 0..tbl.n {
            for j in 0..tbl.n {
                let want = match (i, j) {
                    (1, 1) | (2, 2) => CellLabel::A,
                    (4, 4) => CellLabel::O,
                    (1, 4) | (2, 4) => CellLabel::Pos,
                    _ => CellLabel::None,
                };
                assert_eq!(tbl.get(i, j), want, "cell ({i},{j})");
            }
        }
        assert_eq!(decode_cell_table(&tbl), fried_rice().triplets);
    }

    #[test]
    fn cell_encoding_shared_aspect_is_union() {
        let ls = LabeledSentence::new(
            Sentence::from_text("the screen is bright but dim .").unwrap(),
            vec![
                Triplet::new(Span::single(1), Span::single(3), Polarity::Pos),
                Triplet::new(Span::single(1), Span::single(5), Polarity::Neg),
            ],
        )
        .unwrap();
        let tbl = encode_cell_labels(&ls).unwrap();
        // brute force over every cell
        for i in 0..6 {
            for j in 0..6 {
                let mut want = CellLabel::None;
                for t in &ls.triplets {
                    if i == j && t.aspect.contains(i) {
                        want = CellLabel::A;
                    } else if i == j && t.opinion.contains(i) {
                        want = CellLabel::O;
                    } else if t.aspect.contains(i) && t.opinion.contains(j) {
                        want = t.polarity.into();
                    }
                }
                assert_eq!(tbl.get(i, j), want);
            }
        }
        assert_eq!(decode_cell_table(&tbl), ls.triplets);
    }

    #[test]
    fn cell_encoding_conflict() {
        let ls = LabeledSentence::new(
            Sentence::from_text("a b c").unwrap(),
            vec![
                Triplet::new(Span::new(0, 1), Span::single(2), Polarity::Pos),
                Triplet::new(Span::single(2), Span::single(1), Polarity::Pos),
            ],
        )
        .unwrap();
        assert!(matches!(
            encode_cell_labels(&ls),
            Err(Error::CellConflict(_))
        ));
    }

    #[test]
    fn all_none_table_decodes_to_nothing() {
        assert!(decode_cell_table(&CellTable::empty(4)).is_empty());
    }

    #[test]
    fn majority_vote_matches_enumeration() {
        use CellLabel::*;
        let labels = [None, Pos, Neu, Neg];
        for x in labels {
            for y in labels {
                for z in labels {
                    let cells = [x, y, z];
                    let mut counts = std::collections::BTreeMap::new();
                    for c in cells.iter().filter_map(|c| c.polarity()) {
                        *counts.entry(c).or_insert(0) += 1;
                    }
                    let max = counts.values().copied().max().unwrap_or(0);
                    let winners: Vec<_> =
                        counts.iter().filter(|(_, &v)| v == max).map(|(k, _)| *k).collect();
                    let want = if winners.len() == 1 { Some(winners[0]) } else { Option::None };
                    assert_eq!(majority_polarity(cells), want, "{cells:?}");
                }
            }
        }
        assert_eq!(majority_polarity([Pos, Pos, Neg]), Some(Polarity::Pos));
        assert_eq!(majority_polarity([Pos, Neg]), Option::None);
    }
}
