//! Sentence-level exact-match F1, micro triplet P/R/F1 and the pseudo-label
//! error taxonomy.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::corpus::Triplet;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl Prf {
    /// `f1 = 2PR/(P+R)` with `0/0 → 0`.
    pub fn from_counts(tp: usize, n_pred: usize, n_gold: usize) -> Self {
        let precision = ratio(tp, n_pred);
        let recall = ratio(tp, n_gold);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Prf {
            precision,
            recall,
            f1,
        }
    }
}

/// A sentence is correct only if its predicted set equals the gold set.
/// Precision counts sentences with at least one prediction, recall those with
/// at least one gold item.
pub fn sentence_f1<T: Ord>(preds: &[Vec<T>], golds: &[Vec<T>]) -> Result<Prf> {
    if preds.len() != golds.len() {
        return Err(Error::LengthMismatch(format!(
            "{} predictions for {} sentences",
            preds.len(),
            golds.len()
        )));
    }
    let (mut tp, mut n_pred, mut n_gold) = (0, 0, 0);
    for (p, g) in preds.iter().zip(golds) {
        let ps: BTreeSet<&T> = p.iter().collect();
        let gs: BTreeSet<&T> = g.iter().collect();
        n_pred += usize::from(!ps.is_empty());
        n_gold += usize::from(!gs.is_empty());
        tp += usize::from(!gs.is_empty() && ps == gs);
    }
    Ok(Prf::from_counts(tp, n_pred, n_gold))
}

/// Micro-averaged exact-match scores over items pooled across sentences.
pub fn triplet_prf<T: Ord>(preds: &[Vec<T>], golds: &[Vec<T>]) -> Result<Prf> {
    if preds.len() != golds.len() {
        return Err(Error::LengthMismatch(format!(
            "{} predictions for {} sentences",
            preds.len(),
            golds.len()
        )));
    }
    let (mut tp, mut n_pred, mut n_gold) = (0, 0, 0);
    for (p, g) in preds.iter().zip(golds) {
        let ps: BTreeSet<&T> = p.iter().collect();
        let gs: BTreeSet<&T> = g.iter().collect();
        n_pred += ps.len();
        n_gold += gs.len();
        tp += ps.intersection(&gs).count();
    }
    Ok(Prf::from_counts(tp, n_pred, n_gold))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ErrorCategory {
    Correct,
    SentimentError,
    WordsMisLocalized,
    Error,
}

impl ErrorCategory {
    pub const ALL: [ErrorCategory; 4] = [
        ErrorCategory::Correct,
        ErrorCategory::SentimentError,
        ErrorCategory::WordsMisLocalized,
        ErrorCategory::Error,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ErrorCategory::Correct => "correct",
            ErrorCategory::SentimentError => "sentiment_error",
            ErrorCategory::WordsMisLocalized => "words_mis_localized",
            ErrorCategory::Error => "error",
        }
    }
}

impl fmt::Display for ErrorCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

pub fn categorize(pseudo: &Triplet, gold: &[Triplet]) -> ErrorCategory {
    if gold.contains(pseudo) {
        ErrorCategory::Correct
    } else if gold.iter().any(|g| g.pair() == pseudo.pair()) {
        ErrorCategory::SentimentError
    } else if gold.iter().any(|g| {
        g.polarity == pseudo.polarity
            && g.aspect.overlaps(&pseudo.aspect)
            && g.opinion.overlaps(&pseudo.opinion)
    }) {
        ErrorCategory::WordsMisLocalized
    } else {
        ErrorCategory::Error
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditCounts {
    pub correct: usize,
    pub sentiment_error: usize,
    pub words_mis_localized: usize,
    pub error: usize,
}

impl AuditCounts {
    pub fn total(&self) -> usize {
        self.correct + self.sentiment_error + self.words_mis_localized + self.error
    }

    pub fn get(&self, c: ErrorCategory) -> usize {
        match c {
            ErrorCategory::Correct => self.correct,
            ErrorCategory::SentimentError => self.sentiment_error,
            ErrorCategory::WordsMisLocalized => self.words_mis_localized,
            ErrorCategory::Error => self.error,
        }
    }

    pub fn add(&mut self, c: ErrorCategory) {
        match c {
            ErrorCategory::Correct => self.correct += 1,
            ErrorCategory::SentimentError => self.sentiment_error += 1,
            ErrorCategory::WordsMisLocalized => self.words_mis_localized += 1,
            ErrorCategory::Error => self.error += 1,
        }
    }

    pub fn merge(&mut self, other: &AuditCounts) {
        self.correct += other.correct;
        self.sentiment_error += other.sentiment_error;
        self.words_mis_localized += other.words_mis_localized;
        self.error += other.error;
    }
}

/// Classifies each pseudo triplet of one sentence against its gold set.
pub fn audit_pseudo_labels(pseudo: &[Triplet], gold: &[Triplet]) -> AuditCounts {
    let mut counts = AuditCounts::default();
    for p in pseudo {
        counts.add(categorize(p, gold));
    }
    counts
}
