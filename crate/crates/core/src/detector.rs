//! Two-stage region detector over the relation table: corner scoring,
//! top-k pruning, corner pairing, RoI pooling and region classification.

use std::collections::BTreeSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Polarity, Span, Triplet};
use crate::encoder::FeatureMap;
use crate::error::{Error, Result};
use crate::tagging::{decode_regions, CellLabel, Rect, RegionClass};
use crate::tensor::{argmax, axpy, dot, matvec_acc, matvec_t_acc, outer_acc, sigmoid, softmax, Tensor};

/// ASTE classifies regions into {POS, NEU, NEG, INVALID}; AOPE into {VALID, INVALID}.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TaskMode {
    Aste,
    Aope,
}

impl TaskMode {
    pub fn num_classes(self) -> usize {
        match self {
            TaskMode::Aste => 4,
            TaskMode::Aope => 2,
        }
    }

    /// The INVALID class is always last.
    pub fn invalid_class(self) -> usize {
        self.num_classes() - 1
    }

    pub fn foreground(self) -> std::ops::Range<usize> {
        0..self.invalid_class()
    }

    /// Classifier target for a gold region class.
    pub fn class_index(self, cls: RegionClass) -> usize {
        match (self, cls) {
            (_, RegionClass::Invalid) => self.invalid_class(),
            (TaskMode::Aste, c) => c.index(),
            (TaskMode::Aope, _) => 0,
        }
    }

    /// Region class for a classifier output. AOPE's VALID maps to POS, the
    /// placeholder polarity used for pairs.
    pub fn region_class(self, idx: usize) -> RegionClass {
        if idx >= self.invalid_class() {
            return RegionClass::Invalid;
        }
        match self {
            TaskMode::Aste => RegionClass::from_index(idx).unwrap_or(RegionClass::Invalid),
            TaskMode::Aope => RegionClass::Pos,
        }
    }

    /// Canonical form of a triplet under this mode (AOPE drops polarity).
    pub fn project(self, t: &Triplet) -> Triplet {
        match self {
            TaskMode::Aste => *t,
            TaskMode::Aope => Triplet::new(t.aspect, t.opinion, Polarity::Pos),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TaskMode::Aste => "aste",
            TaskMode::Aope => "aope",
        }
    }
}

impl std::str::FromStr for TaskMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "aste" => Ok(TaskMode::Aste),
            "aope" => Ok(TaskMode::Aope),
            other => Err(Error::InvalidConfig(format!("unknown mode {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorParams {
    pub mode: TaskMode,
    pub b_w: Tensor,
    pub b_b: Tensor,
    pub e_w: Tensor,
    pub e_b: Tensor,
    /// `[C, 3d]` region classifier.
    pub cls_w: Tensor,
    pub cls_b: Tensor,
    /// `[6, d]` per-cell classifier, used only by the cell-level variant.
    pub cell_w: Tensor,
    pub cell_b: Tensor,
}

impl DetectorParams {
    pub fn init(d: usize, mode: TaskMode, rng: &mut impl Rng) -> Self {
        let c = mode.num_classes();
        DetectorParams {
            mode,
            b_w: Tensor::randn(&[d], 1.0 / (d as f64).sqrt(), rng),
            b_b: Tensor::zeros(&[1]),
            e_w: Tensor::randn(&[d], 1.0 / (d as f64).sqrt(), rng),
            e_b: Tensor::zeros(&[1]),
            cls_w: Tensor::randn(&[c, 3 * d], 1.0 / ((3 * d) as f64).sqrt(), rng),
            cls_b: Tensor::zeros(&[c]),
            cell_w: Tensor::randn(&[CellLabel::ALL.len(), d], 1.0 / (d as f64).sqrt(), rng),
            cell_b: Tensor::zeros(&[CellLabel::ALL.len()]),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.tensors_mut().into_iter().for_each(|t| t.fill(0.0));
        z
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        vec![
            ("b_w".to_string(), &self.b_w),
            ("b_b".to_string(), &self.b_b),
            ("e_w".to_string(), &self.e_w),
            ("e_b".to_string(), &self.e_b),
            ("cls_w".to_string(), &self.cls_w),
            ("cls_b".to_string(), &self.cls_b),
            ("cell_w".to_string(), &self.cell_w),
            ("cell_b".to_string(), &self.cell_b),
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.b_w,
            &mut self.b_b,
            &mut self.e_w,
            &mut self.e_b,
            &mut self.cls_w,
            &mut self.cls_b,
            &mut self.cell_w,
            &mut self.cell_b,
        ]
    }
}

/// Corner probabilities `P^B`, `P^E` (row-major `n × n`) and their logits.
#[derive(Clone, Debug, PartialEq)]
pub struct RpnScores {
    pub n: usize,
    pub pb: Vec<f64>,
    pub pe: Vec<f64>,
}

pub fn rpn_scores(tl: &FeatureMap, params: &DetectorParams) -> RpnScores {
    let n = tl.n;
    let mut pb = Vec::with_capacity(n * n);
    let mut pe = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            let t = tl.cell(i, j);
            pb.push(sigmoid(dot(&params.b_w.data, t) + params.b_b.data[0]));
            pe.push(sigmoid(dot(&params.e_w.data, t) + params.e_b.data[0]));
        }
    }
    RpnScores { n, pb, pe }
}

/// Accumulates head gradients and `∂/∂T^L` from gradients on the corner logits.
pub fn rpn_backward(
    tl: &FeatureMap,
    d_logit_b: &[f64],
    d_logit_e: &[f64],
    params: &DetectorParams,
    grads: &mut DetectorParams,
    d_tl: &mut FeatureMap,
) {
    let n = tl.n;
    for i in 0..n {
        for j in 0..n {
            let (gb, ge) = (d_logit_b[i * n + j], d_logit_e[i * n + j]);
            let t = tl.cell(i, j);
            let dt = d_tl.cell_mut(i, j);
            if gb != 0.0 {
                axpy(gb, t, &mut grads.b_w.data);
                grads.b_b.data[0] += gb;
                axpy(gb, &params.b_w.data, dt);
            }
            if ge != 0.0 {
                axpy(ge, t, &mut grads.e_w.data);
                grads.e_b.data[0] += ge;
                axpy(ge, &params.e_w.data, dt);
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScoredCell {
    pub i: usize,
    pub j: usize,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CandidateSets {
    pub b: Vec<ScoredCell>,
    pub e: Vec<ScoredCell>,
    pub k: usize,
}

/// `k = max(1, ceil(κ·n))`; a tiny tolerance keeps products such as
/// `0.3 · 10` from rounding up past the integer.
pub fn prune_count(kappa: f64, n: usize) -> usize {
    ((kappa * n as f64 - 1e-9).ceil() as usize).max(1)
}

/// The `k` highest-scoring cells, score-descending, row-major on ties.
pub fn topk_prune(scores: &[f64], n: usize, kappa: f64) -> Vec<ScoredCell> {
    debug_assert_eq!(scores.len(), n * n);
    let k = prune_count(kappa, n).min(n * n);
    let mut cells: Vec<ScoredCell> = scores
        .iter()
        .enumerate()
        .map(|(idx, &score)| ScoredCell {
            i: idx / n,
            j: idx % n,
            score,
        })
        .collect();
    // stable sort keeps row-major order among equal scores
    cells.sort_by(|x, y| y.score.total_cmp(&x.score));
    cells.truncate(k);
    cells
}

pub fn candidate_sets(scores: &RpnScores, kappa: f64) -> CandidateSets {
    CandidateSets {
        b: topk_prune(&scores.pb, scores.n, kappa),
        e: topk_prune(&scores.pe, scores.n, kappa),
        k: prune_count(kappa, scores.n),
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RegionProposal {
    pub rect: Rect,
    pub b_score: f64,
    pub e_score: f64,
}

/// Pairs every B candidate with every E candidate at or below-right of it.
pub fn propose_regions(b_set: &[ScoredCell], e_set: &[ScoredCell]) -> Vec<RegionProposal> {
    let mut out: Vec<RegionProposal> = Vec::new();
    for b in b_set {
        for e in e_set {
            if b.i <= e.i && b.j <= e.j {
                out.push(RegionProposal {
                    rect: Rect::new(b.i, b.j, e.i, e.j),
                    b_score: b.score,
                    e_score: e.score,
                });
            }
        }
    }
    out.sort_by_key(|p| p.rect);
    out.dedup_by(|x, y| x.rect == y.rect);
    out
}

/// `r = t_ab ⊕ t_cd ⊕ max over the rectangle`, with the max-pool argmax kept
/// for the backward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct RoiFeature {
    pub r: Vec<f64>,
    pool_arg: Vec<(usize, usize)>,
}

impl RoiFeature {
    /// Cell selected by the max-pool for each channel.
    pub fn pool_arg(&self) -> &[(usize, usize)] {
        &self.pool_arg
    }
}

/// [`roi_represent`] with the max-pool selections fixed in advance.
pub fn roi_represent_frozen(tl: &FeatureMap, rect: Rect, pool_arg: &[(usize, usize)]) -> RoiFeature {
    let d = tl.d;
    let mut r = Vec::with_capacity(3 * d);
    r.extend_from_slice(tl.cell(rect.a, rect.b));
    r.extend_from_slice(tl.cell(rect.c, rect.d));
    r.extend(pool_arg.iter().enumerate().map(|(k, &(i, j))| tl.cell(i, j)[k]));
    RoiFeature {
        r,
        pool_arg: pool_arg.to_vec(),
    }
}

pub fn roi_represent(tl: &FeatureMap, rect: Rect) -> RoiFeature {
    debug_assert!(rect.is_valid());
    let d = tl.d;
    let mut r = Vec::with_capacity(3 * d);
    r.extend_from_slice(tl.cell(rect.a, rect.b));
    r.extend_from_slice(tl.cell(rect.c, rect.d));
    let mut pool_arg = vec![(rect.a, rect.b); d];
    let mut pooled = tl.cell(rect.a, rect.b).to_vec();
    for i in rect.a..=rect.c {
        for j in rect.b..=rect.d {
            let t = tl.cell(i, j);
            for k in 0..d {
                if t[k] > pooled[k] {
                    pooled[k] = t[k];
                    pool_arg[k] = (i, j);
                }
            }
        }
    }
    r.extend_from_slice(&pooled);
    RoiFeature { r, pool_arg }
}

pub fn roi_backward(rect: Rect, roi: &RoiFeature, d_r: &[f64], d_tl: &mut FeatureMap) {
    let d = d_tl.d;
    axpy(1.0, &d_r[..d], d_tl.cell_mut(rect.a, rect.b));
    axpy(1.0, &d_r[d..2 * d], d_tl.cell_mut(rect.c, rect.d));
    for (k, &(i, j)) in roi.pool_arg.iter().enumerate() {
        d_tl.cell_mut(i, j)[k] += d_r[2 * d + k];
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassProbs {
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
}

impl ClassProbs {
    pub fn argmax(&self) -> usize {
        argmax(&self.probs)
    }

    /// Largest probability among foreground classes.
    pub fn confidence(&self, mode: TaskMode) -> f64 {
        self.probs[mode.foreground()]
            .iter()
            .copied()
            .fold(0.0, f64::max)
    }
}

pub fn classify_region(r: &[f64], params: &DetectorParams) -> ClassProbs {
    let mut logits = params.cls_b.data.clone();
    matvec_acc(&params.cls_w.data, r, &mut logits);
    let probs = softmax(&logits);
    ClassProbs { logits, probs }
}

/// Accumulates classifier gradients and returns `∂/∂r` given `∂/∂logits`.
pub fn classify_backward(
    r: &[f64],
    d_logits: &[f64],
    params: &DetectorParams,
    grads: &mut DetectorParams,
) -> Vec<f64> {
    outer_acc(&mut grads.cls_w.data, d_logits, r);
    axpy(1.0, d_logits, &mut grads.cls_b.data);
    let mut d_r = vec![0.0; r.len()];
    matvec_t_acc(&params.cls_w.data, d_logits, &mut d_r);
    d_r
}

/// Cell-level class distribution over {NONE, A, O, POS, NEU, NEG}.
pub fn classify_cell(t: &[f64], params: &DetectorParams) -> ClassProbs {
    let mut logits = params.cell_b.data.clone();
    matvec_acc(&params.cell_w.data, t, &mut logits);
    let probs = softmax(&logits);
    ClassProbs { logits, probs }
}

pub fn classify_cell_backward(
    t: &[f64],
    d_logits: &[f64],
    params: &DetectorParams,
    grads: &mut DetectorParams,
) -> Vec<f64> {
    outer_acc(&mut grads.cell_w.data, d_logits, t);
    axpy(1.0, d_logits, &mut grads.cell_b.data);
    let mut d_t = vec![0.0; t.len()];
    matvec_t_acc(&params.cell_w.data, d_logits, &mut d_t);
    d_t
}

/// Argmax class per proposal, INVALID dropped, duplicates collapsed.
pub fn decode_triplets(
    proposals: &[RegionProposal],
    probs: &[ClassProbs],
    mode: TaskMode,
) -> Vec<Triplet> {
    debug_assert_eq!(proposals.len(), probs.len());
    let labelled: Vec<(Rect, RegionClass)> = proposals
        .iter()
        .zip(probs)
        .map(|(p, cp)| (p.rect, mode.region_class(cp.argmax())))
        .collect();
    decode_regions(&labelled)
}

/// AOPE decoding: rectangles classified VALID become (aspect, opinion) pairs.
pub fn decode_pairs(proposals: &[RegionProposal], probs: &[ClassProbs]) -> Vec<(Span, Span)> {
    let set: BTreeSet<(Span, Span)> = decode_triplets(proposals, probs, TaskMode::Aope)
        .iter()
        .map(Triplet::pair)
        .collect();
    set.into_iter().collect()
}
