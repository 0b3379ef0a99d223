//! Mean-teacher training: teacher pretraining, target augmentation,
//! confidence-filtered pseudo labels, student updates and EMA, plus the
//! source-only, self-training and cell-level variants.
//!
//! A training step is split in two. [`build_plan`] runs the forward passes
//! that fix every discrete choice of the step (proposals, gold matches,
//! retained pseudo labels, regions fed to MMD). [`evaluate`] then computes
//! the loss and its exact gradient as a smooth function of the parameters
//! for that plan, which is what the finite-difference checker perturbs.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{LabeledSentence, Polarity, Triplet};
use crate::detector::{
    classify_backward, classify_cell, classify_cell_backward, classify_region, roi_backward,
    roi_represent, roi_represent_frozen, rpn_backward, rpn_scores, ClassProbs, DetectorParams,
    RoiFeature, TaskMode,
};
use crate::encoder::{encode, encode_frozen, ActivationPattern, EncoderConfig, EncoderForward, FeatureMap};
use crate::error::{Error, Result};
use crate::eval::sentence_f1;
use crate::losses::{
    loss_mmd_cell_level_grad_with, loss_mmd_region_level_grad_with, loss_rpc_grad, loss_rpn_grad,
    loss_uns_grad, match_gold, LossBreakdown, MedianPairs, MmdConfig, RegionFeatures,
};
use crate::model::{cell_pass, ema_update, predict, region_pass, Checkpoint, Head, ModelParams};
use crate::optim::Adam;
use crate::tagging::{encode_cell_labels, encode_region_labels, BoundaryLabels, CellLabel, Rect};
use crate::tensor::{argmax, axpy, softmax_backward};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    Tfmt,
    CTfmt,
    SelfTrain,
    SourceOnly,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Tfmt,
        Variant::CTfmt,
        Variant::SelfTrain,
        Variant::SourceOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Tfmt => "tfmt",
            Variant::CTfmt => "ctfmt",
            Variant::SelfTrain => "self_train",
            Variant::SourceOnly => "source_only",
        }
    }

    pub fn head(self) -> Head {
        match self {
            Variant::CTfmt => Head::Cell,
            _ => Head::Region,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.to_ascii_lowercase().replace('-', "_");
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == key)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown variant {s:?}")))
    }
}

/// When the teacher takes its EMA step toward the student.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum EmaCadence {
    #[default]
    Step,
    Epoch,
}

impl EmaCadence {
    pub fn name(self) -> &'static str {
        match self {
            EmaCadence::Step => "step",
            EmaCadence::Epoch => "epoch",
        }
    }
}

impl fmt::Display for EmaCadence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EmaCadence {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "step" => Ok(EmaCadence::Step),
            "epoch" => Ok(EmaCadence::Epoch),
            _ => Err(Error::InvalidConfig(format!("unknown EMA cadence {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablations {
    pub no_aug: bool,
    pub no_uns: bool,
    pub no_mmd: bool,
}

impl Ablations {
    pub fn all() -> Self {
        Ablations {
            no_aug: true,
            no_uns: true,
            no_mmd: true,
        }
    }

    /// Comma-separated names, `"none"` when empty.
    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if self.no_aug {
            parts.push("no_aug");
        }
        if self.no_uns {
            parts.push("no_uns");
        }
        if self.no_mmd {
            parts.push("no_mmd");
        }
        if parts.is_empty() {
            "none".to_string()
        } else {
            parts.join("+")
        }
    }
}

impl FromStr for Ablations {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut out = Ablations::default();
        for part in s.split([',', '+']).map(str::trim).filter(|p| !p.is_empty()) {
            match part.to_ascii_lowercase().as_str() {
                "no_aug" => out.no_aug = true,
                "no_uns" => out.no_uns = true,
                "no_mmd" => out.no_mmd = true,
                "none" | "full" => {}
                other => {
                    return Err(Error::InvalidConfig(format!("unknown ablation {other:?}")))
                }
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub alpha: f64,
    pub beta: f64,
    pub lambda: f64,
    #[serde(default)]
    pub ema: EmaCadence,
    pub eta: f64,
    pub kappa: f64,
    pub aug_rate: f64,
    pub batch: usize,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
    pub mode: TaskMode,
    pub variant: Variant,
    pub ablations: Ablations,
    pub encoder: EncoderConfig,
    pub mmd: MmdConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha: 1.0,
            beta: 0.005,
            lambda: 0.6,
            ema: EmaCadence::Step,
            eta: 0.98,
            kappa: 0.3,
            aug_rate: 0.5,
            batch: 4,
            epochs: 10,
            lr: 1e-2,
            seed: 0,
            mode: TaskMode::Aste,
            variant: Variant::Tfmt,
            ablations: Ablations::default(),
            encoder: EncoderConfig::default(),
            mmd: MmdConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidConfig(what.to_string()));
        if !(self.lambda > 0.0 && self.lambda < 1.0) {
            return bad("lambda must lie in (0, 1)");
        }
        if !(self.eta > 0.0 && self.eta < 1.0) {
            return bad("eta must lie in (0, 1)");
        }
        if !(self.kappa > 0.0 && self.kappa <= 1.0) {
            return bad("kappa must lie in (0, 1]");
        }
        if !(0.0..=1.0).contains(&self.aug_rate) {
            return bad("aug_rate must lie in [0, 1]");
        }
        if !(self.alpha >= 0.0 && self.beta >= 0.0) || !self.alpha.is_finite() || !self.beta.is_finite() {
            return bad("alpha and beta must be finite and nonnegative");
        }
        if self.batch == 0 {
            return bad("batch must be positive");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if let Some(s) = self.mmd.fixed_bandwidth {
            if !(s > 0.0 && s.is_finite()) {
                return bad("MMD bandwidth must be positive");
            }
        }
        if !(self.mmd.fallback_bandwidth > 0.0 && self.mmd.fallback_bandwidth.is_finite()) {
            return bad("MMD fallback bandwidth must be positive");
        }
        self.encoder.validate()
    }

    pub fn head(&self) -> Head {
        self.variant.head()
    }

    /// Whether the mean-teacher target pass contributes anything at all.
    pub fn target_active(&self) -> bool {
        matches!(self.variant, Variant::Tfmt | Variant::CTfmt)
            && !(self.ablations.no_uns && self.ablations.no_mmd)
    }

    pub fn weights(&self) -> LossWeights {
        let target = self.target_active();
        LossWeights {
            alpha: self.alpha,
            beta: self.beta,
            uns: target && !self.ablations.no_uns,
            mmd: target && !self.ablations.no_mmd,
        }
    }
}

/// Independent random streams derived from one seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    StudentInit = 1,
    TeacherInit = 2,
    SourceShuffle = 3,
    TargetShuffle = 4,
    Augment = 5,
    PretrainShuffle = 6,
}

pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

/// Replaces each token with probability `rate` by a uniform lexicon draw.
pub fn augment(
    tokens: &[String],
    rate: f64,
    lexicon: &[String],
    rng: &mut impl Rng,
) -> Result<Vec<String>> {
    if lexicon.is_empty() {
        return Err(Error::InvalidConfig("augmentation lexicon is empty".into()));
    }
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::InvalidConfig(format!("augmentation rate {rate} outside [0, 1]")));
    }
    Ok(tokens
        .iter()
        .map(|t| {
            if rng.gen_bool(rate) {
                lexicon[rng.gen_range(0..lexicon.len())].clone()
            } else {
                t.clone()
            }
        })
        .collect())
}

/// Sorted distinct tokens of a corpus.
pub fn corpus_lexicon(data: &[LabeledSentence]) -> Vec<String> {
    let set: BTreeSet<&String> = data.iter().flat_map(|s| s.tokens()).collect();
    set.into_iter().cloned().collect()
}

/// A teacher prediction kept for the consistency loss. For the cell head the
/// rectangle is a single cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabel {
    pub rect: Rect,
    pub probs: Vec<f64>,
    pub confidence: f64,
}

impl PseudoLabel {
    /// Foreground class achieving the confidence.
    pub fn class(&self, fg: std::ops::Range<usize>) -> usize {
        fg.start + argmax(&self.probs[fg])
    }

    /// Region pseudo label read as a triplet.
    pub fn triplet(&self, mode: TaskMode) -> Triplet {
        let polarity = mode
            .region_class(self.class(mode.foreground()))
            .polarity()
            .unwrap_or(Polarity::Pos);
        Triplet::new(self.rect.aspect(), self.rect.opinion(), polarity)
    }
}

fn cell_foreground() -> std::ops::Range<usize> {
    1..CellLabel::ALL.len()
}

fn max_in(probs: &[f64], fg: std::ops::Range<usize>) -> f64 {
    probs[fg].iter().copied().fold(0.0, f64::max)
}

/// Teacher region proposals whose largest foreground probability is ≥ `eta`.
pub fn teacher_pseudo_label(
    teacher: &ModelParams,
    tokens: &[String],
    eta: f64,
    kappa: f64,
) -> Result<Vec<PseudoLabel>> {
    let pass = region_pass(teacher, tokens, kappa)?;
    Ok(retain_regions(&pass.proposals.iter().map(|p| p.rect).collect::<Vec<_>>(), &pass.probs, teacher.mode(), eta))
}

fn retain_regions(rects: &[Rect], probs: &[ClassProbs], mode: TaskMode, eta: f64) -> Vec<PseudoLabel> {
    rects
        .iter()
        .zip(probs)
        .filter_map(|(&rect, p)| {
            let confidence = p.confidence(mode);
            (confidence >= eta).then(|| PseudoLabel {
                rect,
                probs: p.probs.clone(),
                confidence,
            })
        })
        .collect()
}

/// Teacher cells whose largest non-NONE probability is ≥ `eta`.
pub fn teacher_pseudo_cells(teacher: &ModelParams, tokens: &[String], eta: f64) -> Result<Vec<PseudoLabel>> {
    let pass = cell_pass(teacher, tokens)?;
    Ok(retain_cells(&pass.probs, pass.encoder.output.n, eta))
}

fn retain_cells(probs: &[ClassProbs], n: usize, eta: f64) -> Vec<PseudoLabel> {
    probs
        .iter()
        .enumerate()
        .filter_map(|(idx, p)| {
            let confidence = max_in(&p.probs, cell_foreground());
            (confidence >= eta).then(|| PseudoLabel {
                rect: Rect::new(idx / n, idx % n, idx / n, idx % n),
                probs: p.probs.clone(),
                confidence,
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    /// Consistency term enabled.
    pub uns: bool,
    /// MMD term enabled.
    pub mmd: bool,
}

/// Supervised part of a plan for one source sentence.
#[derive(Clone, Debug, PartialEq)]
pub struct SourceItem {
    pub tokens: Vec<String>,
    /// Corner labels; region head only.
    pub corners: Option<BoundaryLabels>,
    /// Units scored by the classifier: proposals (region head) or cells.
    pub units: Vec<Rect>,
    pub targets: Vec<usize>,
    /// Units whose features enter the MMD term, with their cell-type group.
    pub mmd: Vec<(Rect, usize)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TargetItem {
    pub tokens: Vec<String>,
    pub pseudo: Vec<PseudoLabel>,
    pub mmd: Vec<(Rect, usize)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepPlan {
    pub head: Head,
    pub mode: TaskMode,
    pub weights: LossWeights,
    pub mmd_config: MmdConfig,
    pub source: Vec<SourceItem>,
    pub target: Vec<TargetItem>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MmdUnits {
    /// Units the student currently predicts as foreground.
    Predicted,
    /// Every proposal (region head) or cell (cell head).
    All,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PlanOptions {
    pub eta: f64,
    pub kappa: f64,
    pub mmd_units: MmdUnits,
}

/// Forward passes of the student kept for reuse by [`evaluate_encoded`].
pub struct PlanForwards {
    pub source: Vec<EncoderForward>,
    pub target: Vec<EncoderForward>,
}

fn projected(ls: &LabeledSentence, mode: TaskMode) -> Result<LabeledSentence> {
    let mut ts: Vec<Triplet> = ls.triplets.iter().map(|t| mode.project(t)).collect();
    ts.sort();
    ts.dedup();
    LabeledSentence::new(ls.sentence.clone(), ts)
}

fn mmd_regions(rects: &[Rect], probs: &[ClassProbs], mode: TaskMode, units: MmdUnits) -> Vec<(Rect, usize)> {
    rects
        .iter()
        .zip(probs)
        .filter(|(_, p)| units == MmdUnits::All || p.argmax() != mode.invalid_class())
        .map(|(&r, _)| (r, 0))
        .collect()
}

fn mmd_cells(probs: &[ClassProbs], n: usize, units: MmdUnits) -> Vec<(Rect, usize)> {
    probs
        .iter()
        .enumerate()
        .filter(|(_, p)| units == MmdUnits::All || p.argmax() != CellLabel::None.index())
        .map(|(idx, p)| {
            let fg = cell_foreground();
            let group = argmax(&p.probs[fg]);
            (Rect::new(idx / n, idx % n, idx / n, idx % n), group)
        })
        .collect()
}

/// Runs the forward passes that fix the discrete structure of one step.
/// Target items are built only when `teacher` is given and a target-side
/// term is enabled.
#[allow(clippy::too_many_arguments)]
pub fn build_plan(
    student: &ModelParams,
    teacher: Option<&ModelParams>,
    source: &[&LabeledSentence],
    target_tokens: &[Vec<String>],
    head: Head,
    weights: LossWeights,
    mmd_config: MmdConfig,
    opts: PlanOptions,
) -> Result<(StepPlan, PlanForwards)> {
    let mode = student.mode();
    let mut items = Vec::with_capacity(source.len());
    let mut src_fwd = Vec::with_capacity(source.len());
    for ls in source {
        let gold = projected(ls, mode)?;
        match head {
            Head::Region => {
                let pass = region_pass(student, ls.tokens(), opts.kappa)?;
                let (corners, regions) = encode_region_labels(&gold)?;
                let rects: Vec<Rect> = pass.proposals.iter().map(|p| p.rect).collect();
                let (units, targets) = match_gold(&rects, &regions, mode, true);
                let mmd = if weights.mmd {
                    mmd_regions(&rects, &pass.probs, mode, opts.mmd_units)
                } else {
                    Vec::new()
                };
                items.push(SourceItem {
                    tokens: ls.tokens().to_vec(),
                    corners: Some(corners),
                    units,
                    targets,
                    mmd,
                });
                src_fwd.push(pass.encoder);
            }
            Head::Cell => {
                let pass = cell_pass(student, ls.tokens())?;
                let n = ls.len();
                let table = encode_cell_labels(&gold)?;
                let units = (0..n * n).map(|k| Rect::new(k / n, k % n, k / n, k % n)).collect();
                let targets = table.cells.iter().map(|c| c.index()).collect();
                let mmd = if weights.mmd {
                    mmd_cells(&pass.probs, n, opts.mmd_units)
                } else {
                    Vec::new()
                };
                items.push(SourceItem {
                    tokens: ls.tokens().to_vec(),
                    corners: None,
                    units,
                    targets,
                    mmd,
                });
                src_fwd.push(pass.encoder);
            }
        }
    }

    let mut target = Vec::new();
    let mut tgt_fwd = Vec::new();
    if let Some(teacher) = teacher.filter(|_| weights.uns || weights.mmd) {
        for tokens in target_tokens {
            match head {
                Head::Region => {
                    let pseudo = if weights.uns {
                        teacher_pseudo_label(teacher, tokens, opts.eta, opts.kappa)?
                    } else {
                        Vec::new()
                    };
                    let pass = region_pass(student, tokens, opts.kappa)?;
                    let rects: Vec<Rect> = pass.proposals.iter().map(|p| p.rect).collect();
                    let mmd = if weights.mmd {
                        mmd_regions(&rects, &pass.probs, mode, opts.mmd_units)
                    } else {
                        Vec::new()
                    };
                    target.push(TargetItem {
                        tokens: tokens.clone(),
                        pseudo,
                        mmd,
                    });
                    tgt_fwd.push(pass.encoder);
                }
                Head::Cell => {
                    let pseudo = if weights.uns {
                        teacher_pseudo_cells(teacher, tokens, opts.eta)?
                    } else {
                        Vec::new()
                    };
                    let pass = cell_pass(student, tokens)?;
                    let mmd = if weights.mmd {
                        mmd_cells(&pass.probs, tokens.len(), opts.mmd_units)
                    } else {
                        Vec::new()
                    };
                    target.push(TargetItem {
                        tokens: tokens.clone(),
                        pseudo,
                        mmd,
                    });
                    tgt_fwd.push(pass.encoder);
                }
            }
        }
    }
    Ok((
        StepPlan {
            head,
            mode,
            weights,
            mmd_config,
            source: items,
            target,
        },
        PlanForwards {
            source: src_fwd,
            target: tgt_fwd,
        },
    ))
}

/// Every non-smooth selection made while evaluating a plan: encoder relu
/// gates and table max-pools, RoI max-pools and MMD median pairs, in call
/// order. Replaying it turns the loss into a smooth function of the
/// parameters around the point where it was captured.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Frozen {
    encoders: Vec<ActivationPattern>,
    rois: Vec<Vec<(usize, usize)>>,
    mmd: Vec<MedianPairs>,
}

#[derive(Default)]
struct Tape<'a> {
    replay: Option<&'a Frozen>,
    rois: Vec<Vec<(usize, usize)>>,
    mmd: Vec<MedianPairs>,
}

impl Tape<'_> {
    fn roi(&mut self, tl: &FeatureMap, rect: Rect) -> RoiFeature {
        let roi = match self.replay {
            Some(f) => roi_represent_frozen(tl, rect, &f.rois[self.rois.len()]),
            None => roi_represent(tl, rect),
        };
        self.rois.push(roi.pool_arg().to_vec());
        roi
    }

    fn median(&self, k: usize) -> Option<&[MedianPairs]> {
        let at = self.mmd.len();
        self.replay.map(|f| &f.mmd[at..at + k])
    }
}

enum UnitFeature {
    Region(RoiFeature),
    Cell(Vec<f64>),
}

impl UnitFeature {
    fn forward(head: Head, tl: &FeatureMap, rect: Rect, tape: &mut Tape) -> Self {
        match head {
            Head::Region => UnitFeature::Region(tape.roi(tl, rect)),
            Head::Cell => UnitFeature::Cell(tl.cell(rect.a, rect.b).to_vec()),
        }
    }

    fn classify(&self, det: &DetectorParams) -> ClassProbs {
        match self {
            UnitFeature::Region(r) => classify_region(&r.r, det),
            UnitFeature::Cell(v) => classify_cell(v, det),
        }
    }

    /// Backward through the classifier and the feature extraction.
    fn backward(
        &self,
        rect: Rect,
        d_logits: &[f64],
        det: &DetectorParams,
        grads: &mut DetectorParams,
        d_tl: &mut FeatureMap,
    ) {
        match self {
            UnitFeature::Region(roi) => {
                let d_r = classify_backward(&roi.r, d_logits, det, grads);
                roi_backward(rect, roi, &d_r, d_tl);
            }
            UnitFeature::Cell(v) => {
                let d_t = classify_cell_backward(v, d_logits, det, grads);
                axpy(1.0, &d_t, d_tl.cell_mut(rect.a, rect.b));
            }
        }
    }
}

fn encode_plan(params: &ModelParams, plan: &StepPlan, frozen: Option<&Frozen>) -> Result<PlanForwards> {
    let tokens: Vec<&[String]> = plan
        .source
        .iter()
        .map(|s| s.tokens.as_slice())
        .chain(plan.target.iter().map(|t| t.tokens.as_slice()))
        .collect();
    if let Some(f) = frozen {
        if f.encoders.len() != tokens.len() {
            return Err(Error::Shape("frozen pattern does not fit this plan".into()));
        }
    }
    let mut encs = tokens
        .iter()
        .enumerate()
        .map(|(k, t)| match frozen {
            Some(f) => encode_frozen(t, &params.encoder, &f.encoders[k]),
            None => encode(t, &params.encoder),
        })
        .collect::<Result<Vec<_>>>()?;
    let target = encs.split_off(plan.source.len());
    Ok(PlanForwards { source: encs, target })
}

/// Loss and exact parameter gradient of a fixed plan.
pub fn evaluate(params: &ModelParams, plan: &StepPlan) -> Result<(LossBreakdown, ModelParams)> {
    let fwd = encode_plan(params, plan, None)?;
    Ok(evaluate_encoded(params, plan, &fwd))
}

/// Activation pattern of `params` on `plan`.
pub fn capture_pattern(params: &ModelParams, plan: &StepPlan) -> Result<Frozen> {
    let fwd = encode_plan(params, plan, None)?;
    let mut tape = Tape::default();
    evaluate_taped(params, plan, &fwd, &mut tape);
    Ok(Frozen {
        encoders: fwd.source.iter().chain(&fwd.target).map(EncoderForward::pattern).collect(),
        rois: tape.rois,
        mmd: tape.mmd,
    })
}

/// [`evaluate`] with every non-smooth selection replayed from `frozen`.
pub fn evaluate_frozen(
    params: &ModelParams,
    plan: &StepPlan,
    frozen: &Frozen,
) -> Result<(LossBreakdown, ModelParams)> {
    let fwd = encode_plan(params, plan, Some(frozen))?;
    let mut tape = Tape {
        replay: Some(frozen),
        ..Tape::default()
    };
    Ok(evaluate_taped(params, plan, &fwd, &mut tape))
}

/// [`evaluate`] with the encoder passes already computed for `params`.
pub fn evaluate_encoded(
    params: &ModelParams,
    plan: &StepPlan,
    fwd: &PlanForwards,
) -> (LossBreakdown, ModelParams) {
    evaluate_taped(params, plan, fwd, &mut Tape::default())
}

fn evaluate_taped(
    params: &ModelParams,
    plan: &StepPlan,
    fwd: &PlanForwards,
    tape: &mut Tape,
) -> (LossBreakdown, ModelParams) {
    let det = &params.detector;
    let w = plan.weights;
    let mut grads = params.zeros_like();
    let zeros = |encs: &[EncoderForward]| -> Vec<FeatureMap> {
        encs.iter()
            .map(|e| FeatureMap::zeros(e.output.n, e.output.d, e.output.layer_index))
            .collect()
    };
    let mut d_src = zeros(&fwd.source);
    let mut d_tgt = zeros(&fwd.target);

    let mut l_rpn = 0.0;
    if plan.head == Head::Region && !plan.source.is_empty() {
        let scale = 1.0 / plan.source.len() as f64;
        for (k, (item, enc)) in plan.source.iter().zip(&fwd.source).enumerate() {
            let corners = item.corners.as_ref().expect("region plan carries corner labels");
            let rpn = rpn_scores(&enc.output, det);
            let (l, mut gb, mut ge) =
                loss_rpn_grad(&rpn.pb, &rpn.pe, &corners.b, &corners.e).expect("plan shapes");
            l_rpn += scale * l;
            gb.iter_mut().chain(ge.iter_mut()).for_each(|g| *g *= scale);
            rpn_backward(&enc.output, &gb, &ge, det, &mut grads.detector, &mut d_src[k]);
        }
    }

    let mut units = Vec::new();
    let mut probs = Vec::new();
    let mut targets = Vec::new();
    for (k, (item, enc)) in plan.source.iter().zip(&fwd.source).enumerate() {
        for (&rect, &y) in item.units.iter().zip(&item.targets) {
            let f = UnitFeature::forward(plan.head, &enc.output, rect, tape);
            probs.push(f.classify(det).probs);
            targets.push(y);
            units.push((k, rect, f));
        }
    }
    let (l_rpc, d_logits) = loss_rpc_grad(&probs, &targets);
    for ((k, rect, f), dl) in units.iter().zip(&d_logits) {
        f.backward(*rect, dl, det, &mut grads.detector, &mut d_src[*k]);
    }

    let mut l_uns = 0.0;
    if w.uns {
        let mut units = Vec::new();
        let mut student = Vec::new();
        let mut teacher = Vec::new();
        for (k, (item, enc)) in plan.target.iter().zip(&fwd.target).enumerate() {
            for pl in &item.pseudo {
                let f = UnitFeature::forward(plan.head, &enc.output, pl.rect, tape);
                student.push(f.classify(det).probs);
                teacher.push(pl.probs.clone());
                units.push((k, pl.rect, f));
            }
        }
        let (l, d_p) = loss_uns_grad(&student, &teacher);
        l_uns = l;
        if w.alpha != 0.0 {
            for (((k, rect, f), p), dp) in units.iter().zip(&student).zip(&d_p) {
                let scaled: Vec<f64> = dp.iter().map(|g| w.alpha * g).collect();
                let dl = softmax_backward(p, &scaled);
                f.backward(*rect, &dl, det, &mut grads.detector, &mut d_tgt[*k]);
            }
        }
    }

    let (mut l_boundary, mut l_region) = (0.0, 0.0);
    if w.mmd {
        match plan.head {
            Head::Region => {
                let mut collect = |items: &mut dyn Iterator<Item = (&Vec<(Rect, usize)>, &EncoderForward)>| {
                    let mut feats = RegionFeatures::default();
                    let mut rois = Vec::new();
                    for (k, (mmd, enc)) in items.enumerate() {
                        for &(rect, _) in mmd {
                            let roi = tape.roi(&enc.output, rect);
                            feats.b.push(enc.output.cell(rect.a, rect.b).to_vec());
                            feats.e.push(enc.output.cell(rect.c, rect.d).to_vec());
                            feats.r.push(roi.r.clone());
                            rois.push((k, rect, roi));
                        }
                    }
                    (feats, rois)
                };
                let (fs, rois_s) = collect(&mut plan.source.iter().map(|s| &s.mmd).zip(&fwd.source));
                let (ft, rois_t) = collect(&mut plan.target.iter().map(|t| &t.mmd).zip(&fwd.target));
                let (g, used) = loss_mmd_region_level_grad_with(&fs, &ft, &plan.mmd_config, tape.median(3));
                tape.mmd.extend(used);
                l_boundary = g.l_boundary;
                l_region = g.l_region;
                if w.beta != 0.0 {
                    let push = |rois: &[(usize, Rect, RoiFeature)], d: &RegionFeatures, maps: &mut [FeatureMap]| {
                        for (i, (k, rect, roi)) in rois.iter().enumerate() {
                            let map = &mut maps[*k];
                            axpy(w.beta, &d.b[i], map.cell_mut(rect.a, rect.b));
                            axpy(w.beta, &d.e[i], map.cell_mut(rect.c, rect.d));
                            let dr: Vec<f64> = d.r[i].iter().map(|x| w.beta * x).collect();
                            roi_backward(*rect, roi, &dr, map);
                        }
                    };
                    push(&rois_s, &g.d_source, &mut d_src);
                    push(&rois_t, &g.d_target, &mut d_tgt);
                }
            }
            Head::Cell => {
                let groups = CellLabel::FOREGROUND.len();
                let collect = |items: &mut dyn Iterator<Item = (&Vec<(Rect, usize)>, &EncoderForward)>| {
                    let mut feats = vec![Vec::new(); groups];
                    let mut locs = vec![Vec::new(); groups];
                    for (k, (mmd, enc)) in items.enumerate() {
                        for &(rect, g) in mmd {
                            feats[g].push(enc.output.cell(rect.a, rect.b).to_vec());
                            locs[g].push((k, rect));
                        }
                    }
                    (feats, locs)
                };
                let (fs, ls) = collect(&mut plan.source.iter().map(|s| &s.mmd).zip(&fwd.source));
                let (ft, lt) = collect(&mut plan.target.iter().map(|t| &t.mmd).zip(&fwd.target));
                let (g, used) = loss_mmd_cell_level_grad_with(&fs, &ft, &plan.mmd_config, tape.median(groups));
                tape.mmd.extend(used);
                l_region = g.value;
                if w.beta != 0.0 {
                    let push = |locs: &[Vec<(usize, Rect)>], d: &[Vec<Vec<f64>>], maps: &mut [FeatureMap]| {
                        for (g, group) in locs.iter().enumerate() {
                            for (i, (k, rect)) in group.iter().enumerate() {
                                axpy(w.beta, &d[g][i], maps[*k].cell_mut(rect.a, rect.b));
                            }
                        }
                    };
                    push(&ls, &g.d_source, &mut d_src);
                    push(&lt, &g.d_target, &mut d_tgt);
                }
            }
        }
    }

    for (enc, d) in fwd.source.iter().zip(&d_src).chain(fwd.target.iter().zip(&d_tgt)) {
        enc.backward(&d.data, &params.encoder, &mut grads.encoder);
    }
    let losses = LossBreakdown::assemble(l_rpn, l_rpc, l_uns, l_boundary, l_region, w.alpha, w.beta);
    (losses, grads)
}

/// One optimizer step of the student; the teacher, when given, is read-only
/// until the EMA update that closes the step (per-step cadence only).
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    student: &mut ModelParams,
    opt: &mut Adam,
    teacher: Option<&mut ModelParams>,
    source: &[&LabeledSentence],
    target: &[&LabeledSentence],
    cfg: &TrainConfig,
    lexicon: &[String],
    aug_rng: &mut ChaCha8Rng,
) -> Result<LossBreakdown> {
    let weights = if teacher.is_some() {
        cfg.weights()
    } else {
        LossWeights {
            uns: false,
            mmd: false,
            ..cfg.weights()
        }
    };
    let target_tokens: Vec<Vec<String>> = if weights.uns || weights.mmd {
        target
            .iter()
            .map(|ls| {
                if cfg.ablations.no_aug {
                    Ok(ls.tokens().to_vec())
                } else {
                    augment(ls.tokens(), cfg.aug_rate, lexicon, aug_rng)
                }
            })
            .collect::<Result<_>>()?
    } else {
        Vec::new()
    };
    let opts = PlanOptions {
        eta: cfg.eta,
        kappa: cfg.kappa,
        mmd_units: MmdUnits::Predicted,
    };
    let (plan, fwd) = build_plan(
        student,
        teacher.as_deref(),
        source,
        &target_tokens,
        cfg.head(),
        weights,
        cfg.mmd,
        opts,
    )?;
    let (losses, grads) = evaluate_encoded(student, &plan, &fwd);
    if !losses.is_finite() {
        return Err(Error::Divergence {
            epoch: 0,
            step: opt.steps() as usize,
            detail: format!("{losses:?}"),
        });
    }
    opt.step(student, &grads);
    if let (Some(t), EmaCadence::Step) = (teacher, cfg.ema) {
        ema_update(t, student, cfg.lambda)?;
    }
    Ok(losses)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub step: usize,
    pub losses: LossBreakdown,
    pub dev_f1: f64,
    pub test_f1: f64,
}

pub const METRIC_HEADER: &str = "epoch,step,l_rpn,l_rpc,l_sup,l_uns,l_mmd,total,dev_f1,test_f1";

impl EpochRecord {
    /// One metric-log line; floats use their shortest exact representation.
    pub fn csv_row(&self) -> String {
        let l = &self.losses;
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.epoch, self.step, l.l_rpn, l.l_rpc, l.l_sup, l.l_uns, l.l_mmd, l.total, self.dev_f1, self.test_f1
        )
    }
}

pub fn metric_log(history: &[EpochRecord]) -> String {
    let mut out = String::from(METRIC_HEADER);
    out.push('\n');
    for r in history {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

/// The four splits a run consumes.
#[derive(Clone, Copy, Debug)]
pub struct Datasets<'a> {
    pub source_train: &'a [LabeledSentence],
    pub source_dev: &'a [LabeledSentence],
    pub target_unlabeled: &'a [LabeledSentence],
    pub target_test: &'a [LabeledSentence],
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitOutput {
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub dev_f1: f64,
    pub test_f1: f64,
}

/// Sentence F1 of a model on a labeled set, golds projected to the model's mode.
pub fn score(params: &ModelParams, data: &[LabeledSentence], head: Head, kappa: f64) -> Result<f64> {
    let mode = params.mode();
    let mut preds = Vec::with_capacity(data.len());
    let mut golds = Vec::with_capacity(data.len());
    for ls in data {
        preds.push(predict(params, ls.tokens(), head, kappa)?);
        golds.push(projected(ls, mode)?.triplets);
    }
    Ok(sentence_f1(&preds, &golds)?.f1)
}

struct Selection {
    best: ModelParams,
    best_teacher: ModelParams,
    best_epoch: usize,
    best_dev: f64,
    best_test: f64,
    history: Vec<EpochRecord>,
}

impl Selection {
    fn new() -> Option<Self> {
        None
    }
}

fn record(
    sel: &mut Option<Selection>,
    rec: EpochRecord,
    student: &ModelParams,
    teacher: &ModelParams,
) {
    match sel {
        None => {
            *sel = Some(Selection {
                best: student.clone(),
                best_teacher: teacher.clone(),
                best_epoch: rec.epoch,
                best_dev: rec.dev_f1,
                best_test: rec.test_f1,
                history: vec![rec],
            })
        }
        Some(s) => {
            if rec.dev_f1 > s.best_dev {
                s.best = student.clone();
                s.best_teacher = teacher.clone();
                s.best_epoch = rec.epoch;
                s.best_dev = rec.dev_f1;
                s.best_test = rec.test_f1;
            }
            s.history.push(rec);
        }
    }
}

fn batches(order: &[usize], size: usize) -> Vec<Vec<usize>> {
    order.chunks(size).map(<[usize]>::to_vec).collect()
}

/// Endless shuffled walk over target indices, reshuffled on each pass.
struct TargetCycle {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl TargetCycle {
    fn new(len: usize, rng: ChaCha8Rng) -> Self {
        TargetCycle {
            order: (0..len).collect(),
            pos: len,
            rng,
        }
    }

    fn take(&mut self, k: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(k);
        if self.order.is_empty() {
            return out;
        }
        while out.len() < k {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Supervised training of `params` on the source set; returns the
/// best-on-dev parameters and the per-epoch log.
fn supervised_fit(
    params: ModelParams,
    data: &Datasets,
    cfg: &TrainConfig,
    shuffle: ChaCha8Rng,
    epochs: usize,
) -> Result<Selection> {
    let head = cfg.head();
    let mut params = params;
    let mut opt = Adam::new(&params, cfg.lr);
    let mut rng = shuffle;
    let mut unused = stream_rng(cfg.seed, Stream::Augment);
    let mut sel = Selection::new();
    let eval = |p: &ModelParams| -> Result<(f64, f64)> {
        Ok((
            score(p, data.source_dev, head, cfg.kappa)?,
            score(p, data.target_test, head, cfg.kappa)?,
        ))
    };
    let (dev, test) = eval(&params)?;
    record(
        &mut sel,
        EpochRecord { epoch: 0, step: 0, losses: LossBreakdown::default(), dev_f1: dev, test_f1: test },
        &params,
        &params,
    );
    let mut order: Vec<usize> = (0..data.source_train.len()).collect();
    for epoch in 1..=epochs {
        order.shuffle(&mut rng);
        let mut sum = LossBreakdown::default();
        let bs = batches(&order, cfg.batch);
        for b in &bs {
            let src: Vec<&LabeledSentence> = b.iter().map(|&i| &data.source_train[i]).collect();
            let l = train_step(&mut params, &mut opt, None, &src, &[], cfg, &[], &mut unused)
                .map_err(|e| with_epoch(e, epoch))?;
            sum.accumulate(&l);
        }
        let (dev, test) = eval(&params)?;
        let rec = EpochRecord {
            epoch,
            step: opt.steps() as usize,
            losses: sum.scaled(1.0 / bs.len() as f64),
            dev_f1: dev,
            test_f1: test,
        };
        record(&mut sel, rec, &params, &params);
    }
    Ok(sel.expect("epoch 0 recorded"))
}

fn with_epoch(e: Error, epoch: usize) -> Error {
    match e {
        Error::Divergence { step, detail, .. } => Error::Divergence { epoch, step, detail },
        other => other,
    }
}

/// Teacher trained with the supervised loss only, from its own init stream.
pub fn pretrain_teacher(data: &Datasets, cfg: &TrainConfig) -> Result<ModelParams> {
    let init = ModelParams::init(cfg.encoder, cfg.mode, &mut stream_rng(cfg.seed, Stream::TeacherInit))?;
    let sel = supervised_fit(init, data, cfg, stream_rng(cfg.seed, Stream::PretrainShuffle), cfg.epochs)?;
    Ok(sel.best)
}

fn check_data(data: &Datasets, cfg: &TrainConfig) -> Result<()> {
    if data.source_train.is_empty() {
        return Err(Error::EmptyDataset("source training set".into()));
    }
    if data.source_dev.is_empty() {
        return Err(Error::EmptyDataset("source dev set".into()));
    }
    if (cfg.target_active() || cfg.variant == Variant::SelfTrain) && data.target_unlabeled.is_empty() {
        return Err(Error::EmptyDataset("target unlabeled set".into()));
    }
    Ok(())
}

/// Full run: pretraining (where applicable), adaptation epochs, dev-based
/// model selection and target-test scoring.
pub fn fit(data: &Datasets, cfg: &TrainConfig) -> Result<FitOutput> {
    cfg.validate()?;
    check_data(data, cfg)?;
    let sel = match cfg.variant {
        Variant::SourceOnly => {
            let init = ModelParams::init(cfg.encoder, cfg.mode, &mut stream_rng(cfg.seed, Stream::StudentInit))?;
            supervised_fit(init, data, cfg, stream_rng(cfg.seed, Stream::SourceShuffle), cfg.epochs)?
        }
        Variant::Tfmt | Variant::CTfmt => mean_teacher_fit(data, cfg)?,
        Variant::SelfTrain => self_train_fit(data, cfg)?,
    };
    let checkpoint = Checkpoint::new(
        cfg.clone(),
        sel.best.clone(),
        sel.best_teacher.clone(),
        sel.best_epoch,
        sel.history.clone(),
    );
    Ok(FitOutput {
        checkpoint,
        history: sel.history,
        best_epoch: sel.best_epoch,
        dev_f1: sel.best_dev,
        test_f1: sel.best_test,
    })
}

fn mean_teacher_fit(data: &Datasets, cfg: &TrainConfig) -> Result<Selection> {
    let head = cfg.head();
    let mut teacher = pretrain_teacher(data, cfg)?;
    let mut student = ModelParams::init(cfg.encoder, cfg.mode, &mut stream_rng(cfg.seed, Stream::StudentInit))?;
    let mut opt = Adam::new(&student, cfg.lr);
    let mut src_rng = stream_rng(cfg.seed, Stream::SourceShuffle);
    let mut aug_rng = stream_rng(cfg.seed, Stream::Augment);
    let mut cycle = TargetCycle::new(data.target_unlabeled.len(), stream_rng(cfg.seed, Stream::TargetShuffle));
    let lexicon = corpus_lexicon(data.target_unlabeled);
    let active = cfg.target_active();
    let eval = |p: &ModelParams| -> Result<(f64, f64)> {
        Ok((
            score(p, data.source_dev, head, cfg.kappa)?,
            score(p, data.target_test, head, cfg.kappa)?,
        ))
    };
    let mut sel = Selection::new();
    let (dev, test) = eval(&student)?;
    record(
        &mut sel,
        EpochRecord { epoch: 0, step: 0, losses: LossBreakdown::default(), dev_f1: dev, test_f1: test },
        &student,
        &teacher,
    );
    let mut order: Vec<usize> = (0..data.source_train.len()).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut src_rng);
        let bs = batches(&order, cfg.batch);
        let mut sum = LossBreakdown::default();
        for b in &bs {
            let src: Vec<&LabeledSentence> = b.iter().map(|&i| &data.source_train[i]).collect();
            let tgt: Vec<&LabeledSentence> = if active {
                cycle.take(cfg.batch).into_iter().map(|i| &data.target_unlabeled[i]).collect()
            } else {
                Vec::new()
            };
            let l = train_step(
                &mut student,
                &mut opt,
                Some(&mut teacher),
                &src,
                &tgt,
                cfg,
                &lexicon,
                &mut aug_rng,
            )
            .map_err(|e| with_epoch(e, epoch))?;
            sum.accumulate(&l);
        }
        if cfg.ema == EmaCadence::Epoch {
            ema_update(&mut teacher, &student, cfg.lambda)?;
        }
        let (dev, test) = eval(&student)?;
        let rec = EpochRecord {
            epoch,
            step: opt.steps() as usize,
            losses: sum.scaled(1.0 / bs.len() as f64),
            dev_f1: dev,
            test_f1: test,
        };
        record(&mut sel, rec, &student, &teacher);
    }
    Ok(sel.expect("epoch 0 recorded"))
}

/// Confident region pseudo labels of `model` turned into labeled sentences.
pub fn pseudo_label_corpus(
    model: &ModelParams,
    data: &[LabeledSentence],
    eta: f64,
    kappa: f64,
) -> Result<Vec<LabeledSentence>> {
    let mode = model.mode();
    let mut out = Vec::new();
    for ls in data {
        let mut ts: Vec<Triplet> = teacher_pseudo_label(model, ls.tokens(), eta, kappa)?
            .iter()
            .map(|p| p.triplet(mode))
            .collect();
        ts.sort();
        ts.dedup();
        if !ts.is_empty() {
            out.push(LabeledSentence::new(ls.sentence.clone(), ts)?);
        }
    }
    Ok(out)
}

fn self_train_fit(data: &Datasets, cfg: &TrainConfig) -> Result<Selection> {
    let head = cfg.head();
    let mut model = pretrain_teacher(data, cfg)?;
    let mut opt = Adam::new(&model, cfg.lr);
    let mut rng = stream_rng(cfg.seed, Stream::SourceShuffle);
    let mut unused = stream_rng(cfg.seed, Stream::Augment);
    let eval = |p: &ModelParams| -> Result<(f64, f64)> {
        Ok((
            score(p, data.source_dev, head, cfg.kappa)?,
            score(p, data.target_test, head, cfg.kappa)?,
        ))
    };
    let mut sel = Selection::new();
    let (dev, test) = eval(&model)?;
    record(
        &mut sel,
        EpochRecord { epoch: 0, step: 0, losses: LossBreakdown::default(), dev_f1: dev, test_f1: test },
        &model,
        &model,
    );
    for epoch in 1..=cfg.epochs {
        let mut pool: Vec<LabeledSentence> = data.source_train.to_vec();
        pool.extend(pseudo_label_corpus(&model, data.target_unlabeled, cfg.eta, cfg.kappa)?);
        let mut order: Vec<usize> = (0..pool.len()).collect();
        order.shuffle(&mut rng);
        let bs = batches(&order, cfg.batch);
        let mut sum = LossBreakdown::default();
        for b in &bs {
            let src: Vec<&LabeledSentence> = b.iter().map(|&i| &pool[i]).collect();
            let l = train_step(&mut model, &mut opt, None, &src, &[], cfg, &[], &mut unused)
                .map_err(|e| with_epoch(e, epoch))?;
            sum.accumulate(&l);
        }
        let (dev, test) = eval(&model)?;
        let rec = EpochRecord {
            epoch,
            step: opt.steps() as usize,
            losses: sum.scaled(1.0 / bs.len() as f64),
            dev_f1: dev,
            test_f1: test,
        };
        record(&mut sel, rec, &model, &model);
    }
    Ok(sel.expect("epoch 0 recorded"))
}
