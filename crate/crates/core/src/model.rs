//! Full model (encoder + detector), inference passes, EMA and checkpoints.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Triplet;
use crate::detector::{
    candidate_sets, classify_cell, classify_region, decode_triplets, propose_regions, roi_represent,
    rpn_scores, ClassProbs, DetectorParams, RegionProposal, RoiFeature, RpnScores, TaskMode,
};
use crate::encoder::{encode, EncoderConfig, EncoderForward, EncoderParams, ENCODER_KIND};
use crate::error::{Error, Result};
use crate::tagging::{decode_cell_table, CellLabel, CellTable};
use crate::tensor::{argmax, Tensor};
use crate::trainer::{EpochRecord, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub encoder: EncoderParams,
    pub detector: DetectorParams,
}

impl ModelParams {
    pub fn init(config: EncoderConfig, mode: TaskMode, rng: &mut impl Rng) -> Result<Self> {
        let encoder = EncoderParams::init(config, rng)?;
        let detector = DetectorParams::init(config.d, mode, rng);
        Ok(ModelParams { encoder, detector })
    }

    pub fn mode(&self) -> TaskMode {
        self.detector.mode
    }

    pub fn zeros_like(&self) -> Self {
        ModelParams {
            encoder: self.encoder.zeros_like(),
            detector: self.detector.zeros_like(),
        }
    }

    /// Every parameter group, encoder first, in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = self
            .encoder
            .named_tensors()
            .into_iter()
            .map(|(n, t)| (format!("encoder.{n}"), t))
            .collect();
        out.extend(
            self.detector
                .named_tensors()
                .into_iter()
                .map(|(n, t)| (format!("detector.{n}"), t)),
        );
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.encoder.tensors_mut();
        out.extend(self.detector.tensors_mut());
        out
    }

    pub fn num_params(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.named_tensors().iter().all(|(_, t)| t.is_finite())
    }

    pub fn check_same_shape(&self, other: &ModelParams) -> Result<()> {
        let a = self.named_tensors();
        let b = other.named_tensors();
        if a.len() != b.len() {
            return Err(Error::Shape(format!(
                "{} vs {} parameter groups",
                a.len(),
                b.len()
            )));
        }
        for ((name, x), (_, y)) in a.iter().zip(&b) {
            if !x.same_shape(y) {
                return Err(Error::Shape(format!(
                    "{name}: {:?} vs {:?}",
                    x.shape, y.shape
                )));
            }
        }
        Ok(())
    }

    /// `‖self − other‖∞` over all parameters.
    pub fn max_abs_diff(&self, other: &ModelParams) -> Result<f64> {
        self.check_same_shape(other)?;
        Ok(self
            .named_tensors()
            .iter()
            .zip(other.named_tensors())
            .flat_map(|((_, x), (_, y))| {
                x.data
                    .iter()
                    .zip(&y.data)
                    .map(|(a, b)| (a - b).abs())
                    .collect::<Vec<_>>()
            })
            .fold(0.0, f64::max))
    }

    /// `self += s · other`.
    pub fn add_scaled(&mut self, s: f64, other: &ModelParams) {
        let src: Vec<Vec<f64>> = other
            .named_tensors()
            .into_iter()
            .map(|(_, t)| t.data.clone())
            .collect();
        for (t, o) in self.tensors_mut().into_iter().zip(src) {
            for (x, y) in t.data.iter_mut().zip(o) {
                *x += s * y;
            }
        }
    }

    /// Order-sensitive digest of every parameter bit pattern.
    pub fn fingerprint(&self) -> u64 {
        use std::hash::Hasher;
        let mut h = fnv::FnvHasher::default();
        for (name, t) in self.named_tensors() {
            h.write(name.as_bytes());
            for x in &t.data {
                h.write_u64(x.to_bits());
            }
        }
        h.finish()
    }
}

/// `Θ_t ← λ Θ_t + (1 − λ) Θ_s`, elementwise.
pub fn ema_update(teacher: &mut ModelParams, student: &ModelParams, lambda: f64) -> Result<()> {
    teacher.check_same_shape(student)?;
    let src: Vec<&Tensor> = student.named_tensors().into_iter().map(|(_, t)| t).collect();
    for (t, s) in teacher.tensors_mut().into_iter().zip(src) {
        for (x, y) in t.data.iter_mut().zip(&s.data) {
            *x = lambda * *x + (1.0 - lambda) * y;
        }
    }
    Ok(())
}

/// Region-level forward pass of one sentence.
#[derive(Clone, Debug)]
pub struct RegionPass {
    pub encoder: EncoderForward,
    pub rpn: RpnScores,
    pub proposals: Vec<RegionProposal>,
    pub rois: Vec<RoiFeature>,
    pub probs: Vec<ClassProbs>,
}

impl RegionPass {
    pub fn triplets(&self, mode: TaskMode) -> Vec<Triplet> {
        decode_triplets(&self.proposals, &self.probs, mode)
    }
}

pub fn region_pass(params: &ModelParams, tokens: &[String], kappa: f64) -> Result<RegionPass> {
    let encoder = encode(tokens, &params.encoder)?;
    let rpn = rpn_scores(&encoder.output, &params.detector);
    let cands = candidate_sets(&rpn, kappa);
    let proposals = propose_regions(&cands.b, &cands.e);
    let rois: Vec<RoiFeature> = proposals
        .iter()
        .map(|p| roi_represent(&encoder.output, p.rect))
        .collect();
    let probs = rois
        .iter()
        .map(|r| classify_region(&r.r, &params.detector))
        .collect();
    Ok(RegionPass {
        encoder,
        rpn,
        proposals,
        rois,
        probs,
    })
}

/// Cell-level forward pass: a class distribution for every table cell.
#[derive(Clone, Debug)]
pub struct CellPass {
    pub encoder: EncoderForward,
    /// Row-major `n × n`.
    pub probs: Vec<ClassProbs>,
}

impl CellPass {
    pub fn table(&self) -> CellTable {
        let n = self.encoder.output.n;
        let mut t = CellTable::empty(n);
        for (idx, p) in self.probs.iter().enumerate() {
            let label = CellLabel::from_index(argmax(&p.probs)).unwrap_or(CellLabel::None);
            t.set(idx / n, idx % n, label);
        }
        t
    }

    pub fn triplets(&self, mode: TaskMode) -> Vec<Triplet> {
        let mut out: Vec<Triplet> = decode_cell_table(&self.table())
            .iter()
            .map(|t| mode.project(t))
            .collect();
        out.sort();
        out.dedup();
        out
    }
}

pub fn cell_pass(params: &ModelParams, tokens: &[String]) -> Result<CellPass> {
    let encoder = encode(tokens, &params.encoder)?;
    let n = encoder.output.n;
    let mut probs = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            probs.push(classify_cell(encoder.output.cell(i, j), &params.detector));
        }
    }
    Ok(CellPass { encoder, probs })
}

/// Which decoding head produces predictions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Head {
    Region,
    Cell,
}

pub fn predict(params: &ModelParams, tokens: &[String], head: Head, kappa: f64) -> Result<Vec<Triplet>> {
    let mode = params.mode();
    Ok(match head {
        Head::Region => region_pass(params, tokens, kappa)?.triplets(mode),
        Head::Cell => cell_pass(params, tokens)?.triplets(mode),
    })
}

pub const CHECKPOINT_VERSION: u32 = 1;

/// Everything needed to resume evaluation of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub encoder_kind: String,
    pub config: TrainConfig,
    pub student: ModelParams,
    pub teacher: ModelParams,
    /// Epoch at which the stored student was selected.
    pub epoch: usize,
    pub history: Vec<EpochRecord>,
}

impl Checkpoint {
    pub fn new(
        config: TrainConfig,
        student: ModelParams,
        teacher: ModelParams,
        epoch: usize,
        history: Vec<EpochRecord>,
    ) -> Self {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            encoder_kind: ENCODER_KIND.to_string(),
            config,
            student,
            teacher,
            epoch,
            history,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Checkpoint =
            serde_json::from_str(text).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported version {} (expected {CHECKPOINT_VERSION})",
                ck.version
            )));
        }
        if ck.encoder_kind != ENCODER_KIND {
            return Err(Error::Checkpoint(format!(
                "unknown encoder kind {:?}",
                ck.encoder_kind
            )));
        }
        ck.student.check_same_shape(&ck.teacher)?;
        for (name, t) in ck.student.named_tensors() {
            if t.len() != t.shape.iter().product::<usize>() {
                return Err(Error::Checkpoint(format!("{name}: data does not match shape")));
            }
        }
        Ok(ck)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_json(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn micro(seed: u64) -> ModelParams {
        let cfg = EncoderConfig {
            d: 4,
            layers: 1,
            vocab_buckets: 16,
            window: 1,
            max_n: 6,
        };
        ModelParams::init(cfg, TaskMode::Aste, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn ema_arithmetic_and_endpoints() {
        let mut t = micro(0);
        let mut s = micro(1);
        t.tensors_mut().into_iter().for_each(|x| x.fill(1.0));
        s.tensors_mut().into_iter().for_each(|x| x.fill(0.5));
        let mut a = t.clone();
        ema_update(&mut a, &s, 0.6).unwrap();
        assert!(a.named_tensors().iter().all(|(_, x)| x.data.iter().all(|&v| (v - 0.8).abs() < 1e-15)));
        let mut b = t.clone();
        ema_update(&mut b, &s, 1.0).unwrap();
        assert_eq!(b, t);
        let mut c = t.clone();
        ema_update(&mut c, &s, 0.0).unwrap();
        assert_eq!(c, s);
    }

    #[test]
    fn ema_rejects_shape_mismatch() {
        let mut t = micro(0);
        let mut s = micro(1);
        s.encoder.conv.pop();
        assert!(ema_update(&mut t, &s, 0.6).is_err());
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let m = micro(3);
        let ck = Checkpoint::new(TrainConfig::default(), m.clone(), micro(4), 2, Vec::new());
        let back = Checkpoint::from_json(&ck.to_json().unwrap()).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.student.fingerprint(), m.fingerprint());
    }

    #[test]
    fn predictions_are_well_formed() {
        let m = micro(5);
        let toks: Vec<String> = "the soup is good .".split(' ').map(String::from).collect();
        for head in [Head::Region, Head::Cell] {
            for t in predict(&m, &toks, head, 0.3).unwrap() {
                assert!(t.aspect.fits(5) && t.opinion.fits(5));
            }
        }
    }
}
