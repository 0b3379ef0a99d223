//! Finite-difference verification of the assembled training gradient on a
//! micro model.

use serde::{Deserialize, Serialize};

use crate::corpus::{LabeledSentence, Polarity, Sentence, Span, Triplet};
use crate::detector::TaskMode;
use crate::encoder::EncoderConfig;
use crate::error::Result;
use crate::losses::{LossBreakdown, MmdConfig};
use crate::model::{Head, ModelParams};
use crate::trainer::{
    build_plan, capture_pattern, evaluate, evaluate_frozen, stream_rng, Frozen, LossWeights, MmdUnits,
    PlanOptions, StepPlan, Stream,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckConfig {
    pub eps: f64,
    pub tol: f64,
    pub seed: u64,
    pub d: usize,
    pub layers: usize,
    pub alpha: f64,
    pub beta: f64,
    pub kappa: f64,
    pub mode: TaskMode,
    pub head: Head,
    /// Replay the activation pattern of the base point under perturbation,
    /// so that relu, max-pool and median switches inside ±eps do not count
    /// as gradient error.
    pub freeze: bool,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            eps: 1e-3,
            tol: 1e-4,
            seed: 0,
            d: 8,
            layers: 2,
            alpha: 1.0,
            beta: 1.0,
            kappa: 0.6,
            mode: TaskMode::Aste,
            head: Head::Region,
            freeze: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupReport {
    pub name: String,
    pub numel: usize,
    pub grad_norm: f64,
    /// `‖analytic − numeric‖∞ / max(‖analytic‖∞, ‖numeric‖∞, floor)`.
    pub rel_err: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub losses: LossBreakdown,
    pub groups: Vec<GroupReport>,
    pub max_rel_err: f64,
    pub tol: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tol
    }
}

/// Denominator floor so that all-zero groups compare as exact.
const FLOOR: f64 = 1e-8;

fn toks(s: &str) -> Vec<String> {
    s.split(' ').map(String::from).collect()
}

type Fixture = ((usize, usize), (usize, usize), Polarity);

fn sentence(text: &str, triplets: &[Fixture]) -> LabeledSentence {
    let ts = triplets
        .iter()
        .map(|&(a, o, p)| Triplet::new(Span::new(a.0, a.1), Span::new(o.0, o.1), p))
        .collect();
    LabeledSentence::new(Sentence::new(toks(text)).expect("fixture"), ts).expect("fixture")
}

/// Labeled source sentences and unlabeled target sentences, all of length ≤ 5.
pub fn micro_fixture() -> (Vec<LabeledSentence>, Vec<Vec<String>>) {
    let source = vec![
        sentence("the soup is good .", &[((1, 1), (3, 3), Polarity::Pos)]),
        sentence(
            "fish bland but wine nice",
            &[((0, 0), (1, 1), Polarity::Neg), ((3, 3), (4, 4), Polarity::Pos)],
        ),
        sentence("the hot tea was ok", &[((1, 2), (4, 4), Polarity::Neu)]),
    ];
    let target = vec![toks("the screen is bright ."), toks("keys feel cheap"), toks("i found battery weak .")];
    (source, target)
}

/// Student/teacher pair and a plan with every loss term populated: all
/// teacher proposals are retained and every unit feeds the MMD term.
pub fn micro_problem(cfg: &GradcheckConfig) -> Result<(ModelParams, StepPlan)> {
    let enc = EncoderConfig {
        d: cfg.d,
        layers: cfg.layers,
        vocab_buckets: 64,
        window: 1,
        max_n: 8,
    };
    let student = ModelParams::init(enc, cfg.mode, &mut stream_rng(cfg.seed, Stream::StudentInit))?;
    let teacher = ModelParams::init(enc, cfg.mode, &mut stream_rng(cfg.seed, Stream::TeacherInit))?;
    let (source, target) = micro_fixture();
    let src: Vec<&LabeledSentence> = source.iter().collect();
    let weights = LossWeights {
        alpha: cfg.alpha,
        beta: cfg.beta,
        uns: true,
        mmd: true,
    };
    let opts = PlanOptions {
        eta: 0.0,
        kappa: cfg.kappa,
        mmd_units: MmdUnits::All,
    };
    let (plan, _) = build_plan(&student, Some(&teacher), &src, &target, cfg.head, weights, MmdConfig::default(), opts)?;
    Ok((student, plan))
}

/// Compares `analytic` against central differences of the plan's total
/// loss, optionally with the activation pattern held at `params`.
pub fn compare(
    params: &ModelParams,
    plan: &StepPlan,
    analytic: &ModelParams,
    eps: f64,
    tol: f64,
    freeze: bool,
) -> Result<GradcheckReport> {
    let frozen = if freeze { Some(capture_pattern(params, plan)?) } else { None };
    let total = |p: &ModelParams, f: Option<&Frozen>| -> Result<LossBreakdown> {
        Ok(match f {
            Some(f) => evaluate_frozen(p, plan, f)?.0,
            None => evaluate(p, plan)?.0,
        })
    };
    let losses = total(params, frozen.as_ref())?;
    let names: Vec<(String, usize)> = params
        .named_tensors()
        .iter()
        .map(|(n, t)| (n.clone(), t.len()))
        .collect();
    let grads: Vec<Vec<f64>> = analytic
        .named_tensors()
        .iter()
        .map(|(_, t)| t.data.clone())
        .collect();
    let mut probe = params.clone();
    let mut groups = Vec::with_capacity(names.len());
    for (g, (name, numel)) in names.into_iter().enumerate() {
        let mut max_diff = 0.0f64;
        let mut max_a = 0.0f64;
        let mut max_n = 0.0f64;
        for i in 0..numel {
            let orig = probe.tensors_mut()[g].data[i];
            probe.tensors_mut()[g].data[i] = orig + eps;
            let up = total(&probe, frozen.as_ref())?.total;
            probe.tensors_mut()[g].data[i] = orig - eps;
            let down = total(&probe, frozen.as_ref())?.total;
            probe.tensors_mut()[g].data[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = grads[g][i];
            max_diff = max_diff.max((a - numeric).abs());
            max_a = max_a.max(a.abs());
            max_n = max_n.max(numeric.abs());
        }
        groups.push(GroupReport {
            name,
            numel,
            grad_norm: max_a,
            rel_err: max_diff / max_a.max(max_n).max(FLOOR),
        });
    }
    let max_rel_err = groups.iter().map(|g| g.rel_err).fold(0.0, f64::max);
    Ok(GradcheckReport {
        losses,
        groups,
        max_rel_err,
        tol,
    })
}

pub fn gradcheck(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    let (params, plan) = micro_problem(cfg)?;
    let (_, grads) = evaluate(&params, &plan)?;
    compare(&params, &plan, &grads, cfg.eps, cfg.tol, cfg.freeze)
}
