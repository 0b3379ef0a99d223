//! Training objectives and their gradients.
//!
//! Every `*_grad` function returns the loss value together with the gradient
//! with respect to the quantity the model produced directly (logits, softmax
//! outputs or feature vectors); the trainer chains these into the network.

use serde::{Deserialize, Serialize};

use crate::detector::TaskMode;
use crate::error::{Error, Result};
use crate::tagging::{GoldRegion, Rect};
use crate::tensor::sq_dist;

/// Probabilities are clamped to this floor before taking logs.
pub const LOG_CLAMP: f64 = 1e-12;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_rpn: f64,
    pub l_rpc: f64,
    pub l_sup: f64,
    pub l_uns: f64,
    pub l_mmd_boundary: f64,
    pub l_mmd_region: f64,
    pub l_mmd: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn assemble(
        l_rpn: f64,
        l_rpc: f64,
        l_uns: f64,
        l_mmd_boundary: f64,
        l_mmd_region: f64,
        alpha: f64,
        beta: f64,
    ) -> Self {
        let l_sup = l_rpn + l_rpc;
        let l_mmd = l_mmd_boundary + l_mmd_region;
        LossBreakdown {
            l_rpn,
            l_rpc,
            l_sup,
            l_uns,
            l_mmd_boundary,
            l_mmd_region,
            l_mmd,
            total: total_loss(l_sup, l_uns, l_mmd, alpha, beta),
        }
    }

    pub fn is_finite(&self) -> bool {
        [
            self.l_rpn,
            self.l_rpc,
            self.l_sup,
            self.l_uns,
            self.l_mmd,
            self.total,
        ]
        .iter()
        .all(|x| x.is_finite())
    }

    /// Running sum, used for per-epoch averages.
    pub fn accumulate(&mut self, other: &LossBreakdown) {
        self.l_rpn += other.l_rpn;
        self.l_rpc += other.l_rpc;
        self.l_sup += other.l_sup;
        self.l_uns += other.l_uns;
        self.l_mmd_boundary += other.l_mmd_boundary;
        self.l_mmd_region += other.l_mmd_region;
        self.l_mmd += other.l_mmd;
        self.total += other.total;
    }

    pub fn scaled(&self, s: f64) -> Self {
        LossBreakdown {
            l_rpn: self.l_rpn * s,
            l_rpc: self.l_rpc * s,
            l_sup: self.l_sup * s,
            l_uns: self.l_uns * s,
            l_mmd_boundary: self.l_mmd_boundary * s,
            l_mmd_region: self.l_mmd_region * s,
            l_mmd: self.l_mmd * s,
            total: self.total * s,
        }
    }
}

pub fn total_loss(l_sup: f64, l_uns: f64, l_mmd: f64, alpha: f64, beta: f64) -> f64 {
    l_sup + alpha * l_uns + beta * l_mmd
}

fn bce_term(p: f64, y: u8) -> f64 {
    if y == 1 {
        -p.max(LOG_CLAMP).ln()
    } else {
        -(1.0 - p).max(LOG_CLAMP).ln()
    }
}

/// `∂ bce / ∂ logit` for a sigmoid output; zero where the clamp is active.
fn bce_logit_grad(p: f64, y: u8) -> f64 {
    if y == 1 {
        if p > LOG_CLAMP {
            p - 1.0
        } else {
            0.0
        }
    } else if 1.0 - p > LOG_CLAMP {
        p
    } else {
        0.0
    }
}

/// Mean binary cross-entropy over all `2n²` corner cells.
pub fn loss_rpn(pb: &[f64], pe: &[f64], yb: &[u8], ye: &[u8]) -> Result<f64> {
    Ok(loss_rpn_grad(pb, pe, yb, ye)?.0)
}

/// Value plus gradients with respect to the B and E logits.
pub fn loss_rpn_grad(
    pb: &[f64],
    pe: &[f64],
    yb: &[u8],
    ye: &[u8],
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    if pb.len() != yb.len() || pe.len() != ye.len() || pb.len() != pe.len() || pb.is_empty() {
        return Err(Error::Shape(format!(
            "corner maps {}/{} vs labels {}/{}",
            pb.len(),
            pe.len(),
            yb.len(),
            ye.len()
        )));
    }
    let count = (pb.len() + pe.len()) as f64;
    let mut total = 0.0;
    let mut gb = Vec::with_capacity(pb.len());
    let mut ge = Vec::with_capacity(pe.len());
    for (&p, &y) in pb.iter().zip(yb) {
        total += bce_term(p, y);
        gb.push(bce_logit_grad(p, y) / count);
    }
    for (&p, &y) in pe.iter().zip(ye) {
        total += bce_term(p, y);
        ge.push(bce_logit_grad(p, y) / count);
    }
    Ok((total / count, gb, ge))
}

/// Mean categorical cross-entropy over `m` proposals; 0 when `m = 0`.
pub fn loss_rpc(probs: &[Vec<f64>], gold: &[usize]) -> f64 {
    loss_rpc_grad(probs, gold).0
}

/// Value plus gradients with respect to each proposal's logits.
pub fn loss_rpc_grad(probs: &[Vec<f64>], gold: &[usize]) -> (f64, Vec<Vec<f64>>) {
    assert_eq!(probs.len(), gold.len(), "proposal/target misalignment");
    if probs.is_empty() {
        return (0.0, Vec::new());
    }
    let m = probs.len() as f64;
    let mut total = 0.0;
    let grads = probs
        .iter()
        .zip(gold)
        .map(|(p, &y)| {
            total -= p[y].max(LOG_CLAMP).ln();
            if p[y] > LOG_CLAMP {
                p.iter()
                    .enumerate()
                    .map(|(c, &pc)| (pc - if c == y { 1.0 } else { 0.0 }) / m)
                    .collect()
            } else {
                vec![0.0; p.len()]
            }
        })
        .collect();
    (total / m, grads)
}

/// Classifier targets for proposals by exact rectangle match; unmatched
/// proposals are INVALID. With `inject_missing`, gold rectangles absent from
/// the proposals are appended once.
pub fn match_gold(
    proposals: &[Rect],
    gold: &[GoldRegion],
    mode: TaskMode,
    inject_missing: bool,
) -> (Vec<Rect>, Vec<usize>) {
    let mut rects = proposals.to_vec();
    let mut targets: Vec<usize> = proposals
        .iter()
        .map(|r| {
            gold.iter()
                .find(|g| g.rect == *r)
                .map_or(mode.invalid_class(), |g| mode.class_index(g.cls))
        })
        .collect();
    if inject_missing {
        for g in gold {
            if !rects.contains(&g.rect) {
                rects.push(g.rect);
                targets.push(mode.class_index(g.cls));
            }
        }
    }
    (rects, targets)
}

/// Mean squared distance between student and teacher distributions over the
/// retained regions; 0 for an empty set.
pub fn loss_uns(student: &[Vec<f64>], teacher: &[Vec<f64>]) -> f64 {
    loss_uns_grad(student, teacher).0
}

/// Value plus gradients with respect to the student probabilities.
pub fn loss_uns_grad(student: &[Vec<f64>], teacher: &[Vec<f64>]) -> (f64, Vec<Vec<f64>>) {
    assert_eq!(student.len(), teacher.len(), "student/teacher misalignment");
    if student.is_empty() {
        return (0.0, Vec::new());
    }
    let m = student.len() as f64;
    let mut total = 0.0;
    let grads = student
        .iter()
        .zip(teacher)
        .map(|(p, q)| {
            total += sq_dist(p, q);
            p.iter().zip(q).map(|(a, b)| 2.0 * (a - b) / m).collect()
        })
        .collect();
    (total / m, grads)
}

/// Gaussian-RBF kernel with median-heuristic bandwidth, biased estimator.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MmdConfig {
    /// Bandwidth used when the median pairwise distance is zero.
    pub fallback_bandwidth: f64,
    /// Fixed bandwidth overriding the median heuristic.
    pub fixed_bandwidth: Option<f64>,
}

impl Default for MmdConfig {
    fn default() -> Self {
        MmdConfig {
            fallback_bandwidth: 1.0,
            fixed_bandwidth: None,
        }
    }
}

/// Point pairs of the pooled sample whose distances define the median
/// bandwidth, with their weights (1 for an odd count, ½ each for an even
/// count). Empty when the bandwidth is a constant.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MedianPairs {
    pairs: Vec<(usize, usize, f64)>,
}

impl MedianPairs {
    pub fn is_constant(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Bandwidth and `∂σ/∂‖z_i − z_j‖`-weighted pairs `(i, j, w / dist)`.
struct Bandwidth {
    sigma: f64,
    pairs: Vec<(usize, usize, f64)>,
}

fn median_pairs(points: &[&[f64]], cfg: &MmdConfig) -> MedianPairs {
    if cfg.fixed_bandwidth.is_some() {
        return MedianPairs::default();
    }
    let mut dists = Vec::with_capacity(points.len() * points.len().saturating_sub(1) / 2);
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            dists.push((sq_dist(points[i], points[j]).sqrt(), i, j));
        }
    }
    dists.sort_by(|x, y| x.0.total_cmp(&y.0).then((x.1, x.2).cmp(&(y.1, y.2))));
    let n = dists.len();
    let picked: Vec<(usize, usize, f64)> = match n {
        0 => Vec::new(),
        _ if n % 2 == 1 => vec![(dists[n / 2].1, dists[n / 2].2, 1.0)],
        _ => [n / 2 - 1, n / 2]
            .iter()
            .map(|&k| (dists[k].1, dists[k].2, 0.5))
            .collect(),
    };
    MedianPairs { pairs: picked }
}

fn bandwidth(points: &[&[f64]], cfg: &MmdConfig, median: &MedianPairs) -> Bandwidth {
    if let Some(sigma) = cfg.fixed_bandwidth {
        return Bandwidth {
            sigma,
            pairs: Vec::new(),
        };
    }
    let with_dist: Vec<(usize, usize, f64, f64)> = median
        .pairs
        .iter()
        .map(|&(i, j, w)| (i, j, w, sq_dist(points[i], points[j]).sqrt()))
        .collect();
    let sigma: f64 = with_dist.iter().map(|&(_, _, w, dist)| w * dist).sum();
    if sigma > 0.0 {
        Bandwidth {
            sigma,
            pairs: with_dist
                .into_iter()
                .filter(|&(_, _, _, dist)| dist > 0.0)
                .map(|(i, j, w, dist)| (i, j, w / dist))
                .collect(),
        }
    } else {
        Bandwidth {
            sigma: cfg.fallback_bandwidth,
            pairs: Vec::new(),
        }
    }
}

/// Squared-MMD value and gradients with respect to every input vector.
#[derive(Clone, Debug, PartialEq)]
pub struct MmdGrad {
    pub value: f64,
    pub dx: Vec<Vec<f64>>,
    pub dy: Vec<Vec<f64>>,
}

pub fn mmd(x: &[Vec<f64>], y: &[Vec<f64>], cfg: &MmdConfig) -> f64 {
    mmd_grad(x, y, cfg).value
}

/// `mean k(x,x') + mean k(y,y') − 2 mean k(x,y)`, clamped at 0; an empty side
/// yields 0.
pub fn mmd_grad(x: &[Vec<f64>], y: &[Vec<f64>], cfg: &MmdConfig) -> MmdGrad {
    mmd_grad_with(x, y, cfg, None).0
}

/// [`mmd_grad`] with the median pairs optionally fixed; also returns the
/// pairs in effect.
pub fn mmd_grad_with(
    x: &[Vec<f64>],
    y: &[Vec<f64>],
    cfg: &MmdConfig,
    frozen: Option<&MedianPairs>,
) -> (MmdGrad, MedianPairs) {
    let zero = |v: &[Vec<f64>]| v.iter().map(|p| vec![0.0; p.len()]).collect::<Vec<_>>();
    if x.is_empty() || y.is_empty() {
        let g = MmdGrad {
            value: 0.0,
            dx: zero(x),
            dy: zero(y),
        };
        return (g, MedianPairs::default());
    }
    let pooled: Vec<&[f64]> = x.iter().chain(y).map(Vec::as_slice).collect();
    let median = match frozen {
        Some(m) => m.clone(),
        None => median_pairs(&pooled, cfg),
    };
    let bw = bandwidth(&pooled, cfg, &median);
    let sigma2 = bw.sigma * bw.sigma;
    let (m, n) = (x.len(), y.len());
    let mut grads: Vec<Vec<f64>> = pooled.iter().map(|p| vec![0.0; p.len()]).collect();
    let mut d_sigma = 0.0;
    let mut value = 0.0;

    // (index, index, weight) over unordered pairs; diagonal terms are exp(0) = 1
    let wxx = 1.0 / (m * m) as f64;
    let wyy = 1.0 / (n * n) as f64;
    let wxy = -2.0 / (m * n) as f64;
    value += m as f64 * wxx + n as f64 * wyy;
    let mut term = |i: usize, j: usize, w: f64| {
        let sq = sq_dist(pooled[i], pooled[j]);
        let k = (-sq / (2.0 * sigma2)).exp();
        value += w * k;
        let coef = w * k / sigma2;
        for c in 0..pooled[i].len() {
            let diff = pooled[i][c] - pooled[j][c];
            grads[i][c] -= coef * diff;
            grads[j][c] += coef * diff;
        }
        d_sigma += w * k * sq / (sigma2 * bw.sigma);
    };
    for i in 0..m {
        for j in i + 1..m {
            term(i, j, 2.0 * wxx);
        }
    }
    for i in 0..n {
        for j in i + 1..n {
            term(m + i, m + j, 2.0 * wyy);
        }
    }
    for i in 0..m {
        for j in 0..n {
            term(i, m + j, wxy);
        }
    }
    if value <= 0.0 {
        let g = MmdGrad {
            value: 0.0,
            dx: zero(x),
            dy: zero(y),
        };
        return (g, median);
    }
    for &(i, j, w) in &bw.pairs {
        // σ = Σ w_ij ‖z_i − z_j‖, here w already divided by the distance
        for c in 0..pooled[i].len() {
            let diff = pooled[i][c] - pooled[j][c];
            grads[i][c] += d_sigma * w * diff;
            grads[j][c] -= d_sigma * w * diff;
        }
    }
    let dy = grads.split_off(m);
    let g = MmdGrad {
        value,
        dx: grads,
        dy,
    };
    (g, median)
}

/// Corner and RoI features of predicted regions from one domain.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RegionFeatures {
    /// `t_ab` of each region.
    pub b: Vec<Vec<f64>>,
    /// `t_cd` of each region.
    pub e: Vec<Vec<f64>>,
    /// `r_abcd` of each region.
    pub r: Vec<Vec<f64>>,
}

impl RegionFeatures {
    pub fn len(&self) -> usize {
        self.r.len()
    }

    pub fn is_empty(&self) -> bool {
        self.r.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegionMmdGrad {
    pub l_boundary: f64,
    pub l_region: f64,
    pub d_source: RegionFeatures,
    pub d_target: RegionFeatures,
}

pub fn loss_mmd_region_level(
    source: &RegionFeatures,
    target: &RegionFeatures,
    cfg: &MmdConfig,
) -> (f64, f64) {
    let g = loss_mmd_region_level_grad(source, target, cfg);
    (g.l_boundary, g.l_region)
}

pub fn loss_mmd_region_level_grad(
    source: &RegionFeatures,
    target: &RegionFeatures,
    cfg: &MmdConfig,
) -> RegionMmdGrad {
    loss_mmd_region_level_grad_with(source, target, cfg, None).0
}

/// Frozen-bandwidth form; `frozen` holds the B, E and RoI median pairs.
pub fn loss_mmd_region_level_grad_with(
    source: &RegionFeatures,
    target: &RegionFeatures,
    cfg: &MmdConfig,
    frozen: Option<&[MedianPairs]>,
) -> (RegionMmdGrad, Vec<MedianPairs>) {
    let pick = |k: usize| frozen.map(|f| &f[k]);
    let (gb, mb) = mmd_grad_with(&source.b, &target.b, cfg, pick(0));
    let (ge, me) = mmd_grad_with(&source.e, &target.e, cfg, pick(1));
    let (gr, mr) = mmd_grad_with(&source.r, &target.r, cfg, pick(2));
    let g = RegionMmdGrad {
        l_boundary: gb.value + ge.value,
        l_region: gr.value,
        d_source: RegionFeatures {
            b: gb.dx,
            e: ge.dx,
            r: gr.dx,
        },
        d_target: RegionFeatures {
            b: gb.dy,
            e: ge.dy,
            r: gr.dy,
        },
    };
    (g, vec![mb, me, mr])
}

/// Sum over cell types of the MMD between same-type cell features.
pub fn loss_mmd_cell_level(
    source: &[Vec<Vec<f64>>],
    target: &[Vec<Vec<f64>>],
    cfg: &MmdConfig,
) -> f64 {
    loss_mmd_cell_level_grad(source, target, cfg).value
}

/// Gradients of the summed per-type MMD with respect to each feature.
pub struct CellMmdGrad {
    pub value: f64,
    pub d_source: Vec<Vec<Vec<f64>>>,
    pub d_target: Vec<Vec<Vec<f64>>>,
}

pub fn loss_mmd_cell_level_grad(
    source: &[Vec<Vec<f64>>],
    target: &[Vec<Vec<f64>>],
    cfg: &MmdConfig,
) -> CellMmdGrad {
    loss_mmd_cell_level_grad_with(source, target, cfg, None).0
}

/// Frozen-bandwidth form; `frozen` holds one entry per cell type.
pub fn loss_mmd_cell_level_grad_with(
    source: &[Vec<Vec<f64>>],
    target: &[Vec<Vec<f64>>],
    cfg: &MmdConfig,
    frozen: Option<&[MedianPairs]>,
) -> (CellMmdGrad, Vec<MedianPairs>) {
    assert_eq!(source.len(), target.len(), "cell type misalignment");
    let mut out = CellMmdGrad {
        value: 0.0,
        d_source: Vec::with_capacity(source.len()),
        d_target: Vec::with_capacity(target.len()),
    };
    let mut used = Vec::with_capacity(source.len());
    for (k, (s, t)) in source.iter().zip(target).enumerate() {
        let (g, m) = mmd_grad_with(s, t, cfg, frozen.map(|f| &f[k]));
        out.value += g.value;
        out.d_source.push(g.dx);
        out.d_target.push(g.dy);
        used.push(m);
    }
    (out, used)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tagging::RegionClass;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn rpn_limits() {
        let eps = 1e-13;
        let y = [1u8, 0, 0, 1];
        let p: Vec<f64> = y.iter().map(|&v| if v == 1 { 1.0 - eps } else { eps }).collect();
        assert!(loss_rpn(&p, &p, &y, &y).unwrap() < 1e-10);
        let half = [0.5; 4];
        assert!((loss_rpn(&half, &half, &y, &[0, 0, 0, 0]).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert!(loss_rpn(&half, &half, &y[..3], &y).is_err());
    }

    #[test]
    fn rpn_matches_cell_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pb: Vec<f64> = (0..9).map(|_| rng.gen_range(0.01..0.99)).collect();
        let pe: Vec<f64> = (0..9).map(|_| rng.gen_range(0.01..0.99)).collect();
        let yb: Vec<u8> = (0..9).map(|_| rng.gen_range(0..2)).collect();
        let ye: Vec<u8> = (0..9).map(|_| rng.gen_range(0..2)).collect();
        let mut want = 0.0;
        for c in 0..9 {
            let y = yb[c] as f64;
            want -= y * pb[c].ln() + (1.0 - y) * (1.0 - pb[c]).ln();
            let y = ye[c] as f64;
            want -= y * pe[c].ln() + (1.0 - y) * (1.0 - pe[c]).ln();
        }
        want /= 18.0;
        assert!((loss_rpn(&pb, &pe, &yb, &ye).unwrap() - want).abs() < 1e-14);
    }

    #[test]
    fn rpc_values() {
        assert_eq!(loss_rpc(&[vec![1.0, 0.0, 0.0, 0.0]], &[0]), 0.0);
        assert!((loss_rpc(&[vec![0.25; 4]], &[2]) - 4f64.ln()).abs() < 1e-15);
        assert_eq!(loss_rpc(&[], &[]), 0.0);
        let probs = vec![
            vec![0.1, 0.2, 0.3, 0.4],
            vec![0.7, 0.1, 0.1, 0.1],
            vec![0.25, 0.25, 0.4, 0.1],
        ];
        let gold = [3, 0, 2];
        let want = -(0.4f64.ln() + 0.7f64.ln() + 0.4f64.ln()) / 3.0;
        assert!((loss_rpc(&probs, &gold) - want).abs() < 1e-15);
    }

    #[test]
    fn gold_matching() {
        let gold = [GoldRegion {
            rect: Rect::new(1, 4, 2, 4),
            cls: RegionClass::Pos,
        }];
        let (rects, targets) = match_gold(
            &[Rect::new(1, 4, 2, 4), Rect::new(0, 0, 2, 4)],
            &gold,
            TaskMode::Aste,
            true,
        );
        assert_eq!(targets, vec![0, 3]);
        assert_eq!(rects.len(), 2);
        let (rects, targets) = match_gold(&[Rect::new(0, 0, 2, 4)], &gold, TaskMode::Aste, true);
        assert_eq!(rects, vec![Rect::new(0, 0, 2, 4), Rect::new(1, 4, 2, 4)]);
        assert_eq!(targets, vec![3, 0]);
        let (_, aope) = match_gold(&rects, &gold, TaskMode::Aope, false);
        assert_eq!(aope, vec![1, 0]);
    }

    #[test]
    fn uns_values() {
        let p = vec![vec![0.2, 0.3, 0.1, 0.4]];
        assert_eq!(loss_uns(&p, &p), 0.0);
        assert_eq!(
            loss_uns(&[vec![1.0, 0.0, 0.0, 0.0]], &[vec![0.0, 1.0, 0.0, 0.0]]),
            2.0
        );
        assert_eq!(loss_uns(&[], &[]), 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s: Vec<Vec<f64>> = (0..3).map(|_| (0..4).map(|_| rng.gen()).collect()).collect();
        let t: Vec<Vec<f64>> = (0..3).map(|_| (0..4).map(|_| rng.gen()).collect()).collect();
        let mut want = 0.0;
        for r in 0..3 {
            for c in 0..4 {
                want += (s[r][c] - t[r][c]).powi(2);
            }
        }
        assert!((loss_uns(&s, &t) - want / 3.0).abs() < 1e-15);
    }

    #[test]
    fn mmd_scalar_example() {
        let cfg = MmdConfig {
            fixed_bandwidth: Some(1.0),
            ..MmdConfig::default()
        };
        let v = mmd(&[vec![0.0]], &[vec![2.0]], &cfg);
        assert!((v - (2.0 - 2.0 * (-2.0f64).exp())).abs() < 1e-15);
        assert!((v - 1.7293).abs() < 1e-4);
    }

    #[test]
    fn mmd_identities() {
        let cfg = MmdConfig::default();
        let x = vec![vec![0.1, 0.5], vec![-0.3, 0.2], vec![0.9, -0.4]];
        let y = vec![vec![0.0, 0.0], vec![1.0, 1.0]];
        assert_eq!(mmd(&x, &x, &cfg), 0.0);
        assert!((mmd(&x, &y, &cfg) - mmd(&y, &x, &cfg)).abs() < 1e-15);
        assert!(mmd(&x, &y, &cfg) > 0.0);
        assert_eq!(mmd(&x, &[], &cfg), 0.0);
    }

    #[test]
    fn region_and_cell_mmd() {
        let cfg = MmdConfig::default();
        let f = RegionFeatures {
            b: vec![vec![0.1, 0.2], vec![0.3, -0.1]],
            e: vec![vec![0.0, 0.4], vec![0.2, 0.2]],
            r: vec![vec![0.1; 6], vec![0.2; 6]],
        };
        assert_eq!(loss_mmd_region_level(&f, &f, &cfg), (0.0, 0.0));
        assert_eq!(
            loss_mmd_region_level(&f, &RegionFeatures::default(), &cfg),
            (0.0, 0.0)
        );
        let g = RegionFeatures {
            b: vec![vec![0.5, 0.2], vec![-0.3, -0.1]],
            e: vec![vec![0.7, 0.4], vec![0.2, -0.9]],
            r: vec![vec![0.4; 6], vec![-0.2; 6]],
        };
        let (lb, lr) = loss_mmd_region_level(&f, &g, &cfg);
        assert!((lb - (mmd(&f.b, &g.b, &cfg) + mmd(&f.e, &g.e, &cfg))).abs() < 1e-15);
        assert_eq!(lr, mmd(&f.r, &g.r, &cfg));

        let mut src = vec![Vec::new(); 5];
        let mut tgt = vec![Vec::new(); 5];
        src[0] = f.b.clone();
        tgt[0] = g.b.clone();
        assert_eq!(loss_mmd_cell_level(&src, &tgt, &cfg), mmd(&f.b, &g.b, &cfg));
        src[3] = f.e.clone();
        tgt[3] = g.e.clone();
        let want = mmd(&f.b, &g.b, &cfg) + mmd(&f.e, &g.e, &cfg);
        assert!((loss_mmd_cell_level(&src, &tgt, &cfg) - want).abs() < 1e-15);
        assert_eq!(loss_mmd_cell_level(&src, &src, &cfg), 0.0);
    }

    #[test]
    fn total_loss_arithmetic() {
        assert!((total_loss(1.0, 0.5, 2.0, 1.0, 0.005) - 1.51).abs() < 1e-12);
        assert_eq!(total_loss(1.25, 0.5, 2.0, 0.0, 0.0), 1.25);
        let at = |a: f64| total_loss(1.0, 0.5, 2.0, a, 0.1);
        assert!(((at(3.0) - at(1.0)) - 2.0 * 0.5).abs() < 1e-12);
        let b = LossBreakdown::assemble(0.4, 0.6, 0.5, 1.5, 0.5, 1.0, 0.005);
        assert_eq!(b.l_sup, 1.0);
        assert_eq!(b.l_mmd, 2.0);
        assert!((b.total - 1.51).abs() < 1e-12);
    }

    fn fd_check(x: &[Vec<f64>], y: &[Vec<f64>], cfg: &MmdConfig) {
        let g = mmd_grad(x, y, cfg);
        let eps = 1e-6;
        for side in 0..2 {
            let pts = if side == 0 { x } else { y };
            for i in 0..pts.len() {
                for c in 0..pts[i].len() {
                    let bump = |delta: f64| {
                        let (mut xx, mut yy) = (x.to_vec(), y.to_vec());
                        if side == 0 {
                            xx[i][c] += delta;
                        } else {
                            yy[i][c] += delta;
                        }
                        mmd(&xx, &yy, cfg)
                    };
                    let numeric = (bump(eps) - bump(-eps)) / (2.0 * eps);
                    let analytic = if side == 0 { g.dx[i][c] } else { g.dy[i][c] };
                    assert!(
                        (numeric - analytic).abs() < 1e-7,
                        "side {side} point {i} coord {c}: {analytic} vs {numeric}"
                    );
                }
            }
        }
    }

    #[test]
    fn mmd_gradient_includes_bandwidth_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for (m, n) in [(1, 1), (2, 3), (3, 3), (4, 2)] {
            let x: Vec<Vec<f64>> = (0..m).map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
            let y: Vec<Vec<f64>> = (0..n).map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
            fd_check(&x, &y, &MmdConfig::default());
        }
    }
}
