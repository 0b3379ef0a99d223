//! Hash-embedding sentence encoder, relation-table construction and the
//! residual 3×3 convolution stack, each with an explicit backward pass.
//!
//! Token features: `h_i = tanh(W_m [emb(x_i) + pos_i ; mean_{0<|j-i|<=w} emb(x_j)] + b_m)`.
//! Table cells: `t_ij = tanh(W_t [h_i ; h_j ; maxpool(h_lo..=h_hi) ; h_iᵀ V h_j] + b_t)`
//! with `lo = min(i, j)`, `hi = max(i, j)`.
//! Residual layers: `T^l = T^{l-1} + conv2(relu(conv1(T^{l-1})))`, zero padded.

use std::hash::Hasher;

use fnv::FnvHasher;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{axpy, dot, matvec_acc, matvec_t_acc, outer_acc, Tensor};

/// Identifier written into checkpoints so other encoders can be plugged in.
pub const ENCODER_KIND: &str = "hash-window-v1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub d: usize,
    pub layers: usize,
    pub vocab_buckets: usize,
    pub window: usize,
    pub max_n: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            d: 16,
            layers: 2,
            vocab_buckets: 4096,
            window: 1,
            max_n: 24,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d < 4 || !self.d.is_multiple_of(2) {
            return Err(Error::InvalidConfig("d must be even and at least 4".into()));
        }
        if self.layers < 1 {
            return Err(Error::InvalidConfig("at least one conv layer".into()));
        }
        if self.vocab_buckets < 2 {
            return Err(Error::InvalidConfig("vocab_buckets must be at least 2".into()));
        }
        if self.max_n < 1 {
            return Err(Error::InvalidConfig("max_n must be at least 1".into()));
        }
        Ok(())
    }

    /// Width of the table projection input: `3d + 1`.
    pub fn table_input(&self) -> usize {
        3 * self.d + 1
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvLayer {
    /// `[9, d, d]`: tap `(di+1)*3 + (dj+1)`, output channel, input channel.
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    pub embedding: Tensor,
    pub position: Tensor,
    pub mixer_w: Tensor,
    pub mixer_b: Tensor,
    pub bilinear: Tensor,
    pub table_w: Tensor,
    pub table_b: Tensor,
    pub conv: Vec<ConvLayer>,
}

impl EncoderParams {
    pub fn init(config: EncoderConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let d = config.d;
        let din = config.table_input();
        let conv_std = 0.5 / ((9 * d) as f64).sqrt();
        let conv = (0..config.layers)
            .map(|_| ConvLayer {
                w1: Tensor::randn(&[9, d, d], conv_std, rng),
                b1: Tensor::zeros(&[d]),
                w2: Tensor::randn(&[9, d, d], conv_std, rng),
                b2: Tensor::zeros(&[d]),
            })
            .collect();
        Ok(EncoderParams {
            config,
            embedding: Tensor::randn(&[config.vocab_buckets, d], 0.5, rng),
            position: Tensor::randn(&[config.max_n, d], 0.1, rng),
            mixer_w: Tensor::randn(&[d, 2 * d], 1.0 / ((2 * d) as f64).sqrt(), rng),
            mixer_b: Tensor::zeros(&[d]),
            bilinear: Tensor::randn(&[d, d], 1.0 / d as f64, rng),
            table_w: Tensor::randn(&[d, din], 1.0 / (din as f64).sqrt(), rng),
            table_b: Tensor::zeros(&[d]),
            conv,
        })
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.tensors_mut().into_iter().for_each(|t| t.fill(0.0));
        z
    }

    /// Named parameter groups in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("embedding".to_string(), &self.embedding),
            ("position".to_string(), &self.position),
            ("mixer_w".to_string(), &self.mixer_w),
            ("mixer_b".to_string(), &self.mixer_b),
            ("bilinear".to_string(), &self.bilinear),
            ("table_w".to_string(), &self.table_w),
            ("table_b".to_string(), &self.table_b),
        ];
        for (l, c) in self.conv.iter().enumerate() {
            out.push((format!("conv{l}.w1"), &c.w1));
            out.push((format!("conv{l}.b1"), &c.b1));
            out.push((format!("conv{l}.w2"), &c.w2));
            out.push((format!("conv{l}.b2"), &c.b2));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![
            &mut self.embedding,
            &mut self.position,
            &mut self.mixer_w,
            &mut self.mixer_b,
            &mut self.bilinear,
            &mut self.table_w,
            &mut self.table_b,
        ];
        for c in &mut self.conv {
            out.push(&mut c.w1);
            out.push(&mut c.b1);
            out.push(&mut c.w2);
            out.push(&mut c.b2);
        }
        out
    }
}

/// FNV-1a (64-bit) of the token bytes, reduced to a bucket.
pub fn token_bucket(token: &str, buckets: usize) -> usize {
    let mut h = FnvHasher::default();
    h.write(token.as_bytes());
    (h.finish() % buckets as u64) as usize
}

#[derive(Clone, Debug, PartialEq)]
pub struct SentenceEncoding {
    pub n: usize,
    pub d: usize,
    /// Row-major `n × d`.
    pub h: Vec<f64>,
}

impl SentenceEncoding {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.h[i * self.d..(i + 1) * self.d]
    }
}

/// `n × n × d` relation table, row-major in `(i, j, k)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub n: usize,
    pub d: usize,
    pub layer_index: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn zeros(n: usize, d: usize, layer_index: usize) -> Self {
        FeatureMap {
            n,
            d,
            layer_index,
            data: vec![0.0; n * n * d],
        }
    }

    pub fn cell(&self, i: usize, j: usize) -> &[f64] {
        let o = (i * self.n + j) * self.d;
        &self.data[o..o + self.d]
    }

    pub fn cell_mut(&mut self, i: usize, j: usize) -> &mut [f64] {
        let o = (i * self.n + j) * self.d;
        &mut self.data[o..o + self.d]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

#[derive(Clone, Debug)]
pub struct EmbedCache {
    buckets: Vec<usize>,
    /// `n × 2d` mixer inputs.
    inputs: Vec<f64>,
}

pub fn embed(tokens: &[String], params: &EncoderParams) -> Result<(SentenceEncoding, EmbedCache)> {
    let cfg = &params.config;
    let (n, d) = (tokens.len(), cfg.d);
    if n > cfg.max_n {
        return Err(Error::TooLong {
            len: n,
            max: cfg.max_n,
        });
    }
    if n == 0 {
        return Err(Error::InvalidSentence("empty sentence".into()));
    }
    let buckets: Vec<usize> = tokens
        .iter()
        .map(|t| token_bucket(t, cfg.vocab_buckets))
        .collect();
    let mut inputs = vec![0.0; n * 2 * d];
    let mut h = vec![0.0; n * d];
    for i in 0..n {
        let input = &mut inputs[i * 2 * d..(i + 1) * 2 * d];
        let (own, ctx) = input.split_at_mut(d);
        own.copy_from_slice(params.embedding.row(buckets[i]));
        axpy(1.0, params.position.row(i), own);
        let neighbors = neighbors(i, n, cfg.window);
        if !neighbors.is_empty() {
            let scale = 1.0 / neighbors.len() as f64;
            for j in neighbors {
                axpy(scale, params.embedding.row(buckets[j]), ctx);
            }
        }
        let out = &mut h[i * d..(i + 1) * d];
        out.copy_from_slice(&params.mixer_b.data);
        matvec_acc(&params.mixer_w.data, input, out);
        out.iter_mut().for_each(|x| *x = x.tanh());
    }
    Ok((SentenceEncoding { n, d, h }, EmbedCache { buckets, inputs }))
}

fn neighbors(i: usize, n: usize, window: usize) -> Vec<usize> {
    let lo = i.saturating_sub(window);
    let hi = (i + window).min(n - 1);
    (lo..=hi).filter(|&j| j != i).collect()
}

pub fn embed_backward(
    enc: &SentenceEncoding,
    cache: &EmbedCache,
    d_h: &[f64],
    params: &EncoderParams,
    grads: &mut EncoderParams,
) {
    let (n, d) = (enc.n, enc.d);
    let window = params.config.window;
    let mut d_in = vec![0.0; 2 * d];
    for i in 0..n {
        let dz: Vec<f64> = (0..d)
            .map(|k| d_h[i * d + k] * (1.0 - enc.h[i * d + k].powi(2)))
            .collect();
        let input = &cache.inputs[i * 2 * d..(i + 1) * 2 * d];
        outer_acc(&mut grads.mixer_w.data, &dz, input);
        axpy(1.0, &dz, &mut grads.mixer_b.data);
        d_in.iter_mut().for_each(|x| *x = 0.0);
        matvec_t_acc(&params.mixer_w.data, &dz, &mut d_in);
        let (d_own, d_ctx) = d_in.split_at(d);
        axpy(1.0, d_own, grads.embedding.row_mut(cache.buckets[i]));
        axpy(1.0, d_own, grads.position.row_mut(i));
        let neighbors = neighbors(i, n, window);
        if !neighbors.is_empty() {
            let scale = 1.0 / neighbors.len() as f64;
            for j in neighbors {
                axpy(scale, d_ctx, grads.embedding.row_mut(cache.buckets[j]));
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct TableCache {
    /// `n² × (3d+1)` projection inputs.
    inputs: Vec<f64>,
    /// `n² × d` token index selected by the max-pool.
    pool_arg: Vec<usize>,
}

pub fn build_table(enc: &SentenceEncoding, params: &EncoderParams) -> Result<(FeatureMap, TableCache)> {
    build_table_with(enc, params, None)
}

/// [`build_table`] with the max-pool selections optionally fixed in advance.
fn build_table_with(
    enc: &SentenceEncoding,
    params: &EncoderParams,
    frozen_pool: Option<&[usize]>,
) -> Result<(FeatureMap, TableCache)> {
    let (n, d) = (enc.n, enc.d);
    if d != params.config.d || enc.h.len() != n * d {
        return Err(Error::Shape(format!(
            "encoding is {n}×{d}, encoder expects width {}",
            params.config.d
        )));
    }
    let din = params.config.table_input();
    let mut map = FeatureMap::zeros(n, d, 0);
    let mut inputs = vec![0.0; n * n * din];
    let mut pool_arg = vec![0usize; n * n * d];
    let mut vh = vec![0.0; d];
    for j in 0..n {
        // V h_j, reused for every row i
        vh.iter_mut().for_each(|x| *x = 0.0);
        matvec_acc(&params.bilinear.data, enc.row(j), &mut vh);
        for i in 0..n {
            let cell = i * n + j;
            let u = &mut inputs[cell * din..(cell + 1) * din];
            u[..d].copy_from_slice(enc.row(i));
            u[d..2 * d].copy_from_slice(enc.row(j));
            let (lo, hi) = (i.min(j), i.max(j));
            for k in 0..d {
                let best = match frozen_pool {
                    Some(f) => f[cell * d + k],
                    None => {
                        let mut best = lo;
                        for m in lo + 1..=hi {
                            if enc.h[m * d + k] > enc.h[best * d + k] {
                                best = m;
                            }
                        }
                        best
                    }
                };
                pool_arg[cell * d + k] = best;
                u[2 * d + k] = enc.h[best * d + k];
            }
            u[3 * d] = dot(enc.row(i), &vh);
            let out = map.cell_mut(i, j);
            out.copy_from_slice(&params.table_b.data);
            matvec_acc(&params.table_w.data, u, out);
            out.iter_mut().for_each(|x| *x = x.tanh());
        }
    }
    Ok((map, TableCache { inputs, pool_arg }))
}

pub fn build_table_backward(
    enc: &SentenceEncoding,
    table: &FeatureMap,
    cache: &TableCache,
    d_table: &[f64],
    params: &EncoderParams,
    grads: &mut EncoderParams,
) -> Vec<f64> {
    let (n, d) = (enc.n, enc.d);
    let din = params.config.table_input();
    let mut d_h = vec![0.0; n * d];
    let mut d_u = vec![0.0; din];
    let mut dz = vec![0.0; d];
    for i in 0..n {
        for j in 0..n {
            let cell = i * n + j;
            let t = table.cell(i, j);
            let g = &d_table[cell * d..(cell + 1) * d];
            if g.iter().all(|&x| x == 0.0) {
                continue;
            }
            for k in 0..d {
                dz[k] = g[k] * (1.0 - t[k] * t[k]);
            }
            let u = &cache.inputs[cell * din..(cell + 1) * din];
            outer_acc(&mut grads.table_w.data, &dz, u);
            axpy(1.0, &dz, &mut grads.table_b.data);
            d_u.iter_mut().for_each(|x| *x = 0.0);
            matvec_t_acc(&params.table_w.data, &dz, &mut d_u);

            axpy(1.0, &d_u[..d], &mut d_h[i * d..(i + 1) * d]);
            axpy(1.0, &d_u[d..2 * d], &mut d_h[j * d..(j + 1) * d]);
            for k in 0..d {
                let m = cache.pool_arg[cell * d + k];
                d_h[m * d + k] += d_u[2 * d + k];
            }
            let ds = d_u[3 * d];
            if ds != 0.0 {
                // s = h_iᵀ V h_j
                outer_acc(&mut grads.bilinear.data, &scaled(enc.row(i), ds), enc.row(j));
                matvec_acc(
                    &params.bilinear.data,
                    &scaled(enc.row(j), ds),
                    &mut d_h[i * d..(i + 1) * d],
                );
                matvec_t_acc(
                    &params.bilinear.data,
                    &scaled(enc.row(i), ds),
                    &mut d_h[j * d..(j + 1) * d],
                );
            }
        }
    }
    d_h
}

fn scaled(x: &[f64], s: f64) -> Vec<f64> {
    x.iter().map(|v| v * s).collect()
}

const TAPS: [(isize, isize); 9] = [
    (-1, -1),
    (-1, 0),
    (-1, 1),
    (0, -1),
    (0, 0),
    (0, 1),
    (1, -1),
    (1, 0),
    (1, 1),
];

fn shifted(i: usize, di: isize, n: usize) -> Option<usize> {
    let v = i as isize + di;
    (v >= 0 && (v as usize) < n).then_some(v as usize)
}

/// Zero-padded 3×3 convolution, `d → d` channels.
pub fn conv3x3(x: &[f64], n: usize, d: usize, w: &Tensor, b: &Tensor) -> Vec<f64> {
    let mut y = vec![0.0; n * n * d];
    for i in 0..n {
        for j in 0..n {
            let out = &mut y[(i * n + j) * d..(i * n + j + 1) * d];
            out.copy_from_slice(&b.data);
            for (tap, &(di, dj)) in TAPS.iter().enumerate() {
                if let (Some(si), Some(sj)) = (shifted(i, di, n), shifted(j, dj, n)) {
                    let src = &x[(si * n + sj) * d..(si * n + sj + 1) * d];
                    matvec_acc(&w.data[tap * d * d..(tap + 1) * d * d], src, out);
                }
            }
        }
    }
    y
}

/// Accumulates weight/bias gradients and returns the input gradient.
pub fn conv3x3_backward(
    x: &[f64],
    dy: &[f64],
    n: usize,
    d: usize,
    w: &Tensor,
    dw: &mut Tensor,
    db: &mut Tensor,
) -> Vec<f64> {
    let mut dx = vec![0.0; n * n * d];
    for i in 0..n {
        for j in 0..n {
            let g = &dy[(i * n + j) * d..(i * n + j + 1) * d];
            axpy(1.0, g, &mut db.data);
            for (tap, &(di, dj)) in TAPS.iter().enumerate() {
                if let (Some(si), Some(sj)) = (shifted(i, di, n), shifted(j, dj, n)) {
                    let s = (si * n + sj) * d;
                    outer_acc(&mut dw.data[tap * d * d..(tap + 1) * d * d], g, &x[s..s + d]);
                    matvec_t_acc(&w.data[tap * d * d..(tap + 1) * d * d], g, &mut dx[s..s + d]);
                }
            }
        }
    }
    dx
}

#[derive(Clone, Debug)]
pub struct ConvCache {
    /// Per layer: input map, relu gate of the first conv, post-relu.
    layers: Vec<(Vec<f64>, Vec<bool>, Vec<f64>)>,
}

pub fn conv_stack(t0: &FeatureMap, params: &EncoderParams) -> Result<(FeatureMap, ConvCache)> {
    conv_stack_with(t0, params, None)
}

/// [`conv_stack`] with the relu gates optionally fixed in advance.
fn conv_stack_with(
    t0: &FeatureMap,
    params: &EncoderParams,
    frozen_gates: Option<&[Vec<bool>]>,
) -> Result<(FeatureMap, ConvCache)> {
    let (n, d) = (t0.n, t0.d);
    if d != params.config.d || t0.data.len() != n * n * d {
        return Err(Error::Shape(format!(
            "feature map {n}×{n}×{d} does not match encoder width {}",
            params.config.d
        )));
    }
    let mut x = t0.data.clone();
    let mut layers = Vec::with_capacity(params.conv.len());
    for (l, layer) in params.conv.iter().enumerate() {
        let a = conv3x3(&x, n, d, &layer.w1, &layer.b1);
        let gate: Vec<bool> = match frozen_gates {
            Some(g) => g[l].clone(),
            None => a.iter().map(|&v| v > 0.0).collect(),
        };
        let r: Vec<f64> = a.iter().zip(&gate).map(|(&v, &on)| if on { v } else { 0.0 }).collect();
        let c = conv3x3(&r, n, d, &layer.w2, &layer.b2);
        let y: Vec<f64> = x.iter().zip(&c).map(|(u, v)| u + v).collect();
        layers.push((std::mem::replace(&mut x, y), gate, r));
    }
    Ok((
        FeatureMap {
            n,
            d,
            layer_index: params.conv.len(),
            data: x,
        },
        ConvCache { layers },
    ))
}

pub fn conv_stack_backward(
    n: usize,
    d: usize,
    cache: &ConvCache,
    d_out: &[f64],
    params: &EncoderParams,
    grads: &mut EncoderParams,
) -> Vec<f64> {
    let mut dy = d_out.to_vec();
    for (l, (x, gate, r)) in cache.layers.iter().enumerate().rev() {
        let layer = &params.conv[l];
        let g = &mut grads.conv[l];
        let dr = conv3x3_backward(r, &dy, n, d, &layer.w2, &mut g.w2, &mut g.b2);
        let da: Vec<f64> = dr
            .iter()
            .zip(gate)
            .map(|(&g, &on)| if on { g } else { 0.0 })
            .collect();
        let dx = conv3x3_backward(x, &da, n, d, &layer.w1, &mut g.w1, &mut g.b1);
        // residual path passes dy straight through
        dy.iter_mut().zip(&dx).for_each(|(a, b)| *a += b);
    }
    dy
}

/// Cached forward pass of the whole encoder for one sentence.
#[derive(Clone, Debug)]
pub struct EncoderForward {
    pub encoding: SentenceEncoding,
    pub table: FeatureMap,
    /// Last-layer map `T^L`.
    pub output: FeatureMap,
    embed_cache: EmbedCache,
    table_cache: TableCache,
    conv_cache: ConvCache,
}

/// Max-pool selections and relu gates of one forward pass. Replaying them
/// makes the encoder a smooth function of its parameters around that pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationPattern {
    pool_arg: Vec<usize>,
    gates: Vec<Vec<bool>>,
}

pub fn encode(tokens: &[String], params: &EncoderParams) -> Result<EncoderForward> {
    encode_with(tokens, params, None)
}

/// [`encode`] with max-pool selections and relu gates taken from `pattern`.
pub fn encode_frozen(
    tokens: &[String],
    params: &EncoderParams,
    pattern: &ActivationPattern,
) -> Result<EncoderForward> {
    let n = tokens.len();
    let d = params.config.d;
    if pattern.pool_arg.len() != n * n * d || pattern.gates.len() != params.conv.len() {
        return Err(Error::Shape("activation pattern does not fit this sentence".into()));
    }
    encode_with(tokens, params, Some(pattern))
}

fn encode_with(
    tokens: &[String],
    params: &EncoderParams,
    pattern: Option<&ActivationPattern>,
) -> Result<EncoderForward> {
    let (encoding, embed_cache) = embed(tokens, params)?;
    let (table, table_cache) =
        build_table_with(&encoding, params, pattern.map(|p| p.pool_arg.as_slice()))?;
    let (output, conv_cache) =
        conv_stack_with(&table, params, pattern.map(|p| p.gates.as_slice()))?;
    Ok(EncoderForward {
        encoding,
        table,
        output,
        embed_cache,
        table_cache,
        conv_cache,
    })
}

impl EncoderForward {
    pub fn pattern(&self) -> ActivationPattern {
        ActivationPattern {
            pool_arg: self.table_cache.pool_arg.clone(),
            gates: self.conv_cache.layers.iter().map(|(_, g, _)| g.clone()).collect(),
        }
    }

    /// Accumulates parameter gradients given `∂loss/∂T^L`.
    pub fn backward(&self, d_output: &[f64], params: &EncoderParams, grads: &mut EncoderParams) {
        let (n, d) = (self.output.n, self.output.d);
        if d_output.iter().all(|&x| x == 0.0) {
            return;
        }
        let d_t0 = conv_stack_backward(n, d, &self.conv_cache, d_output, params, grads);
        let d_h = build_table_backward(
            &self.encoding,
            &self.table,
            &self.table_cache,
            &d_t0,
            params,
            grads,
        );
        embed_backward(&self.encoding, &self.embed_cache, &d_h, params, grads);
    }
}

/// Parameter gradients for a scalar loss whose gradient w.r.t. `T^L` is `d_output`.
pub fn encoder_grad(
    forward: &EncoderForward,
    d_output: &[f64],
    params: &EncoderParams,
) -> EncoderParams {
    let mut grads = params.zeros_like();
    forward.backward(d_output, params, &mut grads);
    grads
}
