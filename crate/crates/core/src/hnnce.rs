//! MLP fusion head trained with the hard-negative contrastive loss.
//!
//! For a batch of size `B` with cosine matrix `S[i][j] = f_i · h_j`:
//!
//! ```text
//! L = -Σ_i log( e^{S_ii/τ} / (α e^{S_ii/τ} + Σ_{j≠i} e^{S_ij/τ} w_ij) )
//!     -Σ_i log( e^{S_ii/τ} / (α e^{S_ii/τ} + Σ_{j≠i} e^{S_ji/τ} w'_ji) )
//!
//! w_ij  = (B-1) e^{β S_ij/τ} / Σ_{k≠i} e^{β S_ik/τ}
//! w'_ji = (B-1) e^{β S_ji/τ} / Σ_{k≠i} e^{β S_ki/τ}
//! ```
//!
//! Each denominator is evaluated in log space:
//! `log(α e^{a}) ⊕ (log(B-1) + LSE((1+β)x) - LSE(βx))` where `x` are the
//! off-diagonal logits of the row (or column).

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use rand::distr::{Distribution, Uniform};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HeadError {
    #[error("{what}: expected length {expected}, got {got}")]
    Shape { what: &'static str, expected: usize, got: usize },
    #[error("head output is the zero vector")]
    ZeroOutput,
    #[error("non-finite parameter")]
    NonFinite,
}

#[derive(Debug, Error)]
pub enum LossError {
    #[error("similarity matrix is not square (row {row} has {len} entries, expected {n})")]
    NotSquare { row: usize, len: usize, n: usize },
    #[error("similarity matrix contains NaN")]
    NaN,
    #[error("alpha = 0 with a single-element batch leaves the denominator empty")]
    EmptyDenominator,
    #[error("empty batch")]
    EmptyBatch,
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("batch repeats target {0:?}")]
    DuplicateTarget(String),
    #[error("batch size must be at least 2, got {0}")]
    BatchSize(usize),
    #[error("no training examples")]
    NoExamples,
    #[error("loss became non-finite at epoch {epoch}, batch {batch} (lr {lr}); lower the learning rate")]
    Diverged { epoch: usize, batch: usize, lr: f64 },
    #[error(transparent)]
    Head(#[from] HeadError),
    #[error(transparent)]
    Loss(#[from] LossError),
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic bytes (expected CVHD)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("truncated checkpoint")]
    Truncated,
    #[error("bad checkpoint header: {0}")]
    Header(#[from] serde_json::Error),
    #[error("parameter count {got} does not match header ({expected})")]
    ParamCount { expected: usize, got: usize },
    #[error(transparent)]
    Head(#[from] HeadError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// `f(q, t) = normalize(W2ᵀ relu(W1ᵀ [q; t] + b1) + b2)`.
///
/// `W1` is `2d × h` and `W2` is `h × d`, both row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionHead {
    d: usize,
    h: usize,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

/// Intermediate values of one forward pass, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    x: Vec<f64>,
    z: Vec<f64>,
    o_norm: f64,
    pub f: Vec<f64>,
}

impl FusionHead {
    pub fn from_parts(d: usize, h: usize, w1: Vec<f64>, b1: Vec<f64>, w2: Vec<f64>, b2: Vec<f64>) -> Result<Self, HeadError> {
        let check = |what, v: &[f64], n| {
            if v.len() != n {
                Err(HeadError::Shape { what, expected: n, got: v.len() })
            } else if v.iter().any(|x| !x.is_finite()) {
                Err(HeadError::NonFinite)
            } else {
                Ok(())
            }
        };
        check("W1", &w1, 2 * d * h)?;
        check("b1", &b1, h)?;
        check("W2", &w2, h * d)?;
        check("b2", &b2, d)?;
        Ok(FusionHead { d, h, w1, b1, w2, b2 })
    }

    /// Seeded uniform initialization in `±1/√fan_in`.
    pub fn init(d: usize, h: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |n: usize, fan_in: usize| -> Vec<f64> {
            let b = 1.0 / (fan_in as f64).sqrt();
            let u = Uniform::new_inclusive(-b, b).expect("finite bound");
            (0..n).map(|_| u.sample(&mut rng)).collect()
        };
        let w1 = draw(2 * d * h, 2 * d);
        let b1 = draw(h, 2 * d);
        let w2 = draw(h * d, h);
        let b2 = draw(d, h);
        FusionHead { d, h, w1, b1, w2, b2 }
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn hidden_dim(&self) -> usize {
        self.h
    }

    pub fn num_params(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }

    /// Flat parameter vector in the order W1, b1, W2, b2.
    pub fn params(&self) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.num_params());
        p.extend_from_slice(&self.w1);
        p.extend_from_slice(&self.b1);
        p.extend_from_slice(&self.w2);
        p.extend_from_slice(&self.b2);
        p
    }

    pub fn set_params(&mut self, p: &[f64]) -> Result<(), HeadError> {
        if p.len() != self.num_params() {
            return Err(HeadError::Shape { what: "parameters", expected: self.num_params(), got: p.len() });
        }
        if p.iter().any(|x| !x.is_finite()) {
            return Err(HeadError::NonFinite);
        }
        let (w1, rest) = p.split_at(self.w1.len());
        let (b1, rest) = rest.split_at(self.b1.len());
        let (w2, b2) = rest.split_at(self.w2.len());
        self.w1.copy_from_slice(w1);
        self.b1.copy_from_slice(b1);
        self.w2.copy_from_slice(w2);
        self.b2.copy_from_slice(b2);
        Ok(())
    }

    /// Hidden pre-activations `W1ᵀ [q; t] + b1`.
    pub fn pre_activations(&self, query: &[f64], text: &[f64]) -> Result<Vec<f64>, HeadError> {
        for (what, v) in [("query", query), ("text", text)] {
            if v.len() != self.d {
                return Err(HeadError::Shape { what, expected: self.d, got: v.len() });
            }
        }
        let mut z = self.b1.clone();
        for (j, &xj) in query.iter().chain(text).enumerate() {
            if xj == 0.0 {
                continue;
            }
            let row = &self.w1[j * self.h..(j + 1) * self.h];
            for (zk, &w) in z.iter_mut().zip(row) {
                *zk += xj * w;
            }
        }
        Ok(z)
    }

    pub fn forward_cached(&self, query: &[f64], text: &[f64]) -> Result<ForwardCache, HeadError> {
        let z = self.pre_activations(query, text)?;
        let mut o = self.b2.clone();
        for (k, &zk) in z.iter().enumerate() {
            if zk <= 0.0 {
                continue;
            }
            let row = &self.w2[k * self.d..(k + 1) * self.d];
            for (om, &w) in o.iter_mut().zip(row) {
                *om += zk * w;
            }
        }
        let o_norm = o.iter().map(|x| x * x).sum::<f64>().sqrt();
        if o_norm == 0.0 || !o_norm.is_finite() {
            return Err(HeadError::ZeroOutput);
        }
        let f = o.iter().map(|x| x / o_norm).collect();
        let mut x = query.to_vec();
        x.extend_from_slice(text);
        Ok(ForwardCache { x, z, o_norm, f })
    }

    pub fn forward(&self, query: &[f64], text: &[f64]) -> Result<Vec<f64>, HeadError> {
        Ok(self.forward_cached(query, text)?.f)
    }

    /// Accumulate `∂J/∂θ` into `grad` (flat, [`params`](Self::params) order)
    /// given `g = ∂J/∂f` for one forward pass.
    pub fn backward(&self, cache: &ForwardCache, g: &[f64], grad: &mut [f64]) {
        let (d, h) = (self.d, self.h);
        let (gw1, rest) = grad.split_at_mut(self.w1.len());
        let (gb1, rest) = rest.split_at_mut(h);
        let (gw2, gb2) = rest.split_at_mut(h * d);

        // through f = o / ‖o‖
        let fg: f64 = cache.f.iter().zip(g).map(|(a, b)| a * b).sum();
        let dout: Vec<f64> = cache.f.iter().zip(g).map(|(&fi, &gi)| (gi - fi * fg) / cache.o_norm).collect();

        for (b, &dm) in gb2.iter_mut().zip(&dout) {
            *b += dm;
        }
        let mut dz = vec![0.0; h];
        for k in 0..h {
            let zk = cache.z[k];
            if zk <= 0.0 {
                continue;
            }
            let row = &self.w2[k * d..(k + 1) * d];
            let grow = &mut gw2[k * d..(k + 1) * d];
            let mut acc = 0.0;
            for m in 0..d {
                grow[m] += zk * dout[m];
                acc += row[m] * dout[m];
            }
            dz[k] = acc;
        }
        for (b, &dk) in gb1.iter_mut().zip(&dz) {
            *b += dk;
        }
        for (j, &xj) in cache.x.iter().enumerate() {
            if xj == 0.0 {
                continue;
            }
            let grow = &mut gw1[j * h..(j + 1) * h];
            for (gk, &dk) in grow.iter_mut().zip(&dz) {
                *gk += xj * dk;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BatchMode {
    #[default]
    ByTarget,
    ByTriplet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HnNceConfig {
    pub tau: f64,
    pub alpha: f64,
    pub beta: f64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Defaults to `2d`.
    pub hidden_dim: Option<usize>,
    pub batch_mode: BatchMode,
}

impl Default for HnNceConfig {
    fn default() -> Self {
        HnNceConfig {
            tau: 0.07,
            alpha: 1.0,
            beta: 0.5,
            batch_size: 32,
            learning_rate: 0.05,
            epochs: 60,
            seed: 0,
            hidden_dim: None,
            batch_mode: BatchMode::ByTarget,
        }
    }
}

impl HnNceConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_owned()));
        if !(self.tau > 0.0) {
            return bad("tau must be > 0");
        }
        if !(self.alpha >= 0.0) {
            return bad("alpha must be >= 0");
        }
        if !(self.beta >= 0.0) {
            return bad("beta must be >= 0");
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return bad("learning_rate must be finite and >= 0");
        }
        if self.batch_size < 2 {
            return Err(TrainError::BatchSize(self.batch_size));
        }
        if self.hidden_dim == Some(0) {
            return bad("hidden_dim must be positive");
        }
        Ok(())
    }
}

fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.map(|x| (x - max).exp()).sum::<f64>().ln()
}

fn log_add_exp(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + ((a - m).exp() + (b - m).exp()).ln()
}

fn check_matrix(s: &[Vec<f64>]) -> Result<usize, LossError> {
    let n = s.len();
    if n == 0 {
        return Err(LossError::EmptyBatch);
    }
    for (row, r) in s.iter().enumerate() {
        if r.len() != n {
            return Err(LossError::NotSquare { row, len: r.len(), n });
        }
        if r.iter().any(|x| x.is_nan()) {
            return Err(LossError::NaN);
        }
    }
    Ok(n)
}

/// Hard-negative weights of one row (or column), entry `i` being the
/// positive. The positive's own slot is 0; the others sum to `B-1`.
pub fn hn_weights(sims: &[f64], i: usize, tau: f64, beta: f64) -> Vec<f64> {
    let b = sims.len();
    let lse = log_sum_exp(sims.iter().enumerate().filter(|&(k, _)| k != i).map(|(_, &s)| beta * s / tau));
    sims.iter()
        .enumerate()
        .map(|(j, &s)| if j == i { 0.0 } else { (b - 1) as f64 * (beta * s / tau - lse).exp() })
        .collect()
}

/// `-log(e^{a_i} / (α e^{a_i} + Σ_{j≠i} e^{a_j} w_j))` for one row of logits
/// and its derivative with respect to the raw similarities.
fn term_and_grad(sims: &[f64], i: usize, cfg: &HnNceConfig) -> (f64, Vec<f64>) {
    let b = sims.len();
    let tau = cfg.tau;
    let a_ii = sims[i] / tau;
    let log_pos = cfg.alpha.ln() + a_ii;
    let off = || sims.iter().enumerate().filter(move |&(k, _)| k != i).map(|(_, &s)| s / tau);
    let (lse_up, lse_w) = if b > 1 {
        (log_sum_exp(off().map(|x| (1.0 + cfg.beta) * x)), log_sum_exp(off().map(|x| cfg.beta * x)))
    } else {
        (f64::NEG_INFINITY, 0.0)
    };
    let log_neg = if b > 1 { ((b - 1) as f64).ln() + lse_up - lse_w } else { f64::NEG_INFINITY };
    let log_d = log_add_exp(log_pos, log_neg);
    let loss = log_d - a_ii;

    let p_pos = (log_pos - log_d).exp();
    let p_neg = (log_neg - log_d).exp();
    let mut grad = vec![0.0; b];
    grad[i] = (p_pos - 1.0) / tau;
    for (j, &s) in sims.iter().enumerate() {
        if j == i {
            continue;
        }
        let x = s / tau;
        let sm_up = ((1.0 + cfg.beta) * x - lse_up).exp();
        let sm_w = (cfg.beta * x - lse_w).exp();
        grad[j] = p_neg * ((1.0 + cfg.beta) * sm_up - cfg.beta * sm_w) / tau;
    }
    (loss, grad)
}

pub fn hn_nce_loss(s: &[Vec<f64>], cfg: &HnNceConfig) -> Result<f64, LossError> {
    Ok(hn_nce_loss_and_grad(s, cfg)?.0)
}

/// Loss (a sum over the batch) and `∂L/∂S`.
pub fn hn_nce_loss_and_grad(s: &[Vec<f64>], cfg: &HnNceConfig) -> Result<(f64, Vec<Vec<f64>>), LossError> {
    let n = check_matrix(s)?;
    if n == 1 && cfg.alpha == 0.0 {
        return Err(LossError::EmptyDenominator);
    }
    let mut loss = 0.0;
    let mut grad = vec![vec![0.0; n]; n];
    for i in 0..n {
        let (l, g) = term_and_grad(&s[i], i, cfg);
        loss += l;
        for j in 0..n {
            grad[i][j] += g[j];
        }
        let col: Vec<f64> = (0..n).map(|k| s[k][i]).collect();
        let (l, g) = term_and_grad(&col, i, cfg);
        loss += l;
        for k in 0..n {
            grad[k][i] += g[k];
        }
    }
    Ok((loss, grad))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    pub target_id: String,
    pub query: Vec<f64>,
    pub text: Vec<f64>,
    /// Unit embedding of the target video.
    pub target: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainingBatch<'a> {
    rows: Vec<&'a TrainingExample>,
}

impl<'a> TrainingBatch<'a> {
    /// Rejects batches repeating a target.
    pub fn new(rows: Vec<&'a TrainingExample>) -> Result<Self, TrainError> {
        let mut seen = std::collections::HashSet::new();
        for r in &rows {
            if !seen.insert(r.target_id.as_str()) {
                return Err(TrainError::DuplicateTarget(r.target_id.clone()));
            }
        }
        Ok(TrainingBatch { rows })
    }

    /// Accepts repeated targets (the per-triplet sampling ablation).
    pub fn new_unchecked(rows: Vec<&'a TrainingExample>) -> Self {
        TrainingBatch { rows }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn rows(&self) -> &[&'a TrainingExample] {
        &self.rows
    }
}

fn similarity_matrix(fs: &[Vec<f64>], batch: &TrainingBatch<'_>) -> Vec<Vec<f64>> {
    fs.iter()
        .map(|f| batch.rows.iter().map(|r| f.iter().zip(&r.target).map(|(a, b)| a * b).sum()).collect())
        .collect()
}

/// Mean loss `L/|B|` of a batch.
pub fn batch_loss(head: &FusionHead, batch: &TrainingBatch<'_>, cfg: &HnNceConfig) -> Result<f64, TrainError> {
    let fs = batch
        .rows
        .iter()
        .map(|r| head.forward(&r.query, &r.text))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(hn_nce_loss(&similarity_matrix(&fs, batch), cfg)? / batch.len() as f64)
}

/// Mean loss `L/|B|` and its exact gradient with respect to every head
/// parameter (flat, [`FusionHead::params`] order).
pub fn loss_gradient(
    head: &FusionHead,
    batch: &TrainingBatch<'_>,
    cfg: &HnNceConfig,
) -> Result<(f64, Vec<f64>), TrainError> {
    if batch.is_empty() {
        return Err(LossError::EmptyBatch.into());
    }
    let caches = batch
        .rows
        .iter()
        .map(|r| head.forward_cached(&r.query, &r.text))
        .collect::<Result<Vec<_>, _>>()?;
    let fs: Vec<Vec<f64>> = caches.iter().map(|c| c.f.clone()).collect();
    let (loss, ds) = hn_nce_loss_and_grad(&similarity_matrix(&fs, batch), cfg)?;
    let scale = 1.0 / batch.len() as f64;
    let mut grad = vec![0.0; head.num_params()];
    for (i, cache) in caches.iter().enumerate() {
        let mut g = vec![0.0; head.dim()];
        for (j, r) in batch.rows.iter().enumerate() {
            let w = ds[i][j] * scale;
            for (gm, &hm) in g.iter_mut().zip(&r.target) {
                *gm += w * hm;
            }
        }
        head.backward(cache, &g, &mut grad);
    }
    Ok((loss * scale, grad))
}

/// Draws batches of indices into a triplet list.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    n: usize,
    batch_size: usize,
    mode: BatchMode,
    /// Target id → indices of its triplets, in id order.
    groups: Vec<Vec<usize>>,
}

impl BatchSampler {
    pub fn new<S: AsRef<str>>(target_ids: &[S], batch_size: usize, mode: BatchMode) -> Result<Self, TrainError> {
        if batch_size < 2 {
            return Err(TrainError::BatchSize(batch_size));
        }
        if target_ids.is_empty() {
            return Err(TrainError::NoExamples);
        }
        let mut by_target: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (i, t) in target_ids.iter().enumerate() {
            by_target.entry(t.as_ref()).or_default().push(i);
        }
        Ok(BatchSampler { n: target_ids.len(), batch_size, mode, groups: by_target.into_values().collect() })
    }

    pub fn num_targets(&self) -> usize {
        self.groups.len()
    }

    /// One epoch of batches. `ByTarget` visits every target once; `ByTriplet`
    /// visits every triplet once. The last batch may be short.
    pub fn epoch(&self, rng: &mut impl Rng) -> Vec<Vec<usize>> {
        match self.mode {
            BatchMode::ByTarget => {
                let mut order: Vec<usize> = (0..self.groups.len()).collect();
                order.shuffle(rng);
                order
                    .chunks(self.batch_size)
                    .map(|c| {
                        c.iter()
                            .map(|&g| {
                                let members = &self.groups[g];
                                members[rng.random_range(0..members.len())]
                            })
                            .collect()
                    })
                    .collect()
            }
            BatchMode::ByTriplet => {
                let mut order: Vec<usize> = (0..self.n).collect();
                order.shuffle(rng);
                order.chunks(self.batch_size).map(<[usize]>::to_vec).collect()
            }
        }
    }
}

fn epoch_rng(seed: u64, epoch: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    rng
}

/// Batches for `epochs` epochs, deterministic in `seed`.
pub fn sample_batches<S: AsRef<str>>(
    target_ids: &[S],
    batch_size: usize,
    seed: u64,
    mode: BatchMode,
    epochs: usize,
) -> Result<Vec<Vec<Vec<usize>>>, TrainError> {
    let sampler = BatchSampler::new(target_ids, batch_size, mode)?;
    Ok((0..epochs as u64).map(|e| sampler.epoch(&mut epoch_rng(seed, e + 1))).collect())
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub head: FusionHead,
    /// Mean loss over a fixed set of monitor batches, before training
    /// (index 0) and after each epoch.
    pub loss_curve: Vec<f64>,
}

fn make_batch<'a>(examples: &'a [TrainingExample], idx: &[usize], mode: BatchMode) -> Result<TrainingBatch<'a>, TrainError> {
    let rows = idx.iter().map(|&i| &examples[i]).collect();
    match mode {
        BatchMode::ByTarget => TrainingBatch::new(rows),
        BatchMode::ByTriplet => Ok(TrainingBatch::new_unchecked(rows)),
    }
}

/// Plain gradient descent on `L/|B|`. Batches of a single row are skipped:
/// they carry no negatives.
pub fn train(examples: &[TrainingExample], cfg: &HnNceConfig) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    let first = examples.first().ok_or(TrainError::NoExamples)?;
    let d = first.query.len();
    let head = FusionHead::init(d, cfg.hidden_dim.unwrap_or(2 * d), cfg.seed);
    train_from(head, examples, cfg)
}

pub fn train_from(mut head: FusionHead, examples: &[TrainingExample], cfg: &HnNceConfig) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if examples.is_empty() {
        return Err(TrainError::NoExamples);
    }
    let ids: Vec<&str> = examples.iter().map(|e| e.target_id.as_str()).collect();
    let sampler = BatchSampler::new(&ids, cfg.batch_size, cfg.batch_mode)?;
    let monitor: Vec<Vec<usize>> = sampler
        .epoch(&mut epoch_rng(cfg.seed, 0))
        .into_iter()
        .filter(|b| b.len() > 1)
        .collect();
    let monitor_loss = |head: &FusionHead| -> Result<f64, TrainError> {
        let mut total = 0.0;
        for b in &monitor {
            total += batch_loss(head, &make_batch(examples, b, cfg.batch_mode)?, cfg)?;
        }
        Ok(if monitor.is_empty() { 0.0 } else { total / monitor.len() as f64 })
    };

    let mut curve = vec![monitor_loss(&head)?];
    let mut params = head.params();
    for epoch in 0..cfg.epochs {
        let batches = sampler.epoch(&mut epoch_rng(cfg.seed, epoch as u64 + 1));
        for (bi, idx) in batches.iter().enumerate() {
            if idx.len() < 2 {
                continue;
            }
            let batch = make_batch(examples, idx, cfg.batch_mode)?;
            let (loss, grad) = loss_gradient(&head, &batch, cfg)?;
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(TrainError::Diverged { epoch, batch: bi, lr: cfg.learning_rate });
            }
            for (p, g) in params.iter_mut().zip(&grad) {
                *p -= cfg.learning_rate * g;
            }
            head.set_params(&params).map_err(|_| TrainError::Diverged { epoch, batch: bi, lr: cfg.learning_rate })?;
        }
        let l = monitor_loss(&head)?;
        log::debug!("epoch {} loss {l:.6}", epoch + 1);
        curve.push(l);
    }
    Ok(TrainOutcome { head, loss_curve: curve })
}

/// Worst disagreement between analytic and central-difference gradients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    /// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-6)`.
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub worst_param: usize,
}

/// Compare [`loss_gradient`] against central differences of [`batch_loss`]
/// for every parameter. Results are meaningless when a hidden
/// pre-activation lies within `step` of zero (see
/// [`FusionHead::pre_activations`]).
pub fn finite_difference_check(
    head: &FusionHead,
    batch: &TrainingBatch<'_>,
    cfg: &HnNceConfig,
    step: f64,
) -> Result<GradCheck, TrainError> {
    let (_, analytic) = loss_gradient(head, batch, cfg)?;
    let p0 = head.params();
    let mut probe = head.clone();
    let mut out = GradCheck { max_rel_error: 0.0, max_abs_error: 0.0, worst_param: 0 };
    let mut p = p0.clone();
    for k in 0..p0.len() {
        p[k] = p0[k] + step;
        probe.set_params(&p)?;
        let up = batch_loss(&probe, batch, cfg)?;
        p[k] = p0[k] - step;
        probe.set_params(&p)?;
        let down = batch_loss(&probe, batch, cfg)?;
        p[k] = p0[k];
        let numeric = (up - down) / (2.0 * step);
        let abs = (analytic[k] - numeric).abs();
        let rel = abs / analytic[k].abs().max(numeric.abs()).max(1e-6);
        out.max_abs_error = out.max_abs_error.max(abs);
        if rel > out.max_rel_error {
            out.max_rel_error = rel;
            out.worst_param = k;
        }
    }
    Ok(out)
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CVHD";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub dim: usize,
    pub hidden_dim: usize,
    pub n_params: usize,
    pub seed: u64,
    pub config: HnNceConfig,
}

/// `"CVHD" | u32 version | u32 header_len | JSON header | n_params × f32`,
/// little-endian. Parameters are stored in [`FusionHead::params`] order.
pub fn checkpoint_bytes(head: &FusionHead, cfg: &HnNceConfig) -> Vec<u8> {
    let header = CheckpointHeader {
        dim: head.d,
        hidden_dim: head.h,
        n_params: head.num_params(),
        seed: cfg.seed,
        config: cfg.clone(),
    };
    let json = serde_json::to_vec(&header).expect("serializable header");
    let mut out = Vec::with_capacity(12 + json.len() + 4 * header.n_params);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for p in head.params() {
        out.extend_from_slice(&(p as f32).to_le_bytes());
    }
    out
}

pub fn parse_checkpoint(bytes: &[u8]) -> Result<(FusionHead, CheckpointHeader), CheckpointError> {
    let take = |from: usize, n: usize| bytes.get(from..from + n).ok_or(CheckpointError::Truncated);
    if take(0, 4)? != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let u32_at = |at| -> Result<u32, CheckpointError> { Ok(u32::from_le_bytes(take(at, 4)?.try_into().expect("4 bytes"))) };
    let version = u32_at(4)?;
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Version(version));
    }
    let hlen = u32_at(8)? as usize;
    let header: CheckpointHeader = serde_json::from_slice(take(12, hlen)?)?;
    let blob = &bytes[12 + hlen..];
    if !blob.len().is_multiple_of(4) {
        return Err(CheckpointError::Truncated);
    }
    let params: Vec<f64> = blob
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    if params.len() != header.n_params {
        return Err(CheckpointError::ParamCount { expected: header.n_params, got: params.len() });
    }
    let mut head = FusionHead::init(header.dim, header.hidden_dim, 0);
    head.set_params(&params)?;
    Ok((head, header))
}

pub fn save_checkpoint(path: &Path, head: &FusionHead, cfg: &HnNceConfig) -> Result<(), CheckpointError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&checkpoint_bytes(head, cfg))?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(FusionHead, CheckpointHeader), CheckpointError> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    parse_checkpoint(&bytes)
}

/// Round every parameter through f32, as a checkpoint round trip does.
pub fn quantize_f32(head: &FusionHead) -> FusionHead {
    let mut q = head.clone();
    let p: Vec<f64> = head.params().into_iter().map(|x| x as f32 as f64).collect();
    q.set_params(&p).expect("same shape");
    q
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::StandardNormal;

    fn cfg() -> HnNceConfig {
        HnNceConfig::default()
    }

    fn unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
        let mut v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        assert!(crate::embedspace::normalize_f64(&mut v));
        v
    }

    #[test]
    fn constant_head() {
        let d = 3;
        let h = 6;
        let mut b2 = vec![0.0; d];
        b2[0] = 1.0;
        let head = FusionHead::from_parts(d, h, vec![0.3; 2 * d * h], vec![0.1; h], vec![0.0; h * d], b2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..5 {
            assert_eq!(head.forward(&unit(&mut rng, d), &unit(&mut rng, d)).unwrap(), [1.0, 0.0, 0.0]);
        }
    }

    #[test]
    fn passthrough_head_equals_average_fusion() {
        // hidden = [q+t, -(q+t)], output = relu(u) - relu(-u) = q+t
        let d = 2;
        let h = 4;
        let mut w1 = vec![0.0; 2 * d * h];
        for j in 0..2 * d {
            let m = j % d;
            w1[j * h + m] = 1.0;
            w1[j * h + d + m] = -1.0;
        }
        let mut w2 = vec![0.0; h * d];
        for m in 0..d {
            w2[m * d + m] = 1.0;
            w2[(d + m) * d + m] = -1.0;
        }
        let head = FusionHead::from_parts(d, h, w1, vec![0.0; h], w2, vec![0.0; d]).unwrap();
        let q = [0.6, 0.8];
        let t = [1.0, 0.0];
        let f = head.forward(&q, &t).unwrap();
        let s = [1.6f64, 0.8];
        let n = (s[0] * s[0] + s[1] * s[1]).sqrt();
        assert!((f[0] - s[0] / n).abs() < 1e-12 && (f[1] - s[1] / n).abs() < 1e-12);
    }

    #[test]
    fn forward_errors() {
        let head = FusionHead::init(3, 6, 1);
        assert!(matches!(head.forward(&[1.0, 0.0], &[1.0, 0.0, 0.0]), Err(HeadError::Shape { .. })));
        let zero = FusionHead::from_parts(1, 1, vec![0.0; 2], vec![0.0], vec![0.0], vec![0.0]).unwrap();
        assert!(matches!(zero.forward(&[1.0], &[1.0]), Err(HeadError::ZeroOutput)));
        assert!(FusionHead::from_parts(1, 1, vec![0.0; 3], vec![0.0], vec![0.0], vec![0.0]).is_err());
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let a = FusionHead::init(4, 8, 7);
        assert_eq!(a, FusionHead::init(4, 8, 7));
        assert_ne!(a, FusionHead::init(4, 8, 8));
        let b1 = 1.0 / 8f64.sqrt();
        assert!(a.w1.iter().all(|w| w.abs() <= b1));
    }

    #[test]
    fn single_row_loss() {
        assert_eq!(hn_nce_loss(&[vec![0.3]], &cfg()).unwrap(), 0.0);
        let c = HnNceConfig { alpha: 0.0, ..cfg() };
        assert!(matches!(hn_nce_loss(&[vec![0.3]], &c), Err(LossError::EmptyDenominator)));
    }

    #[test]
    fn loss_input_errors() {
        assert!(matches!(hn_nce_loss(&[vec![0.1, 0.2]], &cfg()), Err(LossError::NotSquare { .. })));
        assert!(matches!(
            hn_nce_loss(&[vec![0.1, f64::NAN], vec![0.0, 0.1]], &cfg()),
            Err(LossError::NaN)
        ));
    }

    #[test]
    fn weights_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for b in 2..9 {
            let row: Vec<f64> = (0..b).map(|_| rng.random_range(-1.0..1.0)).collect();
            for i in 0..b {
                let w = hn_weights(&row, i, 0.07, 0.5);
                assert_eq!(w[i], 0.0);
                assert!((w.iter().sum::<f64>() - (b - 1) as f64).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn loss_gradient_wrt_s_matches_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 5;
        let s: Vec<Vec<f64>> = (0..n).map(|_| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let (_, g) = hn_nce_loss_and_grad(&s, &cfg()).unwrap();
        let eps = 1e-6;
        for i in 0..n {
            for j in 0..n {
                let mut p = s.clone();
                p[i][j] += eps;
                let mut m = s.clone();
                m[i][j] -= eps;
                let fd = (hn_nce_loss(&p, &cfg()).unwrap() - hn_nce_loss(&m, &cfg()).unwrap()) / (2.0 * eps);
                assert!((fd - g[i][j]).abs() < 1e-5 * (1.0 + fd.abs()), "{i},{j}: {fd} vs {}", g[i][j]);
            }
        }
    }

    #[test]
    fn frozen_output_gives_zero_upstream_gradient() {
        // W2 = 0: nothing upstream of the output layer affects f
        let d = 3;
        let h = 4;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut head = FusionHead::init(d, h, 2);
        head.w2 = vec![0.0; h * d];
        let ex: Vec<TrainingExample> = (0..3)
            .map(|i| TrainingExample {
                target_id: i.to_string(),
                query: unit(&mut rng, d),
                text: unit(&mut rng, d),
                target: unit(&mut rng, d),
            })
            .collect();
        let batch = TrainingBatch::new(ex.iter().collect()).unwrap();
        let (_, g) = loss_gradient(&head, &batch, &cfg()).unwrap();
        assert!(g[..2 * d * h + h].iter().all(|&x| x == 0.0));
        assert!(g[2 * d * h + h..].iter().any(|&x| x != 0.0));
    }

    #[test]
    fn batch_rejects_repeated_target() {
        let e = TrainingExample { target_id: "t".into(), query: vec![1.0], text: vec![1.0], target: vec![1.0] };
        assert!(matches!(TrainingBatch::new(vec![&e, &e]), Err(TrainError::DuplicateTarget(_))));
        assert_eq!(TrainingBatch::new_unchecked(vec![&e, &e]).len(), 2);
    }

    #[test]
    fn sampler_shapes() {
        let ids: Vec<String> = (0..10).map(|i| format!("t{i}")).collect();
        let epochs = sample_batches(&ids, 4, 0, BatchMode::ByTarget, 3).unwrap();
        for e in &epochs {
            assert_eq!(e.iter().map(Vec::len).collect::<Vec<_>>(), [4, 4, 2]);
            let mut all: Vec<usize> = e.concat();
            all.sort_unstable();
            assert_eq!(all, (0..10).collect::<Vec<_>>());
        }
        assert_eq!(epochs, sample_batches(&ids, 4, 0, BatchMode::ByTarget, 3).unwrap());
        assert!(matches!(sample_batches(&ids, 1, 0, BatchMode::ByTarget, 1), Err(TrainError::BatchSize(1))));
    }

    #[test]
    fn by_triplet_can_repeat_targets() {
        let ids = ["a", "a", "a", "b"];
        let repeated = (0..50).any(|s| {
            sample_batches(&ids, 4, s, BatchMode::ByTriplet, 1).unwrap()[0]
                .iter()
                .any(|b| b.iter().filter(|&&i| ids[i] == "a").count() > 1)
        });
        assert!(repeated);
    }

    #[test]
    fn checkpoint_round_trip() {
        let head = FusionHead::init(4, 8, 3);
        let bytes = checkpoint_bytes(&head, &cfg());
        let (back, header) = parse_checkpoint(&bytes).unwrap();
        assert_eq!(back, quantize_f32(&head));
        assert_eq!((header.dim, header.hidden_dim), (4, 8));
        assert_eq!(checkpoint_bytes(&back, &cfg()), bytes);
        assert!(matches!(parse_checkpoint(&bytes[..bytes.len() - 4]), Err(CheckpointError::ParamCount { .. })));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(parse_checkpoint(&bad), Err(CheckpointError::BadMagic)));
    }

    fn toy_examples(seed: u64, n_targets: usize, d: usize) -> Vec<TrainingExample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n_targets)
            .map(|i| {
                let query = unit(&mut rng, d);
                let text = unit(&mut rng, d);
                let mut target: Vec<f64> = query.iter().zip(&text).map(|(a, b)| a + b).collect();
                crate::embedspace::normalize_f64(&mut target);
                TrainingExample { target_id: format!("t{i}"), query, text, target }
            })
            .collect()
    }

    #[test]
    fn zero_learning_rate_keeps_everything() {
        let ex = toy_examples(1, 20, 4);
        let c = HnNceConfig { learning_rate: 0.0, epochs: 4, batch_size: 8, ..cfg() };
        let out = train(&ex, &c).unwrap();
        assert_eq!(out.head, FusionHead::init(4, 8, 0));
        assert!(out.loss_curve.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn training_decreases_loss_and_is_deterministic() {
        let ex = toy_examples(2, 64, 8);
        let c = HnNceConfig { epochs: 5, batch_size: 16, learning_rate: 0.05, ..cfg() };
        let a = train(&ex, &c).unwrap();
        assert!(a.loss_curve.windows(2).all(|w| w[1] < w[0]), "{:?}", a.loss_curve);
        let b = train(&ex, &c).unwrap();
        assert_eq!(
            a.loss_curve.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            b.loss_curve.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn divergence_is_reported() {
        let ex = toy_examples(3, 16, 4);
        let c = HnNceConfig { epochs: 50, batch_size: 8, learning_rate: 1e300, ..cfg() };
        assert!(matches!(train(&ex, &c), Err(TrainError::Diverged { .. }) | Err(TrainError::Head(_))));
    }
}
