//! The volatility neural process.
//!
//! Context quotes are embedded by an MLP plus a fixed sinusoidal encoding of
//! their coordinates and contextualised by a stack of Pre-LN self-attention
//! blocks. Each target coordinate starts from its own sinusoidal encoding and
//! queries the contextualised set through Pre-LN cross-attention blocks; a
//! final MLP emits the mean and log-variance of a Gaussian over the implied
//! volatility at that target.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};
use crate::types::{Coordinate, Quote};

pub const CHECKPOINT_FORMAT: &str = "volnp-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Hidden width of every representation.
    pub d_r: usize,
    pub encoder_blocks: usize,
    pub decoder_blocks: usize,
    pub heads: usize,
    /// Hidden layers in the embedding and prediction MLPs.
    pub mlp_layers: usize,
    pub mlp_width: usize,
    /// Feed-forward expansion inside attention blocks.
    pub ffn_mult: usize,
    /// Coordinates are divided by these before the sinusoidal encoding, so
    /// one radian of the fastest channel spans `k_scale` in log-moneyness.
    pub k_scale: f64,
    pub tau_scale: f64,
    /// Coordinates are divided by these before entering the embedding MLP.
    pub feature_k_scale: f64,
    pub feature_tau_scale: f64,
    /// Vols enter the encoder as `(vol - vol_center) / vol_scale`; the mean head
    /// is mapped back the same way.
    pub vol_center: f64,
    pub vol_scale: f64,
    pub ln_eps: f64,
    pub log_var_min: f64,
    pub log_var_max: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_r: 128,
            encoder_blocks: 3,
            decoder_blocks: 3,
            heads: 4,
            mlp_layers: 3,
            mlp_width: 128,
            ffn_mult: 4,
            k_scale: 0.01,
            tau_scale: 0.01,
            feature_k_scale: 0.5,
            feature_tau_scale: 2.0,
            vol_center: 0.2,
            vol_scale: 0.1,
            ln_eps: 1e-5,
            log_var_min: -12.0,
            log_var_max: 4.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [self.d_r, self.heads, self.mlp_width, self.ffn_mult];
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::Domain("model dimensions must be at least 1".into()));
        }
        if self.d_r % self.heads != 0 {
            return Err(Error::Domain(format!("d_r={} not divisible by heads={}", self.d_r, self.heads)));
        }
        if self.d_r % 4 != 0 {
            return Err(Error::Domain(format!("d_r={} must be a multiple of 4 for the 2-D encoding", self.d_r)));
        }
        let scales = [self.k_scale, self.tau_scale, self.feature_k_scale, self.feature_tau_scale, self.vol_scale];
        if !scales.iter().all(|&s| s > 0.0) {
            return Err(Error::Domain("scales must be positive".into()));
        }
        if self.log_var_min >= self.log_var_max {
            return Err(Error::Domain("log-variance clamp range is empty".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_r / self.heads
    }
}

/// Gaussian prediction for one target.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictiveDistribution {
    pub mu: f64,
    pub log_var: f64,
}

impl PredictiveDistribution {
    pub fn std_dev(&self) -> f64 {
        (0.5 * self.log_var).exp()
    }
}

// ---------------------------------------------------------------------------
// Parameter trees. Generic over the leaf so the same layout holds stored
// tensors, tape handles, gradients and optimizer moments.

#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    pub weight: T,
    pub bias: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<T> {
    pub layers: Vec<Linear<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Norm<T> {
    pub gain: T,
    pub bias: T,
}

/// Per-head projections plus the shared output projection.
#[derive(Debug, Clone, PartialEq)]
pub struct Attention<T> {
    pub w_q: Vec<T>,
    pub w_k: Vec<T>,
    pub w_v: Vec<T>,
    pub w_out: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block<T> {
    pub ln_query: Norm<T>,
    /// Normalisation of the keys/values side; only cross-attention blocks have one.
    pub ln_context: Option<Norm<T>>,
    pub attention: Attention<T>,
    pub ln_ffn: Norm<T>,
    pub ffn: Mlp<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T = Tensor> {
    pub phi_e: Mlp<T>,
    pub encoder: Vec<Block<T>>,
    pub decoder: Vec<Block<T>>,
    pub phi_d: Mlp<T>,
}

impl<T> Linear<T> {
    fn map<U>(&self, f: &mut dyn FnMut(&T) -> U) -> Linear<U> {
        Linear { weight: f(&self.weight), bias: f(&self.bias) }
    }
    fn visit<'a>(&'a self, name: &str, f: &mut dyn FnMut(String, &'a T)) {
        f(format!("{name}.weight"), &self.weight);
        f(format!("{name}.bias"), &self.bias);
    }
    fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut T>) {
        out.push(&mut self.weight);
        out.push(&mut self.bias);
    }
}

impl<T> Mlp<T> {
    fn map<U>(&self, f: &mut dyn FnMut(&T) -> U) -> Mlp<U> {
        Mlp { layers: self.layers.iter().map(|l| l.map(f)).collect() }
    }
    fn visit<'a>(&'a self, name: &str, f: &mut dyn FnMut(String, &'a T)) {
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&format!("{name}.{i}"), f);
        }
    }
    fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut T>) {
        self.layers.iter_mut().for_each(|l| l.visit_mut(out));
    }
}

impl<T> Norm<T> {
    fn map<U>(&self, f: &mut dyn FnMut(&T) -> U) -> Norm<U> {
        Norm { gain: f(&self.gain), bias: f(&self.bias) }
    }
    fn visit<'a>(&'a self, name: &str, f: &mut dyn FnMut(String, &'a T)) {
        f(format!("{name}.gain"), &self.gain);
        f(format!("{name}.bias"), &self.bias);
    }
    fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut T>) {
        out.push(&mut self.gain);
        out.push(&mut self.bias);
    }
}

impl<T> Attention<T> {
    fn map<U>(&self, f: &mut dyn FnMut(&T) -> U) -> Attention<U> {
        // Head-major, matching `visit`.
        let (mut w_q, mut w_k, mut w_v) = (Vec::new(), Vec::new(), Vec::new());
        for h in 0..self.w_q.len() {
            w_q.push(f(&self.w_q[h]));
            w_k.push(f(&self.w_k[h]));
            w_v.push(f(&self.w_v[h]));
        }
        Attention { w_q, w_k, w_v, w_out: f(&self.w_out) }
    }
    fn visit<'a>(&'a self, name: &str, f: &mut dyn FnMut(String, &'a T)) {
        for h in 0..self.w_q.len() {
            f(format!("{name}.head{h}.w_q"), &self.w_q[h]);
            f(format!("{name}.head{h}.w_k"), &self.w_k[h]);
            f(format!("{name}.head{h}.w_v"), &self.w_v[h]);
        }
        f(format!("{name}.w_out"), &self.w_out);
    }
    fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut T>) {
        for ((q, k), v) in self.w_q.iter_mut().zip(self.w_k.iter_mut()).zip(self.w_v.iter_mut()) {
            out.push(q);
            out.push(k);
            out.push(v);
        }
        out.push(&mut self.w_out);
    }
}

impl<T> Block<T> {
    fn map<U>(&self, f: &mut dyn FnMut(&T) -> U) -> Block<U> {
        Block {
            ln_query: self.ln_query.map(f),
            ln_context: self.ln_context.as_ref().map(|n| n.map(f)),
            attention: self.attention.map(f),
            ln_ffn: self.ln_ffn.map(f),
            ffn: self.ffn.map(f),
        }
    }
    fn visit<'a>(&'a self, name: &str, f: &mut dyn FnMut(String, &'a T)) {
        self.ln_query.visit(&format!("{name}.ln_query"), f);
        if let Some(n) = &self.ln_context {
            n.visit(&format!("{name}.ln_context"), f);
        }
        self.attention.visit(&format!("{name}.attn"), f);
        self.ln_ffn.visit(&format!("{name}.ln_ffn"), f);
        self.ffn.visit(&format!("{name}.ffn"), f);
    }
    fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut T>) {
        self.ln_query.visit_mut(out);
        if let Some(n) = &mut self.ln_context {
            n.visit_mut(out);
        }
        self.attention.visit_mut(out);
        self.ln_ffn.visit_mut(out);
        self.ffn.visit_mut(out);
    }
}

impl<T> ModelParams<T> {
    /// Same layout with every leaf transformed, in [`ModelParams::named`] order.
    pub fn map<U>(&self, f: &mut dyn FnMut(&T) -> U) -> ModelParams<U> {
        ModelParams {
            phi_e: self.phi_e.map(f),
            encoder: self.encoder.iter().map(|b| b.map(f)).collect(),
            decoder: self.decoder.iter().map(|b| b.map(f)).collect(),
            phi_d: self.phi_d.map(f),
        }
    }

    /// Leaves with stable dotted names, in a fixed order.
    pub fn named(&self) -> Vec<(String, &T)> {
        let mut out: Vec<(String, &T)> = Vec::new();
        let mut push = |name: String, t| out.push((name, t));
        self.phi_e.visit("phi_e", &mut push);
        for (i, b) in self.encoder.iter().enumerate() {
            b.visit(&format!("encoder.{i}"), &mut push);
        }
        for (i, b) in self.decoder.iter().enumerate() {
            b.visit(&format!("decoder.{i}"), &mut push);
        }
        self.phi_d.visit("phi_d", &mut push);
        out
    }

    pub fn leaves(&self) -> Vec<&T> {
        self.named().into_iter().map(|(_, t)| t).collect()
    }

    pub fn leaves_mut(&mut self) -> Vec<&mut T> {
        let mut out = Vec::new();
        self.phi_e.visit_mut(&mut out);
        for b in &mut self.encoder {
            b.visit_mut(&mut out);
        }
        for b in &mut self.decoder {
            b.visit_mut(&mut out);
        }
        self.phi_d.visit_mut(&mut out);
        out
    }
}

impl ModelParams<Tensor> {
    pub fn num_parameters(&self) -> usize {
        self.leaves().iter().map(|t| t.len()).sum()
    }

    pub fn zeros_like(&self) -> Self {
        self.map(&mut |t| Tensor::zeros(t.rows(), t.cols()))
    }

    pub fn all_finite(&self) -> bool {
        self.leaves().iter().all(|t| t.data().iter().all(|v| v.is_finite()))
    }
}

// ---------------------------------------------------------------------------
// Initialisation

fn uniform(rows: usize, cols: usize, bound: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::from_vec(rows, cols, data).expect("shape")
}

fn linear(fan_in: usize, fan_out: usize, gain: f64, rng: &mut ChaCha8Rng) -> Linear<Tensor> {
    let bound = gain / (fan_in as f64).sqrt();
    Linear { weight: uniform(fan_in, fan_out, bound, rng), bias: Tensor::zeros(1, fan_out) }
}

fn mlp(dims: &[usize], last_gain: f64, rng: &mut ChaCha8Rng) -> Mlp<Tensor> {
    let n = dims.len() - 1;
    let layers = (0..n)
        .map(|i| linear(dims[i], dims[i + 1], if i + 1 == n { last_gain } else { 1.0 }, rng))
        .collect();
    Mlp { layers }
}

fn norm(d: usize) -> Norm<Tensor> {
    Norm { gain: Tensor::filled(1, d, 1.0), bias: Tensor::zeros(1, d) }
}

fn block(cfg: &ModelConfig, cross: bool, rng: &mut ChaCha8Rng) -> Block<Tensor> {
    let (d, dk) = (cfg.d_r, cfg.head_dim());
    let bound = 1.0 / (d as f64).sqrt();
    let heads = |rng: &mut ChaCha8Rng| (0..cfg.heads).map(|_| uniform(d, dk, bound, rng)).collect::<Vec<_>>();
    let w_q = heads(rng);
    let w_k = heads(rng);
    let w_v = heads(rng);
    let w_out = uniform(cfg.heads * dk, d, 1.0 / ((cfg.heads * dk) as f64).sqrt(), rng);
    Block {
        ln_query: norm(d),
        ln_context: cross.then(|| norm(d)),
        attention: Attention { w_q, w_k, w_v, w_out },
        ln_ffn: norm(d),
        ffn: mlp(&[d, cfg.ffn_mult * d, d], 1.0, rng),
    }
}

/// Fan-in scaled uniform weights, zero biases, unit LayerNorm gains, and a
/// near-zero prediction layer so that the initial mean sits at `vol_center`
/// and the initial log-variance near zero.
pub fn init_params(cfg: &ModelConfig, rng_seed: u64) -> Result<ModelParams> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let hidden = vec![cfg.mlp_width; cfg.mlp_layers];
    let mut e_dims = vec![3];
    e_dims.extend(&hidden);
    e_dims.push(cfg.d_r);
    let mut d_dims = vec![cfg.d_r];
    d_dims.extend(&hidden);
    d_dims.push(2);

    let phi_e = mlp(&e_dims, 1.0, &mut rng);
    let encoder = (0..cfg.encoder_blocks).map(|_| block(cfg, false, &mut rng)).collect();
    let decoder = (0..cfg.decoder_blocks).map(|_| block(cfg, true, &mut rng)).collect();
    let phi_d = mlp(&d_dims, 1e-3, &mut rng);
    Ok(ModelParams { phi_e, encoder, decoder, phi_d })
}

// ---------------------------------------------------------------------------
// Positional encoding

/// Fixed 2-D sinusoidal encoding: the first `d_r/2` entries encode the scaled
/// log-moneyness, the last `d_r/2` the scaled maturity, each as interleaved
/// `sin, cos` pairs over frequencies `10000^(-2i/(d_r/2))`.
pub fn positional_encoding(coord: &Coordinate, cfg: &ModelConfig) -> Vec<f64> {
    let half = cfg.d_r / 2;
    let mut out = vec![0.0; cfg.d_r];
    let scaled = [coord.k / cfg.k_scale, coord.tau / cfg.tau_scale];
    for (axis, &x) in scaled.iter().enumerate() {
        for i in 0..half / 2 {
            let freq = 10000f64.powf(-2.0 * i as f64 / half as f64);
            out[axis * half + 2 * i] = (x * freq).sin();
            out[axis * half + 2 * i + 1] = (x * freq).cos();
        }
    }
    out
}

fn encoding_matrix(coords: &[Coordinate], cfg: &ModelConfig) -> Tensor {
    let data = coords.iter().flat_map(|c| positional_encoding(c, cfg)).collect();
    Tensor::from_vec(coords.len(), cfg.d_r, data).expect("shape")
}

/// Encoder input rows `[k / feature_k_scale, tau / feature_tau_scale, (vol - center) / scale]`.
fn context_features(context: &[Quote], cfg: &ModelConfig) -> Tensor {
    let data = context
        .iter()
        .flat_map(|q| [q.k() / cfg.feature_k_scale, q.tau() / cfg.feature_tau_scale, (q.vol - cfg.vol_center) / cfg.vol_scale])
        .collect();
    Tensor::from_vec(context.len(), 3, data).expect("shape")
}

// ---------------------------------------------------------------------------
// Forward pass on a tape

/// Outputs of one forward pass, as tape handles.
pub struct ForwardPass {
    /// `N x d_r` contextualised context representations.
    pub encoded: Var,
    /// `M x 1` predictive means.
    pub mu: Var,
    /// `M x 1` clamped log-variances.
    pub log_var: Var,
    /// Attention weights per block and head: encoder blocks first, then decoder.
    pub attention: Vec<Vec<Var>>,
}

fn mlp_forward(tape: &mut Tape, mlp: &Mlp<Var>, x: Var) -> Result<Var> {
    let mut h = x;
    let last = mlp.layers.len() - 1;
    for (i, layer) in mlp.layers.iter().enumerate() {
        h = tape.matmul(h, layer.weight)?;
        h = tape.add_row(h, layer.bias)?;
        if i < last {
            h = tape.gelu(h);
        }
    }
    Ok(h)
}

fn norm_forward(tape: &mut Tape, n: &Norm<Var>, x: Var, eps: f64) -> Result<Var> {
    tape.layer_norm(x, n.gain, n.bias, eps)
}

/// Multi-head attention; returns the output and each head's weight matrix.
fn mha(tape: &mut Tape, attn: &Attention<Var>, queries: Var, keys: Var, head_dim: usize) -> Result<(Var, Vec<Var>)> {
    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut outputs = Vec::with_capacity(attn.w_q.len());
    let mut weights = Vec::with_capacity(attn.w_q.len());
    for h in 0..attn.w_q.len() {
        let q = tape.matmul(queries, attn.w_q[h])?;
        let k = tape.matmul(keys, attn.w_k[h])?;
        let v = tape.matmul(keys, attn.w_v[h])?;
        let scores = tape.matmul_nt(q, k)?;
        let scores = tape.scale(scores, scale);
        let a = tape.row_softmax(scores);
        outputs.push(tape.matmul(a, v)?);
        weights.push(a);
    }
    let joined = tape.concat_cols(&outputs)?;
    Ok((tape.matmul(joined, attn.w_out)?, weights))
}

/// Pre-LN block. Self-attention when `context` is `None`, cross-attention otherwise.
fn block_forward(
    tape: &mut Tape,
    blk: &Block<Var>,
    x: Var,
    context: Option<Var>,
    cfg: &ModelConfig,
) -> Result<(Var, Vec<Var>)> {
    let q = norm_forward(tape, &blk.ln_query, x, cfg.ln_eps)?;
    let kv = match (context, &blk.ln_context) {
        (Some(c), Some(n)) => norm_forward(tape, n, c, cfg.ln_eps)?,
        (Some(c), None) => c,
        (None, _) => q,
    };
    let (attended, weights) = mha(tape, &blk.attention, q, kv, cfg.head_dim())?;
    let x = tape.add(x, attended)?;
    let normed = norm_forward(tape, &blk.ln_ffn, x, cfg.ln_eps)?;
    let ff = mlp_forward(tape, &blk.ffn, normed)?;
    Ok((tape.add(x, ff)?, weights))
}

/// Record the full encoder/decoder forward pass on `tape`.
pub fn forward(
    tape: &mut Tape,
    params: &ModelParams<Var>,
    cfg: &ModelConfig,
    context: &[Quote],
    targets: &[Coordinate],
) -> Result<ForwardPass> {
    if context.is_empty() {
        return Err(Error::InsufficientQuotes { needed: 1, available: 0 });
    }
    if targets.is_empty() {
        return Err(Error::Domain("at least one target coordinate is required".into()));
    }
    let mut attention = Vec::new();

    let features = tape.constant(context_features(context, cfg));
    let context_coords: Vec<Coordinate> = context.iter().map(|q| q.coord).collect();
    let pe = tape.constant(encoding_matrix(&context_coords, cfg));
    let embedded = mlp_forward(tape, &params.phi_e, features)?;
    let mut h = tape.add(embedded, pe)?;
    for blk in &params.encoder {
        let (next, w) = block_forward(tape, blk, h, None, cfg)?;
        h = next;
        attention.push(w);
    }

    let mut z = tape.constant(encoding_matrix(targets, cfg));
    for blk in &params.decoder {
        let (next, w) = block_forward(tape, blk, z, Some(h), cfg)?;
        z = next;
        attention.push(w);
    }
    let out = mlp_forward(tape, &params.phi_d, z)?;
    let mu_raw = tape.slice_cols(out, 0, 1)?;
    let mu_scaled = tape.scale(mu_raw, cfg.vol_scale);
    let mu = tape.add_scalar(mu_scaled, cfg.vol_center);
    let lv_raw = tape.slice_cols(out, 1, 2)?;
    let log_var = tape.clamp(lv_raw, cfg.log_var_min, cfg.log_var_max);
    Ok(ForwardPass { encoded: h, mu, log_var, attention })
}

/// `0.5 * sum_j [exp(-log_var_j) (y_j - mu_j)^2 + log_var_j]` on the tape.
pub fn nll_on_tape(tape: &mut Tape, mu: Var, log_var: Var, targets: &[Quote]) -> Result<Var> {
    let m = tape.shape(mu).0;
    if m != targets.len() || tape.shape(log_var).0 != m {
        return Err(Error::LengthMismatch(m, targets.len()));
    }
    let y = tape.constant(Tensor::from_vec(m, 1, targets.iter().map(|q| q.vol).collect())?);
    let diff = tape.sub(y, mu)?;
    let sq = tape.mul(diff, diff)?;
    let neg = tape.scale(log_var, -1.0);
    let precision = tape.exp(neg);
    let weighted = tape.mul(precision, sq)?;
    let terms = tape.add(weighted, log_var)?;
    let total = tape.sum(terms);
    Ok(tape.scale(total, 0.5))
}

/// Negative log-likelihood of `targets` under `preds`, without the 2*pi constant.
pub fn nll_loss(preds: &[PredictiveDistribution], targets: &[Quote]) -> Result<f64> {
    if preds.len() != targets.len() {
        return Err(Error::LengthMismatch(preds.len(), targets.len()));
    }
    if preds.is_empty() {
        return Err(Error::LengthMismatch(0, 0));
    }
    Ok(0.5
        * preds
            .iter()
            .zip(targets)
            .map(|(p, t)| (-p.log_var).exp() * (t.vol - p.mu).powi(2) + p.log_var)
            .sum::<f64>())
}

// ---------------------------------------------------------------------------
// Model wrapper

/// Configuration plus parameters: a deployable surface model.
#[derive(Debug, Clone, PartialEq)]
pub struct VolNp {
    pub config: ModelConfig,
    pub params: ModelParams,
}

/// Loss value and parameter gradients for one task.
pub struct TaskGradient {
    pub loss: f64,
    pub n_targets: usize,
    pub grads: ModelParams,
}

impl VolNp {
    pub fn new(config: ModelConfig, rng_seed: u64) -> Result<Self> {
        let params = init_params(&config, rng_seed)?;
        Ok(Self { config, params })
    }

    fn constant_params(&self, tape: &mut Tape) -> ModelParams<Var> {
        self.params.map(&mut |t| tape.constant(t.clone()))
    }

    /// Contextualised representation `H` of the context set (`N x d_r`).
    pub fn encode(&self, context: &[Quote]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.constant_params(&mut tape);
        let coord = [context.first().map(|q| q.coord).ok_or(Error::InsufficientQuotes { needed: 1, available: 0 })?];
        let pass = forward(&mut tape, &p, &self.config, context, &coord)?;
        Ok(tape.value(pass.encoded).clone())
    }

    /// Predictive distributions at `targets` given `context`.
    pub fn predict(&self, context: &[Quote], targets: &[Coordinate]) -> Result<Vec<PredictiveDistribution>> {
        Ok(self.predict_with_attention(context, targets)?.0)
    }

    /// Predictions plus every attention weight matrix (encoder blocks, then decoder blocks).
    pub fn predict_with_attention(
        &self,
        context: &[Quote],
        targets: &[Coordinate],
    ) -> Result<(Vec<PredictiveDistribution>, Vec<Vec<Tensor>>)> {
        let mut tape = Tape::new();
        let p = self.constant_params(&mut tape);
        let pass = forward(&mut tape, &p, &self.config, context, targets)?;
        let mu = tape.value(pass.mu).data();
        let lv = tape.value(pass.log_var).data();
        let preds = mu.iter().zip(lv).map(|(&mu, &log_var)| PredictiveDistribution { mu, log_var }).collect();
        let maps = pass
            .attention
            .iter()
            .map(|heads| heads.iter().map(|&a| tape.value(a).clone()).collect())
            .collect();
        Ok((preds, maps))
    }

    /// Forward and backward pass of the task NLL.
    pub fn task_gradient(&self, context: &[Quote], targets: &[Quote]) -> Result<TaskGradient> {
        let mut tape = Tape::new();
        let p = self.params.map(&mut |t| tape.param(t.clone()));
        let coords: Vec<Coordinate> = targets.iter().map(|q| q.coord).collect();
        let pass = forward(&mut tape, &p, &self.config, context, &coords)?;
        let loss = nll_on_tape(&mut tape, pass.mu, pass.log_var, targets)?;
        tape.backward(loss)?;
        let grads = p.map(&mut |&v| tape.grad_tensor(v));
        Ok(TaskGradient { loss: tape.value(loss).item(), n_targets: targets.len(), grads })
    }

    pub fn task_loss(&self, context: &[Quote], targets: &[Quote]) -> Result<f64> {
        let coords: Vec<Coordinate> = targets.iter().map(|q| q.coord).collect();
        nll_loss(&self.predict(context, &coords)?, targets)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            tensors: self
                .params
                .named()
                .into_iter()
                .map(|(name, t)| NamedTensor { name, shape: [t.rows(), t.cols()], data: t.data().to_vec() })
                .collect(),
        }
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        if ckpt.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!("unknown format {:?}", ckpt.format)));
        }
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {}", ckpt.version)));
        }
        let template = init_params(&ckpt.config, 0)?;
        let names: Vec<String> = template.named().into_iter().map(|(n, _)| n).collect();
        if names.len() != ckpt.tensors.len() {
            return Err(Error::Checkpoint(format!("expected {} tensors, found {}", names.len(), ckpt.tensors.len())));
        }
        let mut tensors = ckpt.tensors.into_iter();
        let mut failure = None;
        let mut idx = 0;
        let params = template.map(&mut |t: &Tensor| {
            let named = tensors.next().expect("count checked");
            let expected = &names[idx];
            idx += 1;
            if &named.name != expected || named.shape != [t.rows(), t.cols()] {
                failure.get_or_insert(format!("tensor {} does not match {expected} {:?}", named.name, t.shape()));
                return t.clone();
            }
            Tensor::from_vec(named.shape[0], named.shape[1], named.data).unwrap_or_else(|e| {
                failure.get_or_insert(e.to_string());
                t.clone()
            })
        });
        if let Some(msg) = failure {
            return Err(Error::Checkpoint(msg));
        }
        Ok(Self { config: ckpt.config, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(&self.to_checkpoint())?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_checkpoint(serde_json::from_str(&text)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: [usize; 2],
    pub data: Vec<f64>,
}

/// Versioned JSON container of the configuration and named parameter arrays.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: ModelConfig,
    pub tensors: Vec<NamedTensor>,
}
