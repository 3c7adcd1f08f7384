//! Two-stage meta-learning: pre-training on SABR prior surfaces, fine-tuning on
//! real quotes, or a single base stage on real quotes from scratch.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::types::{make_task, DayRecord, Task, TaskSource};
use crate::volnp::{ModelParams, VolNp};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// Real-quote contexts, SABR prior targets.
    Pretrain,
    /// Real-quote contexts and targets, starting from a pre-trained model.
    Finetune,
    /// Real-quote contexts and targets from a fresh initialisation.
    Base,
}

impl Stage {
    pub fn source(self) -> TaskSource {
        match self {
            Stage::Pretrain => TaskSource::RealToSynthetic,
            Stage::Finetune | Stage::Base => TaskSource::RealToReal,
        }
    }
}

impl std::str::FromStr for Stage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pretrain" => Ok(Stage::Pretrain),
            "finetune" => Ok(Stage::Finetune),
            "base" => Ok(Stage::Base),
            other => Err(Error::Parse(format!("unknown stage {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub stage: Stage,
    pub lr: f64,
    pub max_epochs: usize,
    pub batch_tasks: usize,
    /// Inclusive range the per-task context size is drawn from.
    pub context_range: (usize, usize),
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub seed: u64,
    pub early_stop_patience: usize,
    /// Cap on targets per task; `None` uses every remaining quote (or the whole prior grid).
    pub max_targets: Option<usize>,
    pub val_context: usize,
    pub betas: (f64, f64),
    pub eps: f64,
}

impl TrainConfig {
    pub fn for_stage(stage: Stage) -> Self {
        let (lr, max_epochs, max_targets) = match stage {
            Stage::Pretrain => (5e-5, 200, Some(256)),
            Stage::Finetune => (1e-6, 100, None),
            Stage::Base => (5e-5, 300, None),
        };
        Self {
            stage,
            lr,
            max_epochs,
            batch_tasks: 16,
            context_range: (20, 200),
            weight_decay: 0.01,
            grad_clip: 1.0,
            seed: 0,
            early_stop_patience: 20,
            max_targets,
            val_context: 100,
            betas: (0.9, 0.999),
            eps: 1e-8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.context_range;
        if !(self.lr > 0.0) || lo == 0 || lo > hi || self.batch_tasks == 0 || self.val_context == 0 {
            return Err(Error::Domain(format!("invalid training configuration {self:?}")));
        }
        if self.max_targets == Some(0) || !(self.grad_clip > 0.0) || self.weight_decay < 0.0 {
            return Err(Error::Domain(format!("invalid training configuration {self:?}")));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Data split

/// Chronological test tail; validation days drawn at random from the rest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitConfig {
    pub test_days: usize,
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self { test_days: 50, val_fraction: 0.1, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataSplit {
    pub train: Vec<DayRecord>,
    pub val: Vec<DayRecord>,
    pub test: Vec<DayRecord>,
}

/// Split date-ordered `days`. Each part keeps date order.
pub fn split_days(mut days: Vec<DayRecord>, cfg: &SplitConfig) -> Result<DataSplit> {
    if !(0.0..1.0).contains(&cfg.val_fraction) {
        return Err(Error::Domain(format!("val_fraction must be in [0, 1), got {}", cfg.val_fraction)));
    }
    days.sort_by_key(|d| d.date);
    if days.len() <= cfg.test_days {
        return Err(Error::InsufficientQuotes { needed: cfg.test_days + 1, available: days.len() });
    }
    let test = days.split_off(days.len() - cfg.test_days);
    let n_val = (cfg.val_fraction * days.len() as f64).round() as usize;
    if n_val == 0 && cfg.val_fraction > 0.0 || n_val >= days.len() {
        return Err(Error::Domain(format!("cannot hold out {n_val} of {} training days for validation", days.len())));
    }
    let mut idx: Vec<usize> = (0..days.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed));
    let mut is_val = vec![false; days.len()];
    idx[..n_val].iter().for_each(|&i| is_val[i] = true);
    let (val, train): (Vec<_>, Vec<_>) = days.into_iter().zip(is_val).partition(|(_, v)| *v);
    Ok(DataSplit {
        train: train.into_iter().map(|(d, _)| d).collect(),
        val: val.into_iter().map(|(d, _)| d).collect(),
        test,
    })
}

// ---------------------------------------------------------------------------
// AdamW

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: ModelParams,
    pub v: ModelParams,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(params: &ModelParams) -> Self {
        Self { m: params.zeros_like(), v: params.zeros_like(), step: 0 }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub eps: f64,
}

/// One AdamW update with bias-corrected moments and decoupled weight decay.
pub fn adamw_step(params: &mut ModelParams, grads: &ModelParams, state: &mut OptimizerState, opt: &AdamW) -> Result<()> {
    state.step += 1;
    let (b1, b2) = opt.betas;
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    let g = grads.leaves();
    let m = state.m.leaves_mut();
    let v = state.v.leaves_mut();
    let p = params.leaves_mut();
    if g.len() != p.len() || m.len() != p.len() || v.len() != p.len() {
        return Err(Error::LengthMismatch(p.len(), g.len()));
    }
    for (((p, g), m), v) in p.into_iter().zip(g).zip(m).zip(v) {
        if p.shape() != g.shape() || p.shape() != m.shape() || p.shape() != v.shape() {
            return Err(Error::ShapeMismatch { op: "adamw", lhs: p.shape(), rhs: g.shape() });
        }
        let (pd, gd) = (p.data_mut(), g.data());
        for (((x, &gi), mi), vi) in pd.iter_mut().zip(gd).zip(m.data_mut()).zip(v.data_mut()) {
            *mi = b1 * *mi + (1.0 - b1) * gi;
            *vi = b2 * *vi + (1.0 - b2) * gi * gi;
            *x -= opt.lr * opt.weight_decay * *x;
            *x -= opt.lr * (*mi / c1) / ((*vi / c2).sqrt() + opt.eps);
        }
    }
    Ok(())
}

pub fn global_norm(grads: &ModelParams) -> f64 {
    grads.leaves().iter().map(|t| t.squared_norm()).sum::<f64>().sqrt()
}

/// Rescale so the global norm is at most `max_norm`; returns the norm before clipping.
pub fn clip_global_norm(grads: &mut ModelParams, max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let s = max_norm / norm;
        for t in grads.leaves_mut() {
            t.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

// ---------------------------------------------------------------------------
// Tasks

fn task_seed(seed: u64, a: u64, b: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ a.wrapping_mul(0xBF58_476D_1CE4_E5B9) ^ b.wrapping_mul(0x94D0_49BB_1331_11EB)
}

fn has_source(day: &DayRecord, source: TaskSource, n_min: usize) -> bool {
    match source {
        TaskSource::RealToSynthetic => day.synthetic_surface.as_ref().is_some_and(|s| !s.is_empty()),
        TaskSource::RealToReal => day.quotes.len() > n_min,
    }
}

/// One fixed task per validation day with `cfg.val_context` context quotes
/// (or one fewer than the day holds, if it is smaller).
pub fn make_validation_tasks(val_days: &[DayRecord], cfg: &TrainConfig, seed: u64) -> Result<Vec<Task>> {
    let source = cfg.stage.source();
    val_days
        .iter()
        .enumerate()
        .filter(|(_, d)| has_source(d, source, 1))
        .map(|(i, day)| {
            let n = match source {
                TaskSource::RealToReal => cfg.val_context.min(day.quotes.len() - 1),
                TaskSource::RealToSynthetic => cfg.val_context.min(day.quotes.len()),
            };
            make_task(day, n, cfg.max_targets.map(|m| m.min(max_targets(day, source, n))), source, task_seed(seed, 1, i as u64))
        })
        .collect()
}

fn max_targets(day: &DayRecord, source: TaskSource, n_context: usize) -> usize {
    match source {
        TaskSource::RealToReal => day.quotes.len() - n_context,
        TaskSource::RealToSynthetic => day.synthetic_surface.as_ref().map_or(0, |s| s.len()),
    }
}

/// Mean per-target NLL over `tasks`.
pub fn mean_task_nll(model: &VolNp, tasks: &[Task]) -> Result<f64> {
    if tasks.is_empty() {
        return Err(Error::Domain("no validation tasks".into()));
    }
    let losses = tasks
        .par_iter()
        .map(|t| Ok(model.task_loss(&t.context, &t.targets)? / t.targets.len() as f64))
        .collect::<Result<Vec<f64>>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

// ---------------------------------------------------------------------------
// Training loop

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Per-target training NLL averaged over the epoch's steps (NaN for the initial entry).
    pub train_nll: f64,
    pub val_nll: f64,
    /// Mean pre-clipping global gradient norm.
    pub grad_norm: f64,
    pub steps: usize,
    pub wall_time_s: f64,
}

impl EpochLog {
    /// Equality ignoring wall-clock time.
    pub fn same_numbers(&self, other: &EpochLog) -> bool {
        self.epoch == other.epoch
            && self.train_nll.to_bits() == other.train_nll.to_bits()
            && self.val_nll.to_bits() == other.val_nll.to_bits()
            && self.grad_norm.to_bits() == other.grad_norm.to_bits()
            && self.steps == other.steps
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters with the best validation NLL (the initial ones if nothing improved).
    pub model: VolNp,
    /// Entry 0 is the initial model; entry e is after epoch e.
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val_nll: f64,
}

pub fn write_log_jsonl(path: &Path, log: &[EpochLog]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for entry in log {
        serde_json::to_writer(&mut f, entry)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

/// Summed gradients of a batch, normalised by its total target count.
fn batch_gradient(model: &VolNp, tasks: &[Task]) -> Result<(f64, ModelParams)> {
    let results = tasks
        .par_iter()
        .map(|t| model.task_gradient(&t.context, &t.targets))
        .collect::<Result<Vec<_>>>()?;
    let total_targets: usize = results.iter().map(|r| r.n_targets).sum();
    let scale = 1.0 / total_targets as f64;
    let mut grads = model.params.zeros_like();
    let mut loss = 0.0;
    for r in &results {
        loss += r.loss;
        for (acc, g) in grads.leaves_mut().into_iter().zip(r.grads.leaves()) {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
    }
    for t in grads.leaves_mut() {
        t.data_mut().iter_mut().for_each(|v| *v *= scale);
    }
    Ok((loss * scale, grads))
}

/// Run one curriculum stage starting from `model`.
pub fn run_stage(train_days: &[DayRecord], model: VolNp, cfg: &TrainConfig, val_days: &[DayRecord]) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_days.is_empty() {
        return Err(Error::DataStageMismatch("no training days".into()));
    }
    let source = cfg.stage.source();
    let (n_min, n_max) = cfg.context_range;
    let usable: Vec<&DayRecord> = train_days.iter().filter(|d| has_source(d, source, n_min)).collect();
    if usable.is_empty() {
        let need = match source {
            TaskSource::RealToSynthetic => "a SABR prior surface".to_string(),
            TaskSource::RealToReal => format!("more than {n_min} quotes"),
        };
        return Err(Error::DataStageMismatch(format!("{:?} stage needs training days with {need}", cfg.stage)));
    }
    if usable.len() < train_days.len() {
        log::warn!("{} of {} training days lack data for {:?}; skipped", train_days.len() - usable.len(), train_days.len(), cfg.stage);
    }
    let val_tasks = make_validation_tasks(val_days, cfg, cfg.seed)?;
    if val_tasks.is_empty() {
        return Err(Error::DataStageMismatch(format!("no validation day has data for {:?}", cfg.stage)));
    }

    let opt = AdamW { lr: cfg.lr, weight_decay: cfg.weight_decay, betas: cfg.betas, eps: cfg.eps };
    let mut state = OptimizerState::new(&model.params);
    let start = Instant::now();
    let init_val = mean_task_nll(&model, &val_tasks)?;
    let mut log = vec![EpochLog {
        epoch: 0,
        train_nll: f64::NAN,
        val_nll: init_val,
        grad_norm: f64::NAN,
        steps: 0,
        wall_time_s: start.elapsed().as_secs_f64(),
    }];
    let mut best = (0usize, init_val, model.params.clone());
    let mut current = model;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut since_best = 0;

    for epoch in 1..=cfg.max_epochs {
        let mut order: Vec<usize> = (0..usable.len()).collect();
        order.shuffle(&mut rng);
        let (mut loss_sum, mut norm_sum, mut steps) = (0.0, 0.0, 0usize);
        for chunk in order.chunks(cfg.batch_tasks) {
            let tasks = chunk
                .iter()
                .map(|&i| {
                    let day = usable[i];
                    let cap = match source {
                        TaskSource::RealToReal => day.quotes.len() - 1,
                        TaskSource::RealToSynthetic => day.quotes.len(),
                    };
                    let n = rng.gen_range(n_min.min(cap)..=n_max.min(cap));
                    let m = cfg.max_targets.map(|m| m.min(max_targets(day, source, n)));
                    make_task(day, n, m, source, rng.gen())
                })
                .collect::<Result<Vec<_>>>()?;
            let (loss, mut grads) = batch_gradient(&current, &tasks)?;
            let norm = clip_global_norm(&mut grads, cfg.grad_clip);
            adamw_step(&mut current.params, &grads, &mut state, &opt)?;
            loss_sum += loss;
            norm_sum += norm;
            steps += 1;
        }
        if !current.params.all_finite() {
            return Err(Error::Domain(format!("parameters became non-finite in epoch {epoch}")));
        }
        let val_nll = mean_task_nll(&current, &val_tasks)?;
        let entry = EpochLog {
            epoch,
            train_nll: loss_sum / steps as f64,
            val_nll,
            grad_norm: norm_sum / steps as f64,
            steps,
            wall_time_s: start.elapsed().as_secs_f64(),
        };
        log::info!(
            "{:?} epoch {epoch}: train {:.5} val {:.5} |g| {:.3e} ({:.1}s)",
            cfg.stage,
            entry.train_nll,
            entry.val_nll,
            entry.grad_norm,
            entry.wall_time_s
        );
        log.push(entry);
        if val_nll < best.1 {
            best = (epoch, val_nll, current.params.clone());
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.early_stop_patience {
                log::info!("early stop after epoch {epoch}; best epoch {}", best.0);
                break;
            }
        }
    }

    let (best_epoch, best_val_nll, params) = best;
    Ok(TrainOutcome { model: VolNp { config: current.config, params }, log, best_epoch, best_val_nll })
}

/// Summary of parameter magnitudes, handy for logs.
pub fn parameter_norm(params: &ModelParams) -> f64 {
    params.leaves().iter().map(|t: &&Tensor| t.squared_norm()).sum::<f64>().sqrt()
}
