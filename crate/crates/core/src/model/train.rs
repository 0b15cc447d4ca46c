use std::collections::BTreeSet;

use log::{debug, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::forward::{forward_loss, loss_and_grads, Batch};
use super::params::{ModelParams, TransformerConfig};
use crate::{Error, Result};

/// Adam with inverse-square-root warmup.
///
/// `lr(step) = peak_lr * min(step / warmup_steps, sqrt(warmup_steps / step))`
/// for the 1-based step being taken; with no warmup the rate is `peak_lr`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            peak_lr: 1e-3,
            warmup_steps: 100,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            clip_norm: Some(1.0),
        }
    }
}

impl OptimConfig {
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        if !(self.peak_lr >= 0.0 && self.peak_lr.is_finite()) {
            return Err(Error::InvalidConfig(format!("peak_lr must be finite and >= 0, got {}", self.peak_lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::InvalidConfig(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::InvalidConfig("eps must be positive".into()));
        }
        if matches!(self.clip_norm, Some(c) if !(c > 0.0)) {
            return Err(Error::InvalidConfig("clip_norm must be positive".into()));
        }
        Ok(())
    }

    pub fn learning_rate(&self, step: u64) -> f64 {
        if self.warmup_steps == 0 {
            return self.peak_lr;
        }
        let s = step.max(1) as f64;
        let w = self.warmup_steps as f64;
        self.peak_lr * (s / w).min((w / s).sqrt())
    }
}

/// Parameters plus Adam moments. `step` counts applied updates.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: ModelParams,
    pub m: ModelParams,
    pub v: ModelParams,
    pub step: u64,
    pub seed: u64,
    /// Tensors excluded from updates and from the clipping norm.
    pub frozen: BTreeSet<String>,
}

impl TrainState {
    pub fn new(params: ModelParams, seed: u64) -> Self {
        let m = params.zeros_like();
        let v = params.zeros_like();
        Self {
            params,
            m,
            v,
            step: 0,
            seed,
            frozen: BTreeSet::new(),
        }
    }

    /// Dropout stream for the update that produces step `step + 1`.
    fn dropout_rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.step + 1);
        rng
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
    /// True when the batch had no target tokens and no update was applied.
    pub skipped: bool,
}

/// One Adam update on `batch`.
///
/// A batch without target tokens has loss 0 and leaves the state untouched.
/// A non-finite gradient aborts before any parameter changes.
pub fn train_step(
    state: &mut TrainState,
    batch: &Batch,
    config: &TransformerConfig,
    optim: &OptimConfig,
) -> Result<StepOutcome> {
    batch.validate(config)?;
    if batch.num_target_tokens() == 0 {
        warn!("skipping update on a batch with no target tokens");
        return Ok(StepOutcome {
            loss: 0.0,
            lr: 0.0,
            grad_norm: 0.0,
            skipped: true,
        });
    }
    let mut rng = state.dropout_rng();
    let (loss, mut grads) = loss_and_grads(&state.params, batch, config, Some(&mut rng));
    grads.retain(|name, _| !state.frozen.contains(name));
    for (name, g) in &grads {
        if !g.all_finite() {
            return Err(Error::NonFiniteGradient(name.clone()));
        }
    }
    let grad_norm = grads.values().map(|g| g.sum_squares()).sum::<f64>().sqrt();
    if let Some(clip) = optim.clip_norm {
        if grad_norm > clip {
            let s = clip / grad_norm;
            grads.values_mut().for_each(|g| g.scale(s));
        }
    }

    let t = state.step + 1;
    let lr = optim.learning_rate(t);
    let bc1 = 1.0 - optim.beta1.powi(t as i32);
    let bc2 = 1.0 - optim.beta2.powi(t as i32);
    for (name, g) in &grads {
        let m = state.m.get_mut(name).expect("moment shape mirrors params");
        let v = state.v.get_mut(name).expect("moment shape mirrors params");
        let p = state.params.get_mut(name).expect("gradient for a known tensor");
        let cells = p.data_mut().iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(g.data());
        for (((pi, mi), vi), gi) in cells {
            *mi = optim.beta1 * *mi + (1.0 - optim.beta1) * gi;
            *vi = optim.beta2 * *vi + (1.0 - optim.beta2) * gi * gi;
            *pi -= lr * (*mi / bc1) / ((*vi / bc2).sqrt() + optim.eps);
        }
    }
    state.step = t;
    Ok(StepOutcome {
        loss,
        lr,
        grad_norm,
        skipped: false,
    })
}

pub type Pair = (Vec<usize>, Vec<usize>);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingSchedule {
    pub steps: u64,
    /// Sentence pairs per batch.
    pub batch_size: usize,
    /// Dev loss is measured every `eval_every` steps and after the last one.
    pub eval_every: u64,
    pub optim: OptimConfig,
}

impl Default for TrainingSchedule {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 32,
            eval_every: 100,
            optim: OptimConfig::default(),
        }
    }
}

impl TrainingSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be positive".into()));
        }
        if self.eval_every == 0 {
            return Err(Error::InvalidConfig("eval_every must be positive".into()));
        }
        self.optim.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    /// `(step, mean dev loss)`; the first entry is the untrained model.
    pub dev_curve: Vec<(u64, f64)>,
    pub train_losses: Vec<f64>,
}

impl TrainingLog {
    pub fn final_dev_loss(&self) -> Option<f64> {
        self.dev_curve.last().map(|&(_, l)| l)
    }

    /// First evaluated step whose dev loss is at or below `target`.
    pub fn steps_to_reach(&self, target: f64) -> Option<u64> {
        self.dev_curve.iter().find(|&&(_, l)| l <= target).map(|&(s, _)| s)
    }
}

/// Token-weighted mean loss over `pairs`, without dropout.
pub fn corpus_loss(params: &ModelParams, pairs: &[Pair], config: &TransformerConfig, batch_size: usize) -> Result<f64> {
    let mut sorted: Vec<&Pair> = pairs.iter().collect();
    sorted.sort_by_key(|p| (p.1.len().max(p.0.len()), p.1.len()));
    let mut total = 0.0;
    let mut count = 0usize;
    for chunk in sorted.chunks(batch_size.max(1)) {
        let chunk: Vec<Pair> = chunk.iter().map(|&p| p.clone()).collect();
        let batch = Batch::new(&chunk);
        let n = batch.num_target_tokens();
        total += forward_loss(params, &batch, config)? * n as f64;
        count += n;
    }
    Ok(if count == 0 { 0.0 } else { total / count as f64 })
}

/// Pools of this many batches are sorted by length before being cut, which
/// keeps padding low without fixing the batch composition across epochs.
const BUCKET_POOL: usize = 8;

/// One epoch of batches: shuffle, sort pools by length, cut, shuffle batches.
fn epoch_batches(train: &[Pair], batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(rng);
    let mut batches = Vec::new();
    for pool in order.chunks_mut(batch_size * BUCKET_POOL) {
        pool.sort_by_key(|&i| (train[i].1.len().max(train[i].0.len()), train[i].1.len()));
        batches.extend(pool.chunks(batch_size).map(<[usize]>::to_vec));
    }
    batches.shuffle(rng);
    batches
}

/// Runs `schedule.steps` updates over shuffled epochs of `train`.
///
/// Batch order is drawn from a stream seeded by the state's seed, so two runs
/// from equal states produce identical trajectories.
pub fn train(
    state: &mut TrainState,
    train: &[Pair],
    dev: &[Pair],
    config: &TransformerConfig,
    schedule: &TrainingSchedule,
) -> Result<TrainingLog> {
    config.validate()?;
    schedule.validate()?;
    if train.is_empty() {
        return Err(Error::Empty("training corpus".into()));
    }
    let mut order_rng = ChaCha8Rng::seed_from_u64(state.seed);
    order_rng.set_stream(u64::MAX);
    let mut queue: Vec<Vec<usize>> = Vec::new();
    let mut log = TrainingLog {
        dev_curve: Vec::new(),
        train_losses: Vec::with_capacity(schedule.steps as usize),
    };
    let eval_batch = schedule.batch_size.max(64);
    if !dev.is_empty() {
        log.dev_curve.push((state.step, corpus_loss(&state.params, dev, config, eval_batch)?));
    }
    for i in 0..schedule.steps {
        if queue.is_empty() {
            queue = epoch_batches(train, schedule.batch_size, &mut order_rng);
            queue.reverse();
        }
        let idx = queue.pop().expect("epoch has at least one batch");
        let chunk: Vec<Pair> = idx.iter().map(|&j| train[j].clone()).collect();
        let outcome = train_step(state, &Batch::new(&chunk), config, &schedule.optim)?;
        log.train_losses.push(outcome.loss);
        let done = i + 1 == schedule.steps;
        if !dev.is_empty() && ((i + 1) % schedule.eval_every == 0 || done) {
            let l = corpus_loss(&state.params, dev, config, eval_batch)?;
            debug!("step {} train loss {:.4} dev loss {:.4}", state.step, outcome.loss, l);
            log.dev_curve.push((state.step, l));
        }
    }
    Ok(log)
}
