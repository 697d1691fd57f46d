//! Training: config, learning-rate schedule, Adam, the step, and the loop.
//!
//! Each step draws one sub-batch per task. The task loss is the mean
//! cross-entropy over those sub-batches, and the alignment term (when
//! enabled) compares the clean down-projection features of the tasks at
//! every selected layer.

use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapters::{trainable_param_count, AdapterSpec, Mode, Variant};
use crate::alignment::{aligned_loss_over_layers, extract_features, total_loss, AlignMode, LayerSelection};
use crate::analysis::{centroid_distance, head_similarity, pooled_similarity, SimilarityReport};
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::harness::{accuracy, frozen_accuracy, gen_tasks, task_loss, Backbone, Dataset, SyntheticTaskFamily, TaskBatch, TaskConfig, TaskSplit};
use crate::rng::{derive_seed, stream};

pub const DEFAULT_LR: f64 = 2e-4;
pub const DEFAULT_ALPHA: f64 = 32.0;
pub const DEFAULT_WARMUP_RATIO: f64 = 0.03;
pub const ALIGNED_DROPOUT: f64 = 0.1;
pub const BASELINE_DROPOUT: f64 = 0.2;
pub const KL_LAMBDA: f64 = 0.1;
pub const MMD_LAMBDA: f64 = 0.15;
/// Smallest per-task batch for which variance estimates are accepted.
pub const MIN_ALIGN_BATCH: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    #[default]
    Cosine,
}

fn default_rank() -> usize {
    8
}
fn default_heads() -> usize {
    1
}
fn default_alpha() -> f64 {
    DEFAULT_ALPHA
}
fn default_lr() -> f64 {
    DEFAULT_LR
}
fn default_steps() -> usize {
    2000
}
fn default_warmup() -> f64 {
    DEFAULT_WARMUP_RATIO
}
fn default_batch() -> usize {
    16
}
fn default_betas() -> [f64; 2] {
    [0.9, 0.999]
}
fn default_adam_eps() -> f64 {
    1e-8
}
fn default_log_every() -> usize {
    1
}
fn default_floor() -> f64 {
    crate::alignment::DEFAULT_VARIANCE_FLOOR
}

/// One training run. Only `variant` is required in JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub variant: Variant,
    #[serde(default = "default_rank")]
    pub rank: usize,
    #[serde(default = "default_heads")]
    pub num_heads: usize,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Defaults to 0.1 with alignment enabled and 0.2 otherwise.
    #[serde(default)]
    pub dropout: Option<f64>,
    /// Experts kept per input by `multi_adapter`; defaults to all of them.
    #[serde(default)]
    pub top_k: Option<usize>,
    #[serde(default)]
    pub align_mode: AlignMode,
    /// Defaults to 0.1 for KL, 0.15 for MMD, 0 without alignment.
    #[serde(default)]
    pub lambda: Option<f64>,
    #[serde(default)]
    pub align_layers: LayerSelection,
    #[serde(default = "default_floor")]
    pub variance_floor: f64,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_warmup")]
    pub warmup_ratio: f64,
    #[serde(default)]
    pub schedule: Schedule,
    #[serde(default = "default_batch")]
    pub batch_per_task: usize,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default = "default_betas")]
    pub betas: [f64; 2],
    #[serde(default = "default_adam_eps")]
    pub adam_eps: f64,
    /// Global gradient-norm clip; off when absent.
    #[serde(default)]
    pub grad_clip: Option<f64>,
    #[serde(default = "default_log_every")]
    pub log_every: usize,
    #[serde(default)]
    pub data: TaskConfig,
}

impl TrainConfig {
    pub fn new(variant: Variant) -> Self {
        serde_json::from_value(serde_json::json!({ "variant": variant })).expect("defaults deserialize")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn dropout(&self) -> f64 {
        self.dropout.unwrap_or(if self.align_mode == AlignMode::None {
            BASELINE_DROPOUT
        } else {
            ALIGNED_DROPOUT
        })
    }

    pub fn lambda(&self) -> f64 {
        self.lambda.unwrap_or(match self.align_mode {
            AlignMode::None => 0.0,
            AlignMode::Kl => KL_LAMBDA,
            AlignMode::Mmd => MMD_LAMBDA,
        })
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    pub fn warmup_steps(&self) -> usize {
        (self.warmup_ratio * self.steps as f64).ceil() as usize
    }

    pub fn adapter_spec(&self) -> AdapterSpec {
        AdapterSpec::new(self.variant, self.rank, self.num_heads)
            .with_alpha(self.alpha)
            .with_dropout(self.dropout())
            .with_top_k(self.top_k.unwrap_or(self.num_heads))
            .with_seed(self.seed())
    }

    /// Adapter parameters of the two-layer backbone this config trains.
    pub fn trainable_params(&self) -> usize {
        let spec = self.adapter_spec();
        let d = &self.data;
        trainable_param_count(&spec, d.hidden_dim, d.input_dim) + trainable_param_count(&spec, d.classes, d.hidden_dim)
    }

    pub fn validate(&self) -> Result<()> {
        self.adapter_spec().validate()?;
        self.data.validate()?;
        let lambda = self.lambda();
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::Config(format!("lambda = {lambda} must be non-negative")));
        }
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return Err(Error::Config(format!("warmup_ratio = {} outside [0, 1)", self.warmup_ratio)));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr = {} must be positive", self.lr)));
        }
        if self.batch_per_task == 0 || self.log_every == 0 {
            return Err(Error::Config("batch_per_task and log_every must be positive".into()));
        }
        let [b1, b2] = self.betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) || !(self.adam_eps > 0.0) {
            return Err(Error::Config(format!("invalid Adam settings {:?}, eps {}", self.betas, self.adam_eps)));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::Config(format!("grad_clip = {c} must be positive")));
            }
        }
        if self.align_mode != AlignMode::None {
            if !self.variant.shares_down_projection() {
                return Err(Error::Config(format!(
                    "alignment needs a shared down-projection; {} has one per expert",
                    self.variant
                )));
            }
            if self.batch_per_task < MIN_ALIGN_BATCH {
                return Err(Error::Config(format!(
                    "alignment needs batch_per_task ≥ {MIN_ALIGN_BATCH}, got {}",
                    self.batch_per_task
                )));
            }
        }
        Ok(())
    }
}

/// Linear warmup over `⌈warmup_ratio·steps⌉` steps, then cosine decay to zero at the last step.
pub fn lr_at(step: usize, config: &TrainConfig) -> Result<f64> {
    let steps = config.steps;
    if step >= steps {
        return Err(Error::Index { index: step, len: steps });
    }
    let w = config.warmup_steps();
    let lr = config.lr;
    if step < w {
        return Ok(lr * step as f64 / w as f64);
    }
    let span = steps - 1 - w;
    if span == 0 {
        return Ok(lr);
    }
    let progress = (step - w) as f64 / span as f64;
    Ok(lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Vec<f64>], lr: f64) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::shape("adam", &[params.len()], &[grads.len()]));
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() {
            return Err(Error::State("optimizer bound to a different parameter set".into()));
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            if g.len() != p.numel() || m.len() != p.numel() {
                return Err(Error::shape("adam", p.shape(), &[g.len()]));
            }
            for (k, x) in p.data_mut().iter_mut().enumerate() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g[k];
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g[k] * g[k];
                let mhat = m[k] / c1;
                let vhat = v[k] / c2;
                *x -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Losses at one logged step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub l_lm: f64,
    pub l_align: Option<f64>,
    pub l_total: f64,
}

/// One optimizer update on `model` from one sub-batch per task.
pub fn train_step(
    model: &mut Backbone,
    batches: &[TaskBatch],
    config: &TrainConfig,
    step: usize,
    opt: &mut Adam,
) -> Result<StepRecord> {
    let lr = lr_at(step, config)?;
    let aligning = config.align_mode != AlignMode::None;
    if batches.is_empty() {
        return Err(Error::NeedsTwoTasks(0));
    }
    if aligning {
        if batches.len() < 2 {
            return Err(Error::NeedsTwoTasks(batches.len()));
        }
        if let Some(b) = batches.iter().find(|b| b.len() < MIN_ALIGN_BATCH) {
            return Err(Error::InsufficientSamples(format!(
                "task {} batch has {} samples; alignment needs {MIN_ALIGN_BATCH}",
                b.task_id,
                b.len()
            )));
        }
    }

    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let seed = config.seed();
    let mut lm: Option<Var> = None;
    let mut per_layer = vec![Vec::new(); model.layers.len()];
    for batch in batches {
        let mode = Mode::Train {
            seed: derive_seed(seed, &[3, batch.task_id as u64]),
            step: step as u64,
        };
        let x = tape.constant(batch.inputs.clone());
        let trace = model.forward(&mut tape, &bound, x, mode)?;
        let loss = task_loss(&mut tape, trace.logits, &batch.labels)?;
        lm = Some(match lm {
            Some(acc) => tape.add(acc, loss)?,
            None => loss,
        });
        if aligning {
            let latents: Vec<Var> = trace
                .latents
                .iter()
                .map(|l| l.ok_or_else(|| Error::Config("alignment needs a shared down-projection".into())))
                .collect::<Result<_>>()?;
            for f in extract_features(&mut tape, &latents, batch.task_id, &config.align_layers)? {
                per_layer[f.layer_id].push(f);
            }
        }
    }
    let lm = tape.scale(lm.expect("non-empty"), 1.0 / batches.len() as f64)?;
    let per_layer: Vec<_> = per_layer.into_iter().filter(|l| !l.is_empty()).collect();
    let align = aligned_loss_over_layers(&mut tape, config.align_mode, &per_layer, config.variance_floor)?;
    let total = match align {
        Some(a) => total_loss(&mut tape, lm, a, config.lambda())?,
        None => lm,
    };
    let record = StepRecord {
        step,
        lr,
        l_lm: tape.scalar(lm),
        l_align: align.map(|a| tape.scalar(a)),
        l_total: tape.scalar(total),
    };
    if !record.l_total.is_finite() || !record.l_align.unwrap_or(0.0).is_finite() {
        return Err(Error::NonFinite("training loss"));
    }

    let grads = tape.backward(total)?;
    let handles: Vec<Var> = bound.iter().flat_map(|b| b.params()).collect();
    let mut gs: Vec<Vec<f64>> = handles.iter().map(|&v| grads.get(v)).collect();
    if gs.iter().flatten().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("gradient"));
    }
    if let Some(clip) = config.grad_clip {
        let norm = gs.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
        if norm > clip {
            let s = clip / norm;
            gs.iter_mut().flatten().for_each(|g| *g *= s);
        }
    }
    let mut params: Vec<&mut Tensor> = model.layers.iter_mut().flat_map(|l| l.params_mut()).collect();
    opt.step(&mut params, &gs, lr)?;
    Ok(record)
}

/// Per-task sampler: a fresh seeded permutation each epoch, incomplete tails dropped.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    seed: u64,
    task: usize,
    len: usize,
    epoch: u64,
    pos: usize,
    order: Vec<usize>,
}

impl BatchSampler {
    pub fn new(seed: u64, task: usize, len: usize) -> Self {
        let mut s = Self {
            seed,
            task,
            len,
            epoch: 0,
            pos: 0,
            order: Vec::new(),
        };
        s.reshuffle();
        s
    }

    fn reshuffle(&mut self) {
        self.order = (0..self.len).collect();
        self.order
            .shuffle(&mut stream(self.seed, &[30, self.task as u64, self.epoch]));
        self.pos = 0;
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        if self.pos + size > self.len {
            self.epoch += 1;
            self.reshuffle();
        }
        let out = self.order[self.pos..self.pos + size].to_vec();
        self.pos += size;
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadSimilaritySummary {
    pub per_layer: Vec<SimilarityReport>,
    pub pooled_mean: f64,
    pub pooled_median: f64,
}

/// Final evaluation of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub variant: Variant,
    pub rank: usize,
    pub num_heads: usize,
    pub align_mode: AlignMode,
    pub lambda: f64,
    pub dropout: f64,
    pub seed: u64,
    pub dataset_seed: u64,
    pub steps: usize,
    pub per_task_accuracy: Vec<f64>,
    pub mean_accuracy: f64,
    pub frozen_mean_accuracy: f64,
    pub head_similarity: Option<HeadSimilaritySummary>,
    /// Mean over layers of the mean pairwise distance between held-out task centroids.
    pub centroid_distance: Option<f64>,
    pub centroid_distance_per_layer: Vec<f64>,
    pub trainable_params: usize,
    pub final_loss: Option<f64>,
    pub wall_clock_secs: f64,
}

impl RunSummary {
    /// A copy with the wall-clock field zeroed, for reproducibility comparisons.
    pub fn without_wall_clock(&self) -> Self {
        Self {
            wall_clock_secs: 0.0,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub records: Vec<StepRecord>,
    pub summary: RunSummary,
}

/// Held-out `B×r` features of every task at every layer with a shared `A`.
pub fn heldout_features(model: &Backbone, splits: &[TaskSplit]) -> Result<Vec<Vec<Tensor>>> {
    let per_task: Vec<Vec<Option<Tensor>>> = splits
        .par_iter()
        .map(|s| model.eval(&s.heldout.inputs).map(|(_, l)| l))
        .collect::<Result<_>>()?;
    let layers = model.layers.len();
    Ok((0..layers)
        .filter_map(|l| {
            per_task
                .iter()
                .map(|t| t[l].as_ref().map(Tensor::transpose))
                .collect::<Option<Vec<_>>>()
        })
        .collect())
}

/// Accuracy, head similarity, and feature geometry of `model` on the held-out splits.
pub fn evaluate(model: &Backbone, splits: &[TaskSplit], config: &TrainConfig) -> Result<RunSummary> {
    let acc: Vec<(f64, f64)> = splits
        .par_iter()
        .map(|s| Ok((accuracy(model, &s.heldout)?, frozen_accuracy(model, &s.heldout)?)))
        .collect::<Result<_>>()?;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
    let per_task: Vec<f64> = acc.iter().map(|a| a.0).collect();
    let frozen: Vec<f64> = acc.iter().map(|a| a.1).collect();

    let head_similarity = if config.num_heads >= 2 {
        let per_layer = model
            .layers
            .iter()
            .map(|l| head_similarity(&l.heads))
            .collect::<Result<Vec<_>>>();
        match per_layer {
            Ok(per_layer) => {
                let (pooled_mean, pooled_median) = pooled_similarity(&per_layer).expect("N ≥ 2");
                Some(HeadSimilaritySummary {
                    per_layer,
                    pooled_mean,
                    pooled_median,
                })
            }
            // zero heads before any training have no direction
            Err(Error::DegenerateHead(_)) => None,
            Err(e) => return Err(e),
        }
    } else {
        None
    };

    let mut per_layer_dist = Vec::new();
    if splits.len() >= 2 {
        for feats in heldout_features(model, splits)? {
            let refs: Vec<&Tensor> = feats.iter().collect();
            per_layer_dist.push(centroid_distance(&refs)?);
        }
    }
    let centroid = (!per_layer_dist.is_empty()).then(|| mean(&per_layer_dist));

    Ok(RunSummary {
        variant: config.variant,
        rank: config.rank,
        num_heads: config.num_heads,
        align_mode: config.align_mode,
        lambda: config.lambda(),
        dropout: config.dropout(),
        seed: config.seed(),
        dataset_seed: config.data.seed,
        steps: config.steps,
        mean_accuracy: mean(&per_task),
        per_task_accuracy: per_task,
        frozen_mean_accuracy: mean(&frozen),
        head_similarity,
        centroid_distance: centroid,
        centroid_distance_per_layer: per_layer_dist,
        trainable_params: model.trainable_param_count(),
        final_loss: None,
        wall_clock_secs: 0.0,
    })
}

/// Trains a fresh backbone built from `family`.
pub fn train(config: &TrainConfig, family: &SyntheticTaskFamily, splits: &[TaskSplit]) -> Result<(Backbone, RunReport)> {
    config.validate()?;
    let model = Backbone::new(family, &config.adapter_spec(), config.seed())?;
    train_model(config, model, splits)
}

/// Runs `config.steps` updates on `model`, then evaluates it on the held-out splits.
pub fn train_model(config: &TrainConfig, mut model: Backbone, splits: &[TaskSplit]) -> Result<(Backbone, RunReport)> {
    config.validate()?;
    let start = Instant::now();
    if let Some(s) = splits.iter().find(|s| s.train.len() < config.batch_per_task) {
        return Err(Error::Config(format!(
            "task {} has {} training samples, fewer than batch_per_task = {}",
            s.train.task_id,
            s.train.len(),
            config.batch_per_task
        )));
    }
    let seed = config.seed();
    let mut samplers: Vec<BatchSampler> = splits
        .iter()
        .map(|s| BatchSampler::new(seed, s.train.task_id, s.train.len()))
        .collect();
    let mut opt = Adam::new(config.betas[0], config.betas[1], config.adam_eps);
    let mut records = Vec::new();
    for step in 0..config.steps {
        let batches: Vec<Dataset> = splits
            .iter()
            .zip(samplers.iter_mut())
            .map(|(s, sampler)| s.train.select(&sampler.next_batch(config.batch_per_task)))
            .collect::<Result<_>>()?;
        let rec = train_step(&mut model, &batches, config, step, &mut opt)?;
        if step % config.log_every == 0 || step + 1 == config.steps {
            records.push(rec);
        }
    }
    let mut summary = evaluate(&model, splits, config)?;
    summary.final_loss = records.last().map(|r| r.l_total);
    summary.wall_clock_secs = start.elapsed().as_secs_f64();
    Ok((model, RunReport { records, summary }))
}

/// Generates the configured data and trains on it.
pub fn run(config: &TrainConfig) -> Result<(Backbone, RunReport)> {
    let (family, splits) = gen_tasks(&config.data)?;
    train(config, &family, &splits)
}

#[cfg(test)]
mod tests;
