//! Synthetic multi-task data and the frozen two-layer backbone.
//!
//! Every task shares one concept matrix `C` and class readout `V`; task `i`
//! labels its inputs with `argmax(V·Rᵢ·C·x + η·ε)` for a near-identity
//! rotation `Rᵢ`. Inputs are split into content coordinates, which `C`
//! reads, and a few context coordinates that carry a per-task offset plus
//! noise. `C` ignores the context block, so it never affects the labels;
//! it only makes the down-projection features of different tasks
//! distinguishable.

use std::io::{BufRead, Write};

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapters::{init_adapter, AdapterSpec, AdapterState, BoundAdapter, ForwardCtx, Mode};
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, stream};

/// Generator settings. Defaults give minutes-scale CPU runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskConfig {
    pub tasks: usize,
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub classes: usize,
    pub train_per_task: usize,
    pub heldout_per_task: usize,
    /// `η`: standard deviation of the logit noise added before the argmax.
    pub label_noise: f64,
    /// Strength of the per-task rotation away from the identity.
    pub rotation: f64,
    /// Trailing input coordinates reserved for the task context.
    pub context_dims: usize,
    /// Norm of each task's context offset.
    pub context_shift: f64,
    /// Base standard deviation of the context coordinates.
    pub context_noise: f64,
    /// Spread of the per-task, per-coordinate log standard deviation of the context.
    pub context_spread: f64,
    pub seed: u64,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            tasks: 3,
            input_dim: 32,
            hidden_dim: 64,
            classes: 8,
            train_per_task: 2000,
            heldout_per_task: 500,
            label_noise: 0.1,
            rotation: 0.5,
            context_dims: 4,
            context_shift: 2.0,
            context_noise: 1.0,
            context_spread: 0.0,
            seed: 0,
        }
    }
}

impl TaskConfig {
    pub fn content_dims(&self) -> usize {
        self.input_dim.saturating_sub(self.context_dims)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.tasks == 0 {
            return bad("tasks must be at least 1".into());
        }
        if self.classes < 2 {
            return bad(format!("classes = {} must be at least 2", self.classes));
        }
        if self.content_dims() == 0 || self.hidden_dim == 0 {
            return bad(format!(
                "degenerate dims: input {} with {} context, hidden {}",
                self.input_dim, self.context_dims, self.hidden_dim
            ));
        }
        if self.classes > self.content_dims() || self.content_dims() > self.hidden_dim {
            return bad(format!(
                "need classes ≤ content dims ≤ hidden dims, got {} ≤ {} ≤ {}",
                self.classes,
                self.content_dims(),
                self.hidden_dim
            ));
        }
        if self.train_per_task == 0 || self.heldout_per_task == 0 {
            return bad("each split needs at least one sample".into());
        }
        for (name, v) in [
            ("label_noise", self.label_noise),
            ("rotation", self.rotation),
            ("context_shift", self.context_shift),
            ("context_noise", self.context_noise),
            ("context_spread", self.context_spread),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} = {v} must be a non-negative number"));
            }
        }
        Ok(())
    }
}

/// Orthonormalizes the columns of a row-major `rows×cols` matrix in place.
fn gram_schmidt(a: &mut [f64], rows: usize, cols: usize) -> Result<()> {
    for j in 0..cols {
        // two passes keep the columns orthogonal to rounding error
        for _ in 0..2 {
            for k in 0..j {
                let dot: f64 = (0..rows).map(|i| a[i * cols + j] * a[i * cols + k]).sum();
                for i in 0..rows {
                    a[i * cols + j] -= dot * a[i * cols + k];
                }
            }
        }
        let norm = (0..rows).map(|i| a[i * cols + j].powi(2)).sum::<f64>().sqrt();
        if norm < 1e-12 {
            return Err(Error::Config("rank-deficient basis in generator".into()));
        }
        for i in 0..rows {
            a[i * cols + j] /= norm;
        }
    }
    Ok(())
}

fn gaussian(rng: &mut impl Rng, n: usize, std: f64) -> Vec<f64> {
    (0..n).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect()
}

/// The generating model shared by all tasks.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTaskFamily {
    pub config: TaskConfig,
    /// `C`, `hidden×input`; the context columns are zero.
    pub concept: Tensor,
    /// `V`, `classes×hidden`, orthonormal rows inside the column space of `C`.
    pub readout: Tensor,
    /// `Rᵢ`, `hidden×hidden`, orthogonal.
    pub rotations: Vec<Tensor>,
    /// Context offset of each task, length `context_dims`.
    pub offsets: Vec<Vec<f64>>,
    /// Context standard deviation of each task, length `context_dims`.
    pub context_std: Vec<Vec<f64>>,
}

impl SyntheticTaskFamily {
    pub fn new(config: &TaskConfig) -> Result<Self> {
        config.validate()?;
        let (n0, n1, k) = (config.input_dim, config.hidden_dim, config.classes);
        let c = config.content_dims();
        let seed = config.seed;

        let mut q = gaussian(&mut stream(seed, &[10]), n1 * c, 1.0);
        gram_schmidt(&mut q, n1, c)?;
        let gain = (n1 as f64 / c as f64).sqrt();
        let mut concept = vec![0.0; n1 * n0];
        for i in 0..n1 {
            for j in 0..c {
                concept[i * n0 + j] = gain * q[i * c + j];
            }
        }

        // U has orthonormal rows (columns of Uᵀ), V = U·Qᵀ.
        let mut ut = gaussian(&mut stream(seed, &[11]), c * k, 1.0);
        gram_schmidt(&mut ut, c, k)?;
        let mut readout = vec![0.0; k * n1];
        for cls in 0..k {
            for h in 0..n1 {
                readout[cls * n1 + h] = (0..c).map(|j| ut[j * k + cls] * q[h * c + j]).sum();
            }
        }

        let rotations = (0..config.tasks)
            .map(|t| {
                let mut r = gaussian(&mut stream(seed, &[12, t as u64]), n1 * n1, config.rotation / (n1 as f64).sqrt());
                for i in 0..n1 {
                    r[i * n1 + i] += 1.0;
                }
                gram_schmidt(&mut r, n1, n1)?;
                Tensor::new(&[n1, n1], r)
            })
            .collect::<Result<Vec<_>>>()?;

        let offsets = (0..config.tasks)
            .map(|t| {
                if config.context_dims == 0 {
                    return Vec::new();
                }
                let u = gaussian(&mut stream(seed, &[13, t as u64]), config.context_dims, 1.0);
                let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
                u.iter().map(|v| v * config.context_shift / norm).collect()
            })
            .collect();

        let context_std = (0..config.tasks)
            .map(|t| {
                gaussian(&mut stream(seed, &[14, t as u64]), config.context_dims, config.context_spread)
                    .into_iter()
                    .map(|g| config.context_noise * g.exp())
                    .collect()
            })
            .collect();

        Ok(Self {
            config: config.clone(),
            concept: Tensor::new(&[n1, n0], concept)?,
            readout: Tensor::new(&[k, n1], readout)?,
            rotations,
            offsets,
            context_std,
        })
    }

    /// `V·Rᵢ·C`, the noiseless label map of task `i`.
    pub fn label_map(&self, task: usize) -> Result<Tensor> {
        let r = self.rotations.get(task).ok_or(Error::Index {
            index: task,
            len: self.rotations.len(),
        })?;
        self.readout.matmul(&r.matmul(&self.concept)?)
    }

    /// Draws `count` labelled samples of `task` from the stream `split`.
    pub fn sample(&self, task: usize, count: usize, split: u64) -> Result<Dataset> {
        let cfg = &self.config;
        let map = self.label_map(task)?;
        let (n0, k, c) = (cfg.input_dim, cfg.classes, cfg.content_dims());
        let mut rng = stream(cfg.seed, &[20, task as u64, split]);
        let mut x = vec![0.0; n0 * count];
        let mut labels = Vec::with_capacity(count);
        let mut col = vec![0.0; n0];
        for s in 0..count {
            for (d, v) in col.iter_mut().enumerate() {
                let z: f64 = rng.sample(StandardNormal);
                *v = if d < c {
                    z
                } else {
                    self.offsets[task][d - c] + self.context_std[task][d - c] * z
                };
            }
            let mut best = (0, f64::NEG_INFINITY);
            for cls in 0..k {
                let noise: f64 = rng.sample(StandardNormal);
                let logit = map.row(cls).iter().zip(&col).map(|(a, b)| a * b).sum::<f64>()
                    + cfg.label_noise * noise;
                if logit > best.1 {
                    best = (cls, logit);
                }
            }
            labels.push(best.0);
            for (d, &v) in col.iter().enumerate() {
                x[d * count + s] = v;
            }
        }
        Ok(Dataset {
            task_id: task,
            inputs: Tensor::new(&[n0, count], x)?,
            labels,
        })
    }
}

/// Labelled samples of one task, stored column-wise as `input×count`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub task_id: usize,
    pub inputs: Tensor,
    pub labels: Vec<usize>,
}

/// A training sub-batch of one task.
pub type TaskBatch = Dataset;

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_column(&self, s: usize) -> Vec<f64> {
        let n = self.inputs.cols();
        (0..self.inputs.rows()).map(|d| self.inputs.data()[d * n + s]).collect()
    }

    /// The columns at `indices`, in order.
    pub fn select(&self, indices: &[usize]) -> Result<Dataset> {
        let (rows, n) = (self.inputs.rows(), self.inputs.cols());
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(Error::Index { index: bad, len: n });
        }
        let b = indices.len();
        let mut x = vec![0.0; rows * b];
        for d in 0..rows {
            for (j, &i) in indices.iter().enumerate() {
                x[d * b + j] = self.inputs.data()[d * n + i];
            }
        }
        Ok(Dataset {
            task_id: self.task_id,
            inputs: Tensor::new(&[rows, b], x)?,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSplit {
    pub train: Dataset,
    pub heldout: Dataset,
}

/// Train and held-out sets for every task of a fresh family.
pub fn gen_tasks(config: &TaskConfig) -> Result<(SyntheticTaskFamily, Vec<TaskSplit>)> {
    let family = SyntheticTaskFamily::new(config)?;
    let splits = (0..config.tasks)
        .into_par_iter()
        .map(|t| {
            Ok(TaskSplit {
                train: family.sample(t, config.train_per_task, 0)?,
                heldout: family.sample(t, config.heldout_per_task, 1)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((family, splits))
}

/// Output of one backbone forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// `classes×B`.
    pub logits: Var,
    /// Clean `A·x` of each layer, `r×B`, when the variant has a shared `A`.
    pub latents: Vec<Option<Var>>,
}

/// Two frozen dense layers with a ReLU between them, each wrapped by an adapter.
#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    pub layers: Vec<AdapterState>,
}

impl Backbone {
    /// Backbone with `W₁ = C` and `W₂ = V`, so the frozen model reads the shared concept.
    pub fn new(family: &SyntheticTaskFamily, spec: &AdapterSpec, seed: u64) -> Result<Self> {
        Self::from_weights(family.concept.clone(), family.readout.clone(), spec, seed)
    }

    pub fn from_weights(w1: Tensor, w2: Tensor, spec: &AdapterSpec, seed: u64) -> Result<Self> {
        if w1.shape().len() != 2 || w2.shape().len() != 2 || w2.cols() != w1.rows() {
            return Err(Error::shape("backbone", w1.shape(), w2.shape()));
        }
        let layers = [w1, w2]
            .into_iter()
            .enumerate()
            .map(|(l, w)| {
                let spec = spec.clone().with_seed(derive_seed(seed, &[l as u64]));
                init_adapter(&spec, w.with_requires_grad(false), spec.seed)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { layers })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].dims().1
    }

    pub fn classes(&self) -> usize {
        self.layers[self.layers.len() - 1].dims().0
    }

    pub fn trainable_param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| {
                let (m, n) = l.dims();
                crate::adapters::trainable_param_count(&l.spec, m, n)
            })
            .sum()
    }

    pub fn bind(&self, tape: &mut Tape) -> Vec<BoundAdapter> {
        self.layers.iter().map(|l| l.bind(tape)).collect()
    }

    /// `logits = adapter₂(relu(adapter₁(x)))`.
    pub fn forward(&self, tape: &mut Tape, bound: &[BoundAdapter], x: Var, mode: Mode) -> Result<ForwardTrace> {
        let mut h = x;
        let mut latents = Vec::with_capacity(self.layers.len());
        for (l, (layer, b)) in self.layers.iter().zip(bound).enumerate() {
            if l > 0 {
                h = tape.relu(h)?;
            }
            let out = layer.forward(tape, b, h, ForwardCtx { mode, layer: l })?;
            latents.push(out.latent);
            h = out.out;
        }
        Ok(ForwardTrace { logits: h, latents })
    }

    /// Evaluation-mode logits and per-layer latents on plain tensors.
    pub fn eval(&self, x: &Tensor) -> Result<(Tensor, Vec<Option<Tensor>>)> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let trace = self.forward(&mut tape, &bound, xv, Mode::Eval)?;
        let latents = trace.latents.iter().map(|l| l.map(|v| tape.value(v).clone())).collect();
        Ok((tape.value(trace.logits).clone(), latents))
    }

    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        self.eval(x).map(|(l, _)| l)
    }

    /// `W₂·relu(W₁·x)` with every adapter ignored.
    pub fn frozen_logits(&self, x: &Tensor) -> Result<Tensor> {
        dense_logits(self.layers.iter().map(|l| &l.base), x)
    }
}

/// `Wₙ·relu(…relu(W₁·x))` for plain weight matrices, as used by a merged model.
pub fn dense_logits<'a>(weights: impl IntoIterator<Item = &'a Tensor>, x: &Tensor) -> Result<Tensor> {
    let mut h = x.clone();
    for (l, w) in weights.into_iter().enumerate() {
        if l > 0 {
            h.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
        }
        h = w.matmul(&h)?;
    }
    Ok(h)
}

/// Mean negative log-likelihood of `labels` under the column-wise softmax of `logits`.
pub fn task_loss(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let shape = tape.value(logits).shape().to_vec();
    if shape.len() != 2 || shape[1] != labels.len() {
        return Err(Error::shape("task_loss", &shape, &[labels.len()]));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= shape[0]) {
        return Err(Error::Label {
            label: bad,
            classes: shape[0],
        });
    }
    let logp = tape.log_softmax_axis(logits, 0)?;
    let picked = tape.gather_rows(logp, labels)?;
    let mean = tape.mean(picked)?;
    tape.scale(mean, -1.0)
}

/// Column-wise argmax; ties go to the lowest class index.
pub fn argmax_columns(logits: &Tensor) -> Vec<usize> {
    let (k, n) = (logits.rows(), logits.cols());
    (0..n)
        .map(|j| {
            let mut best = 0;
            for c in 1..k {
                if logits.at(c, j) > logits.at(best, j) {
                    best = c;
                }
            }
            best
        })
        .collect()
}

pub fn accuracy_from_logits(logits: &Tensor, labels: &[usize]) -> f64 {
    let pred = argmax_columns(logits);
    let hits = pred.iter().zip(labels).filter(|(p, l)| p == l).count();
    hits as f64 / labels.len().max(1) as f64
}

/// Evaluation-mode accuracy of `model` on `data`.
pub fn accuracy(model: &Backbone, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::InsufficientSamples("accuracy on an empty dataset".into()));
    }
    Ok(accuracy_from_logits(&model.logits(&data.inputs)?, &data.labels))
}

/// Accuracy of the backbone with its adapters ignored.
pub fn frozen_accuracy(model: &Backbone, data: &Dataset) -> Result<f64> {
    Ok(accuracy_from_logits(&model.frozen_logits(&data.inputs)?, &data.labels))
}

#[derive(Debug, Serialize, Deserialize)]
struct SampleRecord {
    task_id: usize,
    x: Vec<f64>,
    label: usize,
}

/// Writes one `{task_id, x, label}` JSON object per line.
pub fn write_jsonl<W: Write>(datasets: &[Dataset], mut out: W) -> Result<()> {
    for d in datasets {
        for s in 0..d.len() {
            let rec = SampleRecord {
                task_id: d.task_id,
                x: d.sample_column(s),
                label: d.labels[s],
            };
            serde_json::to_writer(&mut out, &rec)?;
            out.write_all(b"\n")?;
        }
    }
    Ok(())
}

/// Reads datasets written by [`write_jsonl`], grouped by task in order of first appearance.
pub fn read_jsonl<R: BufRead>(input: R) -> Result<Vec<Dataset>> {
    let mut groups: Vec<(usize, Vec<Vec<f64>>, Vec<usize>)> = Vec::new();
    for (lineno, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: SampleRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Decode(format!("line {}: {e}", lineno + 1)))?;
        let slot = match groups.iter().position(|g| g.0 == rec.task_id) {
            Some(i) => i,
            None => {
                groups.push((rec.task_id, Vec::new(), Vec::new()));
                groups.len() - 1
            }
        };
        let g = &mut groups[slot];
        if let Some(first) = g.1.first() {
            if first.len() != rec.x.len() {
                return Err(Error::shape("read_jsonl", &[first.len()], &[rec.x.len()]));
            }
        }
        g.1.push(rec.x);
        g.2.push(rec.label);
    }
    groups
        .into_iter()
        .map(|(task_id, cols, labels)| {
            let (d, n) = (cols[0].len(), cols.len());
            let mut x = vec![0.0; d * n];
            for (s, col) in cols.iter().enumerate() {
                for (i, &v) in col.iter().enumerate() {
                    x[i * n + s] = v;
                }
            }
            Ok(Dataset {
                task_id,
                inputs: Tensor::new(&[d, n], x)?,
                labels,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests;
