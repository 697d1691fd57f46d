//! Representation-alignment losses over down-projection features.
//!
//! Each task contributes a batch of features `φ(x) = A·x`, one row per
//! sample. Two families of losses pull the per-task feature distributions
//! together:
//!
//! - a symmetric KL divergence between diagonal-Gaussian proxies fitted to
//!   each task's batch ([`kl_align_loss`]), and
//! - a multi-kernel MMD between the raw feature sets ([`mk_mmd_loss`]),
//!   using a family of Gaussian kernels whose bandwidths come from the
//!   median pairwise distance and are held constant for differentiation.
//!
//! Both are summed over all unordered task pairs.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Reduction, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Lower bound applied to every proxy variance.
pub const DEFAULT_VARIANCE_FLOOR: f64 = 1e-6;
/// Lower bound on the median-heuristic bandwidth.
pub const BANDWIDTH_FLOOR: f64 = 1e-6;
/// Multiples of the median distance that make up the kernel bank.
pub const BANDWIDTH_MULTIPLIERS: [f64; 5] = [0.25, 0.5, 1.0, 2.0, 4.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AlignMode {
    #[default]
    None,
    Kl,
    Mmd,
}

/// Which adapted layers contribute features.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerSelection {
    #[default]
    All,
    Only(Vec<usize>),
}

impl LayerSelection {
    pub fn resolve(&self, layers: usize) -> Result<Vec<usize>> {
        match self {
            LayerSelection::All => Ok((0..layers).collect()),
            LayerSelection::Only(ids) => {
                if ids.is_empty() {
                    return Err(Error::Config("empty layer selection".into()));
                }
                if let Some(&bad) = ids.iter().find(|&&i| i >= layers) {
                    return Err(Error::Index { index: bad, len: layers });
                }
                Ok(ids.clone())
            }
        }
    }
}

/// Down-projection features of one task at one layer: `B_t×r`, on the tape.
#[derive(Debug, Clone, Copy)]
pub struct TaskFeatures {
    pub task_id: usize,
    pub layer_id: usize,
    pub features: Var,
}

/// Diagonal Gaussian fitted to a batch of features.
#[derive(Debug, Clone, Copy)]
pub struct GaussianStats {
    pub mu: Var,
    pub var: Var,
    pub count: usize,
}

/// Gaussian kernel bandwidths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelBank {
    bandwidths: Vec<f64>,
}

impl KernelBank {
    pub fn new(bandwidths: Vec<f64>) -> Result<Self> {
        if bandwidths.is_empty() {
            return Err(Error::Config("kernel bank is empty".into()));
        }
        if bandwidths.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::Config(format!("non-positive bandwidth in {bandwidths:?}")));
        }
        if bandwidths.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::Config(format!("bandwidths not sorted: {bandwidths:?}")));
        }
        Ok(Self { bandwidths })
    }

    /// `σ_med × {¼, ½, 1, 2, 4}`.
    pub fn from_median(sigma: f64) -> Result<Self> {
        Self::new(BANDWIDTH_MULTIPLIERS.iter().map(|m| m * sigma).collect())
    }

    /// Median heuristic over the rows of every feature matrix, pooled.
    pub fn median_heuristic(features: &[&Tensor]) -> Result<Self> {
        let rows: Vec<&[f64]> = features
            .iter()
            .flat_map(|t| (0..t.rows()).map(move |i| t.row(i)))
            .collect();
        Self::from_median(median_bandwidth(&rows)?)
    }

    pub fn bandwidths(&self) -> &[f64] {
        &self.bandwidths
    }
}

/// Rows of `latent` transposed into per-sample features for the chosen layers.
///
/// `latents[l]` is the clean `A·x` of layer `l`, shaped `r×B`.
pub fn extract_features(
    tape: &mut Tape,
    latents: &[Var],
    task_id: usize,
    selection: &LayerSelection,
) -> Result<Vec<TaskFeatures>> {
    if latents.is_empty() {
        return Err(Error::Config("model has no adapted layers with a shared down-projection".into()));
    }
    selection
        .resolve(latents.len())?
        .into_iter()
        .map(|layer_id| {
            Ok(TaskFeatures {
                task_id,
                layer_id,
                features: tape.transpose(latents[layer_id])?,
            })
        })
        .collect()
}

/// Mean and floored population variance of each feature dimension.
pub fn batch_gaussian_stats(tape: &mut Tape, f: &TaskFeatures, floor: f64) -> Result<GaussianStats> {
    let shape = tape.value(f.features).shape().to_vec();
    if shape.len() != 2 {
        return Err(Error::shape("batch_gaussian_stats", &shape, &[]));
    }
    if shape[0] < 2 {
        return Err(Error::InsufficientSamples(format!(
            "task {} has {} samples; variance needs at least 2",
            f.task_id, shape[0]
        )));
    }
    if !(floor > 0.0) {
        return Err(Error::Config(format!("variance floor {floor} must be positive")));
    }
    let mu = tape.reduce(Reduction::Mean, f.features, Some(0))?;
    let raw = tape.reduce(Reduction::VarPopulation, f.features, Some(0))?;
    let var = tape.clamp_min(raw, floor)?;
    Ok(GaussianStats {
        mu,
        var,
        count: shape[0],
    })
}

/// `KL(p ‖ q)` between diagonal Gaussians.
pub fn kl_diag_gaussian(tape: &mut Tape, p: &GaussianStats, q: &GaussianStats) -> Result<Var> {
    let (ps, qs) = (tape.value(p.mu).shape().to_vec(), tape.value(q.mu).shape().to_vec());
    if ps != qs || tape.value(p.var).shape() != ps || tape.value(q.var).shape() != qs {
        return Err(Error::shape("kl_diag_gaussian", &ps, &qs));
    }
    let ratio = tape.div(q.var, p.var)?;
    let log_ratio = tape.log(ratio)?;
    let half_log = tape.scale(log_ratio, 0.5)?;
    let diff = tape.sub(p.mu, q.mu)?;
    let diff_sq = tape.square(diff)?;
    let num = tape.add(p.var, diff_sq)?;
    let frac = tape.div(num, q.var)?;
    let half_frac = tape.scale(frac, 0.5)?;
    let term = tape.add(half_log, half_frac)?;
    let term = tape.add_scalar(term, -0.5)?;
    tape.sum(term)
}

fn sum_pairs<F>(tape: &mut Tape, m: usize, mut pair: F) -> Result<Var>
where
    F: FnMut(&mut Tape, usize, usize) -> Result<Var>,
{
    if m < 2 {
        return Err(Error::NeedsTwoTasks(m));
    }
    let mut total: Option<Var> = None;
    for i in 0..m {
        for j in i + 1..m {
            let v = pair(tape, i, j)?;
            total = Some(match total {
                Some(t) => tape.add(t, v)?,
                None => v,
            });
        }
    }
    Ok(total.expect("m >= 2"))
}

/// `Σ_{i<j} ½·(KL(pᵢ‖pⱼ) + KL(pⱼ‖pᵢ))`.
pub fn kl_align_loss(tape: &mut Tape, stats: &[GaussianStats]) -> Result<Var> {
    sum_pairs(tape, stats.len(), |tape, i, j| {
        let a = kl_diag_gaussian(tape, &stats[i], &stats[j])?;
        let b = kl_diag_gaussian(tape, &stats[j], &stats[i])?;
        let s = tape.add(a, b)?;
        tape.scale(s, 0.5)
    })
}

/// Median pairwise Euclidean distance between points, floored at [`BANDWIDTH_FLOOR`].
pub fn median_bandwidth(points: &[&[f64]]) -> Result<f64> {
    if points.len() < 2 {
        return Err(Error::InsufficientSamples(format!(
            "median bandwidth needs at least 2 points, got {}",
            points.len()
        )));
    }
    let mut dists = Vec::with_capacity(points.len() * (points.len() - 1) / 2);
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            let d2: f64 = points[i].iter().zip(points[j]).map(|(a, b)| (a - b) * (a - b)).sum();
            dists.push(d2.sqrt());
        }
    }
    dists.sort_by(f64::total_cmp);
    let k = dists.len();
    let median = if k % 2 == 1 {
        dists[k / 2]
    } else {
        0.5 * (dists[k / 2 - 1] + dists[k / 2])
    };
    Ok(median.max(BANDWIDTH_FLOOR))
}

/// Biased squared MMD between the rows of `x` and `y`, summed over the kernel bank.
pub fn mmd2(tape: &mut Tape, x: Var, y: Var, bank: &KernelBank) -> Result<Var> {
    for v in [x, y] {
        let shape = tape.value(v).shape();
        if shape.len() != 2 {
            return Err(Error::shape("mmd2", shape, &[]));
        }
        if shape[0] == 0 {
            return Err(Error::InsufficientSamples("mmd2 needs non-empty sample sets".into()));
        }
    }
    let dxx = tape.pairwise_sq_dist(x, x)?;
    let dyy = tape.pairwise_sq_dist(y, y)?;
    let dxy = tape.pairwise_sq_dist(x, y)?;
    let mut total: Option<Var> = None;
    for &sigma in bank.bandwidths() {
        let gamma = -1.0 / (2.0 * sigma * sigma);
        let kernel_mean = |tape: &mut Tape, d: Var| -> Result<Var> {
            let s = tape.scale(d, gamma)?;
            let k = tape.exp(s)?;
            tape.mean(k)
        };
        let kxx = kernel_mean(tape, dxx)?;
        let kyy = kernel_mean(tape, dyy)?;
        let kxy = kernel_mean(tape, dxy)?;
        let within = tape.add(kxx, kyy)?;
        let cross = tape.scale(kxy, 2.0)?;
        let term = tape.sub(within, cross)?;
        total = Some(match total {
            Some(t) => tape.add(t, term)?,
            None => term,
        });
    }
    Ok(total.expect("non-empty bank"))
}

/// `Σ_{i<j} mmd2(featuresᵢ, featuresⱼ)`.
pub fn mk_mmd_loss(tape: &mut Tape, features: &[TaskFeatures], bank: &KernelBank) -> Result<Var> {
    sum_pairs(tape, features.len(), |tape, i, j| {
        mmd2(tape, features[i].features, features[j].features, bank)
    })
}

/// `L_lm + λ·L_align`. With `λ = 0` the alignment term is left off the graph entirely.
pub fn total_loss(tape: &mut Tape, lm: Var, align: Var, lambda: f64) -> Result<Var> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::Config(format!("lambda {lambda} must be non-negative")));
    }
    if lambda == 0.0 {
        return Ok(lm);
    }
    let weighted = tape.scale(align, lambda)?;
    tape.add(lm, weighted)
}

/// Alignment loss of one layer: features of every task at that layer.
pub fn layer_alignment_loss(
    tape: &mut Tape,
    mode: AlignMode,
    features: &[TaskFeatures],
    variance_floor: f64,
) -> Result<Option<Var>> {
    match mode {
        AlignMode::None => Ok(None),
        AlignMode::Kl => {
            let stats = features
                .iter()
                .map(|f| batch_gaussian_stats(tape, f, variance_floor))
                .collect::<Result<Vec<_>>>()?;
            kl_align_loss(tape, &stats).map(Some)
        }
        AlignMode::Mmd => {
            if features.len() < 2 {
                return Err(Error::NeedsTwoTasks(features.len()));
            }
            let values: Vec<Tensor> = features.iter().map(|f| tape.value(f.features).clone()).collect();
            let refs: Vec<&Tensor> = values.iter().collect();
            let bank = KernelBank::median_heuristic(&refs)?;
            mk_mmd_loss(tape, features, &bank).map(Some)
        }
    }
}

/// Averages per-layer alignment losses. `per_layer[l]` holds one entry per task.
pub fn aligned_loss_over_layers(
    tape: &mut Tape,
    mode: AlignMode,
    per_layer: &[Vec<TaskFeatures>],
    variance_floor: f64,
) -> Result<Option<Var>> {
    if mode == AlignMode::None {
        return Ok(None);
    }
    let mut losses = Vec::with_capacity(per_layer.len());
    for layer in per_layer {
        if let Some(l) = layer_alignment_loss(tape, mode, layer, variance_floor)? {
            losses.push(l);
        }
    }
    let Some((&first, rest)) = losses.split_first() else {
        return Err(Error::Config("alignment selected no layers".into()));
    };
    let mut total = first;
    for &l in rest {
        total = tape.add(total, l)?;
    }
    if losses.len() > 1 {
        total = tape.scale(total, 1.0 / losses.len() as f64)?;
    }
    Ok(Some(total))
}
