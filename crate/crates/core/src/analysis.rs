//! Measurements on trained adapters: head similarity and task-feature geometry.
//!
//! Everything here works on plain tensors, so it can run on a snapshot of a
//! model while another thread keeps training.

use std::io::Write;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::rng::stream;

const PCA_TOL: f64 = 1e-9;
const PCA_MAX_ITERS: usize = 500;

/// Pairwise cosine similarities of flattened heads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityReport {
    pub matrix: Vec<Vec<f64>>,
    pub off_diag_mean: f64,
    pub off_diag_median: f64,
}

impl SimilarityReport {
    /// The `N(N−1)` off-diagonal entries, row by row.
    pub fn off_diagonal(&self) -> Vec<f64> {
        let n = self.matrix.len();
        (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| self.matrix[i][j])
            .collect()
    }
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let k = values.len();
    if k % 2 == 1 {
        values[k / 2]
    } else {
        0.5 * (values[k / 2 - 1] + values[k / 2])
    }
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Cosine similarity between every pair of heads, each flattened row-major.
pub fn head_similarity(heads: &[Tensor]) -> Result<SimilarityReport> {
    let n = heads.len();
    if n < 2 {
        return Err(Error::InsufficientSamples(format!(
            "head similarity needs at least 2 heads, got {n}"
        )));
    }
    for h in &heads[1..] {
        if h.shape() != heads[0].shape() {
            return Err(Error::shape("head_similarity", heads[0].shape(), h.shape()));
        }
    }
    let norms: Vec<f64> = heads.iter().map(Tensor::norm).collect();
    if let Some(i) = norms.iter().position(|&v| v == 0.0) {
        return Err(Error::DegenerateHead(i));
    }
    let mut matrix = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i..n {
            let c = dot(heads[i].data(), heads[j].data()) / (norms[i] * norms[j]);
            matrix[i][j] = c;
            matrix[j][i] = c;
        }
    }
    let mut report = SimilarityReport {
        matrix,
        off_diag_mean: 0.0,
        off_diag_median: 0.0,
    };
    let mut off = report.off_diagonal();
    report.off_diag_mean = mean(&off);
    report.off_diag_median = median(&mut off);
    Ok(report)
}

/// Mean and median over the off-diagonal entries of several layers together.
pub fn pooled_similarity(reports: &[SimilarityReport]) -> Option<(f64, f64)> {
    let mut all: Vec<f64> = reports.iter().flat_map(SimilarityReport::off_diagonal).collect();
    if all.is_empty() {
        return None;
    }
    let m = mean(&all);
    Some((m, median(&mut all)))
}

/// Row means of a `B×r` feature matrix.
pub fn centroid(features: &Tensor) -> Vec<f64> {
    let (b, r) = (features.rows(), features.cols());
    (0..r)
        .map(|j| (0..b).map(|i| features.at(i, j)).sum::<f64>() / b as f64)
        .collect()
}

/// Mean Euclidean distance between task centroids over all task pairs.
pub fn centroid_distance(features: &[&Tensor]) -> Result<f64> {
    let m = features.len();
    if m < 2 {
        return Err(Error::NeedsTwoTasks(m));
    }
    for f in &features[1..] {
        if f.cols() != features[0].cols() {
            return Err(Error::shape("centroid_distance", features[0].shape(), f.shape()));
        }
    }
    let cs: Vec<Vec<f64>> = features.iter().map(|f| centroid(f)).collect();
    let mut total = 0.0;
    let mut pairs = 0;
    for i in 0..m {
        for j in i + 1..m {
            total += cs[i].iter().zip(&cs[j]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            pairs += 1;
        }
    }
    Ok(total / pairs as f64)
}

/// Top-2 principal-direction projection of pooled features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Projection {
    pub coords: Vec<[f64; 2]>,
    pub task_ids: Vec<usize>,
    /// Unit principal directions, largest loading positive.
    pub components: [Vec<f64>; 2],
    /// Variance captured by each component.
    pub explained: [f64; 2],
    pub total_variance: f64,
    /// The data had rank below 2, so the second direction is an arbitrary orthogonal unit vector.
    pub rank_deficient: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeometryReport {
    pub centroids: Vec<Vec<f64>>,
    pub centroid_distance: f64,
    pub projection: Projection,
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = dot(v, v).sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

fn canonical_sign(v: &mut [f64]) {
    let lead = v.iter().copied().fold(0.0f64, |acc, x| if x.abs() > acc.abs() { x } else { acc });
    if lead < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

fn sym_matvec(s: &[f64], d: usize, v: &[f64]) -> Vec<f64> {
    (0..d).map(|i| dot(&s[i * d..(i + 1) * d], v)).collect()
}

/// Leading eigenvector of the symmetric `d×d` matrix `s` by power iteration.
fn power_iteration(s: &[f64], d: usize, start: Vec<f64>) -> (Vec<f64>, f64) {
    let mut v = start;
    normalize(&mut v);
    for _ in 0..PCA_MAX_ITERS {
        let mut w = sym_matvec(s, d, &v);
        if normalize(&mut w) == 0.0 {
            return (v, 0.0);
        }
        // compare up to sign so a negative eigenvalue still counts as converged
        let flip = if dot(&w, &v) < 0.0 { -1.0 } else { 1.0 };
        let delta = w.iter().zip(&v).map(|(a, b)| (a - flip * b).powi(2)).sum::<f64>().sqrt();
        v = w;
        if delta < PCA_TOL {
            break;
        }
    }
    let lambda = dot(&v, &sym_matvec(s, d, &v));
    (v, lambda)
}

/// Centers the pooled samples and projects them onto their top two principal directions.
///
/// `samples` pairs a task id with a `B×r` feature matrix. When more than
/// `cap` rows are pooled a seeded uniform subsample of `cap` rows is used.
pub fn pca2d(samples: &[(usize, &Tensor)], cap: usize, seed: u64) -> Result<Projection> {
    let mut rows: Vec<(usize, &[f64])> = samples
        .iter()
        .flat_map(|(t, f)| (0..f.rows()).map(move |i| (*t, f.row(i))))
        .collect();
    let d = rows.first().map_or(0, |r| r.1.len());
    if rows.iter().any(|r| r.1.len() != d) {
        return Err(Error::Config("pca2d: samples disagree on feature dimension".into()));
    }
    if d < 2 {
        return Err(Error::Config(format!("pca2d needs feature dim ≥ 2, got {d}")));
    }
    let mut rng = stream(seed, &[40]);
    if rows.len() > cap {
        // partial Fisher-Yates, then restore the original order
        let mut idx: Vec<usize> = (0..rows.len()).collect();
        for i in 0..cap {
            let j = rng.random_range(i..idx.len());
            idx.swap(i, j);
        }
        let mut keep = idx[..cap].to_vec();
        keep.sort_unstable();
        rows = keep.into_iter().map(|i| rows[i]).collect();
    }
    let n = rows.len();
    if n < 3 {
        return Err(Error::InsufficientSamples(format!("pca2d needs at least 3 samples, got {n}")));
    }

    let mut mu = vec![0.0; d];
    for (_, r) in &rows {
        mu.iter_mut().zip(*r).for_each(|(m, v)| *m += v / n as f64);
    }
    let centered: Vec<Vec<f64>> = rows
        .iter()
        .map(|(_, r)| r.iter().zip(&mu).map(|(v, m)| v - m).collect())
        .collect();
    let mut cov = vec![0.0; d * d];
    for c in &centered {
        for i in 0..d {
            for j in 0..d {
                cov[i * d + j] += c[i] * c[j] / n as f64;
            }
        }
    }
    let total_variance: f64 = (0..d).map(|i| cov[i * d + i]).sum();
    let scale = total_variance.max(f64::MIN_POSITIVE);

    let start = |rng: &mut rand_chacha::ChaCha8Rng| (0..d).map(|_| rng.sample(StandardNormal)).collect::<Vec<f64>>();
    let (mut v1, l1) = power_iteration(&cov, d, start(&mut rng));
    canonical_sign(&mut v1);
    let mut deflated = cov.clone();
    for i in 0..d {
        for j in 0..d {
            deflated[i * d + j] -= l1 * v1[i] * v1[j];
        }
    }
    let mut s2 = start(&mut rng);
    let proj = dot(&s2, &v1);
    s2.iter_mut().zip(&v1).for_each(|(x, u)| *x -= proj * u);
    let (mut v2, l2) = power_iteration(&deflated, d, s2);
    // re-orthogonalize against rounding drift
    let proj = dot(&v2, &v1);
    v2.iter_mut().zip(&v1).for_each(|(x, u)| *x -= proj * u);
    let second_norm = normalize(&mut v2);
    let rank_deficient = l2 <= 1e-12 * scale || second_norm < 1e-6;
    if rank_deficient {
        // the basis vector least aligned with v1, made orthogonal to it
        let k = (0..d)
            .min_by(|&a, &b| v1[a].abs().total_cmp(&v1[b].abs()))
            .expect("d ≥ 2");
        v2 = (0..d).map(|i| if i == k { 1.0 } else { 0.0 } - v1[k] * v1[i]).collect();
        normalize(&mut v2);
    }
    canonical_sign(&mut v2);

    let coords = centered.iter().map(|c| [dot(c, &v1), dot(c, &v2)]).collect();
    let explained = [dot(&v1, &sym_matvec(&cov, d, &v1)), dot(&v2, &sym_matvec(&cov, d, &v2))];
    Ok(Projection {
        coords,
        task_ids: rows.iter().map(|r| r.0).collect(),
        components: [v1, v2],
        explained,
        total_variance,
        rank_deficient,
    })
}

/// Centroids, their mean pairwise distance, and a 2-D projection of per-task features.
pub fn geometry(features: &[&Tensor], cap: usize, seed: u64) -> Result<GeometryReport> {
    let samples: Vec<(usize, &Tensor)> = features.iter().copied().enumerate().collect();
    Ok(GeometryReport {
        centroids: features.iter().map(|f| centroid(f)).collect(),
        centroid_distance: centroid_distance(features)?,
        projection: pca2d(&samples, cap, seed)?,
    })
}

#[derive(Serialize)]
struct FeatureRecord<'a> {
    task_id: usize,
    vector: &'a [f64],
}

/// Writes one `{task_id, vector}` JSON object per feature row.
pub fn write_features_jsonl<W: Write>(features: &[(usize, &Tensor)], mut out: W) -> Result<()> {
    for (task_id, f) in features {
        for i in 0..f.rows() {
            serde_json::to_writer(
                &mut out,
                &FeatureRecord {
                    task_id: *task_id,
                    vector: f.row(i),
                },
            )?;
            out.write_all(b"\n")?;
        }
    }
    Ok(())
}
