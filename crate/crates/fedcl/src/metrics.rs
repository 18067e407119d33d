//! Evaluation and reporting: accuracy, feature-space separability, PCA
//! projection, and deterministic CSV emission.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Cap returned when the within-class spread is exactly zero (point classes).
pub const SEPARABILITY_CAP: f64 = 1e9;

/// Per-round record of one client's training signals.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientRoundMetrics {
    pub client: usize,
    pub loss: f64,
    pub accuracy: f64,
    pub grad_norm: f64,
}

/// Everything logged for one communication round.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundMetrics {
    pub round: usize,
    pub per_client: Vec<ClientRoundMetrics>,
    pub mean_loss: f64,
    pub mean_accuracy: f64,
    pub mean_grad_norm: f64,
    /// Contrastive loss of the round's local centroids against the global
    /// centroids; NaN for schemes without centroids.
    pub contrastive_loss: f64,
    /// Separability ratio of this round's transmitted features; NaN when
    /// fewer than two classes were observed.
    pub separability: f64,
}

/// Fraction of `argmax(logits) == label`; ties break to the lowest index.
pub fn accuracy(logits: &[Tensor], labels: &[usize]) -> Result<f64> {
    if logits.is_empty() {
        return Err(Error::InvalidArgument("accuracy of an empty batch".into()));
    }
    if logits.len() != labels.len() {
        return Err(Error::shape_mismatch("accuracy", logits.len(), labels.len()));
    }
    let mut correct = 0usize;
    for (l, &y) in logits.iter().zip(labels) {
        let mut best = 0usize;
        let mut best_v = f64::NEG_INFINITY;
        for (i, &v) in l.data().iter().enumerate() {
            if v > best_v {
                best_v = v;
                best = i;
            }
        }
        if best == y {
            correct += 1;
        }
    }
    Ok(correct as f64 / labels.len() as f64)
}

/// Ratio of the minimum distance between class means to the mean
/// within-class distance to the own class mean. Higher is more separable.
///
/// Classes with a single sample contribute nothing to the within-class
/// spread; a spread of exactly zero returns [`SEPARABILITY_CAP`].
pub fn separability(features: &[Tensor], labels: &[usize]) -> Result<f64> {
    if features.len() != labels.len() {
        return Err(Error::shape_mismatch("separability", features.len(), labels.len()));
    }
    let classes: std::collections::BTreeSet<usize> = labels.iter().copied().collect();
    if classes.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "separability needs >= 2 classes, got {}",
            classes.len()
        )));
    }
    let dim = features[0].len();
    let mut means: std::collections::BTreeMap<usize, (Vec<f64>, usize)> = Default::default();
    for (f, &y) in features.iter().zip(labels) {
        let entry = means.entry(y).or_insert_with(|| (vec![0.0; dim], 0));
        for (m, v) in entry.0.iter_mut().zip(f.data()) {
            *m += v;
        }
        entry.1 += 1;
    }
    for (mean, count) in means.values_mut() {
        for m in mean.iter_mut() {
            *m /= *count as f64;
        }
    }

    let mean_list: Vec<&Vec<f64>> = means.values().map(|(m, _)| m).collect();
    let mut min_between = f64::INFINITY;
    for a in 0..mean_list.len() {
        for b in (a + 1)..mean_list.len() {
            let d: f64 = mean_list[a]
                .iter()
                .zip(mean_list[b])
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt();
            min_between = min_between.min(d);
        }
    }

    let mut within_sum = 0.0;
    let mut within_count = 0usize;
    for (f, &y) in features.iter().zip(labels) {
        let (mean, count) = &means[&y];
        if *count < 2 {
            continue; // singleton classes carry no spread information
        }
        let d: f64 = mean
            .iter()
            .zip(f.data())
            .map(|(m, v)| (m - v) * (m - v))
            .sum::<f64>()
            .sqrt();
        within_sum += d;
        within_count += 1;
    }
    if within_count == 0 || within_sum == 0.0 {
        return Ok(SEPARABILITY_CAP);
    }
    Ok(min_between / (within_sum / within_count as f64))
}

/// Result of a principal-component projection.
#[derive(Debug, Clone)]
pub struct PcaProjection {
    /// One row of length `dims` per input feature vector.
    pub coords: Vec<Vec<f64>>,
    /// Fraction of total variance captured by the kept components.
    pub explained: f64,
}

const POWER_ITERS: usize = 500;

/// Projects features onto their top principal components via power iteration
/// with deflation on the covariance matrix.
///
/// Deterministic sign convention: each component's largest-magnitude entry
/// is made positive.
pub fn pca_project(features: &[Tensor], dims: usize) -> Result<PcaProjection> {
    if dims == 0 {
        return Err(Error::InvalidArgument("pca needs dims >= 1".into()));
    }
    if features.len() < dims {
        return Err(Error::InvalidArgument(format!(
            "pca needs at least {dims} samples, got {}",
            features.len()
        )));
    }
    let d = features[0].len();
    if dims > d {
        return Err(Error::InvalidArgument(format!(
            "cannot keep {dims} components of {d}-dim features"
        )));
    }
    let n = features.len();
    let mut mean = vec![0.0; d];
    for f in features {
        for (m, v) in mean.iter_mut().zip(f.data()) {
            *m += v / n as f64;
        }
    }
    let centered: Vec<Vec<f64>> = features
        .iter()
        .map(|f| f.data().iter().zip(&mean).map(|(v, m)| v - m).collect())
        .collect();
    // Covariance, row-major d x d.
    let mut cov = vec![0.0; d * d];
    for row in &centered {
        for i in 0..d {
            for j in 0..d {
                cov[i * d + j] += row[i] * row[j] / n as f64;
            }
        }
    }
    let total_var: f64 = (0..d).map(|i| cov[i * d + i]).sum();
    if total_var <= 0.0 {
        return Err(Error::InvalidArgument(
            "pca on zero-variance features".into(),
        ));
    }

    let mut components: Vec<Vec<f64>> = Vec::with_capacity(dims);
    let mut eigenvalues = Vec::with_capacity(dims);
    let mut work = cov.clone();
    for k in 0..dims {
        // Deterministic start: basis vector cycling through coordinates.
        let mut v = vec![0.0; d];
        v[k % d] = 1.0;
        let mut lambda = 0.0;
        for _ in 0..POWER_ITERS {
            let mut next = vec![0.0; d];
            for i in 0..d {
                for j in 0..d {
                    next[i] += work[i * d + j] * v[j];
                }
            }
            let norm = next.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm < 1e-300 {
                break; // matrix exhausted: remaining variance is zero
            }
            for x in &mut next {
                *x /= norm;
            }
            lambda = norm;
            v = next;
        }
        // Sign convention: largest-magnitude entry positive.
        let lead = v
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().partial_cmp(&b.1.abs()).unwrap())
            .map(|(i, _)| i)
            .unwrap_or(0);
        if v[lead] < 0.0 {
            for x in &mut v {
                *x = -*x;
            }
        }
        eigenvalues.push(lambda);
        // Deflate: work -= lambda v v^T.
        for i in 0..d {
            for j in 0..d {
                work[i * d + j] -= lambda * v[i] * v[j];
            }
        }
        components.push(v);
    }

    let coords = centered
        .iter()
        .map(|row| {
            components
                .iter()
                .map(|c| row.iter().zip(c).map(|(a, b)| a * b).sum())
                .collect()
        })
        .collect();
    Ok(PcaProjection { coords, explained: eigenvalues.iter().sum::<f64>() / total_var })
}

fn fmt_float(v: f64) -> String {
    // 9 significant digits, '.' decimal separator.
    format!("{v:.8e}")
}

/// Writes the per-round metrics series.
///
/// Header `round,client,loss,acc,mean_acc,grad_norm,contrastive_loss,separability`;
/// one row per (round, client) followed by an aggregate row with client = -1.
/// LF line endings, '.' decimal separator, 9 significant digits.
pub fn write_metrics_csv(series: &[RoundMetrics], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, render_metrics_csv(series)).map_err(|e| Error::io(path, e))
}

/// The exact bytes `write_metrics_csv` persists.
pub fn render_metrics_csv(series: &[RoundMetrics]) -> String {
    let mut out =
        String::from("round,client,loss,acc,mean_acc,grad_norm,contrastive_loss,separability\n");
    for rm in series {
        for c in &rm.per_client {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                rm.round,
                c.client,
                fmt_float(c.loss),
                fmt_float(c.accuracy),
                fmt_float(rm.mean_accuracy),
                fmt_float(c.grad_norm),
                fmt_float(rm.contrastive_loss),
                fmt_float(rm.separability),
            )
            .unwrap();
        }
        writeln!(
            out,
            "{},-1,{},{},{},{},{},{}",
            rm.round,
            fmt_float(rm.mean_loss),
            fmt_float(rm.mean_accuracy),
            fmt_float(rm.mean_accuracy),
            fmt_float(rm.mean_grad_norm),
            fmt_float(rm.contrastive_loss),
            fmt_float(rm.separability),
        )
        .unwrap();
    }
    out
}

/// One dumped feature vector for external plotting.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRecord {
    pub client: usize,
    pub label: usize,
    pub feature: Tensor,
}

/// Writes post-training features with header `client,label,f0..f{d-1}`.
pub fn write_features_csv(records: &[FeatureRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let dim = records.first().map(|r| r.feature.len()).unwrap_or(0);
    let mut out = String::from("client,label");
    for i in 0..dim {
        write!(out, ",f{i}").unwrap();
    }
    out.push('\n');
    for r in records {
        write!(out, "{},{}", r.client, r.label).unwrap();
        for v in r.feature.data() {
            write!(out, ",{v}").unwrap();
        }
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}
