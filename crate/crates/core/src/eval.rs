//! Metrics and embedding diagnostics: accuracy, macro recall, macro
//! one-vs-rest AUC (Mann-Whitney pair counting), confusion matrix,
//! intra/inter-class cosine separation, and a deterministic 2D PCA
//! projection.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Result, SclError};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, Serialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub macro_recall: f64,
    /// Unset until `macro_ovr_auc` fills it in.
    pub macro_ovr_auc: Option<f64>,
    /// Rows = true class, columns = predicted class.
    pub confusion: Vec<Vec<u64>>,
    pub per_class_recall: Vec<f64>,
    pub n_samples: usize,
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct SeparationStats {
    pub mean_intra_cos: f64,
    pub mean_inter_cos: f64,
    pub separation_gap: f64,
}

/// Argmax predictions (ties to the lowest class index), confusion matrix,
/// per-class and macro recall. The AUC field is left unset.
pub fn confusion_and_accuracy<S: Scalar>(logits: &Tensor<S>, labels: &[usize]) -> Result<MetricsReport> {
    let (n, k) = (logits.rows(), logits.cols());
    if n == 0 || labels.len() != n {
        return Err(SclError::Contract(format!(
            "confusion_and_accuracy: {} labels for {} rows",
            labels.len(),
            n
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(SclError::Contract(format!("label {bad} out of range [0, {k})")));
    }
    let mut confusion = vec![vec![0u64; k]; k];
    for (row, &truth) in labels.iter().enumerate() {
        let mut best = 0usize;
        for j in 1..k {
            if logits.at2(row, j) > logits.at2(row, best) {
                best = j;
            }
        }
        confusion[truth][best] += 1;
    }
    let trace: u64 = (0..k).map(|i| confusion[i][i]).sum();
    let per_class_recall: Vec<f64> = (0..k)
        .map(|c| {
            let total: u64 = confusion[c].iter().sum();
            if total == 0 {
                f64::NAN
            } else {
                confusion[c][c] as f64 / total as f64
            }
        })
        .collect();
    let present: Vec<f64> = per_class_recall.iter().copied().filter(|r| !r.is_nan()).collect();
    Ok(MetricsReport {
        accuracy: trace as f64 / n as f64,
        macro_recall: present.iter().sum::<f64>() / present.len() as f64,
        macro_ovr_auc: None,
        confusion,
        per_class_recall,
        n_samples: n,
    })
}

/// Macro one-vs-rest AUC via the Mann-Whitney statistic: per class, the
/// fraction of (positive, negative) pairs ranked correctly, ties counted
/// half. Classes without both a positive and a negative are skipped.
pub fn macro_ovr_auc<S: Scalar>(scores: &Tensor<S>, labels: &[usize]) -> Result<f64> {
    let (n, k) = (scores.rows(), scores.cols());
    if n < 2 || labels.len() != n {
        return Err(SclError::Contract("macro_ovr_auc needs n >= 2 aligned scores".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(SclError::Contract(format!("label {bad} out of range [0, {k})")));
    }
    let mut aucs = Vec::new();
    for class in 0..k {
        let n_pos = labels.iter().filter(|&&l| l == class).count();
        let n_neg = n - n_pos;
        if n_pos == 0 || n_neg == 0 {
            continue;
        }
        // midrank sum of the positives equals U + n_pos(n_pos+1)/2
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| {
            scores
                .at2(a, class)
                .partial_cmp(&scores.at2(b, class))
                .expect("finite scores")
        });
        let mut rank_sum_pos = 0.0f64;
        let mut i = 0usize;
        while i < n {
            let mut j = i;
            while j + 1 < n && scores.at2(order[j + 1], class) == scores.at2(order[i], class) {
                j += 1;
            }
            let midrank = (i + j) as f64 / 2.0 + 1.0;
            for &idx in &order[i..=j] {
                if labels[idx] == class {
                    rank_sum_pos += midrank;
                }
            }
            i = j + 1;
        }
        let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
        aucs.push(u / (n_pos as f64 * n_neg as f64));
    }
    if aucs.is_empty() {
        return Err(SclError::Contract(
            "macro_ovr_auc: no class has both positive and negative samples".into(),
        ));
    }
    Ok(aucs.iter().sum::<f64>() / aucs.len() as f64)
}

const EXACT_PAIR_LIMIT: usize = 2000;
const SUBSAMPLE_PAIRS: usize = 2_000_000;

/// Mean cosine similarity over same-class and different-class embedding
/// pairs (self-pairs excluded). Exact enumeration up to 2000 rows, seeded
/// uniform pair subsampling beyond.
pub fn embedding_separation<S: Scalar>(embeddings: &Tensor<S>, labels: &[usize]) -> Result<SeparationStats> {
    let (n, d) = (embeddings.rows(), embeddings.cols());
    if n < 2 || labels.len() != n {
        return Err(SclError::Contract("embedding_separation needs n >= 2 labeled rows".into()));
    }
    let mut unit = vec![0.0f64; n * d];
    for i in 0..n {
        let row: Vec<f64> = (0..d).map(|j| embeddings.at2(i, j).to_f64_lossy()).collect();
        let norm = (row.iter().map(|v| v * v).sum::<f64>() + 1e-12).sqrt();
        for j in 0..d {
            unit[i * d + j] = row[j] / norm;
        }
    }
    let cos = |a: usize, b: usize| -> f64 {
        unit[a * d..(a + 1) * d]
            .iter()
            .zip(&unit[b * d..(b + 1) * d])
            .map(|(x, y)| x * y)
            .sum()
    };
    let mut intra = (0.0f64, 0usize);
    let mut inter = (0.0f64, 0usize);
    if n <= EXACT_PAIR_LIMIT {
        for a in 0..n {
            for b in (a + 1)..n {
                let c = cos(a, b);
                if labels[a] == labels[b] {
                    intra = (intra.0 + c, intra.1 + 1);
                } else {
                    inter = (inter.0 + c, inter.1 + 1);
                }
            }
        }
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..SUBSAMPLE_PAIRS {
            let a = rng.gen_range(0..n);
            let b = rng.gen_range(0..n);
            if a == b {
                continue;
            }
            let c = cos(a, b);
            if labels[a] == labels[b] {
                intra = (intra.0 + c, intra.1 + 1);
            } else {
                inter = (inter.0 + c, inter.1 + 1);
            }
        }
    }
    if intra.1 == 0 || inter.1 == 0 {
        return Err(SclError::Contract(
            "embedding_separation needs at least one intra-class and one inter-class pair".into(),
        ));
    }
    let mean_intra = intra.0 / intra.1 as f64;
    let mean_inter = inter.0 / inter.1 as f64;
    Ok(SeparationStats {
        mean_intra_cos: mean_intra,
        mean_inter_cos: mean_inter,
        separation_gap: mean_intra - mean_inter,
    })
}

const PCA_TOL: f64 = 1e-9;
const PCA_MAX_ITERS: usize = 10_000;

/// Mean-centered projection onto the top-2 covariance eigenvectors, found
/// by deterministic power iteration with deflation. Each eigenvector's
/// first nonzero coordinate is made positive. Returns the `[n, 2]`
/// projection and the two explained-variance fractions.
pub fn pca_project_2d<S: Scalar>(embeddings: &Tensor<S>) -> Result<(Tensor<f64>, [f64; 2])> {
    let (n, d) = (embeddings.rows(), embeddings.cols());
    if n < 3 || d < 2 {
        return Err(SclError::Contract("pca_project_2d needs n >= 3 and D >= 2".into()));
    }
    let mut centered = vec![0.0f64; n * d];
    for j in 0..d {
        let mean: f64 = (0..n).map(|i| embeddings.at2(i, j).to_f64_lossy()).sum::<f64>() / n as f64;
        for i in 0..n {
            centered[i * d + j] = embeddings.at2(i, j).to_f64_lossy() - mean;
        }
    }
    let mut cov = vec![0.0f64; d * d];
    for row in centered.chunks_exact(d) {
        for a in 0..d {
            for b in a..d {
                cov[a * d + b] += row[a] * row[b];
            }
        }
    }
    for a in 0..d {
        for b in 0..a {
            cov[a * d + b] = cov[b * d + a];
        }
    }
    let denom = (n - 1) as f64;
    for v in &mut cov {
        *v /= denom;
    }
    let total_var: f64 = (0..d).map(|i| cov[i * d + i]).sum();

    let mut projection = vec![0.0f64; n * 2];
    let mut fractions = [0.0f64; 2];
    if total_var > 0.0 {
        for comp in 0..2 {
            let (eigval, eigvec) = power_iteration(&cov, d);
            if eigval <= total_var * 1e-12 {
                break; // remaining rank exhausted; this component stays zero
            }
            fractions[comp] = eigval / total_var;
            for i in 0..n {
                projection[i * 2 + comp] = centered[i * d..(i + 1) * d]
                    .iter()
                    .zip(&eigvec)
                    .map(|(x, v)| x * v)
                    .sum();
            }
            // deflate: C <- C - lambda v v^T
            for a in 0..d {
                for b in 0..d {
                    cov[a * d + b] -= eigval * eigvec[a] * eigvec[b];
                }
            }
        }
    }
    Ok((Tensor::new(vec![n, 2], projection)?, fractions))
}

/// Dominant eigenpair by power iteration from a fixed start vector.
fn power_iteration(cov: &[f64], d: usize) -> (f64, Vec<f64>) {
    let mut v: Vec<f64> = (0..d).map(|i| 1.0 + 0.01 * i as f64).collect();
    normalize(&mut v);
    let mut prev = v.clone();
    for _ in 0..PCA_MAX_ITERS {
        let mut next = vec![0.0f64; d];
        for a in 0..d {
            next[a] = cov[a * d..(a + 1) * d].iter().zip(&v).map(|(c, x)| c * x).sum();
        }
        let norm = next.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            break;
        }
        for x in &mut next {
            *x /= norm;
        }
        // eigenvectors are sign-ambiguous; compare against both signs
        let diff = prev
            .iter()
            .zip(&next)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        let diff_neg = prev
            .iter()
            .zip(&next)
            .map(|(a, b)| (a + b).abs())
            .fold(0.0f64, f64::max);
        v = next.clone();
        if diff.min(diff_neg) < PCA_TOL {
            break;
        }
        prev = next;
    }
    // fix the sign: first coordinate with meaningful magnitude is positive
    if let Some(&lead) = v.iter().find(|x| x.abs() > 1e-12) {
        if lead < 0.0 {
            for x in &mut v {
                *x = -*x;
            }
        }
    }
    let mut cv = vec![0.0f64; d];
    for a in 0..d {
        cv[a] = cov[a * d..(a + 1) * d].iter().zip(&v).map(|(c, x)| c * x).sum();
    }
    let eigval: f64 = cv.iter().zip(&v).map(|(a, b)| a * b).sum();
    (eigval.max(0.0), v)
}

fn normalize(v: &mut [f64]) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        for x in v.iter_mut() {
            *x /= norm;
        }
    }
}
