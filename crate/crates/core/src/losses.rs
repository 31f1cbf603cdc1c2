//! Loss stack: multi-class focal loss, temperature-scaled cosine-similarity
//! matrices, the contrastive loss over class-complete pairwise batches, the
//! classification loss, and their weighted total.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SclError};
use crate::scalar::Scalar;
use crate::tensor::{ComputationRecord, NodeId};

/// Default initial log-temperature; `t = exp(s)` starts at `1/0.07`.
pub fn default_temp_init_log() -> f64 {
    (1.0f64 / 0.07).ln()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Focal modulation exponent; 0 reduces to cross-entropy.
    pub focal_gamma: f64,
    /// Weight of the contrastive term.
    pub lambda1: f64,
    /// Weight of the classification term.
    pub lambda2: f64,
    /// Initial value of the learnable log-temperature `s`, `t = exp(s)`.
    pub temp_init_log: f64,
    /// Upper clamp on `t`.
    pub temp_max: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            focal_gamma: 2.0,
            lambda1: 1.0,
            lambda2: 1.0,
            temp_init_log: default_temp_init_log(),
            temp_max: 100.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.focal_gamma < 0.0 {
            return Err(SclError::Config("focal_gamma must be >= 0".into()));
        }
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 {
            return Err(SclError::Config("lambda1 and lambda2 must be >= 0".into()));
        }
        if self.temp_max <= 0.0 {
            return Err(SclError::Config("temp_max must be > 0".into()));
        }
        if !self.temp_init_log.is_finite() {
            return Err(SclError::Config("temp_init_log must be finite".into()));
        }
        Ok(())
    }
}

/// The three temperature-scaled cosine-similarity matrices of one batch pair.
#[derive(Clone, Copy, Debug)]
pub struct SimilarityTriple {
    pub s11: NodeId,
    pub s12: NodeId,
    pub s22: NodeId,
}

const NORM_EPS: f64 = 1e-12;

/// Mean over rows of `-(1 - p_y)^gamma * log(p_y)` with `p = softmax(row)`.
pub fn focal_loss_mean<S: Scalar>(
    rec: &mut ComputationRecord<S>,
    logits: NodeId,
    labels: &[usize],
    gamma: S,
) -> Result<NodeId> {
    rec.focal_loss_mean(logits, labels, gamma)
}

/// Builds `S11 = t E1n E1n^T`, `S12 = t E1n E2n^T`, `S22 = t E2n E2n^T`
/// with `t = min(exp(log_temp), temp_max)`. Gradients flow to both
/// embedding nodes and to the log-temperature.
pub fn similarity_triple<S: Scalar>(
    rec: &mut ComputationRecord<S>,
    e1: NodeId,
    e2: NodeId,
    log_temp: NodeId,
    temp_max: S,
) -> Result<SimilarityTriple> {
    let (s1, s2) = (rec.value(e1).shape().to_vec(), rec.value(e2).shape().to_vec());
    if s1 != s2 {
        return Err(SclError::Dim(format!("similarity_triple: {:?} vs {:?}", s1, s2)));
    }
    if s1.len() != 2 || s1[0] < 2 {
        return Err(SclError::Dim(format!(
            "similarity_triple expects [K,D] with K >= 2, got {:?}",
            s1
        )));
    }
    let eps = S::from_f64(NORM_EPS);
    let n1 = rec.l2_normalize_rows(e1, eps)?;
    let n2 = rec.l2_normalize_rows(e2, eps)?;
    let n1t = rec.transpose(n1)?;
    let n2t = rec.transpose(n2)?;
    let raw11 = rec.matmul(n1, n1t)?;
    let raw12 = rec.matmul(n1, n2t)?;
    let raw22 = rec.matmul(n2, n2t)?;
    Ok(SimilarityTriple {
        s11: rec.scale_temp(raw11, log_temp, temp_max)?,
        s12: rec.scale_temp(raw12, log_temp, temp_max)?,
        s22: rec.scale_temp(raw22, log_temp, temp_max)?,
    })
}

fn check_identity_labels(y_gt: &[usize], k: usize) -> Result<()> {
    if y_gt.len() != k || y_gt.iter().enumerate().any(|(i, &y)| i != y) {
        return Err(SclError::Contract(format!(
            "contrastive_loss requires the identity labeling [0..{k}), got {:?}",
            y_gt
        )));
    }
    Ok(())
}

/// Row and column focal losses over the three similarity matrices:
/// six focal terms in total.
pub fn contrastive_loss<S: Scalar>(
    rec: &mut ComputationRecord<S>,
    triple: &SimilarityTriple,
    y_gt: &[usize],
    gamma: S,
) -> Result<NodeId> {
    let k = rec.value(triple.s11).rows();
    check_identity_labels(y_gt, k)?;
    let mut total: Option<NodeId> = None;
    for &s in &[triple.s11, triple.s12, triple.s22] {
        let row = rec.focal_loss_mean(s, y_gt, gamma)?;
        let st = rec.transpose(s)?;
        let col = rec.focal_loss_mean(st, y_gt, gamma)?;
        let pair = rec.add(row, col)?;
        total = Some(match total {
            Some(acc) => rec.add(acc, pair)?,
            None => pair,
        });
    }
    Ok(total.expect("three matrices"))
}

/// `focal(P1) + focal(P2)`.
pub fn classification_loss<S: Scalar>(
    rec: &mut ComputationRecord<S>,
    p1: NodeId,
    p2: NodeId,
    y_gt: &[usize],
    gamma: S,
) -> Result<NodeId> {
    if rec.value(p1).shape() != rec.value(p2).shape() {
        return Err(SclError::Dim("classification_loss: P1 and P2 differ in shape".into()));
    }
    let l1 = rec.focal_loss_mean(p1, y_gt, gamma)?;
    let l2 = rec.focal_loss_mean(p2, y_gt, gamma)?;
    rec.add(l1, l2)
}

/// `lambda1 * L_con + lambda2 * L_cls`.
pub fn total_loss<S: Scalar>(
    rec: &mut ComputationRecord<S>,
    l_con: NodeId,
    l_cls: NodeId,
    cfg: &LossConfig,
) -> Result<NodeId> {
    let a = rec.scale(l_con, S::from_f64(cfg.lambda1))?;
    let b = rec.scale(l_cls, S::from_f64(cfg.lambda2))?;
    rec.add(a, b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{focal_row, Tensor};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn leaf2(rec: &mut ComputationRecord<f64>, rows: usize, cols: usize, v: Vec<f64>) -> NodeId {
        rec.leaf(Tensor::new(vec![rows, cols], v).unwrap())
    }

    fn scalar_of(rec: &ComputationRecord<f64>, id: NodeId) -> f64 {
        rec.value(id).data()[0]
    }

    #[test]
    fn focal_confident_prediction_is_near_zero() {
        let mut rec = ComputationRecord::new();
        let logits = leaf2(&mut rec, 1, 3, vec![50.0, -50.0, -50.0]);
        let l = focal_loss_mean(&mut rec, logits, &[0], 2.0).unwrap();
        assert!(scalar_of(&rec, l) < 1e-8);
    }

    #[test]
    fn focal_gamma_zero_is_cross_entropy() {
        let mut rec = ComputationRecord::new();
        let logits = leaf2(&mut rec, 1, 2, vec![0.7, 0.7]);
        let l = focal_loss_mean(&mut rec, logits, &[0], 0.0).unwrap();
        assert!((scalar_of(&rec, l) - (2.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn focal_matches_direct_formula() {
        // logits [ln 9, 0] give p_y = 0.9 exactly
        let mut rec = ComputationRecord::new();
        let logits = leaf2(&mut rec, 1, 2, vec![(9.0f64).ln(), 0.0]);
        let l = focal_loss_mean(&mut rec, logits, &[0], 2.0).unwrap();
        let expect = 0.01 * -(0.9f64).ln();
        assert!((scalar_of(&rec, l) - expect).abs() < 1e-12);
        assert!((expect - 1.0536e-3).abs() < 1e-6);
    }

    #[test]
    fn focal_rejects_bad_label() {
        let mut rec = ComputationRecord::new();
        let logits = leaf2(&mut rec, 1, 2, vec![0.0, 0.0]);
        assert!(matches!(
            focal_loss_mean(&mut rec, logits, &[5], 2.0),
            Err(SclError::Contract(_))
        ));
    }

    fn one_hot_rows(k: usize, d: usize) -> Vec<f64> {
        let mut v = vec![0.0; k * d];
        for i in 0..k {
            v[i * d + i] = 1.0;
        }
        v
    }

    #[test]
    fn similarity_identity_for_orthonormal_rows() {
        let mut rec = ComputationRecord::new();
        let e = one_hot_rows(4, 6);
        let e1 = leaf2(&mut rec, 4, 6, e.clone());
        let e2 = leaf2(&mut rec, 4, 6, e);
        let lt = rec.leaf(Tensor::scalar(0.0)); // t = exp(0) = 1
        let triple = similarity_triple(&mut rec, e1, e2, lt, 100.0).unwrap();
        let s12 = rec.value(triple.s12);
        for i in 0..4 {
            for j in 0..4 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((s12.at2(i, j) - want).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn similarity_diag_equals_t_and_matches_cosine_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let e1v: Vec<f64> = (0..32).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let e2v: Vec<f64> = (0..32).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let log_t = 0.9f64;
        let t = log_t.exp();
        let mut rec = ComputationRecord::new();
        let e1 = leaf2(&mut rec, 4, 8, e1v.clone());
        let e2 = leaf2(&mut rec, 4, 8, e2v.clone());
        let lt = rec.leaf(Tensor::scalar(log_t));
        let triple = similarity_triple(&mut rec, e1, e2, lt, 100.0).unwrap();
        for i in 0..4 {
            assert!((rec.value(triple.s11).at2(i, i) - t).abs() < 1e-5);
            assert!((rec.value(triple.s22).at2(i, i) - t).abs() < 1e-5);
        }
        // direct cosine oracle for S12
        let cos = |a: &[f64], b: &[f64]| {
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            dot / (na * nb)
        };
        for a in 0..4 {
            for b in 0..4 {
                let want = cos(&e1v[a * 8..a * 8 + 8], &e2v[b * 8..b * 8 + 8]) * t;
                assert!((rec.value(triple.s12).at2(a, b) - want).abs() < 1e-5);
            }
        }
    }

    fn identity(k: usize) -> Vec<usize> {
        (0..k).collect()
    }

    #[test]
    fn contrastive_uniform_closed_form() {
        // all rows identical: every softmax is uniform, each of the six
        // focal terms equals (1 - 1/K)^2 ln K
        let k = 24;
        let d = 8;
        let row: Vec<f64> = (0..d).map(|j| 0.3 + 0.1 * j as f64).collect();
        let mut v = Vec::with_capacity(k * d);
        for _ in 0..k {
            v.extend_from_slice(&row);
        }
        let mut rec = ComputationRecord::new();
        let e1 = leaf2(&mut rec, k, d, v.clone());
        let e2 = leaf2(&mut rec, k, d, v);
        let lt = rec.leaf(Tensor::scalar(0.0));
        let triple = similarity_triple(&mut rec, e1, e2, lt, 100.0).unwrap();
        let l = contrastive_loss(&mut rec, &triple, &identity(k), 2.0).unwrap();
        let expect = 6.0 * (23.0f64 / 24.0).powi(2) * (24.0f64).ln();
        assert!((expect - 17.512).abs() < 1e-3);
        assert!((scalar_of(&rec, l) - expect).abs() < 1e-9);
    }

    #[test]
    fn contrastive_orthonormal_high_temp_is_tiny() {
        let k = 24;
        let e = one_hot_rows(k, k);
        let mut rec = ComputationRecord::new();
        let e1 = leaf2(&mut rec, k, k, e.clone());
        let e2 = leaf2(&mut rec, k, k, e);
        let lt = rec.leaf(Tensor::scalar(100.0f64.ln()));
        let triple = similarity_triple(&mut rec, e1, e2, lt, 100.0).unwrap();
        let l = contrastive_loss(&mut rec, &triple, &identity(k), 2.0).unwrap();
        assert!(scalar_of(&rec, l) < 1e-6);
    }

    #[test]
    fn contrastive_symmetric_in_batch_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let e1v: Vec<f64> = (0..40).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let e2v: Vec<f64> = (0..40).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let eval = |a: &Vec<f64>, b: &Vec<f64>| {
            let mut rec = ComputationRecord::new();
            let e1 = leaf2(&mut rec, 5, 8, a.clone());
            let e2 = leaf2(&mut rec, 5, 8, b.clone());
            let lt = rec.leaf(Tensor::scalar(1.2));
            let triple = similarity_triple(&mut rec, e1, e2, lt, 100.0).unwrap();
            let l = contrastive_loss(&mut rec, &triple, &identity(5), 2.0).unwrap();
            scalar_of(&rec, l)
        };
        assert!((eval(&e1v, &e2v) - eval(&e2v, &e1v)).abs() < 1e-12);
    }

    #[test]
    fn contrastive_rejects_non_identity_labels() {
        let mut rec = ComputationRecord::new();
        let e = one_hot_rows(3, 3);
        let e1 = leaf2(&mut rec, 3, 3, e.clone());
        let e2 = leaf2(&mut rec, 3, 3, e);
        let lt = rec.leaf(Tensor::scalar(0.0));
        let triple = similarity_triple(&mut rec, e1, e2, lt, 100.0).unwrap();
        assert!(matches!(
            contrastive_loss(&mut rec, &triple, &[0, 2, 1], 2.0),
            Err(SclError::Contract(_))
        ));
    }

    /// Oracle: assembles the six focal terms from scratch, straight from the
    /// raw embeddings in 64-bit arithmetic, independent of the tape.
    fn contrastive_oracle(e1: &[f64], e2: &[f64], k: usize, d: usize, log_t: f64, gamma: f64) -> f64 {
        let t = log_t.exp().min(100.0);
        let norm = |e: &[f64]| -> Vec<f64> {
            let mut out = vec![0.0; k * d];
            for i in 0..k {
                let r = &e[i * d..(i + 1) * d];
                let n = (r.iter().map(|v| v * v).sum::<f64>() + 1e-12).sqrt();
                for j in 0..d {
                    out[i * d + j] = r[j] / n;
                }
            }
            out
        };
        let (n1, n2) = (norm(e1), norm(e2));
        let sim = |a: &[f64], b: &[f64]| -> Vec<f64> {
            let mut s = vec![0.0; k * k];
            for i in 0..k {
                for j in 0..k {
                    s[i * k + j] = t
                        * a[i * d..(i + 1) * d]
                            .iter()
                            .zip(&b[j * d..(j + 1) * d])
                            .map(|(x, y)| x * y)
                            .sum::<f64>();
                }
            }
            s
        };
        let mats = [sim(&n1, &n1), sim(&n1, &n2), sim(&n2, &n2)];
        let mut total = 0.0;
        for s in &mats {
            let mut row_l = 0.0;
            let mut col_l = 0.0;
            for i in 0..k {
                let row: Vec<f64> = (0..k).map(|j| s[i * k + j]).collect();
                let col: Vec<f64> = (0..k).map(|j| s[j * k + i]).collect();
                row_l += focal_row(&row, i, gamma);
                col_l += focal_row(&col, i, gamma);
            }
            total += row_l / k as f64 + col_l / k as f64;
        }
        total
    }

    #[test]
    fn contrastive_matches_independent_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..20 {
            let k = rng.gen_range(2..=8);
            let d = rng.gen_range(2..=10);
            let e1v: Vec<f64> = (0..k * d).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let e2v: Vec<f64> = (0..k * d).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let log_t = rng.gen_range(-1.0..3.0);
            let mut rec = ComputationRecord::new();
            let e1 = leaf2(&mut rec, k, d, e1v.clone());
            let e2 = leaf2(&mut rec, k, d, e2v.clone());
            let lt = rec.leaf(Tensor::scalar(log_t));
            let triple = similarity_triple(&mut rec, e1, e2, lt, 100.0).unwrap();
            let l = contrastive_loss(&mut rec, &triple, &identity(k), 2.0).unwrap();
            let want = contrastive_oracle(&e1v, &e2v, k, d, log_t, 2.0);
            assert!((scalar_of(&rec, l) - want).abs() < 1e-5);
        }
    }

    #[test]
    fn contrastive_scale_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let k = 5;
        let d = 7;
        let e1v: Vec<f64> = (0..k * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let e2v: Vec<f64> = (0..k * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let eval = |e1: &[f64], e2: &[f64]| {
            let mut rec = ComputationRecord::new();
            let a = leaf2(&mut rec, k, d, e1.to_vec());
            let b = leaf2(&mut rec, k, d, e2.to_vec());
            let lt = rec.leaf(Tensor::scalar(1.0));
            let triple = similarity_triple(&mut rec, a, b, lt, 100.0).unwrap();
            let l = contrastive_loss(&mut rec, &triple, &identity(k), 2.0).unwrap();
            scalar_of(&rec, l)
        };
        let base = eval(&e1v, &e2v);
        for &c in &[1e-2, 0.5, 7.0, 1e2] {
            // scale a single row of E1
            let mut scaled = e1v.clone();
            for v in &mut scaled[2 * d..3 * d] {
                *v *= c;
            }
            assert!((eval(&scaled, &e2v) - base).abs() < 1e-5, "c = {c}");
        }
    }

    #[test]
    fn contrastive_permutation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let k = 6;
        let d = 5;
        let e1v: Vec<f64> = (0..k * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let e2v: Vec<f64> = (0..k * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let perm = [3usize, 0, 5, 1, 4, 2];
        let permute = |e: &[f64]| -> Vec<f64> {
            let mut out = vec![0.0; k * d];
            for (new, &old) in perm.iter().enumerate() {
                out[new * d..(new + 1) * d].copy_from_slice(&e[old * d..(old + 1) * d]);
            }
            out
        };
        let eval = |e1: &[f64], e2: &[f64]| {
            let mut rec = ComputationRecord::new();
            let a = leaf2(&mut rec, k, d, e1.to_vec());
            let b = leaf2(&mut rec, k, d, e2.to_vec());
            let lt = rec.leaf(Tensor::scalar(0.8));
            let triple = similarity_triple(&mut rec, a, b, lt, 100.0).unwrap();
            let l = contrastive_loss(&mut rec, &triple, &identity(k), 2.0).unwrap();
            scalar_of(&rec, l)
        };
        // permuting both batches identically relabels classes but keeps the
        // diagonal as the positives, so the loss is unchanged
        assert!((eval(&e1v, &e2v) - eval(&permute(&e1v), &permute(&e2v))).abs() < 1e-6);
    }

    #[test]
    fn focal_row_monotone_in_positive_logit() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..50 {
            let k = rng.gen_range(3..8);
            let row: Vec<f64> = (0..k).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let y = rng.gen_range(0..k);
            let mut prev = f64::INFINITY;
            for step in 0..6 {
                let mut r = row.clone();
                r[y] += step as f64 * 0.5;
                let l = focal_row(&r, y, 2.0);
                assert!(l <= prev + 1e-12);
                prev = l;
            }
        }
    }

    #[test]
    fn classification_loss_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let k = 4;
        let v1: Vec<f64> = (0..k * k).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let v2: Vec<f64> = (0..k * k).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let labels = identity(k);

        let mut rec = ComputationRecord::new();
        let p1 = leaf2(&mut rec, k, k, v1.clone());
        let p2 = leaf2(&mut rec, k, k, v2.clone());
        let l = classification_loss(&mut rec, p1, p2, &labels, 2.0).unwrap();
        let oracle: f64 = (0..k)
            .map(|i| focal_row(&v1[i * k..(i + 1) * k], i, 2.0) + focal_row(&v2[i * k..(i + 1) * k], i, 2.0))
            .sum::<f64>()
            / k as f64;
        assert!((scalar_of(&rec, l) - oracle).abs() < 1e-6);

        // P1 == P2 doubles the single-term value
        let mut rec = ComputationRecord::new();
        let p1 = leaf2(&mut rec, k, k, v1.clone());
        let p2 = leaf2(&mut rec, k, k, v1.clone());
        let both = classification_loss(&mut rec, p1, p2, &labels, 2.0).unwrap();
        let single = focal_loss_mean(&mut rec, p1, &labels, 2.0).unwrap();
        assert!((scalar_of(&rec, both) - 2.0 * scalar_of(&rec, single)).abs() < 1e-12);

        // confident logits give ~0
        let mut conf = vec![-50.0; k * k];
        for i in 0..k {
            conf[i * k + i] = 50.0;
        }
        let mut rec = ComputationRecord::new();
        let p1 = leaf2(&mut rec, k, k, conf.clone());
        let p2 = leaf2(&mut rec, k, k, conf);
        let l = classification_loss(&mut rec, p1, p2, &labels, 2.0).unwrap();
        assert!(scalar_of(&rec, l) < 1e-8);
    }

    #[test]
    fn total_loss_weighting() {
        let mk = |lambda1: f64, lambda2: f64, lcon: f64, lcls: f64| {
            let mut rec = ComputationRecord::new();
            let a = rec.leaf(Tensor::scalar(lcon));
            let b = rec.leaf(Tensor::scalar(lcls));
            let cfg = LossConfig {
                lambda1,
                lambda2,
                ..LossConfig::default()
            };
            let l = total_loss(&mut rec, a, b, &cfg).unwrap();
            scalar_of(&rec, l)
        };
        assert!((mk(1.0, 1.0, 17.512, 0.0) - 17.512).abs() < 1e-12);
        assert!((mk(0.0, 1.0, 17.512, 3.5) - 3.5).abs() < 1e-12);
        assert_eq!(mk(0.0, 0.0, 4.0, 5.0), 0.0);
    }

    #[test]
    fn total_loss_gradient_matches_finite_differences() {
        // gradient of the full objective (contrastive + classification)
        // with respect to embeddings and log-temperature
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let k = 4;
        let d = 6;
        let e1v: Vec<f64> = (0..k * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let e2v: Vec<f64> = (0..k * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let p1v: Vec<f64> = (0..k * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let s0 = 0.7;
        let cfg = LossConfig::default();
        let labels = identity(k);
        let forward = |e1: &[f64], s: f64| {
            let mut rec = ComputationRecord::new();
            let a = leaf2(&mut rec, k, d, e1.to_vec());
            let b = leaf2(&mut rec, k, d, e2v.clone());
            let p1 = leaf2(&mut rec, k, k, p1v.clone());
            let p2 = leaf2(&mut rec, k, k, p1v.clone());
            let lt = rec.leaf(Tensor::scalar(s));
            let triple = similarity_triple(&mut rec, a, b, lt, 100.0).unwrap();
            let lcon = contrastive_loss(&mut rec, &triple, &labels, 2.0).unwrap();
            let lcls = classification_loss(&mut rec, p1, p2, &labels, 2.0).unwrap();
            let l = total_loss(&mut rec, lcon, lcls, &cfg).unwrap();
            scalar_of(&rec, l)
        };
        let mut rec = ComputationRecord::new();
        let a = rec.leaf(Tensor::new(vec![k, d], e1v.clone()).unwrap().with_grad());
        let b = leaf2(&mut rec, k, d, e2v.clone());
        let p1 = leaf2(&mut rec, k, k, p1v.clone());
        let p2 = leaf2(&mut rec, k, k, p1v.clone());
        let lt = rec.leaf(Tensor::scalar(s0).with_grad());
        let triple = similarity_triple(&mut rec, a, b, lt, 100.0).unwrap();
        let lcon = contrastive_loss(&mut rec, &triple, &labels, 2.0).unwrap();
        let lcls = classification_loss(&mut rec, p1, p2, &labels, 2.0).unwrap();
        let l = total_loss(&mut rec, lcon, lcls, &cfg).unwrap();
        rec.backward(l).unwrap();

        let h = 1e-5;
        let ge = rec.grad(a).unwrap().to_vec();
        for i in 0..k * d {
            let mut up = e1v.clone();
            up[i] += h;
            let mut dn = e1v.clone();
            dn[i] -= h;
            let fd = (forward(&up, s0) - forward(&dn, s0)) / (2.0 * h);
            let denom = ge[i].abs().max(fd.abs()).max(1e-8);
            assert!((ge[i] - fd).abs() / denom <= 1e-4);
        }
        let fd_s = (forward(&e1v, s0 + h) - forward(&e1v, s0 - h)) / (2.0 * h);
        let gs = rec.grad(lt).unwrap()[0];
        assert!((gs - fd_s).abs() / gs.abs().max(fd_s.abs()).max(1e-8) <= 1e-4);
    }
}
