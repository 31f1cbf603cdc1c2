//! Adam with bias correction and the seeded training loop: one iteration
//! samples a class-complete batch pair, encodes both batches, forms the
//! contrastive and classification losses, backpropagates, and applies a
//! descent step over every parameter including the log-temperature.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::Path;

use crate::data::{sample_pairwise_batches, DatasetContainer};
use crate::error::{Result, SclError};
use crate::losses::{
    classification_loss, contrastive_loss, similarity_triple, total_loss, LossConfig,
};
use crate::model::{classify, encode, init_params, ModelConfig, ModelParams};
use crate::scalar::Scalar;
use crate::tensor::{ComputationRecord, Tensor};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub iterations: usize,
    pub loss: LossConfig,
    /// Ablation switch: disabling forces the contrastive weight to zero.
    pub scl_enabled: bool,
    pub seed: u64,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            iterations: 2000,
            loss: LossConfig::default(),
            scl_enabled: true,
            seed: 0,
            log_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 {
            return Err(SclError::Config("learning_rate must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(SclError::Config("beta1 and beta2 must lie in [0, 1)".into()));
        }
        if self.adam_eps <= 0.0 {
            return Err(SclError::Config("adam_eps must be > 0".into()));
        }
        if self.log_every == 0 {
            return Err(SclError::Config("log_every must be >= 1".into()));
        }
        self.loss.validate()
    }
}

/// First/second moment buffers plus the shared step counter.
pub struct AdamState<S> {
    step: u64,
    m: Vec<Vec<S>>,
    v: Vec<Vec<S>>,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(params: &ModelParams<S>) -> Self {
        let sizes: Vec<usize> = params.tensors().iter().map(|t| t.numel()).collect();
        AdamState {
            step: 0,
            m: sizes.iter().map(|&n| vec![S::zero(); n]).collect(),
            v: sizes.iter().map(|&n| vec![S::zero(); n]).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam descent step over all parameter tensors.
pub fn adam_step<S: Scalar>(
    params: &mut ModelParams<S>,
    grads: &[Vec<S>],
    state: &mut AdamState<S>,
    cfg: &TrainConfig,
) -> Result<()> {
    let tensors = params.tensors_mut();
    if grads.len() != tensors.len() {
        return Err(SclError::Contract(format!(
            "adam_step: {} gradient buffers for {} parameters",
            grads.len(),
            tensors.len()
        )));
    }
    state.step += 1;
    let t = state.step as f64;
    let b1 = S::from_f64(cfg.beta1);
    let b2 = S::from_f64(cfg.beta2);
    let lr = S::from_f64(cfg.learning_rate);
    let eps = S::from_f64(cfg.adam_eps);
    let bc1 = S::from_f64(1.0 - cfg.beta1.powf(t));
    let bc2 = S::from_f64(1.0 - cfg.beta2.powf(t));
    let one = S::one();
    for ((tensor, grad), (m, v)) in tensors
        .into_iter()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        if grad.len() != tensor.numel() {
            return Err(SclError::Contract("adam_step: gradient shape mismatch".into()));
        }
        let data = tensor.data_mut();
        for i in 0..data.len() {
            let g = grad[i];
            m[i] = b1 * m[i] + (one - b1) * g;
            v[i] = b2 * v[i] + (one - b2) * g * g;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            data[i] = data[i] - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRow {
    pub iter: usize,
    pub l_total: f64,
    pub l_con: f64,
    pub l_cls: f64,
    pub temperature: f64,
    pub batch_acc: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iter,l_total,l_con,l_cls,temperature,batch_acc\n");
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{},{}",
                r.iter,
                sig6(r.l_total),
                sig6(r.l_con),
                sig6(r.l_cls),
                sig6(r.temperature),
                sig6(r.batch_acc)
            )
            .unwrap();
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| SclError::io(path, e))
    }
}

/// Six significant digits, locale-independent.
fn sig6(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    format!("{v:.5e}")
}

fn batch_accuracy(logits: &[&Tensor<f32>], k: usize) -> f64 {
    let mut hits = 0usize;
    let mut total = 0usize;
    for t in logits {
        for row in 0..t.rows() {
            let mut best = 0usize;
            for j in 1..t.cols() {
                if t.at2(row, j) > t.at2(row, best) {
                    best = j;
                }
            }
            if best == row % k {
                hits += 1;
            }
            total += 1;
        }
    }
    hits as f64 / total as f64
}

/// Runs `iterations` SCL steps over `train_ds`. Fully deterministic in
/// `(seed, configs, dataset)`.
pub fn train_loop(
    train_ds: &DatasetContainer,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<(ModelParams<f32>, TrainLog)> {
    cfg.validate()?;
    model_cfg.validate()?;
    if model_cfg.n_classes != train_ds.n_classes() {
        return Err(SclError::Config(format!(
            "model expects {} classes, dataset has {}",
            model_cfg.n_classes,
            train_ds.n_classes()
        )));
    }
    let mut params = init_params::<f32>(model_cfg, &cfg.loss, cfg.seed);
    let mut state = AdamState::new(&params);
    let mut batch_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x9E37_79B9_7F4A_7C15));
    let mut log = TrainLog::default();
    let gamma = cfg.loss.focal_gamma as f32;
    let temp_max = cfg.loss.temp_max as f32;

    for iter in 0..cfg.iterations {
        let batch = sample_pairwise_batches(train_ds, &mut batch_rng)?;
        let mut rec = ComputationRecord::<f32>::new();
        let ids = params.insert_into(&mut rec);
        let e1 = encode(&mut rec, &ids, model_cfg, &batch.b1)?;
        let e2 = encode(&mut rec, &ids, model_cfg, &batch.b2)?;
        let p1 = classify(&mut rec, &ids, e1)?;
        let p2 = classify(&mut rec, &ids, e2)?;
        let l_cls = classification_loss(&mut rec, p1, p2, &batch.y_gt, gamma)?;
        let (l_con, lambda1) = if cfg.scl_enabled {
            let triple = similarity_triple(&mut rec, e1, e2, ids.log_temp, temp_max)?;
            (
                contrastive_loss(&mut rec, &triple, &batch.y_gt, gamma)?,
                cfg.loss.lambda1,
            )
        } else {
            (rec.leaf(Tensor::scalar(0.0f32)), 0.0)
        };
        let eff = LossConfig {
            lambda1,
            ..cfg.loss.clone()
        };
        let l_total = total_loss(&mut rec, l_con, l_cls, &eff)?;

        let lt = rec.value(l_total).data()[0];
        if !lt.is_finite() {
            return Err(SclError::NonFinite(format!(
                "loss diverged at iteration {iter}; last finite log row: {:?}",
                log.rows.last()
            )));
        }
        rec.backward(l_total)?;
        let grads: Vec<Vec<f32>> = ids
            .all()
            .iter()
            .map(|&id| rec.grad(id).expect("parameter leaf has grad").to_vec())
            .collect();

        if iter % cfg.log_every == 0 || iter + 1 == cfg.iterations {
            let k = train_ds.n_classes();
            let acc = batch_accuracy(&[rec.value(p1), rec.value(p2)], k);
            let s = params.log_temp.data()[0] as f64;
            log.rows.push(LogRow {
                iter,
                l_total: lt as f64,
                l_con: rec.value(l_con).data()[0] as f64,
                l_cls: rec.value(l_cls).data()[0] as f64,
                temperature: s.exp().min(cfg.loss.temp_max),
                batch_acc: acc,
            });
        }
        adam_step(&mut params, &grads, &mut state, cfg)?;
    }
    for t in params.tensors() {
        if t.data().iter().any(|v| !v.is_finite()) {
            return Err(SclError::NonFinite("parameters after training".into()));
        }
    }
    Ok((params, log))
}
