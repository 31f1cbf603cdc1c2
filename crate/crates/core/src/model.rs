//! Encoder and classification head: flatten -> affine(hidden) -> relu ->
//! affine(hidden) -> relu -> affine(D), then an affine head D -> K_cls.
//! Includes deterministic initialization and bit-exact checkpointing.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SclError};
use crate::losses::LossConfig;
use crate::scalar::Scalar;
use crate::tensor::{ComputationRecord, NodeId, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SCLCKPT1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub input_height: usize,
    pub input_width: usize,
    /// Embedding dimensionality D.
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub n_classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_height: 32,
            input_width: 32,
            embed_dim: 64,
            hidden_dim: 256,
            n_classes: 8,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_height == 0 || self.input_width == 0 || self.embed_dim == 0 || self.hidden_dim == 0 {
            return Err(SclError::Config("model dimensions must be >= 1".into()));
        }
        if self.n_classes < 2 {
            return Err(SclError::Config("n_classes must be >= 2".into()));
        }
        Ok(())
    }

    pub fn input_pixels(&self) -> usize {
        self.input_height * self.input_width
    }
}

/// All learnable parameters: encoder, head, and the log-temperature.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<S> {
    pub w1: Tensor<S>,
    pub b1: Tensor<S>,
    pub w2: Tensor<S>,
    pub b2: Tensor<S>,
    pub w3: Tensor<S>,
    pub b3: Tensor<S>,
    pub head_w: Tensor<S>,
    pub head_b: Tensor<S>,
    pub log_temp: Tensor<S>,
}

/// Fixed checkpoint / optimizer ordering of the parameter tensors.
pub const PARAM_NAMES: [&str; 9] = [
    "enc.w1", "enc.b1", "enc.w2", "enc.b2", "enc.w3", "enc.b3", "head.w", "head.b", "log_temp",
];

impl<S: Scalar> ModelParams<S> {
    pub fn tensors(&self) -> [&Tensor<S>; 9] {
        [
            &self.w1, &self.b1, &self.w2, &self.b2, &self.w3, &self.b3, &self.head_w, &self.head_b,
            &self.log_temp,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor<S>; 9] {
        [
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
            &mut self.w3,
            &mut self.b3,
            &mut self.head_w,
            &mut self.head_b,
            &mut self.log_temp,
        ]
    }

    pub fn expected_shapes(cfg: &ModelConfig) -> [Vec<usize>; 9] {
        let (p, h, d, k) = (cfg.input_pixels(), cfg.hidden_dim, cfg.embed_dim, cfg.n_classes);
        [
            vec![p, h],
            vec![h],
            vec![h, h],
            vec![h],
            vec![h, d],
            vec![d],
            vec![d, k],
            vec![k],
            vec![1],
        ]
    }

    /// Inserts every parameter as a gradient leaf into a fresh record.
    pub fn insert_into(&self, rec: &mut ComputationRecord<S>) -> ParamIds {
        let ids: Vec<NodeId> = self
            .tensors()
            .iter()
            .map(|t| rec.leaf((*t).clone().with_grad()))
            .collect();
        ParamIds {
            w1: ids[0],
            b1: ids[1],
            w2: ids[2],
            b2: ids[3],
            w3: ids[4],
            b3: ids[5],
            head_w: ids[6],
            head_b: ids[7],
            log_temp: ids[8],
        }
    }

    pub fn cast<T: Scalar>(&self) -> ModelParams<T> {
        ModelParams {
            w1: self.w1.cast(),
            b1: self.b1.cast(),
            w2: self.w2.cast(),
            b2: self.b2.cast(),
            w3: self.w3.cast(),
            b3: self.b3.cast(),
            head_w: self.head_w.cast(),
            head_b: self.head_b.cast(),
            log_temp: self.log_temp.cast(),
        }
    }
}

/// Leaf handles of one record's parameter insertion.
#[derive(Clone, Copy, Debug)]
pub struct ParamIds {
    pub w1: NodeId,
    pub b1: NodeId,
    pub w2: NodeId,
    pub b2: NodeId,
    pub w3: NodeId,
    pub b3: NodeId,
    pub head_w: NodeId,
    pub head_b: NodeId,
    pub log_temp: NodeId,
}

impl ParamIds {
    pub fn all(&self) -> [NodeId; 9] {
        [
            self.w1, self.b1, self.w2, self.b2, self.w3, self.b3, self.head_w, self.head_b,
            self.log_temp,
        ]
    }
}

/// Uniform(-a, a) with `a = sqrt(6 / (fan_in + fan_out))` per weight matrix,
/// zero biases, log-temperature from the loss config. Deterministic in seed.
pub fn init_params<S: Scalar>(cfg: &ModelConfig, loss: &LossConfig, seed: u64) -> ModelParams<S> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut weight = |fan_in: usize, fan_out: usize| -> Tensor<S> {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data: Vec<S> = (0..fan_in * fan_out)
            .map(|_| S::from_f64(rng.gen_range(-a..a)))
            .collect();
        Tensor::new(vec![fan_in, fan_out], data).expect("finite init")
    };
    let p = cfg.input_pixels();
    let (h, d, k) = (cfg.hidden_dim, cfg.embed_dim, cfg.n_classes);
    ModelParams {
        w1: weight(p, h),
        b1: Tensor::zeros(vec![h]),
        w2: weight(h, h),
        b2: Tensor::zeros(vec![h]),
        w3: weight(h, d),
        b3: Tensor::zeros(vec![d]),
        head_w: weight(d, k),
        head_b: Tensor::zeros(vec![k]),
        log_temp: Tensor::scalar(S::from_f64(loss.temp_init_log)),
    }
}

/// Forward pass of the encoder over a `[K, 1, H, W]` image batch; the output
/// is the raw, unnormalized `[K, D]` embedding.
pub fn encode<S: Scalar>(
    rec: &mut ComputationRecord<S>,
    ids: &ParamIds,
    cfg: &ModelConfig,
    batch: &Tensor<S>,
) -> Result<NodeId> {
    let shape = batch.shape();
    if shape.len() != 4 || shape[1] != 1 || shape[2] != cfg.input_height || shape[3] != cfg.input_width {
        return Err(SclError::Dim(format!(
            "encode expects [K,1,{},{}], got {:?}",
            cfg.input_height, cfg.input_width, shape
        )));
    }
    let k = shape[0];
    let flat = rec.leaf(batch.reshaped(vec![k, cfg.input_pixels()])?);
    let z1 = rec.matmul(flat, ids.w1)?;
    let z1 = rec.add_row_bias(z1, ids.b1)?;
    let a1 = rec.relu(z1)?;
    let z2 = rec.matmul(a1, ids.w2)?;
    let z2 = rec.add_row_bias(z2, ids.b2)?;
    let a2 = rec.relu(z2)?;
    let z3 = rec.matmul(a2, ids.w3)?;
    rec.add_row_bias(z3, ids.b3)
}

/// Affine head on raw embeddings; softmax is applied downstream.
pub fn classify<S: Scalar>(
    rec: &mut ComputationRecord<S>,
    ids: &ParamIds,
    embeddings: NodeId,
) -> Result<NodeId> {
    let logits = rec.matmul(embeddings, ids.head_w)?;
    rec.add_row_bias(logits, ids.head_b)
}

#[derive(Serialize, Deserialize)]
struct TensorHeader {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    config: ModelConfig,
    tensors: Vec<TensorHeader>,
}

/// Writes magic, u32-LE header length, JSON header, then the tensors' raw
/// f32-LE data in header order.
pub fn save_checkpoint(params: &ModelParams<f32>, cfg: &ModelConfig, path: &Path) -> Result<()> {
    let header = CheckpointHeader {
        config: cfg.clone(),
        tensors: PARAM_NAMES
            .iter()
            .zip(params.tensors())
            .map(|(name, t)| TensorHeader {
                name: name.to_string(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let header_bytes = serde_json::to_vec(&header).expect("header serializes");
    let file = File::create(path).map_err(|e| SclError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e: std::io::Error| SclError::io(path, e);
    w.write_all(CHECKPOINT_MAGIC).map_err(io)?;
    w.write_all(&(header_bytes.len() as u32).to_le_bytes()).map_err(io)?;
    w.write_all(&header_bytes).map_err(io)?;
    for t in params.tensors() {
        for &v in t.data() {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelParams<f32>, ModelConfig)> {
    let file = File::open(path).map_err(|e| SclError::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 8];
    read_exact_at(&mut r, &mut magic, 0)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(SclError::Format {
            offset: 0,
            msg: format!("bad magic {:?}, expected {:?}", magic, CHECKPOINT_MAGIC),
        });
    }
    let mut len_bytes = [0u8; 4];
    read_exact_at(&mut r, &mut len_bytes, 8)?;
    let header_len = u32::from_le_bytes(len_bytes) as usize;
    let mut header_bytes = vec![0u8; header_len];
    read_exact_at(&mut r, &mut header_bytes, 12)?;
    let header: CheckpointHeader = serde_json::from_slice(&header_bytes).map_err(|e| SclError::Format {
        offset: 12,
        msg: format!("invalid JSON header: {e}"),
    })?;
    header.config.validate().map_err(|e| SclError::Format {
        offset: 12,
        msg: format!("invalid config in header: {e}"),
    })?;
    let expected = ModelParams::<f32>::expected_shapes(&header.config);
    if header.tensors.len() != PARAM_NAMES.len() {
        return Err(SclError::Format {
            offset: 12,
            msg: format!("expected {} tensors, header lists {}", PARAM_NAMES.len(), header.tensors.len()),
        });
    }
    let mut offset = 12 + header_len as u64;
    let mut tensors = Vec::with_capacity(PARAM_NAMES.len());
    for ((th, name), shape) in header.tensors.iter().zip(PARAM_NAMES).zip(&expected) {
        if th.name != name || &th.shape != shape {
            return Err(SclError::Format {
                offset: 12,
                msg: format!(
                    "tensor {} declared as {:?} {:?}, expected {:?} {:?}",
                    tensors.len(),
                    th.name,
                    th.shape,
                    name,
                    shape
                ),
            });
        }
        let numel: usize = shape.iter().product();
        let mut raw = vec![0u8; numel * 4];
        read_exact_at(&mut r, &mut raw, offset)?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        tensors.push(Tensor::new(shape.clone(), data).map_err(|e| SclError::Format {
            offset,
            msg: format!("tensor {name}: {e}"),
        })?);
        offset += (numel * 4) as u64;
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest).map_err(|e| SclError::io(path, e))? != 0 {
        return Err(SclError::Format {
            offset,
            msg: "trailing bytes after declared payload".into(),
        });
    }
    let mut it = tensors.into_iter();
    let params = ModelParams {
        w1: it.next().unwrap(),
        b1: it.next().unwrap(),
        w2: it.next().unwrap(),
        b2: it.next().unwrap(),
        w3: it.next().unwrap(),
        b3: it.next().unwrap(),
        head_w: it.next().unwrap(),
        head_b: it.next().unwrap(),
        log_temp: it.next().unwrap(),
    };
    Ok((params, header.config))
}

pub(crate) fn read_exact_at<R: Read>(r: &mut R, buf: &mut [u8], offset: u64) -> Result<()> {
    r.read_exact(buf).map_err(|e| SclError::Format {
        offset,
        msg: format!("truncated file ({} bytes expected): {e}", buf.len()),
    })
}
