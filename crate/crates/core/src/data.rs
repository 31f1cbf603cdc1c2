//! Synthetic band-pattern dataset generation, label-preserving augmentation
//! (rotation / flips / contrast), class-complete pairwise batch sampling,
//! and the dataset file format.
//!
//! Each class is assigned a band code: one intensity per horizontal band of
//! a vertical rod. Confusable class pairs differ in exactly one band by one
//! intensity step; all other class pairs differ in at least two bands.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SclError};
use crate::model::read_exact_at;
use crate::tensor::Tensor;
use crate::Tensor32;

pub const DATASET_MAGIC: &[u8; 8] = b"SCLDATA1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorSpec {
    pub n_classes: usize,
    pub images_per_class: usize,
    pub height: usize,
    pub width: usize,
    /// Bands per class code.
    pub n_bands: usize,
    /// Allowed band intensities, ascending.
    pub band_levels: Vec<f64>,
    /// Number of class pairs forced to differ in exactly one band.
    pub confusable_pairs: usize,
    pub noise_sigma: f64,
    /// Maximum horizontal bend, as a fraction of the width.
    pub bend_amplitude_max: f64,
    /// Rod length jitter, +/- fraction.
    pub length_jitter: f64,
    pub seed: u64,
    /// Render stream. Containers generated from the same seed but different
    /// streams share class codes while drawing disjoint image randomness,
    /// which is how train/val/test splits stay label-consistent.
    pub stream: u64,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        GeneratorSpec {
            n_classes: 8,
            images_per_class: 200,
            height: 32,
            width: 32,
            n_bands: 8,
            band_levels: vec![0.25, 0.55, 0.85],
            confusable_pairs: 2,
            noise_sigma: 0.03,
            bend_amplitude_max: 0.15,
            length_jitter: 0.2,
            seed: 0,
            stream: 0,
        }
    }
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(SclError::Config("n_classes must be >= 2".into()));
        }
        if self.images_per_class < 2 {
            return Err(SclError::Config("images_per_class must be >= 2".into()));
        }
        if self.height < 8 || self.width < 8 {
            return Err(SclError::Config("height and width must be >= 8".into()));
        }
        if self.n_bands == 0 || self.band_levels.len() < 2 {
            return Err(SclError::Config("need n_bands >= 1 and >= 2 band levels".into()));
        }
        if self.band_levels.iter().any(|&l| !(0.0..=1.0).contains(&l)) {
            return Err(SclError::Config("band levels must lie in [0, 1]".into()));
        }
        if 2 * self.confusable_pairs > self.n_classes {
            return Err(SclError::Config("too many confusable pairs for n_classes".into()));
        }
        if self.noise_sigma < 0.0 || self.bend_amplitude_max < 0.0 || self.length_jitter < 0.0 {
            return Err(SclError::Config("noise/bend/jitter must be >= 0".into()));
        }
        Ok(())
    }
}

/// Labeled grayscale image set plus the generation metadata that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetContainer {
    /// `[n, 1, H, W]`, pixels in `[0, 1]`.
    pub images: Tensor32,
    pub labels: Vec<u32>,
    pub class_names: Vec<String>,
    pub spec: GeneratorSpec,
    /// Band intensity code per class, index-aligned with labels.
    pub class_codes: Vec<Vec<f64>>,
}

impl DatasetContainer {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.spec.n_classes
    }

    pub fn image(&self, idx: usize) -> &[f32] {
        let px = self.spec.height * self.spec.width;
        &self.images.data()[idx * px..(idx + 1) * px]
    }

    fn validate(&self) -> Result<()> {
        let k = self.spec.n_classes as u32;
        if self.labels.iter().any(|&l| l >= k) {
            return Err(SclError::Contract("dataset label out of range".into()));
        }
        for c in 0..k {
            if !self.labels.contains(&c) {
                return Err(SclError::Contract(format!("class {c} has no images")));
            }
        }
        if self.images.data().iter().any(|&p| !(0.0..=1.0).contains(&p)) {
            return Err(SclError::Contract("pixels must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Aligned class-complete batches: row k of each batch is an image of class k.
#[derive(Clone, Debug)]
pub struct BatchPair {
    pub b1: Tensor32,
    pub b2: Tensor32,
    /// Always the identity labeling `[0..K)`.
    pub y_gt: Vec<usize>,
    /// Dataset index each batch row was drawn from.
    pub src1: Vec<usize>,
    pub src2: Vec<usize>,
}

// ---- class codes ------------------------------------------------------------

fn hamming(a: &[usize], b: &[usize]) -> usize {
    a.iter().zip(b).filter(|(x, y)| x != y).count()
}

fn hamming_rev(a: &[usize], b: &[usize]) -> usize {
    a.iter().rev().zip(b).filter(|(x, y)| x != y).count()
}

/// Draws level-index codes: confusable pairs at Hamming distance exactly 1
/// (one adjacent-level step), every other pair at distance >= 2. Codes are
/// also kept at distance >= 2 from the *reversals* of other classes' codes:
/// a vertical flip reverses band order, so without this the augmentation
/// would not be label-preserving.
fn assign_codes(spec: &GeneratorSpec, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<usize>>> {
    let levels = spec.band_levels.len();
    let capacity = (levels as f64).powi(spec.n_bands as i32);
    if capacity < spec.n_classes as f64 {
        return Err(SclError::Capacity(format!(
            "{} classes need more than {levels}^{} codes",
            spec.n_classes, spec.n_bands
        )));
    }
    let n_paired = 2 * spec.confusable_pairs;
    'attempt: for _ in 0..10_000 {
        let mut codes: Vec<Vec<usize>> = Vec::with_capacity(spec.n_classes);
        // base codes: classes 0, 2, 4, ... of each pair plus all unpaired
        let mut base_slots: Vec<usize> = (0..spec.confusable_pairs).map(|p| 2 * p).collect();
        base_slots.extend(n_paired..spec.n_classes);
        let mut draws = 0usize;
        let mut placed: Vec<Vec<usize>> = Vec::new();
        for _ in &base_slots {
            loop {
                draws += 1;
                if draws > 1_000 {
                    continue 'attempt;
                }
                let cand: Vec<usize> = (0..spec.n_bands).map(|_| rng.gen_range(0..levels)).collect();
                if placed
                    .iter()
                    .all(|c| hamming(c, &cand) >= 2 && hamming_rev(c, &cand) >= 2)
                {
                    placed.push(cand);
                    break;
                }
            }
        }
        codes.resize(spec.n_classes, Vec::new());
        for (slot, code) in base_slots.iter().zip(&placed) {
            codes[*slot] = code.clone();
        }
        // partner of each confusable pair: one band moved one level
        for p in 0..spec.confusable_pairs {
            let a = &codes[2 * p].clone();
            let mut ok = false;
            for _ in 0..200 {
                let band = rng.gen_range(0..spec.n_bands);
                let cur = a[band];
                let next = if cur == 0 {
                    1
                } else if cur == levels - 1 {
                    cur - 1
                } else if rng.gen_bool(0.5) {
                    cur + 1
                } else {
                    cur - 1
                };
                let mut cand = a.clone();
                cand[band] = next;
                let clash = codes.iter().enumerate().any(|(i, c)| {
                    !c.is_empty()
                        && ((i != 2 * p && hamming(c, &cand) < 2) || hamming_rev(c, &cand) < 2)
                });
                if !clash {
                    codes[2 * p + 1] = cand;
                    ok = true;
                    break;
                }
            }
            if !ok {
                continue 'attempt;
            }
        }
        return Ok(codes);
    }
    Err(SclError::Capacity(
        "could not place pairwise-distinct class codes; reduce n_classes or confusable_pairs".into(),
    ))
}

// ---- rendering --------------------------------------------------------------

fn per_image_rng(seed: u64, stream: u64, class: usize, index: usize) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[0..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&stream.to_le_bytes());
    key[16..24].copy_from_slice(&(class as u64).to_le_bytes());
    key[24..32].copy_from_slice(&(index as u64).to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

const ROD_HALF_WIDTH_FRAC: f64 = 0.15;
const ROD_LENGTH_FRAC: f64 = 0.85;
const BAND_INTENSITY_JITTER: f64 = 0.05;

fn render(code: &[f64], spec: &GeneratorSpec, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let (h, w) = (spec.height, spec.width);
    let scale = 1.0 + rng.gen_range(-spec.length_jitter..=spec.length_jitter);
    let rod_len = (ROD_LENGTH_FRAC * h as f64 * scale).clamp(spec.n_bands as f64, h as f64);
    let amp = rng.gen_range(0.0..=spec.bend_amplitude_max) * w as f64;
    let phase = rng.gen_range(0.0..std::f64::consts::TAU);
    let jittered: Vec<f64> = code
        .iter()
        .map(|&l| (l + rng.gen_range(-BAND_INTENSITY_JITTER..=BAND_INTENSITY_JITTER)).clamp(0.0, 1.0))
        .collect();
    let y0 = (h as f64 - rod_len) / 2.0;
    let half_w = ROD_HALF_WIDTH_FRAC * w as f64;
    let mut img = vec![0.0f32; h * w];
    for y in 0..h {
        let u = (y as f64 + 0.5 - y0) / rod_len;
        if !(0.0..1.0).contains(&u) {
            continue;
        }
        let band = ((u * spec.n_bands as f64) as usize).min(spec.n_bands - 1);
        let xc = w as f64 / 2.0 + amp * (std::f64::consts::TAU * u + phase).sin();
        for x in 0..w {
            if ((x as f64 + 0.5) - xc).abs() <= half_w {
                img[y * w + x] = jittered[band] as f32;
            }
        }
    }
    if spec.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, spec.noise_sigma).expect("sigma >= 0");
        for p in &mut img {
            *p = (*p + normal.sample(rng) as f32).clamp(0.0, 1.0);
        }
    }
    img
}

/// Noise-free, unbent, jitter-free render of a band code.
pub fn clean_render(code: &[f64], height: usize, width: usize) -> Vec<f32> {
    let rod_len = ROD_LENGTH_FRAC * height as f64;
    let y0 = (height as f64 - rod_len) / 2.0;
    let half_w = ROD_HALF_WIDTH_FRAC * width as f64;
    let xc = width as f64 / 2.0;
    let mut img = vec![0.0f32; height * width];
    for y in 0..height {
        let u = (y as f64 + 0.5 - y0) / rod_len;
        if !(0.0..1.0).contains(&u) {
            continue;
        }
        let band = ((u * code.len() as f64) as usize).min(code.len() - 1);
        for x in 0..width {
            if ((x as f64 + 0.5) - xc).abs() <= half_w {
                img[y * width + x] = code[band] as f32;
            }
        }
    }
    img
}

/// Generates the full container. Deterministic: images derive their
/// randomness from per-image seeds, codes from the spec seed.
pub fn generate_synthetic_dataset(spec: &GeneratorSpec) -> Result<DatasetContainer> {
    spec.validate()?;
    let mut code_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let code_idx = assign_codes(spec, &mut code_rng)?;
    let class_codes: Vec<Vec<f64>> = code_idx
        .iter()
        .map(|c| c.iter().map(|&i| spec.band_levels[i]).collect())
        .collect();
    let n = spec.n_classes * spec.images_per_class;
    let px = spec.height * spec.width;
    let mut pixels = Vec::with_capacity(n * px);
    let mut labels = Vec::with_capacity(n);
    for class in 0..spec.n_classes {
        for index in 0..spec.images_per_class {
            let mut rng = per_image_rng(spec.seed, spec.stream, class, index);
            pixels.extend_from_slice(&render(&class_codes[class], spec, &mut rng));
            labels.push(class as u32);
        }
    }
    Ok(DatasetContainer {
        images: Tensor::new(vec![n, 1, spec.height, spec.width], pixels)?,
        labels,
        class_names: (0..spec.n_classes).map(|c| format!("type_{c}")).collect(),
        spec: spec.clone(),
        class_codes,
    })
}

// ---- augmentation -----------------------------------------------------------

/// One draw of the augmentation parameters.
#[derive(Clone, Copy, Debug)]
pub struct AugmentParams {
    pub angle_rad: f64,
    pub flip_h: bool,
    pub flip_v: bool,
    pub contrast: f64,
}

pub const MAX_ROTATION_DEG: f64 = 30.0;

pub fn sample_augment<R: Rng>(rng: &mut R) -> AugmentParams {
    AugmentParams {
        angle_rad: rng.gen_range(-MAX_ROTATION_DEG..=MAX_ROTATION_DEG).to_radians(),
        flip_h: rng.gen_bool(0.5),
        flip_v: rng.gen_bool(0.5),
        contrast: rng.gen_range(0.7..=1.3),
    }
}

/// Rotation (bilinear, zero fill) then flips then contrast; output stays in
/// `[0, 1]` and keeps the input shape.
pub fn apply_augment(img: &[f32], height: usize, width: usize, p: &AugmentParams) -> Vec<f32> {
    let (cy, cx) = ((height as f64 - 1.0) / 2.0, (width as f64 - 1.0) / 2.0);
    let (sin, cos) = p.angle_rad.sin_cos();
    let mut out = vec![0.0f32; height * width];
    for y in 0..height {
        for x in 0..width {
            // inverse-rotate the output coordinate into the source image
            let dy = y as f64 - cy;
            let dx = x as f64 - cx;
            let sx = cos * dx + sin * dy + cx;
            let sy = -sin * dx + cos * dy + cy;
            out[y * width + x] = bilinear(img, height, width, sy, sx);
        }
    }
    if p.flip_h {
        for y in 0..height {
            out[y * width..(y + 1) * width].reverse();
        }
    }
    if p.flip_v {
        for y in 0..height / 2 {
            let (top, bottom) = out.split_at_mut((height - 1 - y) * width);
            top[y * width..(y + 1) * width].swap_with_slice(&mut bottom[..width]);
        }
    }
    for v in &mut out {
        *v = ((*v as f64 - 0.5) * p.contrast + 0.5).clamp(0.0, 1.0) as f32;
    }
    out
}

fn bilinear(img: &[f32], height: usize, width: usize, y: f64, x: f64) -> f32 {
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let sample = |yy: f64, xx: f64| -> f64 {
        if yy < 0.0 || xx < 0.0 || yy >= height as f64 || xx >= width as f64 {
            0.0
        } else {
            img[yy as usize * width + xx as usize] as f64
        }
    };
    let v = sample(y0, x0) * (1.0 - fx) * (1.0 - fy)
        + sample(y0, x0 + 1.0) * fx * (1.0 - fy)
        + sample(y0 + 1.0, x0) * (1.0 - fx) * fy
        + sample(y0 + 1.0, x0 + 1.0) * fx * fy;
    v as f32
}

/// Random rotation, flips, and contrast adjustment of a `[1, H, W]` image.
pub fn augment_image<R: Rng>(img: &Tensor32, rng: &mut R) -> Result<Tensor32> {
    let shape = img.shape();
    if shape.len() != 3 || shape[0] != 1 {
        return Err(SclError::Dim(format!("augment_image expects [1,H,W], got {:?}", shape)));
    }
    let (h, w) = (shape[1], shape[2]);
    let p = sample_augment(rng);
    Tensor::new(vec![1, h, w], apply_augment(img.data(), h, w, &p))
}

// ---- batch sampling ---------------------------------------------------------

/// Draws one image per class for each of the two batches (distinct source
/// images whenever the class has at least two) and augments each draw
/// independently.
pub fn sample_pairwise_batches<R: Rng>(ds: &DatasetContainer, rng: &mut R) -> Result<BatchPair> {
    let k = ds.n_classes();
    let (h, w) = (ds.spec.height, ds.spec.width);
    let px = h * w;
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, &l) in ds.labels.iter().enumerate() {
        by_class[l as usize].push(i);
    }
    let mut b1 = Vec::with_capacity(k * px);
    let mut b2 = Vec::with_capacity(k * px);
    let mut src1 = Vec::with_capacity(k);
    let mut src2 = Vec::with_capacity(k);
    for class in 0..k {
        let pool = &by_class[class];
        if pool.is_empty() {
            return Err(SclError::Contract(format!("class {class} has no images")));
        }
        let i1 = pool[rng.gen_range(0..pool.len())];
        let i2 = if pool.len() >= 2 {
            loop {
                let cand = pool[rng.gen_range(0..pool.len())];
                if cand != i1 {
                    break cand;
                }
            }
        } else {
            i1
        };
        let p1 = sample_augment(rng);
        let p2 = sample_augment(rng);
        b1.extend_from_slice(&apply_augment(ds.image(i1), h, w, &p1));
        b2.extend_from_slice(&apply_augment(ds.image(i2), h, w, &p2));
        src1.push(i1);
        src2.push(i2);
    }
    Ok(BatchPair {
        b1: Tensor::new(vec![k, 1, h, w], b1)?,
        b2: Tensor::new(vec![k, 1, h, w], b2)?,
        y_gt: (0..k).collect(),
        src1,
        src2,
    })
}

// ---- file format ------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct DatasetHeader {
    n: usize,
    height: usize,
    width: usize,
    n_classes: usize,
    class_names: Vec<String>,
    generator: GeneratorSpec,
    class_codes: Vec<Vec<f64>>,
}

/// Magic, u32-LE header length, JSON header, labels as u32-LE, then raw
/// f32-LE pixels (row-major, image-major).
pub fn write_dataset(ds: &DatasetContainer, path: &Path) -> Result<()> {
    let header = DatasetHeader {
        n: ds.len(),
        height: ds.spec.height,
        width: ds.spec.width,
        n_classes: ds.spec.n_classes,
        class_names: ds.class_names.clone(),
        generator: ds.spec.clone(),
        class_codes: ds.class_codes.clone(),
    };
    let header_bytes = serde_json::to_vec(&header).expect("header serializes");
    let file = File::create(path).map_err(|e| SclError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e: std::io::Error| SclError::io(path, e);
    w.write_all(DATASET_MAGIC).map_err(io)?;
    w.write_all(&(header_bytes.len() as u32).to_le_bytes()).map_err(io)?;
    w.write_all(&header_bytes).map_err(io)?;
    for &l in &ds.labels {
        w.write_all(&l.to_le_bytes()).map_err(io)?;
    }
    for &p in ds.images.data() {
        w.write_all(&p.to_le_bytes()).map_err(io)?;
    }
    w.flush().map_err(io)?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<DatasetContainer> {
    let file = File::open(path).map_err(|e| SclError::io(path, e))?;
    let len = file.metadata().map_err(|e| SclError::io(path, e))?.len();
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 8];
    read_exact_at(&mut r, &mut magic, 0)?;
    if &magic != DATASET_MAGIC {
        return Err(SclError::Format {
            offset: 0,
            msg: format!("bad magic {:?}, expected {:?}", magic, DATASET_MAGIC),
        });
    }
    let mut len_bytes = [0u8; 4];
    read_exact_at(&mut r, &mut len_bytes, 8)?;
    let header_len = u32::from_le_bytes(len_bytes) as usize;
    let mut header_bytes = vec![0u8; header_len];
    read_exact_at(&mut r, &mut header_bytes, 12)?;
    let header: DatasetHeader = serde_json::from_slice(&header_bytes).map_err(|e| SclError::Format {
        offset: 12,
        msg: format!("invalid JSON header: {e}"),
    })?;
    let px = header.height * header.width;
    let payload = 12 + header_len as u64 + (header.n * 4) as u64 + (header.n * px * 4) as u64;
    if len != payload {
        return Err(SclError::Format {
            offset: len.min(payload),
            msg: format!("expected {payload} bytes total, file has {len}"),
        });
    }
    let mut offset = 12 + header_len as u64;
    let mut label_bytes = vec![0u8; header.n * 4];
    read_exact_at(&mut r, &mut label_bytes, offset)?;
    offset += label_bytes.len() as u64;
    let labels: Vec<u32> = label_bytes
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let mut pixel_bytes = vec![0u8; header.n * px * 4];
    read_exact_at(&mut r, &mut pixel_bytes, offset)?;
    let pixels: Vec<f32> = pixel_bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let ds = DatasetContainer {
        images: Tensor::new(vec![header.n, 1, header.height, header.width], pixels)?,
        labels,
        class_names: header.class_names,
        spec: header.generator,
        class_codes: header.class_codes,
    };
    ds.validate()?;
    Ok(ds)
}
