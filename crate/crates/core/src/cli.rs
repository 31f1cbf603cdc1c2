//! Command-line surface: dataset generation, training, evaluation,
//! embedding export, and the with/without-SCL ablation. Every command is a
//! pure function of its inputs and seeds; output files carry no timestamps.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::data::{
    generate_synthetic_dataset, read_dataset, write_dataset, DatasetContainer, GeneratorSpec,
};
use crate::error::{Result, SclError};
use crate::eval::{
    confusion_and_accuracy, embedding_separation, macro_ovr_auc, pca_project_2d, MetricsReport,
    SeparationStats,
};
use crate::model::{classify, encode, load_checkpoint, save_checkpoint, ModelConfig, ModelParams};
use crate::optim::{train_loop, TrainConfig};
use crate::tensor::{softmax_row_into, ComputationRecord, Tensor};
use crate::Tensor32;

/// JSON run configuration; flags override its fields. Unknown keys are
/// rejected.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfigFile {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub generator: GeneratorSpec,
}

impl RunConfigFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| SclError::io(path, e))?;
        let cfg: RunConfigFile = serde_json::from_str(&text)
            .map_err(|e| SclError::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.generator.validate()
    }
}

#[derive(Parser)]
#[command(name = "scl", version, about = "Supervised contrastive band-pattern classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic band-pattern dataset file.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        classes: usize,
        #[arg(long, default_value_t = 200)]
        per_class: usize,
        #[arg(long, default_value_t = 32)]
        height: usize,
        #[arg(long, default_value_t = 32)]
        width: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 2)]
        confusable_pairs: usize,
        /// Render stream; same seed + different stream shares class codes
        /// (use for train/val/test splits).
        #[arg(long, default_value_t = 0)]
        stream: u64,
    },
    /// Train a model on a dataset file.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Checkpoint output path.
        #[arg(long)]
        out: PathBuf,
        /// Training log CSV path.
        #[arg(long)]
        log: PathBuf,
        /// Disable the contrastive term (the ablation baseline).
        #[arg(long)]
        no_scl: bool,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Evaluate a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// Metrics report JSON path.
        #[arg(long)]
        report: PathBuf,
        /// Confusion matrix CSV path.
        #[arg(long)]
        confusion: PathBuf,
    },
    /// Export raw embeddings or their 2D PCA projection as CSV.
    Embed {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// `pca2` for the 2D projection; omit for raw embeddings.
        #[arg(long)]
        project: Option<String>,
    },
    /// Paired with/without-SCL runs over several seeds plus a mean-difference summary.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        /// Held-out container the arms are evaluated on.
        #[arg(long)]
        test_data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        seeds: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Parses argv and runs one command, returning the process exit code:
/// 0 success, 1 validation error, 2 I/O or format error, 3 numerical abort.
pub fn run(argv: Vec<String>) -> i32 {
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            eprint!("{e}");
            return 1;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn exit_code(e: &SclError) -> i32 {
    match e {
        SclError::Io(_) | SclError::Format { .. } => 2,
        SclError::NonFinite(_) => 3,
        _ => 1,
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData {
            out,
            classes,
            per_class,
            height,
            width,
            seed,
            confusable_pairs,
            stream,
        } => {
            let spec = GeneratorSpec {
                n_classes: classes,
                images_per_class: per_class,
                height,
                width,
                seed,
                confusable_pairs,
                stream,
                ..GeneratorSpec::default()
            };
            let ds = generate_synthetic_dataset(&spec)?;
            write_dataset(&ds, &out)
        }
        Command::Train {
            data,
            config,
            out,
            log,
            no_scl,
            iterations,
            seed,
            lr,
        } => {
            let mut cfg = load_or_default(config.as_deref())?;
            apply_train_overrides(&mut cfg.train, no_scl, iterations, seed, lr);
            let ds = read_dataset(&data)?;
            let model_cfg = model_cfg_for_dataset(&cfg.model, &ds);
            model_cfg.validate()?;
            cfg.train.validate()?;
            let (params, train_log) = train_loop(&ds, &model_cfg, &cfg.train)?;
            save_checkpoint(&params, &model_cfg, &out)?;
            train_log.write_csv(&log)
        }
        Command::Eval {
            data,
            ckpt,
            report,
            confusion,
        } => {
            let ds = read_dataset(&data)?;
            let (params, model_cfg) = load_checkpoint(&ckpt)?;
            check_compatible(&model_cfg, &ds)?;
            let (logits, embeddings) = forward_dataset(&ds, &params, &model_cfg)?;
            let labels: Vec<usize> = ds.labels.iter().map(|&l| l as usize).collect();
            let mut metrics = confusion_and_accuracy(&logits, &labels)?;
            metrics.macro_ovr_auc = Some(macro_ovr_auc(&softmax_scores(&logits), &labels)?);
            let separation = embedding_separation(&embeddings, &labels)?;
            let file = ReportFile {
                metrics,
                separation,
            };
            let json = serde_json::to_string_pretty(&file).expect("report serializes");
            std::fs::write(&report, json).map_err(|e| SclError::io(&report, e))?;
            std::fs::write(&confusion, confusion_csv(&file.metrics))
                .map_err(|e| SclError::io(&confusion, e))
        }
        Command::Embed {
            data,
            ckpt,
            out,
            project,
        } => {
            match project.as_deref() {
                None | Some("pca2") => {}
                Some(other) => {
                    return Err(SclError::Config(format!(
                        "unknown projection {other:?}; only \"pca2\" is supported"
                    )))
                }
            }
            let ds = read_dataset(&data)?;
            let (params, model_cfg) = load_checkpoint(&ckpt)?;
            check_compatible(&model_cfg, &ds)?;
            let (_, embeddings) = forward_dataset(&ds, &params, &model_cfg)?;
            let csv = if project.is_some() {
                let (proj, _) = pca_project_2d(&embeddings)?;
                let mut s = String::from("x,y,label\n");
                for (i, &l) in ds.labels.iter().enumerate() {
                    writeln!(s, "{},{},{}", proj.at2(i, 0), proj.at2(i, 1), l).unwrap();
                }
                s
            } else {
                let d = embeddings.cols();
                let mut s = String::from("label");
                for j in 0..d {
                    write!(s, ",e{j}").unwrap();
                }
                s.push('\n');
                for (i, &l) in ds.labels.iter().enumerate() {
                    write!(s, "{l}").unwrap();
                    for j in 0..d {
                        write!(s, ",{}", embeddings.at2(i, j)).unwrap();
                    }
                    s.push('\n');
                }
                s
            };
            std::fs::write(&out, csv).map_err(|e| SclError::io(&out, e))
        }
        Command::Ablate {
            data,
            test_data,
            config,
            seeds,
            out,
        } => ablate(&data, &test_data, config.as_deref(), seeds, &out),
    }
}

fn load_or_default(config: Option<&Path>) -> Result<RunConfigFile> {
    match config {
        Some(path) => RunConfigFile::load(path),
        None => Ok(RunConfigFile::default()),
    }
}

fn apply_train_overrides(
    cfg: &mut TrainConfig,
    no_scl: bool,
    iterations: Option<usize>,
    seed: Option<u64>,
    lr: Option<f64>,
) {
    if no_scl {
        cfg.scl_enabled = false;
    }
    if let Some(it) = iterations {
        cfg.iterations = it;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(l) = lr {
        cfg.learning_rate = l;
    }
}

/// Input geometry and class count always come from the dataset itself.
fn model_cfg_for_dataset(base: &ModelConfig, ds: &DatasetContainer) -> ModelConfig {
    ModelConfig {
        input_height: ds.spec.height,
        input_width: ds.spec.width,
        n_classes: ds.n_classes(),
        ..base.clone()
    }
}

fn check_compatible(cfg: &ModelConfig, ds: &DatasetContainer) -> Result<()> {
    if cfg.input_height != ds.spec.height
        || cfg.input_width != ds.spec.width
        || cfg.n_classes != ds.n_classes()
    {
        return Err(SclError::Config(format!(
            "checkpoint was trained for {}x{} images with {} classes; dataset is {}x{} with {}",
            cfg.input_height,
            cfg.input_width,
            cfg.n_classes,
            ds.spec.height,
            ds.spec.width,
            ds.n_classes()
        )));
    }
    Ok(())
}

#[derive(Serialize)]
struct ReportFile {
    #[serde(flatten)]
    metrics: MetricsReport,
    separation: SeparationStats,
}

/// Runs the whole container through the encoder and head without gradients.
pub fn forward_dataset(
    ds: &DatasetContainer,
    params: &ModelParams<f32>,
    cfg: &ModelConfig,
) -> Result<(Tensor32, Tensor32)> {
    let mut rec = ComputationRecord::<f32>::new();
    let ids = params.insert_into(&mut rec);
    let batch = ds
        .images
        .reshaped(vec![ds.len(), 1, cfg.input_height, cfg.input_width])?;
    let e = encode(&mut rec, &ids, cfg, &batch)?;
    let logits = classify(&mut rec, &ids, e)?;
    Ok((rec.value(logits).clone(), rec.value(e).clone()))
}

fn softmax_scores(logits: &Tensor32) -> Tensor32 {
    let (n, k) = (logits.rows(), logits.cols());
    let mut out = vec![0.0f32; n * k];
    for i in 0..n {
        softmax_row_into(&logits.data()[i * k..(i + 1) * k], &mut out[i * k..(i + 1) * k]);
    }
    Tensor::new(vec![n, k], out).expect("finite softmax")
}

fn confusion_csv(metrics: &MetricsReport) -> String {
    let mut s = String::new();
    for row in &metrics.confusion {
        let cells: Vec<String> = row.iter().map(|c| c.to_string()).collect();
        writeln!(s, "{}", cells.join(",")).unwrap();
    }
    s
}

struct ArmOutcome {
    accuracy: f64,
    macro_recall: f64,
    macro_auc: f64,
    separation_gap: f64,
}

fn evaluate_arm(
    train_ds: &DatasetContainer,
    test_ds: &DatasetContainer,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
) -> Result<ArmOutcome> {
    let (params, _) = train_loop(train_ds, model_cfg, train_cfg)?;
    let (logits, embeddings) = forward_dataset(test_ds, &params, model_cfg)?;
    let labels: Vec<usize> = test_ds.labels.iter().map(|&l| l as usize).collect();
    let metrics = confusion_and_accuracy(&logits, &labels)?;
    let auc = macro_ovr_auc(&softmax_scores(&logits), &labels)?;
    let sep = embedding_separation(&embeddings, &labels)?;
    Ok(ArmOutcome {
        accuracy: metrics.accuracy,
        macro_recall: metrics.macro_recall,
        macro_auc: auc,
        separation_gap: sep.separation_gap,
    })
}

/// Trains one SCL arm and one baseline arm per derived seed (identical
/// otherwise), evaluates both on the held-out container, and writes the
/// per-run rows plus a final mean-difference summary row.
pub fn ablate(
    data: &Path,
    test_data: &Path,
    config: Option<&Path>,
    seeds: u64,
    out: &Path,
) -> Result<()> {
    if seeds == 0 {
        return Err(SclError::Config("ablate needs at least one seed".into()));
    }
    let cfg = load_or_default(config)?;
    let train_ds = read_dataset(data)?;
    let test_ds = read_dataset(test_data)?;
    let model_cfg = model_cfg_for_dataset(&cfg.model, &train_ds);
    model_cfg.validate()?;
    cfg.train.validate()?;
    check_compatible(&model_cfg, &test_ds)?;

    let mut csv = String::from("seed,scl,accuracy,macro_recall,macro_auc,separation_gap\n");
    let mut diffs = [0.0f64; 4];
    for i in 0..seeds {
        let seed = cfg.train.seed.wrapping_add(i);
        let mut with_scl = cfg.train.clone();
        with_scl.seed = seed;
        with_scl.scl_enabled = true;
        let mut without = with_scl.clone();
        without.scl_enabled = false;

        let scl = evaluate_arm(&train_ds, &test_ds, &model_cfg, &with_scl)?;
        let base = evaluate_arm(&train_ds, &test_ds, &model_cfg, &without)?;
        for (arm, flag) in [(&scl, true), (&base, false)] {
            writeln!(
                csv,
                "{seed},{},{},{},{},{}",
                flag, arm.accuracy, arm.macro_recall, arm.macro_auc, arm.separation_gap
            )
            .unwrap();
        }
        diffs[0] += scl.accuracy - base.accuracy;
        diffs[1] += scl.macro_recall - base.macro_recall;
        diffs[2] += scl.macro_auc - base.macro_auc;
        diffs[3] += scl.separation_gap - base.separation_gap;
    }
    for d in &mut diffs {
        *d /= seeds as f64;
    }
    writeln!(csv, "mean_diff,,{},{},{},{}", diffs[0], diffs[1], diffs[2], diffs[3]).unwrap();
    std::fs::write(out, csv).map_err(|e| SclError::io(out, e))
}
