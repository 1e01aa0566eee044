//! Command-line entry point wiring all modules into reproducible
//! experiments. Every command is deterministic given `--seed`, appends a
//! machine-readable record (JSON lines), and prints a one-line summary.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::dataset::{
    self, build_dkt_examples, build_windowed_sequences, load_interactions, synthetic,
    InteractionLog, QuestionIndexMap, UnseenQuestionPolicy,
};
use crate::error::{Error, Result};
use crate::evaluation::{
    self, append_reports_jsonl, coldstart_fraction_sweep, evaluate_dkt, evaluate_lkt,
    seq_length_buckets, zero_shot_eval, EvalReport, LktEvalProtocol,
};
use crate::interpret::{self, lime_explain, mean_attention, model_scorer, PositionRule};
use crate::models::{peek_checkpoint_meta, DktModel, HeadType, LktConfig, LktModel};
use crate::numerics::Scalar;
use crate::seed;
use crate::tokenizer::Vocabulary;
use crate::training::{
    train, write_history_jsonl, DktTrainer, LktTrainer, MlmTrainer, Precision, TrainConfig,
};

#[derive(Parser, Debug)]
#[command(name = "lkt", version, about = "Text-based knowledge tracing experiments")]
pub struct Cli {
    /// Flat `key = value` config file with [section] headers; command-line
    /// flags override file values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Root directory for relative paths.
    #[arg(long, global = true, env = "LKT_DATA_DIR")]
    pub data_dir: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic interaction log with a ground-truth
    /// probability sidecar and a manifest recording the score ceiling.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        students: usize,
        #[arg(long, default_value_t = 50)]
        questions: usize,
        #[arg(long, default_value_t = 10)]
        concepts: usize,
        #[arg(long, default_value_t = 12)]
        interactions: usize,
        #[arg(long, default_value_t = 0.7)]
        ability_correlation: f64,
        #[arg(long, default_value = "d0")]
        tag: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Build a word-level vocabulary from the question and concept text
    /// of an interaction CSV.
    BuildVocab {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        min_freq: usize,
        #[arg(long, default_value_t = 5000)]
        max_size: usize,
    },
    /// Masked-token pretraining of the encoder on the dataset's text.
    Pretrain {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        history: Option<PathBuf>,
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Train the masked-response encoder or the recurrent baseline.
    Train {
        #[arg(long, value_parser = ["lkt", "dkt"])]
        model: String,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        vocab: Option<PathBuf>,
        /// Start from a pretrained checkpoint instead of fresh parameters.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        history: Option<PathBuf>,
        #[arg(long, default_value_t = 0.1)]
        val_fraction: f64,
        /// Independently masked variants of each sequence per epoch.
        #[arg(long, default_value_t = 1)]
        mask_draws: usize,
        /// Recurrent baseline hidden size.
        #[arg(long, default_value_t = 64)]
        hidden: usize,
        #[command(flatten)]
        model_args: ModelArgs,
        #[command(flatten)]
        train_args: TrainArgs,
    },
    /// Evaluate a checkpoint on a dataset split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long, value_parser = ["all", "train", "val"], default_value = "all")]
        split: String,
        #[arg(long, default_value_t = 0.1)]
        val_fraction: f64,
        /// `targets`: one masked prediction per interaction.
        /// `masked15`: the training-time masking protocol.
        #[arg(long, value_parser = ["targets", "masked15"], default_value = "targets")]
        protocol: String,
        #[arg(long, default_value_t = 0.15)]
        mask_rate: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        reports: Option<PathBuf>,
    },
    /// Cold-start sweep: fine-tune a pretrained encoder on nested
    /// fractions of the target data; the baseline trains from scratch on
    /// the same subsamples.
    Coldstart {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        target_data: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0.01,0.03,0.1,0.3,1.0")]
        fractions: Vec<f64>,
        #[arg(long, default_value_t = 0.25)]
        test_fraction: f64,
        #[arg(long, default_value_t = 64)]
        dkt_hidden: usize,
        #[arg(long, default_value_t = 8)]
        ft_epochs: usize,
        #[arg(long, default_value_t = 1e-4)]
        ft_lr: f64,
        #[arg(long, default_value_t = 40)]
        dkt_epochs: usize,
        #[arg(long, default_value_t = 1e-3)]
        dkt_lr: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        reports: Option<PathBuf>,
    },
    /// Score masked-response prediction at fixed history lengths.
    Seqlen {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "5,10,20,50,100")]
        buckets: Vec<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        reports: Option<PathBuf>,
    },
    /// Evaluate source-trained models on a new domain without updates.
    Zeroshot {
        #[arg(long)]
        lkt_ckpt: PathBuf,
        #[arg(long)]
        dkt_ckpt: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        target_data: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        reports: Option<PathBuf>,
    },
    /// Perturbation explanation of one masked prediction.
    Explain {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        student: String,
        /// Interaction index within the student's history (default: last).
        #[arg(long)]
        interaction: Option<usize>,
        #[arg(long, default_value_t = 1000)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also export the mean-attention map for this layer/head.
        #[arg(long, default_value_t = 0)]
        attention_layer: usize,
        #[arg(long, default_value_t = 0)]
        attention_head: usize,
    },
    /// Write final-layer hidden states with predictions to CSV.
    ExportEmbeddings {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_parser = ["mask", "cls"], default_value = "mask")]
        rule: String,
        #[arg(long, default_value_t = 0.15)]
        mask_rate: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args, Debug, Default, Clone)]
pub struct ModelArgs {
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub num_layers: Option<usize>,
    #[arg(long)]
    pub num_heads: Option<usize>,
    #[arg(long)]
    pub d_ff: Option<usize>,
    #[arg(long)]
    pub max_len: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
}

#[derive(Args, Debug, Default, Clone)]
pub struct TrainArgs {
    #[arg(long)]
    pub max_epochs: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub micro_batch_size: Option<usize>,
    #[arg(long)]
    pub peak_lr: Option<f64>,
    #[arg(long)]
    pub warmup_steps: Option<usize>,
    #[arg(long)]
    pub mask_rate: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub precision: Option<String>,
}

// ── config file ─────────────────────────────────────────────────────

/// Parsed `[section]` / `key = value` file. Unknown keys are rejected.
#[derive(Debug, Default)]
pub struct FileConfig {
    values: BTreeMap<(String, String), String>,
}

const KNOWN_KEYS: &[(&str, &str)] = &[
    ("model", "d_model"),
    ("model", "num_layers"),
    ("model", "num_heads"),
    ("model", "d_ff"),
    ("model", "max_len"),
    ("model", "dropout"),
    ("train", "max_epochs"),
    ("train", "patience"),
    ("train", "batch_size"),
    ("train", "micro_batch_size"),
    ("train", "peak_lr"),
    ("train", "warmup_steps"),
    ("train", "mask_rate"),
    ("train", "seed"),
    ("train", "precision"),
];

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(FileConfig::default());
        };
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path)?;
        let mut values = BTreeMap::new();
        let mut section = String::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
                section = name.trim().to_string();
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::InvalidArgument(format!(
                    "{}:{}: expected `key = value`, got {line:?}",
                    path.display(),
                    lineno + 1
                )));
            };
            let key = key.trim().to_string();
            if !KNOWN_KEYS.contains(&(section.as_str(), key.as_str())) {
                return Err(Error::InvalidArgument(format!(
                    "{}:{}: unknown config key [{}] {}",
                    path.display(),
                    lineno + 1,
                    section,
                    key
                )));
            }
            values.insert((section.clone(), key), value.trim().to_string());
        }
        Ok(FileConfig { values })
    }

    fn get<T: std::str::FromStr>(&self, section: &str, key: &str) -> Result<Option<T>> {
        match self.values.get(&(section.to_string(), key.to_string())) {
            None => Ok(None),
            Some(raw) => raw.parse::<T>().map(Some).map_err(|_| {
                Error::InvalidArgument(format!("config [{section}] {key}: bad value {raw:?}"))
            }),
        }
    }
}

fn resolve_train(args: &TrainArgs, file: &FileConfig) -> Result<TrainConfig> {
    let defaults = TrainConfig::default();
    let precision = match args
        .precision
        .clone()
        .or(file.get::<String>("train", "precision")?)
    {
        Some(s) => s.parse::<Precision>()?,
        None => defaults.precision,
    };
    Ok(TrainConfig {
        max_epochs: args
            .max_epochs
            .or(file.get("train", "max_epochs")?)
            .unwrap_or(defaults.max_epochs),
        patience: args
            .patience
            .or(file.get("train", "patience")?)
            .unwrap_or(defaults.patience),
        batch_size: args
            .batch_size
            .or(file.get("train", "batch_size")?)
            .unwrap_or(defaults.batch_size),
        micro_batch_size: args
            .micro_batch_size
            .or(file.get("train", "micro_batch_size")?)
            .unwrap_or(defaults.micro_batch_size),
        peak_lr: args
            .peak_lr
            .or(file.get("train", "peak_lr")?)
            .unwrap_or(defaults.peak_lr),
        warmup_steps: args
            .warmup_steps
            .or(file.get("train", "warmup_steps")?)
            .unwrap_or(defaults.warmup_steps),
        mask_rate: args
            .mask_rate
            .or(file.get("train", "mask_rate")?)
            .unwrap_or(defaults.mask_rate),
        seed: args.seed.or(file.get("train", "seed")?).unwrap_or(0),
        precision,
    })
}

fn resolve_model(args: &ModelArgs, file: &FileConfig, vocab_size: usize) -> Result<LktConfig> {
    let base = LktConfig::small(vocab_size);
    Ok(LktConfig {
        vocab_size,
        d_model: args
            .d_model
            .or(file.get("model", "d_model")?)
            .unwrap_or(base.d_model),
        num_layers: args
            .num_layers
            .or(file.get("model", "num_layers")?)
            .unwrap_or(base.num_layers),
        num_heads: args
            .num_heads
            .or(file.get("model", "num_heads")?)
            .unwrap_or(base.num_heads),
        d_ff: args.d_ff.or(file.get("model", "d_ff")?).unwrap_or(base.d_ff),
        max_len: args
            .max_len
            .or(file.get("model", "max_len")?)
            .unwrap_or(base.max_len),
        dropout_p: args
            .dropout
            .or(file.get("model", "dropout")?)
            .unwrap_or(base.dropout_p),
        head_type: base.head_type,
    })
}

// ── path helpers ────────────────────────────────────────────────────

fn resolve_path(root: &Option<PathBuf>, p: &Path) -> PathBuf {
    if p.is_absolute() {
        return p.to_path_buf();
    }
    match root {
        Some(r) => r.join(p),
        None => p.to_path_buf(),
    }
}

fn require_exists(p: &Path) -> Result<()> {
    if p.exists() {
        Ok(())
    } else {
        Err(Error::MissingFile(p.to_path_buf()))
    }
}

fn default_reports(root: &Option<PathBuf>) -> PathBuf {
    resolve_path(root, Path::new("reports.jsonl"))
}

fn print_reports(reports: &[EvalReport]) {
    for r in reports {
        println!(
            "{} {}: auc {:.4} acc {:.4} n {}",
            r.model, r.protocol, r.auc, r.acc, r.n_predictions
        );
    }
}

/// Checkpoint dtype recorded in the manifest config block.
fn checkpoint_precision(meta: &serde_json::Value) -> Result<Precision> {
    match meta["dtype"].as_str() {
        Some("f32") => Ok(Precision::F32),
        Some("f64") => Ok(Precision::F64),
        other => Err(Error::CheckpointFormat(format!(
            "checkpoint missing dtype field: {other:?}"
        ))),
    }
}

// ── command dispatch ────────────────────────────────────────────────

pub fn run(cli: Cli) -> Result<()> {
    let file = FileConfig::load(cli.config.as_deref())?;
    let root = cli.data_dir.clone();
    match cli.command {
        Command::GenData {
            out,
            students,
            questions,
            concepts,
            interactions,
            ability_correlation,
            tag,
            seed,
        } => cmd_gen_data(
            &resolve_path(&root, &out),
            students,
            questions,
            concepts,
            interactions,
            ability_correlation,
            &tag,
            seed,
        ),
        Command::BuildVocab {
            data,
            out,
            min_freq,
            max_size,
        } => cmd_build_vocab(
            &resolve_path(&root, &data),
            &resolve_path(&root, &out),
            min_freq,
            max_size,
        ),
        Command::Pretrain {
            data,
            vocab,
            out,
            history,
            model,
            train,
        } => {
            let cfg = resolve_train(&train, &file)?;
            let data = resolve_path(&root, &data);
            let vocab = resolve_path(&root, &vocab);
            let out = resolve_path(&root, &out);
            let history = history.map(|h| resolve_path(&root, &h));
            match cfg.precision {
                Precision::F32 => {
                    cmd_pretrain::<f32>(&data, &vocab, &out, history.as_deref(), &model, &file, &cfg)
                }
                Precision::F64 => {
                    cmd_pretrain::<f64>(&data, &vocab, &out, history.as_deref(), &model, &file, &cfg)
                }
            }
        }
        Command::Train {
            model,
            data,
            vocab,
            init,
            out,
            history,
            val_fraction,
            mask_draws,
            hidden,
            model_args,
            train_args,
        } => {
            let cfg = resolve_train(&train_args, &file)?;
            let data = resolve_path(&root, &data);
            let vocab = vocab.map(|v| resolve_path(&root, &v));
            let init = init.map(|i| resolve_path(&root, &i));
            let out = resolve_path(&root, &out);
            let history = history.map(|h| resolve_path(&root, &h));
            match (model.as_str(), cfg.precision) {
                ("lkt", Precision::F32) => cmd_train_lkt::<f32>(
                    &data,
                    vocab.as_deref(),
                    init.as_deref(),
                    &out,
                    history.as_deref(),
                    val_fraction,
                    mask_draws,
                    &model_args,
                    &file,
                    &cfg,
                ),
                ("lkt", Precision::F64) => cmd_train_lkt::<f64>(
                    &data,
                    vocab.as_deref(),
                    init.as_deref(),
                    &out,
                    history.as_deref(),
                    val_fraction,
                    mask_draws,
                    &model_args,
                    &file,
                    &cfg,
                ),
                ("dkt", Precision::F32) => cmd_train_dkt::<f32>(
                    &data,
                    &out,
                    history.as_deref(),
                    val_fraction,
                    hidden,
                    &cfg,
                ),
                ("dkt", Precision::F64) => cmd_train_dkt::<f64>(
                    &data,
                    &out,
                    history.as_deref(),
                    val_fraction,
                    hidden,
                    &cfg,
                ),
                _ => unreachable!("clap validates the model family"),
            }
        }
        Command::Eval {
            ckpt,
            data,
            vocab,
            split,
            val_fraction,
            protocol,
            mask_rate,
            seed,
            reports,
        } => {
            let ckpt = resolve_path(&root, &ckpt);
            require_exists(&ckpt)?;
            let data = resolve_path(&root, &data);
            let vocab = vocab.map(|v| resolve_path(&root, &v));
            let reports = reports.map_or_else(|| default_reports(&root), |r| resolve_path(&root, &r));
            let meta = peek_checkpoint_meta(&ckpt)?;
            match checkpoint_precision(&meta)? {
                Precision::F32 => cmd_eval::<f32>(
                    &meta, &ckpt, &data, vocab.as_deref(), &split, val_fraction, &protocol,
                    mask_rate, seed, &reports,
                ),
                Precision::F64 => cmd_eval::<f64>(
                    &meta, &ckpt, &data, vocab.as_deref(), &split, val_fraction, &protocol,
                    mask_rate, seed, &reports,
                ),
            }
        }
        Command::Coldstart {
            ckpt,
            vocab,
            target_data,
            fractions,
            test_fraction,
            dkt_hidden,
            ft_epochs,
            ft_lr,
            dkt_epochs,
            dkt_lr,
            seed,
            reports,
        } => {
            let ckpt = resolve_path(&root, &ckpt);
            require_exists(&ckpt)?;
            let vocab = resolve_path(&root, &vocab);
            let target_data = resolve_path(&root, &target_data);
            let reports = reports.map_or_else(|| default_reports(&root), |r| resolve_path(&root, &r));
            let meta = peek_checkpoint_meta(&ckpt)?;
            match checkpoint_precision(&meta)? {
                Precision::F32 => cmd_coldstart::<f32>(
                    &ckpt, &vocab, &target_data, &fractions, test_fraction, dkt_hidden, ft_epochs,
                    ft_lr, dkt_epochs, dkt_lr, seed, &reports,
                ),
                Precision::F64 => cmd_coldstart::<f64>(
                    &ckpt, &vocab, &target_data, &fractions, test_fraction, dkt_hidden, ft_epochs,
                    ft_lr, dkt_epochs, dkt_lr, seed, &reports,
                ),
            }
        }
        Command::Seqlen {
            ckpt,
            vocab,
            data,
            buckets,
            seed,
            reports,
        } => {
            let ckpt = resolve_path(&root, &ckpt);
            require_exists(&ckpt)?;
            let vocab = resolve_path(&root, &vocab);
            let data = resolve_path(&root, &data);
            let reports = reports.map_or_else(|| default_reports(&root), |r| resolve_path(&root, &r));
            let meta = peek_checkpoint_meta(&ckpt)?;
            match checkpoint_precision(&meta)? {
                Precision::F32 => cmd_seqlen::<f32>(&ckpt, &vocab, &data, &buckets, seed, &reports),
                Precision::F64 => cmd_seqlen::<f64>(&ckpt, &vocab, &data, &buckets, seed, &reports),
            }
        }
        Command::Zeroshot {
            lkt_ckpt,
            dkt_ckpt,
            vocab,
            target_data,
            seed,
            reports,
        } => {
            let lkt_ckpt = resolve_path(&root, &lkt_ckpt);
            let dkt_ckpt = resolve_path(&root, &dkt_ckpt);
            require_exists(&lkt_ckpt)?;
            require_exists(&dkt_ckpt)?;
            let vocab = resolve_path(&root, &vocab);
            let target_data = resolve_path(&root, &target_data);
            let reports = reports.map_or_else(|| default_reports(&root), |r| resolve_path(&root, &r));
            let meta = peek_checkpoint_meta(&lkt_ckpt)?;
            match checkpoint_precision(&meta)? {
                Precision::F32 => {
                    cmd_zeroshot::<f32>(&lkt_ckpt, &dkt_ckpt, &vocab, &target_data, seed, &reports)
                }
                Precision::F64 => {
                    cmd_zeroshot::<f64>(&lkt_ckpt, &dkt_ckpt, &vocab, &target_data, seed, &reports)
                }
            }
        }
        Command::Explain {
            ckpt,
            vocab,
            data,
            student,
            interaction,
            samples,
            seed,
            out,
            attention_layer,
            attention_head,
        } => {
            let ckpt = resolve_path(&root, &ckpt);
            require_exists(&ckpt)?;
            let vocab = resolve_path(&root, &vocab);
            let data = resolve_path(&root, &data);
            let out = out.map(|o| resolve_path(&root, &o));
            let meta = peek_checkpoint_meta(&ckpt)?;
            match checkpoint_precision(&meta)? {
                Precision::F32 => cmd_explain::<f32>(
                    &ckpt, &vocab, &data, &student, interaction, samples, seed, out.as_deref(),
                    attention_layer, attention_head,
                ),
                Precision::F64 => cmd_explain::<f64>(
                    &ckpt, &vocab, &data, &student, interaction, samples, seed, out.as_deref(),
                    attention_layer, attention_head,
                ),
            }
        }
        Command::ExportEmbeddings {
            ckpt,
            vocab,
            data,
            out,
            rule,
            mask_rate,
            seed,
        } => {
            let ckpt = resolve_path(&root, &ckpt);
            require_exists(&ckpt)?;
            let vocab = resolve_path(&root, &vocab);
            let data = resolve_path(&root, &data);
            let out = resolve_path(&root, &out);
            let meta = peek_checkpoint_meta(&ckpt)?;
            match checkpoint_precision(&meta)? {
                Precision::F32 => {
                    cmd_export::<f32>(&ckpt, &vocab, &data, &out, &rule, mask_rate, seed)
                }
                Precision::F64 => {
                    cmd_export::<f64>(&ckpt, &vocab, &data, &out, &rule, mask_rate, seed)
                }
            }
        }
    }
}

// ── command implementations ─────────────────────────────────────────

#[allow(clippy::too_many_arguments)]
fn cmd_gen_data(
    out: &Path,
    students: usize,
    questions: usize,
    concepts: usize,
    interactions: usize,
    ability_correlation: f64,
    tag: &str,
    seed_value: u64,
) -> Result<()> {
    std::fs::create_dir_all(out)?;
    let params = synthetic::SynthParams {
        interactions_per_student: interactions,
        ability_correlation,
    };
    let data = synthetic::generate_synthetic(students, questions, concepts, seed_value, &params, tag)?;

    let csv_path = out.join("interactions.csv");
    dataset::write_interactions_csv(&csv_path, &data.records)?;

    // ground-truth sidecar, row-aligned with the interactions file
    let mut w = csv::Writer::from_path(out.join("true_p.csv"))?;
    w.write_record(["student_id", "step", "question_id", "true_p"])?;
    for (rec, p) in data.records.iter().zip(&data.true_p) {
        w.write_record([
            rec.student_id.as_str(),
            &rec.step.to_string(),
            rec.question_id.as_str(),
            &p.to_string(),
        ])?;
    }
    w.flush()?;

    let labels: Vec<u8> = data.records.iter().map(|r| r.response).collect();
    let bayes_auc = evaluation::auc(&data.true_p, &labels)?;
    let manifest = serde_json::json!({
        "students": students,
        "questions": questions,
        "concepts": concepts,
        "interactions_per_student": interactions,
        "interactions": data.records.len(),
        "ability_correlation": ability_correlation,
        "tag": tag,
        "seed": seed_value,
        "bayes_auc": bayes_auc,
    });
    std::fs::write(
        out.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    println!(
        "gen-data: {} interactions for {} students -> {} (bayes auc {:.4})",
        data.records.len(),
        students,
        out.display(),
        bayes_auc
    );
    Ok(())
}

fn cmd_build_vocab(data: &Path, out: &Path, min_freq: usize, max_size: usize) -> Result<()> {
    let log = load_interactions(data)?;
    let mut corpus = Vec::new();
    for rec in log.all_records() {
        corpus.push(rec.concept_text.clone());
        corpus.push(rec.question_text.clone());
    }
    let vocab = Vocabulary::build(corpus.iter().map(String::as_str), min_freq, max_size)?;
    vocab.save(out)?;
    println!("build-vocab: {} tokens -> {}", vocab.len(), out.display());
    Ok(())
}

/// Distinct per-question text sequences for pretraining.
fn pretrain_sequences(log: &InteractionLog, vocab: &Vocabulary) -> Vec<Vec<u32>> {
    let mut seen = BTreeMap::new();
    for rec in log.all_records() {
        seen.entry(rec.question_id.clone())
            .or_insert_with(|| (rec.concept_text.clone(), rec.question_text.clone()));
    }
    seen.values()
        .map(|(concept, question)| {
            let mut ids = vec![crate::tokenizer::CLS];
            ids.extend(vocab.encode(concept));
            ids.extend(vocab.encode(question));
            ids.push(crate::tokenizer::EOS);
            ids
        })
        .collect()
}

fn cmd_pretrain<S: Scalar>(
    data: &Path,
    vocab_path: &Path,
    out: &Path,
    history: Option<&Path>,
    model_args: &ModelArgs,
    file: &FileConfig,
    cfg: &TrainConfig,
) -> Result<()> {
    let log = load_interactions(data)?;
    let vocab = Vocabulary::load(vocab_path)?;
    let mut config = resolve_model(model_args, file, vocab.len())?;
    config.head_type = HeadType::Mlm;
    let model = LktModel::<S>::init(&config, cfg.seed)?;

    let sequences = pretrain_sequences(&log, &vocab);
    if sequences.len() < 2 {
        return Err(Error::DataValidation(
            "need at least 2 distinct questions to pretrain".into(),
        ));
    }
    let n_val = (sequences.len() / 10).max(1);
    let trainer = MlmTrainer {
        train_sequences: sequences[n_val..].to_vec(),
        val_sequences: sequences[..n_val].to_vec(),
        mask_rate: cfg.mask_rate,
        vocab_size: vocab.len(),
        seed: cfg.seed,
    };
    let outcome = train(&trainer, model, cfg)?;
    outcome.model.save(out)?;
    if let Some(h) = history {
        write_history_jsonl(h, &outcome.history)?;
    }
    println!(
        "pretrain: best epoch {} val_loss {:.4} ({} epochs) -> {}",
        outcome.best_epoch,
        outcome.best_val_loss,
        outcome.history.len(),
        out.display()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_train_lkt<S: Scalar>(
    data: &Path,
    vocab_path: Option<&Path>,
    init: Option<&Path>,
    out: &Path,
    history: Option<&Path>,
    val_fraction: f64,
    mask_draws: usize,
    model_args: &ModelArgs,
    file: &FileConfig,
    cfg: &TrainConfig,
) -> Result<()> {
    let vocab_path = vocab_path.ok_or_else(|| {
        Error::InvalidArgument("training the encoder requires --vocab".into())
    })?;
    let log = load_interactions(data)?;
    let vocab = Vocabulary::load(vocab_path)?;

    let model = match init {
        Some(ckpt_path) => {
            require_exists(ckpt_path)?;
            let mut m = LktModel::<S>::load(ckpt_path)?;
            if m.config.vocab_size != vocab.len() {
                return Err(Error::InvalidArgument(format!(
                    "checkpoint vocab size {} does not match vocabulary {}",
                    m.config.vocab_size,
                    vocab.len()
                )));
            }
            m.config.head_type = HeadType::Response;
            m
        }
        None => {
            let config = resolve_model(model_args, file, vocab.len())?;
            LktModel::init(&config, cfg.seed)?
        }
    };

    let (train_ids, val_ids) = dataset::split_train_val(
        &log.student_ids(),
        val_fraction,
        seed::derive(cfg.seed, &[60]),
    )?;
    let trainer = LktTrainer {
        train_sequences: build_windowed_sequences(&log.subset(&train_ids), &vocab, model.config.max_len)?,
        val_sequences: build_windowed_sequences(&log.subset(&val_ids), &vocab, model.config.max_len)?,
        mask_rate: cfg.mask_rate,
        mask_draws,
        seed: cfg.seed,
    };
    let outcome = train(&trainer, model, cfg)?;
    outcome.model.save(out)?;
    if let Some(h) = history {
        write_history_jsonl(h, &outcome.history)?;
    }
    println!(
        "train lkt: best epoch {} val_loss {:.6} val_auc {} ({} epochs) -> {}",
        outcome.best_epoch,
        outcome.best_val_loss,
        outcome
            .best_val_auc
            .map_or("n/a".to_string(), |a| format!("{a:.6}")),
        outcome.history.len(),
        out.display()
    );
    Ok(())
}

fn cmd_train_dkt<S: Scalar>(
    data: &Path,
    out: &Path,
    history: Option<&Path>,
    val_fraction: f64,
    hidden: usize,
    cfg: &TrainConfig,
) -> Result<()> {
    let log = load_interactions(data)?;
    let (train_ids, val_ids) = dataset::split_train_val(
        &log.student_ids(),
        val_fraction,
        seed::derive(cfg.seed, &[60]),
    )?;
    let train_log = log.subset(&train_ids);
    let map = QuestionIndexMap::from_log(&train_log);
    let trainer = DktTrainer {
        train_examples: build_dkt_examples(&train_log, &map, UnseenQuestionPolicy::Error)?,
        val_examples: build_dkt_examples(
            &log.subset(&val_ids),
            &map,
            UnseenQuestionPolicy::Sentinel,
        )?,
    };
    let model = DktModel::<S>::init(map, hidden, cfg.seed)?;
    let outcome = train(&trainer, model, cfg)?;
    outcome.model.save(out)?;
    if let Some(h) = history {
        write_history_jsonl(h, &outcome.history)?;
    }
    println!(
        "train dkt: best epoch {} val_loss {:.6} val_auc {} ({} epochs) -> {}",
        outcome.best_epoch,
        outcome.best_val_loss,
        outcome
            .best_val_auc
            .map_or("n/a".to_string(), |a| format!("{a:.6}")),
        outcome.history.len(),
        out.display()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_eval<S: Scalar>(
    meta: &serde_json::Value,
    ckpt: &Path,
    data: &Path,
    vocab_path: Option<&Path>,
    split: &str,
    val_fraction: f64,
    protocol: &str,
    mask_rate: f64,
    seed_value: u64,
    reports_path: &Path,
) -> Result<()> {
    let log = load_interactions(data)?;
    let eval_log = match split {
        "all" => log.clone(),
        part => {
            let (train_ids, val_ids) = dataset::split_train_val(
                &log.student_ids(),
                val_fraction,
                seed::derive(seed_value, &[60]),
            )?;
            log.subset(if part == "train" { &train_ids } else { &val_ids })
        }
    };

    let report = match meta["kind"].as_str() {
        Some("lkt") => {
            let vocab_path = vocab_path.ok_or_else(|| {
                Error::InvalidArgument("evaluating the encoder requires --vocab".into())
            })?;
            let vocab = Vocabulary::load(vocab_path)?;
            let model = LktModel::<S>::load(ckpt)?;
            let proto = match protocol {
                "masked15" => LktEvalProtocol::Masked {
                    rate: mask_rate,
                    seed: seed_value,
                },
                _ => LktEvalProtocol::Targets,
            };
            let pairs = evaluate_lkt(&model, &eval_log, &vocab, proto)?;
            EvalReport::from_pairs("lkt", format!("eval:{split}:{protocol}"), seed_value, &pairs)?
        }
        Some("dkt") => {
            let model = DktModel::<S>::load(ckpt)?;
            let pairs = evaluate_dkt(&model, &eval_log, UnseenQuestionPolicy::Sentinel)?;
            EvalReport::from_pairs("dkt", format!("eval:{split}:sequential"), seed_value, &pairs)?
        }
        other => {
            return Err(Error::CheckpointFormat(format!(
                "unknown checkpoint kind {other:?}"
            )))
        }
    };
    append_reports_jsonl(reports_path, std::slice::from_ref(&report))?;
    print_reports(std::slice::from_ref(&report));
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_coldstart<S: Scalar>(
    ckpt: &Path,
    vocab_path: &Path,
    target_data: &Path,
    fractions: &[f64],
    test_fraction: f64,
    dkt_hidden: usize,
    ft_epochs: usize,
    ft_lr: f64,
    dkt_epochs: usize,
    dkt_lr: f64,
    seed_value: u64,
    reports_path: &Path,
) -> Result<()> {
    let vocab = Vocabulary::load(vocab_path)?;
    let target_log = load_interactions(target_data)?;
    let pretrained = LktModel::<S>::load(ckpt)?;
    let lkt_cfg = TrainConfig {
        max_epochs: ft_epochs,
        patience: ft_epochs,
        peak_lr: ft_lr,
        warmup_steps: 0,
        seed: seed_value,
        ..TrainConfig::default()
    };
    let dkt_cfg = TrainConfig {
        max_epochs: dkt_epochs,
        patience: dkt_epochs.min(10),
        peak_lr: dkt_lr,
        warmup_steps: 0,
        seed: seed_value,
        ..TrainConfig::default()
    };
    let reports = coldstart_fraction_sweep(
        &pretrained,
        &target_log,
        &vocab,
        fractions,
        dkt_hidden,
        &lkt_cfg,
        &dkt_cfg,
        test_fraction,
        seed_value,
    )?;
    append_reports_jsonl(reports_path, &reports)?;
    print_reports(&reports);
    Ok(())
}

fn cmd_seqlen<S: Scalar>(
    ckpt: &Path,
    vocab_path: &Path,
    data: &Path,
    buckets: &[usize],
    seed_value: u64,
    reports_path: &Path,
) -> Result<()> {
    let vocab = Vocabulary::load(vocab_path)?;
    let log = load_interactions(data)?;
    let model = LktModel::<S>::load(ckpt)?;
    let reports = seq_length_buckets(&model, &log, &vocab, buckets, seed_value)?;
    append_reports_jsonl(reports_path, &reports)?;
    print_reports(&reports);
    Ok(())
}

fn cmd_zeroshot<S: Scalar>(
    lkt_ckpt: &Path,
    dkt_ckpt: &Path,
    vocab_path: &Path,
    target_data: &Path,
    seed_value: u64,
    reports_path: &Path,
) -> Result<()> {
    let vocab = Vocabulary::load(vocab_path)?;
    let target_log = load_interactions(target_data)?;
    let lkt_model = LktModel::<S>::load(lkt_ckpt)?;
    let dkt_model = DktModel::<S>::load(dkt_ckpt)?;
    let (lkt_report, dkt_report) =
        zero_shot_eval(&lkt_model, &dkt_model, &target_log, &vocab, seed_value)?;
    let reports = vec![lkt_report, dkt_report];
    append_reports_jsonl(reports_path, &reports)?;
    print_reports(&reports);
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_explain<S: Scalar>(
    ckpt: &Path,
    vocab_path: &Path,
    data: &Path,
    student: &str,
    interaction: Option<usize>,
    samples: usize,
    seed_value: u64,
    out: Option<&Path>,
    attention_layer: usize,
    attention_head: usize,
) -> Result<()> {
    let vocab = Vocabulary::load(vocab_path)?;
    let log = load_interactions(data)?;
    let model = LktModel::<S>::load(ckpt)?;
    let records = log
        .records_of(student)
        .ok_or_else(|| Error::DataValidation(format!("no student {student} in {}", data.display())))?;
    let target = interaction.unwrap_or(records.len() - 1);
    if target >= records.len() {
        return Err(Error::IndexOutOfRange {
            index: target,
            bound: records.len(),
        });
    }
    let seq = dataset::format_lkt_sequence(records, &vocab)?;
    let qids: Vec<String> = records.iter().map(|r| r.question_id.clone()).collect();
    let windows = dataset::window_sequence(&seq, &qids, model.config.max_len)?;
    let window = windows
        .iter()
        .find(|w| {
            target >= w.first_interaction && target < w.first_interaction + w.interaction_count()
        })
        .expect("windows cover all interactions");
    let example = dataset::mask_single(window, target - window.first_interaction)?;
    let mask_pos = example.mask_positions[0];

    let explanation = lime_explain(
        model_scorer(&model, mask_pos),
        &example.token_ids,
        mask_pos,
        &vocab,
        samples,
        None,
        seed_value,
    )?;
    let attention = mean_attention(
        &model,
        &example.token_ids,
        attention_layer,
        attention_head,
        &vocab,
    )?;

    let payload = serde_json::json!({
        "student": student,
        "interaction": target,
        "label": example.labels[0],
        "explanation": explanation,
        "attention": attention,
    });
    if let Some(out) = out {
        std::fs::write(out, serde_json::to_string_pretty(&payload)?)?;
    }

    let mut ranked: Vec<(f64, &str)> = explanation
        .weights
        .iter()
        .zip(&explanation.tokens)
        .map(|(&w, t)| (w, t.as_str()))
        .collect();
    ranked.sort_by(|a, b| b.0.abs().partial_cmp(&a.0.abs()).expect("finite weights"));
    let top: Vec<String> = ranked
        .iter()
        .take(5)
        .map(|(w, t)| format!("{t}:{w:+.3}"))
        .collect();
    println!(
        "explain {student}@{target}: r2 {:.3} top [{}]{}",
        explanation.r_squared,
        top.join(", "),
        out.map_or(String::new(), |o| format!(" -> {}", o.display()))
    );
    Ok(())
}

fn cmd_export<S: Scalar>(
    ckpt: &Path,
    vocab_path: &Path,
    data: &Path,
    out: &Path,
    rule: &str,
    mask_rate: f64,
    seed_value: u64,
) -> Result<()> {
    let vocab = Vocabulary::load(vocab_path)?;
    let log = load_interactions(data)?;
    let model = LktModel::<S>::load(ckpt)?;
    let rule: PositionRule = rule.parse()?;
    let sequences = build_windowed_sequences(&log, &vocab, model.config.max_len)?;
    let examples: Result<Vec<_>> = sequences
        .iter()
        .enumerate()
        .map(|(i, s)| dataset::mask_responses(s, mask_rate, seed::derive(seed_value, &[70, i as u64])))
        .collect();
    let rows = interpret::export_embeddings(&model, &examples?, rule)?;
    interpret::write_embeddings_csv(out, &rows)?;
    println!(
        "export-embeddings: {} rows x {} cols -> {}",
        rows.len(),
        rows.first().map_or(0, |r| r.vector.len() + 2),
        out.display()
    );
    Ok(())
}
