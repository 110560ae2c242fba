//! Command implementations behind the `reportgen` binary.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use reportgen::autodiff::{Fault, Graph};
use reportgen::config::{
    DecoderConfig, EncoderConfig, EncoderKind, GenerationConfig, ModelConfig, Pool, RunConfig,
};
use reportgen::data::{self, Split, SyntheticCase, IMAGE_SIZE};
use reportgen::gradcheck::{grad_check, GradCheckReport};
use reportgen::metrics::{
    align_by_id, evaluate_corpus, format_table, read_jsonl, write_jsonl, FindingLabel, MetricReport, ReportRecord,
};
use reportgen::model::Model;
use reportgen::params::ParamStore;
use reportgen::tensor::Tensor;
use reportgen::tokenizer::Vocabulary;
use reportgen::training::{evaluate_loss, history_csv, train, write_metadata, Example, HistoryRow};
use reportgen::{Error, Result};

pub const SEED_ENV: &str = "REPORTGEN_SEED";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const META_FILE: &str = "model.meta";
pub const CONFIG_FILE: &str = "config.json";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const HISTORY_FILE: &str = "history.csv";
pub const METRICS_FILE: &str = "metrics.json";
pub const TABLE_FILE: &str = "table.txt";
pub const GRADCHECK_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Parser)]
#[command(name = "reportgen", version, about = "Scan-to-report generation pipeline")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset.
    GenerateData {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write a checkpoint directory.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Decode reports for one split of a dataset.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        beam: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score generated reports against ground truth.
    Evaluate {
        #[arg(long)]
        generated: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        /// Directory receiving metrics.json and table.txt.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of every parameter group of a micro model.
    Gradcheck {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, hide = true)]
        fault_matmul_scale: Option<f64>,
    },
    /// Train and score the pyramid and baseline encoders under one budget.
    Compare {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Process exit status for an error: 3 for numeric aborts, 2 otherwise.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::NonFinite { .. } => 3,
        _ => 2,
    }
}

/// Reads a config file (or the default profile) and applies the seed
/// override from the environment.
pub fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::from_json(&fs::read_to_string(p).map_err(|e| io_error(p, e))?)?,
        None => RunConfig::default(),
    };
    if let Ok(v) = std::env::var(SEED_ENV) {
        cfg.train.seed = v
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("{SEED_ENV}=`{v}` is not an unsigned integer")))?;
    }
    Ok(cfg)
}

fn io_error(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn require_path(flag: Option<PathBuf>, fallback: &Option<String>, name: &str) -> Result<PathBuf> {
    flag.or_else(|| fallback.as_ref().map(PathBuf::from))
        .ok_or_else(|| Error::Config(format!("no {name} path given on the command line or in the config")))
}

fn require_dir(path: &Path) -> Result<()> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(Error::Config(format!("{} is not a directory", path.display())))
    }
}

fn to_examples(cases: &[SyntheticCase], vocab: &Vocabulary, max_len: usize) -> Result<Vec<Example>> {
    cases
        .iter()
        .map(|c| {
            Ok(Example {
                id: c.id.clone(),
                image: c.image.clone(),
                tokens: vocab.encode(&c.report, max_len)?,
                labels: c.labels.iter().copied().collect(),
            })
        })
        .collect()
}

pub struct TrainSummary {
    pub history: Vec<HistoryRow>,
    pub best_epoch: usize,
    pub stopped_early: bool,
    /// Dropout-free cross-entropy of the saved parameters on the training split.
    pub train_cross_entropy: f64,
}

/// Trains on the `train` split (validating on `val`) and writes the
/// checkpoint directory `out`.
pub fn run_train(cfg: &RunConfig, data_dir: &Path, out: &Path, mut log: impl FnMut(&str)) -> Result<TrainSummary> {
    require_dir(data_dir)?;
    let train_cases = data::load_split(data_dir, Split::Train)?;
    let val_cases = data::load_split(data_dir, Split::Val)?;
    let reports: Vec<&str> = train_cases.iter().map(|c| c.report.as_str()).collect();
    let vocab = Vocabulary::build(&reports, 1)?;
    let model = Model::new(&cfg.model, vocab.len(), IMAGE_SIZE)?;
    let max_len = cfg.model.decoder.max_len + 1;
    let train_set = to_examples(&train_cases, &vocab, max_len)?;
    let val_set = to_examples(&val_cases, &vocab, max_len)?;
    let params = model.init_params(cfg.train.seed);
    log(&format!(
        "training {} on {} cases ({} parameters, vocabulary {})",
        cfg.model.encoder_kind.label(),
        train_set.len(),
        params.numel(),
        vocab.len()
    ));
    let outcome = train(&model, params, &train_set, &val_set, &cfg.train, |r| {
        log(&format!(
            "epoch {:>3}  train_loss {:.6}  val_loss {:.6}  lr {:.3e}",
            r.epoch, r.train_loss, r.val_loss, r.lr
        ))
    })?;
    let train_ce = evaluate_loss(&model, &outcome.best_params, &train_set)?;
    fs::create_dir_all(out).map_err(|e| io_error(out, e))?;
    outcome.best_params.save(&out.join(CHECKPOINT_FILE))?;
    vocab.save(&out.join(VOCAB_FILE))?;
    let cfg_path = out.join(CONFIG_FILE);
    fs::write(&cfg_path, cfg.to_json() + "\n").map_err(|e| io_error(&cfg_path, e))?;
    let hist_path = out.join(HISTORY_FILE);
    fs::write(&hist_path, history_csv(&outcome.history)).map_err(|e| io_error(&hist_path, e))?;
    let best_val = outcome.history.get(outcome.best_epoch.saturating_sub(1)).map_or(f64::NAN, |r| r.val_loss);
    write_metadata(
        &out.join(META_FILE),
        &[
            ("format", "1".into()),
            ("encoder", cfg.model.encoder_kind.label().into()),
            ("vocab_size", vocab.len().to_string()),
            ("image_size", IMAGE_SIZE.to_string()),
            ("parameters", outcome.best_params.numel().to_string()),
            ("seed", cfg.train.seed.to_string()),
            ("epochs_run", outcome.history.len().to_string()),
            ("best_epoch", outcome.best_epoch.to_string()),
            ("best_val_loss", format!("{best_val:.12e}")),
            ("train_cross_entropy", format!("{train_ce:.12e}")),
            ("stopped_early", outcome.stopped_early.to_string()),
        ],
    )?;
    Ok(TrainSummary {
        history: outcome.history,
        best_epoch: outcome.best_epoch,
        stopped_early: outcome.stopped_early,
        train_cross_entropy: train_ce,
    })
}

/// A trained model together with the files saved beside it.
pub struct Checkpoint {
    pub config: RunConfig,
    pub vocab: Vocabulary,
    pub model: Model,
    pub params: ParamStore,
}

/// Loads `model.ckpt` (or a directory containing it) with its sibling
/// config and vocabulary, and checks that they describe the same model.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let (dir, ckpt) = if path.is_dir() {
        (path.to_path_buf(), path.join(CHECKPOINT_FILE))
    } else {
        (path.parent().unwrap_or(Path::new(".")).to_path_buf(), path.to_path_buf())
    };
    let cfg_path = dir.join(CONFIG_FILE);
    let config = RunConfig::from_json(&fs::read_to_string(&cfg_path).map_err(|e| io_error(&cfg_path, e))?)?;
    let vocab = Vocabulary::load(&dir.join(VOCAB_FILE))?;
    let model = Model::new(&config.model, vocab.len(), IMAGE_SIZE)?;
    let params = ParamStore::load(&ckpt)?;
    model
        .init_params(0)
        .check_compatible(&params)
        .map_err(|e| Error::Config(format!("checkpoint does not match its config: {e}")))?;
    Ok(Checkpoint {
        config,
        vocab,
        model,
        params,
    })
}

/// Decodes one report per case of `split`, in manifest order.
pub fn generate_reports(ckpt: &Checkpoint, data_dir: &Path, split: Split, beam: Option<usize>) -> Result<Vec<ReportRecord>> {
    let gen = GenerationConfig {
        beam: beam.unwrap_or(ckpt.config.generation.beam),
        ..ckpt.config.generation.clone()
    };
    if gen.beam == 0 {
        return Err(Error::Config("beam width must be at least 1".into()));
    }
    data::load_split(data_dir, split)?
        .iter()
        .map(|c| {
            let h = ckpt.model.generate(&ckpt.params, &c.image, &gen)?;
            Ok(ReportRecord {
                id: c.id.clone(),
                report: ckpt.vocab.decode(&h.tokens)?,
                labels: None,
            })
        })
        .collect()
}

/// Ground-truth records of a split, as stored in the dataset.
pub fn truth_records(data_dir: &Path, split: Split) -> Result<Vec<ReportRecord>> {
    Ok(data::load_split(data_dir, split)?
        .into_iter()
        .map(|c| ReportRecord {
            id: c.id,
            report: c.report,
            labels: Some(c.labels.into_iter().collect::<Vec<FindingLabel>>()),
        })
        .collect())
}

pub fn evaluate_records(generated: &[ReportRecord], truth: &[ReportRecord]) -> Result<MetricReport> {
    let (g, t) = align_by_id(generated, truth)?;
    evaluate_corpus(&g, &t)
}

fn write_report(dir: &Path, report: &serde_json::Value, table: &str) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
    let json_path = dir.join(METRICS_FILE);
    fs::write(&json_path, serde_json::to_string_pretty(report)? + "\n").map_err(|e| io_error(&json_path, e))?;
    let table_path = dir.join(TABLE_FILE);
    fs::write(&table_path, table).map_err(|e| io_error(&table_path, e))
}

/// The fixed micro model used by `gradcheck`.
pub fn micro_model_config(kind: EncoderKind) -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            scales: vec![1.0, 0.5],
            channels: 2,
            extract_blocks: 1,
            bifpn_depth: 1,
            pool: Pool::Grid(2),
            ..EncoderConfig::default()
        },
        decoder: DecoderConfig {
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            max_len: 12,
            dropout: 0.0,
            finding_probe: true,
            ..DecoderConfig::default()
        },
        encoder_kind: kind,
    }
}

/// Gradient check of every parameter group of the micro model on a fixed
/// example. `fault` corrupts a backward rule on purpose.
pub fn run_gradcheck(kind: EncoderKind, seed: u64, fault: Option<Fault>) -> Result<GradCheckReport> {
    let model = Model::new(&micro_model_config(kind), 9, 12)?;
    let params = model.init_params(seed);
    let image = Tensor::new(
        vec![1, 12, 12],
        (0..144).map(|i| ((i * 37 + 11) % 23) as f64 / 23.0).collect(),
    )?;
    let tokens = [1, 5, 6, 4, 7, 2];
    let labels = [FindingLabel::Subdural];
    grad_check(
        &params,
        |g: &mut Graph| {
            g.set_fault(fault);
            Ok(model.example_loss(g, &image, &tokens, &labels, 0.5)?.0)
        },
        1e-5,
    )
}

pub struct CompareRow {
    pub label: &'static str,
    pub report: MetricReport,
    pub ids: Vec<String>,
}

/// Trains both encoders with the same config and seed, then scores each on
/// the test split. Checkpoints go to `<work>/<label>`.
pub fn run_compare(cfg: &RunConfig, data_dir: &Path, work: &Path, mut log: impl FnMut(&str)) -> Result<Vec<CompareRow>> {
    let truth = truth_records(data_dir, Split::Test)?;
    let mut rows = Vec::new();
    for kind in [EncoderKind::Baseline, EncoderKind::Pyramid] {
        let mut c = cfg.clone();
        c.model.encoder_kind = kind;
        let dir = work.join(kind.label());
        run_train(&c, data_dir, &dir, &mut log)?;
        let ckpt = load_checkpoint(&dir)?;
        let generated = generate_reports(&ckpt, data_dir, Split::Test, None)?;
        rows.push(CompareRow {
            label: kind.label(),
            report: evaluate_records(&generated, &truth)?,
            ids: generated.into_iter().map(|r| r.id).collect(),
        });
    }
    Ok(rows)
}

pub fn compare_table(rows: &[CompareRow]) -> String {
    let pairs: Vec<(&str, &MetricReport)> = rows.iter().map(|r| (r.label, &r.report)).collect();
    format_table(&pairs)
}

/// Runs one command, printing to stdout. Returns the process exit code for
/// outcomes that are not errors (0, or 1 for a failed check).
pub fn run(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::GenerateData { n, seed, out } => {
            let outcome = data::generate_dataset(n, seed, &out)?;
            println!("wrote {} cases to {}", outcome.manifest.count, out.display());
            println!("{}", outcome.manifest.summary());
            let dist: Vec<String> = outcome
                .manifest
                .class_distribution
                .iter()
                .map(|(l, c)| format!("{}={c}", l.name()))
                .collect();
            println!("classes: {}", dist.join(" "));
            if !outcome.changed {
                println!("unchanged (idempotent)");
            }
            Ok(0)
        }
        Command::Train { config, data, out } => {
            let cfg = load_config(config.as_deref())?;
            let data = require_path(data, &cfg.paths.data, "data")?;
            let out = require_path(out, &cfg.paths.out, "output")?;
            let s = run_train(&cfg, &data, &out, |l| println!("{l}"))?;
            let last = s.history.last().expect("at least one epoch");
            println!(
                "final train loss {:.6} (dropout-free {:.6}); best epoch {}{}",
                last.train_loss,
                s.train_cross_entropy,
                s.best_epoch,
                if s.stopped_early { " (stopped early)" } else { "" }
            );
            println!("checkpoint written to {}", out.join(CHECKPOINT_FILE).display());
            Ok(0)
        }
        Command::Generate {
            checkpoint,
            data,
            split,
            beam,
            out,
        } => {
            let split: Split = split.parse()?;
            let ckpt = load_checkpoint(&checkpoint)?;
            let records = generate_reports(&ckpt, &data, split, beam)?;
            if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
                fs::create_dir_all(parent).map_err(|e| io_error(parent, e))?;
            }
            write_jsonl(&out, &records)?;
            println!("wrote {} reports to {}", records.len(), out.display());
            Ok(0)
        }
        Command::Evaluate { generated, truth, out } => {
            let report = evaluate_records(&read_jsonl(&generated)?, &read_jsonl(&truth)?)?;
            let table = format_table(&[("model", &report)]);
            print!("{table}");
            if let Some(dir) = out {
                write_report(&dir, &serde_json::to_value(&report)?, &table)?;
            }
            Ok(0)
        }
        Command::Gradcheck {
            config,
            fault_matmul_scale,
        } => {
            let cfg = load_config(config.as_deref())?;
            let report = run_gradcheck(
                cfg.model.encoder_kind,
                cfg.train.seed,
                fault_matmul_scale.map(Fault::MatmulLhsScale),
            )?;
            let mut failed = Vec::new();
            for g in &report.groups {
                let ok = g.max_rel_error < GRADCHECK_TOLERANCE;
                println!(
                    "{:<28} {:>5} entries  max rel error {:.3e}  {}",
                    g.name,
                    g.checked,
                    g.max_rel_error,
                    if ok { "ok" } else { "FAIL" }
                );
                if !ok {
                    failed.push(g.name.as_str());
                }
            }
            if failed.is_empty() {
                println!("all {} groups below {GRADCHECK_TOLERANCE:e}", report.groups.len());
                Ok(0)
            } else {
                println!("gradient check failed for: {}", failed.join(", "));
                Ok(1)
            }
        }
        Command::Compare { config, data, out } => {
            let cfg = load_config(config.as_deref())?;
            let data = require_path(data, &cfg.paths.data, "data")?;
            let work = out
                .or_else(|| cfg.paths.out.as_ref().map(PathBuf::from))
                .unwrap_or_else(|| std::env::temp_dir().join(format!("reportgen-compare-{}", std::process::id())));
            let rows = run_compare(&cfg, &data, &work, |l| println!("{l}"))?;
            let table = compare_table(&rows);
            print!("{table}");
            let json: serde_json::Map<String, serde_json::Value> = rows
                .iter()
                .map(|r| Ok((r.label.to_string(), serde_json::to_value(&r.report)?)))
                .collect::<Result<_>>()?;
            write_report(&work, &serde_json::Value::Object(json), &table)?;
            Ok(0)
        }
    }
}
