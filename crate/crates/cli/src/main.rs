//! `lenikit` command-line driver.
//!
//! Exit codes: 0 success, 1 config/shape/parameter error, 2 data/format/io
//! error, 3 numerical error. Messages go to standard error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lenikit::analysis::gradcheck::TOLERANCE;
use lenikit::analysis::{
    activation_histogram, check_all, check_op, dump_feature_maps, param_table, param_table_csv, GradCheckReport,
};
use lenikit::experiment::{experiment_from_meta, run_training};
use lenikit::train::{evaluate, load_checkpoint, Dataset};
use lenikit::{Error, ErrorClass, ExperimentConfig, Model, ModelConfig, Result};

#[derive(Parser)]
#[command(name = "lenikit", version, about = "Train and analyse CNNs with LENI activation blocks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes training_log.csv, model.ck and resolved_config.json.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `train.seed`.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Compare analytic gradients with central finite differences.
    Gradcheck {
        #[arg(long, conflicts_with = "all")]
        op: Option<String>,
        /// Every registered op (the default).
        #[arg(long)]
        all: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Pre/post-activation histograms of one activation layer.
    Histogram {
        #[command(flatten)]
        source: Source,
        /// Activation layer index; defaults to `analysis.layer`.
        #[arg(long)]
        layer: Option<usize>,
        /// Defaults to `analysis.bins`.
        #[arg(long)]
        bins: Option<usize>,
        /// Test images fed through the model.
        #[arg(long, default_value_t = 256)]
        images: usize,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Write pre/post feature maps of one activation layer as PGM images.
    DumpFeatures {
        #[command(flatten)]
        source: Source,
        #[arg(long)]
        layer: Option<usize>,
        /// Defaults to `analysis.images`.
        #[arg(long)]
        images: Option<usize>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Parameter counts and deltas against the first config.
    Params {
        /// Experiment or bare model config; repeatable.
        #[arg(long = "config", required = true)]
        configs: Vec<PathBuf>,
        /// Write params.csv here instead of printing it.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Accuracy of a checkpoint on the train or test split.
    Eval {
        #[command(flatten)]
        source: Source,
        #[arg(long, value_enum, default_value = "test")]
        dataset: Split,
    },
}

#[derive(Args)]
struct Source {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Experiment config for the dataset; defaults to the one stored in the checkpoint.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum Split {
    Train,
    Test,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match lenikit::init_threads().and_then(|_| run(cli.command)) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.class() {
                ErrorClass::Config => 1,
                ErrorClass::Data => 2,
                ErrorClass::Numerical => 3,
            })
        }
    }
}

fn run(command: Command) -> Result<ExitCode> {
    match command {
        Command::Train { config, seed, out } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(seed) = seed {
                cfg.train.seed = seed;
            }
            let artifacts = run_training(&cfg, &out, |r| {
                eprintln!(
                    "epoch {} lr {} train_loss {:.5} test_acc {:.4}",
                    r.epoch, r.lr, r.train_loss, r.test_acc
                )
            })?;
            println!("{}", artifacts.log_path.display());
            println!("{}", artifacts.checkpoint_path.display());
            println!("{}", artifacts.config_path.display());
        }
        Command::Gradcheck { op, all: _, seed } => {
            let reports = match op {
                Some(name) => vec![check_op(&name, seed)?],
                None => check_all(seed)?,
            };
            print_gradcheck(&reports);
            if reports.iter().any(|r| !r.passes(TOLERANCE)) {
                return Ok(ExitCode::from(3));
            }
        }
        Command::Histogram {
            source,
            layer,
            bins,
            images,
            out,
        } => {
            let (mut model, cfg) = open(&source)?;
            let layer = layer.unwrap_or(cfg.analysis.layer);
            let bins = bins.unwrap_or(cfg.analysis.bins);
            let x = test_images(&cfg, images)?;
            let (pre, post) = activation_histogram(&mut model, layer, &x, bins)?;
            create_dir(&out)?;
            for r in [&pre, &post] {
                let path = out.join(format!("hist_layer{layer}_{}.csv", r.stage));
                write(&path, r.to_csv().as_bytes())?;
                println!(
                    "{} zero_fraction={} entropy_bits={}",
                    path.display(),
                    r.zero_fraction,
                    r.entropy_bits
                );
            }
        }
        Command::DumpFeatures {
            source,
            layer,
            images,
            out,
        } => {
            let (mut model, cfg) = open(&source)?;
            let layer = layer.unwrap_or(cfg.analysis.layer);
            let x = test_images(&cfg, images.unwrap_or(cfg.analysis.images))?;
            let written = dump_feature_maps(&mut model, layer, &x, &out)?;
            println!("wrote {} images to {}", written.len(), out.display());
        }
        Command::Params { configs, out } => {
            let models = configs
                .iter()
                .map(|p| Ok((stem(p), model_config(p)?)))
                .collect::<Result<Vec<_>>>()?;
            let csv = param_table_csv(&param_table(&models)?);
            match out {
                Some(dir) => {
                    create_dir(&dir)?;
                    let path = dir.join("params.csv");
                    write(&path, csv.as_bytes())?;
                    println!("{}", path.display());
                }
                None => print!("{csv}"),
            }
        }
        Command::Eval { source, dataset } => {
            let (mut model, cfg) = open(&source)?;
            let ds = match dataset {
                Split::Train => cfg.dataset.load_train()?,
                Split::Test => cfg.dataset.load_test()?,
            };
            println!("accuracy={}", evaluate(&mut model, &ds)?);
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn print_gradcheck(reports: &[GradCheckReport]) {
    println!("{:<26} {:>8} {:>8} {:>12}  status", "op", "checked", "skipped", "max_rel_err");
    for r in reports {
        println!(
            "{:<26} {:>8} {:>8} {:>12.3e}  {}",
            r.op,
            r.checked,
            r.skipped,
            r.max_rel_error,
            if r.passes(TOLERANCE) { "ok" } else { "FAIL" }
        );
    }
}

/// Checkpoint plus the experiment describing its data: `--config` if given,
/// otherwise the copy stored in the checkpoint.
fn open(source: &Source) -> Result<(Model, ExperimentConfig)> {
    let (model, meta) = load_checkpoint(&source.checkpoint)?;
    let cfg = match &source.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => experiment_from_meta(&meta)?.ok_or_else(|| {
            Error::Config(format!(
                "{} carries no experiment config; pass --config",
                source.checkpoint.display()
            ))
        })?,
    };
    if &cfg.model != model.config() {
        return Err(Error::Config("--config model section does not match the checkpoint".into()));
    }
    Ok((model, cfg))
}

fn test_images(cfg: &ExperimentConfig, n: usize) -> Result<lenikit::Tensor> {
    let mut ds: Dataset = cfg.dataset.load_test()?;
    if n < ds.len() {
        ds.truncate(n)?;
    }
    let all: Vec<usize> = (0..ds.len()).collect();
    Ok(ds.batch(&all)?.0)
}

/// Accepts a full experiment config or a bare model config.
fn model_config(path: &Path) -> Result<ModelConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    if value.get("model").is_some() {
        return Ok(ExperimentConfig::from_json(&text)?.model);
    }
    let cfg: ModelConfig = serde_json::from_value(value).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    cfg.validate()?;
    Ok(cfg)
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map_or_else(|| path.display().to_string(), |s| s.to_string_lossy().into_owned())
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
