//! Command-line interface: train, eval, ablate, export-attention, synth.
//!
//! A dataset directory holds `train.jsonl`, `val.jsonl`, and `features/` with
//! one `.saaf` file per image. Exit codes: 0 success, 1 partial failure
//! (some work completed or failed mid-run), 2 fatal configuration error
//! (nothing could start).

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::ablation::AblationSuite;
use crate::checkpoint::load_checkpoint;
use crate::config::TrainConfig;
use crate::dataset::{read_records, QuestionRecord};
use crate::error::{Error, Result};
use crate::evaluator;
use crate::export;
use crate::features::{self, load_feature_map, FeatureSet};
use crate::model::Model;
use crate::synth::{self, SynthSpec};
use crate::trainer::{self, AdamState};

pub const EXIT_OK: i32 = 0;
pub const EXIT_PARTIAL: i32 = 1;
pub const EXIT_FATAL: i32 = 2;

/// Training runs in f32; checkpoints store f32 blobs, so save/resume
/// round-trips are bit-exact.
type P = f32;

#[derive(Debug, Parser)]
#[command(
    name = "vqa",
    version,
    about = "Attention-based VQA: train, evaluate, ablate"
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Debug, Parser)]
pub struct CommonArgs {
    /// Master RNG seed; overrides the config file's seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Dataset directory holding train.jsonl, val.jsonl, features/.
    #[arg(long, global = true)]
    pub data_dir: Option<PathBuf>,
    /// Where checkpoints, reports, and exports are written.
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    /// Configuration file (key = value lines); defaults to the reference recipe.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model; writes milestone checkpoints and metrics.csv.
    Train,
    /// Evaluate a checkpoint on val.jsonl; writes report.txt and report.json.
    Eval {
        /// Checkpoint to evaluate.
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Train every ablation variant; writes ablation.csv.
    Ablate {
        /// File of variant names, one per line; defaults to all 24 rows.
        #[arg(long)]
        variants: Option<PathBuf>,
    },
    /// Export per-glimpse attention grids (CSV + PGM) and top-5 answers.
    ExportAttention {
        /// Checkpoint to visualize.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Question ids to export.
        #[arg(required = true)]
        question_ids: Vec<u64>,
    },
    /// Generate the planted synthetic dataset into the data directory.
    Synth {
        /// Number of examples (also the number of images).
        #[arg(long, default_value_t = 32)]
        n: usize,
        #[arg(long, default_value_t = 4)]
        grid_h: usize,
        #[arg(long, default_value_t = 4)]
        grid_w: usize,
        /// Feature depth per cell.
        #[arg(long, default_value_t = 8)]
        depth: usize,
        /// Question vocabulary budget including <unk>.
        #[arg(long, default_value_t = 20)]
        vocab_q: usize,
        /// Number of planted answer classes.
        #[arg(long, default_value_t = 6)]
        m: usize,
    },
}

/// Parse `std::env::args` and dispatch; returns the process exit code.
pub fn run() -> i32 {
    let cli = Cli::parse();
    dispatch(cli)
}

fn dispatch(cli: Cli) -> i32 {
    match cli.command {
        Command::Train => cmd_train(&cli.common),
        Command::Eval { checkpoint } => cmd_eval(&cli.common, &checkpoint),
        Command::Ablate { variants } => cmd_ablate(&cli.common, variants.as_deref()),
        Command::ExportAttention {
            checkpoint,
            question_ids,
        } => cmd_export_attention(&cli.common, &checkpoint, &question_ids),
        Command::Synth {
            n,
            grid_h,
            grid_w,
            depth,
            vocab_q,
            m,
        } => {
            let spec = SynthSpec {
                n,
                grid_h,
                grid_w,
                depth,
                vocab_q,
                m,
                seed: 0,
            };
            cmd_synth(&cli.common, spec)
        }
    }
}

fn fatal(e: &Error) -> i32 {
    eprintln!("error: {e}");
    EXIT_FATAL
}

fn partial(e: &Error) -> i32 {
    eprintln!("error: {e}");
    EXIT_PARTIAL
}

/// Everything a training or sweep run needs, loaded and checked up front.
struct LoadedData {
    train: Vec<QuestionRecord>,
    val: Vec<QuestionRecord>,
    raw_features: FeatureSet<P>,
    raw_depth: usize,
}

fn require<'a, T>(opt: &'a Option<T>, flag: &str) -> Result<&'a T> {
    opt.as_ref()
        .ok_or_else(|| Error::Config(format!("--{flag} is required for this command")))
}

fn load_config(common: &CommonArgs) -> Result<TrainConfig> {
    let mut cfg = match &common.config {
        Some(path) => TrainConfig::from_file(path)?,
        None => TrainConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_data(data_dir: &Path, val_required: bool) -> Result<LoadedData> {
    let train_path = data_dir.join("train.jsonl");
    if !train_path.is_file() {
        return Err(Error::Config(format!(
            "missing train records: {}",
            train_path.display()
        )));
    }
    let train = read_records(&train_path)?;
    let val_path = data_dir.join("val.jsonl");
    let val = if val_path.is_file() {
        read_records(&val_path)?
    } else if val_required {
        return Err(Error::Config(format!(
            "missing val records: {}",
            val_path.display()
        )));
    } else {
        Vec::new()
    };
    let raw_features = load_features(data_dir)?;
    let raw_depth = features::feature_depth(&raw_features)?;
    Ok(LoadedData {
        train,
        val,
        raw_features,
        raw_depth,
    })
}

fn load_features(data_dir: &Path) -> Result<FeatureSet<P>> {
    let dir = data_dir.join("features");
    if !dir.is_dir() {
        return Err(Error::Config(format!(
            "feature directory {} does not exist",
            dir.display()
        )));
    }
    let mut paths: Vec<PathBuf> = std::fs::read_dir(&dir)?
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|e| e == "saaf"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Config(format!(
            "no .saaf feature files in {}",
            dir.display()
        )));
    }
    let mut set = FeatureSet::new();
    for p in &paths {
        let fm = load_feature_map::<P>(p)?;
        set.insert(fm.image_id(), fm);
    }
    Ok(set)
}

fn ensure_out_dir(common: &CommonArgs) -> Result<PathBuf> {
    let dir = require(&common.out_dir, "out-dir")?;
    std::fs::create_dir_all(dir)?;
    Ok(dir.clone())
}

/// Build the model for `cfg`, preprocess features once, and hand both back.
fn prepare_model(cfg: TrainConfig, data: &LoadedData) -> Result<(Model<P>, FeatureSet<P>)> {
    let model = Model::build(cfg, &data.train, data.raw_depth)?;
    let features = model.preprocess_set(&data.raw_features)?;
    Ok((model, features))
}

pub fn cmd_train(common: &CommonArgs) -> i32 {
    let setup = (|| -> Result<_> {
        let cfg = load_config(common)?;
        let data_dir = require(&common.data_dir, "data-dir")?;
        let data = load_data(data_dir, false)?;
        let out_dir = ensure_out_dir(common)?;
        let (model, features) = prepare_model(cfg, &data)?;
        Ok((data, out_dir, model, features))
    })();
    let (data, out_dir, mut model, features) = match setup {
        Ok(s) => s,
        Err(e) => return fatal(&e),
    };

    let mut adam = AdamState::new();
    let rows = match trainer::train(
        &mut model,
        &mut adam,
        &data.train,
        &data.val,
        &features,
        0,
        Some(&out_dir),
    ) {
        Ok(rows) => rows,
        Err(e) => return partial(&e),
    };
    let metrics_path = out_dir.join("metrics.csv");
    if let Err(e) = std::fs::write(&metrics_path, trainer::metrics_csv(&rows)) {
        return partial(&e.into());
    }
    if let Some(last) = rows.last() {
        println!(
            "trained {} steps, final loss {:.6}",
            rows.len(),
            last.train_loss
        );
    }
    println!(
        "checkpoint: {}",
        out_dir.join(trainer::FINAL_CHECKPOINT).display()
    );
    println!("metrics: {}", metrics_path.display());
    EXIT_OK
}

pub fn cmd_eval(common: &CommonArgs, checkpoint: &Path) -> i32 {
    let setup = (|| -> Result<_> {
        let ckpt = load_checkpoint(checkpoint)?;
        let data_dir = require(&common.data_dir, "data-dir")?;
        let data = load_data(data_dir, true)?;
        let out_dir = ensure_out_dir(common)?;
        let (mut model, features) = prepare_model(ckpt.config.clone(), &data)?;
        trainer::restore(&ckpt, &mut model)?;
        Ok((data, out_dir, model, features))
    })();
    let (data, out_dir, model, features) = match setup {
        Ok(s) => s,
        Err(e) => return fatal(&e),
    };

    let report = match evaluator::evaluate(&model, &data.val, &features) {
        Ok(r) => r,
        Err(e) => return partial(&e),
    };
    let result = (|| -> Result<()> {
        std::fs::write(out_dir.join("report.txt"), report.table())?;
        std::fs::write(out_dir.join("report.json"), report.to_json()?)?;
        Ok(())
    })();
    if let Err(e) = result {
        return partial(&e);
    }
    print!("{}", report.table());
    println!("report: {}", out_dir.join("report.json").display());
    EXIT_OK
}

pub fn cmd_ablate(common: &CommonArgs, variants: Option<&Path>) -> i32 {
    let setup = (|| -> Result<_> {
        let cfg = load_config(common)?;
        let suite = match variants {
            Some(path) => {
                let names = read_variant_names(path)?;
                AblationSuite::from_names(cfg, &names)?
            }
            None => AblationSuite::full(cfg),
        };
        let data_dir = require(&common.data_dir, "data-dir")?;
        let data = load_data(data_dir, false)?;
        let out_dir = ensure_out_dir(common)?;
        Ok((suite, data, out_dir))
    })();
    let (suite, data, out_dir) = match setup {
        Ok(s) => s,
        Err(e) => return fatal(&e),
    };

    let table = match crate::ablation::run_suite(&suite, &data.train, &data.val, &data.raw_features)
    {
        Ok(t) => t,
        Err(e) => return partial(&e),
    };
    let csv = table.csv();
    if let Err(e) = std::fs::write(out_dir.join("ablation.csv"), &csv) {
        return partial(&e.into());
    }
    print!("{csv}");
    let failures = table.failures();
    for f in &failures {
        eprintln!("variant failed: {f}");
    }
    if failures.is_empty() {
        EXIT_OK
    } else {
        EXIT_PARTIAL
    }
}

/// Variant names from a file, one per line; `#` comments and blanks skipped.
fn read_variant_names(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read variants file {}: {e}", path.display())))?;
    Ok(text
        .lines()
        .map(|l| l.split('#').next().unwrap_or("").trim())
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect())
}

pub fn cmd_export_attention(common: &CommonArgs, checkpoint: &Path, question_ids: &[u64]) -> i32 {
    let setup = (|| -> Result<_> {
        let ckpt = load_checkpoint(checkpoint)?;
        let data_dir = require(&common.data_dir, "data-dir")?;
        let data = load_data(data_dir, false)?;
        let out_dir = ensure_out_dir(common)?;
        let (mut model, features) = prepare_model(ckpt.config.clone(), &data)?;
        trainer::restore(&ckpt, &mut model)?;
        Ok((data, out_dir, model, features))
    })();
    let (data, out_dir, model, features) = match setup {
        Ok(s) => s,
        Err(e) => return fatal(&e),
    };

    // Questions may come from either split; train first, then val.
    let mut records = data.train;
    records.extend(data.val);
    let outcome =
        match export::export_attention(&model, &records, question_ids, &features, &out_dir) {
            Ok(o) => o,
            Err(e) => return partial(&e),
        };
    println!(
        "wrote {} files to {}",
        outcome.written.len(),
        out_dir.display()
    );
    for (qid, reason) in &outcome.failures {
        eprintln!("question {qid}: {reason}");
    }
    if outcome.failures.is_empty() {
        EXIT_OK
    } else {
        EXIT_PARTIAL
    }
}

pub fn cmd_synth(common: &CommonArgs, mut spec: SynthSpec) -> i32 {
    if let Some(seed) = common.seed {
        spec.seed = seed;
    }
    let result = (|| -> Result<PathBuf> {
        spec.validate()?;
        let dir = require(&common.data_dir, "data-dir")?;
        synth::write_dataset(&spec, dir)?;
        Ok(dir.clone())
    })();
    match result {
        Ok(dir) => {
            println!(
                "wrote {} records and {} feature files to {}",
                spec.n,
                spec.n,
                dir.display()
            );
            EXIT_OK
        }
        Err(e) => fatal(&e),
    }
}
