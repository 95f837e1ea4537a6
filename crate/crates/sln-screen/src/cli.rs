//! Command-line front end wiring the pipeline end to end.
//!
//! Exit codes: 0 success, 1 validation error, 2 I/O error.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::PipelineSettings;
use crate::corpus::{self, LabelMode, Split, SplitPolicy};
use crate::error::{Error, Result};
use crate::eval;
use crate::fixtures;
use crate::synth;
use crate::trainer;

#[derive(Parser)]
#[command(
    name = "sln-screen",
    version,
    about = "Rapid node-metastasis screen: patch CNN, grouped ranking, 5-patch majority voting, diagnostic statistics"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum PolicyArg {
    Slide,
    Image,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum LabelModeArg {
    Case,
    Slide,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus: images plus a split-assigned manifest
    Generate {
        /// Output directory (created if missing)
        #[arg(long)]
        out: PathBuf,
        /// Master seed for textures and split assignment
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Cases per category code 0..3, comma separated
        #[arg(long, default_value = "10,6,8,10")]
        category_counts: String,
        /// Train,val,test fractions; must land on whole units of the
        /// split granularity
        #[arg(long, default_value = "0.79411764705882353,0.08823529411764706,0.11764705882352941")]
        split_fractions: String,
        /// Split granularity
        #[arg(long, value_enum, default_value_t = PolicyArg::Slide)]
        policy: PolicyArg,
        /// Keep both slides of a case in the same split (slide policy)
        #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
        case_coherent: bool,
        /// Patch label derivation written into the manifest
        #[arg(long, value_enum, default_value_t = LabelModeArg::Case)]
        label_mode: LabelModeArg,
        /// Shuffle case diagnoses with this seed (label-permutation
        /// control; images are unaffected)
        #[arg(long)]
        permute_seed: Option<u64>,
    },
    /// Train a model on a manifest; writes checkpoint.bin, report.csv,
    /// report.txt
    Train {
        #[arg(long)]
        manifest: PathBuf,
        /// Flat key = value overrides of the model/training defaults
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory (created if missing)
        #[arg(long)]
        out: PathBuf,
        /// Override the training seed
        #[arg(long)]
        seed: Option<u64>,
        /// Print the effective configuration and exit
        #[arg(long)]
        dump_config: bool,
    },
    /// Run a checkpoint over one split of a manifest; writes a
    /// predictions CSV
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Split to score: train, val, or test
        #[arg(long, default_value = "test")]
        split: String,
        /// Output CSV path
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a predictions CSV: confusion tables, majority voting, and
    /// diagnostic metrics
    Evaluate {
        #[arg(long)]
        predictions: PathBuf,
        /// Directory for report.txt and metrics.csv (also printed)
        #[arg(long)]
        out: Option<PathBuf>,
        /// Label for this evaluation (defaults to the CSV file stem)
        #[arg(long)]
        user: Option<String>,
    },
    /// Render the bundled reference tables (no model needed)
    Tables {
        /// Read fixture files from DIR instead of the bundled copies
        #[arg(
            long,
            value_name = "DIR",
            num_args = 0..=1,
            require_equals = false,
            default_missing_value = "-"
        )]
        fixtures: Option<PathBuf>,
    },
    /// Combine several evaluations: per-user metric rows plus their means
    Agreement {
        /// metrics.csv files, one per user
        #[arg(required = true)]
        reports: Vec<PathBuf>,
    },
}

/// Parse argv and run; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Generate {
            out,
            seed,
            category_counts,
            split_fractions,
            policy,
            case_coherent,
            label_mode,
            permute_seed,
        } => generate(
            &out,
            seed,
            &category_counts,
            &split_fractions,
            policy,
            case_coherent,
            label_mode,
            permute_seed,
        ),
        Command::Train {
            manifest,
            config,
            out,
            seed,
            dump_config,
        } => train(&manifest, config.as_deref(), &out, seed, dump_config),
        Command::Predict {
            checkpoint,
            manifest,
            split,
            out,
        } => predict(&checkpoint, &manifest, &split, &out),
        Command::Evaluate {
            predictions,
            out,
            user,
        } => evaluate(&predictions, out.as_deref(), user.as_deref()),
        Command::Tables { fixtures } => tables(fixtures.as_deref()),
        Command::Agreement { reports } => agreement(&reports),
    }
}

fn parse_list<T: std::str::FromStr, const N: usize>(flag: &str, value: &str) -> Result<[T; N]> {
    let parts: Vec<&str> = value.split(',').map(str::trim).collect();
    let bad = |reason: String| Error::InvalidConfigValue {
        key: flag.to_string(),
        value: value.to_string(),
        reason,
    };
    if parts.len() != N {
        return Err(bad(format!("expected {N} comma-separated values")));
    }
    let mut parsed = Vec::with_capacity(N);
    for p in parts {
        parsed.push(p.parse::<T>().map_err(|_| bad(format!("unparseable entry {p:?}")))?);
    }
    parsed
        .try_into()
        .map_err(|_| bad("wrong arity".to_string()))
}

#[allow(clippy::too_many_arguments)]
fn generate(
    out: &Path,
    seed: u64,
    category_counts: &str,
    split_fractions: &str,
    policy: PolicyArg,
    case_coherent: bool,
    label_mode: LabelModeArg,
    permute_seed: Option<u64>,
) -> Result<()> {
    let opts = synth::SynthOptions {
        seed,
        category_counts: parse_list::<usize, 4>("--category-counts", category_counts)?,
        split_fractions: parse_list::<f64, 3>("--split-fractions", split_fractions)?,
        policy: match policy {
            PolicyArg::Slide => SplitPolicy::Slide { case_coherent },
            PolicyArg::Image => SplitPolicy::Image,
        },
        label_mode: match label_mode {
            LabelModeArg::Case => LabelMode::Case,
            LabelModeArg::Slide => LabelMode::Slide,
        },
        permute_seed,
    };
    let corpus = synth::generate(out, &opts)?;
    let [train, val, test] = corpus.split_counts();
    println!(
        "generated {} cases / {} slides / {} patches under {}",
        corpus.cases().len(),
        corpus.slides().len(),
        corpus.patches().len(),
        out.display()
    );
    println!("splits: {train} train / {val} val / {test} test");
    println!("manifest: {}", out.join("manifest.jsonl").display());
    Ok(())
}

fn train(
    manifest: &Path,
    config: Option<&Path>,
    out: &Path,
    seed: Option<u64>,
    dump_config: bool,
) -> Result<()> {
    let mut settings = PipelineSettings::default();
    if let Some(path) = config {
        settings.apply_file(path)?;
    }
    if let Some(seed) = seed {
        settings.train.seed = seed;
    }
    if dump_config {
        print!("{}", settings.dump());
        return Ok(());
    }

    let corpus = corpus::load_manifest(manifest)?;
    let outcome = trainer::train(&corpus, &settings.model_config(), &settings.train_config())?;

    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let ckpt_path = out.join("checkpoint.bin");
    save_checkpoint(&outcome.model, &outcome.meta, &ckpt_path)?;
    let csv_path = out.join("report.csv");
    fs::write(&csv_path, outcome.report.to_csv()).map_err(|e| Error::io(&csv_path, e))?;
    let txt_path = out.join("report.txt");
    fs::write(&txt_path, outcome.report.summary()).map_err(|e| Error::io(&txt_path, e))?;

    print!("{}", outcome.report.summary_with_timing());
    println!("checkpoint: {}", ckpt_path.display());
    Ok(())
}

fn predict(checkpoint: &Path, manifest: &Path, split: &str, out: &Path) -> Result<()> {
    let split = Split::parse(split).ok_or_else(|| Error::InvalidConfigValue {
        key: "--split".into(),
        value: split.to_string(),
        reason: "expected train, val, or test".into(),
    })?;
    let (model, _meta) = load_checkpoint(checkpoint)?;
    let corpus = corpus::load_manifest(manifest)?;
    let rows = trainer::evaluate_split(&model, &corpus, split)?;
    fs::write(out, eval::predictions_to_csv(&rows)).map_err(|e| Error::io(out, e))?;
    println!("wrote {} predictions to {}", rows.len(), out.display());
    Ok(())
}

fn evaluate(predictions: &Path, out: Option<&Path>, user: Option<&str>) -> Result<()> {
    let rows = eval::parse_predictions_csv(predictions)?;
    let label = match user {
        Some(u) => u.to_string(),
        None => predictions
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "user".to_string()),
    };
    let report = eval::evaluate_predictions(&label, &rows)?;
    let text = eval::render_report(&report);
    let metrics_csv = eval::metrics_to_csv(&report);
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let report_path = dir.join("report.txt");
        fs::write(&report_path, &text).map_err(|e| Error::io(&report_path, e))?;
        let metrics_path = dir.join("metrics.csv");
        fs::write(&metrics_path, &metrics_csv).map_err(|e| Error::io(&metrics_path, e))?;
    }
    print!("{text}");
    Ok(())
}

fn tables(dir: Option<&Path>) -> Result<()> {
    let set = match dir {
        Some(d) if d.as_os_str() != "-" => fixtures::load_dir(d)?,
        _ => fixtures::embedded(),
    };
    print!("{}", fixtures::render_tables(&set)?);
    Ok(())
}

fn agreement(reports: &[PathBuf]) -> Result<()> {
    let mut image_rows = Vec::with_capacity(reports.len());
    let mut case_rows = Vec::with_capacity(reports.len());
    for path in reports {
        let label = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| path.display().to_string());
        image_rows.push(eval::metric_row_from_csv(path, &label, "image_grouped")?);
        case_rows.push(eval::metric_row_from_csv(path, &label, "case_voted")?);
    }
    let image_means = eval::aggregate_users(&image_rows)?;
    let case_means = eval::aggregate_users(&case_rows)?;
    print!(
        "{}",
        eval::render_metric_table("Image-level grouped metrics per user", &image_rows, Some(&image_means))
    );
    println!();
    print!(
        "{}",
        eval::render_metric_table("Case-level voted metrics per user", &case_rows, Some(&case_means))
    );
    Ok(())
}
