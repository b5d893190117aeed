//! `mms`: synthetic data, splits, training, evaluation and comparison tables.
//!
//! Exit status is 0 on success, 1 for invalid input or usage, 2 for runtime failures.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mms_core::config::RunConfigFile;
use mms_core::container::write_atomic;
use mms_core::data::{disjoint_split, scan_dataset, SplitManifest};
use mms_core::evaluation::{
    evaluate_set, read_report, write_report, EvalSettings, InferenceMode, ReportLabel, ReportTable,
};
use mms_core::losses::LossWeights;
use mms_core::seeds::derive_seed;
use mms_core::synthdata::{generate_dataset, generate_unlabeled_variants, SynthConfig};
use mms_core::training::{
    load_checkpoint, train, train_supervised_baseline, CHECKPOINT_FILE, METRICS_FILE,
};
use mms_core::{MmsError, Result};

/// Files written next to the checkpoint of every run.
const CONFIG_ECHO: &str = "config.toml";
const MANIFEST_COPY: &str = "manifest.json";
const TEST_SUBDIR: &str = "test";

#[derive(Parser)]
#[command(name = "mms", version, about = "Min-max similarity semi-supervised segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset, its unlabeled variants and a held-out test set
    Synth {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Split a dataset into two disjoint labeled subsets and an unlabeled pool
    Split(SplitArgs),
    /// Train both networks (or the supervised baseline)
    Train(TrainArgs),
    /// Score a checkpoint on a labeled test directory
    Eval(EvalArgs),
    /// Merge evaluation reports into one table
    Report {
        #[arg(long, num_args = 1.., required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the oracle, gradient and property checks
    Selftest,
}

#[derive(Args)]
struct SplitArgs {
    /// Dataset root with images/ and masks/
    #[arg(long, env = "MMS_DATA_ROOT")]
    data: PathBuf,
    #[arg(long)]
    fraction: f64,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Held-out set; defaults to DATA/test when it exists
    #[arg(long)]
    test: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Train one network on all labeled images with the supervised objective only
    #[arg(long, conflicts_with_all = ["no_classifiers", "no_projectors"])]
    supervised_only: bool,
    #[arg(long)]
    no_classifiers: bool,
    #[arg(long)]
    no_projectors: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Directory with images/ and masks/
    #[arg(long)]
    test: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    mode: Option<InferenceMode>,
    #[arg(long)]
    threshold: Option<f64>,
    /// Row name in the report; defaults from the checkpoint's loss weights
    #[arg(long)]
    method: Option<String>,
    /// Column of the report; defaults to the manifest saved beside the checkpoint
    #[arg(long)]
    label_fraction: Option<f64>,
    /// Write each predicted mask here
    #[arg(long)]
    dump: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_user_error() { 1 } else { 2 })
        }
    }
}

fn dispatch(command: Command) -> Result<ExitCode> {
    match command {
        Command::Synth { config, out } => synth(&config, &out),
        Command::Split(a) => split(&a),
        Command::Train(a) => run_training(&a),
        Command::Eval(a) => eval(&a),
        Command::Report { inputs, out } => report(&inputs, &out),
        Command::Selftest => Ok(selftest()),
    }
}

fn synth(config: &Path, out: &Path) -> Result<ExitCode> {
    let cfg = RunConfigFile::load(config)?;
    let s = &cfg.data.synth;
    let base = cfg.synth_config();
    let summary = generate_dataset(&base, out)?;
    println!(
        "wrote {} labeled images to {} (mean foreground {:.3})",
        summary.images.len(),
        out.display(),
        summary.mean_foreground()
    );
    if s.unlabeled_per_image > 0 {
        let n = generate_unlabeled_variants(&base, s.unlabeled_per_image, out)?;
        println!("wrote {n} unlabeled variants");
    }
    if s.test_images > 0 {
        let test = SynthConfig {
            seed: derive_seed(&[cfg.seed, 0x5445_5354]),
            ..s.synth_config(s.test_images, cfg.seed)
        };
        let dir = out.join(TEST_SUBDIR);
        generate_dataset(&test, &dir)?;
        println!("wrote {} test images to {}", s.test_images, dir.display());
    }
    Ok(ExitCode::SUCCESS)
}

fn split(a: &SplitArgs) -> Result<ExitCode> {
    let listing = scan_dataset(&a.data)?;
    let mut manifest =
        disjoint_split(&listing.labeled, a.fraction, a.seed)?.with_extra_unlabeled(listing.unlabeled)?;
    let test_dir = a.test.clone().or_else(|| {
        let d = a.data.join(TEST_SUBDIR);
        d.join("images").is_dir().then_some(d)
    });
    if let Some(dir) = test_dir {
        manifest = manifest.with_test(scan_dataset(&dir)?.labeled)?;
    }
    manifest.save(&a.out)?;
    println!(
        "X1 {} / X2 {} labeled, {} unlabeled, {} test -> {}",
        manifest.labeled_x1.len(),
        manifest.labeled_x2.len(),
        manifest.unlabeled.len(),
        manifest.test.len(),
        a.out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn run_training(a: &TrainArgs) -> Result<ExitCode> {
    let manifest = SplitManifest::load(&a.manifest)?;
    let mut cfg = RunConfigFile::load(&a.config)?;
    if a.no_classifiers {
        cfg.train.use_classifiers = false;
    }
    if a.no_projectors {
        cfg.train.use_projectors = false;
    }
    std::fs::create_dir_all(&a.out).map_err(|e| MmsError::io(&a.out, e))?;
    let mut echo = String::new();
    if a.supervised_only {
        echo.push_str("# trained with --supervised-only: one network on X1 and X2, supervised loss only\n");
    }
    echo.push_str(&cfg.to_toml()?);
    write_atomic(&a.out.join(CONFIG_ECHO), echo.as_bytes())?;
    manifest.save(&a.out.join(MANIFEST_COPY))?;

    let state = if a.supervised_only {
        train_supervised_baseline(&manifest, &cfg.train, &cfg.augment, &cfg.model, Some(&a.out))?
    } else {
        train(&manifest, &cfg.train, &cfg.augment, &cfg.model, Some(&a.out))?
    };
    match state.history.last() {
        Some(m) => println!("trained {} epochs, final total loss {:.4}", state.epoch, m.total),
        None => println!("no epochs requested; saved the initial state"),
    }
    println!(
        "run directory {}: {CONFIG_ECHO}, {MANIFEST_COPY}, {METRICS_FILE}, {CHECKPOINT_FILE}",
        a.out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn default_label_fraction(checkpoint: &Path) -> Result<f64> {
    let sibling = checkpoint.with_file_name(MANIFEST_COPY);
    if sibling.is_file() {
        return Ok(SplitManifest::load(&sibling)?.label_fraction);
    }
    Err(MmsError::Parameter(format!(
        "no {} beside the checkpoint; pass --label-fraction",
        MANIFEST_COPY
    )))
}

fn eval(a: &EvalArgs) -> Result<ExitCode> {
    let state = load_checkpoint(&a.checkpoint)?;
    let defaults = EvalSettings::default();
    let settings = EvalSettings {
        threshold: a.threshold.unwrap_or(defaults.threshold),
        mode: a.mode.unwrap_or(defaults.mode),
    };
    settings.validate()?;
    let label_fraction = match a.label_fraction {
        Some(f) => f,
        None => default_label_fraction(&a.checkpoint)?,
    };
    let method = a.method.clone().unwrap_or_else(|| {
        if state.train_config.loss_weights == LossWeights::supervised_only() {
            "Supervised".into()
        } else {
            "MMS".into()
        }
    });
    let test = scan_dataset(&a.test)?.labeled;
    if test.is_empty() {
        return Err(MmsError::Dataset(format!("{} has no labeled images", a.test.display())));
    }
    let report = evaluate_set(&state.segmenter(), &test, &settings, a.dump.as_deref())?;
    write_report(
        std::slice::from_ref(&report),
        &[ReportLabel::new(method.clone(), label_fraction)],
        &a.out,
    )?;
    println!(
        "{method} ({}): mean DSC {:.4} over {} images [ensemble {:.4}, net1 {:.4}, net2 {:.4}] -> {}",
        settings.mode,
        report.mean_dsc,
        report.scored(),
        report.breakdown.ensemble,
        report.breakdown.net1,
        report.breakdown.net2,
        a.out.display()
    );
    if report.has_errors() {
        for r in report.errors() {
            eprintln!("failed: {}: {}", r.path.display(), r.error.as_deref().unwrap_or_default());
        }
        return Ok(ExitCode::from(2));
    }
    Ok(ExitCode::SUCCESS)
}

fn report(inputs: &[PathBuf], out: &Path) -> Result<ExitCode> {
    let tables = inputs.iter().map(|p| read_report(p)).collect::<Result<Vec<_>>>()?;
    let merged = ReportTable::merge(tables);
    write_atomic(out, merged.to_csv()?.as_bytes())?;
    println!("{} rows x {} label fractions -> {}", merged.rows.len(), merged.fractions.len(), out.display());
    Ok(ExitCode::SUCCESS)
}

fn selftest() -> ExitCode {
    let outcomes = mms_verify::suites::quick();
    for o in &outcomes {
        println!("{o}");
    }
    if outcomes.iter().all(|o| o.passed) {
        println!("selftest: all {} checks passed", outcomes.len());
        ExitCode::SUCCESS
    } else {
        println!("selftest: failures");
        ExitCode::from(2)
    }
}
