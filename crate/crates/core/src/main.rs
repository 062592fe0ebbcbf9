use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use tsprobe::exec::Exec;
use tsprobe::probe::{load_checkpoint, save_checkpoint, Aggregation, Checkpoint, CheckpointError, LayerMode};
use tsprobe::runner::experiment::{
    default_validation_fraction, eligible_clips, evaluate, fit_indices, probe_config, test_indices, train_valid_indices,
};
use tsprobe::runner::{
    emit_report, generate_synthetic, run_experiment, ExperimentSpec, Report, ReportFormat, RunnerError, SynthConfig,
};
use tsprobe::store::{validate_manifest, DatasetManifest, Split, StoreError, Task};
use tsprobe::trainer::{LoadedDataset, TrainConfig, TrainError};

#[derive(Parser)]
#[command(name = "tsprobe", version, about = "Temporal-support probing of frozen audio embeddings")]
struct Cli {
    /// Run every loop on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    Multilabel,
    Multiclass,
}

#[derive(Clone, Copy, ValueEnum)]
enum AggArg {
    Mean,
    Attention,
}

#[derive(Clone, Copy, ValueEnum)]
enum LayersArg {
    Last,
    Weighted,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Json,
    Csv,
    Md,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Valid,
    Test,
}

#[derive(Subcommand)]
enum Command {
    /// Write a seeded synthetic embedding dataset and its manifest.
    Synth {
        #[arg(long, default_value_t = 200)]
        clips: usize,
        #[arg(long, default_value_t = 5)]
        classes: usize,
        #[arg(long, default_value_t = 16)]
        dim: usize,
        #[arg(long, default_value_t = 1)]
        layers: usize,
        #[arg(long, default_value_t = 10)]
        steps: usize,
        #[arg(long, value_enum, default_value_t = TaskArg::Multiclass)]
        task: TaskArg,
        #[arg(long, default_value_t = 3.0)]
        sep: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Temporal support recorded in the manifest, in seconds.
        #[arg(long, default_value_t = 1.0)]
        ts: f64,
        #[arg(long, default_value_t = 10.0)]
        duration: f64,
        #[arg(long, default_value_t = 0.3)]
        test_fraction: f64,
        #[arg(long, default_value_t = 5)]
        folds: usize,
        /// Probability that a multilabel entry is unobserved.
        #[arg(long, default_value_t = 0.0)]
        missing: f64,
        #[arg(long, default_value = "synthetic")]
        model_id: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one probe and save its checkpoint.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_enum, default_value_t = AggArg::Mean)]
        agg: AggArg,
        #[arg(long, value_enum, default_value_t = LayersArg::Last)]
        layers: LayersArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        valid_fraction: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on one split of a manifest.
    Eval {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a multi-run sweep; the output format follows the file extension.
    Sweep {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check a manifest and every embedding file it references.
    Validate {
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Render a JSON report as json, csv or markdown.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, value_enum, default_value_t = FormatArg::Md)]
        format: FormatArg,
        /// Write here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn history_path(checkpoint: &Path) -> PathBuf {
    let mut name = checkpoint.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".history.csv");
    checkpoint.with_file_name(name)
}

fn run(cli: Cli) -> Result<serde_json::Value> {
    let exec = if cli.sequential { Exec::Sequential } else { Exec::default() };
    match cli.command {
        Command::Synth {
            clips,
            classes,
            dim,
            layers,
            steps,
            task,
            sep,
            seed,
            ts,
            duration,
            test_fraction,
            folds,
            missing,
            model_id,
            out,
        } => {
            let config = SynthConfig {
                n_clips: clips,
                n_classes: classes,
                dim,
                n_layers: layers,
                steps_per_clip: steps,
                task: match task {
                    TaskArg::Multilabel => Task::Multilabel,
                    TaskArg::Multiclass => Task::Multiclass,
                },
                class_separation: sep,
                seed,
                ts_seconds: ts,
                duration_s: duration,
                test_fraction,
                cv_folds: folds,
                missing_fraction: missing,
                model_id,
            };
            let manifest = generate_synthetic(&config, &out)?;
            Ok(json!({"manifest": out.join("manifest.json"), "n_clips": manifest.clips.len()}))
        }
        Command::Train { manifest, agg, layers, seed, lr, batch_size, epochs, valid_fraction, out } => {
            let manifest = DatasetManifest::load(&manifest)?;
            let probe = probe_config(
                &manifest,
                match agg {
                    AggArg::Mean => Aggregation::Mean,
                    AggArg::Attention => Aggregation::Attention,
                },
                match layers {
                    LayersArg::Last => LayerMode::Last,
                    LayersArg::Weighted => LayerMode::Weighted,
                },
            );
            probe.validate()?;
            let base = TrainConfig::for_task(manifest.task);
            let config = TrainConfig {
                learning_rate: lr.unwrap_or(base.learning_rate),
                batch_size: batch_size.unwrap_or(base.batch_size),
                max_epochs: epochs.unwrap_or(base.max_epochs),
                seed,
                exec,
                ..base
            };
            let fraction = valid_fraction.unwrap_or(default_validation_fraction(manifest.task));
            let dataset = LoadedDataset::load(manifest, exec)?;
            let eligible = eligible_clips(&dataset.manifest);
            let (train, valid) = train_valid_indices(&dataset.manifest, &eligible, fraction, seed)?;
            let result = fit_indices(&dataset, &train, &valid, &probe, &config)?;
            let info = json!({
                "model_id": dataset.manifest.embedding_meta.model_id,
                "ts_seconds": dataset.manifest.embedding_meta.ts_seconds,
                "train": config,
                "best_epoch": result.best_epoch,
                "best_val_loss": result.best_val_loss,
                "n_train": train.len(),
                "n_valid": valid.len(),
            });
            save_checkpoint(&out, &Checkpoint { config: probe, params: result.best_params.clone(), info })?;
            let history = history_path(&out);
            write_file(&history, &result.history_csv())?;
            Ok(json!({
                "checkpoint": out,
                "history": history,
                "best_epoch": result.best_epoch,
                "best_val_loss": result.best_val_loss,
            }))
        }
        Command::Eval { manifest, checkpoint, split, out } => {
            let manifest = DatasetManifest::load(&manifest)?;
            let ckpt = load_checkpoint(&checkpoint)?;
            let expected = probe_config(&manifest, ckpt.config.aggregation, ckpt.config.layer_mode);
            if expected != ckpt.config {
                bail!(StoreError::Shape(format!(
                    "checkpoint expects {:?}, manifest provides {:?}",
                    ckpt.config, expected
                )));
            }
            let dataset = LoadedDataset::load(manifest, exec)?;
            let eligible = eligible_clips(&dataset.manifest);
            let indices = match split {
                SplitArg::Test => test_indices(&dataset.manifest, &eligible),
                SplitArg::Train | SplitArg::Valid => {
                    let wanted = if matches!(split, SplitArg::Train) { Split::Train } else { Split::Valid };
                    eligible.iter().copied().filter(|&i| dataset.manifest.clips[i].split == Some(wanted)).collect()
                }
            };
            if indices.is_empty() {
                bail!(StoreError::Split("requested split has no eligible clips".into()));
            }
            let result = evaluate(&dataset, &indices, &ckpt.params, &ckpt.config, exec)?;
            let mut text = serde_json::to_string_pretty(&result)?;
            text.push('\n');
            write_file(&out, &text)?;
            Ok(json!({"out": out, "metric_name": result.metric_name, "value": result.value}))
        }
        Command::Sweep { spec, out } => {
            let format = ReportFormat::from_path(&out)
                .with_context(|| format!("cannot infer a report format from {}", out.display()))
                .map_err(|e| RunnerError::Spec(e.to_string()))?;
            let spec = ExperimentSpec::load(&spec)?;
            let report = run_experiment(&spec, exec)?;
            write_file(&out, &emit_report(&report, format))?;
            Ok(json!({"out": out, "rows": report.rows.len(), "failures": report.failures.len()}))
        }
        Command::Validate { manifest } => {
            let m = validate_manifest(&manifest)?;
            Ok(json!({"manifest": manifest, "n_clips": m.clips.len(), "task": m.task}))
        }
        Command::Report { input, format, out } => {
            let text = fs::read_to_string(&input).with_context(|| format!("reading {}", input.display()))?;
            let report: Report = serde_json::from_str(&text).with_context(|| format!("parsing {}", input.display()))?;
            let rendered = emit_report(
                &report,
                match format {
                    FormatArg::Json => ReportFormat::Json,
                    FormatArg::Csv => ReportFormat::Csv,
                    FormatArg::Md => ReportFormat::Markdown,
                },
            );
            match out {
                Some(path) => {
                    write_file(&path, &rendered)?;
                    Ok(json!({"out": path}))
                }
                None => {
                    print!("{rendered}");
                    Ok(serde_json::Value::Null)
                }
            }
        }
    }
}

fn error_kind(err: &anyhow::Error) -> &'static str {
    for cause in err.chain() {
        if cause.is::<StoreError>() {
            return "store";
        }
        if cause.is::<TrainError>() {
            return "train";
        }
        if cause.is::<CheckpointError>() {
            return "checkpoint";
        }
        if let Some(e) = cause.downcast_ref::<RunnerError>() {
            return match e {
                RunnerError::Spec(_) => "spec",
                RunnerError::Store(_) => "store",
                RunnerError::Train(_) => "train",
                RunnerError::Metric(_) => "metric",
            };
        }
        if cause.is::<tsprobe::probe::ProbeError>() {
            return "config";
        }
        if cause.is::<std::io::Error>() {
            return "io";
        }
        if cause.is::<serde_json::Error>() {
            return "json";
        }
    }
    "other"
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(summary) => {
            if !summary.is_null() {
                println!("{summary}");
            }
            ExitCode::SUCCESS
        }
        Err(err) => {
            let message = err.chain().map(|c| c.to_string()).collect::<Vec<_>>().join(": ");
            eprintln!("{}", json!({"error": message, "kind": error_kind(&err)}));
            ExitCode::FAILURE
        }
    }
}
