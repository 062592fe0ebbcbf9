//! Train/evaluate protocols and the multi-run sweep over temporal supports and probe variants.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::report::{CellFailure, Report, ReportRow};
use super::RunnerError;
use crate::exec::Exec;
use crate::metrics::{accuracy, macro_map, mean_std, EvalResult};
use crate::probe::{Aggregation, LayerMode, ProbeConfig, ProbeParams};
use crate::store::{carve, fold_assignment, DatasetManifest, Split, Task};
use crate::trainer::{fit, predict, LoadedDataset, TrainConfig, TrainResult};

/// Validation share carved out of the training clips when the manifest has no `valid` split.
pub fn default_validation_fraction(task: Task) -> f64 {
    match task {
        Task::Multilabel => 0.15,
        Task::Multiclass => 0.30,
    }
}

/// Indices of the clips in `split`, restricted to `eligible`.
fn indices_in(manifest: &DatasetManifest, split: Split, eligible: &[usize]) -> Vec<usize> {
    eligible.iter().copied().filter(|&i| manifest.clips[i].split == Some(split)).collect()
}

/// (train, valid) clip indices: the manifest's own `valid` split when it has one,
/// otherwise a seeded carve-out of the training clips.
pub fn train_valid_indices(
    manifest: &DatasetManifest,
    eligible: &[usize],
    fraction: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>), RunnerError> {
    let train = indices_in(manifest, Split::Train, eligible);
    let valid = indices_in(manifest, Split::Valid, eligible);
    if !valid.is_empty() {
        return Ok((train, valid));
    }
    Ok(carve(train, fraction, seed)?)
}

pub fn test_indices(manifest: &DatasetManifest, eligible: &[usize]) -> Vec<usize> {
    indices_in(manifest, Split::Test, eligible)
}

/// Task metric of clip-level predictions: macro mAP for multilabel, accuracy for multiclass.
pub fn score(dataset: &LoadedDataset, indices: &[usize], predictions: &[Vec<f64>]) -> Result<EvalResult, RunnerError> {
    let clips = &dataset.manifest.clips;
    let labels: Vec<Vec<u8>> = indices.iter().map(|&i| clips[i].labels.clone()).collect();
    let result = match dataset.manifest.task {
        Task::Multilabel => {
            let mask: Vec<Vec<u8>> = indices.iter().map(|&i| clips[i].observed_mask.clone()).collect();
            macro_map(predictions, &labels, &mask)?
        }
        Task::Multiclass => accuracy(predictions, &labels)?,
    };
    Ok(result)
}

pub fn evaluate(
    dataset: &LoadedDataset,
    indices: &[usize],
    params: &ProbeParams,
    probe: &ProbeConfig,
    exec: Exec,
) -> Result<EvalResult, RunnerError> {
    let preds = predict(&dataset.examples(indices), params, probe, exec)?;
    score(dataset, indices, &preds)
}

pub fn probe_config(manifest: &DatasetManifest, aggregation: Aggregation, layer_mode: LayerMode) -> ProbeConfig {
    ProbeConfig {
        task: manifest.task,
        n_classes: manifest.n_classes(),
        dim: manifest.embedding_meta.dim,
        n_layers: manifest.embedding_meta.n_layers,
        aggregation,
        layer_mode,
    }
}

pub fn fit_indices(
    dataset: &LoadedDataset,
    train: &[usize],
    valid: &[usize],
    probe: &ProbeConfig,
    config: &TrainConfig,
) -> Result<TrainResult, RunnerError> {
    Ok(fit(&dataset.examples(train), &dataset.examples(valid), probe, config)?)
}

/// Clips long enough to contain one segment of the manifest's temporal support.
pub fn eligible_clips(manifest: &DatasetManifest) -> Vec<usize> {
    let ts = manifest.embedding_meta.ts_seconds;
    (0..manifest.clips.len()).filter(|&i| manifest.clips[i].duration_s >= ts * (1.0 - 1e-9)).collect()
}

fn default_aggregations() -> Vec<Aggregation> {
    vec![Aggregation::Mean, Aggregation::Attention]
}

fn default_layer_modes() -> Vec<LayerMode> {
    vec![LayerMode::Last]
}

fn default_n_runs() -> usize {
    5
}

/// Training hyperparameters a sweep may override; unset fields keep the task defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainOverrides {
    pub learning_rate: Option<f64>,
    pub batch_size: Option<usize>,
    pub max_epochs: Option<usize>,
    pub validation_fraction: Option<f64>,
}

/// A sweep description: temporal support in seconds (as a string key) to manifest path.
/// Relative paths are resolved against the spec file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub manifests: BTreeMap<String, PathBuf>,
    #[serde(default = "default_aggregations")]
    pub aggregations: Vec<Aggregation>,
    #[serde(default = "default_layer_modes")]
    pub layer_modes: Vec<LayerMode>,
    #[serde(default = "default_n_runs")]
    pub n_runs: usize,
    #[serde(default)]
    pub base_seed: u64,
    #[serde(default)]
    pub train_config: TrainOverrides,
    /// Run k-fold cross-validation instead of the fixed train/test split.
    #[serde(default)]
    pub cv_folds: Option<usize>,
    #[serde(skip)]
    pub root: PathBuf,
}

impl ExperimentSpec {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, RunnerError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| RunnerError::Spec(format!("{}: {e}", path.display())))?;
        let mut spec: ExperimentSpec =
            serde_json::from_str(&text).map_err(|e| RunnerError::Spec(format!("{}: {e}", path.display())))?;
        spec.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), RunnerError> {
        if self.manifests.is_empty() || self.aggregations.is_empty() || self.layer_modes.is_empty() {
            return Err(RunnerError::Spec("manifests, aggregations and layer_modes must be non-empty".into()));
        }
        if self.n_runs == 0 {
            return Err(RunnerError::Spec("n_runs must be >= 1".into()));
        }
        for key in self.manifests.keys() {
            if !key.parse::<f64>().is_ok_and(|ts| ts > 0.0 && ts.is_finite()) {
                return Err(RunnerError::Spec(format!("manifest key {key:?} is not a positive number of seconds")));
            }
        }
        if let Some(f) = self.train_config.validation_fraction {
            if !(f > 0.0 && f < 1.0) {
                return Err(RunnerError::Spec(format!("validation_fraction must be in (0, 1), got {f}")));
            }
        }
        if self.cv_folds.is_some_and(|k| k < 2) {
            return Err(RunnerError::Spec("cv_folds must be >= 2".into()));
        }
        Ok(())
    }

    pub fn manifest_path(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.root.join(path)
        }
    }

    fn train_config(&self, task: Task, seed: u64, exec: Exec) -> TrainConfig {
        let base = TrainConfig::for_task(task);
        TrainConfig {
            learning_rate: self.train_config.learning_rate.unwrap_or(base.learning_rate),
            batch_size: self.train_config.batch_size.unwrap_or(base.batch_size),
            max_epochs: self.train_config.max_epochs.unwrap_or(base.max_epochs),
            seed,
            exec,
            ..base
        }
    }
}

struct Cell {
    dataset: usize,
    aggregation: Aggregation,
    layer_mode: LayerMode,
}

/// One cell run: a fresh probe per run seed, scored on the test split or
/// averaged over cross-validation folds.
fn run_once(
    spec: &ExperimentSpec,
    dataset: &LoadedDataset,
    eligible: &[usize],
    probe: &ProbeConfig,
    seed: u64,
    exec: Exec,
) -> Result<f64, RunnerError> {
    let manifest = &dataset.manifest;
    let config = spec.train_config(manifest.task, seed, exec);
    let fraction = spec.train_config.validation_fraction.unwrap_or(default_validation_fraction(manifest.task));
    match spec.cv_folds {
        None => {
            let (train, valid) = train_valid_indices(manifest, eligible, fraction, seed)?;
            let test = test_indices(manifest, eligible);
            if test.is_empty() {
                return Err(RunnerError::Spec("test split is empty".into()));
            }
            let result = fit_indices(dataset, &train, &valid, probe, &config)?;
            Ok(evaluate(dataset, &test, &result.best_params, probe, exec)?.value)
        }
        Some(k) => {
            let folds = fold_assignment(manifest, k)?;
            let mut values = Vec::with_capacity(k);
            for fold in 0..k {
                let (test, rest): (Vec<usize>, Vec<usize>) = eligible.iter().partition(|&&i| folds[i] == fold);
                let (train, valid) = carve(rest, fraction, seed)?;
                let result = fit_indices(dataset, &train, &valid, probe, &config)?;
                values.push(evaluate(dataset, &test, &result.best_params, probe, exec)?.value);
            }
            Ok(mean_std(&values)?.0)
        }
    }
}

/// Every (manifest, layer mode, aggregation) cell trained `n_runs` times with
/// seeds `base_seed..base_seed + n_runs`. Rows come out ordered by model, temporal
/// support, layer mode and aggregation; a failing cell becomes a [`CellFailure`]
/// and the rest of the sweep continues.
pub fn run_experiment(spec: &ExperimentSpec, exec: Exec) -> Result<Report, RunnerError> {
    spec.validate()?;
    let mut datasets = Vec::with_capacity(spec.manifests.len());
    for (key, path) in &spec.manifests {
        let manifest = DatasetManifest::load(spec.manifest_path(path))?;
        let ts: f64 = key.parse().expect("validated");
        let declared = manifest.embedding_meta.ts_seconds;
        if (declared - ts).abs() > 1e-9 * ts.max(1.0) {
            return Err(RunnerError::Spec(format!(
                "manifest {} declares {declared} s, keyed as {key} s",
                path.display()
            )));
        }
        datasets.push(LoadedDataset::load(manifest, exec)?);
    }
    datasets.sort_by(|a, b| {
        let (ma, mb) = (&a.manifest.embedding_meta, &b.manifest.embedding_meta);
        ma.model_id.cmp(&mb.model_id).then(ma.ts_seconds.total_cmp(&mb.ts_seconds))
    });
    let eligible: Vec<Vec<usize>> = datasets.iter().map(|d| eligible_clips(&d.manifest)).collect();

    let mut layer_modes = spec.layer_modes.clone();
    layer_modes.sort();
    layer_modes.dedup();
    let mut aggregations = spec.aggregations.clone();
    aggregations.sort();
    aggregations.dedup();

    let mut report = Report::default();
    let mut cells = Vec::new();
    for (d, dataset) in datasets.iter().enumerate() {
        let meta = &dataset.manifest.embedding_meta;
        let excluded = dataset.manifest.clips.len() - eligible[d].len();
        if excluded > 0 {
            log::warn!(
                "{} at {} s: {excluded} clips shorter than the temporal support are excluded",
                meta.model_id,
                meta.ts_seconds
            );
        }
        let has_train = !indices_in(&dataset.manifest, Split::Train, &eligible[d]).is_empty();
        for &layer_mode in &layer_modes {
            for &aggregation in &aggregations {
                let failure = |skipped: bool, reason: String| CellFailure {
                    model_id: meta.model_id.clone(),
                    ts_seconds: meta.ts_seconds,
                    aggregation,
                    layer_mode,
                    skipped,
                    reason,
                };
                if eligible[d].is_empty() || (spec.cv_folds.is_none() && !has_train) {
                    report.failures.push(failure(true, "no clip is as long as the temporal support".into()));
                } else if let Err(e) = probe_config(&dataset.manifest, aggregation, layer_mode).validate() {
                    report.failures.push(failure(false, e.to_string()));
                } else {
                    cells.push(Cell { dataset: d, aggregation, layer_mode });
                }
            }
        }
    }

    let jobs: Vec<(usize, usize)> = (0..cells.len()).flat_map(|c| (0..spec.n_runs).map(move |r| (c, r))).collect();
    let inner = if exec.is_parallel() { Exec::Sequential } else { exec };
    let outcomes = exec.map(&jobs, |&(c, r)| {
        let cell = &cells[c];
        let dataset = &datasets[cell.dataset];
        let probe = probe_config(&dataset.manifest, cell.aggregation, cell.layer_mode);
        run_once(spec, dataset, &eligible[cell.dataset], &probe, spec.base_seed.wrapping_add(r as u64), inner)
    });

    for (c, cell) in cells.iter().enumerate() {
        let manifest = &datasets[cell.dataset].manifest;
        let meta = &manifest.embedding_meta;
        let runs = &outcomes[c * spec.n_runs..(c + 1) * spec.n_runs];
        let values: Result<Vec<f64>, &RunnerError> = runs.iter().map(|r| r.as_ref().copied()).collect();
        match values {
            Ok(values) => {
                let (mean, std) = mean_std(&values)?;
                report.rows.push(ReportRow {
                    model_id: meta.model_id.clone(),
                    ts_seconds: meta.ts_seconds,
                    aggregation: cell.aggregation,
                    layer_mode: cell.layer_mode,
                    metric_name: metric_for(manifest.task),
                    mean,
                    std,
                    n_runs: spec.n_runs,
                });
            }
            Err(e) => {
                log::error!(
                    "{} at {} s, {} / {}: {e}",
                    meta.model_id,
                    meta.ts_seconds,
                    cell.layer_mode,
                    cell.aggregation
                );
                report.failures.push(CellFailure {
                    model_id: meta.model_id.clone(),
                    ts_seconds: meta.ts_seconds,
                    aggregation: cell.aggregation,
                    layer_mode: cell.layer_mode,
                    skipped: false,
                    reason: e.to_string(),
                });
            }
        }
    }
    Ok(report)
}

/// [`run_experiment`] under `k`-fold cross-validation.
pub fn run_cv(spec: &ExperimentSpec, k: usize, exec: Exec) -> Result<Report, RunnerError> {
    run_experiment(&ExperimentSpec { cv_folds: Some(k), ..spec.clone() }, exec)
}

pub fn metric_for(task: Task) -> crate::metrics::MetricName {
    match task {
        Task::Multilabel => crate::metrics::MetricName::Map,
        Task::Multiclass => crate::metrics::MetricName::Accuracy,
    }
}
