//! Adam training loop with seeded shuffling and best-validation-loss checkpoint selection.

mod adam;

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::Exec;
use crate::loss::{backward_with, batch_loss_with, Batch, Example, LossError};
use crate::probe::{forward, init_params, ProbeConfig, ProbeError, ProbeParams};
use crate::store::{ClipRecord, DatasetManifest, EmbeddingTensor, StoreError, Task};

pub use adam::{adam_step, AdamState};

/// Keeps the shuffle stream independent of the initialization stream for the same seed.
const SHUFFLE_STREAM: u64 = 0x5348_5546_464c_4521;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("{0} split is empty")]
    EmptySplit(&'static str),
    #[error("clip {clip_id}: {source}")]
    Clip {
        clip_id: String,
        #[source]
        source: StoreError,
    },
    #[error(transparent)]
    Probe(#[from] ProbeError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error("non-finite {0}")]
    NonFinite(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    #[serde(skip)]
    pub exec: Exec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 32,
            max_epochs: 100,
            seed: 0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            exec: Exec::default(),
        }
    }
}

impl TrainConfig {
    /// Task defaults: multilabel trains at 1e-4 with batches of 128, multiclass at 1e-3 with 32.
    pub fn for_task(task: Task) -> Self {
        match task {
            Task::Multilabel => Self { learning_rate: 1e-4, batch_size: 128, ..Self::default() },
            Task::Multiclass => Self::default(),
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) || self.batch_size == 0 || self.max_epochs == 0
        {
            return Err(TrainError::Config(format!(
                "need learning_rate > 0, batch_size >= 1, max_epochs >= 1 (got {}, {}, {})",
                self.learning_rate, self.batch_size, self.max_epochs
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainResult {
    pub best_params: ProbeParams,
    pub best_val_loss: f64,
    /// One-based.
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
}

impl TrainResult {
    /// `epoch,train_loss,val_loss` with full round-trip precision.
    pub fn history_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_loss\n");
        for r in &self.history {
            writeln!(out, "{},{:?},{:?}", r.epoch, r.train_loss, r.val_loss).unwrap();
        }
        out
    }
}

/// A manifest with every clip's embedding resident in memory, index-aligned with `manifest.clips`.
#[derive(Debug, Clone)]
pub struct LoadedDataset {
    pub manifest: DatasetManifest,
    pub tensors: Vec<EmbeddingTensor>,
}

impl LoadedDataset {
    pub fn load(manifest: DatasetManifest, exec: Exec) -> Result<Self, TrainError> {
        let loaded = exec.map(&manifest.clips, |clip| {
            manifest.load_embedding(clip).map_err(|source| TrainError::Clip { clip_id: clip.clip_id.clone(), source })
        });
        let tensors = loaded.into_iter().collect::<Result<Vec<_>, _>>()?;
        Ok(Self { manifest, tensors })
    }

    pub fn example(&self, index: usize) -> Example<'_> {
        let clip = &self.manifest.clips[index];
        Example { tensor: &self.tensors[index], labels: &clip.labels, mask: &clip.observed_mask }
    }

    pub fn examples(&self, indices: &[usize]) -> Vec<Example<'_>> {
        indices.iter().map(|&i| self.example(i)).collect()
    }
}

/// Load the given clips of `manifest` and train on them.
pub fn train(
    manifest: &DatasetManifest,
    train_clips: &[&ClipRecord],
    valid_clips: &[&ClipRecord],
    probe: &ProbeConfig,
    config: &TrainConfig,
) -> Result<TrainResult, TrainError> {
    let load = |clips: &[&ClipRecord]| -> Result<Vec<EmbeddingTensor>, TrainError> {
        let loaded = config.exec.map(clips, |clip| {
            manifest.load_embedding(clip).map_err(|source| TrainError::Clip { clip_id: clip.clip_id.clone(), source })
        });
        loaded.into_iter().collect()
    };
    let train_tensors = load(train_clips)?;
    let valid_tensors = load(valid_clips)?;
    let train_ex = zip_examples(train_clips, &train_tensors);
    let valid_ex = zip_examples(valid_clips, &valid_tensors);
    fit(&train_ex, &valid_ex, probe, config)
}

fn zip_examples<'a>(clips: &[&'a ClipRecord], tensors: &'a [EmbeddingTensor]) -> Vec<Example<'a>> {
    clips
        .iter()
        .zip(tensors)
        .map(|(clip, tensor)| Example { tensor, labels: &clip.labels, mask: &clip.observed_mask })
        .collect()
}

/// Train a fresh probe on in-memory examples.
///
/// Each epoch shuffles the training set with a seeded generator, takes one Adam
/// step per minibatch (the final partial batch included), then measures the full
/// validation loss. The parameters from the epoch with the lowest validation loss
/// are returned.
pub fn fit(
    train: &[Example],
    valid: &[Example],
    probe: &ProbeConfig,
    config: &TrainConfig,
) -> Result<TrainResult, TrainError> {
    probe.validate()?;
    config.validate()?;
    if train.is_empty() {
        return Err(TrainError::EmptySplit("training"));
    }
    if valid.is_empty() {
        return Err(TrainError::EmptySplit("validation"));
    }
    let exec = config.exec;
    let mut params = init_params(probe, config.seed);
    let mut state = AdamState::new(&params);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ SHUFFLE_STREAM);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let valid_batch = Batch::new(valid.to_vec());

    let mut history = Vec::with_capacity(config.max_epochs);
    let mut best: Option<(f64, usize, ProbeParams)> = None;
    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        let mut weighted_loss = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch = Batch::new(chunk.iter().map(|&i| train[i]).collect());
            let (loss, grads) = backward_with(exec, &batch, &params, probe)?;
            adam_step(&mut params, &grads, &mut state, config)?;
            weighted_loss += loss * chunk.len() as f64;
        }
        let train_loss = weighted_loss / train.len() as f64;
        let val_loss = batch_loss_with(exec, &valid_batch, &params, probe)?;
        history.push(EpochRecord { epoch, train_loss, val_loss });
        log::debug!("epoch {epoch}: train {train_loss:.6} valid {val_loss:.6}");
        if best.as_ref().is_none_or(|(b, _, _)| val_loss < *b) {
            best = Some((val_loss, epoch, params.clone()));
        }
    }
    let (best_val_loss, best_epoch, best_params) = best.expect("max_epochs >= 1");
    Ok(TrainResult { best_params, best_val_loss, best_epoch, history })
}

/// Clip-level predictions, in input order.
pub fn predict(
    examples: &[Example],
    params: &ProbeParams,
    probe: &ProbeConfig,
    exec: Exec,
) -> Result<Vec<Vec<f64>>, TrainError> {
    let preds = exec.map(examples, |ex| forward(ex.tensor, params, probe).map(|p| p.y_hat));
    Ok(preds.into_iter().collect::<Result<_, _>>()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::probe::{Aggregation, LayerMode};
    use rand::Rng;
    use rand_distr::StandardNormal;

    struct Toy {
        tensors: Vec<EmbeddingTensor>,
        labels: Vec<Vec<u8>>,
        mask: Vec<Vec<u8>>,
    }

    impl Toy {
        /// Two Gaussian clusters at +-mu along the first axis.
        fn separable(n: usize, seed: u64) -> Self {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (mut tensors, mut labels) = (Vec::new(), Vec::new());
            for i in 0..n {
                let class = i % 2;
                let sign = if class == 0 { -3.0 } else { 3.0 };
                let data: Vec<f32> = (0..4 * 8)
                    .map(|j| {
                        let noise: f64 = rng.sample(StandardNormal);
                        (noise + if j % 8 == 0 { sign } else { 0.0 }) as f32
                    })
                    .collect();
                tensors.push(EmbeddingTensor::new(1, 4, 8, data).unwrap());
                labels.push(if class == 0 { vec![1, 0] } else { vec![0, 1] });
            }
            Self { tensors, mask: vec![vec![1, 1]; n], labels }
        }

        fn examples(&self, range: std::ops::Range<usize>) -> Vec<Example<'_>> {
            range.map(|i| Example { tensor: &self.tensors[i], labels: &self.labels[i], mask: &self.mask[i] }).collect()
        }
    }

    fn probe() -> ProbeConfig {
        ProbeConfig {
            task: Task::Multiclass,
            n_classes: 2,
            dim: 8,
            n_layers: 1,
            aggregation: Aggregation::Attention,
            layer_mode: LayerMode::Last,
        }
    }

    #[test]
    fn separable_data_is_learned() {
        let toy = Toy::separable(200, 1);
        let config = TrainConfig { max_epochs: 50, seed: 3, learning_rate: 1e-2, ..TrainConfig::default() };
        let result = fit(&toy.examples(0..150), &toy.examples(150..200), &probe(), &config).unwrap();
        assert_eq!(result.history.len(), 50);
        assert!(result.history[49].train_loss < result.history[0].train_loss);
        let preds = predict(&toy.examples(150..200), &result.best_params, &probe(), Exec::default()).unwrap();
        let acc = crate::metrics::accuracy(&preds, &toy.labels[150..200]).unwrap().value;
        assert!(acc >= 0.99, "validation accuracy {acc}");
        let min = result.history.iter().map(|r| r.val_loss).fold(f64::INFINITY, f64::min);
        assert_eq!(result.best_val_loss, min);
        assert_eq!(result.history[result.best_epoch - 1].val_loss, min);
    }

    #[test]
    fn identical_seed_is_bit_identical_across_exec_modes() {
        let toy = Toy::separable(60, 2);
        let base = TrainConfig { max_epochs: 5, batch_size: 7, seed: 11, ..TrainConfig::default() };
        let a = fit(&toy.examples(0..40), &toy.examples(40..60), &probe(), &base).unwrap();
        let b = fit(&toy.examples(0..40), &toy.examples(40..60), &probe(), &base).unwrap();
        let c =
            fit(&toy.examples(0..40), &toy.examples(40..60), &probe(), &TrainConfig { exec: Exec::Sequential, ..base })
                .unwrap();
        assert_eq!(a, b);
        assert_eq!(a, c);
        let other =
            fit(&toy.examples(0..40), &toy.examples(40..60), &probe(), &TrainConfig { seed: 12, ..base }).unwrap();
        assert_ne!(a.history, other.history);
    }

    #[test]
    fn single_epoch_returns_epoch_one_params() {
        let toy = Toy::separable(20, 3);
        let config = TrainConfig { max_epochs: 1, batch_size: 6, ..TrainConfig::default() };
        let result = fit(&toy.examples(0..14), &toy.examples(14..20), &probe(), &config).unwrap();
        assert_eq!(result.best_epoch, 1);

        // Replay the epoch by hand.
        let mut params = init_params(&probe(), config.seed);
        let mut state = AdamState::new(&params);
        let mut order: Vec<usize> = (0..14).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(config.seed ^ SHUFFLE_STREAM));
        let train = toy.examples(0..14);
        for chunk in order.chunks(6) {
            let batch = Batch::new(chunk.iter().map(|&i| train[i]).collect());
            let (_, g) = backward_with(Exec::Sequential, &batch, &params, &probe()).unwrap();
            adam_step(&mut params, &g, &mut state, &config).unwrap();
        }
        assert_eq!(state.t, 3, "14 clips in batches of 6 keeps the partial batch");
        assert_eq!(result.best_params, params);
    }

    #[test]
    fn history_csv_format() {
        let toy = Toy::separable(10, 4);
        let config = TrainConfig { max_epochs: 2, ..TrainConfig::default() };
        let result = fit(&toy.examples(0..6), &toy.examples(6..10), &probe(), &config).unwrap();
        let csv = result.history_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "epoch,train_loss,val_loss");
        assert_eq!(lines.len(), 3);
        let fields: Vec<&str> = lines[2].split(',').collect();
        assert_eq!(fields[0], "2");
        assert_eq!(fields[2].parse::<f64>().unwrap(), result.history[1].val_loss);
    }

    #[test]
    fn rejects_bad_inputs() {
        let toy = Toy::separable(4, 5);
        let cfg = TrainConfig::default();
        assert!(matches!(fit(&[], &toy.examples(0..2), &probe(), &cfg), Err(TrainError::EmptySplit(_))));
        assert!(matches!(fit(&toy.examples(0..2), &[], &probe(), &cfg), Err(TrainError::EmptySplit(_))));
        let bad = TrainConfig { batch_size: 0, ..cfg };
        assert!(matches!(fit(&toy.examples(0..2), &toy.examples(2..4), &probe(), &bad), Err(TrainError::Config(_))));
    }

    #[test]
    fn task_defaults() {
        let ml = TrainConfig::for_task(Task::Multilabel);
        assert_eq!((ml.learning_rate, ml.batch_size), (1e-4, 128));
        let mc = TrainConfig::for_task(Task::Multiclass);
        assert_eq!((mc.learning_rate, mc.batch_size, mc.max_epochs), (1e-3, 32, 100));
    }
}
