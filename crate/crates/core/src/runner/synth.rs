//! Seeded synthetic embedding datasets with a controllable class signal.

use std::fs;
use std::path::Path;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::store::{
    write_embedding, ClipRecord, DatasetManifest, EmbeddingMeta, EmbeddingTensor, Split, StoreError, Task,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_clips: usize,
    pub n_classes: usize,
    pub dim: usize,
    pub n_layers: usize,
    pub steps_per_clip: usize,
    pub task: Task,
    pub class_separation: f64,
    pub seed: u64,
    pub ts_seconds: f64,
    pub duration_s: f64,
    /// Fraction of clips assigned to the test split; the rest are training clips.
    pub test_fraction: f64,
    pub cv_folds: usize,
    /// Probability that a multilabel entry is unobserved.
    pub missing_fraction: f64,
    pub model_id: String,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_clips: 200,
            n_classes: 5,
            dim: 16,
            n_layers: 1,
            steps_per_clip: 10,
            task: Task::Multiclass,
            class_separation: 3.0,
            seed: 0,
            ts_seconds: 1.0,
            duration_s: 10.0,
            test_fraction: 0.3,
            cv_folds: 5,
            missing_fraction: 0.0,
            model_id: "synthetic".into(),
        }
    }
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Writes one TSEB file per clip plus `manifest.json` into `out_dir`.
///
/// Each class gets a random unit mean vector; every step of every layer is drawn
/// from `N(class_separation * sum of the clip's class means, I)`. Multiclass clips
/// cycle through the classes, multilabel clips carry 1 to 3 random classes.
pub fn generate_synthetic(config: &SynthConfig, out_dir: impl AsRef<Path>) -> Result<DatasetManifest, StoreError> {
    let c = config;
    if c.n_clips == 0 || c.n_classes == 0 || c.dim == 0 || c.n_layers == 0 || c.steps_per_clip == 0 {
        return Err(StoreError::Manifest("synthetic dataset counts must all be >= 1".into()));
    }
    if !(0.0..1.0).contains(&c.test_fraction) || !(0.0..1.0).contains(&c.missing_fraction) {
        return Err(StoreError::Manifest("test_fraction and missing_fraction must be in [0, 1)".into()));
    }
    let out_dir = out_dir.as_ref();
    fs::create_dir_all(out_dir).map_err(|e| StoreError::io(out_dir, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(c.seed);

    let means: Vec<Vec<f64>> = (0..c.n_classes)
        .map(|_| loop {
            let v: Vec<f64> = (0..c.dim).map(|_| gaussian(&mut rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-12 {
                break v.iter().map(|x| x / norm).collect();
            }
        })
        .collect();

    let mut order: Vec<usize> = (0..c.n_clips).collect();
    order.shuffle(&mut rng);
    let n_test = (c.test_fraction * c.n_clips as f64).round() as usize;
    let mut split = vec![Split::Train; c.n_clips];
    for &i in &order[..n_test] {
        split[i] = Split::Test;
    }
    let mut rank = vec![0usize; c.n_clips];
    for (r, &i) in order.iter().enumerate() {
        rank[i] = r;
    }

    let mut clips = Vec::with_capacity(c.n_clips);
    for i in 0..c.n_clips {
        let classes: Vec<usize> = match c.task {
            Task::Multiclass => vec![i % c.n_classes],
            Task::Multilabel => {
                let k = rng.random_range(1..=3.min(c.n_classes));
                let mut picked = sample(&mut rng, c.n_classes, k).into_vec();
                picked.sort_unstable();
                picked
            }
        };
        let mut labels = vec![0u8; c.n_classes];
        classes.iter().for_each(|&k| labels[k] = 1);
        let observed_mask: Vec<u8> = match c.task {
            Task::Multiclass => vec![1; c.n_classes],
            Task::Multilabel => (0..c.n_classes).map(|_| (rng.random::<f64>() >= c.missing_fraction) as u8).collect(),
        };

        let center: Vec<f64> =
            (0..c.dim).map(|d| classes.iter().map(|&k| means[k][d]).sum::<f64>() * c.class_separation).collect();
        let data: Vec<f32> = (0..c.n_layers * c.steps_per_clip)
            .flat_map(|_| center.iter().map(|mu| (mu + gaussian(&mut rng)) as f32).collect::<Vec<_>>())
            .collect();
        let tensor = EmbeddingTensor::new(c.n_layers, c.steps_per_clip, c.dim, data)?;
        let file = format!("clip_{i:05}.tseb");
        write_embedding(&tensor, out_dir.join(&file))?;
        clips.push(ClipRecord {
            clip_id: format!("clip_{i:05}"),
            labels,
            observed_mask,
            split: Some(split[i]),
            fold: (c.cv_folds >= 2).then_some((rank[i] % c.cv_folds) as u32),
            embedding_path: file,
            duration_s: c.duration_s,
        });
    }

    let manifest = DatasetManifest {
        task: c.task,
        class_names: (0..c.n_classes).map(|k| format!("class_{k}")).collect(),
        embedding_meta: EmbeddingMeta {
            model_id: c.model_id.clone(),
            ts_seconds: c.ts_seconds,
            n_layers: c.n_layers,
            dim: c.dim,
        },
        clips,
        cv_folds: (c.cv_folds >= 2).then_some(c.cv_folds),
        root: out_dir.to_path_buf(),
    };
    manifest.validate()?;
    manifest.save(out_dir.join("manifest.json"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_gives_identical_bytes() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let config =
            SynthConfig { n_clips: 12, task: Task::Multilabel, missing_fraction: 0.2, ..SynthConfig::default() };
        let ma = generate_synthetic(&config, a.path()).unwrap();
        let mb = generate_synthetic(&config, b.path()).unwrap();
        assert_eq!(ma.clips, mb.clips);
        for name in ["manifest.json", "clip_00000.tseb", "clip_00011.tseb"] {
            assert_eq!(fs::read(a.path().join(name)).unwrap(), fs::read(b.path().join(name)).unwrap());
        }
        let loaded = DatasetManifest::load(a.path().join("manifest.json")).unwrap();
        loaded.validate_files().unwrap();
        assert!(loaded.clips.iter().all(|c| (1..=3).contains(&c.labels.iter().filter(|&&v| v == 1).count())));
    }

    #[test]
    fn splits_and_folds() {
        let dir = tempfile::tempdir().unwrap();
        let m = generate_synthetic(&SynthConfig { n_clips: 50, ..SynthConfig::default() }, dir.path()).unwrap();
        assert_eq!(m.clips_in(Split::Test).count(), 15);
        assert_eq!(m.clips_in(Split::Train).count(), 35);
        for f in 0..5 {
            assert_eq!(m.clips.iter().filter(|c| c.fold == Some(f)).count(), 10);
        }
    }

    #[test]
    fn separation_moves_the_class_means() {
        let dir = tempfile::tempdir().unwrap();
        let config = SynthConfig {
            n_clips: 4,
            n_classes: 2,
            steps_per_clip: 400,
            class_separation: 10.0,
            ..SynthConfig::default()
        };
        let m = generate_synthetic(&config, dir.path()).unwrap();
        let mean_norm = |i: usize| {
            let t = m.load_embedding(&m.clips[i]).unwrap();
            let mut mu = vec![0.0f64; t.dim()];
            for s in 0..t.n_steps() {
                for (a, &b) in mu.iter_mut().zip(t.step(0, s)) {
                    *a += b as f64 / t.n_steps() as f64;
                }
            }
            mu.iter().map(|x| x * x).sum::<f64>().sqrt()
        };
        // Unit mean scaled by 10; the sampling noise of a 400-step mean is ~0.2 in norm.
        assert!((mean_norm(0) - 10.0).abs() < 1.0);
    }
}
