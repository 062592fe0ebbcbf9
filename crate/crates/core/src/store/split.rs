use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ClipRecord, DatasetManifest, Split, StoreError};

/// Uniform seeded partition of the manifest's training clips into (train, valid),
/// with `round(fraction * n)` clips in the validation part.
pub fn carve_validation(
    manifest: &DatasetManifest,
    fraction: f64,
    seed: u64,
) -> Result<(Vec<&ClipRecord>, Vec<&ClipRecord>), StoreError> {
    carve(manifest.clips_in(Split::Train).collect(), fraction, seed)
}

/// Same partition rule as [`carve_validation`] over an arbitrary clip list.
pub fn carve<T: Clone>(items: Vec<T>, fraction: f64, seed: u64) -> Result<(Vec<T>, Vec<T>), StoreError> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(StoreError::Split(format!("validation fraction must be in (0, 1), got {fraction}")));
    }
    if items.is_empty() {
        return Err(StoreError::Split("training split is empty".into()));
    }
    let n_valid = (fraction * items.len() as f64).round() as usize;
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut is_valid = vec![false; items.len()];
    for &i in &order[..n_valid] {
        is_valid[i] = true;
    }
    // Both halves keep the original relative order.
    let (mut train, mut valid) = (Vec::new(), Vec::new());
    for (item, v) in items.into_iter().zip(is_valid) {
        if v {
            valid.push(item);
        } else {
            train.push(item);
        }
    }
    Ok((train, valid))
}

#[derive(Debug, Clone)]
pub struct FoldSplit<'a> {
    pub fold: usize,
    pub train: Vec<&'a ClipRecord>,
    pub test: Vec<&'a ClipRecord>,
}

/// Fold index of every clip, in manifest order. Predefined `fold` assignments are
/// used when every clip carries one; when none do, clip `i` goes to fold `i % k`.
pub fn fold_assignment(manifest: &DatasetManifest, k: usize) -> Result<Vec<usize>, StoreError> {
    if k < 2 {
        return Err(StoreError::Split(format!("need k >= 2 folds, got {k}")));
    }
    let with_fold = manifest.clips.iter().filter(|c| c.fold.is_some()).count();
    if with_fold != 0 && with_fold != manifest.clips.len() {
        return Err(StoreError::Split(format!(
            "{} of {} clips are missing a fold assignment",
            manifest.clips.len() - with_fold,
            manifest.clips.len()
        )));
    }
    let mut assignment = Vec::with_capacity(manifest.clips.len());
    for (i, clip) in manifest.clips.iter().enumerate() {
        let fold = match clip.fold {
            Some(f) => f as usize,
            None => i % k,
        };
        if fold >= k {
            return Err(StoreError::Split(format!("clip {} has fold {fold}, but k = {k}", clip.clip_id)));
        }
        assignment.push(fold);
    }
    for fold in 0..k {
        let n_test = assignment.iter().filter(|&&f| f == fold).count();
        if n_test == 0 || n_test == assignment.len() {
            return Err(StoreError::Split(format!("fold {fold} is degenerate (empty train or test side)")));
        }
    }
    Ok(assignment)
}

/// `k` (train, test) pairs over all clips, following [`fold_assignment`].
pub fn fold_splits(manifest: &DatasetManifest, k: usize) -> Result<Vec<FoldSplit<'_>>, StoreError> {
    let assignment = fold_assignment(manifest, k)?;
    let splits: Vec<FoldSplit> = (0..k)
        .map(|fold| {
            let (test, train): (Vec<_>, Vec<_>) = manifest.clips.iter().zip(&assignment).partition(|(_, &f)| f == fold);
            FoldSplit {
                fold,
                train: train.into_iter().map(|(c, _)| c).collect(),
                test: test.into_iter().map(|(c, _)| c).collect(),
            }
        })
        .collect();
    Ok(splits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::{EmbeddingMeta, Task};
    use std::collections::HashSet;

    fn manifest(n: usize, fold: impl Fn(usize) -> Option<u32>) -> DatasetManifest {
        DatasetManifest {
            task: Task::Multiclass,
            class_names: vec!["a".into(), "b".into()],
            embedding_meta: EmbeddingMeta { model_id: "m".into(), ts_seconds: 1.0, n_layers: 1, dim: 1 },
            clips: (0..n)
                .map(|i| ClipRecord {
                    clip_id: format!("c{i}"),
                    labels: vec![1, 0],
                    observed_mask: vec![1, 1],
                    split: Some(Split::Train),
                    fold: fold(i),
                    embedding_path: format!("c{i}.tseb"),
                    duration_s: 5.0,
                })
                .collect(),
            cv_folds: None,
            root: Default::default(),
        }
    }

    fn ids(clips: &[&ClipRecord]) -> HashSet<String> {
        clips.iter().map(|c| c.clip_id.clone()).collect()
    }

    #[test]
    fn carve_cardinality_and_determinism() {
        let m = manifest(100, |_| None);
        let (t, v) = carve_validation(&m, 0.15, 0).unwrap();
        assert_eq!((t.len(), v.len()), (85, 15));
        let (t2, v2) = carve_validation(&m, 0.15, 0).unwrap();
        assert_eq!(ids(&v), ids(&v2));
        assert_eq!(ids(&t), ids(&t2));
        assert!(ids(&t).is_disjoint(&ids(&v)));
        assert_eq!(ids(&t).union(&ids(&v)).count(), 100);

        let m10 = manifest(10, |_| None);
        let (t, v) = carve_validation(&m10, 0.30, 3).unwrap();
        assert_eq!((t.len(), v.len()), (7, 3));
    }

    #[test]
    fn carve_seeds_differ() {
        let m = manifest(40, |_| None);
        let (_, v0) = carve_validation(&m, 0.3, 0).unwrap();
        let (_, v1) = carve_validation(&m, 0.3, 1).unwrap();
        assert_ne!(ids(&v0), ids(&v1));
    }

    #[test]
    fn carve_errors() {
        let mut m = manifest(5, |_| None);
        assert!(carve_validation(&m, 1.0, 0).is_err());
        m.clips.iter_mut().for_each(|c| c.split = Some(Split::Test));
        assert!(matches!(carve_validation(&m, 0.2, 0), Err(StoreError::Split(_))));
    }

    #[test]
    fn predefined_folds_2000_clips() {
        let m = manifest(2000, |i| Some((i % 5) as u32));
        let splits = fold_splits(&m, 5).unwrap();
        assert_eq!(splits.len(), 5);
        let mut seen = HashSet::new();
        for s in &splits {
            assert_eq!((s.train.len(), s.test.len()), (1600, 400));
            for c in &s.test {
                assert!(seen.insert(c.clip_id.clone()), "duplicate test clip");
            }
        }
        assert_eq!(seen.len(), 2000);
    }

    #[test]
    fn round_robin_two_folds() {
        let m = manifest(10, |_| None);
        let splits = fold_splits(&m, 2).unwrap();
        assert!(splits.iter().all(|s| s.train.len() == 5 && s.test.len() == 5));
        assert_eq!(splits[0].test[1].clip_id, "c2");
    }

    #[test]
    fn fold_errors() {
        let m = manifest(10, |_| Some(0));
        assert!(fold_splits(&m, 1).is_err());
        assert!(fold_splits(&m, 2).is_err(), "all clips in one fold is degenerate");
        assert!(fold_splits(&manifest(10, |i| Some(i as u32)), 5).is_err());
        assert!(fold_splits(&manifest(10, |i| (i > 0).then_some(0)), 2).is_err());
    }
}
