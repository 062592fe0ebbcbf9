use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{read_embedding, EmbeddingTensor, StoreError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Multilabel,
    Multiclass,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipRecord {
    pub clip_id: String,
    pub labels: Vec<u8>,
    pub observed_mask: Vec<u8>,
    #[serde(default)]
    pub split: Option<Split>,
    /// Zero-based cross-validation fold.
    #[serde(default)]
    pub fold: Option<u32>,
    pub embedding_path: String,
    pub duration_s: f64,
}

impl ClipRecord {
    /// Index of the positive class of a multiclass clip.
    pub fn class_index(&self) -> Option<usize> {
        self.labels.iter().position(|&v| v == 1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingMeta {
    pub model_id: String,
    pub ts_seconds: f64,
    pub n_layers: usize,
    pub dim: usize,
}

/// A dataset of clips plus the metadata of the embeddings extracted for it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub task: Task,
    pub class_names: Vec<String>,
    pub embedding_meta: EmbeddingMeta,
    pub clips: Vec<ClipRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cv_folds: Option<usize>,
    /// Directory that relative `embedding_path`s are resolved against.
    #[serde(skip)]
    pub root: PathBuf,
}

impl DatasetManifest {
    /// Load and structurally validate a manifest. Embedding files are not touched;
    /// see [`DatasetManifest::validate_files`].
    pub fn load(path: impl AsRef<Path>) -> Result<Self, StoreError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| StoreError::io(path, e))?;
        let mut manifest: DatasetManifest = serde_json::from_str(&text)?;
        manifest.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), StoreError> {
        let path = path.as_ref();
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(path, text).map_err(|e| StoreError::io(path, e))
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn embedding_path(&self, clip: &ClipRecord) -> PathBuf {
        let p = Path::new(&clip.embedding_path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn load_embedding(&self, clip: &ClipRecord) -> Result<EmbeddingTensor, StoreError> {
        let tensor = read_embedding(self.embedding_path(clip))?;
        self.check_tensor(clip, &tensor)?;
        Ok(tensor)
    }

    fn check_tensor(&self, clip: &ClipRecord, tensor: &EmbeddingTensor) -> Result<(), StoreError> {
        let meta = &self.embedding_meta;
        if tensor.n_layers() != meta.n_layers || tensor.dim() != meta.dim {
            return Err(StoreError::Manifest(format!(
                "clip {}: embedding is {} layers x {} dim, manifest declares {} x {}",
                clip.clip_id,
                tensor.n_layers(),
                tensor.dim(),
                meta.n_layers,
                meta.dim
            )));
        }
        Ok(())
    }

    pub fn clips_in(&self, split: Split) -> impl Iterator<Item = &ClipRecord> {
        self.clips.iter().filter(move |c| c.split == Some(split))
    }

    /// Structural checks that need no file access.
    pub fn validate(&self) -> Result<(), StoreError> {
        let n = self.class_names.len();
        if n == 0 {
            return Err(StoreError::Manifest("class_names is empty".into()));
        }
        let meta = &self.embedding_meta;
        if meta.n_layers == 0 || meta.dim == 0 {
            return Err(StoreError::Manifest("embedding_meta n_layers and dim must be >= 1".into()));
        }
        if !(meta.ts_seconds > 0.0 && meta.ts_seconds.is_finite()) {
            return Err(StoreError::Manifest("embedding_meta.ts_seconds must be > 0".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for clip in &self.clips {
            if !seen.insert(clip.clip_id.as_str()) {
                return Err(StoreError::Manifest(format!("duplicate clip_id {}", clip.clip_id)));
            }
            let bad = |msg: &str| StoreError::Manifest(format!("clip {}: {msg}", clip.clip_id));
            if clip.labels.len() != n || clip.observed_mask.len() != n {
                return Err(bad(&format!(
                    "labels/observed_mask lengths {}/{} differ from {n} classes",
                    clip.labels.len(),
                    clip.observed_mask.len()
                )));
            }
            if clip.labels.iter().chain(&clip.observed_mask).any(|&v| v > 1) {
                return Err(bad("labels and observed_mask must be 0/1"));
            }
            if self.task == Task::Multiclass {
                if clip.labels.iter().filter(|&&v| v == 1).count() != 1 {
                    return Err(bad("multiclass clip must have exactly one positive label"));
                }
                if clip.observed_mask.iter().any(|&v| v != 1) {
                    return Err(bad("multiclass clip must be fully observed"));
                }
            }
            if let (Some(fold), Some(k)) = (clip.fold, self.cv_folds) {
                if fold as usize >= k {
                    return Err(bad(&format!("fold {fold} out of range for cv_folds = {k}")));
                }
            }
        }
        Ok(())
    }

    /// Checks that every referenced embedding exists and matches `embedding_meta`.
    pub fn validate_files(&self) -> Result<(), StoreError> {
        for clip in &self.clips {
            self.load_embedding(clip)?;
        }
        Ok(())
    }
}
