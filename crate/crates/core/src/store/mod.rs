//! Embedding storage, dataset manifests, segmentation arithmetic, and split generation.

mod manifest;
mod split;
mod tensor;

use std::path::{Path, PathBuf};

use thiserror::Error;

pub use manifest::{ClipRecord, DatasetManifest, EmbeddingMeta, Split, Task};
pub use split::{carve, carve_validation, fold_assignment, fold_splits, FoldSplit};
pub use tensor::{read_embedding, write_embedding, EmbeddingTensor, TSEB_HEADER_LEN, TSEB_MAGIC, TSEB_VERSION};

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic {0:?}, expected \"TSEB\"")]
    BadMagic([u8; 4]),
    #[error("unsupported TSEB version {0}")]
    UnsupportedVersion(u32),
    #[error("file too short for a TSEB header ({len} bytes)")]
    TruncatedHeader { len: usize },
    #[error("payload is {actual} bytes, header requires {expected}")]
    Truncated { expected: usize, actual: usize },
    #[error("non-finite value at flat index {index}")]
    NonFinite { index: usize },
    #[error("shape error: {0}")]
    Shape(String),
    #[error("manifest error: {0}")]
    Manifest(String),
    #[error("manifest json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("split error: {0}")]
    Split(String),
}

impl StoreError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        StoreError::Io { path: path.to_path_buf(), source }
    }
}

/// Loads a manifest and checks every embedding file it references.
pub fn validate_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest, StoreError> {
    let manifest = DatasetManifest::load(path)?;
    manifest.validate_files()?;
    Ok(manifest)
}

/// Number of consecutive non-overlapping segments of `ts_seconds` that fit in
/// `n_samples` samples at `sample_rate`. The tail remainder is dropped, so a
/// clip shorter than one segment yields 0.
pub fn segment_count(n_samples: u64, sample_rate: f64, ts_seconds: f64) -> u64 {
    assert!(sample_rate > 0.0 && ts_seconds > 0.0, "sample_rate and ts_seconds must be positive");
    let segment_len = ts_seconds * sample_rate;
    let ratio = n_samples as f64 / segment_len;
    // Guard against 10.0 / (0.1 * 100.0)-style representation error just under an integer.
    let nearest = ratio.round();
    if (ratio - nearest).abs() <= 1e-9 * nearest.max(1.0) {
        nearest as u64
    } else {
        ratio.floor() as u64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn segment_count_examples() {
        assert_eq!(segment_count(160_000, 16_000.0, 1.0), 10);
        assert_eq!(segment_count(160_000, 16_000.0, 10.0), 1);
        assert_eq!(segment_count(80_000, 16_000.0, 10.0), 0);
        assert_eq!(segment_count(160_000, 16_000.0, 3.0), 3);
        assert_eq!(segment_count(441_000, 44_100.0, 0.1), 100);
    }

    proptest! {
        #[test]
        fn segment_count_monotone(
            n in 1u64..2_000_000,
            extra in 0u64..100_000,
            sr in prop::sample::select(vec![8_000.0, 16_000.0, 32_000.0, 44_100.0, 48_000.0]),
            ts in 0.05f64..20.0,
            dts in 0.0f64..10.0,
        ) {
            prop_assert!(segment_count(n, sr, ts + dts) <= segment_count(n, sr, ts));
            prop_assert!(segment_count(n + extra, sr, ts) >= segment_count(n, sr, ts));
        }
    }
}
