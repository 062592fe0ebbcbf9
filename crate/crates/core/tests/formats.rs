//! The file formats other tools write for this crate to read.

use std::fs;

use tsprobe::segment_count;
use tsprobe::store::{read_embedding, validate_manifest, DatasetManifest, Split, StoreError, Task};

fn tseb(version: u32, shape: [u32; 3], payload: &[f32]) -> Vec<u8> {
    let mut bytes = b"TSEB".to_vec();
    for v in [version, shape[0], shape[1], shape[2]] {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    for v in payload {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    bytes
}

#[test]
fn hand_built_tseb_is_read_in_layer_step_dim_order() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("clip.tseb");
    let payload: Vec<f32> = (0..24).map(|i| i as f32 * 0.5).collect();
    fs::write(&path, tseb(1, [2, 3, 4], &payload)).unwrap();
    let t = read_embedding(&path).unwrap();
    assert_eq!((t.n_layers(), t.n_steps(), t.dim()), (2, 3, 4));
    assert_eq!(t.step(1, 2), &[10.0, 10.5, 11.0, 11.5]);
    assert_eq!(t.step(0, 1)[0], 2.0);
}

#[test]
fn tseb_error_kinds_are_distinct() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.tseb");
    let mut bad_magic = tseb(1, [1, 1, 1], &[0.0]);
    bad_magic[..4].copy_from_slice(b"XXXX");
    let cases: Vec<(Vec<u8>, fn(&StoreError) -> bool)> = vec![
        (bad_magic, |e| matches!(e, StoreError::BadMagic(_))),
        (tseb(2, [1, 1, 1], &[0.0]), |e| matches!(e, StoreError::UnsupportedVersion(2))),
        (tseb(1, [2, 3, 4], &[0.0; 24])[..110].to_vec(), |e| {
            matches!(e, StoreError::Truncated { expected: 96, actual: 90 })
        }),
        (tseb(1, [1, 1, 2], &[1.0, f32::INFINITY]), |e| matches!(e, StoreError::NonFinite { index: 1 })),
        (b"TSEB\x01\x00".to_vec(), |e| matches!(e, StoreError::TruncatedHeader { .. })),
    ];
    for (bytes, check) in cases {
        fs::write(&path, bytes).unwrap();
        let err = read_embedding(&path).unwrap_err();
        assert!(check(&err), "unexpected {err:?}");
    }
}

#[test]
fn extractor_style_manifest_loads() {
    let dir = tempfile::tempdir().unwrap();
    fs::create_dir(dir.path().join("emb")).unwrap();
    let steps = segment_count(5 * 32_000, 32_000.0, 1.0) as u32;
    for id in ["a", "b", "c"] {
        fs::write(
            dir.path().join(format!("emb/{id}.tseb")),
            tseb(1, [12, steps, 3], &vec![0.25; 12 * steps as usize * 3]),
        )
        .unwrap();
    }
    let manifest = r#"{
        "task": "multilabel",
        "class_names": ["guitar", "piano"],
        "embedding_meta": {"model_id": "passt_s", "ts_seconds": 1.0, "n_layers": 12, "dim": 3},
        "clips": [
            {"clip_id": "a", "labels": [1, 0], "observed_mask": [1, 0], "split": "train", "fold": null, "embedding_path": "emb/a.tseb", "duration_s": 5.0},
            {"clip_id": "b", "labels": [0, 1], "observed_mask": [1, 1], "split": "valid", "embedding_path": "emb/b.tseb", "duration_s": 5.0},
            {"clip_id": "c", "labels": [0, 0], "observed_mask": [1, 1], "split": "test", "embedding_path": "emb/c.tseb", "duration_s": 5.0}
        ]
    }"#;
    let path = dir.path().join("manifest.json");
    fs::write(&path, manifest).unwrap();
    let m = validate_manifest(&path).unwrap();
    assert_eq!(m.task, Task::Multilabel);
    assert_eq!(m.clips_in(Split::Valid).count(), 1);
    let t = m.load_embedding(&m.clips[2]).unwrap();
    assert_eq!((t.n_layers(), t.n_steps()), (12, 5));
}

#[test]
fn manifest_contract_violations_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("a.tseb"), tseb(1, [1, 2, 4], &[0.0; 8])).unwrap();
    let write = |clip: &str, extra: &str| {
        let text = format!(
            r#"{{"task": "multiclass", "class_names": ["dog", "rain"], {extra}
              "embedding_meta": {{"model_id": "beats_iter3plus", "ts_seconds": 5.0, "n_layers": 1, "dim": 4}},
              "clips": [{clip}]}}"#
        );
        let path = dir.path().join("m.json");
        fs::write(&path, text).unwrap();
        path
    };
    let ok = r#"{"clip_id": "a", "labels": [0, 1], "observed_mask": [1, 1], "fold": 0, "embedding_path": "a.tseb", "duration_s": 5.0}"#;
    DatasetManifest::load(write(ok, r#""cv_folds": 5,"#)).unwrap().validate_files().unwrap();

    let two_hot = ok.replace("[0, 1]", "[1, 1]");
    assert!(DatasetManifest::load(write(&two_hot, "")).is_err());
    let short = ok.replace(r#""labels": [0, 1]"#, r#""labels": [1]"#);
    assert!(DatasetManifest::load(write(&short, "")).is_err());
    let fold_too_big = ok.replace(r#""fold": 0"#, r#""fold": 5"#);
    assert!(DatasetManifest::load(write(&fold_too_big, r#""cv_folds": 5,"#)).is_err());
    let duplicate = format!("{ok}, {ok}");
    assert!(DatasetManifest::load(write(&duplicate, "")).is_err());
    let wrong_dim = write(ok, "").to_path_buf();
    let text = fs::read_to_string(&wrong_dim).unwrap().replace(r#""dim": 4"#, r#""dim": 5"#);
    fs::write(&wrong_dim, text).unwrap();
    assert!(matches!(validate_manifest(&wrong_dim), Err(StoreError::Manifest(_))));
}
