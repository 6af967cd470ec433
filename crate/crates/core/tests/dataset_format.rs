use std::fs;

use mbsl_core::datagen::{generate, load, save, GeneratorConfig, Task, MANIFEST_FILE};
use mbsl_core::Error;

fn small(task: Task) -> GeneratorConfig {
    GeneratorConfig {
        n_windows: 24,
        window_len: 48,
        task,
        ..GeneratorConfig::default()
    }
}

fn dir_bytes(dir: &std::path::Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (
                e.file_name().to_string_lossy().into_owned(),
                fs::read(e.path()).unwrap(),
            )
        })
        .collect();
    out.sort();
    out
}

#[test]
fn round_trip_is_byte_exact() {
    for task in [Task::Regression, Task::Classification { n_classes: 3 }] {
        let ds = generate(&small(task)).unwrap();
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        save(&ds, a.path()).unwrap();
        let back = load(a.path()).unwrap();
        assert_eq!(back, ds);
        save(&back, b.path()).unwrap();
        assert_eq!(dir_bytes(a.path()), dir_bytes(b.path()));
    }
}

#[test]
fn truncated_modality_file_is_a_format_error() {
    let ds = generate(&small(Task::Regression)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save(&ds, dir.path()).unwrap();
    let path = dir.path().join("acc.bin");
    let bytes = fs::read(&path).unwrap();
    fs::write(&path, &bytes[..bytes.len() - 6]).unwrap();
    match load(dir.path()) {
        Err(Error::Format { field, .. }) => assert!(field.contains("acc"), "{field}"),
        other => panic!("expected format error, got {other:?}"),
    }
}

#[test]
fn edited_channel_count_is_a_format_error() {
    let ds = generate(&small(Task::Regression)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save(&ds, dir.path()).unwrap();
    let path = dir.path().join(MANIFEST_FILE);
    let mut manifest: serde_json::Value = serde_json::from_slice(&fs::read(&path).unwrap()).unwrap();
    manifest["modalities"][1]["channels"] = serde_json::json!(2);
    fs::write(&path, serde_json::to_vec(&manifest).unwrap()).unwrap();
    match load(dir.path()) {
        Err(Error::Format { field, .. }) => assert!(field.contains("channels"), "{field}"),
        other => panic!("expected format error, got {other:?}"),
    }
}

#[test]
fn missing_directory_and_non_finite_values() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(load(&dir.path().join("absent")), Err(Error::Format { .. })));

    let ds = generate(&small(Task::Regression)).unwrap();
    save(&ds, dir.path()).unwrap();
    let path = dir.path().join("ppg.bin");
    let mut bytes = fs::read(&path).unwrap();
    bytes[..4].copy_from_slice(&f32::NAN.to_le_bytes());
    fs::write(&path, bytes).unwrap();
    assert!(matches!(load(dir.path()), Err(Error::Format { .. })));
}
