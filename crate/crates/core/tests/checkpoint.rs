//! Checkpoint persistence and the ways a damaged directory is rejected.

use std::path::Path;

use trajtok::checkpoint::{Checkpoint, INDEX_FILE};
use trajtok::config::Config;
use trajtok::model::Model;
use trajtok::train::TrainState;

fn small() -> Checkpoint {
    let mut config = Config::default();
    config.model.encoder.stage_widths = vec![4, 4, 4];
    config.model.encoder.dim = 8;
    config.model.segmenter.queries = 3;
    config.model.segmenter.heads = 2;
    config.model.traj.heads = 2;
    let (_, params) = Model::new(config.model.clone(), 3).unwrap();
    let mut state = TrainState::fresh(params.clone());
    state.step = 17;
    state.m = params.clone();
    state.v = params;
    Checkpoint { config, state }
}

fn saved() -> (tempfile::TempDir, Checkpoint) {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = small();
    ckpt.save(dir.path()).unwrap();
    (dir, ckpt)
}

fn load_error(dir: &Path) -> String {
    Checkpoint::load(dir).unwrap_err().to_string()
}

fn edit_index(dir: &Path, f: impl FnOnce(String) -> String) {
    let path = dir.join(INDEX_FILE);
    let text = std::fs::read_to_string(&path).unwrap();
    std::fs::write(&path, f(text)).unwrap();
}

#[test]
fn round_trip_is_bit_exact() {
    let (dir, ckpt) = saved();
    let back = Checkpoint::load(dir.path()).unwrap();
    assert_eq!(back.config, ckpt.config);
    assert!(back.state.bit_eq(&ckpt.state));
}

#[test]
fn other_versions_are_refused() {
    let (dir, _) = saved();
    edit_index(dir.path(), |t| t.replace("version 1", "version 2"));
    let e = load_error(dir.path());
    assert!(e.contains("version 2"), "{e}");
    assert!(e.contains(INDEX_FILE), "{e}");
}

#[test]
fn unknown_parameters_are_refused() {
    let (dir, _) = saved();
    edit_index(dir.path(), |t| t + "param bogus.weight\n");
    assert!(load_error(dir.path()).contains("bogus.weight"));
}

#[test]
fn unlisted_parameters_are_refused() {
    let (dir, ckpt) = saved();
    let (first, _) = ckpt.state.params.iter().next().unwrap();
    let first = first.to_string();
    edit_index(dir.path(), |t| t.replace(&format!("param {first}\n"), ""));
    assert!(load_error(dir.path()).contains(&first));
}

#[test]
fn missing_tensor_files_are_named() {
    let (dir, ckpt) = saved();
    let (name, _) = ckpt.state.params.iter().next().unwrap();
    let path = dir.path().join("adam_v").join(format!("{name}.ttkt"));
    std::fs::remove_file(&path).unwrap();
    let e = load_error(dir.path());
    assert!(e.contains(&*path.to_string_lossy()), "{e}");
}

#[test]
fn damaged_tensor_files_are_named() {
    let (dir, ckpt) = saved();
    let (name, _) = ckpt.state.params.iter().next().unwrap();
    let path = dir.path().join("params").join(format!("{name}.ttkt"));
    let bytes = std::fs::read(&path).unwrap();

    std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
    let e = load_error(dir.path());
    assert!(e.contains(&*path.to_string_lossy()), "{e}");

    let mut bad_magic = bytes.clone();
    bad_magic[0] ^= 0xFF;
    std::fs::write(&path, &bad_magic).unwrap();
    let e = load_error(dir.path());
    assert!(e.contains(&*path.to_string_lossy()), "{e}");
}
