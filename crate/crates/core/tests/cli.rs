//! End-to-end runs of the `trajtok` binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn trajtok(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_trajtok"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn golden(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/golden")
        .join(name)
}

fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

fn ok(args: &[&str]) -> String {
    let out = trajtok(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).expect("utf-8 output")
}

fn read_dir_sorted(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .map(|p| {
            let name = p.file_name().unwrap().to_string_lossy().into_owned();
            (name, std::fs::read(&p).unwrap())
        })
        .collect();
    files.sort();
    files
}

#[test]
fn usage_errors_exit_with_two() {
    for args in [
        &["frobnicate"][..],
        &["flops"],
        &["flops", "--frames", "0"],
        &["flops", "--frames", "8,x"],
        &[
            "tokenize", "--ckpt", "a", "--video", "b", "--out", "c", "--n", "3",
        ],
    ] {
        let out = trajtok(args);
        assert_eq!(out.status.code(), Some(2), "{args:?}");
        assert!(!out.stderr.is_empty());
    }
}

#[test]
fn runtime_errors_exit_with_one_and_name_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nowhere");
    let out = trajtok(&["eval", "--ckpt", s(&missing), "--data", s(&missing)]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.starts_with("error:"), "{err}");
    assert!(err.contains("nowhere"), "{err}");
}

#[test]
fn help_exits_cleanly() {
    let out = trajtok(&["--help"]);
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("tokenize"));
}

#[test]
fn flops_prints_one_row_per_frame_count() {
    let text = ok(&["flops", "--frames", "16,32,64,128"]);
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let vit = header.iter().position(|h| h.contains("vit3d")).unwrap();
    let rows: Vec<Vec<f64>> = lines
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 4);
    assert_eq!(
        rows.iter().map(|r| r[0]).collect::<Vec<_>>(),
        [16.0, 32.0, 64.0, 128.0]
    );
    assert!(rows.windows(2).all(|w| w[1][vit] > w[0][vit]));
}

#[test]
fn selftest_passes() {
    let text = ok(&["selftest"]);
    assert!(text.lines().count() > 10);
    assert!(text.lines().all(|l| l.starts_with("PASS")), "{text}");
}

#[test]
fn interrupted_training_resumes_exactly() {
    let root = tempfile::tempdir().unwrap();
    let (data, whole, split) = (
        root.path().join("data"),
        root.path().join("whole"),
        root.path().join("split"),
    );
    let cfg = golden("e2e.cfg");
    ok(&["gen-data", "--config", s(&cfg), "--out", s(&data)]);
    ok(&["train-seg", "--data", s(&data), "--out", s(&whole)]);
    ok(&[
        "train-seg",
        "--data",
        s(&data),
        "--out",
        s(&split),
        "--until",
        "3",
    ]);
    let partial = std::fs::read_to_string(split.join("index.txt")).unwrap();
    assert!(partial.contains("step 3\n"));
    ok(&["train-seg", "--data", s(&data), "--out", s(&split)]);

    for group in ["params", "adam_m", "adam_v"] {
        assert_eq!(
            read_dir_sorted(&whole.join(group)),
            read_dir_sorted(&split.join(group)),
            "{group}"
        );
    }
    assert_eq!(
        std::fs::read(whole.join("metrics.log")).unwrap(),
        std::fs::read(split.join("metrics.log")).unwrap()
    );
    assert_eq!(
        std::fs::read(whole.join("metrics.log")).unwrap(),
        std::fs::read(golden("metrics.log")).unwrap()
    );

    // A different configuration must not silently continue the run.
    let other = root.path().join("other.cfg");
    let text = std::fs::read_to_string(&cfg)
        .unwrap()
        .replace("steps = 8", "steps = 9");
    std::fs::write(&other, text).unwrap();
    let out = trajtok(&[
        "train-seg",
        "--config",
        s(&other),
        "--data",
        s(&data),
        "--out",
        s(&split),
    ]);
    assert_eq!(out.status.code(), Some(1));

    // Tokenizing twice gives identical files.
    let video = data.join("video_0000.ttkt");
    let (a, b) = (root.path().join("tok_a"), root.path().join("tok_b"));
    for dir in [&a, &b] {
        ok(&[
            "tokenize",
            "--ckpt",
            s(&whole),
            "--video",
            s(&video),
            "--out",
            s(dir),
            "--n",
            "2",
        ]);
    }
    let files = read_dir_sorted(&a);
    assert!(files.iter().any(|(n, _)| n.ends_with(".ttkt")));
    assert!(files.iter().any(|(n, _)| n.ends_with(".pgm")));
    assert_eq!(files, read_dir_sorted(&b));
}
