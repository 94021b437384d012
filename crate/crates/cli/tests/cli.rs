use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use pointcl::dataset::{load_dataset, DatasetFormat, Split};

fn pointcl(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pointcl"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap()
}

const SMALL: &[&str] = &["--per-class", "12", "--test-per-class", "6", "--points", "32", "--pairs", "8"];

fn with(base: &[&str], extra: &[&str]) -> Vec<String> {
    base.iter().chain(extra).map(|s| s.to_string()).collect()
}

fn run(dir: &Path, args: &[String]) -> Output {
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    pointcl(dir, &refs)
}

#[test]
fn gen_data_counts_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let args = ["gen-data", "--classes", "sphere,cube", "--per-class", "50", "--points", "128", "--seed", "1"];
    let a = run(dir.path(), &with(&args, &["--out", "a"]));
    assert!(a.status.success(), "{}", String::from_utf8_lossy(&a.stderr));
    run(dir.path(), &with(&args, &["--out", "b"]));

    let train = dir.path().join("a/train.pcds");
    let ds = load_dataset(&train, DatasetFormat::PackedBinary, Split::Train).unwrap();
    assert_eq!(ds.len(), 100);
    assert_eq!(ds.num_classes, 2);
    assert!(ds.samples.iter().all(|s| s.len() == 128));
    for f in ["train.pcds", "test.pcds", "manifest.txt"] {
        assert_eq!(
            fs::read(dir.path().join("a").join(f)).unwrap(),
            fs::read(dir.path().join("b").join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn unknown_class_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = pointcl(dir.path(), &["gen-data", "--classes", "sphere,blob", "--out", "x"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("blob"));
    assert!(!dir.path().join("x").exists());
}

#[test]
fn config_file_is_checked_against_the_schema() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.toml"), "pairs = 8\ntemperature = 0.1\n").unwrap();
    let out = pointcl(dir.path(), &["pretrain", "--config", "bad.toml"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("temperature"));

    let out = pointcl(dir.path(), &["pretrain", "--tau", "0", "--out", "t"]);
    assert_eq!(out.status.code(), Some(2));
    let out = pointcl(dir.path(), &["pretrain", "--transform", "wobble", "--out", "t"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn pretrain_run_directory_reproduces_itself() {
    let dir = tempfile::tempdir().unwrap();
    let args = with(
        &["pretrain", "--transform", "rotate:y:180", "--tau", "0.1", "--epochs", "2", "--out", "first"],
        SMALL,
    );
    let out = run(dir.path(), &args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let first = dir.path().join("first");
    for f in ["checkpoint.pclm", "loss.csv", "config.toml"] {
        assert!(first.join(f).exists(), "{f}");
    }
    let csv = fs::read_to_string(first.join("loss.csv")).unwrap();
    assert!(csv.starts_with("step,epoch,lr,bn_momentum,loss\n"));
    assert_eq!(csv.lines().count(), 1 + 2 * 48 / 8);

    // the resolved config alone is enough to repeat the run
    let again = pointcl(dir.path(), &["pretrain", "--config", "first/config.toml", "--out", "second"]);
    assert!(again.status.success());
    for f in ["checkpoint.pclm", "loss.csv"] {
        assert_eq!(
            fs::read(first.join(f)).unwrap(),
            fs::read(dir.path().join("second").join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn flags_override_the_file() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.toml"), "epochs = 5\npairs = 4\nper_class = 3\n").unwrap();
    let out = pointcl(dir.path(), &["gen-data", "--config", "c.toml", "--per-class", "2", "--out", "g"]);
    assert!(out.status.success());
    let resolved = fs::read_to_string(dir.path().join("g/config.toml")).unwrap();
    assert!(resolved.contains("per_class = 2\n"));
    assert!(resolved.contains("epochs = 5\n"));
}

#[test]
fn runtime_failure_leaves_a_marker() {
    let dir = tempfile::tempdir().unwrap();
    let out = pointcl(dir.path(), &["probe", "--checkpoint", "missing.pclm", "--out", "p"]);
    assert_eq!(out.status.code(), Some(1));
    let marker = fs::read_to_string(dir.path().join("p/.failed")).unwrap();
    assert!(marker.contains("missing.pclm"));

    // a later success clears it
    let ok = run(dir.path(), &with(&["probe", "--probe-epochs", "2", "--out", "p"], SMALL));
    assert!(ok.status.success(), "{}", String::from_utf8_lossy(&ok.stderr));
    assert!(!dir.path().join("p/.failed").exists());
}

#[test]
fn dataset_too_small_for_a_batch_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = pointcl(dir.path(), &["pretrain", "--per-class", "1", "--pairs", "8", "--points", "16", "--out", "s"]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("s/.failed").exists());
}

#[test]
fn thread_cap_is_validated() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_pointcl"))
        .current_dir(dir.path())
        .env("POINTCL_THREADS", "lots")
        .args(["gen-data", "--per-class", "1", "--out", "g"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let out = Command::new(env!("CARGO_BIN_EXE_pointcl"))
        .current_dir(dir.path())
        .env("POINTCL_THREADS", "1")
        .args(["gen-data", "--per-class", "1", "--out", "g"])
        .output()
        .unwrap();
    assert!(out.status.success());
}

#[test]
fn segment_and_export_write_their_files() {
    let dir = tempfile::tempdir().unwrap();
    let seg = run(dir.path(), &with(&["segment", "--probe-epochs", "5", "--out", "s"], SMALL));
    assert!(seg.status.success(), "{}", String::from_utf8_lossy(&seg.stderr));
    let metrics = fs::read_to_string(dir.path().join("s/metrics.csv")).unwrap();
    let row: Vec<&str> = metrics.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(row[0], "random/encoder");
    assert!(!row[3].is_empty() && !row[4].is_empty());

    let ex = run(dir.path(), &with(&["export-features", "--features", "both", "--out", "e"], SMALL));
    assert!(ex.status.success());
    let f = fs::read_to_string(dir.path().join("e/features_head_train.csv")).unwrap();
    assert_eq!(f.lines().count(), 1 + 48);
    assert_eq!(f.lines().next().unwrap().split(',').count(), 2 + 128);
}
