use std::path::Path;
use std::process::{Command, Output};

fn gridwalk(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gridwalk"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const TINY: &str = r#"
seed = 5

[walker]
endpoint = [0, 0]
horizon = 8
prefix_len = 4

[model]
layers = 1
heads = 2
d_model = 8
d_head = 4
d_mlp = 16
context = 4

[train]
epochs = 2
minibatches = 4
batch_size = 16
lr = 0.003
validate_every = 1
checkpoint_every = 1
"#;

#[test]
fn verify_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = gridwalk(&["verify"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert_eq!(stdout(&o).lines().filter(|l| l.starts_with("PASS")).count(), 7);
    let o = gridwalk(&["verify", "--check", "nonexistent"], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(gridwalk(&["train", "--walker", "7", "--dry-run"], dir.path()).status.code(), Some(2));
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, TINY.replace("lr =", "learning_rate =")).unwrap();
    let o = gridwalk(&["train", "--config", bad.to_str().unwrap(), "--dry-run"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("learning_rate"));
    let o = gridwalk(&["train", "--config", "missing.toml"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    let o = gridwalk(&["tables", "--endpoint", "1,0", "--horizon", "10", "--out", "t.gwgt"], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn tables_writes_table_and_classes() {
    let dir = tempfile::tempdir().unwrap();
    let o = gridwalk(&["tables", "--endpoint", "-2,0", "--horizon", "10", "--prefix-len", "3", "--out", "w.gwgt"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(&std::fs::read(dir.path().join("w.gwgt")).unwrap()[..4], b"GWGT");
    let csv = std::fs::read_to_string(dir.path().join("w.classes.csv")).unwrap();
    // classes at t = 1, 2, 3: 4 + 9 + 16 lattice points of matching parity
    assert_eq!(csv.lines().count(), 1 + 4 + 9 + 16);
}

#[test]
fn train_then_inspect_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.toml");
    std::fs::write(&cfg, TINY).unwrap();
    let cfg = cfg.to_str().unwrap();
    let o = gridwalk(&["train", "--config", cfg, "--out", "run"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("mean excess validation loss"));

    let o = gridwalk(&["validate", "--run", "run"], dir.path());
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("position  4"));

    let o = gridwalk(&["align", "--run", "run", "--out", "aligned"], dir.path());
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("ln_final"));
    assert!(dir.path().join("aligned/alignment.json").exists());

    let ckpt = dir.path().join("run/checkpoints/step_00000004.gwck");
    let o = gridwalk(&["align", "--config", cfg, "--checkpoint", ckpt.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(0));
    // a checkpoint with a different model shape is a config error
    let o = gridwalk(&["validate", "--walker", "1", "--checkpoint", ckpt.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(2));

    for fig in ["pc_scatter", "metric_curves", "pca_dims"] {
        let o = gridwalk(&["export", "--run", "run", "--figure", fig], dir.path());
        assert_eq!(o.status.code(), Some(0), "{fig}: {}", String::from_utf8_lossy(&o.stderr));
    }
    assert!(dir.path().join("run/figures/pc_model.csv").exists());

    // same config and seed, byte-identical metric log
    let o = gridwalk(&["train", "--config", cfg, "--out", "run2"], dir.path());
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(
        std::fs::read(dir.path().join("run/metrics.csv")).unwrap(),
        std::fs::read(dir.path().join("run2/metrics.csv")).unwrap()
    );
}

#[test]
fn export_failures() {
    let dir = tempfile::tempdir().unwrap();
    let o = gridwalk(&["export", "--run", "nowhere", "--figure", "metric_curves"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("not found"));
    let o = gridwalk(&["export", "--run", "nowhere", "--figure", "bogus"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    let o = gridwalk(&["export", "--ground-truth", "--walker", "4", "--out", "gt"], dir.path());
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("dims_99 2"));
}
