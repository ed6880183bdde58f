use std::path::Path;

use gridwalk::harness::*;
use gridwalk::nn::{load_checkpoint, ModelConfig, TrainConfig};
use gridwalk::Error;

fn tiny() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::desk(1);
    cfg.walker = WalkerConfig { index: None, endpoint: Some([0, 0]), horizon: Some(8), prefix_len: 4 };
    cfg.model = ModelConfig { layers: 1, heads: 2, d_model: 8, d_head: 4, d_mlp: 16, context: 4 };
    cfg.train = TrainConfig {
        epochs: 4,
        minibatches: 5,
        batch_size: 16,
        lr: 3e-3,
        validate_every: 1,
        checkpoint_every: 2,
        ..TrainConfig::desk()
    };
    cfg
}

fn read(p: &Path) -> Vec<u8> {
    std::fs::read(p).unwrap()
}

#[test]
fn run_writes_hashed_artifacts_and_is_deterministic() {
    let root = tempfile::tempdir().unwrap();
    let cfg = tiny();
    let a = run_experiment(&cfg, &root.path().join("a"), &RunOptions::default()).unwrap();
    let b = run_experiment(&cfg, &root.path().join("b"), &RunOptions::default()).unwrap();
    for name in [METRICS_FILE, ALIGNMENT_CSV, ALIGNMENT_JSON, CONFIG_FILE] {
        assert_eq!(read(&a.dir.join(name)), read(&b.dir.join(name)), "{name} differs between reruns");
    }
    let hash_line = format!("# config_hash={}", cfg.hash());
    for name in [METRICS_FILE, ALIGNMENT_CSV, CONFIG_FILE] {
        let text = String::from_utf8(read(&a.dir.join(name))).unwrap();
        assert!(text.starts_with(&hash_line), "{name}");
    }
    assert!(String::from_utf8(read(&a.dir.join(ALIGNMENT_JSON))).unwrap().contains(&cfg.hash()));
    assert!(a.dir.join(ENVIRONMENT_FILE).exists());

    // checkpoints at steps 0, 10 and 20, with one report per capture point each
    for step in [0, 10, 20] {
        assert!(checkpoint_path(&a.dir, step).exists());
    }
    assert_eq!(a.final_alignment.len(), cfg.model.capture_points().len());
    assert_eq!(load_checkpoint(&latest_checkpoint(&a.dir).unwrap()).unwrap().step(), 20);
    let m = a.final_metrics.unwrap();
    assert_eq!(m.step, 20);
    assert!(m.mean_excess().is_finite());

    // running into a used directory is refused
    assert!(matches!(
        run_experiment(&cfg, &a.dir, &RunOptions::default()),
        Err(Error::InvalidState(_))
    ));
}

#[test]
fn exports_pair_points_and_reject_foreign_hashes() {
    let root = tempfile::tempdir().unwrap();
    let cfg = tiny();
    let run = run_experiment(&cfg, &root.path().join("r"), &RunOptions::default()).unwrap();

    let files = export_figure_data(&run.dir, Figure::PcScatter).unwrap();
    let rows = |p: &Path| {
        let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_path(p).unwrap();
        assert_eq!(
            r.headers().unwrap().iter().collect::<Vec<_>>(),
            ["class_x", "class_y", "t", "pc1", "pc2", "weight"]
        );
        r.records().count()
    };
    assert_eq!(rows(&files[0]), rows(&files[1]));

    let curves = export_figure_data(&run.dir, Figure::MetricCurves).unwrap();
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_path(&curves[0]).unwrap();
    let steps: Vec<u64> = r.records().map(|rec| rec.unwrap()[0].parse().unwrap()).collect();
    assert!(steps.windows(2).all(|w| w[0] <= w[1]));
    assert_eq!(steps.len(), 3 * cfg.model.capture_points().len());
    export_figure_data(&run.dir, Figure::PcaDims).unwrap();

    // editing the config after the run breaks the hash chain
    let mut other = cfg.clone();
    other.seed += 1;
    write_config_snapshot(&other, &run.dir).unwrap();
    assert!(matches!(export_figure_data(&run.dir, Figure::MetricCurves), Err(Error::Corruption(_))));

    std::fs::remove_file(run.dir.join(CONFIG_FILE)).unwrap();
    assert!(matches!(export_figure_data(&run.dir, Figure::MetricCurves), Err(Error::NotFound(_))));
}

#[test]
fn dry_run_only_validates() {
    let root = tempfile::tempdir().unwrap();
    let dir = root.path().join("dry");
    let s = run_experiment(&tiny(), &dir, &RunOptions { dry_run: true }).unwrap();
    assert!(s.final_metrics.is_none());
    assert!(dir.join(CONFIG_FILE).exists());
    assert!(!dir.join(METRICS_FILE).exists());
    assert!(!dir.join(CHECKPOINT_DIR).exists());
}

#[test]
fn activation_dump_matches_trie() {
    let root = tempfile::tempdir().unwrap();
    let mut cfg = tiny();
    cfg.alignment.dump_activations = true;
    cfg.train.epochs = 2;
    let run = run_experiment(&cfg, &root.path().join("d"), &RunOptions::default()).unwrap();
    let (header, classes, acts) = read_activation_dump(&run.dir.join(ACTIVATION_DIR).join("step_00000010.gwac")).unwrap();
    let dist = build_distribution(&cfg.walker.spec().unwrap()).unwrap();
    assert_eq!(header.config_hash, cfg.hash());
    assert_eq!(header.rows, dist.num_prefixes());
    assert_eq!(classes.len(), header.rows);
    assert_eq!(acts.names().collect::<Vec<_>>(), cfg.model.capture_points());
}

#[test]
fn ground_truth_export_is_low_rank() {
    let root = tempfile::tempdir().unwrap();
    for walker in [1, 4] {
        let (path, pca) = export_ground_truth(&ExperimentConfig::desk(walker), root.path()).unwrap();
        assert!(path.exists());
        assert!(pca.dims_99 <= 3, "walker {walker}: {}", pca.dims_99);
    }
}
