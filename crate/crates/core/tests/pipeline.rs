use std::fs;
use std::path::Path;

use layerscope::pipeline::{
    emit_reports, file_sha256, load_mnist_idx, run_experiment, ConfigMap, ExperimentConfig,
    Manifest, MANIFEST,
};

fn fixture(name: &str) -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../data/mnist5k")
        .join(name)
}

fn config(text: &str, seed: u64) -> ExperimentConfig {
    let mut map = ConfigMap::parse(text).unwrap();
    map.set("experiment.seed", seed);
    ExperimentConfig::from_map(&map, None).unwrap()
}

const SMALL_ALIGN: &str = "
experiment.kind = align_train
data.n_train = 64
data.n_test = 32
data.d = 8
model.width = 16
model.depth = 4
train.epochs = 2
train.batch_size = 16
probe.samples = 32
";

#[test]
fn manifest_hashes_every_output() {
    let dir = tempfile::tempdir().unwrap();
    run_experiment(&config(SMALL_ALIGN, 3), dir.path()).unwrap();
    let manifest = Manifest::parse(&fs::read_to_string(dir.path().join(MANIFEST)).unwrap());
    for name in ["alignment.csv", "training.csv", "final.ckpt"] {
        let recorded = manifest.get(&format!("output.{name}")).unwrap();
        assert_eq!(recorded, file_sha256(&dir.path().join(name)).unwrap());
    }
    assert_eq!(manifest.get("config.model.depth"), Some("4"));
}

#[test]
fn reports_are_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    run_experiment(&config(SMALL_ALIGN, 4), dir.path()).unwrap();
    let first = fs::read(emit_reports(dir.path()).unwrap()).unwrap();
    let second = fs::read(emit_reports(dir.path()).unwrap()).unwrap();
    assert_eq!(first, second);
    let text = String::from_utf8(first).unwrap();
    assert!(text.contains("[alignment.csv]"));
    assert!(text.contains("peak_layer:"));
}

#[test]
fn seeds_change_outputs() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    run_experiment(&config(SMALL_ALIGN, 1), a.path()).unwrap();
    run_experiment(&config(SMALL_ALIGN, 2), b.path()).unwrap();
    assert_ne!(
        fs::read(a.path().join("alignment.csv")).unwrap(),
        fs::read(b.path().join("alignment.csv")).unwrap()
    );
}

#[test]
fn unknown_keys_are_rejected() {
    let map = ConfigMap::parse("experiment.kind = theory\nexperiment.seed = 1\ntheory.dpeth = 3\n")
        .unwrap();
    let err = ExperimentConfig::from_map(&map, None)
        .unwrap_err()
        .to_string();
    assert!(err.contains("theory.dpeth"), "{err}");
}

#[test]
fn mnist_fixture_loads() {
    let ds = load_mnist_idx(
        &fixture("images-idx3-ubyte.gz"),
        &fixture("labels-idx1-ubyte.gz"),
    )
    .unwrap();
    assert_eq!(ds.len(), 5000);
    assert_eq!(ds.dim(), 784);
    assert_eq!(ds.class_counts(), vec![500; 10]);
    assert_eq!(ds.labels[0], 0);
    let pixel_sum: f64 = ds.x.row(0).iter().sum::<f64>() * 255.0;
    assert!((pixel_sum - 31095.0).abs() < 1e-6);
}

#[test]
fn theory_run_writes_equilibria() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(
        "experiment.kind = theory\ntheory.depth = 50\ntheory.equilibrium_depths = 32, 50\n",
        0,
    );
    let lines = run_experiment(&cfg, dir.path()).unwrap();
    assert!(
        lines
            .iter()
            .any(|l| l.starts_with("summary.equilibrium_closed_L50")),
        "{lines:?}"
    );
    for name in ["propagate.csv", "curves.csv", "equilibrium.csv"] {
        assert!(dir.path().join(name).is_file());
    }
    let eq = fs::read_to_string(dir.path().join("equilibrium.csv")).unwrap();
    assert!(
        eq.lines().any(|l| l.starts_with("32,8.000000000000000e0,")),
        "{eq}"
    );
}
