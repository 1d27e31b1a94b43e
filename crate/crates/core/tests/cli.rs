use std::path::Path;
use std::process::{Command, Output};

use dfo_attack::attack::AttackConfig;
use dfo_attack::harness::{
    read_cdf_csv, read_records, run_campaign, ExperimentConfig, ImageSet, ModelRef, RecordStatus, Target,
    TargetProtocol,
};
use dfo_attack::targets::load_model;

const BIN: &str = env!("CARGO_BIN_EXE_dfo-attack");

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn synth(dir: &Path, images: usize) {
    let d = dir.display().to_string();
    ok(&["synth", "--height", "4", "--width", "4", "--channels", "1", "--images", &images.to_string(), "--out", &d]);
}

#[test]
fn synth_bench_cdf_plot_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), 2);
    let model = dir.path().join("model.txt");
    let images = dir.path().join("images.json");
    let out = dir.path().join("run");
    ok(&[
        "bench",
        "--model",
        model.to_str().unwrap(),
        "--images",
        images.to_str().unwrap(),
        "--attack",
        "bobyqa,square",
        "--eps",
        "0.05,0.1",
        "--max-queries",
        "300",
        "--batch-size",
        "4",
        "--kappa",
        "8",
        "--workers",
        "2",
        "--out",
        out.to_str().unwrap(),
    ]);
    // 2 images x 9 other classes x 2 epsilons x 2 attacks
    let text = std::fs::read_to_string(out.join("records.jsonl")).unwrap();
    assert_eq!(text.lines().count(), 72);
    assert!(!out.join("records.jsonl.partial").exists());
    let records = read_records(out.join("records.jsonl")).unwrap();
    assert!(records.iter().all(|r| r.status == RecordStatus::Ok && r.queries <= 300));

    let cdfs = read_cdf_csv(out.join("cdf.csv")).unwrap();
    assert_eq!(cdfs.len(), 4);
    for eps in ["0.05", "0.1"] {
        let svg = std::fs::read_to_string(out.join(format!("cdf_eps_{eps}.svg"))).unwrap();
        assert!(svg.contains("data-attack=\"bobyqa\"") && svg.contains("data-attack=\"square\""));
    }

    let again = dir.path().join("again");
    ok(&["cdf", "--records", out.join("records.jsonl").to_str().unwrap(), "--points", "20", "--out", again.to_str().unwrap()]);
    let again = again.join("cdf.csv");
    let regrouped = read_cdf_csv(&again).unwrap();
    assert_eq!(regrouped.len(), 4);
    assert!(regrouped.iter().all(|c| c.queries.len() <= 20));

    let plots = dir.path().join("plots");
    ok(&["plot", "--cdf", again.to_str().unwrap(), "--out", plots.to_str().unwrap()]);
    assert_eq!(std::fs::read_dir(&plots).unwrap().count(), 2);
}

#[test]
fn attack_prints_a_feasible_result() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), 1);
    let model = dir.path().join("model.txt");
    let images = dir.path().join("images.json");
    let set = ImageSet::load(&images).unwrap();
    let full = dir.path().join("result.json");
    let stdout = ok(&[
        "attack",
        "--model",
        model.to_str().unwrap(),
        "--images",
        images.to_str().unwrap(),
        "--target",
        "3",
        "--attack",
        "parsimonious",
        "--eps",
        "0.1",
        "--max-queries",
        "500",
        "--out",
        full.to_str().unwrap(),
    ]);
    let short: serde_json::Value = serde_json::from_str(&stdout).unwrap();
    assert_eq!(short["target_class"], 3);
    assert!(short["queries"].as_u64().unwrap() <= 500);
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&full).unwrap()).unwrap();
    let eta: Vec<f64> = serde_json::from_value(v["perturbation"].clone()).unwrap();
    let x = &set.images[0].data;
    assert_eq!(eta.len(), x.len());
    for (e, xi) in eta.iter().zip(x) {
        assert!(e.abs() <= 0.1 + 1e-12 && (xi + e).abs() <= 0.5 + 1e-12);
    }
}

#[test]
fn bad_inputs_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.toml");
    assert!(!run(&["bench", "--config", missing.to_str().unwrap()]).status.success());
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "attacks = []\nmodel = { file = \"m\" }\nimages = \"i\"\nepsilons = [0.1]\nbogus = 1\n").unwrap();
    assert!(!run(&["bench", "--config", bad.to_str().unwrap()]).status.success());
    synth(dir.path(), 1);
    let model = dir.path().join("model.txt");
    let images = dir.path().join("images.json");
    let attack = |name: &str| {
        run(&[
            "attack",
            "--model",
            model.to_str().unwrap(),
            "--images",
            images.to_str().unwrap(),
            "--target",
            "1",
            "--attack",
            name,
            "--eps",
            "0.1",
        ])
    };
    assert!(!attack("nonesuch").status.success());
}

#[test]
fn toml_config_drives_a_campaign() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), 1);
    let toml = r#"
model = { file = "model.txt" }
images = "images.json"
epsilons = [0.1]
max_queries = 200
protocol = "random-class"
seed = 11
output = "runs"

[[attacks]]
name = "square"

[[attacks]]
name = "bobyqa"
batch_size = 4
kappa = 6
"#;
    let path = dir.path().join("experiment.toml");
    std::fs::write(&path, toml).unwrap();
    ok(&["bench", "--config", path.to_str().unwrap()]);
    let records = read_records(dir.path().join("runs/records.jsonl")).unwrap();
    assert_eq!(records.len(), 2);
    assert_eq!(records[0].target_class, records[1].target_class);
    assert_ne!(records[0].target_class, records[0].original_class);
}

fn local_config(dir: &Path, protocol: TargetProtocol) -> ExperimentConfig {
    ExperimentConfig {
        attacks: vec![AttackConfig::Square(Default::default())],
        model: ModelRef::File(dir.join("model.txt")),
        images: dir.join("images.json"),
        epsilons: vec![0.05],
        max_queries: 100,
        protocol,
        seed: 1,
        workers: 1,
        output: dir.join("out"),
        mask_top_k: None,
        cdf_points: 10,
    }
}

#[test]
fn all_other_classes_gives_one_record_per_class() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), 1);
    let target = Target::Local(load_model(dir.path().join("model.txt")).unwrap());
    let set = ImageSet::load(dir.path().join("images.json")).unwrap();
    let records = run_campaign(&local_config(dir.path(), TargetProtocol::AllOtherClasses), &target, &set).unwrap();
    assert_eq!(records.len(), 9);
    let original = records[0].original_class;
    let mut targets: Vec<usize> = records.iter().map(|r| r.target_class).collect();
    targets.sort_unstable();
    assert_eq!(targets, (0..10).filter(|c| *c != original).collect::<Vec<_>>());

    let empty = ImageSet { images: vec![], ..set };
    let none = run_campaign(&local_config(dir.path(), TargetProtocol::AllOtherClasses), &target, &empty).unwrap();
    assert!(none.is_empty());
}
