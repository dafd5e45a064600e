use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &[&str] = &[
    "--set=dataset.size=8",
    "--set=dataset.count=90",
    "--set=dataset.ratios=0.5,0.3,0.2",
    "--set=flow.levels=2",
    "--set=flow.steps_per_level=1",
    "--set=flow.hidden=4",
    "--set=flow.attention=none",
    "--set=train.epochs=1",
    "--set=train.batch_size=8",
    "--set=classifier.filters=2,4",
    "--set=classifier.max_epochs=2",
];

fn flowaug(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_flowaug"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = flowaug(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn with_small<'a>(args: &[&'a str]) -> Vec<&'a str> {
    args.iter().copied().chain(SMALL.iter().copied()).collect()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn verify_passes_on_a_fresh_build() {
    let out = ok(&["verify"]);
    let last = out.lines().last().unwrap();
    assert!(last.ends_with("passed, 0 failed"), "{last}");
}

#[test]
fn zero_temperature_samples_are_identical() {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("model");
    let samples = dir.path().join("samples");
    ok(&with_small(&["train-flow", "--seed", "3", "--out", p(&model)]));
    assert!(model.join("flow.ckpt").exists());
    assert!(model.join("loss.csv").exists());
    ok(&[
        "sample",
        "--seed",
        "4",
        "--model",
        p(&model),
        "--out",
        p(&samples),
        "--temperature",
        "0",
        "--n",
        "3",
    ]);
    let files: Vec<Vec<u8>> = (0..3)
        .map(|i| fs::read(samples.join(format!("sample_{i:03}.pgm"))).unwrap())
        .collect();
    assert!(files[0].starts_with(b"P5\n8 8\n255\n"));
    assert_eq!(files[0], files[1]);
    assert_eq!(files[1], files[2]);
}

#[test]
fn augment_writes_provenance_for_every_image() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let model = dir.path().join("model");
    let aug = dir.path().join("aug");
    ok(&with_small(&["gen-data", "--seed", "1", "--out", p(&data)]));
    ok(&with_small(&["train-flow", "--seed", "2", "--data", p(&data), "--out", p(&model)]));
    ok(&["augment", "--seed", "5", "--data", p(&data), "--model", p(&model), "--count", "7", "--out", p(&aug)]);
    let prov = fs::read_to_string(aug.join("provenance.csv")).unwrap();
    let mut lines = prov.lines();
    assert_eq!(lines.next(), Some("source_a,source_b,t,fold_id"));
    assert_eq!(lines.count(), 7);
    assert_eq!(fs::read_dir(aug.join("images")).unwrap().count(), 7);
}

#[test]
fn crossval_summary_has_both_arms_and_echo_reproduces() {
    let dir = tempfile::tempdir().unwrap();
    let first = dir.path().join("a");
    let second = dir.path().join("b");
    ok(&with_small(&["crossval", "--seed", "7", "--k", "3", "--augment", "10", "--out", p(&first)]));

    let summary = fs::read_to_string(first.join("summary.csv")).unwrap();
    let rows: Vec<&str> = summary.lines().skip(1).collect();
    assert_eq!(rows.len(), 6);
    for arm in ["baseline", "augmented"] {
        for class in ["good", "medium", "bad"] {
            assert!(rows.iter().any(|r| r.starts_with(&format!("{arm},{class},"))), "{arm} {class}");
        }
    }
    let metrics = fs::read_to_string(first.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 1 + 3 * 3 * 2);
    assert_eq!(fs::read_to_string(first.join("provenance.csv")).unwrap().lines().count(), 1 + 3 * 10);

    // The echoed config alone reruns the experiment identically.
    ok(&["crossval", "--config", p(&first.join("config.txt")), "--out", p(&second)]);
    assert_eq!(metrics, fs::read_to_string(second.join("metrics.csv")).unwrap());
}

#[test]
fn sweep_emits_one_row_per_size_and_run() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sweep");
    ok(&with_small(&["sweep", "--seed", "2", "--sizes", "0,5,10", "--runs", "2", "--out", p(&out)]));
    let csv = fs::read_to_string(out.join("sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 3 * 2);
    assert!(fs::read(out.join("sweep.pgm")).unwrap().starts_with(b"P5"));
    assert!(fs::read_to_string(out.join("recommendation.txt")).unwrap().starts_with("recommended_size = "));
}

#[test]
fn failures_use_documented_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let code = |args: &[&str]| flowaug(args).status.code().unwrap();
    assert_eq!(code(&["gen-data", "--out", p(&out)]), 2, "missing seed");
    assert_eq!(code(&["gen-data", "--seed", "1", "--out", p(&out), "--bogus"]), 2);
    assert_eq!(code(&["frobnicate"]), 2);
    assert_eq!(code(&["gen-data", "--seed", "1", "--out", p(&out), "--set", "flow.depth=3"]), 3);
    assert_eq!(code(&["gen-data", "--seed", "1", "--out", p(&out), "--set", "dataset.ratios=0.1,0.1,0.8"]), 3);
    let missing = dir.path().join("missing");
    assert_eq!(code(&["sample", "--seed", "1", "--out", p(&out), "--model", p(&missing)]), 4);
    let err = flowaug(&["gen-data", "--out", p(&out)]).stderr;
    assert_eq!(String::from_utf8(err).unwrap().lines().count(), 1);
}
