use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sha2::{Digest, Sha256};
use ssboost::io::{instance_from_json, model_from_json, parse_label_map};
use ssboost_cli::commands::{build_corpus, LedgerDoc, TrainSummary, TRAIN_LOG_HEADER};
use ssboost_cli::{EXIT_INVALID, EXIT_IO, EXIT_MISMATCH};

/// SHA-256 of `manifest.json` for the default corpus (200 scenes, seed 0).
const DEFAULT_MANIFEST_SHA256: &str = "54ad5a0f014b9895c619629987f9d0882305b62e2a7c2c984ec33d488006f736";

const SMALL: &[(&str, &str)] = &[
    ("SSBOOST_GENERATE__SCENE__WIDTH", "24"),
    ("SSBOOST_GENERATE__SCENE__HEIGHT", "24"),
    ("SSBOOST_GENERATE__SCENE__NUM_CLASSES", "3"),
    ("SSBOOST_GENERATE__SCENE__HIERARCHY_LEVELS", "3"),
    ("SSBOOST_TRAIN__FOLDS", "3"),
    ("SSBOOST_TRAIN__DICTIONARY_SIZE", "4"),
    ("SSBOOST_TRAIN__KMEANS_SAMPLES", "2000"),
];

fn ssboost(dir: &Path, args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_ssboost"));
    cmd.current_dir(dir).args(args);
    for (k, _) in std::env::vars().filter(|(k, _)| k.starts_with("SSBOOST_")) {
        cmd.env_remove(k);
    }
    cmd.envs(SMALL.iter().copied()).envs(env.iter().copied());
    cmd.output().expect("binary runs")
}

fn ok(dir: &Path, args: &[&str], env: &[(&str, &str)]) -> String {
    let out = ssboost(dir, args, env);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(dir: &Path, args: &[&str], env: &[(&str, &str)]) -> i32 {
    ssboost(dir, args, env).status.code().expect("exited normally")
}

/// Generates 6 scenes and trains `iterations` stages in a fresh directory.
fn trained(iterations: &str) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    ok(
        dir.path(),
        &["generate", "--count", "6", "--seed", "11", "--out", "data"],
        &[],
    );
    ok(
        dir.path(),
        &["train", "--data", "data", "--out", "model", "--iterations", iterations],
        &[],
    );
    dir
}

fn files(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            let bytes = fs::read(&p).unwrap();
            (p.file_name().unwrap().into(), bytes)
        })
        .collect();
    v.sort();
    v
}

#[test]
fn generation_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    ok(
        dir.path(),
        &["generate", "--count", "5", "--seed", "7", "--out", "a"],
        &[],
    );
    ok(
        dir.path(),
        &["generate", "--count", "5", "--seed", "7", "--out", "b"],
        &[],
    );
    let a = files(&dir.path().join("a"));
    assert_eq!(a.len(), 6);
    assert_eq!(a, files(&dir.path().join("b")));
    ok(
        dir.path(),
        &["generate", "--count", "5", "--seed", "8", "--out", "c"],
        &[],
    );
    assert_ne!(a, files(&dir.path().join("c")));
}

#[test]
fn empty_corpus_warns_and_writes_manifest_only() {
    let dir = tempfile::tempdir().unwrap();
    let out = ssboost(dir.path(), &["generate", "--count", "0", "--out", "data"], &[]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("warning"));
    let listing = files(&dir.path().join("data"));
    assert_eq!(listing.len(), 1);
    assert_eq!(listing[0].0, PathBuf::from("manifest.json"));
}

#[test]
fn default_corpus_manifest_hash_is_pinned() {
    let mut n = 0;
    let manifest = build_corpus(&Default::default(), 0, 200, |_, _| {
        n += 1;
        Ok(())
    })
    .unwrap();
    assert_eq!(n, 200);
    assert_eq!(
        hex::encode(Sha256::digest(manifest.as_bytes())),
        DEFAULT_MANIFEST_SHA256
    );
}

#[test]
fn one_iteration_logs_one_row() {
    let dir = trained("1");
    let log = fs::read_to_string(dir.path().join("model/train_log.csv")).unwrap();
    let lines: Vec<_> = log.lines().collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0], TRAIN_LOG_HEADER);
    assert!(lines[1].starts_with("1,"));
    let model = model_from_json(&fs::read_to_string(dir.path().join("model/model.json")).unwrap()).unwrap();
    assert_eq!(model.stages.len(), 1);
}

#[test]
fn early_termination_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["generate", "--count", "6", "--out", "data"], &[]);
    let stdout = ok(
        dir.path(),
        &["train", "--data", "data", "--out", "model", "--iterations", "5"],
        &[("SSBOOST_TRAIN__MIN_IMPROVEMENT", "1e12")],
    );
    assert!(stdout.contains("stopped at iteration 1"), "{stdout}");
    let summary: TrainSummary =
        serde_json::from_str(&fs::read_to_string(dir.path().join("model/train_summary.json")).unwrap()).unwrap();
    assert_eq!(summary.stages, 0);
    assert_eq!(
        summary.termination,
        ssboost::boosting::Termination::NoImprovement { iteration: 1 }
    );
    assert_eq!(summary.initial_risk, summary.final_risk);
    let log = fs::read_to_string(dir.path().join("model/train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 1);
}

#[test]
fn zero_budget_predicts_the_initial_argmax() {
    let dir = trained("4");
    let d = dir.path();
    ok(
        d,
        &[
            "infer",
            "--data",
            "data",
            "--model",
            "model/model.json",
            "--budget",
            "0",
            "--out",
            "inf",
        ],
        &[],
    );
    let model = model_from_json(&fs::read_to_string(d.join("model/model.json")).unwrap()).unwrap();
    let best = (0..model.num_classes)
        .max_by(|&a, &b| model.initial[a].total_cmp(&model.initial[b]).then(b.cmp(&a)))
        .unwrap();
    for i in 0..6 {
        let scene = d.join(format!("inf/scene-{i:05}"));
        let (_, _, labels) = parse_label_map(&fs::read_to_string(scene.join("labels.txt")).unwrap()).unwrap();
        assert!(labels.iter().all(|&l| l == best));
        let ledger: LedgerDoc = serde_json::from_str(&fs::read_to_string(scene.join("ledger.json")).unwrap()).unwrap();
        assert_eq!(ledger.total, 0.0);
        assert_eq!(ledger.stages_executed, 0);
        assert_eq!(files(&scene).len(), 2);
    }
}

#[test]
fn unlimited_eval_on_training_data_matches_the_summary() {
    let dir = trained("6");
    let d = dir.path();
    ok(
        d,
        &["eval", "--data", "data", "--model", "model/model.json", "--out", "ev"],
        &[],
    );
    let summary: TrainSummary =
        serde_json::from_str(&fs::read_to_string(d.join("model/train_summary.json")).unwrap()).unwrap();
    let csv = fs::read_to_string(d.join("ev/metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 6 + 1);
    let mean: Vec<&str> = csv.lines().last().unwrap().split(',').collect();
    assert_eq!(mean[0], "mean");
    let num = |i: usize| mean[i].parse::<f64>().unwrap();
    assert!((num(1) - summary.final_pixel_accuracy).abs() < 1e-6);
    assert!((num(2) - summary.final_class_accuracy).abs() < 1e-6);
    assert!((num(3) - summary.final_risk).abs() < 1e-6 * summary.final_risk.max(1.0));
}

#[test]
fn stage_masks_are_the_union_of_selected_segments() {
    let dir = trained("6");
    let d = dir.path();
    ok(
        d,
        &["infer", "--data", "data", "--model", "model/model.json", "--out", "inf"],
        &[],
    );
    for i in 0..6 {
        let inst = instance_from_json(&fs::read_to_string(d.join(format!("data/scene-{i:05}.json"))).unwrap()).unwrap();
        let h = inst.hierarchy();
        let scene = d.join(format!("inf/scene-{i:05}"));
        let ledger: LedgerDoc = serde_json::from_str(&fs::read_to_string(scene.join("ledger.json")).unwrap()).unwrap();
        assert_eq!(ledger.budget, None);
        assert_eq!(ledger.entries.len(), ledger.stages_executed);
        let sum: f64 = ledger.entries.iter().map(|e| e.total).sum();
        assert!((sum - ledger.total).abs() < 1e-9);
        for e in &ledger.entries {
            let mut expect = vec![0usize; inst.num_pixels()];
            for &(level, index) in &e.selected {
                for &p in &h.level(level)[index].pixels {
                    expect[p as usize] = 1;
                }
            }
            let text = fs::read_to_string(scene.join(format!("stage-{:03}.txt", e.stage))).unwrap();
            let (w, _, mask) = parse_label_map(&text).unwrap();
            assert_eq!(w, inst.width());
            assert_eq!(mask, expect, "scene {i} stage {}", e.stage);
        }
    }
}

#[test]
fn profile_uses_the_default_grid() {
    let dir = trained("4");
    let d = dir.path();
    ok(
        d,
        &[
            "profile",
            "--data",
            "data",
            "--model",
            "model/model.json",
            "--out",
            "prof",
        ],
        &[],
    );
    let csv = fs::read_to_string(d.join("prof/profile.csv")).unwrap();
    let lines: Vec<_> = csv.lines().collect();
    assert_eq!(lines[0], "budget,pixel_acc,class_acc,risk");
    assert_eq!(lines.len(), 1 + 11 + 1);
    assert!(lines[1].starts_with("0,"));
    assert!(lines.last().unwrap().starts_with("unlimited,"));

    fs::write(d.join("grid.toml"), "[profile]\nbudgets = [0, 5.5, \"unlimited\"]\n").unwrap();
    ok(
        d,
        &[
            "--config",
            "grid.toml",
            "profile",
            "--data",
            "data",
            "--model",
            "model/model.json",
            "--out",
            "p2",
        ],
        &[],
    );
    assert_eq!(fs::read_to_string(d.join("p2/profile.csv")).unwrap().lines().count(), 4);
}

#[test]
fn jobs_flag_does_not_change_results() {
    let dir = trained("3");
    let d = dir.path();
    ok(
        d,
        &[
            "train",
            "--data",
            "data",
            "--out",
            "m1",
            "--iterations",
            "3",
            "--jobs",
            "1",
        ],
        &[],
    );
    assert_eq!(
        fs::read(d.join("model/model.json")).unwrap(),
        fs::read(d.join("m1/model.json")).unwrap()
    );
}

#[test]
fn exit_codes() {
    let dir = trained("2");
    let d = dir.path();
    let model = ["--model", "model/model.json"];

    assert_eq!(code(d, &["--help"], &[]), 0);
    assert_eq!(code(d, &["--version"], &[]), 0);

    // invalid arguments or configuration
    assert_eq!(code(d, &["frobnicate"], &[]), EXIT_INVALID);
    assert_eq!(code(d, &["generate", "--count", "many"], &[]), EXIT_INVALID);
    assert_eq!(
        code(
            d,
            &["infer", "--data", "data", model[0], model[1], "--budget", "-3"],
            &[]
        ),
        EXIT_INVALID
    );
    assert_eq!(
        code(d, &["generate", "--out", "x"], &[("SSBOOST_GENERATE__BOGUS", "1")]),
        EXIT_INVALID
    );
    assert_eq!(code(d, &["generate", "--jobs", "0", "--out", "x"], &[]), EXIT_INVALID);
    assert_eq!(code(d, &["train", "--out", "x"], &[]), EXIT_INVALID);
    assert_eq!(
        code(
            d,
            &["train", "--data", "data", "--out", "x"],
            &[("SSBOOST_TRAIN__DEPTHS", "[]")]
        ),
        EXIT_INVALID
    );

    // I/O and format errors
    assert_eq!(code(d, &["train", "--data", "nowhere", "--out", "x"], &[]), EXIT_IO);
    assert_eq!(
        code(d, &["eval", "--data", "data", "--model", "missing.json"], &[]),
        EXIT_IO
    );
    assert_eq!(code(d, &["--config", "missing.toml", "generate"], &[]), EXIT_IO);
    fs::write(d.join("broken.json"), "{\"num_classes\": 3").unwrap();
    assert_eq!(
        code(d, &["eval", "--data", "data", "--model", "broken.json"], &[]),
        EXIT_IO
    );
    fs::write(d.join("plain"), "x").unwrap();
    assert_eq!(code(d, &["generate", "--count", "1", "--out", "plain"], &[]), EXIT_IO);

    // incompatible inputs
    assert_eq!(
        code(
            d,
            &["train", "--data", "data", "--out", "x"],
            &[("SSBOOST_TRAIN__FOLDS", "7")]
        ),
        EXIT_MISMATCH
    );
    ok(
        d,
        &["generate", "--count", "2", "--out", "other"],
        &[("SSBOOST_GENERATE__SCENE__NUM_CLASSES", "4")],
    );
    assert_eq!(
        code(d, &["eval", "--data", "other", model[0], model[1]], &[]),
        EXIT_MISMATCH
    );
    let scene = d.join("data/scene-00003.json");
    let mut text = fs::read_to_string(&scene).unwrap();
    text.push(' ');
    fs::write(&scene, text).unwrap();
    assert_eq!(
        code(d, &["eval", "--data", "data", model[0], model[1]], &[]),
        EXIT_MISMATCH
    );
    assert!(!d.join("x").exists(), "failed commands must not create outputs");
}

#[test]
fn manifests_cannot_name_files_outside_the_dataset() {
    use ssboost_cli::commands::parse_manifest;
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["generate", "--count", "2", "--out", "data"], &[]);
    let text = fs::read_to_string(dir.path().join("data/manifest.json")).unwrap();
    assert_eq!(parse_manifest(&text).unwrap().count, 2);
    let escaped = text.replacen("scene-00001.json", "../scene-00001.json", 1);
    assert_eq!(parse_manifest(&escaped).unwrap_err().code, EXIT_MISMATCH);
    assert_eq!(parse_manifest("{").unwrap_err().code, EXIT_IO);
}
