//! End-to-end runs of the `cdl` binary: every subcommand, exit-code contract,
//! manifest contents, and stop/resume equality at the process level.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn cdl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cdl")).args(args).output().expect("spawn cdl")
}

fn run_ok(args: &[&str]) -> Output {
    let out = cdl(args);
    assert!(
        out.status.success(),
        "cdl {:?} failed\nstdout: {}\nstderr: {}",
        args,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr),
    );
    out
}

fn json_file(path: &Path) -> Value {
    let text = fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    serde_json::from_str(&text).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

const TINY_CONFIG: &str = r#"{
  "world": "pendulum",
  "image_size": 16,
  "timesteps": 40,
  "iterations": 6,
  "batch_size": 4,
  "epoch_iters": 3,
  "checkpoint_every": 4,
  "log_every": 2,
  "base_channels": 4,
  "channel_mults": [1, 2],
  "time_embed_dim": 8,
  "seed": 3
}"#;

/// gen-data + train on a noise-free pendulum set, returning the dirs.
fn train_tiny(root: &Path) -> (String, String) {
    let data = root.join("data").display().to_string();
    let run = root.join("run").display().to_string();
    run_ok(&[
        "gen-data", "--world", "pendulum", "--n", "24", "--image-size", "16", "--noise-scale",
        "0", "--seed", "7", "--out", &data,
    ]);
    let cfg = root.join("tiny.json");
    fs::write(&cfg, TINY_CONFIG).unwrap();
    run_ok(&["train", "--config", cfg.to_str().unwrap(), "--data", &data, "--out", &run]);
    (data, run)
}

#[test]
fn empty_dataset_generates_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("empty").display().to_string();
    run_ok(&["gen-data", "--world", "toy-bars", "--n", "0", "--image-size", "16", "--out", &out]);
    let out = Path::new(&out);
    assert!(out.join("manifest.json").exists());
    assert!(out.join("run_manifest.json").exists());
    let factors = fs::read_to_string(out.join("factors.csv")).unwrap();
    assert_eq!(factors.lines().count(), 1, "only the header for n = 0");
    let pgms = fs::read_dir(out).unwrap().filter(|e| {
        e.as_ref().unwrap().path().extension().is_some_and(|x| x == "pgm")
    });
    assert_eq!(pgms.count(), 0);
}

#[test]
fn same_seed_reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a").display().to_string();
    let b = dir.path().join("b").display().to_string();
    for out in [&a, &b] {
        run_ok(&[
            "gen-data", "--world", "toy-bars", "--n", "6", "--image-size", "16", "--seed", "11",
            "--out", out,
        ]);
    }
    let (a, b) = (Path::new(&a), Path::new(&b));
    for name in ["factors.csv", "manifest.json", "000003.pgm"] {
        assert_eq!(
            fs::read(a.join(name)).unwrap(),
            fs::read(b.join(name)).unwrap(),
            "{name} differs between same-seed runs"
        );
    }
}

#[test]
fn flag_errors_exit_two() {
    for args in [
        &["gen-data", "--world", "pendulum", "--n", "1"][..], // missing --out
        &["gen-data", "--no-such-flag"][..],
        &["frobnicate"][..],
        &["counterfactual", "--checkpoint", "x", "--intervene", "z1=0", "--out", "y"][..], // no source
    ] {
        let out = cdl(args);
        assert_eq!(out.status.code(), Some(2), "cdl {args:?} should be a usage error");
    }
}

#[test]
fn runtime_errors_exit_one_and_name_the_stage() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("o").display().to_string();

    let out = cdl(&["gen-data", "--world", "nope", "--n", "1", "--out", &out_dir]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("error [generate]"), "stderr was: {err}");

    let out = cdl(&["train", "--data", "/definitely/missing", "--out", &out_dir]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("error [load-data]"), "stderr was: {err}");

    let out = cdl(&["sample", "--checkpoint", "/definitely/missing.cdl", "--out", &out_dir]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("error [load-checkpoint]"), "stderr was: {err}");
}

#[test]
fn pipeline_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let (data, run) = train_tiny(dir.path());
    let run_p = Path::new(&run);
    for name in ["checkpoint.cdl", "loss.csv", "graph.json", "adjacency.csv", "run_manifest.json"]
    {
        assert!(run_p.join(name).exists(), "train should write {name}");
    }
    let loss = fs::read_to_string(run_p.join("loss.csv")).unwrap();
    assert!(loss.starts_with("iteration,l_diff,l_h,l_s,h,rho,beta_mult\n"));
    assert_eq!(loss.lines().count(), 4, "header plus iterations 2, 4, 6");
    let manifest = json_file(&run_p.join("run_manifest.json"));
    assert_eq!(manifest["command"], "train");
    assert!(manifest["checkpoint_sha256"].as_str().unwrap().len() == 64);

    let ck = run_p.join("checkpoint.cdl").display().to_string();
    let samples = dir.path().join("samples").display().to_string();
    run_ok(&["sample", "--checkpoint", &ck, "--n", "1", "--steps", "4", "--out", &samples]);
    assert!(Path::new(&samples).join("sample_000.pgm").exists());

    // Forcing both pendulum roots to zero puts both shadow factors at exactly
    // zero, so with the ground-truth route the reported target is all zeros.
    let cf = dir.path().join("cf").display().to_string();
    run_ok(&[
        "counterfactual", "--checkpoint", &ck, "--data", &data, "--index", "0", "--intervene",
        "z1=0.0,z2=0.0", "--gt-factors", "--steps", "4", "--trace", "--out", &cf,
    ]);
    let cf_p = Path::new(&cf);
    assert!(cf_p.join("counterfactual.pgm").exists());
    assert!(cf_p.join("source.pgm").exists());
    let manifest = json_file(&cf_p.join("run_manifest.json"));
    assert_eq!(manifest["extra"]["z_target"], serde_json::json!([0.0, 0.0, 0.0, 0.0]));
    let trace = json_file(&cf_p.join("trace.json"));
    let steps = trace.as_array().unwrap();
    assert_eq!(steps.len(), 4, "one trace row per reverse hop");
    assert!(steps[0]["lambda"].is_number());
    assert!(steps[0]["guidance_norm"].is_number());

    let eval = dir.path().join("eval").display().to_string();
    run_ok(&[
        "evaluate", "--checkpoint", &ck, "--data", &data, "--n-interventions", "2", "--steps",
        "3", "--predictor-iters", "20", "--sequential-k", "2", "--chains", "2", "--out", &eval,
    ]);
    let eval_p = Path::new(&eval);
    let report = json_file(&eval_p.join("report.json"));
    for key in ["mean_acm", "mean_psnr", "ffd"] {
        assert!(report[key].is_number(), "report.json missing {key}");
    }
    assert_eq!(report["sequential"].as_array().unwrap().len(), 2);
    assert_eq!(
        fs::read_to_string(eval_p.join("metrics.csv")).unwrap().lines().count(),
        3,
        "header plus one row per pair"
    );
    let predictor = eval_p.join("predictor.cdl").display().to_string();

    let ablate = dir.path().join("ablate").display().to_string();
    run_ok(&[
        "ablate-lambda", "--checkpoint", &ck, "--data", &data, "--n-interventions", "2",
        "--steps", "3", "--table-bins", "2", "--fit-pairs", "2", "--predictor", &predictor,
        "--out", &ablate,
    ]);
    let ablate_p = Path::new(&ablate);
    let comparison = fs::read_to_string(ablate_p.join("comparison.csv")).unwrap();
    assert_eq!(comparison.lines().count(), 5, "header plus one row per schedule");
    assert!(comparison.starts_with("mode,mean_acm,mean_psnr,ffd\n"));
    for mode in ["fixed", "linear", "trainable", "self-adjusted"] {
        let report = json_file(&ablate_p.join(mode).join("report.json"));
        assert_eq!(report["pairs"], 2);
        if mode == "trainable" {
            assert_eq!(report["lambda_table"].as_array().unwrap().len(), 2);
        }
    }
}

#[test]
fn resume_reproduces_the_straight_run() {
    let dir = tempfile::tempdir().unwrap();
    let (data, run) = train_tiny(dir.path());
    let cfg = dir.path().join("tiny.json").display().to_string();

    let split = dir.path().join("split").display().to_string();
    run_ok(&["train", "--config", &cfg, "--data", &data, "--iterations", "3", "--out", &split]);
    let ck = Path::new(&split).join("checkpoint.cdl").display().to_string();
    run_ok(&["train", "--resume", &ck, "--data", &data, "--iterations", "6", "--out", &split]);

    let straight = fs::read(Path::new(&run).join("checkpoint.cdl")).unwrap();
    let resumed = fs::read(Path::new(&split).join("checkpoint.cdl")).unwrap();
    assert_eq!(straight, resumed, "resumed checkpoint must match the straight run byte-for-byte");

    let loss = fs::read_to_string(Path::new(&split).join("loss.csv")).unwrap();
    assert_eq!(loss.lines().count(), 4, "appended rows continue the same file");
}
