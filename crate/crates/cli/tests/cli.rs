//! End-to-end tests of the `diffkit` binary: artifact reproducibility,
//! exit-code contracts, seed resolution, and the JSON surface of every
//! subcommand. A shared tiny corpus and checkpoint keep the suite fast.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use tempfile::TempDir;

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_diffkit"));
    cmd.env_remove("DIFFKIT_SEED");
    cmd
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn run_ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "command {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

const TRAIN_FLAGS: &[&str] = &[
    "--mode",
    "diffpose",
    "--epochs",
    "2",
    "--seed",
    "3",
    "--set",
    "k_max=8",
    "--set",
    "latent=8",
    "--set",
    "heads=2",
    "--set",
    "blocks=1",
    "--set",
    "batch=16",
    "--set",
    "micro_batch=8",
    "--set",
    "n_trajectories=2",
    "--set",
    "gmm_components=2",
    "--set",
    "gmm_samples=100",
    "--set",
    "z_bins=16",
    "--set",
    "pretrain.epochs=2",
    "--set",
    "pretrain.batch=8",
];

struct Fixture {
    _dir: TempDir,
    data: PathBuf,
    checkpoint: PathBuf,
}

/// One tiny corpus and trained checkpoint shared by every test.
fn fixture() -> &'static Fixture {
    static FIXTURE: OnceLock<Fixture> = OnceLock::new();
    FIXTURE.get_or_init(|| {
        let dir = TempDir::new().expect("tempdir");
        let data = dir.path().join("data.json");
        let checkpoint = dir.path().join("ckpt.json");
        run_ok(&[
            "gen-data",
            "--out",
            data.to_str().unwrap(),
            "--train-count",
            "16",
            "--test-count",
            "4",
            "--half-len",
            "1",
            "--seed",
            "7",
        ]);
        let mut args = vec![
            "train",
            "--data",
            data.to_str().unwrap(),
            "--out",
            checkpoint.to_str().unwrap(),
        ];
        args.extend_from_slice(TRAIN_FLAGS);
        run_ok(&args);
        Fixture { _dir: dir, data, checkpoint }
    })
}

fn json_file(path: &Path) -> serde_json::Value {
    serde_json::from_slice(&std::fs::read(path).expect("file exists")).expect("valid json")
}

#[test]
fn gen_data_reruns_are_byte_identical() {
    let fx = fixture();
    let dir = TempDir::new().unwrap();
    let again = dir.path().join("again.json");
    run_ok(&[
        "gen-data",
        "--out",
        again.to_str().unwrap(),
        "--train-count",
        "16",
        "--test-count",
        "4",
        "--half-len",
        "1",
        "--seed",
        "7",
    ]);
    assert_eq!(std::fs::read(&fx.data).unwrap(), std::fs::read(&again).unwrap());
    let parsed = json_file(&fx.data);
    assert_eq!(parsed["version"], "diffkit-dataset/1");
    assert_eq!(parsed["train"].as_array().unwrap().len(), 16);
}

#[test]
fn train_reruns_are_byte_identical_and_log_epochs_as_jsonl() {
    let fx = fixture();
    let dir = TempDir::new().unwrap();
    let again = dir.path().join("again.json");
    let mut args =
        vec!["train", "--data", fx.data.to_str().unwrap(), "--out", again.to_str().unwrap()];
    args.extend_from_slice(TRAIN_FLAGS);
    let out = run_ok(&args);

    assert_eq!(std::fs::read(&fx.checkpoint).unwrap(), std::fs::read(&again).unwrap());

    let stdout = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = stdout.lines().collect();
    assert_eq!(lines.len(), 2, "one JSONL line per epoch");
    for (i, line) in lines.iter().enumerate() {
        let log: serde_json::Value = serde_json::from_str(line).expect("epoch line is JSON");
        assert_eq!(log["epoch"], i as u64);
        assert!(log["loss"].as_f64().unwrap().is_finite());
        assert!(log["lr"].as_f64().unwrap() > 0.0);
        assert!(log["wall_ms"].is_u64());
    }

    // The checkpoint records how it was made but no wall-clock noise.
    let ckpt = json_file(&fx.checkpoint);
    assert_eq!(ckpt["version"], "diffkit-checkpoint/1");
    assert_eq!(ckpt["config"]["mode"], "diffpose");
    assert_eq!(ckpt["config"]["seed"], 3);
    assert_eq!(ckpt["epoch"], 2);
    assert!(ckpt.get("wall_ms").is_none());
}

#[test]
fn infer_and_eval_roundtrip_with_reproducible_predictions() {
    let fx = fixture();
    let dir = TempDir::new().unwrap();
    let preds = dir.path().join("preds.json");
    let preds2 = dir.path().join("preds2.json");
    for p in [&preds, &preds2] {
        run_ok(&[
            "infer",
            "--checkpoint",
            fx.checkpoint.to_str().unwrap(),
            "--data",
            fx.data.to_str().unwrap(),
            "--out",
            p.to_str().unwrap(),
            "--draws",
            "3",
            "--seed",
            "11",
        ]);
    }
    assert_eq!(std::fs::read(&preds).unwrap(), std::fs::read(&preds2).unwrap());
    let parsed = json_file(&preds);
    assert_eq!(parsed["version"], "diffkit-predictions/1");
    assert_eq!(parsed["config"]["n_draws"], 3);
    assert_eq!(parsed["predictions"]["ids"].as_array().unwrap().len(), 4);

    let report = dir.path().join("report.json");
    let out = run_ok(&[
        "eval",
        "--predictions",
        preds.to_str().unwrap(),
        "--data",
        fx.data.to_str().unwrap(),
        "--out",
        report.to_str().unwrap(),
    ]);
    let mean: serde_json::Value =
        serde_json::from_str(String::from_utf8(out.stdout).unwrap().trim()).unwrap();
    for key in ["mpjpe", "p_mpjpe", "pck", "auc"] {
        assert!(mean[key].as_f64().unwrap().is_finite(), "{key}");
    }
    let full = json_file(&report);
    assert_eq!(full["version"], "diffkit-eval/1");
    assert_eq!(full["metrics"]["per_sample"].as_array().unwrap().len(), 4);
}

#[test]
fn usage_errors_exit_one_and_runtime_errors_exit_two() {
    let fx = fixture();
    let data = fx.data.to_str().unwrap();
    let ckpt = fx.checkpoint.to_str().unwrap();
    let usage: Vec<Vec<&str>> = vec![
        vec!["train", "--data", data, "--out", "/tmp/x.json", "--set", "nope=3"],
        vec!["train", "--data", data, "--out", "/tmp/x.json", "--set", "epochs=fast"],
        vec!["train", "--data", data, "--out", "/tmp/x.json", "--set", "lr=0.0"],
        vec!["train", "--data", data, "--out", "/tmp/x.json", "--mode", "turbo"],
        vec!["train", "--data", data, "--out", "/tmp/x.json", "--set", "malformed"],
        vec!["infer", "--checkpoint", ckpt, "--data", data, "--out", "/tmp/x.json", "--steps", "0"],
        vec!["frobnicate"],
    ];
    for args in usage {
        let out = run(&args);
        assert_eq!(out.status.code(), Some(1), "{args:?}");
    }

    let runtime: Vec<Vec<&str>> = vec![
        vec!["train", "--data", "/definitely/missing.json", "--out", "/tmp/x.json"],
        vec!["eval", "--predictions", "/missing.json", "--data", data],
        vec!["inspect-hk", "--data", data, "--sample", "999"],
    ];
    for args in runtime {
        let out = run(&args);
        assert_eq!(out.status.code(), Some(2), "{args:?}");
    }

    assert_eq!(run(&["--help"]).status.code(), Some(0));

    // A checkpoint from a different format version is refused.
    let dir = TempDir::new().unwrap();
    let tampered = dir.path().join("bad.json");
    let text = std::fs::read_to_string(&fx.checkpoint).unwrap();
    std::fs::write(&tampered, text.replace("diffkit-checkpoint/1", "diffkit-checkpoint/9"))
        .unwrap();
    let out = run(&[
        "infer",
        "--checkpoint",
        tampered.to_str().unwrap(),
        "--data",
        data,
        "--out",
        "/tmp/x.json",
    ]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr).to_string();
    assert!(stderr.contains("diffkit-checkpoint/9"), "{stderr}");
    assert!(stderr.contains("diffkit-checkpoint/1"), "{stderr}");
}

#[test]
fn seed_resolution_prefers_flag_over_environment() {
    let fx = fixture();
    let dir = TempDir::new().unwrap();
    let from_env = dir.path().join("env.json");
    let from_flag = dir.path().join("flag.json");

    let out = bin()
        .env("DIFFKIT_SEED", "7")
        .args([
            "gen-data",
            "--out",
            from_env.to_str().unwrap(),
            "--train-count",
            "16",
            "--test-count",
            "4",
            "--half-len",
            "1",
        ])
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(std::fs::read(&from_env).unwrap(), std::fs::read(&fx.data).unwrap());

    // An explicit flag wins over a conflicting environment seed.
    let out = bin()
        .env("DIFFKIT_SEED", "99")
        .args([
            "gen-data",
            "--out",
            from_flag.to_str().unwrap(),
            "--train-count",
            "16",
            "--test-count",
            "4",
            "--half-len",
            "1",
            "--seed",
            "7",
        ])
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(std::fs::read(&from_flag).unwrap(), std::fs::read(&fx.data).unwrap());

    let out = bin().env("DIFFKIT_SEED", "banana").args(["gen-data", "--out", "/tmp/x.json"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn ablate_compares_all_variants_in_one_artifact() {
    let fx = fixture();
    let dir = TempDir::new().unwrap();
    let out_path = dir.path().join("ablation.json");
    let mut args = vec![
        "ablate",
        "--data",
        fx.data.to_str().unwrap(),
        "--out",
        out_path.to_str().unwrap(),
        "--epochs",
        "1",
        "--seed",
        "3",
        "--draws",
        "2",
    ];
    args.extend_from_slice(&TRAIN_FLAGS[6..]); // reuse --set sizing, not mode/epochs/seed
    args.extend_from_slice(&["--set", "k_stack=2"]);
    let out = run_ok(&args);

    let file = json_file(&out_path);
    assert_eq!(file["version"], "diffkit-ablation/1");
    let rows = file["rows"].as_array().unwrap();
    let names: Vec<&str> = rows.iter().map(|r| r["name"].as_str().unwrap()).collect();
    for expected in
        ["diffpose", "stand_diff", "baseline_a", "baseline_b", "gmm_m1", "gmm_m9", "diffpose_n1"]
    {
        assert!(names.contains(&expected), "missing row {expected}; got {names:?}");
    }
    assert!(names.iter().any(|n| n.starts_with("diffpose_s")), "{names:?}");
    for row in rows {
        assert!(row["mpjpe"].as_f64().unwrap().is_finite());
        assert!(row["auc"].as_f64().unwrap() >= 0.0);
    }

    // Stdout mirrors the artifact rows as JSONL.
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert_eq!(stdout.lines().count(), rows.len());
}

#[test]
fn inspect_hk_reports_moments_and_a_monotone_fit_trace() {
    let fx = fixture();
    let dir = TempDir::new().unwrap();
    let out_path = dir.path().join("inspect.json");
    run_ok(&[
        "inspect-hk",
        "--data",
        fx.data.to_str().unwrap(),
        "--sample",
        "2",
        "--draws",
        "200",
        "--components",
        "2",
        "--bins",
        "16",
        "--seed",
        "3",
        "--out",
        out_path.to_str().unwrap(),
    ]);
    let file = json_file(&out_path);
    assert_eq!(file["version"], "diffkit-inspect/1");
    assert_eq!(file["empirical"].as_array().unwrap().len(), 17);
    for joint in file["empirical"].as_array().unwrap() {
        let cov = joint["cov"].as_array().unwrap();
        for r in 0..3 {
            assert!(cov[r][r].as_f64().unwrap() >= 0.0, "diagonal variance");
        }
    }
    assert_eq!(file["mixture"]["weights"].as_array().unwrap().len(), 2);
    assert_eq!(file["mixture"]["dim"], 51);
    let trace: Vec<f64> =
        file["ll_trace"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
    assert!(!trace.is_empty());
    for pair in trace.windows(2) {
        assert!(pair[1] >= pair[0] - 1e-9, "fit trace decreased: {pair:?}");
    }

    // Without --out the report goes to stdout.
    let out = run_ok(&[
        "inspect-hk",
        "--data",
        fx.data.to_str().unwrap(),
        "--sample",
        "0",
        "--draws",
        "50",
        "--components",
        "1",
        "--bins",
        "8",
        "--seed",
        "3",
    ]);
    let parsed: serde_json::Value =
        serde_json::from_str(&String::from_utf8(out.stdout).unwrap()).unwrap();
    assert_eq!(parsed["sample_index"], 0);
}
