use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use secure_core::data::load_dataset;
use secure_core::losses::LossWeights;
use secure_core::model::load_checkpoint;
use secure_core::trainer::{continue_training, TrainConfig};
use serde_json::Value;
use sha2::{Digest, Sha256};

fn secure(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_secure"))
        .args(args)
        .current_dir(cwd)
        .env("SOURCE_DATE_EPOCH", "1700000000")
        .env_remove("SECURE_OUT_DIR")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str], cwd: &Path) -> String {
    let out = secure(args, cwd);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str], cwd: &Path) -> i32 {
    secure(args, cwd).status.code().unwrap()
}

fn json(path: impl AsRef<Path>) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

/// Every file under `dir`, keyed by relative path.
fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

const GEN: &[&str] = &[
    "gen-data",
    "--out",
    "data",
    "--num-videos",
    "8",
    "--test-videos",
    "6",
    "--T",
    "12",
    "--n",
    "2",
    "--d",
    "4",
    "--ramp-len",
    "5",
];

const TRAIN: &[&str] = &[
    "train",
    "--data",
    "data",
    "--hidden",
    "6",
    "--heads",
    "2",
    "--epochs",
    "2",
    "--lr",
    "0.01",
    "--batch-size",
    "4",
    "--out-dir",
    "base",
];

fn with_baseline() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    ok(GEN, dir.path());
    ok(TRAIN, dir.path());
    dir
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&["train", "--bogus"], dir.path()), 2);
    assert_eq!(code(&["frobnicate"], dir.path()), 2);
    assert_eq!(
        code(&["gen-data", "--out", "x", "--positive-frac", "1.5"], dir.path()),
        2
    );
    assert_eq!(code(&["gen-data", "--out", "x", "--T", "3"], dir.path()), 2);
    assert_eq!(code(&["gradcheck", "--tolerance", "0"], dir.path()), 2);
    assert_eq!(code(&["bench", "--data", "data"], dir.path()), 2);
}

#[test]
fn io_errors_exit_with_three() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&["train", "--data", "missing", "--out-dir", "t"], dir.path()), 3);
    fs::create_dir(dir.path().join("empty")).unwrap();
    assert_eq!(code(&["report", "--run-dir", "empty"], dir.path()), 3);
    assert_eq!(code(&["report", "--run-dir", "nowhere"], dir.path()), 3);
    fs::write(dir.path().join("bad.ckpt"), b"not a checkpoint").unwrap();
    ok(GEN, dir.path());
    let out = secure(
        &["bench", "--checkpoint", "bad.ckpt", "--data", "data", "--out-dir", "b"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error: "));
}

#[test]
fn numeric_and_verification_failures() {
    let dir = tempfile::tempdir().unwrap();
    ok(GEN, dir.path());
    let mut diverge = TRAIN.to_vec();
    let lr = diverge.iter().position(|a| *a == "0.01").unwrap();
    diverge[lr] = "1e308";
    assert_eq!(code(&diverge, dir.path()), 4);
    let strict = [
        "gradcheck",
        "--seeds",
        "1",
        "--coords",
        "3",
        "--tolerance",
        "1e-14",
        "--out-dir",
        "g",
    ];
    assert_eq!(code(&strict, dir.path()), 5);
    let report = json(dir.path().join("g/gradcheck.json"));
    assert_eq!(report["passed"], Value::Bool(false));
    let loose = ["gradcheck", "--seeds", "1", "--coords", "3", "--out-dir", "g2"];
    assert_eq!(code(&loose, dir.path()), 0);
}

#[test]
fn gen_data_honours_the_positive_fraction() {
    let dir = tempfile::tempdir().unwrap();
    ok(
        &[
            "gen-data",
            "--out",
            "d",
            "--num-videos",
            "4",
            "--positive-frac",
            "0.5",
            "--T",
            "12",
            "--d",
            "3",
        ],
        dir.path(),
    );
    let train = load_dataset(&dir.path().join("d/train")).unwrap();
    assert_eq!((train.len(), train.num_positive()), (4, 2));
    let test = load_dataset(&dir.path().join("d/test")).unwrap();
    assert_eq!(test.len(), 2);
}

#[test]
fn reruns_reproduce_identical_bytes() {
    let dir = with_baseline();
    let p = dir.path();
    let bench = [
        "bench",
        "--checkpoint",
        "base/baseline.ckpt",
        "--data",
        "data",
        "--ip-sigmas",
        "0.2",
        "--lp-sigmas",
        "0.1",
        "--seeds",
        "2",
        "--out-dir",
        "bench",
    ];
    let certify = [
        "certify",
        "--checkpoint",
        "base/baseline.ckpt",
        "--reference",
        "base/baseline.ckpt",
        "--data",
        "data",
        "--epsilon",
        "0,0.05",
        "--probes",
        "5",
        "--iterations",
        "3",
        "--out-dir",
        "cert",
    ];
    ok(&bench, p);
    ok(&certify, p);
    let runs = ["data", "base", "bench", "cert"];
    let first: Vec<_> = runs.iter().map(|r| snapshot(&p.join(r))).collect();
    ok(GEN, p);
    ok(TRAIN, p);
    ok(&bench, p);
    ok(&certify, p);
    for (r, before) in runs.iter().zip(first) {
        let after = snapshot(&p.join(r));
        assert_eq!(
            before.keys().collect::<Vec<_>>(),
            after.keys().collect::<Vec<_>>(),
            "{r}"
        );
        for (k, v) in &before {
            assert!(after[k] == *v, "{r}/{} differs", k.display());
        }
    }
}

#[test]
fn manifest_checksums_match_outputs_and_echo_defaults() {
    let dir = with_baseline();
    let base = dir.path().join("base");
    let m = json(base.join("run_manifest.json"));
    assert_eq!(m["command"], "train");
    let train = &m["config"]["train"];
    assert_eq!(train["learning_rate"], 0.01);
    assert_eq!(train["clip_norm"], 10.0);
    assert_eq!(train["pgd"]["epsilon"], 0.01);
    assert_eq!(train["pgd"]["iterations"], 20);
    assert_eq!(train["weights"]["lambda_s_out"], 50.0);
    assert_eq!(m["started_at"], "2023-11-14T22:13:20Z");
    let outputs = m["outputs"].as_array().unwrap();
    assert!(!outputs.is_empty());
    for o in outputs {
        let bytes = fs::read(base.join(o["path"].as_str().unwrap())).unwrap();
        assert_eq!(o["bytes"], bytes.len());
        assert_eq!(o["sha256"], hex::encode(Sha256::digest(&bytes)));
    }
    assert!(m["inputs"]
        .as_array()
        .unwrap()
        .iter()
        .any(|i| i["path"].as_str().unwrap().ends_with("manifest.json")));
    assert!(base.join("baseline.ckpt").exists() && base.join("run_log.csv").exists());
}

#[test]
fn finetune_bench_certify_and_report() {
    let dir = with_baseline();
    let p = dir.path();
    ok(
        &[
            "finetune-secure",
            "--baseline",
            "base/baseline.ckpt",
            "--data",
            "data",
            "--epochs",
            "1",
            "--iterations",
            "2",
            "--lr",
            "0.01",
            "--batch-size",
            "4",
            "--ablation",
            "cps",
            "--out-dir",
            "ft",
        ],
        p,
    );
    let log = json(p.join("ft/run_log.json"));
    let steps = log["steps"].as_array().unwrap();
    assert!(steps
        .iter()
        .all(|s| s["losses"]["l_spd"] == 0.0 && s["losses"]["l_sld"] == 0.0));
    assert!(steps.iter().any(|s| s["losses"]["l_cps"].as_f64().unwrap() > 0.0));
    let m = json(p.join("ft/run_manifest.json"));
    assert_eq!(m["config"]["terms"], serde_json::json!(["cps"]));

    let table = ok(
        &[
            "bench",
            "--checkpoint",
            "base/baseline.ckpt",
            "--checkpoint",
            "ft/secure.ckpt",
            "--data",
            "data",
            "--ip-sigmas",
            "0.2",
            "--lp-sigmas",
            "",
            "--seeds",
            "2",
            "--out-dir",
            "bench",
        ],
        p,
    );
    assert!(table.contains("baseline") && table.contains("secure"));
    let csv = fs::read_to_string(p.join("bench/bench.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2 * 2);
    assert!(p.join("bench/comparison.md").exists());

    ok(
        &[
            "certify",
            "--checkpoint",
            "base/baseline.ckpt",
            "--reference",
            "base/baseline.ckpt",
            "--data",
            "data",
            "--epsilon",
            "0.01",
            "--probes",
            "5",
            "--iterations",
            "3",
            "--out-dir",
            "cert",
        ],
        p,
    );
    let cert = json(p.join("cert/certification.json"));
    assert_eq!(cert[0]["gamma1_hat"], 0.0);
    assert_eq!(cert[0]["beta1_hat"], 0.0);
    assert!(cert[0]["gamma2_hat"].as_f64().unwrap() > 0.0);

    ok(&["report", "--run-dir", "bench"], p);
    let svg = fs::read_to_string(p.join("bench/report.svg")).unwrap();
    assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
    assert!(p.join("bench/report.csv").exists());
    ok(&["report", "--run-dir", "ft", "--out-svg", "ft.svg"], p);
    assert!(p.join("ft.svg").exists() && p.join("ft_losses.csv").exists());
}

#[test]
fn empty_sigma_lists_give_only_clean_rows() {
    let dir = with_baseline();
    ok(
        &[
            "bench",
            "--checkpoint",
            "base/baseline.ckpt",
            "--data",
            "data",
            "--ip-sigmas",
            "",
            "--lp-sigmas",
            "",
            "--out-dir",
            "b",
        ],
        dir.path(),
    );
    let report = json(dir.path().join("b/bench.json"));
    let rows = report["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0]["condition"]["kind"], "clean");
}

#[test]
fn config_file_supplies_defaults_and_flags_win() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    ok(GEN, p);
    fs::write(
        p.join("cfg.json"),
        r#"{"seed": 4, "train": {"epochs": 1, "hidden": 6, "heads": 2, "lr": 0.5}}"#,
    )
    .unwrap();
    ok(
        &[
            "--config",
            "cfg.json",
            "train",
            "--data",
            "data",
            "--lr",
            "0.02",
            "--out-dir",
            "t",
        ],
        p,
    );
    let train = &json(p.join("t/run_manifest.json"))["config"]["train"];
    assert_eq!(train["seed"], 4);
    assert_eq!(train["epochs"], 1);
    assert_eq!(train["hidden"], 6);
    assert_eq!(train["learning_rate"], 0.02);
    fs::write(p.join("broken.json"), "[1, 2]").unwrap();
    assert_eq!(code(&["--config", "broken.json", "train", "--data", "data"], p), 2);
}

#[test]
fn default_run_directory_is_named_by_command_and_seed() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_secure"))
        .args(["gradcheck", "--seeds", "1", "--coords", "2", "--seed", "3"])
        .current_dir(dir.path())
        .env("SOURCE_DATE_EPOCH", "1700000000")
        .env("SECURE_OUT_DIR", "runs-here")
        .output()
        .unwrap();
    assert!(out.status.success());
    let names: Vec<String> = fs::read_dir(dir.path().join("runs-here"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    assert_eq!(names, vec!["gradcheck-20231114T221320Z-seed3".to_string()]);
}

#[test]
fn gen_data_defaults_give_the_full_suite() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["gen-data", "--out", "d"], dir.path());
    let train = load_dataset(&dir.path().join("d/train")).unwrap();
    let test = load_dataset(&dir.path().join("d/test")).unwrap();
    assert_eq!((train.len(), test.len()), (200, 100));
    assert_eq!(
        (train.frames(), train.objects(), train.dim(), train.fps()),
        (50, 5, 32, 10)
    );
    assert_eq!((train.num_positive(), test.num_positive()), (100, 50));
}

#[test]
fn zero_lambda_finetune_matches_continued_training() {
    let dir = with_baseline();
    let p = dir.path();
    ok(
        &[
            "finetune-secure",
            "--baseline",
            "base/baseline.ckpt",
            "--data",
            "data",
            "--lambda-c-out",
            "0",
            "--lambda-s-out",
            "0",
            "--lambda-c-feat",
            "0",
            "--lambda-s-feat",
            "0",
            "--epochs",
            "2",
            "--lr",
            "0.01",
            "--batch-size",
            "4",
            "--out-dir",
            "ft",
        ],
        p,
    );
    let base = load_checkpoint(&p.join("base/baseline.ckpt")).unwrap().params;
    let ds = load_dataset(&p.join("data/train")).unwrap();
    let cfg = TrainConfig {
        epochs: 2,
        learning_rate: 0.01,
        batch_size: 4,
        hidden: base.dims.hidden,
        heads: base.dims.heads,
        weights: LossWeights::zero(),
        ..TrainConfig::finetune()
    };
    let (expect, _) = continue_training(&base, &ds, &cfg).unwrap();
    assert_eq!(load_checkpoint(&p.join("ft/secure.ckpt")).unwrap().params, expect);
}

#[test]
fn report_draws_clean_and_perturbed_trajectories_per_video() {
    let dir = with_baseline();
    let p = dir.path();
    ok(
        &[
            "bench",
            "--checkpoint",
            "base/baseline.ckpt",
            "--data",
            "data",
            "--ip-sigmas",
            "0.1,0.3",
            "--lp-sigmas",
            "",
            "--seeds",
            "1",
            "--out-dir",
            "bench",
        ],
        p,
    );
    let traj = json(p.join("bench/trajectories.json"));
    let ids: Vec<String> = traj["models"][0]["videos"]
        .as_array()
        .unwrap()
        .iter()
        .take(2)
        .map(|v| v["video_id"].as_str().unwrap().to_string())
        .collect();
    ok(&["report", "--run-dir", "bench", "--videos", &ids.join(",")], p);
    let svg = fs::read_to_string(p.join("bench/report.svg")).unwrap();
    assert!(svg.contains("IP (0.3)") && !svg.contains("IP (0.1)"));
    for id in &ids {
        assert!(svg.contains(id.as_str()));
    }
    let csv = fs::read_to_string(p.join("bench/report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + ids.len() * 12);
    assert!(csv.lines().skip(1).all(|l| l.split(',').all(|f| !f.is_empty())));
    assert_eq!(code(&["report", "--run-dir", "bench", "--videos", "nope"], p), 2);
}
