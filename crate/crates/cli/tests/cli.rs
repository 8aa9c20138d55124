use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn tspo(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tspo"))
        .current_dir(dir)
        .env_remove("TSPO_OUT_DIR")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = tspo(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(dir: &Path, args: &[&str]) -> i32 {
    tspo(dir, args).status.code().expect("exited normally")
}

fn small_gen(dir: &Path, out: &str, seed: &str) {
    ok(
        dir,
        &[
            "gen", "--out", out, "--n", "12", "--dim", "8", "--tc", "48", "--seed", seed,
        ],
    );
}

fn manifest(path: &Path) -> Value {
    let mut name = path.file_name().unwrap().to_os_string();
    name.push(".manifest.json");
    serde_json::from_str(&fs::read_to_string(path.with_file_name(name)).unwrap()).unwrap()
}

#[test]
fn pipeline_is_byte_reproducible() {
    // Reports echo input paths, so both runs use the same relative names.
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for d in [a.path(), b.path()] {
        small_gen(d, "d.tsds", "3");
        let stdout = ok(
            d,
            &[
                "train", "--data", "d.tsds", "--out", "m.ckpt", "--ts", "8", "--group", "4",
            ],
        );
        assert!(
            stdout.contains("mean reward over last 12 steps:"),
            "{stdout}"
        );
        ok(
            d,
            &["eval", "--data", "d.tsds", "--ckpt", "m.ckpt", "--ts", "16"],
        );
    }
    for file in ["d.tsds", "m.ckpt", "m.ckpt.metrics.jsonl", "report.json"] {
        assert_eq!(
            fs::read(a.path().join(file)).unwrap(),
            fs::read(b.path().join(file)).unwrap(),
            "{file}"
        );
    }
    small_gen(b.path(), "other.tsds", "4");
    assert_ne!(
        fs::read(a.path().join("d.tsds")).unwrap(),
        fs::read(b.path().join("other.tsds")).unwrap()
    );
}

#[test]
fn manifests_record_every_setting() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_gen(d, "d.tsds", "5");
    let m = manifest(&d.join("d.tsds"));
    assert_eq!(m["command"], "gen");
    assert_eq!(m["config"]["world"]["feature_dim"], 8);
    assert_eq!(m["config"]["world"]["modality_gap_scale"], 0.5);
    assert_eq!(m["config"]["recipe"]["candidate_frames"], 48);
    assert_eq!(m["seeds"]["world"], 5);
    assert!(m["finished_unix_ms"].as_u64() >= m["started_unix_ms"].as_u64());

    ok(d, &["train", "--data", "d.tsds", "--ts", "8"]);
    let m = manifest(&d.join("checkpoint.txt"));
    assert_eq!(m["config"]["trainer"]["group_size"], 8);
    assert_eq!(m["config"]["trainer"]["learning_rate"], 5e-4);
    assert_eq!(m["config"]["agent"]["window"], 12);
    assert_eq!(m["config"]["agent"]["temperature"], 0.025);
    assert!(d.join("checkpoint.txt.metrics.jsonl").exists());
}

#[test]
fn eval_without_checkpoint_echoes_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_gen(d, "d.tsds", "6");
    let stdout = ok(d, &["eval", "--data", "d.tsds", "--ts", "16"]);
    for p in ["tspo", "uniform", "random", "best-cover"] {
        assert!(stdout.contains(p), "{stdout}");
    }
    let report: Value =
        serde_json::from_str(&fs::read_to_string(d.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["config"]["agent"], "untrained");
    assert_eq!(report["config"]["tau"], "0.025");
    assert_eq!(report["config"]["window"], "12");
    assert_eq!(report["policies"].as_array().unwrap().len(), 4);
    assert_eq!(report["dataset_digest"].as_str().unwrap().len(), 64);

    ok(
        d,
        &[
            "eval",
            "--data",
            "d.tsds",
            "--ts",
            "16",
            "--format",
            "csv",
            "--policy",
            "uniform,random",
        ],
    );
    let csv = fs::read_to_string(d.join("report.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("policy,metric,value"));
    assert_eq!(csv.lines().count(), 1 + 2 * 5);
}

#[test]
fn out_dir_comes_from_flag_or_environment() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::create_dir(d.join("runs")).unwrap();
    ok(
        d,
        &[
            "--out-dir",
            "runs",
            "gen",
            "--n",
            "2",
            "--dim",
            "4",
            "--tc",
            "32",
        ],
    );
    assert!(d.join("runs/dataset.tsds").exists());
    let out = Command::new(env!("CARGO_BIN_EXE_tspo"))
        .current_dir(d)
        .env("TSPO_OUT_DIR", "runs")
        .args(["train", "--data", "runs/dataset.tsds", "--ts", "4"])
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(d.join("runs/checkpoint.txt").exists());
}

#[test]
fn resume_continues_and_rejects_mismatches() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_gen(d, "d.tsds", "7");
    ok(
        d,
        &[
            "train",
            "--data",
            "d.tsds",
            "--out",
            "full.ckpt",
            "--ts",
            "8",
        ],
    );
    // Generation is sequential, so a 4-record run yields the first 4 records.
    ok(
        d,
        &[
            "gen",
            "--out",
            "head.tsds",
            "--n",
            "4",
            "--dim",
            "8",
            "--tc",
            "48",
            "--seed",
            "7",
        ],
    );
    ok(
        d,
        &[
            "train",
            "--data",
            "head.tsds",
            "--out",
            "part.ckpt",
            "--ts",
            "8",
            "--checkpoint-every",
            "2",
        ],
    );
    let stdout = ok(
        d,
        &[
            "train",
            "--data",
            "d.tsds",
            "--out",
            "part.ckpt",
            "--ts",
            "8",
            "--resume",
            "part.ckpt",
        ],
    );
    assert!(
        stdout.contains("trained 8 steps (from step 4 to 12)"),
        "{stdout}"
    );
    for suffix in ["", ".metrics.jsonl"] {
        assert_eq!(
            fs::read(d.join(format!("full.ckpt{suffix}"))).unwrap(),
            fs::read(d.join(format!("part.ckpt{suffix}"))).unwrap()
        );
    }

    assert_eq!(
        code(
            d,
            &[
                "train",
                "--data",
                "d.tsds",
                "--ts",
                "8",
                "--tau",
                "0.5",
                "--resume",
                "part.ckpt"
            ]
        ),
        2
    );
    ok(
        d,
        &[
            "gen",
            "--out",
            "wide.tsds",
            "--n",
            "2",
            "--dim",
            "4",
            "--tc",
            "48",
        ],
    );
    assert_eq!(
        code(
            d,
            &[
                "train",
                "--data",
                "wide.tsds",
                "--ts",
                "8",
                "--resume",
                "part.ckpt"
            ]
        ),
        5
    );
}

#[test]
fn exit_codes_follow_error_classes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_gen(d, "d.tsds", "8");
    ok(
        d,
        &["train", "--data", "d.tsds", "--out", "x.ckpt", "--ts", "8"],
    );
    fs::write(d.join("junk.tsds"), b"TSDS\x01\x00\x00\x00").unwrap();

    assert_eq!(code(d, &["gen", "--n", "2", "--dim", "0"]), 2);
    assert_eq!(code(d, &["train", "--data", "d.tsds", "--group", "1"]), 2);
    assert_eq!(
        code(d, &["eval", "--data", "d.tsds", "--policy", "oracle"]),
        2
    );
    assert_eq!(code(d, &["frobnicate"]), 2);
    assert_eq!(
        code(
            d,
            &[
                "gen",
                "--n",
                "5",
                "--dim",
                "4",
                "--tc",
                "32",
                "--style",
                "needle",
                "--needle-threshold",
                "9"
            ]
        ),
        3
    );
    assert_eq!(code(d, &["train", "--data", "junk.tsds"]), 4);
    assert_eq!(code(d, &["eval", "--data", "missing.tsds"]), 4);
    ok(
        d,
        &[
            "gen",
            "--out",
            "wide.tsds",
            "--n",
            "2",
            "--dim",
            "4",
            "--tc",
            "48",
        ],
    );
    assert_eq!(
        code(
            d,
            &[
                "eval",
                "--data",
                "wide.tsds",
                "--ckpt",
                "x.ckpt",
                "--ts",
                "8"
            ]
        ),
        5
    );
}

#[test]
fn grad_check_passes_and_fails_loudly() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let stdout = ok(d, &["grad-check", "--trials", "10"]);
    assert!(
        stdout.contains("10 of 10 trials within tolerance"),
        "{stdout}"
    );
    assert!(stdout.trim_end().ends_with("PASS"));

    let out = tspo(
        d,
        &[
            "grad-check",
            "--trials",
            "3",
            "--tol",
            "1e-15",
            "--seed",
            "4",
        ],
    );
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("--trials 1"), "{stderr}");
}
