//! End-to-end tests for the `fedprompt` binary: validate, run
//! (including dry runs and reruns), report, and seed overrides.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_fedprompt")
}

/// Runs the binary with `args`, env cleared of the output/jobs
/// variables so tests stay independent of the outer shell.
fn fedprompt(args: &[&str]) -> Output {
    Command::new(bin())
        .args(args)
        .env_remove("FEDPROMPT_OUT")
        .env_remove("FEDPROMPT_JOBS")
        .output()
        .expect("binary should spawn")
}

fn stdout_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn small_config(seed: u64) -> String {
    format!(
        r#"
name = "cli-smoke"
seed = {seed}

[model]
pixel_dim = 16
embed_dim = 8
token_dim = 8
prompt_len = 2
class_count = 4
temperature = 0.07

[data]
per_class_train = 8
per_class_test = 4
noise_sigma = 0.05

[federation]
n_clients = 4
rounds = 3
local_epochs = 1
batch_size = 8
learning_rate = 0.01

[partition]
mode = "kshot_iid"
shots = 2

[attack]
malicious_fraction = 0.25
target_label = 1
lambda = 2.0
linf_budget = 0.1

[defense]
rule = "fedavg"
"#
    )
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path
}

/// Sorted run directories under an output root.
fn run_dirs(root: &Path) -> Vec<PathBuf> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    dirs
}

#[test]
fn validate_accepts_good_config_and_prints_plan() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "good.toml", &small_config(7));

    let out = fedprompt(&["validate", "--config", cfg.to_str().unwrap()]);
    let stdout = stdout_of(&out);
    assert!(out.status.success(), "stderr: {}", stderr_of(&out));
    assert!(stdout.contains("1 run(s):"), "plan missing: {stdout}");
    assert!(stdout.contains("seed=7"), "seed missing: {stdout}");
    assert!(stdout.trim_end().ends_with("ok"), "no ok line: {stdout}");
}

#[test]
fn validate_rejects_infeasible_selection_rule() {
    // 4 clients with 2 assumed malicious leaves no scorable update.
    let text = small_config(7).replace(
        "rule = \"fedavg\"",
        "rule = \"multi_krum\"\nassumed_malicious = 2\nselect_count = 1",
    );
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "bad.toml", &text);

    let out = fedprompt(&["validate", "--config", cfg.to_str().unwrap()]);
    let stderr = stderr_of(&out);
    assert!(!out.status.success(), "must reject: {}", stdout_of(&out));
    assert!(stderr.contains("invalid config"), "{stderr}");
    assert!(stderr.contains("N - f - 2 >= 1"), "{stderr}");
}

#[test]
fn validate_rejects_missing_file() {
    let out = fedprompt(&["validate", "--config", "/nonexistent/nope.toml"]);
    assert!(!out.status.success());
    assert!(stderr_of(&out).contains("invalid config"));
}

#[test]
fn run_dry_run_writes_nothing() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "dry.toml", &small_config(7));
    let out_root = tmp.path().join("never-created");

    let out = fedprompt(&[
        "run",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out_root.to_str().unwrap(),
        "--dry-run",
    ]);
    let stdout = stdout_of(&out);
    assert!(out.status.success(), "stderr: {}", stderr_of(&out));
    assert!(stdout.contains("dry run: nothing written"), "{stdout}");
    assert!(stdout.contains("1 run(s):"), "plan missing: {stdout}");
    assert!(!out_root.exists(), "dry run must not create the out root");
}

#[test]
fn run_writes_artifacts_and_reruns_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "smoke.toml", &small_config(7));
    let root_a = tmp.path().join("a");
    let root_b = tmp.path().join("b");

    for root in [&root_a, &root_b] {
        let out = fedprompt(&[
            "run",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            root.to_str().unwrap(),
        ]);
        let stdout = stdout_of(&out);
        assert!(out.status.success(), "stderr: {}", stderr_of(&out));
        assert!(stdout.contains("acc="), "no summary line: {stdout}");
        assert!(stdout.contains("asr="), "no summary line: {stdout}");
    }

    let dirs_a = run_dirs(&root_a);
    let dirs_b = run_dirs(&root_b);
    assert_eq!(dirs_a.len(), 1);
    assert_eq!(
        dirs_a[0].file_name(),
        dirs_b[0].file_name(),
        "run directory name must be config-determined"
    );
    for name in ["history.csv", "summary.json", "prompt_final.bin"] {
        assert!(dirs_a[0].join(name).is_file(), "{name} missing");
    }
    // attacked run, so the trigger is part of the artifacts
    assert!(dirs_a[0].join("trigger_final.bin").is_file());

    let ha = fs::read(dirs_a[0].join("history.csv")).unwrap();
    let hb = fs::read(dirs_b[0].join("history.csv")).unwrap();
    assert!(!ha.is_empty());
    assert_eq!(ha, hb, "rerun must reproduce history byte-for-byte");
}

#[test]
fn report_aggregates_summaries_into_csv() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "smoke.toml", &small_config(11));
    let root = tmp.path().join("runs");

    let run = fedprompt(&[
        "run",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        root.to_str().unwrap(),
    ]);
    assert!(run.status.success(), "stderr: {}", stderr_of(&run));

    let out = fedprompt(&["report", "--out", root.to_str().unwrap()]);
    let stdout = stdout_of(&out);
    assert!(out.status.success(), "stderr: {}", stderr_of(&out));
    assert!(stdout.contains("report.csv"), "{stdout}");
    assert!(stdout.contains("(1 runs)"), "{stdout}");

    let report = fs::read_to_string(root.join("report.csv")).unwrap();
    let mut lines = report.lines();
    let header = lines.next().unwrap();
    assert!(header.contains("label"), "{header}");
    assert!(header.contains("final_acc"), "{header}");
    assert_eq!(lines.count(), 1, "one data row per run");
}

#[test]
fn seed_override_replaces_file_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "seeded.toml", &small_config(7));

    let plan = fedprompt(&[
        "validate",
        "--config",
        cfg.to_str().unwrap(),
        "--seed-override",
        "99",
    ]);
    assert!(plan.status.success());
    assert!(stdout_of(&plan).contains("seed=99"), "{}", stdout_of(&plan));

    let root_base = tmp.path().join("base");
    let root_override = tmp.path().join("override");
    let base = fedprompt(&[
        "run",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        root_base.to_str().unwrap(),
    ]);
    assert!(base.status.success(), "stderr: {}", stderr_of(&base));
    let over = fedprompt(&[
        "run",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        root_override.to_str().unwrap(),
        "--seed-override",
        "99",
    ]);
    assert!(over.status.success(), "stderr: {}", stderr_of(&over));

    let ha = fs::read(run_dirs(&root_base)[0].join("history.csv")).unwrap();
    let hb = fs::read(run_dirs(&root_override)[0].join("history.csv")).unwrap();
    assert_ne!(ha, hb, "a different seed must change the trajectory");
}
