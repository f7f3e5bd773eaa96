//! End-to-end checks of the command-line surface: config parsing, batch
//! dumps, a full tiny training run, and CSV merging.

use std::path::Path;
use std::process::Command;

fn mmcl() -> Command {
    Command::new(env!("CARGO_BIN_EXE_mmcl"))
}

fn write_tiny_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("tiny.toml");
    std::fs::write(
        &path,
        "n_c = 2\n\
         n_s = 2\n\
         n_m1 = 1\n\
         n_m2 = 1\n\
         batch_size = 16\n\
         iterations = 10\n\
         log_every = 5\n\
         encoder_layers = 2\n\
         encoder_hidden = 8\n\
         n_train_eval = 60\n\
         n_test_eval = 30\n\
         seeds = [0]\n",
    )
    .unwrap();
    path
}

#[test]
fn simulate_dumps_latent_csv() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_tiny_config(dir.path());
    let file = dir.path().join("batch.csv");
    let output = mmcl()
        .args(["simulate", "--n", "25", "--seed", "3"])
        .arg("--config")
        .arg(&config)
        .arg("--file")
        .arg(&file)
        .output()
        .unwrap();
    assert!(output.status.success(), "{}", String::from_utf8_lossy(&output.stderr));
    let text = std::fs::read_to_string(&file).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "c_0,c_1,s_0,s_tilde_0,m1_0,m2_0");
    assert_eq!(lines.count(), 25);
}

#[test]
fn unknown_config_key_fails_with_message() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bad.toml");
    std::fs::write(&config, "definitely_not_a_key = 1\n").unwrap();
    let output = mmcl()
        .args(["simulate"])
        .arg("--config")
        .arg(&config)
        .output()
        .unwrap();
    assert!(!output.status.success());
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(
        stderr.contains("definitely_not_a_key") || stderr.contains("unknown field"),
        "stderr: {stderr}"
    );
}

#[test]
fn conflicting_scale_flags_are_rejected() {
    let output = mmcl()
        .args(["table1", "--scaled", "--paper-scale"])
        .output()
        .unwrap();
    assert!(!output.status.success());
}

#[test]
fn train_writes_trace_report_and_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_tiny_config(dir.path());
    let out = dir.path().join("run");
    let output = mmcl()
        .args(["train", "--seed", "0"])
        .arg("--config")
        .arg(&config)
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert!(output.status.success(), "{}", String::from_utf8_lossy(&output.stderr));
    let stdout = String::from_utf8_lossy(&output.stdout);
    assert!(stdout.contains("content"), "stdout: {stdout}");

    let entries: Vec<String> = std::fs::read_dir(&out)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    assert!(entries.iter().any(|n| n.starts_with("trace_")), "{entries:?}");
    assert!(entries.iter().any(|n| n.starts_with("report_")), "{entries:?}");
    assert!(entries.iter().any(|n| n == "checkpoints"), "{entries:?}");

    let report_name = entries.iter().find(|n| n.starts_with("report_")).unwrap();
    let report = std::fs::read_to_string(out.join(report_name)).unwrap();
    assert!(report.starts_with("config_hash,artifact_version,seed,side,block"));
    assert!(report.contains(",content,r2,"));
}

#[test]
fn report_merges_csv_files() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    std::fs::write(&a, "k,v\n1,2\n").unwrap();
    std::fs::write(&b, "k,v\n3,4\n").unwrap();
    let merged = dir.path().join("merged.csv");
    let output = mmcl()
        .arg("report")
        .arg(&a)
        .arg(&b)
        .arg("--out")
        .arg(&merged)
        .output()
        .unwrap();
    assert!(output.status.success(), "{}", String::from_utf8_lossy(&output.stderr));
    assert_eq!(std::fs::read_to_string(&merged).unwrap(), "k,v\n1,2\n3,4\n");
}

#[test]
fn select_dim_rejects_too_few_candidates() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_tiny_config(dir.path());
    let output = mmcl()
        .args(["select-dim", "--candidates", "1,2"])
        .arg("--config")
        .arg(&config)
        .arg("--out")
        .arg(dir.path().join("sel"))
        .output()
        .unwrap();
    assert!(!output.status.success());
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("at least 3"), "stderr: {stderr}");
}

#[test]
fn intervene_validates_setting_rows() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_tiny_config(dir.path());
    let output = mmcl()
        .args(["intervene", "--settings", "9"])
        .arg("--config")
        .arg(&config)
        .arg("--out")
        .arg(dir.path().join("iv"))
        .output()
        .unwrap();
    assert!(!output.status.success());
    assert!(String::from_utf8_lossy(&output.stderr).contains("out of range"));
}
