//! End-to-end CLI checks: exit codes and the gen -> calibrate -> eval file
//! flow on a tiny configuration.

use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_dsattn"))
}

#[test]
fn validation_errors_exit_one() {
    let out = bin().args(["eval", "--out", "/tmp/never.csv", "--mask-fraction", "2.0"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1), "bad mask fraction must exit 1");

    let out = bin().args(["calibrate", "--out", "/tmp/never.json", "--kernel", "bogus"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1), "unknown kernel must exit 1");

    let out = bin().args(["no-such-subcommand"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1), "unknown subcommand must exit 1");
}

#[test]
fn help_exits_zero() {
    let out = bin().arg("--help").output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8_lossy(&out.stdout);
    for sub in ["gen", "calibrate", "eval", "bench", "selftest"] {
        assert!(text.contains(sub), "help must list the {sub} subcommand");
    }
}

#[test]
fn gen_calibrate_eval_flow() {
    let dir = tempfile::tempdir().unwrap();
    let cases = dir.path().join("cases");
    let layer = dir.path().join("layer.json");
    let csv = dir.path().join("cases.csv");

    let small = [
        "--n", "12", "--d-h", "4", "--d-v", "3", "--heads", "2", "--slices", "6",
        "--fit-examples", "4", "--eval-examples", "3", "--budget", "6",
    ];

    let out = bin()
        .args(["gen", "--count", "5", "--out-dir", cases.to_str().unwrap()])
        .args(small)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(std::fs::read_dir(&cases).unwrap().count(), 5);

    let out = bin()
        .args(["calibrate", "--cases", cases.to_str().unwrap(), "--out", layer.to_str().unwrap()])
        .args(small)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let doc: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&layer).unwrap()).unwrap();
    assert_eq!(doc["schema_version"], 1);
    assert_eq!(doc["omega"].as_array().unwrap().len(), 6);

    let out = bin()
        .args(["eval", "--layer", layer.to_str().unwrap(), "--out", csv.to_str().unwrap()])
        .args(small)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(&csv).unwrap();
    assert!(text.lines().next().unwrap().contains("attention_rel_l2_frobenius"));
    assert!(text.lines().count() > 1, "eval must write per-case rows");
}

#[test]
fn config_document_with_flag_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("run.json");
    // Partial config document; unspecified fields take defaults, flags win.
    std::fs::write(
        &cfg_path,
        r#"{"n": 10, "d_h": 4, "d_v": 3, "heads": 2, "slices": 5,
            "fit_examples": 3, "eval_examples": 12,
            "teacher": {"epsilon": 1.0, "budget": 4, "kernel": "score"}}"#,
    )
    .unwrap();
    let csv = dir.path().join("out.csv");
    let out = bin()
        .args([
            "eval",
            "--config",
            cfg_path.to_str().unwrap(),
            "--eval-examples",
            "2",
            "--out",
            csv.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(&csv).unwrap();
    // 4 operators (teacher, normalizer_s3, compiled one/two-sided) x 2 cases
    assert_eq!(text.lines().count(), 1 + 4 * 2, "flag override must trim eval cases");
}
