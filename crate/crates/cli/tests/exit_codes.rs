use std::fs;
use std::process::Command;

fn pssf() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_pssf"));
    c.env_remove("PSSF_OUT").env("RUST_LOG", "off");
    c
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let status = pssf().args(["simulate", "--config", "/nonexistent/run.toml", "--out"]).arg(&out).status().unwrap();
    assert_eq!(status.code(), Some(2));

    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "no_such_key = 1\n").unwrap();
    let status = pssf().args(["pipeline", "--config"]).arg(&bad).arg("--out").arg(&out).status().unwrap();
    assert_eq!(status.code(), Some(2));

    // No output directory anywhere.
    assert_eq!(pssf().arg("simulate").status().unwrap().code(), Some(2));
}

#[test]
fn stage_failure_exits_3_with_report() {
    let dir = tempfile::tempdir().unwrap();
    let status = pssf().arg("extract").env("PSSF_OUT", dir.path()).status().unwrap();
    assert_eq!(status.code(), Some(3));
    let report = fs::read_to_string(dir.path().join("error_report.json")).unwrap();
    assert!(report.contains("\"stage\": \"extract\"") && report.contains("manifest"), "{report}");
}
