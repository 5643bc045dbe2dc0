use std::fs;
use std::path::Path;

use pssf_core::cli_io::{Pipeline, RunConfig, Stage, ERROR_REPORT_FILE};

const SMALL: &str = r#"
master_seed = 7
[cohort]
n_subjects = 20
n_knees = 30
[ml]
mrmr_k_grid = [5]
l1_lambda_grid = [0.01]
l2_lambda_grid = [0.1]
[ml.forest]
n_trees = 20
[ml.boosting]
n_rounds = 20
[analysis.repeats]
subset_size = 5
n_repeats = 2
"#;

fn pipeline(out: &Path) -> Pipeline {
    Pipeline::new(RunConfig::from_toml(SMALL).unwrap().resolve().unwrap(), out)
}

#[test]
fn small_pipeline_runs_resumes_and_reports_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    let p = pipeline(out);
    let first = p.run_all().unwrap();
    assert!(first.iter().all(|o| !o.skipped));

    for f in ["manifest.jsonl", "features.csv", "features.meta.json", "split.json", "stability.csv", "stable_features.json", "reports/summary.json", "reports/predictions.csv"] {
        assert!(out.join(f).is_file(), "{f} missing");
    }
    let images = fs::read_dir(out.join("images")).unwrap().filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "png")).count();
    assert_eq!(images, 90);
    let reports = fs::read_dir(out.join("reports")).unwrap().filter(|e| e.as_ref().unwrap().file_name().to_string_lossy().ends_with("_protocol.json")).count();
    assert_eq!(reports, 3);
    for s in Stage::ALL {
        assert!(out.join(format!(".pssf/{}.json", s.as_str())).is_file());
    }

    let again = pipeline(out).run_all().unwrap();
    assert!(again.iter().all(|o| o.skipped), "{again:?}");

    // Corrupting an image invalidates extraction, which then names the file.
    let victim = out.join("images/S003_left_reference.png");
    let victim = if victim.exists() { victim } else { fs::read_dir(out.join("images")).unwrap().map(|e| e.unwrap().path()).find(|p| p.is_file()).unwrap() };
    let mut bytes = fs::read(&victim).unwrap();
    let last = bytes.len() - 20;
    bytes[last] ^= 0xff;
    fs::write(&victim, bytes).unwrap();
    let err = pipeline(out).run(Stage::Extract).unwrap_err();
    let name = victim.file_name().unwrap().to_string_lossy().to_string();
    assert!(err.records.iter().any(|r| r.contains(&name)), "{:?}", err.records);
    let report = fs::read_to_string(out.join(ERROR_REPORT_FILE)).unwrap();
    assert!(report.contains("\"stage\": \"extract\"") && report.contains(&name), "{report}");
}
