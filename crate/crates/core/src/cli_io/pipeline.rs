use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::config::Resolved;
use super::digest::{file_sha256, sha256_hex};
use crate::analysis::{
    evaluate_scenario, feature_importance, median_icc, ordering_checks, read_repeats, repeat_jobs, repeat_simulations, stability_report, stability_screen, train_models, write_predictions_csv,
    write_reports_csv, write_stability_csv, Condition, ScenarioData, ScenarioName, ScenarioSpec,
};
use crate::cohort::{generate_cohort, record_is_current, render_cohort, write_atomic, CohortManifest, MANIFEST_FILE, MANIFEST_META_FILE};
use crate::error::{Error, Result};
use crate::ml::{knee_grades, split_subjects, EvaluationReport, SplitPlan, TrainedModel};
use crate::radiomics::{extract_matrix, jobs_from_manifest, Family, FeatureMatrix, MatrixSidecar};
use crate::seed;

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
pub const STATE_DIR: &str = ".pssf";
pub const ERROR_REPORT_FILE: &str = "error_report.json";
pub const FEATURES_FILE: &str = "features.csv";
pub const FEATURES_META_FILE: &str = "features.meta.json";
pub const SPLIT_FILE: &str = "split.json";
pub const REPEAT_FEATURES_FILE: &str = "repeat_features.csv";
pub const STABILITY_FILE: &str = "stability.csv";
pub const STABLE_FEATURES_FILE: &str = "stable_features.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Simulate,
    Extract,
    Train,
    Evaluate,
    Stability,
}

impl Stage {
    pub const ALL: [Stage; 5] = [Stage::Simulate, Stage::Extract, Stage::Train, Stage::Evaluate, Stage::Stability];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Simulate => "simulate",
            Stage::Extract => "extract",
            Stage::Train => "train",
            Stage::Evaluate => "evaluate",
            Stage::Stability => "stability",
        }
    }
}

/// Completion record of a stage: what it read, what it wrote, under which
/// configuration. Paths are relative to the output directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageMarker {
    pub stage: Stage,
    pub tool_version: String,
    pub config_hash: String,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

/// A failed stage: the error plus the records it concerns.
#[derive(Debug, thiserror::Error)]
#[error("stage {} failed: {error}", stage.as_str())]
pub struct StageError {
    pub stage: Stage,
    #[source]
    pub error: Error,
    pub records: Vec<String>,
}

#[derive(Serialize)]
struct ErrorReport<'a> {
    stage: &'a str,
    error: String,
    records: &'a [String],
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct StageOutcome {
    pub stage: Stage,
    pub skipped: bool,
}

type StageResult<T> = std::result::Result<T, (Error, Vec<String>)>;

fn plain<T>(r: Result<T>) -> StageResult<T> {
    r.map_err(|e| {
        let records = match &e {
            Error::Checksum { path } | Error::Io { path, .. } | Error::Image { path, .. } => vec![path.display().to_string()],
            _ => Vec::new(),
        };
        (e, records)
    })
}

fn models_dir(train_protocols: &[String]) -> String {
    if train_protocols.len() == 1 {
        format!("models/{}", train_protocols[0])
    } else {
        "models/all_protocols".into()
    }
}

fn hash_json(v: &serde_json::Value) -> String {
    sha256_hex(v.to_string().as_bytes())
}

/// Stage runner over one output directory.
pub struct Pipeline {
    pub resolved: Resolved,
    pub out: PathBuf,
}

impl Pipeline {
    pub fn new(resolved: Resolved, out: impl Into<PathBuf>) -> Self {
        Pipeline { resolved, out: out.into() }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.out.join(rel)
    }

    fn marker_path(&self, stage: Stage) -> PathBuf {
        self.out.join(STATE_DIR).join(format!("{}.json", stage.as_str()))
    }

    fn scenarios(&self) -> Vec<ScenarioSpec> {
        let ml = &self.resolved.ml;
        self.resolved.config.analysis.scenarios.iter().map(|&n| ScenarioSpec::standard(n, &ml.kinds, &ml.tasks)).collect()
    }

    fn train_sets(&self) -> Vec<Vec<String>> {
        let mut sets: Vec<Vec<String>> = Vec::new();
        for s in self.scenarios() {
            if !sets.contains(&s.train_protocols) {
                sets.push(s.train_protocols);
            }
        }
        sets
    }

    fn model_files(&self) -> Vec<String> {
        let ml = &self.resolved.ml;
        let mut v = Vec::new();
        for set in self.train_sets() {
            for t in &ml.tasks {
                for k in &ml.kinds {
                    v.push(format!("{}/{}_{}.json", models_dir(&set), t.as_str(), k.as_str()));
                }
            }
        }
        v
    }

    fn simulate_hash(&self) -> serde_json::Value {
        let r = &self.resolved;
        json!({"cohort": r.cohort, "setup": r.setup})
    }

    /// Hash of the configuration a stage depends on.
    pub fn config_hash(&self, stage: Stage) -> String {
        let r = &self.resolved;
        let c = &r.config;
        let template = r.radiomics.template_path.as_deref().map(|p| file_sha256(p).unwrap_or_default());
        let v = match stage {
            Stage::Simulate => self.simulate_hash(),
            Stage::Extract => json!({"sim": self.simulate_hash(), "radiomics": r.radiomics, "template": template}),
            Stage::Train => json!({"seed": c.master_seed, "ml": r.ml, "scenarios": c.analysis.scenarios}),
            Stage::Evaluate => json!({"ml": r.ml, "scenarios": c.analysis.scenarios}),
            Stage::Stability => json!({"sim": self.simulate_hash(), "radiomics": r.radiomics, "template": template, "analysis": c.analysis}),
        };
        hash_json(&json!({"stage": stage.as_str(), "version": TOOL_VERSION, "config": v}))
    }

    fn input_files(&self, stage: Stage) -> Vec<String> {
        let mut v: Vec<String> = match stage {
            Stage::Simulate => vec![],
            Stage::Extract => vec![MANIFEST_FILE.into()],
            Stage::Train => vec![MANIFEST_FILE.into(), FEATURES_FILE.into()],
            Stage::Evaluate => vec![MANIFEST_FILE.into(), FEATURES_FILE.into(), SPLIT_FILE.into()],
            Stage::Stability => vec![MANIFEST_FILE.into(), FEATURES_FILE.into()],
        };
        if stage == Stage::Evaluate {
            v.extend(self.model_files());
        }
        v
    }

    fn hashes(&self, files: &[String]) -> Result<BTreeMap<String, String>> {
        files.iter().map(|f| Ok((f.clone(), file_sha256(&self.path(f))?))).collect()
    }

    /// Is the stage's marker present and consistent with the current config,
    /// inputs and outputs?
    pub fn is_complete(&self, stage: Stage) -> bool {
        let Ok(text) = fs::read_to_string(self.marker_path(stage)) else {
            return false;
        };
        let Ok(m) = serde_json::from_str::<StageMarker>(&text) else {
            return false;
        };
        if m.stage != stage || m.tool_version != TOOL_VERSION || m.config_hash != self.config_hash(stage) {
            return false;
        }
        let files_ok = |map: &BTreeMap<String, String>| map.iter().all(|(f, h)| file_sha256(&self.path(f)).is_ok_and(|x| &x == h));
        if !files_ok(&m.inputs) || !files_ok(&m.outputs) || self.input_files(stage).iter().any(|f| !m.inputs.contains_key(f)) {
            return false;
        }
        match stage {
            Stage::Simulate | Stage::Extract => CohortManifest::read(&self.out).is_ok_and(|man| man.records.iter().all(|r| record_is_current(r, &self.out))),
            Stage::Stability => read_repeats(&self.out).is_ok_and(|recs| recs.iter().all(|r| r.checksum.as_ref().is_some_and(|h| file_sha256(&self.path(&r.image_path)).is_ok_and(|x| &x == h)))),
            _ => true,
        }
    }

    /// Run one stage unless its marker shows it complete. On failure an
    /// error report is written next to the outputs.
    pub fn run(&self, stage: Stage) -> std::result::Result<StageOutcome, StageError> {
        if self.is_complete(stage) {
            log::info!("{}: up to date, skipped", stage.as_str());
            return Ok(StageOutcome { stage, skipped: true });
        }
        log::info!("{}: running", stage.as_str());
        let result = (|| -> StageResult<()> {
            plain(fs::create_dir_all(self.out.join(STATE_DIR)).map_err(|e| Error::io(&self.out, e)))?;
            let _ = fs::remove_file(self.marker_path(stage));
            let inputs = plain(self.hashes(&self.input_files(stage)))?;
            let outputs = match stage {
                Stage::Simulate => self.simulate()?,
                Stage::Extract => self.extract()?,
                Stage::Train => self.train()?,
                Stage::Evaluate => self.evaluate()?,
                Stage::Stability => self.stability()?,
            };
            let marker = StageMarker { stage, tool_version: TOOL_VERSION.into(), config_hash: self.config_hash(stage), inputs, outputs: plain(self.hashes(&outputs))? };
            plain(write_atomic(&self.marker_path(stage), serde_json::to_string_pretty(&marker).map_err(Error::from).map_err(|e| (e, vec![]))?.as_bytes()))
        })();
        match result {
            Ok(()) => {
                let _ = fs::remove_file(self.path(ERROR_REPORT_FILE));
                Ok(StageOutcome { stage, skipped: false })
            }
            Err((error, records)) => {
                let report = ErrorReport { stage: stage.as_str(), error: error.to_string(), records: &records };
                if let Ok(text) = serde_json::to_string_pretty(&report) {
                    let _ = fs::create_dir_all(&self.out);
                    let _ = write_atomic(&self.path(ERROR_REPORT_FILE), text.as_bytes());
                }
                Err(StageError { stage, error, records })
            }
        }
    }

    /// All stages in order; stops at the first failure.
    pub fn run_all(&self) -> std::result::Result<Vec<StageOutcome>, StageError> {
        Stage::ALL.iter().map(|&s| self.run(s)).collect()
    }

    fn simulate(&self) -> StageResult<Vec<String>> {
        let mut manifest = plain(generate_cohort(&self.resolved.cohort))?;
        // Carry checksums over from an earlier identical plan so current images are kept.
        if let Ok(prev) = CohortManifest::read(&self.out) {
            for (r, p) in manifest.records.iter_mut().zip(&prev.records) {
                if r.image_path == p.image_path && r.image_seed == p.image_seed && r.morphology == p.morphology && prev.spec == self.resolved.cohort {
                    r.checksum = p.checksum.clone();
                    r.joint_center_px = p.joint_center_px;
                }
            }
        }
        let summary = plain(render_cohort(&mut manifest, &self.resolved.setup, &self.out))?;
        log::info!("simulate: {} rendered, {} up to date", summary.rendered, summary.skipped);
        if !summary.failures.is_empty() {
            let records = summary.failures.iter().map(|f| format!("{}: {}", f.image_path, f.message)).collect();
            return Err((Error::Data(format!("{} images failed to render", summary.failures.len())), records));
        }
        Ok(vec![MANIFEST_FILE.into(), MANIFEST_META_FILE.into()])
    }

    fn extract(&self) -> StageResult<Vec<String>> {
        let manifest = plain(CohortManifest::read(&self.out))?;
        let template = plain(self.resolved.template())?;
        let ex = plain(extract_matrix(&jobs_from_manifest(&manifest, &self.out), &template, &self.resolved.radiomics))?;
        for f in &ex.failures {
            log::warn!("extract: dropped {:?}", f);
        }
        plain(ex.matrix.write_csv(&self.path(FEATURES_FILE)))?;
        let meta = serde_json::to_string_pretty(&MatrixSidecar::new(&self.resolved.radiomics, &ex)).map_err(|e| (Error::from(e), vec![]))?;
        plain(write_atomic(&self.path(FEATURES_META_FILE), meta.as_bytes()))?;
        Ok(vec![FEATURES_FILE.into(), FEATURES_META_FILE.into()])
    }

    fn split(&self, manifest: &CohortManifest) -> Result<SplitPlan> {
        split_subjects(manifest, self.resolved.ml.fractions, seed::derive(self.resolved.config.master_seed, &["split"]))
    }

    fn train(&self) -> StageResult<Vec<String>> {
        let manifest = plain(CohortManifest::read(&self.out))?;
        let matrix = plain(FeatureMatrix::read_csv(&self.path(FEATURES_FILE)))?;
        let plan = plain(self.split(&manifest))?;
        let text = serde_json::to_string_pretty(&plan).map_err(|e| (Error::from(e), vec![]))?;
        plain(write_atomic(&self.path(SPLIT_FILE), text.as_bytes()))?;
        let grades = knee_grades(&manifest);
        let data = ScenarioData { matrix: &matrix, grades: &grades, plan: &plan };
        let ml = &self.resolved.ml;
        let mut outputs = vec![SPLIT_FILE.to_string()];
        for set in self.train_sets() {
            let models = plain(train_models(&set, &ml.tasks, &ml.kinds, &data, ml, self.resolved.config.master_seed))?;
            let dir = models_dir(&set);
            plain(fs::create_dir_all(self.path(&dir)).map_err(|e| Error::io(self.path(&dir), e)))?;
            for m in models {
                let rel = format!("{dir}/{}_{}.json", m.task.as_str(), m.kind.as_str());
                plain(m.save(&self.path(&rel)))?;
                outputs.push(rel);
            }
        }
        Ok(outputs)
    }

    fn evaluate(&self) -> StageResult<Vec<String>> {
        let manifest = plain(CohortManifest::read(&self.out))?;
        let matrix = plain(FeatureMatrix::read_csv(&self.path(FEATURES_FILE)))?;
        let plan: SplitPlan = plain(fs::read_to_string(self.path(SPLIT_FILE)).map_err(|e| Error::io(self.path(SPLIT_FILE), e)).and_then(|t| Ok(serde_json::from_str(&t)?)))?;
        let models: Vec<TrainedModel> = plain(self.model_files().iter().map(|f| TrainedModel::load(&self.path(f))).collect())?;
        let grades = knee_grades(&manifest);
        let data = ScenarioData { matrix: &matrix, grades: &grades, plan: &plan };
        plain(fs::create_dir_all(self.path("reports")).map_err(|e| Error::io(self.path("reports"), e)))?;
        let mut all: Vec<EvaluationReport> = Vec::new();
        let mut outputs = Vec::new();
        for spec in self.scenarios() {
            let reports = plain(evaluate_scenario(&spec, &data, &models))?;
            let name = spec.name.as_str();
            plain(write_reports_csv(&reports, &self.path(&format!("reports/{name}.csv"))))?;
            let text = serde_json::to_string_pretty(&reports).map_err(|e| (Error::from(e), vec![]))?;
            plain(write_atomic(&self.path(&format!("reports/{name}.json")), text.as_bytes()))?;
            outputs.push(format!("reports/{name}.csv"));
            outputs.push(format!("reports/{name}.json"));
            all.extend(reports);
        }
        plain(write_predictions_csv(&all, &self.path("reports/predictions.csv")))?;
        let mut imp = String::from("train_protocols,task,model_kind,rank,feature,score\n");
        for m in &models {
            for (i, (f, s)) in feature_importance(m).iter().enumerate() {
                imp.push_str(&format!("{},{},{},{},{f},{s:?}\n", m.train_protocols.join("+"), m.task.as_str(), m.kind.as_str(), i + 1));
            }
        }
        plain(write_atomic(&self.path("reports/importance.csv"), imp.as_bytes()))?;
        let checks = ordering_checks(&all);
        let summary = json!({
            "all_passed": checks.iter().all(|c| c.passed),
            "ordering_checks": checks,
            "models": models.iter().map(|m| json!({
                "train_protocols": m.train_protocols, "task": m.task, "kind": m.kind,
                "features": m.features, "selection": m.selection,
            })).collect::<Vec<_>>(),
        });
        plain(write_atomic(&self.path("reports/summary.json"), serde_json::to_string_pretty(&summary).expect("json value").as_bytes()))?;
        outputs.extend(["reports/predictions.csv".to_string(), "reports/importance.csv".into(), "reports/summary.json".into()]);
        Ok(outputs)
    }

    fn stability(&self) -> StageResult<Vec<String>> {
        let r = &self.resolved;
        let manifest = plain(CohortManifest::read(&self.out))?;
        let main = plain(FeatureMatrix::read_csv(&self.path(FEATURES_FILE)))?;
        let (records, summary) = plain(repeat_simulations(&manifest, &r.config.analysis.repeats, &r.setup, &self.out))?;
        log::info!("stability: {} repeats rendered, {} up to date", summary.rendered, summary.skipped);
        if !summary.failures.is_empty() {
            let rec = summary.failures.iter().map(|f| format!("{}: {}", f.image_path, f.message)).collect();
            return Err((Error::Data(format!("{} repeat images failed to render", summary.failures.len())), rec));
        }
        let template = plain(r.template())?;
        let ex = plain(extract_matrix(&repeat_jobs(&records, &self.out), &template, &r.radiomics))?;
        plain(ex.matrix.write_csv(&self.path(REPEAT_FEATURES_FILE)))?;
        let threshold = r.config.analysis.icc_threshold;
        let report = plain(stability_report(&main, &ex.matrix, &records, threshold))?;
        plain(write_stability_csv(&report, &self.path(STABILITY_FILE)))?;
        let mut medians = BTreeMap::new();
        for c in Condition::ALL {
            for f in Family::ALL {
                if let Some(m) = median_icc(&report, c, &[f]) {
                    medians.insert(format!("{}/{}", c.as_str(), f.as_str()), m);
                }
            }
        }
        let doc = json!({"threshold": threshold, "stable_features": stability_screen(&report, threshold), "median_icc": medians});
        plain(write_atomic(&self.path(STABLE_FEATURES_FILE), serde_json::to_string_pretty(&doc).expect("json value").as_bytes()))?;
        Ok(vec![REPEAT_FEATURES_FILE.into(), STABILITY_FILE.into(), STABLE_FEATURES_FILE.into(), crate::analysis::REPEATS_FILE.into()])
    }
}

/// Read the report files a finished run leaves behind.
pub fn read_reports(out: &Path, scenario: ScenarioName) -> Result<Vec<EvaluationReport>> {
    let p = out.join(format!("reports/{}.json", scenario.as_str()));
    let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    Ok(serde_json::from_str(&text)?)
}
