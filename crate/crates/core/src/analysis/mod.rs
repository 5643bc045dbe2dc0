//! Robustness scenarios, feature stability (ICC) and importance.

mod icc;
mod repeats;

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

pub use icc::{compute_icc, Icc};
pub use repeats::{
    choose_subset, jitter_protocol, plan_repeats, read_repeats, render_repeats, repeat_jobs, repeat_simulations, write_repeats, Condition, RepeatConfig, RepeatRecord, REPEATS_FILE,
};

use crate::cohort::write_atomic;
use crate::error::{Error, Result};
use crate::ml::{evaluate, fit_pipeline, model_seed, EvaluationReport, FitData, Fold, MlConfig, ModelKind, SplitPlan, Task, TrainedModel};
use crate::radiomics::{Family, FeatureMatrix};

pub const SHIFTED_PROTOCOLS: [&str; 2] = ["low_dose", "geometry_shift"];
pub const ALL_PROTOCOLS: [&str; 3] = ["reference", "low_dose", "geometry_shift"];
pub const MULTI_PROTOCOL_SLACK: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioName {
    WithinProtocol,
    CrossProtocol,
    MultiProtocol,
}

impl ScenarioName {
    pub const ALL: [ScenarioName; 3] = [ScenarioName::WithinProtocol, ScenarioName::CrossProtocol, ScenarioName::MultiProtocol];

    pub fn as_str(self) -> &'static str {
        match self {
            ScenarioName::WithinProtocol => "within_protocol",
            ScenarioName::CrossProtocol => "cross_protocol",
            ScenarioName::MultiProtocol => "multi_protocol",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub name: ScenarioName,
    pub train_protocols: Vec<String>,
    pub test_protocols: Vec<String>,
    pub kinds: Vec<ModelKind>,
    pub tasks: Vec<Task>,
}

impl ScenarioSpec {
    pub fn standard(name: ScenarioName, kinds: &[ModelKind], tasks: &[Task]) -> Self {
        let s = |v: &[&str]| v.iter().map(|p| p.to_string()).collect::<Vec<_>>();
        let (train, test) = match name {
            ScenarioName::WithinProtocol => (s(&["reference"]), s(&["reference"])),
            ScenarioName::CrossProtocol => (s(&["reference"]), s(&SHIFTED_PROTOCOLS)),
            ScenarioName::MultiProtocol => (s(&ALL_PROTOCOLS), s(&ALL_PROTOCOLS)),
        };
        ScenarioSpec { name, train_protocols: train, test_protocols: test, kinds: kinds.to_vec(), tasks: tasks.to_vec() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Scenario(format!("{}: {m}", self.name.as_str())));
        let is = |v: &[String], w: &[&str]| v.len() == w.len() && v.iter().all(|p| w.contains(&p.as_str()));
        match self.name {
            ScenarioName::WithinProtocol if !(is(&self.train_protocols, &["reference"]) && is(&self.test_protocols, &["reference"])) => bad("train and test must be {reference}"),
            ScenarioName::CrossProtocol if !is(&self.train_protocols, &["reference"]) || self.test_protocols.is_empty() || !self.test_protocols.iter().all(|p| SHIFTED_PROTOCOLS.contains(&p.as_str())) => {
                bad("train must be {reference}, tests a non-empty subset of the shifted protocols")
            }
            ScenarioName::MultiProtocol if !is(&self.train_protocols, &ALL_PROTOCOLS) => bad("train must hold all three protocols"),
            _ if self.kinds.is_empty() || self.tasks.is_empty() => bad("no model kinds or tasks"),
            _ => Ok(()),
        }
    }
}

/// Frozen inputs shared by every scenario.
pub struct ScenarioData<'a> {
    pub matrix: &'a FeatureMatrix,
    pub grades: &'a BTreeMap<String, u8>,
    pub plan: &'a SplitPlan,
}

fn rows_for(data: &ScenarioData, protocols: &[String], fold: Fold) -> Vec<usize> {
    let m = data.matrix;
    (0..m.n_rows())
        .filter(|&i| {
            let k = &m.keys[i];
            k.repeat == 0 && protocols.contains(&k.protocol) && data.plan.fold_of_knee(&k.knee_id) == Some(fold)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScenarioOutcome {
    pub models: Vec<TrainedModel>,
    pub reports: Vec<EvaluationReport>,
}

/// Fit every (task, kind) on the training and validation folds of
/// `train_protocols`. Seeds depend on the protocol set, so scenarios sharing
/// a training set share their models.
pub fn train_models(train_protocols: &[String], tasks: &[Task], kinds: &[ModelKind], data: &ScenarioData, cfg: &MlConfig, master_seed: u64) -> Result<Vec<TrainedModel>> {
    let train = rows_for(data, train_protocols, Fold::Train);
    let val = rows_for(data, train_protocols, Fold::Val);
    if train.is_empty() || val.is_empty() {
        return Err(Error::Scenario(format!("no training or validation rows for {train_protocols:?}")));
    }
    let tag = train_protocols.join("+");
    let fit = FitData { matrix: data.matrix, grades: data.grades, plan: data.plan, train_rows: &train, val_rows: &val };
    let mut models = Vec::new();
    for &task in tasks {
        for &kind in kinds {
            let mut model = fit_pipeline(&fit, task, kind, cfg, model_seed(master_seed, &tag, task, kind))?;
            model.train_protocols = train_protocols.to_vec();
            models.push(model);
        }
    }
    Ok(models)
}

/// Evaluate the models trained on the scenario's protocol set on each of
/// its test protocols (test fold only).
pub fn evaluate_scenario(spec: &ScenarioSpec, data: &ScenarioData, models: &[TrainedModel]) -> Result<Vec<EvaluationReport>> {
    spec.validate()?;
    let mut tests = Vec::new();
    for p in &spec.test_protocols {
        let rows = rows_for(data, std::slice::from_ref(p), Fold::Test);
        if rows.is_empty() {
            return Err(Error::Scenario(format!("{}: no test rows for protocol {p}", spec.name.as_str())));
        }
        crate::ml::assert_rows_in_fold(data.matrix, &rows, data.plan, Fold::Test)?;
        tests.push((p, rows));
    }
    let mut reports = Vec::new();
    for &task in &spec.tasks {
        for &kind in &spec.kinds {
            let model = models
                .iter()
                .find(|m| m.task == task && m.kind == kind && m.train_protocols == spec.train_protocols)
                .ok_or_else(|| Error::Scenario(format!("{}: no {} {} model trained on {:?}", spec.name.as_str(), task.as_str(), kind.as_str(), spec.train_protocols)))?;
            for (p, rows) in &tests {
                reports.push(evaluate(model, data.matrix, rows, data.grades, spec.name.as_str(), p)?);
            }
        }
    }
    Ok(reports)
}

/// Train and evaluate one scenario.
pub fn run_scenario(spec: &ScenarioSpec, data: &ScenarioData, cfg: &MlConfig, master_seed: u64) -> Result<ScenarioOutcome> {
    spec.validate()?;
    let models = train_models(&spec.train_protocols, &spec.tasks, &spec.kinds, data, cfg, master_seed)?;
    let reports = evaluate_scenario(spec, data, &models)?;
    Ok(ScenarioOutcome { models, reports })
}

/// Features ranked by importance, descending; ties keep model column order.
pub fn feature_importance(model: &TrainedModel) -> Vec<(String, f64)> {
    let mut v: Vec<(String, f64)> = model.features.iter().cloned().zip(model.importance_scores()).collect();
    v.sort_by(|a, b| b.1.total_cmp(&a.1));
    v
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StabilityRow {
    pub feature: String,
    pub family: String,
    pub condition: Condition,
    pub n_subjects: usize,
    pub n_conditions: usize,
    pub icc: Option<f64>,
    pub var_subject: Option<f64>,
    pub var_condition: Option<f64>,
    pub var_residual: Option<f64>,
    pub stable: bool,
    pub reason: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub threshold: f64,
    pub rows: Vec<StabilityRow>,
}

/// ICC per (feature, condition): each knee's original reference row against
/// its repeats under the condition. Knees missing any cell are left out.
pub fn stability_report(main: &FeatureMatrix, repeats: &FeatureMatrix, records: &[RepeatRecord], threshold: f64) -> Result<StabilityReport> {
    let main_idx: HashMap<(&str, &str, u32), usize> = main.keys.iter().enumerate().map(|(i, k)| ((k.knee_id.as_str(), k.protocol.as_str(), k.repeat), i)).collect();
    let rep_idx: HashMap<(&str, &str, u32), usize> = repeats.keys.iter().enumerate().map(|(i, k)| ((k.knee_id.as_str(), k.protocol.as_str(), k.repeat), i)).collect();
    let features: Vec<(usize, usize)> = main.columns.iter().enumerate().filter_map(|(i, c)| repeats.column_index(c).map(|j| (i, j))).collect();
    let mut conditions: Vec<Condition> = records.iter().map(|r| r.condition).collect();
    conditions.sort();
    conditions.dedup();
    let mut rows = Vec::new();
    for cond in conditions {
        let n_rep = records.iter().filter(|r| r.condition == cond).map(|r| r.repeat).max().unwrap_or(0);
        let mut knees: Vec<&str> = records.iter().filter(|r| r.condition == cond).map(|r| r.knee_id.as_str()).collect();
        knees.dedup();
        let mut cells: Vec<(usize, Vec<usize>)> = Vec::new();
        for knee in knees {
            let Some(&base) = main_idx.get(&(knee, "reference", 0)) else {
                log::warn!("{knee}: no reference row; left out of {} ICC", cond.as_str());
                continue;
            };
            let reps: Option<Vec<usize>> = (1..=n_rep).map(|i| rep_idx.get(&(knee, cond.protocol_name(), i)).copied()).collect();
            match reps {
                Some(r) => cells.push((base, r)),
                None => log::warn!("{knee}: incomplete {} repeats; left out of the ICC", cond.as_str()),
            }
        }
        let k = 1 + n_rep as usize;
        for &(fi, fj) in &features {
            let table = Array2::from_shape_fn((cells.len(), k), |(s, c)| if c == 0 { main.values[cells[s].0][fi] } else { repeats.values[cells[s].1[c - 1]][fj] });
            let name = &main.columns[fi];
            let family = Family::of(name).map_or("unknown", |f| f.as_str()).to_string();
            let row = match compute_icc(&table)? {
                Some(icc) => StabilityRow {
                    feature: name.clone(),
                    family,
                    condition: cond,
                    n_subjects: cells.len(),
                    n_conditions: k,
                    icc: Some(icc.icc),
                    var_subject: Some(icc.var_subject),
                    var_condition: Some(icc.var_condition),
                    var_residual: Some(icc.var_residual),
                    stable: icc.icc >= threshold,
                    reason: None,
                },
                None => StabilityRow {
                    feature: name.clone(),
                    family,
                    condition: cond,
                    n_subjects: cells.len(),
                    n_conditions: k,
                    icc: None,
                    var_subject: None,
                    var_condition: None,
                    var_residual: None,
                    stable: false,
                    reason: Some("constant feature".into()),
                },
            };
            rows.push(row);
        }
    }
    Ok(StabilityReport { threshold, rows })
}

/// Features whose ICC reaches `threshold` under every evaluated condition.
pub fn stability_screen(report: &StabilityReport, threshold: f64) -> Vec<String> {
    let mut order: Vec<&str> = Vec::new();
    let mut ok: HashMap<&str, bool> = HashMap::new();
    for r in &report.rows {
        let pass = r.icc.is_some_and(|v| v >= threshold);
        match ok.get_mut(r.feature.as_str()) {
            Some(v) => *v &= pass,
            None => {
                order.push(&r.feature);
                ok.insert(&r.feature, pass);
            }
        }
    }
    order.into_iter().filter(|f| ok[f]).map(String::from).collect()
}

/// Median ICC over features of `families` under `condition`; constant
/// features (undefined ICC) are left out.
pub fn median_icc(report: &StabilityReport, condition: Condition, families: &[Family]) -> Option<f64> {
    let names: Vec<&str> = families.iter().map(|f| f.as_str()).collect();
    let mut v: Vec<f64> = report.rows.iter().filter(|r| r.condition == condition && names.contains(&r.family.as_str())).filter_map(|r| r.icc).collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 })
}

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| format!("{x:?}"))
}

pub fn write_stability_csv(report: &StabilityReport, path: &Path) -> Result<()> {
    let mut s = String::from("feature,family,condition,n_subjects,n_conditions,icc,var_subject,var_condition,var_residual,stable,reason\n");
    for r in &report.rows {
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{}\n",
            r.feature,
            r.family,
            r.condition.as_str(),
            r.n_subjects,
            r.n_conditions,
            opt(r.icc),
            opt(r.var_subject),
            opt(r.var_condition),
            opt(r.var_residual),
            r.stable,
            r.reason.as_deref().unwrap_or("")
        ));
    }
    write_atomic(path, s.as_bytes())
}

pub fn write_reports_csv(reports: &[EvaluationReport], path: &Path) -> Result<()> {
    let mut s = String::from("scenario,task,model_kind,test_protocol,n_rows,auc,balanced_accuracy,macro_f1,confusion_matrix\n");
    for r in reports {
        let cm = r.metrics.confusion_matrix.iter().map(|row| row.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(" ")).collect::<Vec<_>>().join(";");
        s.push_str(&format!(
            "{},{},{},{},{},{},{:?},{:?},{}\n",
            r.scenario,
            r.task.as_str(),
            r.model_kind.as_str(),
            r.test_protocol,
            r.n_rows,
            opt(r.metrics.auc),
            r.metrics.balanced_accuracy,
            r.metrics.macro_f1,
            cm
        ));
    }
    write_atomic(path, s.as_bytes())
}

pub fn write_predictions_csv(reports: &[EvaluationReport], path: &Path) -> Result<()> {
    let mut s = String::from("scenario,task,model_kind,test_protocol,knee_id,protocol,repeat,y_true,y_pred,probabilities\n");
    for r in reports {
        for p in &r.predictions {
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{}\n",
                r.scenario,
                r.task.as_str(),
                r.model_kind.as_str(),
                r.test_protocol,
                p.knee_id,
                p.protocol,
                p.repeat,
                p.y_true,
                crate::ml::argmax(&p.probabilities),
                p.probabilities.iter().map(|v| format!("{v:?}")).collect::<Vec<_>>().join(" ")
            ));
        }
    }
    write_atomic(path, s.as_bytes())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrderingCheck {
    pub rule: String,
    pub task: Task,
    pub model_kind: ModelKind,
    pub test_protocol: String,
    pub lhs: Option<f64>,
    pub rhs: Option<f64>,
    pub passed: bool,
}

fn find_auc(reports: &[EvaluationReport], scenario: ScenarioName, task: Task, kind: ModelKind, protocol: &str) -> Option<f64> {
    reports.iter().find(|r| r.scenario == scenario.as_str() && r.task == task && r.model_kind == kind && r.test_protocol == protocol).and_then(|r| r.metrics.auc)
}

/// Directional robustness checks: cross <= within, and multi >= cross - slack,
/// per task, model kind and shifted protocol.
pub fn ordering_checks(reports: &[EvaluationReport]) -> Vec<OrderingCheck> {
    let mut pairs: Vec<(Task, ModelKind)> = reports.iter().map(|r| (r.task, r.model_kind)).collect();
    pairs.sort();
    pairs.dedup();
    let mut out = Vec::new();
    for (task, kind) in pairs {
        let within = find_auc(reports, ScenarioName::WithinProtocol, task, kind, "reference");
        for p in SHIFTED_PROTOCOLS {
            let cross = find_auc(reports, ScenarioName::CrossProtocol, task, kind, p);
            let multi = find_auc(reports, ScenarioName::MultiProtocol, task, kind, p);
            let cmp = |a: Option<f64>, b: Option<f64>, f: &dyn Fn(f64, f64) -> bool| matches!((a, b), (Some(x), Some(y)) if f(x, y));
            out.push(OrderingCheck { rule: "cross_le_within".into(), task, model_kind: kind, test_protocol: p.into(), lhs: cross, rhs: within, passed: cmp(cross, within, &|x, y| x <= y) });
            out.push(OrderingCheck {
                rule: "multi_ge_cross_minus_slack".into(),
                task,
                model_kind: kind,
                test_protocol: p.into(),
                lhs: multi,
                rhs: cross,
                passed: cmp(multi, cross, &|x, y| x >= y - MULTI_PROTOCOL_SLACK),
            });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ml::{LinearParams, ModelParams, Selection, MODEL_FORMAT_VERSION};

    #[test]
    fn scenario_invariants() {
        let k = ModelKind::ALL;
        for n in ScenarioName::ALL {
            assert!(ScenarioSpec::standard(n, &k, &Task::ALL).validate().is_ok());
        }
        assert_eq!(ScenarioSpec::standard(ScenarioName::CrossProtocol, &k, &Task::ALL).test_protocols.len(), 2);
        let mut bad = ScenarioSpec::standard(ScenarioName::CrossProtocol, &k, &Task::ALL);
        bad.test_protocols.push("reference".into());
        assert!(matches!(bad.validate(), Err(Error::Scenario(_))));
    }

    #[test]
    fn logreg_importance_by_magnitude() {
        let model = TrainedModel {
            format_version: MODEL_FORMAT_VERSION,
            kind: ModelKind::LogregL2,
            task: Task::Binary0v2,
            features: vec!["f1".into(), "f2".into(), "f3".into()],
            standardizer: None,
            params: ModelParams::Logreg(LinearParams { coef: vec![vec![0.0, 2.0, -3.0]], intercept: vec![0.0] }),
            selection: Selection { mrmr_k: 3, l1_lambda: 0.0, l2_lambda: None, val_auc: None, pruned: 0 },
            config: MlConfig::default(),
            train_protocols: vec![],
            seed: 0,
        };
        let r = feature_importance(&model);
        assert_eq!(r.iter().map(|(n, _)| n.as_str()).collect::<Vec<_>>(), ["f3", "f2", "f1"]);
    }

    #[test]
    fn screen_requires_every_condition() {
        let row = |f: &str, c, icc| StabilityRow {
            feature: f.into(),
            family: "first_order".into(),
            condition: c,
            n_subjects: 30,
            n_conditions: 4,
            icc: Some(icc),
            var_subject: None,
            var_condition: None,
            var_residual: None,
            stable: icc >= 0.75,
            reason: None,
        };
        let rep = StabilityReport {
            threshold: 0.75,
            rows: vec![row("a", Condition::TestRetest, 0.99), row("a", Condition::LowDose, 0.74), row("b", Condition::TestRetest, 0.9), row("b", Condition::LowDose, 0.8)],
        };
        assert_eq!(stability_screen(&rep, 0.75), vec!["b".to_string()]);
        assert_eq!(stability_screen(&rep, 0.0), vec!["a".to_string(), "b".to_string()]);
    }
}
