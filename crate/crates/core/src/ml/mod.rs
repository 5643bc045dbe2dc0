//! Subject-level splitting, feature selection, classifiers and metrics.

mod ensemble;
mod logreg;
mod metrics;
mod select;
mod split;
pub mod tree;

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

pub use ensemble::{train_boosting, train_forest, Boosted, BoostingConfig, Forest, ForestConfig};
pub use logreg::{class_weights, fit_l1, fit_l2, sigmoid, softmax, Convergence, LinearParams, Problem};
pub use metrics::{argmax, auc, balanced_accuracy, compute_metrics, confusion_matrix, macro_f1, Metrics};
pub use select::{equal_frequency_bins, l1_select, mrmr_select, mutual_information, L1_MAX_ITER, L1_TOL, MI_BINS};
pub use split::{split_subjects, Fold, SplitPlan};

use crate::cohort::{write_atomic, CohortManifest};
use crate::error::{Error, Result};
use crate::radiomics::{prune_correlated, FeatureMatrix};
use crate::{par, seed};

pub const MODEL_FORMAT_VERSION: u32 = 1;
pub const L2_TOL: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    LogregL2,
    RandomForest,
    GradientBoosting,
}

impl ModelKind {
    pub const ALL: [ModelKind; 3] = [ModelKind::LogregL2, ModelKind::RandomForest, ModelKind::GradientBoosting];

    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::LogregL2 => "logreg_l2",
            ModelKind::RandomForest => "random_forest",
            ModelKind::GradientBoosting => "gradient_boosting",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    #[serde(rename = "binary_0v2")]
    Binary0v2,
    ThreeClass,
}

impl Task {
    pub const ALL: [Task; 2] = [Task::Binary0v2, Task::ThreeClass];

    pub fn as_str(self) -> &'static str {
        match self {
            Task::Binary0v2 => "binary_0v2",
            Task::ThreeClass => "three_class",
        }
    }

    pub fn n_classes(self) -> usize {
        match self {
            Task::Binary0v2 => 2,
            Task::ThreeClass => 3,
        }
    }

    /// Class label of a KL-like grade; grade 1 is excluded from 0-vs-2.
    pub fn label(self, grade: u8) -> Option<usize> {
        match (self, grade) {
            (Task::Binary0v2, 0) => Some(0),
            (Task::Binary0v2, 2) => Some(1),
            (Task::Binary0v2, _) => None,
            (Task::ThreeClass, g) if g <= 2 => Some(g as usize),
            _ => None,
        }
    }
}

/// knee_id -> grade.
pub fn knee_grades(manifest: &CohortManifest) -> BTreeMap<String, u8> {
    manifest.records.iter().map(|r| (r.knee_id.clone(), r.kl_grade)).collect()
}

/// Matrix rows among `rows` that carry a label for `task`, with the labels.
pub fn labeled_rows(m: &FeatureMatrix, rows: &[usize], grades: &BTreeMap<String, u8>, task: Task) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut idx = Vec::new();
    let mut y = Vec::new();
    for &r in rows {
        let knee = &m.keys[r].knee_id;
        let g = *grades.get(knee).ok_or_else(|| Error::Data(format!("knee {knee} has no grade in the manifest")))?;
        if let Some(l) = task.label(g) {
            idx.push(r);
            y.push(l);
        }
    }
    Ok((idx, y))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    /// Population mean/std per column; zero spread maps to std 1.
    pub fn fit(x: &Array2<f64>) -> Self {
        let n = x.nrows() as f64;
        let mut mean = Vec::with_capacity(x.ncols());
        let mut std = Vec::with_capacity(x.ncols());
        for c in x.columns() {
            let m = c.sum() / n;
            let s = (c.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt();
            mean.push(m);
            std.push(if s > 0.0 { s } else { 1.0 });
        }
        Standardizer { mean, std }
    }

    pub fn apply(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut out = x.clone();
        for (j, mut c) in out.columns_mut().into_iter().enumerate() {
            c.mapv_inplace(|v| (v - self.mean[j]) / self.std[j]);
        }
        out
    }

    fn subset(&self, cols: &[usize]) -> Self {
        Standardizer { mean: cols.iter().map(|&j| self.mean[j]).collect(), std: cols.iter().map(|&j| self.std[j]).collect() }
    }
}

fn design(m: &FeatureMatrix, rows: &[usize], cols: &[usize]) -> Array2<f64> {
    Array2::from_shape_fn((rows.len(), cols.len()), |(i, j)| m.values[rows[i]][cols[j]])
}

fn take_columns(x: &Array2<f64>, cols: &[usize]) -> Array2<f64> {
    x.select(ndarray::Axis(1), cols)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum ModelParams {
    Logreg(LinearParams),
    Forest(Forest),
    Boosting(Boosted),
}

/// Hyper-parameters chosen on the validation fold.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub mrmr_k: usize,
    pub l1_lambda: f64,
    pub l2_lambda: Option<f64>,
    pub val_auc: Option<f64>,
    pub pruned: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainedModel {
    pub format_version: u32,
    pub kind: ModelKind,
    pub task: Task,
    pub features: Vec<String>,
    /// Applied before the logistic model; trees consume raw values.
    pub standardizer: Option<Standardizer>,
    pub params: ModelParams,
    pub selection: Selection,
    pub config: MlConfig,
    #[serde(default)]
    pub train_protocols: Vec<String>,
    pub seed: u64,
}

impl TrainedModel {
    fn predict_design(&self, x: &Array2<f64>) -> Vec<Vec<f64>> {
        let x = match &self.standardizer {
            Some(s) => s.apply(x),
            None => x.clone(),
        };
        let rows: Vec<usize> = (0..x.nrows()).collect();
        par::map(&rows, |&i| {
            let r = x.row(i);
            match &self.params {
                ModelParams::Logreg(p) => p.predict_row(r),
                ModelParams::Forest(f) => f.predict_row(r),
                ModelParams::Boosting(b) => b.predict_row(r),
            }
        })
    }

    /// Class probabilities for matrix rows `rows`.
    pub fn predict_proba(&self, m: &FeatureMatrix, rows: &[usize]) -> Result<Vec<Vec<f64>>> {
        let cols = self
            .features
            .iter()
            .map(|f| m.column_index(f).ok_or_else(|| Error::Schema(format!("model feature {f:?} missing from the matrix"))))
            .collect::<Result<Vec<_>>>()?;
        Ok(self.predict_design(&design(m, rows, &cols)))
    }

    /// Unranked importance per selected feature: |coefficient| (max over
    /// classes) for logistic models, normalised total impurity decrease for
    /// trees.
    pub fn importance_scores(&self) -> Vec<f64> {
        let p = self.features.len();
        match &self.params {
            ModelParams::Logreg(lp) => (0..p).map(|j| lp.coef.iter().map(|c| c[j].abs()).fold(0.0, f64::max)).collect(),
            ModelParams::Forest(f) => normalised(f.trees.iter(), p),
            ModelParams::Boosting(b) => normalised(b.trees(), p),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let m: TrainedModel = serde_json::from_str(s)?;
        if m.format_version != MODEL_FORMAT_VERSION {
            return Err(Error::Schema(format!("model format {} (expected {MODEL_FORMAT_VERSION})", m.format_version)));
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_json()?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s)
    }
}

fn normalised<'a>(trees: impl Iterator<Item = &'a tree::Tree>, p: usize) -> Vec<f64> {
    let mut acc = vec![0.0; p];
    for t in trees {
        for (a, v) in acc.iter_mut().zip(&t.importance) {
            *a += v;
        }
    }
    let s: f64 = acc.iter().sum();
    if s > 0.0 {
        acc.iter_mut().for_each(|v| *v /= s);
    }
    acc
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MlConfig {
    pub fractions: [f64; 3],
    pub prune_threshold: f64,
    pub mrmr_k_grid: Vec<usize>,
    pub l1_lambda_grid: Vec<f64>,
    pub l2_lambda_grid: Vec<f64>,
    pub forest: ForestConfig,
    pub boosting: BoostingConfig,
    pub kinds: Vec<ModelKind>,
    pub tasks: Vec<Task>,
}

impl Default for MlConfig {
    fn default() -> Self {
        MlConfig {
            fractions: [0.70, 0.15, 0.15],
            prune_threshold: 0.9,
            mrmr_k_grid: vec![5, 10, 20],
            l1_lambda_grid: vec![0.003, 0.01, 0.03],
            l2_lambda_grid: vec![0.01, 0.1, 1.0],
            forest: ForestConfig::default(),
            boosting: BoostingConfig::default(),
            kinds: ModelKind::ALL.to_vec(),
            tasks: Task::ALL.to_vec(),
        }
    }
}

impl MlConfig {
    pub fn validate(&self) -> Result<()> {
        if self.mrmr_k_grid.is_empty() || self.mrmr_k_grid.contains(&0) {
            return Err(Error::Config("mrmr_k_grid must hold positive values".into()));
        }
        if self.l1_lambda_grid.is_empty() || self.l1_lambda_grid.iter().any(|l| !(*l >= 0.0)) {
            return Err(Error::Config("l1_lambda_grid must hold non-negative values".into()));
        }
        if self.l2_lambda_grid.is_empty() || self.l2_lambda_grid.iter().any(|l| !(*l >= 0.0)) {
            return Err(Error::Config("l2_lambda_grid must hold non-negative values".into()));
        }
        if !(0.0..=1.0).contains(&self.prune_threshold) {
            return Err(Error::Config("prune_threshold must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Train one model family on raw (trees) or standardised (logistic) columns.
pub fn train_model(kind: ModelKind, x_raw: &Array2<f64>, x_std: &Array2<f64>, y: &[usize], k: usize, l2: f64, cfg: &MlConfig, seed: u64) -> Result<ModelParams> {
    Ok(match kind {
        ModelKind::LogregL2 => {
            let w = class_weights(y, k);
            ModelParams::Logreg(fit_l2(&Problem { x: x_std, y, weights: &w, n_classes: k }, l2, L2_TOL)?.0)
        }
        ModelKind::RandomForest => ModelParams::Forest(train_forest(x_raw, y, k, &cfg.forest, seed)?),
        ModelKind::GradientBoosting => ModelParams::Boosting(train_boosting(x_raw, y, k, &cfg.boosting)?),
    })
}

/// Training and validation rows of one pipeline fit.
pub struct FitData<'a> {
    pub matrix: &'a FeatureMatrix,
    pub grades: &'a BTreeMap<String, u8>,
    pub plan: &'a SplitPlan,
    pub train_rows: &'a [usize],
    pub val_rows: &'a [usize],
}

/// Leakage guard: every row must belong to a subject of `fold`.
pub fn assert_rows_in_fold(m: &FeatureMatrix, rows: &[usize], plan: &SplitPlan, fold: Fold) -> Result<()> {
    let knees: Vec<&str> = rows.iter().map(|&r| m.keys[r].knee_id.as_str()).collect();
    plan.assert_fold(&knees, fold)
}

/// prune_correlated -> standardise -> mRMR(k) -> L1(lambda1) -> model, on the
/// training rows only; k, lambda1 (and lambda2 for the logistic model) are
/// chosen by validation AUC, ties to the earlier grid point.
pub fn fit_pipeline(data: &FitData, task: Task, kind: ModelKind, cfg: &MlConfig, seed: u64) -> Result<TrainedModel> {
    cfg.validate()?;
    let m = data.matrix;
    assert_rows_in_fold(m, data.train_rows, data.plan, Fold::Train)?;
    assert_rows_in_fold(m, data.val_rows, data.plan, Fold::Val)?;
    let k = task.n_classes();
    let (train, y) = labeled_rows(m, data.train_rows, data.grades, task)?;
    let (val, yv) = labeled_rows(m, data.val_rows, data.grades, task)?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Training(format!("{} task has {} training and {} validation rows", task.as_str(), train.len(), val.len())));
    }
    let pruned = prune_correlated(m, &train, cfg.prune_threshold)?;
    let cols: Vec<usize> = pruned.kept.iter().map(|c| m.column_index(c).expect("pruned column exists")).collect();
    if cols.is_empty() {
        return Err(Error::Training("no feature survived correlation pruning".into()));
    }
    let xr = design(m, &train, &cols);
    let xvr = design(m, &val, &cols);
    let stdz = Standardizer::fit(&xr);
    let xs = stdz.apply(&xr);
    let k_max = *cfg.mrmr_k_grid.iter().max().expect("validated grid");
    let ranking = mrmr_select(&xs, &y, k_max.min(cols.len()))?;

    let mut subsets: Vec<(usize, f64, Vec<usize>)> = Vec::new();
    for &kk in &cfg.mrmr_k_grid {
        let top: Vec<usize> = ranking.iter().take(kk).copied().collect();
        for &l1 in &cfg.l1_lambda_grid {
            let chosen = l1_select(&take_columns(&xs, &top), &y, k, l1)?;
            // An empty L1 selection keeps the top mRMR feature.
            let sub: Vec<usize> = if chosen.is_empty() { vec![top[0]] } else { chosen.iter().map(|&i| top[i]).collect() };
            subsets.push((kk, l1, sub));
        }
    }
    let l2_grid: Vec<Option<f64>> = match kind {
        ModelKind::LogregL2 => cfg.l2_lambda_grid.iter().map(|&l| Some(l)).collect(),
        _ => vec![None],
    };
    let mut grid = Vec::new();
    for (kk, l1, sub) in &subsets {
        for l2 in &l2_grid {
            grid.push((*kk, *l1, sub.clone(), *l2));
        }
    }
    let fits = grid
        .iter()
        .map(|(_, _, sub, l2)| {
            let params = train_model(kind, &take_columns(&xr, sub), &take_columns(&xs, sub), &y, k, l2.unwrap_or(0.0), cfg, seed)?;
            let model = TrainedModel {
                format_version: MODEL_FORMAT_VERSION,
                kind,
                task,
                features: sub.iter().map(|&c| m.columns[cols[c]].clone()).collect(),
                standardizer: (kind == ModelKind::LogregL2).then(|| stdz.subset(sub)),
                params,
                selection: Selection { mrmr_k: 0, l1_lambda: 0.0, l2_lambda: None, val_auc: None, pruned: pruned.dropped.len() },
                config: cfg.clone(),
                train_protocols: Vec::new(),
                seed,
            };
            let xv = take_columns(&xvr, sub);
            let probs = model.predict_design(&xv);
            let val_auc = compute_metrics(&yv, &probs, k)?.auc;
            Ok((model, val_auc))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut best = 0;
    for (i, (_, a)) in fits.iter().enumerate() {
        if a.unwrap_or(0.5) > fits[best].1.unwrap_or(0.5) {
            best = i;
        }
    }
    let (mut model, val_auc) = fits.into_iter().nth(best).expect("non-empty grid");
    let (kk, l1, _, l2) = &grid[best];
    model.selection = Selection { mrmr_k: *kk, l1_lambda: *l1, l2_lambda: *l2, val_auc, pruned: pruned.dropped.len() };
    log::info!("{} {}: k = {kk}, l1 = {l1}, l2 = {l2:?}, {} features, validation AUC {val_auc:?}", task.as_str(), kind.as_str(), model.features.len());
    Ok(model)
}

/// Model seed for a (scenario, task, kind) fit.
pub fn model_seed(master: u64, scenario: &str, task: Task, kind: ModelKind) -> u64 {
    seed::derive(master, &["model", scenario, task.as_str(), kind.as_str()])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub knee_id: String,
    pub protocol: String,
    pub repeat: u32,
    pub y_true: usize,
    pub probabilities: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub task: Task,
    pub scenario: String,
    pub test_protocol: String,
    pub model_kind: ModelKind,
    pub n_rows: usize,
    pub metrics: Metrics,
    pub predictions: Vec<Prediction>,
}

/// Evaluate `model` on `rows` (rows without a task label are skipped).
pub fn evaluate(model: &TrainedModel, m: &FeatureMatrix, rows: &[usize], grades: &BTreeMap<String, u8>, scenario: &str, test_protocol: &str) -> Result<EvaluationReport> {
    let (idx, y) = labeled_rows(m, rows, grades, model.task)?;
    if idx.is_empty() {
        return Err(Error::Scenario(format!("{scenario}: no labelled rows for {test_protocol}")));
    }
    let probs = model.predict_proba(m, &idx)?;
    let metrics = compute_metrics(&y, &probs, model.task.n_classes())?;
    let predictions = idx
        .iter()
        .zip(&y)
        .zip(probs)
        .map(|((&r, &t), p)| Prediction { knee_id: m.keys[r].knee_id.clone(), protocol: m.keys[r].protocol.clone(), repeat: m.keys[r].repeat, y_true: t, probabilities: p })
        .collect();
    Ok(EvaluationReport { task: model.task, scenario: scenario.to_string(), test_protocol: test_protocol.to_string(), model_kind: model.kind, n_rows: idx.len(), metrics, predictions })
}
