//! Random forest and gradient boosting over [`tree`](super::tree) CARTs.

use ndarray::{Array2, ArrayView1};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::logreg::{class_weights, sigmoid, softmax};
use super::tree::{build_classifier, build_regressor, RegressionTargets, Tree, TreeParams};
use crate::error::{Error, Result};
use crate::{par, seed};

fn check_labels(x: &Array2<f64>, y: &[usize], k: usize) -> Result<()> {
    if x.nrows() != y.len() || y.is_empty() {
        return Err(Error::Shape(format!("{} rows vs {} labels", x.nrows(), y.len())));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("non-finite value in the design matrix".into()));
    }
    if y.iter().any(|&c| c >= k) {
        return Err(Error::Training(format!("labels must lie in 0..{k}")));
    }
    if y.iter().all(|&c| c == y[0]) {
        return Err(Error::Training("training labels contain a single class".into()));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForestConfig {
    pub n_trees: usize,
    pub max_depth: usize,
    pub min_leaf: usize,
    /// Candidate features per split; None = floor(sqrt(p)).
    pub mtry: Option<usize>,
}

impl Default for ForestConfig {
    fn default() -> Self {
        ForestConfig { n_trees: 200, max_depth: 12, min_leaf: 2, mtry: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Forest {
    pub n_classes: usize,
    pub trees: Vec<Tree>,
}

/// Bagged Gini trees; tree `t` draws from the substream `(seed, "tree", t)`.
pub fn train_forest(x: &Array2<f64>, y: &[usize], k: usize, cfg: &ForestConfig, seed: u64) -> Result<Forest> {
    check_labels(x, y, k)?;
    if cfg.n_trees == 0 {
        return Err(Error::Parameter("forest needs at least one tree".into()));
    }
    let n = y.len();
    let p = x.ncols();
    let w = class_weights(y, k);
    let mtry = cfg.mtry.unwrap_or(((p as f64).sqrt().floor() as usize).max(1));
    let params = TreeParams { max_depth: cfg.max_depth, min_leaf: cfg.min_leaf, mtry: Some(mtry) };
    let trees = par::map_range(cfg.n_trees, |t| {
        let mut rng = seed::substream(seed, &["tree", &t.to_string()]);
        let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
        build_classifier(x, y, &w, k, idx, params, Some(&mut rng))
    });
    Ok(Forest { n_classes: k, trees })
}

impl Forest {
    pub fn predict_row(&self, x: ArrayView1<f64>) -> Vec<f64> {
        let mut acc = vec![0.0; self.n_classes];
        for t in &self.trees {
            for (a, v) in acc.iter_mut().zip(t.predict(x)) {
                *a += v;
            }
        }
        let s: f64 = acc.iter().sum();
        acc.into_iter().map(|v| v / s).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BoostingConfig {
    pub n_rounds: usize,
    pub max_depth: usize,
    pub learning_rate: f64,
    pub min_leaf: usize,
    /// Newton split gain and leaves from gradients and hessians, with L2
    /// leaf penalty `lambda`. Off: Friedman's least-squares fit to residuals.
    pub second_order: bool,
    pub lambda: f64,
}

impl Default for BoostingConfig {
    fn default() -> Self {
        BoostingConfig { n_rounds: 150, max_depth: 3, learning_rate: 0.1, min_leaf: 1, second_order: false, lambda: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Boosted {
    pub n_classes: usize,
    /// Initial raw scores: one log-odds (binary) or K log-priors.
    pub init: Vec<f64>,
    pub learning_rate: f64,
    /// `rounds[r][j]`: tree for output j in round r.
    pub rounds: Vec<Vec<Tree>>,
}

impl Boosted {
    pub fn raw_row(&self, x: ArrayView1<f64>) -> Vec<f64> {
        let mut f = self.init.clone();
        for round in &self.rounds {
            for (fj, t) in f.iter_mut().zip(round) {
                *fj += self.learning_rate * t.predict(x)[0];
            }
        }
        f
    }

    pub fn predict_row(&self, x: ArrayView1<f64>) -> Vec<f64> {
        let f = self.raw_row(x);
        if f.len() == 1 {
            let p1 = sigmoid(f[0]);
            vec![1.0 - p1, p1]
        } else {
            softmax(&f)
        }
    }

    pub fn trees(&self) -> impl Iterator<Item = &Tree> {
        self.rounds.iter().flatten()
    }
}

/// Stagewise boosting on the (class-weighted) logistic or softmax loss.
pub fn train_boosting(x: &Array2<f64>, y: &[usize], k: usize, cfg: &BoostingConfig) -> Result<Boosted> {
    check_labels(x, y, k)?;
    if !(cfg.learning_rate > 0.0) {
        return Err(Error::Parameter("learning rate must be positive".into()));
    }
    let n = y.len();
    let w = class_weights(y, k);
    let wsum: f64 = w.iter().sum();
    let m = if k == 2 { 1 } else { k };
    let mut prior = vec![0.0; k];
    for (&c, &wi) in y.iter().zip(&w) {
        prior[c] += wi / wsum;
    }
    let init: Vec<f64> = if m == 1 { vec![(prior[1] / prior[0]).ln()] } else { prior.iter().map(|p| p.ln()).collect() };
    let params = TreeParams { max_depth: cfg.max_depth, min_leaf: cfg.min_leaf, mtry: None };
    let mut f: Vec<Vec<f64>> = vec![init.clone(); n];
    let mut rounds = Vec::with_capacity(cfg.n_rounds);
    let lambda = if cfg.second_order { cfg.lambda } else { 0.0 };
    for _ in 0..cfg.n_rounds {
        let probs: Vec<Vec<f64>> = f.iter().map(|fi| if m == 1 { vec![sigmoid(fi[0])] } else { softmax(fi) }).collect();
        let trees: Vec<Tree> = par::map_range(m, |j| {
            let target = |i: usize| if m == 1 { f64::from(y[i] == 1) } else { f64::from(y[i] == j) };
            let r: Vec<f64> = (0..n).map(|i| target(i) - probs[i][j]).collect();
            let hess: Vec<f64> = (0..n).map(|i| w[i] * probs[i][j] * (1.0 - probs[i][j])).collect();
            let wr: Vec<f64> = (0..n).map(|i| w[i] * r[i]).collect();
            let (split_den, leaf_den, scale) = if cfg.second_order {
                (hess.clone(), hess, 1.0)
            } else if m == 1 {
                (w.clone(), hess, 1.0)
            } else {
                let den: Vec<f64> = (0..n).map(|i| w[i] * r[i].abs() * (1.0 - r[i].abs())).collect();
                (w.clone(), den, (k - 1) as f64 / k as f64)
            };
            let targets = RegressionTargets { split_num: &wr, split_den: &split_den, leaf_num: &wr, leaf_den: &leaf_den, lambda, scale };
            build_regressor(x, targets, (0..n).collect(), params, None)
        });
        for (i, fi) in f.iter_mut().enumerate() {
            let row = x.row(i);
            for (j, t) in trees.iter().enumerate() {
                fi[j] += cfg.learning_rate * t.predict(row)[0];
            }
        }
        rounds.push(trees);
    }
    Ok(Boosted { n_classes: k, init, learning_rate: cfg.learning_rate, rounds })
}
