//! CART trees stored as explicit node lists.

use ndarray::{Array2, ArrayView1};
use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::seed::Rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Node {
    /// Rows with `x[feature] <= threshold` go left.
    Split { feature: usize, threshold: f64, left: usize, right: usize },
    Leaf { value: Vec<f64> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<Node>,
    /// Total impurity decrease per feature (unnormalised).
    pub importance: Vec<f64>,
}

impl Tree {
    pub fn leaf(value: Vec<f64>, p: usize) -> Self {
        Tree { nodes: vec![Node::Leaf { value }], importance: vec![0.0; p] }
    }

    pub fn predict(&self, x: ArrayView1<f64>) -> &[f64] {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                Node::Split { feature, threshold, left, right } => i = if x[*feature] <= *threshold { *left } else { *right },
                Node::Leaf { value } => return value,
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn go(nodes: &[Node], i: usize) -> usize {
            match &nodes[i] {
                Node::Split { left, right, .. } => 1 + go(nodes, *left).max(go(nodes, *right)),
                Node::Leaf { .. } => 0,
            }
        }
        go(&self.nodes, 0)
    }

    pub fn max_feature(&self) -> Option<usize> {
        self.nodes
            .iter()
            .filter_map(|n| match n {
                Node::Split { feature, .. } => Some(*feature),
                Node::Leaf { .. } => None,
            })
            .max()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TreeParams {
    pub max_depth: usize,
    pub min_leaf: usize,
    /// Candidate features per split; None = all.
    pub mtry: Option<usize>,
}

/// Per-node statistics the builder needs to score splits and emit leaves.
trait Criterion {
    type Acc: Clone;
    fn empty(&self) -> Self::Acc;
    fn add(&self, acc: &mut Self::Acc, i: usize);
    fn sub(&self, acc: &mut Self::Acc, i: usize);
    /// Larger is better; split gain = score(L) + score(R) - score(parent).
    fn score(&self, acc: &Self::Acc) -> f64;
    fn is_pure(&self, acc: &Self::Acc) -> bool;
    fn leaf(&self, acc: &Self::Acc) -> Vec<f64>;
}

struct Gini<'a> {
    y: &'a [usize],
    w: &'a [f64],
    k: usize,
}

impl Criterion for Gini<'_> {
    type Acc = Vec<f64>;
    fn empty(&self) -> Vec<f64> {
        vec![0.0; self.k]
    }
    fn add(&self, acc: &mut Vec<f64>, i: usize) {
        acc[self.y[i]] += self.w[i];
    }
    fn sub(&self, acc: &mut Vec<f64>, i: usize) {
        acc[self.y[i]] -= self.w[i];
    }
    // -W * gini = sum(c^2)/W - W.
    fn score(&self, acc: &Vec<f64>) -> f64 {
        let total: f64 = acc.iter().sum();
        if total <= 0.0 {
            return 0.0;
        }
        acc.iter().map(|c| c * c).sum::<f64>() / total - total
    }
    fn is_pure(&self, acc: &Vec<f64>) -> bool {
        acc.iter().filter(|&&c| c > 1e-12).count() <= 1
    }
    fn leaf(&self, acc: &Vec<f64>) -> Vec<f64> {
        let total: f64 = acc.iter().sum();
        acc.iter().map(|c| c / total).collect()
    }
}

/// Split score `S^2 / (D + lambda)`; leaf `sum(num) / (sum(den) + lambda)`,
/// times `scale`. Least squares on residuals r with weights w is S = sum(w r),
/// D = sum(w); second-order boosting uses gradients and hessians.
pub struct RegressionTargets<'a> {
    pub split_num: &'a [f64],
    pub split_den: &'a [f64],
    pub leaf_num: &'a [f64],
    pub leaf_den: &'a [f64],
    pub lambda: f64,
    pub scale: f64,
}

impl Criterion for RegressionTargets<'_> {
    type Acc = [f64; 4];
    fn empty(&self) -> [f64; 4] {
        [0.0; 4]
    }
    fn add(&self, a: &mut [f64; 4], i: usize) {
        a[0] += self.split_num[i];
        a[1] += self.split_den[i];
        a[2] += self.leaf_num[i];
        a[3] += self.leaf_den[i];
    }
    fn sub(&self, a: &mut [f64; 4], i: usize) {
        a[0] -= self.split_num[i];
        a[1] -= self.split_den[i];
        a[2] -= self.leaf_num[i];
        a[3] -= self.leaf_den[i];
    }
    fn score(&self, a: &[f64; 4]) -> f64 {
        let d = a[1] + self.lambda;
        if d <= 0.0 {
            0.0
        } else {
            a[0] * a[0] / d
        }
    }
    fn is_pure(&self, _: &[f64; 4]) -> bool {
        false
    }
    fn leaf(&self, a: &[f64; 4]) -> Vec<f64> {
        let d = a[3] + self.lambda;
        vec![if d.abs() < 1e-12 { 0.0 } else { self.scale * a[2] / d }]
    }
}

const MIN_GAIN: f64 = 1e-12;

struct Builder<'a, C: Criterion> {
    x: &'a Array2<f64>,
    crit: C,
    params: TreeParams,
    nodes: Vec<Node>,
    importance: Vec<f64>,
}

impl<C: Criterion> Builder<'_, C> {
    fn grow(&mut self, idx: &mut [usize], depth: usize, rng: &mut Option<&mut Rng>) -> usize {
        let mut acc = self.crit.empty();
        for &i in idx.iter() {
            self.crit.add(&mut acc, i);
        }
        let id = self.nodes.len();
        self.nodes.push(Node::Leaf { value: self.crit.leaf(&acc) });
        let n = idx.len();
        if depth >= self.params.max_depth || n < 2 * self.params.min_leaf.max(1) || self.crit.is_pure(&acc) {
            return id;
        }
        let p = self.x.ncols();
        let features: Vec<usize> = match (self.params.mtry, rng.as_deref_mut()) {
            (Some(m), Some(r)) if m < p => {
                let mut f = sample(r, p, m.max(1)).into_vec();
                f.sort_unstable();
                f
            }
            _ => (0..p).collect(),
        };
        let parent = self.crit.score(&acc);
        let min_leaf = self.params.min_leaf.max(1);
        let mut best: Option<(f64, usize, f64)> = None;
        let mut order = idx.to_vec();
        for &f in &features {
            order.sort_by(|&a, &b| self.x[[a, f]].total_cmp(&self.x[[b, f]]).then(a.cmp(&b)));
            let mut left = self.crit.empty();
            let mut right = acc.clone();
            for s in 0..n - 1 {
                let i = order[s];
                self.crit.add(&mut left, i);
                self.crit.sub(&mut right, i);
                let (v, vn) = (self.x[[i, f]], self.x[[order[s + 1], f]]);
                if s + 1 < min_leaf || n - s - 1 < min_leaf || v == vn {
                    continue;
                }
                let gain = self.crit.score(&left) + self.crit.score(&right) - parent;
                if gain > MIN_GAIN && best.is_none_or(|(g, _, _)| gain > g) {
                    best = Some((gain, f, v + (vn - v) / 2.0));
                }
            }
        }
        let Some((gain, f, thr)) = best else {
            return id;
        };
        self.importance[f] += gain;
        let mut split = 0;
        for k in 0..n {
            if self.x[[idx[k], f]] <= thr {
                idx.swap(k, split);
                split += 1;
            }
        }
        let (l, r) = idx.split_at_mut(split);
        let left = self.grow(l, depth + 1, rng);
        let right = self.grow(r, depth + 1, rng);
        self.nodes[id] = Node::Split { feature: f, threshold: thr, left, right };
        id
    }
}

/// Gini classification tree over rows `idx` (repeats allowed, as in a
/// bootstrap). Leaves hold weighted class distributions.
pub fn build_classifier(x: &Array2<f64>, y: &[usize], w: &[f64], k: usize, mut idx: Vec<usize>, params: TreeParams, rng: Option<&mut Rng>) -> Tree {
    let mut b = Builder { x, crit: Gini { y, w, k }, params, nodes: Vec::new(), importance: vec![0.0; x.ncols()] };
    b.grow(&mut idx, 0, &mut { rng });
    Tree { nodes: b.nodes, importance: b.importance }
}

/// Regression tree for boosting; see [`RegressionTargets`].
pub fn build_regressor(x: &Array2<f64>, targets: RegressionTargets, mut idx: Vec<usize>, params: TreeParams, rng: Option<&mut Rng>) -> Tree {
    let mut b = Builder { x, crit: targets, params, nodes: Vec::new(), importance: vec![0.0; x.ncols()] };
    b.grow(&mut idx, 0, &mut { rng });
    Tree { nodes: b.nodes, importance: b.importance }
}
