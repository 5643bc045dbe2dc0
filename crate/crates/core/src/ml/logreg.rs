//! Class-weighted logistic regression: sigmoid for two classes, softmax
//! (multinomial) for more.

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearParams {
    /// One row per output: 1 for binary (class-1 logit), K for multinomial.
    pub coef: Vec<Vec<f64>>,
    pub intercept: Vec<f64>,
}

impl LinearParams {
    pub fn zeros(n_classes: usize, p: usize) -> Self {
        let m = outputs(n_classes);
        LinearParams { coef: vec![vec![0.0; p]; m], intercept: vec![0.0; m] }
    }

    fn from_flat(theta: &[f64], m: usize, p: usize) -> Self {
        let coef = (0..m).map(|j| theta[j * (p + 1)..j * (p + 1) + p].to_vec()).collect();
        let intercept = (0..m).map(|j| theta[j * (p + 1) + p]).collect();
        LinearParams { coef, intercept }
    }

    fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::new();
        for (c, b) in self.coef.iter().zip(&self.intercept) {
            v.extend_from_slice(c);
            v.push(*b);
        }
        v
    }

    pub fn n_classes(&self) -> usize {
        if self.coef.len() == 1 {
            2
        } else {
            self.coef.len()
        }
    }

    pub fn predict_row(&self, x: ArrayView1<f64>) -> Vec<f64> {
        let z: Vec<f64> = self.coef.iter().zip(&self.intercept).map(|(c, b)| b + c.iter().zip(x.iter()).map(|(a, v)| a * v).sum::<f64>()).collect();
        if z.len() == 1 {
            let p1 = sigmoid(z[0]);
            vec![1.0 - p1, p1]
        } else {
            softmax(&z)
        }
    }
}

fn outputs(n_classes: usize) -> usize {
    if n_classes == 2 {
        1
    } else {
        n_classes
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Inverse-frequency sample weights, normalised to mean 1 over the rows.
pub fn class_weights(y: &[usize], n_classes: usize) -> Vec<f64> {
    let mut counts = vec![0usize; n_classes];
    for &c in y {
        counts[c] += 1;
    }
    let present = counts.iter().filter(|&&c| c > 0).count() as f64;
    let n = y.len() as f64;
    y.iter().map(|&c| n / (present * counts[c] as f64)).collect()
}

/// Training problem: rows `x`, labels `y` in `0..n_classes`, sample weights.
pub struct Problem<'a> {
    pub x: &'a Array2<f64>,
    pub y: &'a [usize],
    pub weights: &'a [f64],
    pub n_classes: usize,
}

impl Problem<'_> {
    fn check(&self) -> Result<()> {
        let (n, _) = self.x.dim();
        if n == 0 || self.y.len() != n || self.weights.len() != n {
            return Err(Error::Shape(format!("{n} rows, {} labels, {} weights", self.y.len(), self.weights.len())));
        }
        if self.x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("non-finite value in the design matrix".into()));
        }
        if self.y.iter().any(|&c| c >= self.n_classes) {
            return Err(Error::Training(format!("labels must lie in 0..{}", self.n_classes)));
        }
        let first = self.y[0];
        if self.y.iter().all(|&c| c == first) {
            return Err(Error::Training("training labels contain a single class".into()));
        }
        Ok(())
    }

    fn dim(&self) -> (usize, usize) {
        let p = self.x.ncols();
        (outputs(self.n_classes), p)
    }

    /// Weighted mean log-loss plus `lambda2/2 * ||W||^2`, and its gradient
    /// with respect to the flat parameter vector. Intercepts are unpenalised.
    pub fn loss_grad(&self, theta: &[f64], lambda2: f64) -> (f64, Vec<f64>) {
        let (m, p) = self.dim();
        let wsum: f64 = self.weights.iter().sum();
        let mut loss = 0.0;
        let mut grad = vec![0.0; theta.len()];
        let mut z = vec![0.0; m];
        for (i, row) in self.x.rows().into_iter().enumerate() {
            for (j, zj) in z.iter_mut().enumerate() {
                let base = j * (p + 1);
                *zj = theta[base + p] + row.iter().zip(&theta[base..base + p]).map(|(a, b)| a * b).sum::<f64>();
            }
            let w = self.weights[i] / wsum;
            let y = self.y[i];
            if m == 1 {
                let t = if y == 1 { 1.0 } else { 0.0 };
                loss += w * (softplus(z[0]) - t * z[0]);
                let g = w * (sigmoid(z[0]) - t);
                for (k, v) in row.iter().enumerate() {
                    grad[k] += g * v;
                }
                grad[p] += g;
            } else {
                let pr = softmax(&z);
                let zmax = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = zmax + z.iter().map(|v| (v - zmax).exp()).sum::<f64>().ln();
                loss += w * (lse - z[y]);
                for j in 0..m {
                    let g = w * (pr[j] - if j == y { 1.0 } else { 0.0 });
                    let base = j * (p + 1);
                    for (k, v) in row.iter().enumerate() {
                        grad[base + k] += g * v;
                    }
                    grad[base + p] += g;
                }
            }
        }
        if lambda2 > 0.0 {
            for j in 0..m {
                for k in 0..p {
                    let t = theta[j * (p + 1) + k];
                    loss += 0.5 * lambda2 * t * t;
                    grad[j * (p + 1) + k] += lambda2 * t;
                }
            }
        }
        (loss, grad)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Convergence {
    pub iterations: usize,
    pub objective: f64,
    pub converged: bool,
}

const MAX_GD_ITERS: usize = 50_000;

/// L2-penalised fit by full-batch gradient descent with Armijo backtracking;
/// stops when the relative objective change drops below `tol`.
pub fn fit_l2(problem: &Problem, lambda2: f64, tol: f64) -> Result<(LinearParams, Convergence)> {
    problem.check()?;
    let (m, p) = problem.dim();
    let mut theta = LinearParams::zeros(problem.n_classes, p).to_flat();
    let (mut f, mut g) = problem.loss_grad(&theta, lambda2);
    let mut step = 1.0;
    let mut conv = Convergence { iterations: 0, objective: f, converged: false };
    for it in 1..=MAX_GD_ITERS {
        let gg: f64 = g.iter().map(|v| v * v).sum();
        if gg == 0.0 {
            conv = Convergence { iterations: it, objective: f, converged: true };
            break;
        }
        let (next, fnext, gnext) = loop {
            let cand: Vec<f64> = theta.iter().zip(&g).map(|(t, d)| t - step * d).collect();
            let (fc, gc) = problem.loss_grad(&cand, lambda2);
            if fc <= f - 1e-4 * step * gg || step < 1e-12 {
                break (cand, fc, gc);
            }
            step *= 0.5;
        };
        let rel = (f - fnext).abs() / f.abs().max(1e-12);
        theta = next;
        f = fnext;
        g = gnext;
        step *= 2.0;
        conv = Convergence { iterations: it, objective: f, converged: rel < tol };
        if rel < tol {
            break;
        }
    }
    if !conv.converged {
        log::warn!("L2 logistic fit stopped after {} iterations (objective {})", conv.iterations, conv.objective);
    }
    Ok((LinearParams::from_flat(&theta, m, p), conv))
}

fn soft_threshold(v: f64, t: f64) -> f64 {
    v.signum() * (v.abs() - t).max(0.0)
}

/// L1-penalised fit by proximal gradient (ISTA) with backtracking; stops on
/// relative objective change below `tol` or after `max_iter` iterations.
pub fn fit_l1(problem: &Problem, lambda1: f64, tol: f64, max_iter: usize) -> Result<(LinearParams, Convergence)> {
    problem.check()?;
    let (m, p) = problem.dim();
    let is_coef = |i: usize| i % (p + 1) != p;
    let penalty = |theta: &[f64]| lambda1 * theta.iter().enumerate().filter(|(i, _)| is_coef(*i)).map(|(_, v)| v.abs()).sum::<f64>();
    let mut theta = LinearParams::zeros(problem.n_classes, p).to_flat();
    let (mut f, mut g) = problem.loss_grad(&theta, 0.0);
    let mut obj = f + penalty(&theta);
    let mut step = 1.0;
    let mut conv = Convergence { iterations: 0, objective: obj, converged: false };
    for it in 1..=max_iter {
        let (next, fnext, gnext) = loop {
            let cand: Vec<f64> = theta
                .iter()
                .zip(&g)
                .enumerate()
                .map(|(i, (t, d))| {
                    let v = t - step * d;
                    if is_coef(i) {
                        soft_threshold(v, step * lambda1)
                    } else {
                        v
                    }
                })
                .collect();
            let (fc, gc) = problem.loss_grad(&cand, 0.0);
            let diff: Vec<f64> = cand.iter().zip(&theta).map(|(a, b)| a - b).collect();
            let lin: f64 = diff.iter().zip(&g).map(|(a, b)| a * b).sum();
            let quad: f64 = diff.iter().map(|v| v * v).sum::<f64>() / (2.0 * step);
            if fc <= f + lin + quad + 1e-15 || step < 1e-12 {
                break (cand, fc, gc);
            }
            step *= 0.5;
        };
        let onext = fnext + penalty(&next);
        let rel = (obj - onext).abs() / obj.abs().max(1e-12);
        theta = next;
        f = fnext;
        g = gnext;
        obj = onext;
        step *= 2.0;
        conv = Convergence { iterations: it, objective: obj, converged: rel < tol };
        if rel < tol {
            break;
        }
    }
    Ok((LinearParams::from_flat(&theta, m, p), conv))
}
