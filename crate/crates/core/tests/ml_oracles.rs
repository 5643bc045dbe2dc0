mod common;

use common::pairwise_auc;
use ndarray::{Array1, Array2};
use proptest::prelude::*;
use pssf_core::analysis::feature_importance;
use pssf_core::ml::{
    auc, class_weights, train_boosting, train_model, BoostingConfig, LinearParams, MlConfig, ModelKind, ModelParams, Problem, Selection, Standardizer, Task, TrainedModel,
    MODEL_FORMAT_VERSION,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn auc_equals_pair_counting(
        data in prop::collection::vec((any::<bool>(), 0u8..12), 2..=200)
    ) {
        let labels: Vec<bool> = data.iter().map(|d| d.0).collect();
        // Coarse integer scores force plenty of ties.
        let scores: Vec<f64> = data.iter().map(|d| f64::from(d.1) / 4.0).collect();
        let both = labels.iter().any(|&l| l) && labels.iter().any(|&l| !l);
        match auc(&labels, &scores) {
            Ok(a) => {
                prop_assert!(both);
                prop_assert!((a - pairwise_auc(&labels, &scores)).abs() < 1e-12);
                let shifted: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp()).collect();
                prop_assert!((auc(&labels, &shifted).unwrap() - a).abs() < 1e-12);
            }
            Err(_) => prop_assert!(!both),
        }
    }
}

#[test]
fn auc_worked_example() {
    assert_eq!(auc(&[false, false, true, true], &[0.1, 0.4, 0.35, 0.8]).unwrap(), 0.75);
}

fn gradient_check(k: usize, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, p) = (30, 4);
    let x = Array2::from_shape_fn((n, p), |_| rng.random_range(-2.0..2.0));
    let mut y: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
    y[0] = 0;
    y[1] = k - 1;
    let w = class_weights(&y, k);
    let prob = Problem { x: &x, y: &y, weights: &w, n_classes: k };
    let outputs = if k == 2 { 1 } else { k };
    let theta: Vec<f64> = (0..outputs * (p + 1)).map(|_| rng.random_range(-1.0..1.0)).collect();
    let lambda = 0.3;
    let (_, grad) = prob.loss_grad(&theta, lambda);
    let h = 1e-5;
    for i in 0..theta.len() {
        let mut up = theta.clone();
        let mut dn = theta.clone();
        up[i] += h;
        dn[i] -= h;
        let fd = (prob.loss_grad(&up, lambda).0 - prob.loss_grad(&dn, lambda).0) / (2.0 * h);
        let rel = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-8);
        assert!(rel < 1e-4, "k={k} seed={seed} component {i}: analytic {} vs numeric {fd}", grad[i]);
    }
}

#[test]
fn logistic_gradients_match_finite_differences() {
    for seed in 0..10 {
        gradient_check(2, seed);
        gradient_check(3, 100 + seed);
    }
}

fn toy(n: usize, p: usize, seed: u64, active: &[usize]) -> (Array2<f64>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Array2::from_shape_fn((n, p), |_| rng.random_range(-1.0..1.0));
    let y = x.rows().into_iter().map(|r| usize::from(active.iter().map(|&j| r[j]).sum::<f64>() > 0.0)).collect();
    (x, y)
}

/// Exhaustive search for the stump minimising weighted squared error of the
/// first-round residuals; leaves take the Newton step of the logistic loss.
fn stump_oracle(x: &Array2<f64>, y: &[usize]) -> (usize, f64, Vec<f64>) {
    let w = class_weights(y, 2);
    let wsum: f64 = w.iter().sum();
    let p1: f64 = y.iter().zip(&w).filter(|(&c, _)| c == 1).map(|(_, wi)| wi).sum::<f64>() / wsum;
    let f0 = (p1 / (1.0 - p1)).ln();
    let prob = 1.0 / (1.0 + (-f0).exp());
    let r: Vec<f64> = y.iter().map(|&c| c as f64 - prob).collect();
    let sse = |rows: &[usize]| {
        let sw: f64 = rows.iter().map(|&i| w[i]).sum();
        let m = rows.iter().map(|&i| w[i] * r[i]).sum::<f64>() / sw;
        rows.iter().map(|&i| w[i] * (r[i] - m).powi(2)).sum::<f64>()
    };
    let mut best = (f64::INFINITY, 0, 0.0);
    for f in 0..x.ncols() {
        let mut vals: Vec<f64> = x.column(f).to_vec();
        vals.sort_by(f64::total_cmp);
        vals.dedup();
        for t in vals.windows(2).map(|v| (v[0] + v[1]) / 2.0) {
            let (l, rr): (Vec<usize>, Vec<usize>) = (0..y.len()).partition(|&i| x[[i, f]] <= t);
            let e = sse(&l) + sse(&rr);
            if e < best.0 {
                best = (e, f, t);
            }
        }
    }
    let (_, f, t) = best;
    let leaf = |left: bool| {
        let rows: Vec<usize> = (0..y.len()).filter(|&i| (x[[i, f]] <= t) == left).collect();
        rows.iter().map(|&i| w[i] * r[i]).sum::<f64>() / rows.iter().map(|&i| w[i] * prob * (1.0 - prob)).sum::<f64>()
    };
    let (lv, rv) = (leaf(true), leaf(false));
    let raw = (0..y.len()).map(|i| f0 + if x[[i, f]] <= t { lv } else { rv }).collect();
    (f, t, raw)
}

#[test]
fn one_round_boosting_is_the_best_stump() {
    for seed in 0..5 {
        let (x, mut y) = toy(120, 3, seed, &[1]);
        // Label noise keeps the best split away from a perfect separation.
        for i in (0..y.len()).step_by(7) {
            y[i] = 1 - y[i];
        }
        let cfg = BoostingConfig { n_rounds: 1, max_depth: 1, learning_rate: 1.0, min_leaf: 1, ..Default::default() };
        let model = train_boosting(&x, &y, 2, &cfg).unwrap();
        let (f, t, raw) = stump_oracle(&x, &y);
        let tree = &model.rounds[0][0];
        assert_eq!(tree.max_feature(), Some(f), "seed {seed}");
        match &tree.nodes[0] {
            pssf_core::ml::tree::Node::Split { feature, threshold, .. } => assert_eq!((*feature, *threshold), (f, t)),
            other => panic!("root is not a split: {other:?}"),
        }
        for (i, want) in raw.iter().enumerate() {
            let got = model.raw_row(x.row(i))[0];
            assert!((got - want).abs() < 1e-9, "seed {seed} row {i}: {got} vs {want}");
        }
    }
}

#[test]
fn importance_finds_the_active_pair() {
    let (x, y) = toy(400, 6, 11, &[1, 2]);
    let names: Vec<String> = (0..6).map(|j| format!("f{j}")).collect();
    let std = Standardizer::fit(&x);
    let xs = std.apply(&x);
    let cfg = MlConfig::default();
    for kind in ModelKind::ALL {
        let params = train_model(kind, &x, &xs, &y, 2, 0.01, &cfg, 5).unwrap();
        let model = TrainedModel {
            format_version: MODEL_FORMAT_VERSION,
            kind,
            task: Task::Binary0v2,
            features: names.clone(),
            standardizer: matches!(params, ModelParams::Logreg(_)).then(|| std.clone()),
            params,
            selection: Selection { mrmr_k: 6, l1_lambda: 0.0, l2_lambda: None, val_auc: None, pruned: 0 },
            config: cfg.clone(),
            train_protocols: vec!["reference".into()],
            seed: 5,
        };
        let ranked = feature_importance(&model);
        let mut top: Vec<&str> = ranked[..2].iter().map(|r| r.0.as_str()).collect();
        top.sort();
        assert_eq!(top, ["f1", "f2"], "{kind:?}: {ranked:?}");
        if kind != ModelKind::LogregL2 {
            let total: f64 = ranked.iter().map(|r| r.1).sum();
            assert!((total - 1.0).abs() < 1e-9);
        }
    }
}

#[test]
fn zero_coefficients_give_uniform_probabilities() {
    let p = LinearParams::zeros(3, 4);
    assert_eq!(p.predict_row(Array1::from(vec![1.0, -2.0, 3.0, 0.5]).view()), vec![1.0 / 3.0; 3]);
}
