use ndarray::{Array2, ArrayView1};

use super::logreg::{class_weights, fit_l1, Problem};
use crate::error::{Error, Result};

pub const MI_BINS: usize = 8;
pub const L1_TOL: f64 = 1e-7;
pub const L1_MAX_ITER: usize = 5000;

/// Equal-frequency bin codes in `0..bins`. Tied values share the bin of
/// their first sorted position.
pub fn equal_frequency_bins(v: ArrayView1<f64>, bins: usize) -> Vec<usize> {
    let n = v.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]).then(a.cmp(&b)));
    let mut out = vec![0; n];
    let mut start = 0;
    for (pos, &i) in idx.iter().enumerate() {
        if pos > 0 && v[i] != v[idx[pos - 1]] {
            start = pos;
        }
        out[i] = (start * bins / n).min(bins - 1);
    }
    out
}

/// Plug-in mutual information (nats) of two discrete codings.
pub fn mutual_information(a: &[usize], b: &[usize]) -> f64 {
    let ka = a.iter().max().map_or(0, |m| m + 1);
    let kb = b.iter().max().map_or(0, |m| m + 1);
    let n = a.len() as f64;
    let mut joint = vec![0.0; ka * kb];
    let mut pa = vec![0.0; ka];
    let mut pb = vec![0.0; kb];
    for (&i, &j) in a.iter().zip(b) {
        joint[i * kb + j] += 1.0;
        pa[i] += 1.0;
        pb[j] += 1.0;
    }
    let mut mi = 0.0;
    for i in 0..ka {
        for j in 0..kb {
            let c = joint[i * kb + j];
            if c > 0.0 {
                mi += c / n * (c * n / (pa[i] * pb[j])).ln();
            }
        }
    }
    mi.max(0.0)
}

/// Greedy mRMR (difference form): first the most relevant column, then
/// repeatedly argmax of `I(f; y) - mean_{s in S} I(f; s)`. Ties go to the
/// lower column index. Returns column indices in selection order.
pub fn mrmr_select(x: &Array2<f64>, y: &[usize], k: usize) -> Result<Vec<usize>> {
    if k == 0 {
        return Err(Error::Parameter("mRMR needs k >= 1".into()));
    }
    if x.nrows() != y.len() {
        return Err(Error::Shape(format!("{} rows vs {} labels", x.nrows(), y.len())));
    }
    let p = x.ncols();
    let k = if k > p {
        log::warn!("mRMR k = {k} exceeds {p} columns; clamped");
        p
    } else {
        k
    };
    let codes: Vec<Vec<usize>> = (0..p).map(|j| equal_frequency_bins(x.column(j), MI_BINS)).collect();
    let relevance: Vec<f64> = codes.iter().map(|c| mutual_information(c, y)).collect();
    let mut redundancy = vec![0.0; p];
    let mut chosen: Vec<usize> = Vec::with_capacity(k);
    let mut taken = vec![false; p];
    while chosen.len() < k {
        let mut best: Option<(f64, usize)> = None;
        for j in (0..p).filter(|&j| !taken[j]) {
            let score = if chosen.is_empty() { relevance[j] } else { relevance[j] - redundancy[j] / chosen.len() as f64 };
            if best.is_none_or(|(s, _)| score > s) {
                best = Some((score, j));
            }
        }
        let Some((_, j)) = best else { break };
        taken[j] = true;
        chosen.push(j);
        for (i, r) in redundancy.iter_mut().enumerate() {
            if !taken[i] {
                *r += mutual_information(&codes[i], &codes[j]);
            }
        }
    }
    Ok(chosen)
}

/// Columns with a nonzero coefficient (any class) in the class-weighted
/// L1-penalised logistic fit. `x` should be standardised.
pub fn l1_select(x: &Array2<f64>, y: &[usize], n_classes: usize, lambda: f64) -> Result<Vec<usize>> {
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("non-finite value in the design matrix".into()));
    }
    let w = class_weights(y, n_classes);
    let (params, _) = fit_l1(&Problem { x, y, weights: &w, n_classes }, lambda, L1_TOL, L1_MAX_ITER)?;
    Ok((0..x.ncols()).filter(|&j| params.coef.iter().any(|c| c[j] != 0.0)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn bins_are_equal_frequency() {
        let v = ndarray::Array1::from_iter((0..80).map(|i| ((i * 37) % 80) as f64));
        let b = equal_frequency_bins(v.view(), 8);
        for bin in 0..8 {
            assert_eq!(b.iter().filter(|&&x| x == bin).count(), 10);
        }
        let ties = ndarray::arr1(&[1.0, 1.0, 1.0, 2.0]);
        assert_eq!(equal_frequency_bins(ties.view(), 2), vec![0, 0, 0, 1]);
    }

    #[test]
    fn label_copy_ranked_first() {
        let mut rng = crate::seed::rng(4);
        let n = 400;
        let y: Vec<usize> = (0..n).map(|_| rng.random_range(0..2)).collect();
        let x = Array2::from_shape_fn((n, 3), |(i, j)| if j == 1 { y[i] as f64 } else { rng.random_range(0.0..1.0) });
        assert_eq!(mrmr_select(&x, &y, 1).unwrap(), vec![1]);
    }

    #[test]
    fn duplicate_never_second() {
        let mut rng = crate::seed::rng(5);
        let n = 400;
        let y: Vec<usize> = (0..n).map(|_| rng.random_range(0..2)).collect();
        let mut x = Array2::from_shape_fn((n, 4), |(i, j)| match j {
            0 => y[i] as f64 + rng.random_range(0.0..0.9),
            2 => y[i] as f64 + rng.random_range(0.0..1.6),
            _ => rng.random_range(0.0..1.0),
        });
        let c0 = x.column(0).to_owned();
        x.column_mut(1).assign(&c0);
        let order = mrmr_select(&x, &y, 4).unwrap();
        assert_eq!(order[0], 0);
        assert_ne!(order[1], 1);
        assert_eq!(mrmr_select(&x, &y, 9).unwrap().len(), 4);
    }

    #[test]
    fn l1_keeps_informative_feature() {
        let mut rng = crate::seed::rng(6);
        let n = 300;
        let y: Vec<usize> = (0..n).map(|_| rng.random_range(0..2)).collect();
        let mut x = Array2::from_shape_fn((n, 2), |(i, j)| if j == 0 { y[i] as f64 * 2.0 - 1.0 + rng.random_range(-0.3..0.3) } else { rng.random_range(-1.0..1.0) });
        for mut c in x.columns_mut() {
            let m = c.mean().unwrap();
            let s = c.std(0.0);
            c.mapv_inplace(|v| (v - m) / s);
        }
        assert_eq!(l1_select(&x, &y, 2, 0.05).unwrap(), vec![0]);
        assert!(l1_select(&x, &y, 2, 1e3).unwrap().is_empty());
        assert_eq!(l1_select(&x, &y, 2, 0.0).unwrap(), vec![0, 1]);
    }
}
