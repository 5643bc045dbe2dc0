use ndarray::Array2;

use super::FeatureVector;
use crate::error::{Error, Result};

pub const FIRST_ORDER_NAMES: [&str; 16] = [
    "firstorder_mean",
    "firstorder_variance",
    "firstorder_skewness",
    "firstorder_kurtosis",
    "firstorder_minimum",
    "firstorder_maximum",
    "firstorder_median",
    "firstorder_p10",
    "firstorder_p90",
    "firstorder_iqr",
    "firstorder_range",
    "firstorder_mad",
    "firstorder_rms",
    "firstorder_energy",
    "firstorder_entropy",
    "firstorder_uniformity",
];

/// Linear-interpolation percentile of sorted data, `q` in `[0, 100]`.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Intensity statistics of `values` (z-scored ROI) plus entropy and
/// uniformity of the discretized `levels`. Kurtosis is excess kurtosis;
/// variance is the population variance.
pub fn first_order(values: &Array2<f64>, levels: &Array2<u32>, n_bins: u32) -> Result<FeatureVector> {
    if values.is_empty() || values.dim() != levels.dim() {
        return Err(Error::Shape("first-order features need matching non-empty rasters".into()));
    }
    let n = values.len() as f64;
    let mut v: Vec<f64> = values.iter().copied().collect();
    v.sort_by(f64::total_cmp);
    let mean = v.iter().sum::<f64>() / n;
    let m = |k: i32| v.iter().map(|x| (x - mean).powi(k)).sum::<f64>() / n;
    let (m2, m3, m4) = (m(2), m(3), m(4));
    let (skew, kurt) = if m2 > 0.0 { (m3 / m2.powf(1.5), m4 / (m2 * m2) - 3.0) } else { (0.0, 0.0) };
    let energy: f64 = v.iter().map(|x| x * x).sum();

    let mut counts = vec![0u64; n_bins as usize];
    for &l in levels {
        if l < 1 || l > n_bins {
            return Err(Error::Invariant(format!("grey levels must lie in 1..={n_bins}")));
        }
        counts[l as usize - 1] += 1;
    }
    let (mut entropy, mut uniformity) = (0.0, 0.0);
    for &c in counts.iter().filter(|&&c| c > 0) {
        let p = c as f64 / n;
        entropy -= p * p.log2();
        uniformity += p * p;
    }

    let values = [
        mean,
        m2,
        skew,
        kurt,
        v[0],
        v[v.len() - 1],
        percentile(&v, 50.0),
        percentile(&v, 10.0),
        percentile(&v, 90.0),
        percentile(&v, 75.0) - percentile(&v, 25.0),
        v[v.len() - 1] - v[0],
        v.iter().map(|x| (x - mean).abs()).sum::<f64>() / n,
        (energy / n).sqrt(),
        energy,
        entropy,
        uniformity,
    ];
    Ok(FeatureVector::from_pairs(FIRST_ORDER_NAMES.iter().zip(values).map(|(k, v)| (k.to_string(), v))))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::radiomics::discretize;

    #[test]
    fn z_scored_moments() {
        let raw = Array2::from_shape_fn((9, 11), |(i, j)| ((i * 31 + j * 17) % 23) as f64);
        let d = discretize(&raw, 32).unwrap();
        let f = first_order(&d.z, &d.levels, 32).unwrap();
        assert!(f.get("firstorder_mean").unwrap().abs() < 1e-9);
        assert!((f.get("firstorder_variance").unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn two_equal_levels() {
        let levels = Array2::from_shape_vec((2, 2), vec![1, 1, 5, 5]).unwrap();
        let values = Array2::from_shape_vec((2, 2), vec![-1.0, -1.0, 1.0, 1.0]).unwrap();
        let f = first_order(&values, &levels, 8).unwrap();
        assert_eq!(f.get("firstorder_entropy"), Some(1.0));
        assert_eq!(f.get("firstorder_uniformity"), Some(0.5));
    }

    #[test]
    fn percentile_interpolates() {
        let v = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(percentile(&v, 50.0), 2.5);
        assert!((percentile(&v, 10.0) - 1.3).abs() < 1e-12);
    }
}
