use ndarray::arr2;
use pssf_core::radiomics::first_order;

// Hand sheet for the sorted values -3, -1 x3, 0 x8, 1 x3, 3:
//   sum 0, sum of squares 24, sum of cubes 0, sum of fourth powers 168
//   variance 24/16 = 1.5, kurtosis (168/16)/1.5^2 - 3 = 5/3
//   percentiles by linear interpolation on positions q/100 * 15:
//     p10 at 1.5 -> -1, p25 at 3.75 -> -0.25, p50 at 7.5 -> 0,
//     p75 at 11.25 -> 0.25, p90 at 13.5 -> 1
//   mean absolute deviation 12/16 = 0.75
//   level counts 4, 8, 2, 2 -> entropy 0.5*1 + 0.25*2 + 2*0.125*3 = 1.75 bits,
//   uniformity 0.25 + 0.0625 + 2*0.015625 = 0.34375
#[test]
fn hand_fixture_all_sixteen() {
    let values = arr2(&[[-3.0, 0.0, 1.0, 0.0], [-1.0, 0.0, 0.0, 1.0], [0.0, -1.0, 3.0, 0.0], [-1.0, 0.0, 1.0, 0.0]]);
    let levels = arr2(&[[1, 2, 3, 2], [1, 2, 2, 3], [2, 1, 4, 2], [1, 2, 4, 2]]);
    let f = first_order(&values, &levels, 4).unwrap();
    let want = [
        ("firstorder_mean", 0.0),
        ("firstorder_variance", 1.5),
        ("firstorder_skewness", 0.0),
        ("firstorder_kurtosis", 5.0 / 3.0),
        ("firstorder_minimum", -3.0),
        ("firstorder_maximum", 3.0),
        ("firstorder_median", 0.0),
        ("firstorder_p10", -1.0),
        ("firstorder_p90", 1.0),
        ("firstorder_iqr", 0.5),
        ("firstorder_range", 6.0),
        ("firstorder_mad", 0.75),
        ("firstorder_rms", 1.5f64.sqrt()),
        ("firstorder_energy", 24.0),
        ("firstorder_entropy", 1.75),
        ("firstorder_uniformity", 0.34375),
    ];
    assert_eq!(f.len(), want.len());
    for (name, w) in want {
        let g = f.get(name).unwrap();
        assert!((g - w).abs() < 1e-9, "{name}: {g} vs {w}");
    }
}

#[test]
fn two_equal_levels() {
    let values = arr2(&[[-1.0, 1.0], [1.0, -1.0]]);
    let levels = arr2(&[[1, 2], [2, 1]]);
    let f = first_order(&values, &levels, 2).unwrap();
    assert_eq!(f.get("firstorder_entropy"), Some(1.0));
    assert_eq!(f.get("firstorder_uniformity"), Some(0.5));
}
