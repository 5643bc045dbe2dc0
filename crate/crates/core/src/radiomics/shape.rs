//! Shape descriptors of the bone mask inside the ROI.
//!
//! The mask is the darker Otsu class (bone attenuates, so it has low DN).
//! The two largest 4-connected components are taken as femur and tibia and
//! ordered top to bottom. Perimeter and area for circularity come from a
//! sub-pixel marching-squares contour of each smoothed component.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::FeatureVector;

pub const SHAPE_NAMES: [&str; 7] = [
    "shape_area_fraction",
    "shape_perimeter_mm",
    "shape_circularity_1",
    "shape_circularity_2",
    "shape_elongation_1",
    "shape_elongation_2",
    "shape_gap_min_mm",
];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeParams {
    pub pixel_mm: f64,
    /// Otsu effectiveness (between-class over total variance) below which the
    /// histogram is treated as unimodal.
    pub min_effectiveness: f64,
}

/// Otsu threshold over a 256-bin histogram; returns the threshold (values
/// `<=` it form the lower class) and its effectiveness.
pub fn otsu(values: &[f64]) -> Option<(f64, f64)> {
    const BINS: usize = 256;
    let (lo, hi) = values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if values.is_empty() || !(hi > lo) {
        return None;
    }
    let width = (hi - lo) / BINS as f64;
    let mut hist = [0u64; BINS];
    let mut sums = [0.0; BINS];
    for &v in values {
        let b = (((v - lo) / width) as usize).min(BINS - 1);
        hist[b] += 1;
        sums[b] += v;
    }
    let n = values.len() as f64;
    let total: f64 = sums.iter().sum();
    let mean = total / n;
    let var_t = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let (mut w0, mut s0) = (0.0, 0.0);
    let mut best: Option<(f64, usize)> = None;
    for b in 0..BINS - 1 {
        w0 += hist[b] as f64;
        s0 += sums[b];
        let w1 = n - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let m0 = s0 / w0;
        let m1 = (total - s0) / w1;
        let between = w0 * w1 * (m0 - m1).powi(2) / (n * n);
        if best.is_none_or(|(v, _)| between > v) {
            best = Some((between, b));
        }
    }
    let (between, b) = best?;
    Some((lo + (b + 1) as f64 * width, if var_t > 0.0 { between / var_t } else { 0.0 }))
}

/// Two-threshold (three-class) Otsu on a 256-bin histogram. Returns the
/// lower and upper thresholds; values `<= lower` form the darkest class.
pub fn otsu_multi3(values: &[f64]) -> Option<(f64, f64)> {
    const BINS: usize = 256;
    let (lo, hi) = values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if values.is_empty() || !(hi > lo) {
        return None;
    }
    let width = (hi - lo) / BINS as f64;
    let mut w = [0.0; BINS + 1];
    let mut s = [0.0; BINS + 1];
    for &v in values {
        let b = (((v - lo) / width) as usize).min(BINS - 1);
        w[b + 1] += 1.0;
        s[b + 1] += v;
    }
    for b in 1..=BINS {
        w[b] += w[b - 1];
        s[b] += s[b - 1];
    }
    // Class over bins [a, b): weight and weighted squared mean.
    let term = |a: usize, b: usize| {
        let n = w[b] - w[a];
        if n > 0.0 { (s[b] - s[a]).powi(2) / n } else { 0.0 }
    };
    let mut best: Option<(f64, usize, usize)> = None;
    for i in 1..BINS - 1 {
        for j in i + 1..BINS {
            if w[i] == 0.0 || w[j] == w[i] || w[BINS] == w[j] {
                continue;
            }
            let score = term(0, i) + term(i, j) + term(j, BINS);
            if best.is_none_or(|(v, _, _)| score > v) {
                best = Some((score, i, j));
            }
        }
    }
    let (_, i, j) = best?;
    Some((lo + i as f64 * width, lo + j as f64 * width))
}

/// 4-connected components of `mask`, largest first (ties by first pixel).
pub fn components(mask: &Array2<bool>) -> Vec<Vec<(usize, usize)>> {
    let (h, w) = mask.dim();
    let mut seen = Array2::from_elem((h, w), false);
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if !mask[[y, x]] || seen[[y, x]] {
                continue;
            }
            let mut comp = Vec::new();
            let mut stack = vec![(y, x)];
            seen[[y, x]] = true;
            while let Some((cy, cx)) = stack.pop() {
                comp.push((cy, cx));
                let mut push = |ny: usize, nx: usize| {
                    if mask[[ny, nx]] && !seen[[ny, nx]] {
                        seen[[ny, nx]] = true;
                        stack.push((ny, nx));
                    }
                };
                if cy > 0 {
                    push(cy - 1, cx);
                }
                if cy + 1 < h {
                    push(cy + 1, cx);
                }
                if cx > 0 {
                    push(cy, cx - 1);
                }
                if cx + 1 < w {
                    push(cy, cx + 1);
                }
            }
            out.push(comp);
        }
    }
    out.sort_by(|a, b| b.len().cmp(&a.len()));
    out
}

/// Contour length and enclosed area (pixel units) of the `iso` level set of
/// `field`, by marching squares with linear interpolation along cell edges.
/// Values outside the raster count as zero. Saddle cells are split around
/// their inside corners.
pub fn contour_metrics(field: &Array2<f64>, iso: f64) -> (f64, f64) {
    let (h, w) = field.dim();
    let get = |y: isize, x: isize| {
        if y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w {
            field[[y as usize, x as usize]]
        } else {
            0.0
        }
    };
    let dist = |a: [f64; 2], b: [f64; 2]| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
    let shoelace = |p: &[[f64; 2]]| {
        let mut s = 0.0;
        for i in 0..p.len() {
            let (a, b) = (p[i], p[(i + 1) % p.len()]);
            s += a[0] * b[1] - b[0] * a[1];
        }
        s.abs() / 2.0
    };
    const CORNERS: [[f64; 2]; 4] = [[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]];
    let (mut perimeter, mut area) = (0.0, 0.0);
    for y in -1..h as isize {
        for x in -1..w as isize {
            let v = [get(y, x), get(y, x + 1), get(y + 1, x + 1), get(y + 1, x)];
            let inside = v.map(|a| a >= iso);
            let k = inside.iter().filter(|&&b| b).count();
            if k == 0 {
                continue;
            }
            if k == 4 {
                area += 1.0;
                continue;
            }
            // Crossing on edge i (corner i → i+1), if any.
            let cross = |i: usize| -> Option<[f64; 2]> {
                let j = (i + 1) % 4;
                (inside[i] != inside[j]).then(|| {
                    let t = (iso - v[i]) / (v[j] - v[i]);
                    [CORNERS[i][0] + t * (CORNERS[j][0] - CORNERS[i][0]), CORNERS[i][1] + t * (CORNERS[j][1] - CORNERS[i][1])]
                })
            };
            if k == 2 && inside[0] == inside[2] {
                for i in (0..4).filter(|&i| inside[i]) {
                    let a = cross((i + 3) % 4).expect("saddle edge crosses");
                    let b = cross(i).expect("saddle edge crosses");
                    perimeter += dist(a, b);
                    area += shoelace(&[a, CORNERS[i], b]);
                }
                continue;
            }
            let mut poly = Vec::with_capacity(6);
            let mut pts = Vec::with_capacity(2);
            for i in 0..4 {
                if inside[i] {
                    poly.push(CORNERS[i]);
                }
                if let Some(c) = cross(i) {
                    poly.push(c);
                    pts.push(c);
                }
            }
            perimeter += dist(pts[0], pts[1]);
            area += shoelace(&poly);
        }
    }
    (perimeter, area)
}

/// Perimeter and area of a binary mask from the 0.5 level set of the mask
/// smoothed with a unit Gaussian, which removes the staircase bias of a
/// pixel-edge contour.
pub fn mask_contour(mask: &Array2<bool>) -> (f64, f64) {
    const PAD: usize = 5;
    let (h, w) = mask.dim();
    let mut field = Array2::zeros((h + 2 * PAD, w + 2 * PAD));
    for ((y, x), &b) in mask.indexed_iter() {
        if b {
            field[[y + PAD, x + PAD]] = 1.0;
        }
    }
    contour_metrics(&crate::projector::gaussian_blur(&field, 1.0), 0.5)
}

/// `sqrt(λ_min / λ_max)` of the pixel-coordinate covariance.
pub fn elongation(pixels: &[(usize, usize)]) -> f64 {
    let n = pixels.len() as f64;
    let (my, mx) = pixels.iter().fold((0.0, 0.0), |(a, b), &(y, x)| (a + y as f64 / n, b + x as f64 / n));
    let (mut syy, mut sxx, mut sxy) = (0.0, 0.0, 0.0);
    for &(y, x) in pixels {
        let (dy, dx) = (y as f64 - my, x as f64 - mx);
        syy += dy * dy / n;
        sxx += dx * dx / n;
        sxy += dx * dy / n;
    }
    let tr = sxx + syy;
    let disc = ((sxx - syy).powi(2) + 4.0 * sxy * sxy).sqrt();
    let (l1, l2) = ((tr + disc) / 2.0, (tr - disc) / 2.0);
    if l1 > 0.0 {
        (l2.max(0.0) / l1).sqrt()
    } else {
        1.0
    }
}

/// Narrowest joint-space surrogate over the central third of columns: per
/// column the longest non-bone run with bone above and below; fully bone
/// columns count as zero. `None` if no column has such a run.
pub fn gap_min_px(mask: &Array2<bool>) -> Option<usize> {
    let (h, w) = mask.dim();
    let mut best: Option<usize> = None;
    for x in w / 3..(2 * w).div_ceil(3) {
        let col: Vec<bool> = (0..h).map(|y| mask[[y, x]]).collect();
        let gap = if col.iter().all(|&b| b) {
            Some(0)
        } else {
            let first = col.iter().position(|&b| b);
            let last = col.iter().rposition(|&b| b);
            match (first, last) {
                (Some(f), Some(l)) if l > f => {
                    let mut longest = 0;
                    let mut run = 0;
                    for &b in &col[f..=l] {
                        if b {
                            run = 0;
                        } else {
                            run += 1;
                            longest = longest.max(run);
                        }
                    }
                    (longest > 0).then_some(longest)
                }
                _ => None,
            }
        };
        if let Some(g) = gap {
            best = Some(best.map_or(g, |b| b.min(g)));
        }
    }
    best
}

fn missing() -> FeatureVector {
    FeatureVector::from_pairs(SHAPE_NAMES.iter().map(|n| (n.to_string(), f64::NAN)))
}

/// Shape features of a raw ROI; every column NaN when Otsu fails.
///
/// The ROI is smoothed (sigma 1 px) before thresholding. The two-class
/// effectiveness gates unimodal histograms; the mask itself is the darkest
/// class of a three-class Otsu split, since soft tissue, joint gap and bone
/// form three intensity populations and a two-class split lumps the gap in
/// with bone.
pub fn shape_features(roi: &Array2<f64>, params: &ShapeParams) -> FeatureVector {
    let smooth = crate::projector::gaussian_blur(roi, 1.0);
    let values: Vec<f64> = smooth.iter().copied().collect();
    let Some((_, eta)) = otsu(&values) else {
        return missing();
    };
    if eta < params.min_effectiveness {
        return missing();
    }
    let Some((threshold, _)) = otsu_multi3(&values) else {
        return missing();
    };
    let raw_mask = smooth.mapv(|v| v <= threshold);
    let comps = components(&raw_mask);
    if comps.is_empty() {
        return missing();
    }
    let mut parts: Vec<&Vec<(usize, usize)>> = comps.iter().take(2).collect();
    let centroid_y = |c: &Vec<(usize, usize)>| c.iter().map(|p| p.0 as f64).sum::<f64>() / c.len() as f64;
    parts.sort_by(|a, b| centroid_y(a).total_cmp(&centroid_y(b)));

    let (h, w) = roi.dim();
    let mut mask = Array2::from_elem((h, w), false);
    let mut perim = 0.0;
    let mut circ = [f64::NAN; 2];
    let mut elong = [f64::NAN; 2];
    let mut area = 0usize;
    for (i, c) in parts.iter().enumerate() {
        let mut m = Array2::from_elem((h, w), false);
        for &(y, x) in c.iter() {
            m[[y, x]] = true;
            mask[[y, x]] = true;
        }
        let (p, a) = mask_contour(&m);
        perim += p;
        area += c.len();
        circ[i] = if p > 0.0 { 4.0 * std::f64::consts::PI * a / (p * p) } else { f64::NAN };
        elong[i] = elongation(c);
    }
    let gap = gap_min_px(&mask).map_or(f64::NAN, |g| g as f64 * params.pixel_mm);
    let vals = [
        area as f64 / (h * w) as f64,
        perim * params.pixel_mm,
        circ[0],
        circ[1],
        elong[0],
        elong[1],
        gap,
    ];
    FeatureVector::from_pairs(SHAPE_NAMES.iter().zip(vals).map(|(n, v)| (n.to_string(), v)))
}

#[cfg(test)]
mod tests {
    use super::*;

    // Dark disk on a mid-grey background with a bright band along the top.
    fn disk(size: usize, r: f64) -> Array2<f64> {
        let c = (size as f64 - 1.0) / 2.0;
        Array2::from_shape_fn((size, size), |(y, x)| {
            if (x as f64 - c).powi(2) + (y as f64 - c).powi(2) <= r * r {
                100.0
            } else if y >= size / 8 {
                600.0
            } else {
                1100.0
            }
        })
    }

    const P: ShapeParams = ShapeParams { pixel_mm: 1.0, min_effectiveness: 0.5 };

    #[test]
    fn disk_area_and_circularity() {
        for r in [10.0, 20.0, 30.0] {
            let f = shape_features(&disk(96, r), &P);
            let af = f.get("shape_area_fraction").unwrap();
            let expect = std::f64::consts::PI * r * r / (96.0 * 96.0);
            assert!((af / expect - 1.0).abs() < 0.03, "{r}: {af} vs {expect}");
            let c = f.get("shape_circularity_1").unwrap();
            assert!((0.95..=1.0).contains(&c), "{r}: {c}");
            assert!((f.get("shape_elongation_1").unwrap() - 1.0).abs() < 0.01);
        }
    }

    #[test]
    fn full_bone_gap_is_zero() {
        let mut m = Array2::from_elem((30, 30), true);
        assert_eq!(gap_min_px(&m), Some(0));
        for x in 0..30 {
            for y in 12..16 {
                m[[y, x]] = false;
            }
        }
        assert_eq!(gap_min_px(&m), Some(4));
    }

    #[test]
    fn two_slabs() {
        // Dark femur and tibia slabs separated by a 6 px gap, bright band at the top.
        let roi = Array2::from_shape_fn((60, 60), |(y, _)| {
            if y < 4 {
                900.0
            } else if (10..50).contains(&y) && !(27..33).contains(&y) {
                100.0
            } else {
                500.0
            }
        });
        let f = shape_features(&roi, &ShapeParams { pixel_mm: 0.5, min_effectiveness: 0.5 });
        assert_eq!(f.get("shape_gap_min_mm"), Some(3.0));
        assert!((f.get("shape_area_fraction").unwrap() - 34.0 * 60.0 / 3600.0).abs() < 1e-12);
        assert!(f.get("shape_elongation_1").unwrap() < 0.5);
    }

    #[test]
    fn unimodal_fails() {
        use rand_distr::{Distribution, Normal};
        let mut rng = crate::seed::rng(5);
        let normal = Normal::new(1000.0, 50.0).unwrap();
        let noise = Array2::from_shape_fn((64, 64), |_| normal.sample(&mut rng));
        // Gaussian histogram: two-class effectiveness 2/pi.
        let f = shape_features(&noise, &ShapeParams { pixel_mm: 1.0, min_effectiveness: 0.7 });
        assert!(f.values().iter().all(|v| v.is_nan()));
        assert!(shape_features(&Array2::from_elem((4, 4), 1.0), &P).values().iter().all(|v| v.is_nan()));
    }

    #[test]
    fn contour_of_binary_square() {
        // Unsmoothed: iso 0.5 crosses cell edges at midpoints, cutting corners.
        let mut m = Array2::zeros((6, 6));
        m.slice_mut(ndarray::s![1..5, 1..5]).fill(1.0);
        let (p, a) = contour_metrics(&m, 0.5);
        assert!((p - (4.0 * 3.0 + 4.0 * std::f64::consts::SQRT_2 / 2.0)).abs() < 1e-12);
        assert!((a - (16.0 - 4.0 * 0.125)).abs() < 1e-12);
    }

    #[test]
    fn saddle_cells_split() {
        let m = ndarray::array![[1.0, 0.0], [0.0, 1.0]];
        let (p, a) = contour_metrics(&m, 0.5);
        // Two isolated pixels: two diamonds of area 0.5.
        assert!((a - 1.0).abs() < 1e-12);
        assert!((p - 4.0 * std::f64::consts::SQRT_2).abs() < 1e-12);
    }
}
