//! Texture matrices on discretized grey levels and their features.
//!
//! GLCM and GLRLM are computed per direction (0°, 45°, 90°, 135°) and the
//! features are averaged across directions. GLSZM zones are 8-connected;
//! NGTDM and GLDM use the Chebyshev-1 neighbourhood restricted to the ROI,
//! and GLDM counts neighbours with identical level (α = 0).

use ndarray::Array2;

use super::FeatureVector;
use crate::error::{Error, Result};

/// `(dy, dx)` offsets for 0°, 45°, 90° and 135°.
pub const DIRECTIONS: [(isize, isize); 4] = [(0, 1), (-1, 1), (-1, 0), (-1, -1)];

const NEIGHBOURS: [(isize, isize); 8] = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)];

fn check_levels(levels: &Array2<u32>, n_bins: u32) -> Result<()> {
    if levels.is_empty() {
        return Err(Error::Shape("empty ROI".into()));
    }
    if levels.iter().any(|&l| l < 1 || l > n_bins) {
        return Err(Error::Invariant(format!("grey levels must lie in 1..={n_bins}")));
    }
    Ok(())
}

fn at(levels: &Array2<u32>, y: isize, x: isize) -> Option<u32> {
    let (h, w) = levels.dim();
    (y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w).then(|| levels[[y as usize, x as usize]])
}

fn plog2(p: f64) -> f64 {
    if p > 0.0 {
        p * p.log2()
    } else {
        0.0
    }
}

/// Symmetric co-occurrence counts for one offset, `n × n`, levels 1-based.
pub fn glcm_counts(levels: &Array2<u32>, n_bins: u32, (dy, dx): (isize, isize)) -> Vec<Vec<u64>> {
    let n = n_bins as usize;
    let mut m = vec![vec![0u64; n]; n];
    for ((y, x), &a) in levels.indexed_iter() {
        if let Some(b) = at(levels, y as isize + dy, x as isize + dx) {
            m[a as usize - 1][b as usize - 1] += 1;
            m[b as usize - 1][a as usize - 1] += 1;
        }
    }
    m
}

pub const GLCM_NAMES: [&str; 6] = ["glcm_contrast", "glcm_dissimilarity", "glcm_homogeneity", "glcm_asm", "glcm_entropy", "glcm_correlation"];

/// Features of one normalized symmetric GLCM; `None` for an empty matrix.
pub fn glcm_from_counts(m: &[Vec<u64>]) -> Option<[f64; 6]> {
    let total: u64 = m.iter().flatten().sum();
    if total == 0 {
        return None;
    }
    let t = total as f64;
    let n = m.len();
    let mut mu = 0.0;
    for (i, row) in m.iter().enumerate() {
        let pi: u64 = row.iter().sum();
        mu += (i + 1) as f64 * pi as f64 / t;
    }
    let (mut con, mut dis, mut hom, mut asm, mut ent, mut cov, mut var) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
    for i in 0..n {
        for j in 0..n {
            let c = m[i][j];
            if c == 0 {
                continue;
            }
            let p = c as f64 / t;
            let d = i as f64 - j as f64;
            con += d * d * p;
            dis += d.abs() * p;
            hom += p / (1.0 + d.abs());
            asm += p * p;
            ent -= plog2(p);
            cov += ((i + 1) as f64 - mu) * ((j + 1) as f64 - mu) * p;
            var += ((i + 1) as f64 - mu).powi(2) * p;
        }
    }
    let corr = if var > 1e-15 { cov / var } else { 1.0 };
    Some([con, dis, hom, asm, ent, corr])
}

fn average(per_dir: Vec<Vec<f64>>, names: &[&str]) -> Result<FeatureVector> {
    if per_dir.is_empty() {
        return Err(Error::Shape("no direction has any voxel pairs".into()));
    }
    let k = per_dir.len() as f64;
    Ok(FeatureVector::from_pairs(
        names.iter().enumerate().map(|(f, name)| (name.to_string(), per_dir.iter().map(|v| v[f]).sum::<f64>() / k)),
    ))
}

pub fn glcm_features(levels: &Array2<u32>, n_bins: u32) -> Result<FeatureVector> {
    check_levels(levels, n_bins)?;
    let per_dir: Vec<Vec<f64>> = DIRECTIONS
        .iter()
        .filter_map(|&d| glcm_from_counts(&glcm_counts(levels, n_bins, d)).map(|f| f.to_vec()))
        .collect();
    average(per_dir, &GLCM_NAMES)
}

/// Run-length counts `R[level − 1][length − 1]` along one direction.
pub fn glrlm_counts(levels: &Array2<u32>, n_bins: u32, (dy, dx): (isize, isize)) -> Vec<Vec<u64>> {
    let (h, w) = levels.dim();
    let mut r = vec![vec![0u64; h.max(w)]; n_bins as usize];
    for ((y, x), &a) in levels.indexed_iter() {
        // Only start a run where the previous pixel along the direction differs.
        if at(levels, y as isize - dy, x as isize - dx) == Some(a) {
            continue;
        }
        let mut len = 1;
        let (mut yy, mut xx) = (y as isize + dy, x as isize + dx);
        while at(levels, yy, xx) == Some(a) {
            len += 1;
            yy += dy;
            xx += dx;
        }
        r[a as usize - 1][len - 1] += 1;
    }
    r
}

pub const GLRLM_NAMES: [&str; 5] = ["glrlm_sre", "glrlm_lre", "glrlm_rln", "glrlm_gln", "glrlm_rp"];

/// Emphasis / non-uniformity features shared by GLRLM, GLSZM and GLDM:
/// `[small emphasis, large emphasis, size non-uniformity, grey non-uniformity, count / n_pixels]`.
pub fn size_matrix_features(m: &[Vec<u64>], n_pixels: usize) -> [f64; 5] {
    let total: u64 = m.iter().flatten().sum();
    let t = total as f64;
    let (mut small, mut large) = (0.0, 0.0);
    let width = m.iter().map(Vec::len).max().unwrap_or(0);
    let mut by_size = vec![0u64; width];
    let mut gln = 0.0;
    for row in m {
        let mut by_level = 0u64;
        for (l, &c) in row.iter().enumerate() {
            if c == 0 {
                continue;
            }
            let s = (l + 1) as f64;
            small += c as f64 / (s * s);
            large += c as f64 * s * s;
            by_size[l] += c;
            by_level += c;
        }
        gln += (by_level as f64).powi(2);
    }
    let sn: f64 = by_size.iter().map(|&c| (c as f64).powi(2)).sum();
    [small / t, large / t, sn / t, gln / t, t / n_pixels as f64]
}

pub fn glrlm_features(levels: &Array2<u32>, n_bins: u32) -> Result<FeatureVector> {
    check_levels(levels, n_bins)?;
    let n = levels.len();
    let per_dir = DIRECTIONS.iter().map(|&d| size_matrix_features(&glrlm_counts(levels, n_bins, d), n).to_vec()).collect();
    average(per_dir, &GLRLM_NAMES)
}

/// 8-connected equal-level zones as `(level, size)`, in first-pixel raster order.
pub fn zones(levels: &Array2<u32>) -> Vec<(u32, usize)> {
    let (h, w) = levels.dim();
    let mut seen = Array2::from_elem((h, w), false);
    let mut out = Vec::new();
    let mut stack = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if seen[[y, x]] {
                continue;
            }
            let a = levels[[y, x]];
            seen[[y, x]] = true;
            stack.push((y, x));
            let mut size = 0;
            while let Some((cy, cx)) = stack.pop() {
                size += 1;
                for (dy, dx) in NEIGHBOURS {
                    let (ny, nx) = (cy as isize + dy, cx as isize + dx);
                    if at(levels, ny, nx) == Some(a) && !seen[[ny as usize, nx as usize]] {
                        seen[[ny as usize, nx as usize]] = true;
                        stack.push((ny as usize, nx as usize));
                    }
                }
            }
            out.push((a, size));
        }
    }
    out
}

/// Size-zone counts `Z[level − 1][size − 1]`.
pub fn glszm_counts(levels: &Array2<u32>, n_bins: u32) -> Vec<Vec<u64>> {
    let mut z = vec![vec![0u64; levels.len()]; n_bins as usize];
    for (a, s) in zones(levels) {
        z[a as usize - 1][s - 1] += 1;
    }
    z
}

pub const GLSZM_NAMES: [&str; 5] = ["glszm_sze", "glszm_lze", "glszm_szn", "glszm_gln", "glszm_zp"];

pub fn glszm_features(levels: &Array2<u32>, n_bins: u32) -> Result<FeatureVector> {
    check_levels(levels, n_bins)?;
    let f = size_matrix_features(&glszm_counts(levels, n_bins), levels.len());
    Ok(FeatureVector::from_pairs(GLSZM_NAMES.iter().zip(f).map(|(n, v)| (n.to_string(), v))))
}

fn require_neighbourhood(levels: &Array2<u32>) -> Result<()> {
    if levels.len() < 2 {
        return Err(Error::Shape("neighbourhood undefined for a single-pixel ROI".into()));
    }
    Ok(())
}

/// NGTDM columns per level: `(n_i, s_i)` and the number of pixels with a
/// non-empty neighbourhood.
pub fn ngtdm_table(levels: &Array2<u32>, n_bins: u32) -> (Vec<u64>, Vec<f64>, u64) {
    let nb = n_bins as usize;
    let mut n = vec![0u64; nb];
    let mut s = vec![0.0; nb];
    let mut nvp = 0;
    for ((y, x), &a) in levels.indexed_iter() {
        let (mut sum, mut cnt) = (0u64, 0u64);
        for (dy, dx) in NEIGHBOURS {
            if let Some(b) = at(levels, y as isize + dy, x as isize + dx) {
                sum += b as u64;
                cnt += 1;
            }
        }
        if cnt == 0 {
            continue;
        }
        nvp += 1;
        n[a as usize - 1] += 1;
        s[a as usize - 1] += (a as f64 - sum as f64 / cnt as f64).abs();
    }
    (n, s, nvp)
}

pub const NGTDM_NAMES: [&str; 5] = ["ngtdm_coarseness", "ngtdm_contrast", "ngtdm_busyness", "ngtdm_complexity", "ngtdm_strength"];

/// Coarseness when the grey-tone differences all vanish.
pub const COARSENESS_MAX: f64 = 1e6;

pub fn ngtdm_from_table(n: &[u64], s: &[f64], nvp: u64) -> [f64; 5] {
    let nv = nvp as f64;
    let present: Vec<(f64, f64, f64)> = n
        .iter()
        .zip(s)
        .enumerate()
        .filter(|(_, (&c, _))| c > 0)
        .map(|(i, (&c, &si))| ((i + 1) as f64, c as f64 / nv, si))
        .collect();
    let ngp = present.len() as f64;
    let ps: f64 = present.iter().map(|&(_, p, si)| p * si).sum();
    let s_total: f64 = present.iter().map(|&(_, _, si)| si).sum();
    let coarseness = if ps > 0.0 { 1.0 / ps } else { COARSENESS_MAX };
    let (mut c2, mut busy_den, mut complexity, mut strength_num) = (0.0, 0.0, 0.0, 0.0);
    for &(i, pi, si) in &present {
        for &(j, pj, sj) in &present {
            c2 += pi * pj * (i - j).powi(2);
            busy_den += (i * pi - j * pj).abs();
            complexity += (i - j).abs() * (pi * si + pj * sj) / (pi + pj);
            strength_num += (pi + pj) * (i - j).powi(2);
        }
    }
    let contrast = if ngp > 1.0 { c2 / (ngp * (ngp - 1.0)) * s_total / nv } else { 0.0 };
    let busyness = if busy_den > 0.0 { ps / busy_den } else { 0.0 };
    let strength = if s_total > 0.0 { strength_num / s_total } else { 0.0 };
    [coarseness, contrast, busyness, complexity / nv, strength]
}

pub fn ngtdm_features(levels: &Array2<u32>, n_bins: u32) -> Result<FeatureVector> {
    check_levels(levels, n_bins)?;
    require_neighbourhood(levels)?;
    let (n, s, nvp) = ngtdm_table(levels, n_bins);
    let f = ngtdm_from_table(&n, &s, nvp);
    Ok(FeatureVector::from_pairs(NGTDM_NAMES.iter().zip(f).map(|(n, v)| (n.to_string(), v))))
}

/// Dependence counts `D[level − 1][k − 1]`, `k = 1 + equal-level neighbours`.
pub fn gldm_counts(levels: &Array2<u32>, n_bins: u32) -> Vec<Vec<u64>> {
    let mut d = vec![vec![0u64; NEIGHBOURS.len() + 1]; n_bins as usize];
    for ((y, x), &a) in levels.indexed_iter() {
        let k = NEIGHBOURS.iter().filter(|&&(dy, dx)| at(levels, y as isize + dy, x as isize + dx) == Some(a)).count();
        d[a as usize - 1][k] += 1;
    }
    d
}

pub const GLDM_NAMES: [&str; 5] = ["gldm_sde", "gldm_lde", "gldm_dn", "gldm_gln", "gldm_de"];

pub fn gldm_features(levels: &Array2<u32>, n_bins: u32) -> Result<FeatureVector> {
    check_levels(levels, n_bins)?;
    require_neighbourhood(levels)?;
    let d = gldm_counts(levels, n_bins);
    let [sde, lde, dn, gln, _] = size_matrix_features(&d, levels.len());
    let t = levels.len() as f64;
    let de = -d.iter().flatten().map(|&c| plog2(c as f64 / t)).sum::<f64>();
    Ok(FeatureVector::from_pairs(GLDM_NAMES.iter().zip([sde, lde, dn, gln, de]).map(|(n, v)| (n.to_string(), v))))
}
