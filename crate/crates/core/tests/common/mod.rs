//! Brute-force texture reference: every matrix is built by enumerating
//! pixels or pixel pairs directly and every feature is evaluated from its
//! textbook sum, with no shared code with the library.
#![allow(dead_code)]

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_raster(seed: u64, size: usize, levels: u32) -> Array2<u32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_fn((size, size), |_| rng.random_range(1..=levels))
}

fn inside(r: &Array2<u32>, y: i64, x: i64) -> bool {
    y >= 0 && x >= 0 && (y as usize) < r.nrows() && (x as usize) < r.ncols()
}

const ANGLES: [(i64, i64); 4] = [(0, 1), (-1, 1), (-1, 0), (-1, -1)];

fn mean(v: &[Vec<f64>], f: usize) -> f64 {
    v.iter().map(|x| x[f]).sum::<f64>() / v.len() as f64
}

/// contrast, dissimilarity, homogeneity, ASM, entropy, correlation
pub fn glcm(r: &Array2<u32>, ng: usize) -> Vec<f64> {
    let mut per = Vec::new();
    for (dy, dx) in ANGLES {
        let mut p = vec![vec![0.0; ng + 1]; ng + 1];
        // Every ordered pair (a, b) with b − a = ±(dy, dx).
        for y1 in 0..r.nrows() as i64 {
            for x1 in 0..r.ncols() as i64 {
                for y2 in 0..r.nrows() as i64 {
                    for x2 in 0..r.ncols() as i64 {
                        let (ey, ex) = (y2 - y1, x2 - x1);
                        if (ey, ex) == (dy, dx) || (ey, ex) == (-dy, -dx) {
                            p[r[[y1 as usize, x1 as usize]] as usize][r[[y2 as usize, x2 as usize]] as usize] += 1.0;
                        }
                    }
                }
            }
        }
        let total: f64 = p.iter().flatten().sum();
        if total == 0.0 {
            continue;
        }
        p.iter_mut().flatten().for_each(|v| *v /= total);
        let mut mu = 0.0;
        for i in 1..=ng {
            for j in 1..=ng {
                mu += i as f64 * p[i][j];
            }
        }
        let mut sigma2 = 0.0;
        for i in 1..=ng {
            for j in 1..=ng {
                sigma2 += (i as f64 - mu).powi(2) * p[i][j];
            }
        }
        let mut f = vec![0.0; 6];
        for i in 1..=ng {
            for j in 1..=ng {
                let (pij, d) = (p[i][j], i as f64 - j as f64);
                f[0] += d * d * pij;
                f[1] += d.abs() * pij;
                f[2] += pij / (1.0 + d.abs());
                f[3] += pij * pij;
                if pij > 0.0 {
                    f[4] -= pij * pij.log2();
                }
                f[5] += (i as f64 - mu) * (j as f64 - mu) * pij;
            }
        }
        f[5] = if sigma2 > 1e-15 { f[5] / sigma2 } else { 1.0 };
        per.push(f);
    }
    (0..6).map(|f| mean(&per, f)).collect()
}

/// Emphasis features of a (level, size) → count table.
fn size_table(table: &BTreeMap<(usize, usize), f64>, n_pixels: f64) -> Vec<f64> {
    let total: f64 = table.values().sum();
    let mut by_level: BTreeMap<usize, f64> = BTreeMap::new();
    let mut by_size: BTreeMap<usize, f64> = BTreeMap::new();
    let (mut small, mut large) = (0.0, 0.0);
    for (&(g, s), &c) in table {
        small += c / (s * s) as f64;
        large += c * (s * s) as f64;
        *by_level.entry(g).or_default() += c;
        *by_size.entry(s).or_default() += c;
    }
    vec![
        small / total,
        large / total,
        by_size.values().map(|c| c * c).sum::<f64>() / total,
        by_level.values().map(|c| c * c).sum::<f64>() / total,
        total / n_pixels,
    ]
}

/// SRE, LRE, RLN, GLN, RP
pub fn glrlm(r: &Array2<u32>) -> Vec<f64> {
    let n = r.len() as f64;
    let mut per = Vec::new();
    for (dy, dx) in ANGLES {
        let mut table = BTreeMap::new();
        for y in 0..r.nrows() as i64 {
            for x in 0..r.ncols() as i64 {
                let g = r[[y as usize, x as usize]];
                let starts = !inside(r, y - dy, x - dx) || r[[(y - dy) as usize, (x - dx) as usize]] != g;
                if !starts {
                    continue;
                }
                let mut len = 0;
                let (mut cy, mut cx) = (y, x);
                while inside(r, cy, cx) && r[[cy as usize, cx as usize]] == g {
                    len += 1;
                    cy += dy;
                    cx += dx;
                }
                *table.entry((g as usize, len)).or_insert(0.0) += 1.0;
            }
        }
        per.push(size_table(&table, n));
    }
    (0..5).map(|f| mean(&per, f)).collect()
}

/// Zone labels by repeated label propagation until nothing changes.
fn zone_labels(r: &Array2<u32>) -> Array2<usize> {
    let (h, w) = r.dim();
    let mut lab = Array2::from_shape_fn((h, w), |(y, x)| y * w + x);
    loop {
        let mut changed = false;
        for y in 0..h as i64 {
            for x in 0..w as i64 {
                for dy in -1..=1 {
                    for dx in -1..=1 {
                        let (ny, nx) = (y + dy, x + dx);
                        if inside(r, ny, nx) && r[[ny as usize, nx as usize]] == r[[y as usize, x as usize]] {
                            let m = lab[[ny as usize, nx as usize]].min(lab[[y as usize, x as usize]]);
                            if lab[[y as usize, x as usize]] != m {
                                lab[[y as usize, x as usize]] = m;
                                changed = true;
                            }
                        }
                    }
                }
            }
        }
        if !changed {
            return lab;
        }
    }
}

/// SZE, LZE, SZN, GLN, ZP
pub fn glszm(r: &Array2<u32>) -> Vec<f64> {
    let lab = zone_labels(r);
    let mut zones: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for ((y, x), &l) in lab.indexed_iter() {
        let e = zones.entry(l).or_insert((r[[y, x]] as usize, 0));
        e.1 += 1;
    }
    let mut table = BTreeMap::new();
    for (g, s) in zones.into_values() {
        *table.entry((g, s)).or_insert(0.0) += 1.0;
    }
    size_table(&table, r.len() as f64)
}

fn neighbours(r: &Array2<u32>, y: usize, x: usize) -> Vec<u32> {
    let mut v = Vec::new();
    for dy in -1i64..=1 {
        for dx in -1i64..=1 {
            let (ny, nx) = (y as i64 + dy, x as i64 + dx);
            if (dy, dx) != (0, 0) && inside(r, ny, nx) {
                v.push(r[[ny as usize, nx as usize]]);
            }
        }
    }
    v
}

/// coarseness, contrast, busyness, complexity, strength
pub fn ngtdm(r: &Array2<u32>, ng: usize) -> Vec<f64> {
    let mut n = vec![0.0; ng + 1];
    let mut s = vec![0.0; ng + 1];
    for ((y, x), &g) in r.indexed_iter() {
        let nb = neighbours(r, y, x);
        if nb.is_empty() {
            continue;
        }
        let avg = nb.iter().map(|&v| v as f64).sum::<f64>() / nb.len() as f64;
        n[g as usize] += 1.0;
        s[g as usize] += (g as f64 - avg).abs();
    }
    let nv: f64 = n.iter().sum();
    let p: Vec<f64> = n.iter().map(|c| c / nv).collect();
    let levels: Vec<usize> = (1..=ng).filter(|&i| p[i] > 0.0).collect();
    let ngp = levels.len() as f64;
    let sum_ps: f64 = levels.iter().map(|&i| p[i] * s[i]).sum();
    let sum_s: f64 = levels.iter().map(|&i| s[i]).sum();
    let (mut con, mut bus, mut com, mut st) = (0.0, 0.0, 0.0, 0.0);
    for &i in &levels {
        for &j in &levels {
            let (fi, fj) = (i as f64, j as f64);
            con += p[i] * p[j] * (fi - fj).powi(2);
            bus += (fi * p[i] - fj * p[j]).abs();
            com += (fi - fj).abs() * (p[i] * s[i] + p[j] * s[j]) / (p[i] + p[j]);
            st += (p[i] + p[j]) * (fi - fj).powi(2);
        }
    }
    vec![
        if sum_ps > 0.0 { 1.0 / sum_ps } else { f64::NAN },
        if ngp > 1.0 { con / (ngp * (ngp - 1.0)) * sum_s / nv } else { 0.0 },
        if bus > 0.0 { sum_ps / bus } else { 0.0 },
        com / nv,
        if sum_s > 0.0 { st / sum_s } else { 0.0 },
    ]
}

/// SDE, LDE, DN, GLN, DE
pub fn gldm(r: &Array2<u32>) -> Vec<f64> {
    let mut table = BTreeMap::new();
    for ((y, x), &g) in r.indexed_iter() {
        let k = 1 + neighbours(r, y, x).iter().filter(|&&v| v == g).count();
        *table.entry((g as usize, k)).or_insert(0.0) += 1.0;
    }
    let total: f64 = table.values().sum();
    let mut f = size_table(&table, r.len() as f64);
    f[4] = -table.values().map(|c| (c / total) * (c / total).log2()).sum::<f64>();
    f
}

/// AUC by counting every positive/negative pair, ties scoring one half.
pub fn pairwise_auc(labels: &[bool], scores: &[f64]) -> f64 {
    let (mut credit, mut pairs) = (0.0, 0.0);
    for (i, &li) in labels.iter().enumerate() {
        for (j, &lj) in labels.iter().enumerate() {
            if li && !lj {
                pairs += 1.0;
                credit += if scores[i] > scores[j] {
                    1.0
                } else if scores[i] == scores[j] {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    credit / pairs
}
