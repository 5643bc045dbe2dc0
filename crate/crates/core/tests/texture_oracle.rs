mod common;

use ndarray::{arr2, Array2};
use pssf_core::radiomics::texture::{COARSENESS_MAX, GLCM_NAMES, GLDM_NAMES, GLRLM_NAMES, GLSZM_NAMES, NGTDM_NAMES};
use pssf_core::radiomics::{gldm_features, glcm_features, glrlm_features, glszm_features, ngtdm_features, FeatureVector};

fn compare(label: &str, got: &FeatureVector, names: &[&str], want: &[f64]) {
    for (name, w) in names.iter().zip(want) {
        let g = got.get(name).unwrap();
        assert!((g - w).abs() <= 1e-9 * w.abs().max(1.0), "{label} {name}: got {g}, oracle {w}");
    }
}

fn check_all(label: &str, r: &Array2<u32>, ng: u32) {
    compare(label, &glcm_features(r, ng).unwrap(), &GLCM_NAMES, &common::glcm(r, ng as usize));
    compare(label, &glrlm_features(r, ng).unwrap(), &GLRLM_NAMES, &common::glrlm(r));
    compare(label, &glszm_features(r, ng).unwrap(), &GLSZM_NAMES, &common::glszm(r));
    compare(label, &ngtdm_features(r, ng).unwrap(), &NGTDM_NAMES, &common::ngtdm(r, ng as usize));
    compare(label, &gldm_features(r, ng).unwrap(), &GLDM_NAMES, &common::gldm(r));
}

#[test]
fn fifty_random_rasters_match_brute_force() {
    for seed in 0..50 {
        check_all(&format!("raster {seed}"), &common::random_raster(seed, 8, 4), 4);
    }
}

#[test]
fn mixed_four_by_four_fixture() {
    let r = arr2(&[[1, 1, 2, 3], [1, 2, 2, 3], [4, 4, 2, 1], [4, 3, 3, 1]]);
    check_all("fixture", &r, 4);
}

#[test]
fn sparse_levels_match_brute_force() {
    // Levels 2 and 5 of 6 only, so absent grey levels appear in every table.
    let r = common::random_raster(99, 8, 2).mapv(|v| if v == 1 { 2 } else { 5 });
    check_all("sparse", &r, 6);
}

#[test]
fn constant_raster_degenerate_values() {
    let r = Array2::from_elem((6, 6), 3u32);
    let g = glcm_features(&r, 4).unwrap();
    assert_eq!(g.get("glcm_contrast"), Some(0.0));
    assert_eq!(g.get("glcm_dissimilarity"), Some(0.0));
    assert_eq!(g.get("glcm_homogeneity"), Some(1.0));
    assert_eq!(g.get("glcm_asm"), Some(1.0));
    assert_eq!(g.get("glcm_entropy"), Some(0.0));
    assert_eq!(g.get("glcm_correlation"), Some(1.0));
    let z = glszm_features(&r, 4).unwrap();
    assert_eq!(z.get("glszm_zp"), Some(1.0 / 36.0));
    assert_eq!(z.get("glszm_lze"), Some(36.0 * 36.0));
    let n = ngtdm_features(&r, 4).unwrap();
    assert_eq!(n.get("ngtdm_coarseness"), Some(COARSENESS_MAX));
    assert_eq!(n.get("ngtdm_contrast"), Some(0.0));
}

#[test]
fn checkerboard_horizontal_contrast() {
    let r = Array2::from_shape_fn((4, 4), |(y, x)| 1 + ((y + x) % 2) as u32);
    let m = pssf_core::radiomics::texture::glcm_counts(&r, 2, (0, 1));
    let f = pssf_core::radiomics::texture::glcm_from_counts(&m).unwrap();
    assert_eq!(m, vec![vec![0, 12], vec![12, 0]]);
    assert_eq!((f[0], f[2]), (1.0, 0.5));
}
