//! ROI localization, preprocessing, the seven feature families, the feature
//! matrix and correlation pruning.

mod first_order;
mod roi;
mod shape;
pub mod texture;

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

pub use first_order::{first_order, percentile, FIRST_ORDER_NAMES};
pub use roi::{canonical_knee, discretize, locate_roi, preprocess, DiscretizedRoi, LocateParams, RoiBox, RoiMethod, RoiTemplate};
pub use shape::{components, contour_metrics, elongation, mask_contour, gap_min_px, otsu, otsu_multi3, shape_features, ShapeParams, SHAPE_NAMES};
pub use texture::{gldm_features, glcm_features, glrlm_features, glszm_features, ngtdm_features};

use crate::cli_io::file_sha256;
use crate::cohort::{write_atomic, CohortManifest};
use crate::error::{Error, Result};
use crate::par;
use crate::phantom::Side;
use crate::projector::{read_png, Radiograph, ResolutionProfile};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    FirstOrder,
    Shape,
    Glcm,
    Glrlm,
    Glszm,
    Ngtdm,
    Gldm,
}

impl Family {
    pub const ALL: [Family; 7] = [Family::FirstOrder, Family::Shape, Family::Glcm, Family::Glrlm, Family::Glszm, Family::Ngtdm, Family::Gldm];

    pub fn as_str(self) -> &'static str {
        match self {
            Family::FirstOrder => "first_order",
            Family::Shape => "shape",
            Family::Glcm => "glcm",
            Family::Glrlm => "glrlm",
            Family::Glszm => "glszm",
            Family::Ngtdm => "ngtdm",
            Family::Gldm => "gldm",
        }
    }

    pub fn names(self) -> &'static [&'static str] {
        match self {
            Family::FirstOrder => &FIRST_ORDER_NAMES,
            Family::Shape => &SHAPE_NAMES,
            Family::Glcm => &texture::GLCM_NAMES,
            Family::Glrlm => &texture::GLRLM_NAMES,
            Family::Glszm => &texture::GLSZM_NAMES,
            Family::Ngtdm => &texture::NGTDM_NAMES,
            Family::Gldm => &texture::GLDM_NAMES,
        }
    }

    /// Family of a column name, from its prefix.
    pub fn of(name: &str) -> Option<Family> {
        Family::ALL.into_iter().find(|f| f.names().contains(&name))
    }
}

/// All feature names in matrix column order.
pub fn feature_names() -> Vec<&'static str> {
    Family::ALL.iter().flat_map(|f| f.names().iter().copied()).collect()
}

/// Ordered `(name, value)` pairs.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FeatureVector(Vec<(String, f64)>);

impl FeatureVector {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, f64)>) -> Self {
        FeatureVector(pairs.into_iter().collect())
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.0.iter().find(|(n, _)| n == name).map(|p| p.1)
    }

    pub fn names(&self) -> Vec<&str> {
        self.0.iter().map(|p| p.0.as_str()).collect()
    }

    pub fn values(&self) -> Vec<f64> {
        self.0.iter().map(|p| p.1).collect()
    }

    pub fn extend(&mut self, other: FeatureVector) {
        self.0.extend(other.0);
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RadiomicsConfig {
    pub n_bins: u32,
    pub roi_px: usize,
    pub template_px: usize,
    pub search_radius_px: usize,
    pub min_localization_score: f64,
    pub pixel_mm: f64,
    pub otsu_min_effectiveness: f64,
    /// Columns missing in more than this fraction of rows are dropped.
    pub max_missing_fraction: f64,
    /// Extraction aborts when more than this fraction of rows fail.
    pub max_failed_fraction: f64,
    pub prune_threshold: f64,
    pub template_path: Option<PathBuf>,
}

impl RadiomicsConfig {
    pub fn for_profile(profile: &ResolutionProfile) -> Self {
        RadiomicsConfig {
            n_bins: 32,
            roi_px: profile.roi_px,
            template_px: profile.roi_px / 2,
            search_radius_px: profile.roi_px,
            min_localization_score: 0.3,
            pixel_mm: profile.pixel_mm,
            otsu_min_effectiveness: 0.7,
            max_missing_fraction: 0.05,
            max_failed_fraction: 0.02,
            prune_threshold: 0.9,
            template_path: None,
        }
    }

    pub fn locate_params(&self) -> LocateParams {
        LocateParams { roi_px: self.roi_px, search_radius_px: self.search_radius_px, min_score: self.min_localization_score }
    }

    pub fn shape_params(&self) -> ShapeParams {
        ShapeParams { pixel_mm: self.pixel_mm, min_effectiveness: self.otsu_min_effectiveness }
    }
}

/// Every family on one ROI, in column order.
pub fn roi_features(raw: &Array2<f64>, cfg: &RadiomicsConfig) -> Result<FeatureVector> {
    let d = discretize(raw, cfg.n_bins)?;
    let mut f = first_order(&d.z, &d.levels, cfg.n_bins)?;
    f.extend(shape_features(raw, &cfg.shape_params()));
    f.extend(glcm_features(&d.levels, cfg.n_bins)?);
    f.extend(glrlm_features(&d.levels, cfg.n_bins)?);
    f.extend(glszm_features(&d.levels, cfg.n_bins)?);
    f.extend(ngtdm_features(&d.levels, cfg.n_bins)?);
    f.extend(gldm_features(&d.levels, cfg.n_bins)?);
    Ok(f)
}

/// Locate the ROI on `image` and compute every feature.
pub fn extract_features(image: &Radiograph, side: Side, template: &RoiTemplate, cfg: &RadiomicsConfig) -> Result<(FeatureVector, RoiBox)> {
    let b = locate_roi(image, template.for_side(side), &cfg.locate_params())?;
    let raw = b.crop(&image.pixels)?;
    Ok((roi_features(&raw, cfg)?, b))
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RowKey {
    pub knee_id: String,
    pub protocol: String,
    pub repeat: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    pub keys: Vec<RowKey>,
    pub columns: Vec<String>,
    pub values: Vec<Vec<f64>>,
}

impl FeatureMatrix {
    pub fn n_rows(&self) -> usize {
        self.keys.len()
    }

    pub fn families(&self) -> Vec<Option<Family>> {
        self.columns.iter().map(|c| Family::of(c)).collect()
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.values.iter().map(|r| r[j]).collect()
    }

    pub fn row_index(&self) -> HashMap<&RowKey, usize> {
        self.keys.iter().enumerate().map(|(i, k)| (k, i)).collect()
    }

    pub fn select_rows(&self, rows: &[usize]) -> FeatureMatrix {
        FeatureMatrix {
            keys: rows.iter().map(|&i| self.keys[i].clone()).collect(),
            columns: self.columns.clone(),
            values: rows.iter().map(|&i| self.values[i].clone()).collect(),
        }
    }

    /// Keep `names`, in that order.
    pub fn select_columns(&self, names: &[String]) -> Result<FeatureMatrix> {
        let idx = names
            .iter()
            .map(|n| self.column_index(n).ok_or_else(|| Error::Schema(format!("column {n:?} not in matrix"))))
            .collect::<Result<Vec<_>>>()?;
        Ok(FeatureMatrix {
            keys: self.keys.clone(),
            columns: names.to_vec(),
            values: self.values.iter().map(|r| idx.iter().map(|&j| r[j]).collect()).collect(),
        })
    }

    /// Rows in key order.
    pub fn sorted(&self) -> FeatureMatrix {
        let mut order: Vec<usize> = (0..self.n_rows()).collect();
        order.sort_by(|&a, &b| self.keys[a].cmp(&self.keys[b]));
        self.select_rows(&order)
    }

    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["knee_id".to_string(), "protocol".into(), "repeat".into()];
        header.extend(self.columns.iter().cloned());
        w.write_record(&header).map_err(csv_err)?;
        for (k, row) in self.keys.iter().zip(&self.values) {
            let mut rec = vec![k.knee_id.clone(), k.protocol.clone(), k.repeat.to_string()];
            rec.extend(row.iter().map(|v| fmt_f64(*v)));
            w.write_record(&rec).map_err(csv_err)?;
        }
        w.into_inner().map_err(|e| Error::Data(e.to_string()))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_csv()?)
    }

    pub fn read_csv(path: &Path) -> Result<FeatureMatrix> {
        let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
        let header = r.headers().map_err(csv_err)?.clone();
        if header.len() < 3 || &header[0] != "knee_id" || &header[1] != "protocol" || &header[2] != "repeat" {
            return Err(Error::Schema(format!("{}: missing key columns", path.display())));
        }
        let columns: Vec<String> = header.iter().skip(3).map(str::to_string).collect();
        let mut keys = Vec::new();
        let mut values = Vec::new();
        for rec in r.records() {
            let rec = rec.map_err(csv_err)?;
            let parse = |s: &str| s.parse::<f64>().map_err(|e| Error::Schema(format!("{}: {s:?}: {e}", path.display())));
            keys.push(RowKey {
                knee_id: rec[0].to_string(),
                protocol: rec[1].to_string(),
                repeat: rec[2].parse().map_err(|_| Error::Schema(format!("bad repeat {:?}", &rec[2])))?,
            });
            values.push(rec.iter().skip(3).map(parse).collect::<Result<Vec<f64>>>()?);
        }
        Ok(FeatureMatrix { keys, columns, values })
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Data(format!("csv: {e}"))
}

/// Shortest round-trip decimal form; stable across runs.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

/// One image to extract.
#[derive(Clone, Debug)]
pub struct ImageJob {
    pub key: RowKey,
    pub side: Side,
    pub path: PathBuf,
    /// When present the file must match before it is read.
    pub checksum: Option<String>,
    pub joint_center_px: [f64; 2],
}

pub fn jobs_from_manifest(manifest: &CohortManifest, out_dir: &Path) -> Vec<ImageJob> {
    manifest
        .records
        .iter()
        .map(|r| ImageJob {
            key: RowKey { knee_id: r.knee_id.clone(), protocol: r.protocol_name.clone(), repeat: 0 },
            side: r.side,
            path: out_dir.join(&r.image_path),
            checksum: r.checksum.clone(),
            joint_center_px: r.joint_center_px.unwrap_or([f64::NAN; 2]),
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RowFailure {
    pub knee_id: String,
    pub protocol: String,
    pub repeat: u32,
    pub path: PathBuf,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DroppedColumn {
    pub name: String,
    pub reason: String,
}

#[derive(Clone, Debug)]
pub struct Extraction {
    pub matrix: FeatureMatrix,
    pub rois: Vec<RoiBox>,
    pub failures: Vec<RowFailure>,
    pub dropped_columns: Vec<DroppedColumn>,
}

fn load_job(job: &ImageJob) -> Result<Radiograph> {
    if let Some(sum) = &job.checksum {
        if !job.path.is_file() || &file_sha256(&job.path)? != sum {
            return Err(Error::Checksum { path: job.path.clone() });
        }
    }
    let pixels = read_png(&job.path)?;
    Ok(Radiograph {
        pixels,
        protocol: job.key.protocol.clone(),
        seed: 0,
        knee_id: job.key.knee_id.clone(),
        joint_center_px: job.joint_center_px,
    })
}

/// Replace NaNs by the column median, or drop the column when too many are
/// missing. Operates in place; returns the dropped columns.
pub fn resolve_missing(m: &mut FeatureMatrix, max_missing_fraction: f64) -> Vec<DroppedColumn> {
    let n = m.n_rows();
    let mut keep = Vec::new();
    let mut dropped = Vec::new();
    for j in 0..m.columns.len() {
        let col = m.column(j);
        let missing = col.iter().filter(|v| !v.is_finite()).count();
        if n > 0 && missing as f64 > max_missing_fraction * n as f64 {
            dropped.push(DroppedColumn {
                name: m.columns[j].clone(),
                reason: format!("missing in {missing} of {n} rows"),
            });
            continue;
        }
        if missing > 0 {
            let mut ok: Vec<f64> = col.into_iter().filter(|v| v.is_finite()).collect();
            ok.sort_by(f64::total_cmp);
            let med = if ok.is_empty() { 0.0 } else { percentile(&ok, 50.0) };
            for row in &mut m.values {
                if !row[j].is_finite() {
                    row[j] = med;
                }
            }
        }
        keep.push(j);
    }
    m.columns = keep.iter().map(|&j| m.columns[j].clone()).collect();
    for row in &mut m.values {
        *row = keep.iter().map(|&j| row[j]).collect();
    }
    dropped
}

/// Features for every job. A checksum mismatch aborts immediately; other
/// per-row failures drop the row, and abort once they exceed the configured
/// fraction.
pub fn extract_matrix(jobs: &[ImageJob], template: &RoiTemplate, cfg: &RadiomicsConfig) -> Result<Extraction> {
    let results = par::map(jobs, |job| -> Result<std::result::Result<(FeatureVector, RoiBox), String>> {
        let image = match load_job(job) {
            Ok(img) => img,
            Err(e @ Error::Checksum { .. }) => return Err(e),
            Err(e) => return Ok(Err(e.to_string())),
        };
        Ok(extract_features(&image, job.side, template, cfg).map_err(|e| e.to_string()))
    });
    let columns: Vec<String> = feature_names().into_iter().map(str::to_string).collect();
    let mut keys = Vec::new();
    let mut values = Vec::new();
    let mut rois = Vec::new();
    let mut failures = Vec::new();
    for (job, res) in jobs.iter().zip(results) {
        match res? {
            Ok((f, b)) => {
                keys.push(job.key.clone());
                values.push(f.values());
                rois.push(b);
            }
            Err(reason) => {
                log::warn!("extraction failed for {}: {reason}", job.path.display());
                failures.push(RowFailure {
                    knee_id: job.key.knee_id.clone(),
                    protocol: job.key.protocol.clone(),
                    repeat: job.key.repeat,
                    path: job.path.clone(),
                    reason,
                });
            }
        }
    }
    if !jobs.is_empty() && failures.len() as f64 > cfg.max_failed_fraction * jobs.len() as f64 {
        return Err(Error::Data(format!(
            "{} of {} rows failed extraction (first: {}: {})",
            failures.len(),
            jobs.len(),
            failures[0].path.display(),
            failures[0].reason
        )));
    }
    let mut matrix = FeatureMatrix { keys, columns, values };
    let dropped_columns = resolve_missing(&mut matrix, cfg.max_missing_fraction);
    Ok(Extraction { matrix, rois, failures, dropped_columns })
}

/// Sidecar describing how a feature matrix was produced.
#[derive(Clone, Debug, Serialize)]
pub struct MatrixSidecar<'a> {
    pub n_bins: u32,
    pub discretization: &'static str,
    pub directions_deg: [u32; 4],
    pub aggregation: &'static str,
    pub glszm_connectivity: u32,
    pub neighbourhood: &'static str,
    pub gldm_alpha: u32,
    pub prune_threshold: f64,
    pub roi_px: usize,
    pub pixel_mm: f64,
    pub families: Vec<(&'a str, &'static str)>,
    pub dropped_columns: &'a [DroppedColumn],
    pub failures: &'a [RowFailure],
}

impl<'a> MatrixSidecar<'a> {
    pub fn new(cfg: &RadiomicsConfig, ex: &'a Extraction) -> Self {
        MatrixSidecar {
            n_bins: cfg.n_bins,
            discretization: "z-score, fixed bin number over [-3, 3]",
            directions_deg: [0, 45, 90, 135],
            aggregation: "per-direction features averaged",
            glszm_connectivity: 8,
            neighbourhood: "chebyshev-1",
            gldm_alpha: 0,
            prune_threshold: cfg.prune_threshold,
            roi_px: cfg.roi_px,
            pixel_mm: cfg.pixel_mm,
            families: ex.matrix.columns.iter().map(|c| (c.as_str(), Family::of(c).map_or("unknown", Family::as_str))).collect(),
            dropped_columns: &ex.dropped_columns,
            failures: &ex.failures,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneResult {
    pub kept: Vec<String>,
    pub dropped: Vec<(String, String)>,
}

/// Pearson correlation; `None` when either side is constant.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    (saa > 0.0 && sbb > 0.0).then(|| (sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

/// A column is constant when its spread is negligible next to its scale.
pub fn is_constant(col: &[f64]) -> bool {
    let n = col.len() as f64;
    let mean = col.iter().sum::<f64>() / n;
    let sd = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    !(sd > 1e-12 * (1.0 + mean.abs()))
}

/// Greedy pruning in column order using correlations over `train_rows`.
pub fn prune_correlated(m: &FeatureMatrix, train_rows: &[usize], threshold: f64) -> Result<PruneResult> {
    if train_rows.len() < 2 {
        return Err(Error::Data("correlation pruning needs at least two rows".into()));
    }
    let cols: Vec<Vec<f64>> = (0..m.columns.len()).map(|j| train_rows.iter().map(|&i| m.values[i][j]).collect()).collect();
    let mut kept: Vec<usize> = Vec::new();
    let mut dropped = Vec::new();
    for (j, col) in cols.iter().enumerate() {
        if is_constant(col) {
            dropped.push((m.columns[j].clone(), "constant".to_string()));
            continue;
        }
        let clash = kept.iter().find_map(|&k| {
            let r = pearson(col, &cols[k])?;
            (r.abs() > threshold).then_some((k, r))
        });
        match clash {
            Some((k, r)) => dropped.push((m.columns[j].clone(), format!("|rho| = {:.4} with {}", r.abs(), m.columns[k]))),
            None => kept.push(j),
        }
    }
    Ok(PruneResult { kept: kept.into_iter().map(|j| m.columns[j].clone()).collect(), dropped })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;
    use rand::Rng;

    fn matrix(cols: Vec<(&str, Vec<f64>)>) -> FeatureMatrix {
        let n = cols[0].1.len();
        FeatureMatrix {
            keys: (0..n).map(|i| RowKey { knee_id: format!("k{i}"), protocol: "reference".into(), repeat: 0 }).collect(),
            columns: cols.iter().map(|c| c.0.to_string()).collect(),
            values: (0..n).map(|i| cols.iter().map(|c| c.1[i]).collect()).collect(),
        }
    }

    #[test]
    fn column_order_is_documented() {
        let names = feature_names();
        assert_eq!(names.len(), 16 + 7 + 6 + 5 * 4);
        assert_eq!(names[0], "firstorder_mean");
        assert_eq!(names[16], "shape_area_fraction");
        assert_eq!(*names.last().unwrap(), "gldm_de");
        assert!(names.iter().all(|n| Family::of(n).is_some()));
    }

    #[test]
    fn duplicate_and_negated_columns_pruned() {
        let mut rng = seed::rng(1);
        let a: Vec<f64> = (0..50).map(|_| rng.random()).collect();
        let b: Vec<f64> = (0..50).map(|_| rng.random()).collect();
        let m = matrix(vec![("a", a.clone()), ("b", b.clone()), ("a2", a.clone()), ("neg_b", b.iter().map(|v| -v).collect()), ("c", vec![1.0; 50])]);
        let rows: Vec<usize> = (0..50).collect();
        let p = prune_correlated(&m, &rows, 0.9).unwrap();
        assert_eq!(p.kept, vec!["a", "b"]);
        assert_eq!(p.dropped.len(), 3);
        assert_eq!(p.dropped[2], ("c".to_string(), "constant".to_string()));
    }

    #[test]
    fn independent_columns_kept() {
        let mut rng = seed::rng(2);
        let cols: Vec<(String, Vec<f64>)> = (0..6).map(|j| (format!("f{j}"), (0..400).map(|_| rng.random::<f64>()).collect())).collect();
        for i in 0..6 {
            for j in 0..i {
                assert!(pearson(&cols[i].1, &cols[j].1).unwrap().abs() < 0.2);
            }
        }
        let m = matrix(cols.iter().map(|(n, v)| (n.as_str(), v.clone())).collect());
        let p = prune_correlated(&m, &(0..400).collect::<Vec<_>>(), 0.9).unwrap();
        assert_eq!(p.kept.len(), 6);
    }

    #[test]
    fn pruning_uses_only_training_rows() {
        // Correlated on rows 0..10, anticorrelated noise elsewhere.
        let a: Vec<f64> = (0..20).map(|i| i as f64).collect();
        let b: Vec<f64> = (0..20).map(|i| if i < 10 { 2.0 * i as f64 } else { (i * 7 % 5) as f64 }).collect();
        let m = matrix(vec![("a", a), ("b", b)]);
        assert_eq!(prune_correlated(&m, &(0..10).collect::<Vec<_>>(), 0.9).unwrap().kept, vec!["a"]);
        assert_eq!(prune_correlated(&m, &(0..20).collect::<Vec<_>>(), 0.9).unwrap().kept.len(), 2);
    }

    #[test]
    fn missing_columns_imputed_or_dropped() {
        let mut m = matrix(vec![
            ("x", vec![1.0, f64::NAN, 3.0, 5.0, 7.0, 9.0, 11.0, 13.0, 15.0, 17.0, 19.0, 21.0, 23.0, 25.0, 27.0, 29.0, 31.0, 33.0, 35.0, 37.0, 39.0]),
            ("y", vec![f64::NAN; 21]),
        ]);
        let d = resolve_missing(&mut m, 0.05);
        assert_eq!(d.len(), 1);
        assert_eq!(m.columns, vec!["x"]);
        assert_eq!(m.values[1][0], 20.0);
    }

    #[test]
    fn csv_round_trip() {
        let m = matrix(vec![("a", vec![0.1, 1e-300, -2.5]), ("b", vec![3.0, 1.0 / 3.0, 1e20])]);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.csv");
        m.write_csv(&p).unwrap();
        assert_eq!(FeatureMatrix::read_csv(&p).unwrap(), m);
    }
}
