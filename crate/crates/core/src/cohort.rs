//! Virtual population: subjects, knees, grade quotas, one record per
//! (knee, protocol), and rendering of the whole manifest to disk.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cli_io::{file_sha256, sha256_hex};
use crate::error::{Error, Result};
use crate::par;
use crate::phantom::{sample_morphology, KneeMorphology, Side};
use crate::projector::{simulate, AcquisitionProtocol, ResolutionProfile, SimulationSetup};
use crate::seed;

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const MANIFEST_META_FILE: &str = "manifest.meta.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CohortSpec {
    pub n_subjects: usize,
    pub n_knees: usize,
    pub grade_fractions: [f64; 3],
    pub protocols: Vec<AcquisitionProtocol>,
    pub master_seed: u64,
}

impl CohortSpec {
    /// 180 subjects, 260 knees, 50/30/20 grades, the three standard protocols.
    pub fn default_for(profile: &ResolutionProfile, master_seed: u64) -> Self {
        CohortSpec {
            n_subjects: 180,
            n_knees: 260,
            grade_fractions: [0.5, 0.3, 0.2],
            protocols: AcquisitionProtocol::standard_set(profile),
            master_seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_subjects == 0 || self.n_knees < self.n_subjects || self.n_knees > 2 * self.n_subjects {
            return Err(Error::Spec(format!(
                "need n_subjects <= n_knees <= 2 n_subjects, got {} subjects and {} knees",
                self.n_subjects, self.n_knees
            )));
        }
        let sum: f64 = self.grade_fractions.iter().sum();
        if self.grade_fractions.iter().any(|f| !(*f >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Spec(format!("grade fractions {:?} must be non-negative and sum to 1", self.grade_fractions)));
        }
        let mut names: Vec<&str> = self.protocols.iter().map(|p| p.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Spec("protocol names must be unique".into()));
        }
        for p in &self.protocols {
            p.validate()?;
        }
        Ok(())
    }
}

/// Integer counts summing to `total`, closest to `fractions · total`; leftover
/// units go to the largest remainders, ties to the lower index.
pub fn largest_remainder(fractions: &[f64], total: usize) -> Result<Vec<usize>> {
    let sum: f64 = fractions.iter().sum();
    if fractions.is_empty() || fractions.iter().any(|f| !(*f >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Spec(format!("fractions {fractions:?} must be non-negative and sum to 1")));
    }
    let exact: Vec<f64> = fractions.iter().map(|f| f * total as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| (e + 1e-9).floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    if assigned > total {
        return Err(Error::Spec("quota rounding overshoots the total".into()));
    }
    let mut order: Vec<usize> = (0..fractions.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - counts[a] as f64;
        let rb = exact[b] - counts[b] as f64;
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().cycle().take(total - assigned) {
        counts[i] += 1;
    }
    Ok(counts)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CohortRecord {
    pub subject_id: String,
    pub knee_id: String,
    pub side: Side,
    pub kl_grade: u8,
    pub morphology: KneeMorphology,
    pub protocol_name: String,
    pub image_path: String,
    pub image_seed: u64,
    /// Filled in by rendering.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub joint_center_px: Option<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checksum: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CohortManifest {
    pub records: Vec<CohortRecord>,
    pub master_seed: u64,
    pub spec: CohortSpec,
}

#[derive(Serialize, Deserialize)]
struct ManifestMeta {
    master_seed: u64,
    spec: CohortSpec,
}

pub fn image_file_name(subject_id: &str, side: Side, protocol: &str) -> String {
    format!("images/{subject_id}_{}_{protocol}.png", side.as_str())
}

/// Build the manifest; a pure function of the spec.
pub fn generate_cohort(spec: &CohortSpec) -> Result<CohortManifest> {
    spec.validate()?;
    let mut rng = seed::substream(spec.master_seed, &["cohort"]);

    let subjects: Vec<String> = (1..=spec.n_subjects).map(|i| format!("S{i:03}")).collect();
    let mut order: Vec<usize> = (0..spec.n_subjects).collect();
    order.shuffle(&mut rng);
    let n_bilateral = spec.n_knees - spec.n_subjects;
    let mut bilateral = vec![false; spec.n_subjects];
    for &i in &order[..n_bilateral] {
        bilateral[i] = true;
    }
    let mut knees: Vec<(usize, Side)> = Vec::with_capacity(spec.n_knees);
    for (i, &bi) in bilateral.iter().enumerate() {
        if bi {
            knees.push((i, Side::Right));
            knees.push((i, Side::Left));
        } else {
            knees.push((i, if rng.random::<bool>() { Side::Right } else { Side::Left }));
        }
    }

    let quotas = largest_remainder(&spec.grade_fractions, spec.n_knees)?;
    let mut grades: Vec<u8> = quotas.iter().enumerate().flat_map(|(g, &n)| std::iter::repeat_n(g as u8, n)).collect();
    grades.shuffle(&mut rng);

    let mut records = Vec::with_capacity(spec.n_knees * spec.protocols.len());
    for (&(si, side), &grade) in knees.iter().zip(&grades) {
        let subject_id = &subjects[si];
        let knee_id = format!("{subject_id}_{}", side.as_str());
        let mut morph = sample_morphology(grade, &mut seed::substream(spec.master_seed, &["morphology", &knee_id]))?;
        morph.side = side;
        for p in &spec.protocols {
            records.push(CohortRecord {
                subject_id: subject_id.clone(),
                knee_id: knee_id.clone(),
                side,
                kl_grade: grade,
                morphology: morph.clone(),
                protocol_name: p.name.clone(),
                image_path: image_file_name(subject_id, side, &p.name),
                image_seed: seed::derive(spec.master_seed, &[&knee_id, &p.name]),
                joint_center_px: None,
                checksum: None,
            });
        }
    }
    Ok(CohortManifest { records, master_seed: spec.master_seed, spec: spec.clone() })
}

impl CohortManifest {
    pub fn protocol(&self, name: &str) -> Option<&AcquisitionProtocol> {
        self.spec.protocols.iter().find(|p| p.name == name)
    }

    /// Knee ids in manifest order, each once.
    pub fn knee_ids(&self) -> Vec<&str> {
        let mut seen = std::collections::HashSet::new();
        self.records.iter().map(|r| r.knee_id.as_str()).filter(|k| seen.insert(*k)).collect()
    }

    pub fn subject_ids(&self) -> Vec<&str> {
        let mut seen = std::collections::HashSet::new();
        self.records.iter().map(|r| r.subject_id.as_str()).filter(|k| seen.insert(*k)).collect()
    }

    /// Knee counts per grade.
    pub fn grade_counts(&self) -> [usize; 3] {
        let mut by_knee = BTreeMap::new();
        for r in &self.records {
            by_knee.insert(r.knee_id.as_str(), r.kl_grade);
        }
        let mut c = [0; 3];
        for g in by_knee.values() {
            c[*g as usize] += 1;
        }
        c
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut s = String::new();
        for r in &self.records {
            s.push_str(&serde_json::to_string(r)?);
            s.push('\n');
        }
        Ok(s)
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let meta = ManifestMeta { master_seed: self.master_seed, spec: self.spec.clone() };
        write_atomic(&dir.join(MANIFEST_META_FILE), serde_json::to_string_pretty(&meta)?.as_bytes())?;
        write_atomic(&dir.join(MANIFEST_FILE), self.to_jsonl()?.as_bytes())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let meta_path = dir.join(MANIFEST_META_FILE);
        let meta: ManifestMeta =
            serde_json::from_str(&fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?)?;
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<Vec<CohortRecord>, _>>()?;
        Ok(CohortManifest { records, master_seed: meta.master_seed, spec: meta.spec })
    }
}

/// Write to a sibling temp file then rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RecordFailure {
    pub knee_id: String,
    pub protocol_name: String,
    pub image_path: String,
    pub message: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct RenderSummary {
    pub rendered: usize,
    pub skipped: usize,
    pub failures: Vec<RecordFailure>,
}

enum Outcome {
    Skipped,
    Rendered { checksum: String, joint: [f64; 2] },
    Failed(String),
}

/// Does the file on disk match the checksum recorded for it?
pub fn record_is_current(record: &CohortRecord, out_dir: &Path) -> bool {
    let path = out_dir.join(&record.image_path);
    match (&record.checksum, record.joint_center_px) {
        (Some(sum), Some(_)) => path.is_file() && file_sha256(&path).map(|s| &s == sum).unwrap_or(false),
        _ => false,
    }
}

fn render_one(record: &CohortRecord, protocol: Option<&AcquisitionProtocol>, setup: &SimulationSetup, out_dir: &Path) -> Outcome {
    if record_is_current(record, out_dir) {
        return Outcome::Skipped;
    }
    let Some(protocol) = protocol else {
        return Outcome::Failed(format!("protocol {:?} not in the cohort spec", record.protocol_name));
    };
    let result = (|| -> Result<Outcome> {
        let r = simulate(&record.morphology, protocol, setup, record.image_seed, &record.knee_id)?;
        let bytes = r.png_bytes()?;
        write_atomic(&out_dir.join(&record.image_path), &bytes)?;
        Ok(Outcome::Rendered { checksum: sha256_hex(&bytes), joint: r.joint_center_px })
    })();
    result.unwrap_or_else(|e| Outcome::Failed(e.to_string()))
}

/// Render every record that is missing or stale, then rewrite the manifest
/// with per-image checksums. Failures are collected, not raised.
pub fn render_cohort(manifest: &mut CohortManifest, setup: &SimulationSetup, out_dir: &Path) -> Result<RenderSummary> {
    fs::create_dir_all(out_dir.join("images")).map_err(|e| Error::io(out_dir, e))?;
    let outcomes = {
        let m = &*manifest;
        par::map(&m.records, |r| render_one(r, m.protocol(&r.protocol_name), setup, out_dir))
    };
    let mut summary = RenderSummary::default();
    for (record, outcome) in manifest.records.iter_mut().zip(outcomes) {
        match outcome {
            Outcome::Skipped => summary.skipped += 1,
            Outcome::Rendered { checksum, joint } => {
                record.checksum = Some(checksum);
                record.joint_center_px = Some(joint);
                summary.rendered += 1;
            }
            Outcome::Failed(message) => {
                log::warn!("render failed for {}: {message}", record.image_path);
                record.checksum = None;
                summary.failures.push(RecordFailure {
                    knee_id: record.knee_id.clone(),
                    protocol_name: record.protocol_name.clone(),
                    image_path: record.image_path.clone(),
                    message,
                });
            }
        }
    }
    manifest.write(out_dir)?;
    Ok(summary)
}

/// Verify that an image on disk still matches its manifest checksum.
pub fn verify_image(record: &CohortRecord, out_dir: &Path) -> Result<PathBuf> {
    let path = out_dir.join(&record.image_path);
    let expected = record.checksum.as_deref().ok_or_else(|| Error::Checksum { path: path.clone() })?;
    if !path.is_file() || file_sha256(&path)? != expected {
        return Err(Error::Checksum { path });
    }
    Ok(path)
}
