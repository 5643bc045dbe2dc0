use std::fs;
use std::path::Path;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cli_io::{file_sha256, sha256_hex};
use crate::cohort::{write_atomic, CohortManifest, RecordFailure, RenderSummary};
use crate::error::{Error, Result};
use crate::phantom::{KneeMorphology, Side};
use crate::projector::{simulate, AcquisitionProtocol, SimulationSetup};
use crate::radiomics::{ImageJob, RowKey};
use crate::{par, seed};

pub const REPEATS_FILE: &str = "repeats.jsonl";

/// A set of repeats compared against the original reference image.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    /// Reference protocol, fresh noise seeds.
    TestRetest,
    LowDose,
    GeometryShift,
}

impl Condition {
    pub const ALL: [Condition; 3] = [Condition::TestRetest, Condition::LowDose, Condition::GeometryShift];

    pub fn as_str(self) -> &'static str {
        match self {
            Condition::TestRetest => "test_retest",
            Condition::LowDose => "low_dose",
            Condition::GeometryShift => "geometry_shift",
        }
    }

    /// Name of the cohort protocol this condition re-renders.
    pub fn protocol_name(self) -> &'static str {
        match self {
            Condition::TestRetest => "reference",
            Condition::LowDose => "low_dose",
            Condition::GeometryShift => "geometry_shift",
        }
    }

    /// Test-retest repeats isolate noise; protocol variants are jittered.
    pub fn jittered(self) -> bool {
        self != Condition::TestRetest
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RepeatConfig {
    pub subset_size: usize,
    pub n_repeats: u32,
    pub conditions: Vec<Condition>,
    pub angle_jitter_deg: f64,
    pub sdd_jitter_cm: f64,
}

impl Default for RepeatConfig {
    fn default() -> Self {
        RepeatConfig { subset_size: 30, n_repeats: 3, conditions: Condition::ALL.to_vec(), angle_jitter_deg: 1.0, sdd_jitter_cm: 2.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RepeatRecord {
    pub subject_id: String,
    pub knee_id: String,
    pub side: Side,
    pub kl_grade: u8,
    pub morphology: KneeMorphology,
    pub condition: Condition,
    /// 1-based; repeat 0 is the original cohort image.
    pub repeat: u32,
    /// The protocol actually rendered, after jitter.
    pub protocol: AcquisitionProtocol,
    pub image_path: String,
    pub image_seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub joint_center_px: Option<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checksum: Option<String>,
}

impl RepeatRecord {
    pub fn key(&self) -> RowKey {
        RowKey { knee_id: self.knee_id.clone(), protocol: self.protocol.name.clone(), repeat: self.repeat }
    }
}

/// Knee ids of the seeded repeat subset, in manifest order.
pub fn choose_subset(manifest: &CohortManifest, size: usize) -> Result<Vec<String>> {
    let knees: Vec<&str> = manifest.knee_ids();
    if size > knees.len() {
        return Err(Error::Parameter(format!("repeat subset of {size} exceeds {} knees", knees.len())));
    }
    let mut idx = sample(&mut seed::substream(manifest.master_seed, &["repeats"]), knees.len(), size).into_vec();
    idx.sort_unstable();
    Ok(idx.into_iter().map(|i| knees[i].to_string()).collect())
}

/// Apply the uniform angle/SDD jitter, clamped to the valid SDD range.
pub fn jitter_protocol(base: &AcquisitionProtocol, cfg: &RepeatConfig, rng: &mut impl Rng) -> AcquisitionProtocol {
    let mut p = base.clone();
    if cfg.angle_jitter_deg > 0.0 {
        p.beam_angle_deg += rng.random_range(-cfg.angle_jitter_deg..=cfg.angle_jitter_deg);
    }
    if cfg.sdd_jitter_cm > 0.0 {
        p.sdd_cm = (p.sdd_cm + rng.random_range(-cfg.sdd_jitter_cm..=cfg.sdd_jitter_cm)).clamp(110.0, 120.0);
    }
    p
}

/// Plan the repeat images (no rendering). Deterministic in the master seed.
pub fn plan_repeats(manifest: &CohortManifest, cfg: &RepeatConfig) -> Result<Vec<RepeatRecord>> {
    let subset = choose_subset(manifest, cfg.subset_size)?;
    let mut out = Vec::new();
    for knee in &subset {
        for &cond in &cfg.conditions {
            let rec = manifest
                .records
                .iter()
                .find(|r| &r.knee_id == knee && r.protocol_name == cond.protocol_name())
                .ok_or_else(|| Error::Data(format!("knee {knee} has no {} image to repeat", cond.protocol_name())))?;
            let base = manifest.protocol(cond.protocol_name()).ok_or_else(|| Error::Data(format!("protocol {} missing", cond.protocol_name())))?;
            for i in 1..=cfg.n_repeats {
                let labels = [knee.as_str(), cond.as_str(), &i.to_string()];
                let protocol = if cond.jittered() {
                    jitter_protocol(base, cfg, &mut seed::substream(manifest.master_seed, &[&["jitter"][..], &labels].concat()))
                } else {
                    base.clone()
                };
                out.push(RepeatRecord {
                    subject_id: rec.subject_id.clone(),
                    knee_id: knee.clone(),
                    side: rec.side,
                    kl_grade: rec.kl_grade,
                    morphology: rec.morphology.clone(),
                    condition: cond,
                    repeat: i,
                    protocol,
                    image_path: format!("images/repeats/{knee}_{}_r{i}.png", cond.as_str()),
                    image_seed: seed::derive(manifest.master_seed, &[&["repeat"][..], &labels].concat()),
                    joint_center_px: None,
                    checksum: None,
                });
            }
        }
    }
    Ok(out)
}

fn is_current(r: &RepeatRecord, out_dir: &Path) -> bool {
    let path = out_dir.join(&r.image_path);
    match (&r.checksum, r.joint_center_px) {
        (Some(sum), Some(_)) => path.is_file() && file_sha256(&path).map(|s| &s == sum).unwrap_or(false),
        _ => false,
    }
}

/// Render missing or stale repeat images; failures are collected.
pub fn render_repeats(records: &mut [RepeatRecord], setup: &SimulationSetup, out_dir: &Path) -> Result<RenderSummary> {
    fs::create_dir_all(out_dir.join("images/repeats")).map_err(|e| Error::io(out_dir, e))?;
    let outcomes = par::map(records, |r| -> Option<std::result::Result<(String, [f64; 2]), String>> {
        if is_current(r, out_dir) {
            return None;
        }
        Some(
            (|| -> Result<(String, [f64; 2])> {
                let img = simulate(&r.morphology, &r.protocol, setup, r.image_seed, &r.knee_id)?;
                let bytes = img.png_bytes()?;
                write_atomic(&out_dir.join(&r.image_path), &bytes)?;
                Ok((sha256_hex(&bytes), img.joint_center_px))
            })()
            .map_err(|e| e.to_string()),
        )
    });
    let mut summary = RenderSummary::default();
    for (r, o) in records.iter_mut().zip(outcomes) {
        match o {
            None => summary.skipped += 1,
            Some(Ok((sum, joint))) => {
                r.checksum = Some(sum);
                r.joint_center_px = Some(joint);
                summary.rendered += 1;
            }
            Some(Err(message)) => {
                r.checksum = None;
                summary.failures.push(RecordFailure { knee_id: r.knee_id.clone(), protocol_name: r.protocol.name.clone(), image_path: r.image_path.clone(), message });
            }
        }
    }
    Ok(summary)
}

pub fn write_repeats(records: &[RepeatRecord], out_dir: &Path) -> Result<()> {
    let mut s = String::new();
    for r in records {
        s.push_str(&serde_json::to_string(r)?);
        s.push('\n');
    }
    write_atomic(&out_dir.join(REPEATS_FILE), s.as_bytes())
}

pub fn read_repeats(out_dir: &Path) -> Result<Vec<RepeatRecord>> {
    let path = out_dir.join(REPEATS_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    text.lines().filter(|l| !l.trim().is_empty()).map(|l| serde_json::from_str(l).map_err(Error::from)).collect()
}

/// Extraction jobs for rendered repeats.
pub fn repeat_jobs(records: &[RepeatRecord], out_dir: &Path) -> Vec<ImageJob> {
    records
        .iter()
        .filter(|r| r.checksum.is_some())
        .map(|r| ImageJob {
            key: r.key(),
            side: r.side,
            path: out_dir.join(&r.image_path),
            checksum: r.checksum.clone(),
            joint_center_px: r.joint_center_px.unwrap_or([0.0, 0.0]),
        })
        .collect()
}

/// Plan and render in one step.
pub fn repeat_simulations(manifest: &CohortManifest, cfg: &RepeatConfig, setup: &SimulationSetup, out_dir: &Path) -> Result<(Vec<RepeatRecord>, RenderSummary)> {
    let mut records = plan_repeats(manifest, cfg)?;
    // Keep checksums of an earlier run so unchanged images are skipped.
    if let Ok(prev) = read_repeats(out_dir) {
        for r in records.iter_mut() {
            if let Some(p) = prev.iter().find(|p| p.image_path == r.image_path && p.image_seed == r.image_seed && p.protocol == r.protocol) {
                r.checksum = p.checksum.clone();
                r.joint_center_px = p.joint_center_px;
            }
        }
    }
    let summary = render_repeats(&mut records, setup, out_dir)?;
    write_repeats(&records, out_dir)?;
    Ok((records, summary))
}
