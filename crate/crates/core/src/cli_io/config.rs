use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::analysis::{RepeatConfig, ScenarioName};
use crate::cohort::CohortSpec;
use crate::error::{Error, Result};
use crate::ml::MlConfig;
use crate::projector::{read_png, AcquisitionProtocol, PhysicsTables, ResolutionProfile, SimulationSetup};
use crate::radiomics::{RadiomicsConfig, RoiTemplate};

pub const DEFAULT_SEED: u64 = 20_240_917;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CohortOverrides {
    pub n_subjects: Option<usize>,
    pub n_knees: Option<usize>,
    pub grade_fractions: Option<[f64; 3]>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RadiomicsOverrides {
    pub n_bins: Option<u32>,
    pub prune_threshold: Option<f64>,
    pub template_path: Option<PathBuf>,
    pub roi_px: Option<usize>,
    pub min_localization_score: Option<f64>,
    pub otsu_min_effectiveness: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    pub scenarios: Vec<ScenarioName>,
    pub repeats: RepeatConfig,
    pub icc_threshold: f64,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig { scenarios: ScenarioName::ALL.to_vec(), repeats: RepeatConfig::default(), icc_threshold: 0.75 }
    }
}

/// Everything a run needs; loaded from TOML, then overridden from the
/// command line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub master_seed: u64,
    pub profile: String,
    pub output_dir: Option<PathBuf>,
    /// Physics tables TOML; the bundled tables when absent.
    pub physics_path: Option<PathBuf>,
    pub invert_polarity: bool,
    pub cohort: CohortOverrides,
    pub radiomics: RadiomicsOverrides,
    pub ml: MlConfig,
    pub analysis: AnalysisConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            master_seed: DEFAULT_SEED,
            profile: "desk".into(),
            output_dir: None,
            physics_path: None,
            invert_polarity: false,
            cohort: CohortOverrides::default(),
            radiomics: RadiomicsOverrides::default(),
            ml: MlConfig::default(),
            analysis: AnalysisConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Load a TOML file; relative paths inside it resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(q) = p.as_mut() {
                if q.is_relative() {
                    *q = base.join(&*q);
                }
            }
        };
        fix(&mut cfg.physics_path);
        fix(&mut cfg.radiomics.template_path);
        fix(&mut cfg.output_dir);
        Ok(cfg)
    }

    /// Check values and referenced paths, and derive the per-stage settings.
    pub fn resolve(&self) -> Result<Resolved> {
        let profile = ResolutionProfile::by_name(&self.profile)?;
        for p in [&self.physics_path, &self.radiomics.template_path].into_iter().flatten() {
            if !p.is_file() {
                return Err(Error::Config(format!("{} does not exist", p.display())));
            }
        }
        let physics = match &self.physics_path {
            Some(p) => PhysicsTables::load(p)?,
            None => PhysicsTables::default(),
        };
        let setup = SimulationSetup { physics, invert_polarity: self.invert_polarity, ..SimulationSetup::for_profile(&profile) };

        let mut cohort = CohortSpec::default_for(&profile, self.master_seed);
        let o = &self.cohort;
        cohort.n_subjects = o.n_subjects.unwrap_or(cohort.n_subjects);
        cohort.n_knees = o.n_knees.unwrap_or(cohort.n_knees);
        cohort.grade_fractions = o.grade_fractions.unwrap_or(cohort.grade_fractions);
        cohort.validate().map_err(|e| Error::Config(e.to_string()))?;

        let mut radiomics = RadiomicsConfig::for_profile(&profile);
        let r = &self.radiomics;
        if let Some(v) = r.roi_px {
            radiomics.roi_px = v;
            radiomics.template_px = v / 2;
            radiomics.search_radius_px = v;
        }
        radiomics.n_bins = r.n_bins.unwrap_or(radiomics.n_bins);
        radiomics.prune_threshold = r.prune_threshold.unwrap_or(radiomics.prune_threshold);
        radiomics.min_localization_score = r.min_localization_score.unwrap_or(radiomics.min_localization_score);
        radiomics.otsu_min_effectiveness = r.otsu_min_effectiveness.unwrap_or(radiomics.otsu_min_effectiveness);
        radiomics.template_path = r.template_path.clone();
        if radiomics.n_bins < 2 {
            return Err(Error::Config("n_bins must be at least 2".into()));
        }
        let mut ml = self.ml.clone();
        ml.prune_threshold = radiomics.prune_threshold;
        ml.validate()?;
        if !(-1.0..=1.0).contains(&self.analysis.icc_threshold) {
            return Err(Error::Config("icc_threshold must lie in [-1, 1]".into()));
        }
        if self.analysis.repeats.n_repeats == 0 || self.analysis.repeats.subset_size < 5 {
            return Err(Error::Config("repeats need n_repeats >= 1 and subset_size >= 5".into()));
        }
        if self.analysis.repeats.subset_size > cohort.n_knees {
            return Err(Error::Config("repeat subset exceeds the knee count".into()));
        }
        Ok(Resolved { config: self.clone(), profile, setup, cohort, radiomics, ml })
    }
}

#[derive(Clone, Debug)]
pub struct Resolved {
    pub config: RunConfig,
    pub profile: ResolutionProfile,
    pub setup: SimulationSetup,
    pub cohort: CohortSpec,
    pub radiomics: RadiomicsConfig,
    pub ml: MlConfig,
}

impl Resolved {
    pub fn reference_protocol(&self) -> Result<&AcquisitionProtocol> {
        self.cohort.protocols.iter().find(|p| p.name == "reference").ok_or_else(|| Error::Config("no reference protocol".into()))
    }

    /// Template from `template_path` (16-bit PNG of a right knee) or
    /// synthesised from the reference protocol.
    pub fn template(&self) -> Result<RoiTemplate> {
        match &self.radiomics.template_path {
            Some(p) => Ok(RoiTemplate::from_right(read_png(p)?.mapv(f64::from))),
            None => RoiTemplate::synthesize(self.reference_protocol()?, &self.setup, self.radiomics.template_px),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_resolve() {
        let r = RunConfig::default().resolve().unwrap();
        assert_eq!(r.cohort.n_knees, 260);
        assert_eq!(r.radiomics.roi_px, 128);
    }

    #[test]
    fn toml_overrides_and_errors() {
        let c = RunConfig::from_toml("master_seed = 5\n[cohort]\nn_subjects = 20\nn_knees = 30\n[ml]\nmrmr_k_grid = [3]\n").unwrap();
        let r = c.resolve().unwrap();
        assert_eq!((r.cohort.n_subjects, r.cohort.n_knees, r.cohort.master_seed), (20, 30, 5));
        assert_eq!(r.ml.mrmr_k_grid, vec![3]);
        assert!(RunConfig::from_toml("bogus = 1").is_err());
        assert!(RunConfig::from_toml("profile = \"huge\"").unwrap().resolve().is_err());
        assert!(RunConfig::from_toml("physics_path = \"/nonexistent.toml\"").unwrap().resolve().is_err());
    }
}
