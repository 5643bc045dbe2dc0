//! Energy spectra and attenuation tables.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const DEFAULT_PHYSICS: &str = include_str!("../../../../configs/physics.toml");

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Material {
    CorticalBone,
    TrabecularBone,
    SoftTissue,
}

pub const MATERIALS: [Material; 3] = [Material::CorticalBone, Material::TrabecularBone, Material::SoftTissue];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectrumBin {
    pub energy_kev: f64,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergySpectrum {
    bins: Vec<SpectrumBin>,
}

impl EnergySpectrum {
    pub fn new(bins: Vec<SpectrumBin>) -> Result<Self> {
        if bins.is_empty() {
            return Err(Error::Parameter("spectrum needs at least one bin".into()));
        }
        if bins.iter().any(|b| !(b.energy_kev > 0.0 && b.weight > 0.0)) {
            return Err(Error::Parameter("spectrum energies and weights must be positive".into()));
        }
        let total: f64 = bins.iter().map(|b| b.weight).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Parameter(format!("spectrum weights sum to {total}, expected 1")));
        }
        Ok(EnergySpectrum { bins })
    }

    pub fn mono(energy_kev: f64) -> Result<Self> {
        Self::new(vec![SpectrumBin { energy_kev, weight: 1.0 }])
    }

    /// Equal-width bins over `[min_kev, kvp]`, energies at bin centres,
    /// triangular weights peaked at `peak_fraction · kvp`.
    pub fn triangular(kvp: f64, n_bins: usize, min_kev: f64, peak_fraction: f64) -> Result<Self> {
        if n_bins == 0 || !(kvp > min_kev) {
            return Err(Error::Parameter(format!("cannot build a spectrum for {kvp} kVp")));
        }
        let peak = peak_fraction * kvp;
        if !(peak > min_kev && peak < kvp) {
            return Err(Error::Parameter("spectrum peak must lie inside the energy range".into()));
        }
        let width = (kvp - min_kev) / n_bins as f64;
        let centres: Vec<f64> = (0..n_bins).map(|i| min_kev + width * (i as f64 + 0.5)).collect();
        let raw: Vec<f64> = centres
            .iter()
            .map(|&e| if e <= peak { (e - min_kev) / (peak - min_kev) } else { (kvp - e) / (kvp - peak) })
            .collect();
        let total: f64 = raw.iter().sum();
        Self::new(
            centres
                .into_iter()
                .zip(raw)
                .map(|(energy_kev, w)| SpectrumBin { energy_kev, weight: w / total })
                .collect(),
        )
    }

    pub fn bins(&self) -> &[SpectrumBin] {
        &self.bins
    }

    pub fn max_energy(&self) -> f64 {
        self.bins.iter().map(|b| b.energy_kev).fold(f64::MIN, f64::max)
    }

    pub fn min_energy(&self) -> f64 {
        self.bins.iter().map(|b| b.energy_kev).fold(f64::MAX, f64::min)
    }
}

/// Linear attenuation coefficients (1/mm) tabulated over energy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttenuationTable {
    pub energies_kev: Vec<f64>,
    pub cortical_bone: Vec<f64>,
    pub trabecular_bone: Vec<f64>,
    pub soft_tissue: Vec<f64>,
}

impl AttenuationTable {
    pub fn validate(&self) -> Result<()> {
        let n = self.energies_kev.len();
        if n == 0 {
            return Err(Error::Parameter("attenuation table is empty".into()));
        }
        if self.energies_kev.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Parameter("attenuation energies must increase strictly".into()));
        }
        for m in MATERIALS {
            let col = self.column(m);
            if col.len() != n {
                return Err(Error::Parameter(format!("{m:?} column has {} values, expected {n}", col.len())));
            }
            if col.iter().any(|&mu| !(mu > 0.0 && mu.is_finite())) {
                return Err(Error::Parameter(format!("{m:?} coefficients must be positive")));
            }
            if col.windows(2).any(|w| w[1] > w[0]) {
                return Err(Error::Parameter(format!("{m:?} coefficients must not increase with energy")));
            }
        }
        for i in 0..n {
            if !(self.cortical_bone[i] > self.trabecular_bone[i] && self.trabecular_bone[i] > self.soft_tissue[i]) {
                return Err(Error::Parameter(format!(
                    "material ordering cortical > trabecular > soft tissue fails at {} keV",
                    self.energies_kev[i]
                )));
            }
        }
        Ok(())
    }

    pub fn column(&self, m: Material) -> &[f64] {
        match m {
            Material::CorticalBone => &self.cortical_bone,
            Material::TrabecularBone => &self.trabecular_bone,
            Material::SoftTissue => &self.soft_tissue,
        }
    }

    pub fn covers(&self, energy_kev: f64) -> bool {
        match (self.energies_kev.first(), self.energies_kev.last()) {
            (Some(&lo), Some(&hi)) => energy_kev >= lo && energy_kev <= hi,
            _ => false,
        }
    }

    /// μ(material, E), log-linear between tabulated points.
    pub fn mu(&self, m: Material, energy_kev: f64) -> Result<f64> {
        if !self.covers(energy_kev) {
            return Err(Error::Parameter(format!("{energy_kev} keV is outside the attenuation table")));
        }
        let e = &self.energies_kev;
        let col = self.column(m);
        let i = e.partition_point(|&x| x <= energy_kev).clamp(1, e.len().max(2) - 1);
        if e.len() == 1 {
            return Ok(col[0]);
        }
        let (e0, e1) = (e[i - 1], e[i]);
        let t = (energy_kev - e0) / (e1 - e0);
        Ok((col[i - 1].ln() * (1.0 - t) + col[i].ln() * t).exp())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectrumModel {
    pub n_bins: usize,
    pub min_kev: f64,
    pub peak_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct SpectrumEntry {
    kvp: f64,
    energies_kev: Vec<f64>,
    weights: Vec<f64>,
}

/// Physics tables as read from the physics config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhysicsTables {
    pub attenuation: AttenuationTable,
    #[serde(default, rename = "spectrum")]
    spectra: Vec<SpectrumEntry>,
    pub spectrum_model: Option<SpectrumModel>,
}

impl PhysicsTables {
    pub fn from_toml(text: &str) -> Result<Self> {
        let t: PhysicsTables = toml::from_str(text).map_err(|e| Error::Config(format!("physics tables: {e}")))?;
        t.attenuation.validate()?;
        for s in &t.spectra {
            if s.energies_kev.len() != s.weights.len() {
                return Err(Error::Config(format!("spectrum for {} kVp: energies and weights differ in length", s.kvp)));
            }
            let spec = t.spectrum_for(s.kvp)?;
            if spec.max_energy() > s.kvp {
                return Err(Error::Config(format!("spectrum for {} kVp exceeds its tube voltage", s.kvp)));
            }
        }
        Ok(t)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn spectrum_for(&self, kvp: f64) -> Result<EnergySpectrum> {
        let spec = if let Some(s) = self.spectra.iter().find(|s| (s.kvp - kvp).abs() < 1e-9) {
            EnergySpectrum::new(
                s.energies_kev
                    .iter()
                    .zip(&s.weights)
                    .map(|(&energy_kev, &weight)| SpectrumBin { energy_kev, weight })
                    .collect(),
            )?
        } else if let Some(m) = &self.spectrum_model {
            EnergySpectrum::triangular(kvp, m.n_bins, m.min_kev, m.peak_fraction)?
        } else {
            return Err(Error::Config(format!("no spectrum for {kvp} kVp")));
        };
        if !(self.attenuation.covers(spec.min_energy()) && self.attenuation.covers(spec.max_energy())) {
            return Err(Error::Config(format!("spectrum for {kvp} kVp is not covered by the attenuation table")));
        }
        Ok(spec)
    }
}

impl Default for PhysicsTables {
    fn default() -> Self {
        Self::from_toml(DEFAULT_PHYSICS).expect("bundled physics tables are valid")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_tables_validate() {
        let t = PhysicsTables::default();
        t.attenuation.validate().unwrap();
        let s = t.spectrum_for(70.0).unwrap();
        assert_eq!(s.bins().len(), 5);
        assert!(s.max_energy() <= 70.0);
    }

    #[test]
    fn bundled_spectrum_is_the_triangular_model() {
        let t = PhysicsTables::default();
        let file = t.spectrum_for(70.0).unwrap();
        let model = EnergySpectrum::triangular(70.0, 5, 20.0, 2.0 / 3.0).unwrap();
        for (a, b) in file.bins().iter().zip(model.bins()) {
            assert!((a.energy_kev - b.energy_kev).abs() < 1e-12);
            assert!((a.weight - b.weight).abs() < 1e-12);
        }
        let fallback = t.spectrum_for(64.0).unwrap();
        assert!(fallback.max_energy() <= 64.0);
    }

    #[test]
    fn cortical_ratio_at_40_kev() {
        let t = PhysicsTables::default().attenuation;
        let r = t.mu(Material::CorticalBone, 40.0).unwrap() / t.mu(Material::SoftTissue, 40.0).unwrap();
        assert!((4.0..=6.0).contains(&r), "{r}");
    }

    #[test]
    fn log_linear_interpolation() {
        let t = AttenuationTable {
            energies_kev: vec![20.0, 40.0],
            cortical_bone: vec![0.4, 0.1],
            trabecular_bone: vec![0.2, 0.05],
            soft_tissue: vec![0.1, 0.025],
        };
        let mid = t.mu(Material::CorticalBone, 30.0).unwrap();
        assert!((mid - 0.2).abs() < 1e-12);
        assert_eq!(t.mu(Material::SoftTissue, 40.0).unwrap(), 0.025);
        assert!(t.mu(Material::SoftTissue, 41.0).is_err());
    }

    #[test]
    fn spectrum_weights_must_normalise() {
        let bad = EnergySpectrum::new(vec![
            SpectrumBin { energy_kev: 30.0, weight: 0.5 },
            SpectrumBin { energy_kev: 40.0, weight: 0.4 },
        ]);
        assert!(bad.is_err());
    }
}
