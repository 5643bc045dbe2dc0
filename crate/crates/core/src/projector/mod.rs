//! Imaging chain: polyenergetic attenuation, projection geometry, scatter,
//! blur, photon and readout noise, 16-bit quantization.

mod detector;
mod geometry;
mod physics;

use std::io::Cursor;
use std::path::Path;

use image::{ImageBuffer, ImageFormat, Luma};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

pub use detector::{add_scatter, detect, detect_pixels, gaussian_blur, gaussian_kernel, transmit, DN_GAIN};
pub use geometry::{project_affine, project_geometry, DetectorTransform};
pub use physics::{AttenuationTable, EnergySpectrum, Material, PhysicsTables, SpectrumBin, SpectrumModel, MATERIALS};

use crate::error::{Error, Result};
use crate::phantom::{build_phantom_with, KneeMorphology, PhantomConfig};
use crate::seed;

pub const REFERENCE: &str = "reference";
pub const LOW_DOSE: &str = "low_dose";
pub const GEOMETRY_SHIFT: &str = "geometry_shift";

/// Detector and phantom raster sizes for one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ResolutionProfile {
    pub name: String,
    pub fov_px: usize,
    pub pixel_mm: f64,
    /// Square phantom raster, same pitch as the detector.
    pub phantom_px: usize,
    pub scatter_sigma_px: f64,
    pub psf_sigma_px: f64,
    pub roi_px: usize,
}

impl ResolutionProfile {
    /// 512² detector at 0.6 mm.
    pub fn desk() -> Self {
        Self::scaled("desk", 512, 0.6)
    }

    /// 2048² detector at 0.15 mm.
    pub fn full() -> Self {
        Self::scaled("full", 2048, 0.15)
    }

    /// Scatter kernel of 40 px and PSF of 0.3 mm at 0.15 mm pitch, scaled with
    /// pitch; phantom raster three quarters of the detector; ROI a quarter.
    pub fn scaled(name: &str, fov_px: usize, pixel_mm: f64) -> Self {
        ResolutionProfile {
            name: name.to_string(),
            fov_px,
            pixel_mm,
            phantom_px: fov_px * 3 / 4,
            scatter_sigma_px: 40.0 * 0.15 / pixel_mm,
            psf_sigma_px: 0.3 / pixel_mm,
            roi_px: fov_px / 4,
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "full" => Ok(Self::full()),
            other => Err(Error::Config(format!("unknown resolution profile {other:?}"))),
        }
    }
}

impl Default for ResolutionProfile {
    fn default() -> Self {
        Self::desk()
    }
}

mod maybe_infinite {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if *v == f64::INFINITY {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(*v)
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) if t == "inf" => Ok(f64::INFINITY),
            Repr::Text(t) => Err(serde::de::Error::custom(format!("expected a number or \"inf\", got {t:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AcquisitionProtocol {
    pub name: String,
    pub kvp: f64,
    pub mas_rel: f64,
    pub sdd_cm: f64,
    pub sod_cm: f64,
    pub beam_angle_deg: f64,
    pub fov_px: usize,
    pub pixel_mm: f64,
    /// `inf` (written as the string "inf") disables quantum noise.
    #[serde(with = "maybe_infinite")]
    pub photons_ref: f64,
    pub scatter_fraction: f64,
    pub scatter_sigma_px: f64,
    pub psf_sigma_px: f64,
    pub readout_sigma_dn: f64,
}

impl AcquisitionProtocol {
    pub fn reference(profile: &ResolutionProfile) -> Self {
        AcquisitionProtocol {
            name: REFERENCE.to_string(),
            kvp: 70.0,
            mas_rel: 1.0,
            sdd_cm: 115.0,
            sod_cm: 95.0,
            beam_angle_deg: 0.0,
            fov_px: profile.fov_px,
            pixel_mm: profile.pixel_mm,
            photons_ref: 10000.0,
            scatter_fraction: 0.15,
            scatter_sigma_px: profile.scatter_sigma_px,
            psf_sigma_px: profile.psf_sigma_px,
            readout_sigma_dn: 15.0,
        }
    }

    pub fn low_dose(profile: &ResolutionProfile) -> Self {
        AcquisitionProtocol { name: LOW_DOSE.to_string(), mas_rel: 0.25, ..Self::reference(profile) }
    }

    pub fn geometry_shift(profile: &ResolutionProfile) -> Self {
        AcquisitionProtocol {
            name: GEOMETRY_SHIFT.to_string(),
            beam_angle_deg: 3.0,
            sdd_cm: 118.0,
            ..Self::reference(profile)
        }
    }

    /// The three standard protocols in canonical order.
    pub fn standard_set(profile: &ResolutionProfile) -> Vec<Self> {
        vec![Self::reference(profile), Self::low_dose(profile), Self::geometry_shift(profile)]
    }

    pub fn magnification(&self) -> f64 {
        self.sdd_cm / self.sod_cm
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Parameter(format!("protocol {}: {msg}", self.name)));
        if !(60.0..=80.0).contains(&self.kvp) {
            return bad(format!("kVp {} outside [60, 80]", self.kvp));
        }
        if !(self.mas_rel > 0.0 && self.mas_rel.is_finite()) {
            return bad(format!("mas_rel must be positive, got {}", self.mas_rel));
        }
        if !(110.0..=120.0).contains(&self.sdd_cm) || !(90.0..=100.0).contains(&self.sod_cm) {
            return bad(format!("SDD {} / SOD {} outside [110, 120] / [90, 100]", self.sdd_cm, self.sod_cm));
        }
        let m = self.magnification();
        if !(m > 1.0 && m <= 1.34) {
            return bad(format!("magnification {m:.4} outside (1, 1.34]"));
        }
        if !self.beam_angle_deg.is_finite() || self.beam_angle_deg.abs() > 45.0 {
            return bad(format!("beam angle {} is not a small rotation", self.beam_angle_deg));
        }
        if self.fov_px == 0 || !(self.pixel_mm > 0.0 && self.pixel_mm.is_finite()) {
            return bad("FOV and pixel pitch must be positive".into());
        }
        if !(self.photons_ref > 0.0) {
            return bad(format!("photons_ref must be positive, got {}", self.photons_ref));
        }
        if !(0.0..1.0).contains(&self.scatter_fraction) || !(self.scatter_sigma_px > 0.0) {
            return bad("scatter fraction must be in [0, 1) with positive sigma".into());
        }
        if !(self.psf_sigma_px >= 0.0 && self.readout_sigma_dn >= 0.0) {
            return bad("PSF and readout sigmas must be non-negative".into());
        }
        Ok(())
    }

    /// Same geometry and blur with photon and readout noise switched off.
    pub fn noiseless(&self) -> Self {
        AcquisitionProtocol { photons_ref: f64::INFINITY, readout_sigma_dn: 0.0, ..self.clone() }
    }
}

/// A simulated 16-bit radiograph and its ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct Radiograph {
    pub pixels: Array2<u16>,
    pub protocol: String,
    pub seed: u64,
    pub knee_id: String,
    /// Medial joint-line centre `(x, y)` in detector pixels.
    pub joint_center_px: [f64; 2],
}

impl Radiograph {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.pixels.dim();
        let [x, y] = self.joint_center_px;
        if !(x >= 0.0 && y >= 0.0 && x <= w as f64 - 1.0 && y <= h as f64 - 1.0) {
            return Err(Error::Invariant(format!("joint centre ({x:.1}, {y:.1}) outside {w}x{h} raster")));
        }
        Ok(())
    }

    /// Encode as a 16-bit grayscale PNG.
    pub fn png_bytes(&self) -> Result<Vec<u8>> {
        encode_png(&self.pixels)
    }
}

pub fn encode_png(pixels: &Array2<u16>) -> Result<Vec<u8>> {
    let (h, w) = pixels.dim();
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(w as u32, h as u32, pixels.iter().copied().collect()).expect("buffer size matches");
    let mut out = Cursor::new(Vec::new());
    buf.write_to(&mut out, ImageFormat::Png).map_err(|e| Error::Image { path: "<memory>".into(), source: e })?;
    Ok(out.into_inner())
}

/// Read a grayscale PNG back into a `[row, column]` raster.
pub fn read_png(path: &Path) -> Result<Array2<u16>> {
    let img = image::open(path).map_err(|e| Error::Image { path: path.to_path_buf(), source: e })?;
    let g = img.into_luma16();
    let (w, h) = g.dimensions();
    Ok(Array2::from_shape_vec((h as usize, w as usize), g.into_raw()).expect("buffer size matches"))
}

/// Everything besides the protocol that `simulate` needs.
#[derive(Clone, Debug, Default, serde::Serialize)]
pub struct SimulationSetup {
    pub physics: PhysicsTables,
    pub phantom: PhantomConfig,
    /// Square phantom raster size; pitch equals the detector pitch.
    pub phantom_px: usize,
    /// Store `65535 − DN` (bone bright) instead of DN ∝ transmission.
    pub invert_polarity: bool,
}

impl SimulationSetup {
    pub fn for_profile(profile: &ResolutionProfile) -> Self {
        SimulationSetup { phantom_px: profile.phantom_px, ..Default::default() }
    }
}

/// Pre-noise transmission on the detector plus the projected joint centre.
pub fn render_transmission(m: &KneeMorphology, protocol: &AcquisitionProtocol, setup: &SimulationSetup) -> Result<(Array2<f64>, [f64; 2])> {
    protocol.validate()?;
    let map = build_phantom_with(m, &setup.phantom, protocol.pixel_mm, setup.phantom_px, setup.phantom_px)?;
    let projected = project_geometry(&map, protocol)?;
    let spectrum = setup.physics.spectrum_for(protocol.kvp)?;
    if spectrum.max_energy() > protocol.kvp + 1e-9 {
        return Err(Error::Parameter(format!(
            "spectrum reaches {} keV above {} kVp",
            spectrum.max_energy(),
            protocol.kvp
        )));
    }
    let primary = transmit(&projected, &spectrum, &setup.physics.attenuation, &projected.density)?;
    let scattered = add_scatter(&primary, protocol.scatter_fraction, protocol.scatter_sigma_px)?;
    Ok((scattered, projected.joint_center_px))
}

/// Morphology → radiograph.
pub fn simulate(
    m: &KneeMorphology,
    protocol: &AcquisitionProtocol,
    setup: &SimulationSetup,
    seed: u64,
    knee_id: &str,
) -> Result<Radiograph> {
    let (intensity, joint) = render_transmission(m, protocol, setup)?;
    let mut rng = seed::rng(seed);
    let mut r = detect(&intensity, protocol, &mut rng)?;
    if setup.invert_polarity {
        r.pixels.mapv_inplace(|v| u16::MAX - v);
    }
    r.seed = seed;
    r.knee_id = knee_id.to_string();
    r.joint_center_px = joint;
    r.validate()?;
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{sample_morphology, Side};

    fn knee(grade: u8, s: u64) -> KneeMorphology {
        sample_morphology(grade, &mut seed::rng(s)).unwrap()
    }

    #[test]
    fn default_protocols_validate() {
        for profile in [ResolutionProfile::desk(), ResolutionProfile::full()] {
            for p in AcquisitionProtocol::standard_set(&profile) {
                p.validate().unwrap();
            }
        }
        let mut p = AcquisitionProtocol::reference(&ResolutionProfile::desk());
        p.sod_cm = 80.0;
        assert!(p.validate().is_err());
    }

    #[test]
    fn desk_scales_full() {
        let d = ResolutionProfile::desk();
        assert_eq!((d.fov_px, d.roi_px, d.phantom_px), (512, 128, 384));
        assert!((d.scatter_sigma_px - 10.0).abs() < 1e-12);
        assert!((ResolutionProfile::full().scatter_sigma_px - 40.0).abs() < 1e-12);
    }

    #[test]
    fn simulate_is_deterministic_and_valid() {
        let profile = ResolutionProfile::desk();
        let setup = SimulationSetup::for_profile(&profile);
        let p = AcquisitionProtocol::reference(&profile);
        let m = knee(1, 4);
        let a = simulate(&m, &p, &setup, 77, "K1").unwrap();
        let b = simulate(&m, &p, &setup, 77, "K1").unwrap();
        assert_eq!(a, b);
        assert_eq!(a.pixels.dim(), (512, 512));
        let [x, y] = a.joint_center_px;
        // Joint centre lands near the detector centre and on a bright gap.
        assert!((x - 255.5).abs() < 80.0 && (y - 255.5).abs() < 40.0);
    }

    #[test]
    fn sclerosis_darkens_plate_band() {
        let profile = ResolutionProfile::desk();
        let setup = SimulationSetup::for_profile(&profile);
        let p = AcquisitionProtocol::reference(&profile).noiseless();
        let g0 = knee(0, 10);
        let mut g2 = g0.clone();
        g2.kl_grade = 2;
        g2.sclerosis_factor = 1.35;
        let (t0, j) = render_transmission(&g0, &p, &setup).unwrap();
        let (t2, _) = render_transmission(&g2, &p, &setup).unwrap();
        // Band just below the joint line on the tibial side.
        let (x, y) = (j[0].round() as usize, j[1].round() as usize);
        let band = |t: &Array2<f64>| {
            let mut s = 0.0;
            for iy in y + 4..y + 9 {
                for ix in x - 10..x + 10 {
                    s += t[[iy, ix]];
                }
            }
            s
        };
        assert!(band(&t2) < band(&t0));
        let r0 = simulate(&g0, &p, &setup, 1, "a").unwrap();
        let r2 = simulate(&g2, &p, &setup, 1, "a").unwrap();
        let mean = |r: &Radiograph| {
            let mut s = 0.0;
            for iy in y + 4..y + 9 {
                for ix in x - 10..x + 10 {
                    s += r.pixels[[iy, ix]] as f64;
                }
            }
            s
        };
        assert!(mean(&r2) < mean(&r0));
    }

    #[test]
    fn low_dose_is_noisier() {
        let profile = ResolutionProfile::desk();
        let setup = SimulationSetup::for_profile(&profile);
        let m = knee(0, 3);
        let r = simulate(&m, &AcquisitionProtocol::reference(&profile), &setup, 5, "k").unwrap();
        let l = simulate(&m, &AcquisitionProtocol::low_dose(&profile), &setup, 5, "k").unwrap();
        let clean = render_transmission(&m, &AcquisitionProtocol::reference(&profile), &setup).unwrap().0;
        // Soft tissue lateral to the condyles, near the limb edge, where the field is smooth.
        let sd = |img: &Radiograph| {
            let (x0, y0) = (r.joint_center_px[0] as usize, r.joint_center_px[1] as usize - 120);
            let mut v = Vec::new();
            for iy in y0..y0 + 20 {
                for ix in x0 - 10..x0 + 10 {
                    v.push(img.pixels[[iy, ix]] as f64 - clean[[iy, ix]] * DN_GAIN);
                }
            }
            let n = v.len() as f64;
            let mu = v.iter().sum::<f64>() / n;
            (v.iter().map(|a| (a - mu).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        assert!(sd(&l) > sd(&r));
    }

    #[test]
    fn geometry_shift_moves_joint_centre() {
        let profile = ResolutionProfile::desk();
        let setup = SimulationSetup::for_profile(&profile);
        let m = knee(0, 3);
        let r = simulate(&m, &AcquisitionProtocol::reference(&profile), &setup, 5, "k").unwrap();
        let g = simulate(&m, &AcquisitionProtocol::geometry_shift(&profile), &setup, 5, "k").unwrap();
        let d = ((r.joint_center_px[0] - g.joint_center_px[0]).powi(2) + (r.joint_center_px[1] - g.joint_center_px[1]).powi(2)).sqrt();
        assert!(d > 0.1);
    }

    #[test]
    fn polarity_inversion() {
        let profile = ResolutionProfile::desk();
        let mut setup = SimulationSetup::for_profile(&profile);
        let p = AcquisitionProtocol::reference(&profile);
        let m = knee(0, 8);
        let a = simulate(&m, &p, &setup, 2, "k").unwrap();
        setup.invert_polarity = true;
        let b = simulate(&m, &p, &setup, 2, "k").unwrap();
        assert!(a.pixels.iter().zip(b.pixels.iter()).all(|(&x, &y)| x as u32 + y as u32 == 65535));
    }

    #[test]
    fn png_round_trip() {
        let px = Array2::from_shape_fn((7, 5), |(i, j)| (i * 9000 + j * 13) as u16);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.png");
        std::fs::write(&path, encode_png(&px).unwrap()).unwrap();
        assert_eq!(read_png(&path).unwrap(), px);
    }

    #[test]
    fn left_knee_mirrors_joint_centre() {
        let profile = ResolutionProfile::desk();
        let setup = SimulationSetup::for_profile(&profile);
        let p = AcquisitionProtocol::reference(&profile).noiseless();
        let mut m = knee(0, 12);
        m.side = Side::Right;
        let (_, jr) = render_transmission(&m, &p, &setup).unwrap();
        m.side = Side::Left;
        let (_, jl) = render_transmission(&m, &p, &setup).unwrap();
        assert!((jr[0] + jl[0] - 511.0).abs() < 1e-6);
    }
}
