//! Attenuation, scatter, blur and the detector noise chain.

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal, Poisson};

use super::physics::{AttenuationTable, EnergySpectrum, Material, MATERIALS};
use super::{AcquisitionProtocol, Radiograph};
use crate::error::{Error, Result};
use crate::par;
use crate::phantom::MaterialThicknessMap;

/// Fixed transmission → digital-number gain.
pub const DN_GAIN: f64 = 60000.0;

/// Polyenergetic transmission: `Σ_b w_b · exp(−d · Σ_i μ_i(E_b) t_i)`.
pub fn transmit(
    map: &MaterialThicknessMap,
    spectrum: &EnergySpectrum,
    atten: &AttenuationTable,
    density: &Array2<f64>,
) -> Result<Array2<f64>> {
    map.validate()?;
    let dims = (map.height_px, map.width_px);
    if density.dim() != dims {
        return Err(Error::Shape(format!("density raster is {:?}, thickness maps are {dims:?}", density.dim())));
    }
    if density.iter().any(|&d| !(d.is_finite() && d >= 0.0)) {
        return Err(Error::Invariant("density multiplier must be finite and non-negative".into()));
    }
    // (weight, μ_cortical, μ_trabecular, μ_soft) per bin
    let bins = spectrum
        .bins()
        .iter()
        .map(|b| {
            let mu = |m: Material| atten.mu(m, b.energy_kev);
            Ok((b.weight, mu(MATERIALS[0])?, mu(MATERIALS[1])?, mu(MATERIALS[2])?))
        })
        .collect::<Result<Vec<_>>>()?;

    let rows = par::map_range(map.height_px, |iy| {
        (0..map.width_px)
            .map(|ix| {
                let tc = map.cortical[[iy, ix]];
                let tt = map.trabecular[[iy, ix]];
                let ts = map.soft_tissue[[iy, ix]];
                let d = density[[iy, ix]];
                bins.iter().map(|&(w, mc, mt, ms)| w * (-d * (mc * tc + mt * tt + ms * ts)).exp()).sum::<f64>()
            })
            .collect::<Vec<f64>>()
    });
    Ok(Array2::from_shape_vec(dims, rows.into_iter().flatten().collect()).expect("row lengths match"))
}

/// Normalized discrete Gaussian, radius `ceil(4σ)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let r = (4.0 * sigma).ceil() as i64;
    let k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

// Half-sample symmetric reflection: ... 1 0 | 0 1 2 ... n-1 | n-1 n-2 ...
fn reflect(i: i64, n: i64) -> usize {
    let p = 2 * n;
    let m = i.rem_euclid(p);
    (if m < n { m } else { p - 1 - m }) as usize
}

fn convolve_rows(src: &Array2<f64>, kernel: &[f64]) -> Array2<f64> {
    let (h, w) = src.dim();
    let r = (kernel.len() / 2) as i64;
    let rows = par::map_range(h, |iy| {
        let row = src.row(iy);
        (0..w as i64)
            .map(|x| kernel.iter().enumerate().map(|(k, &c)| c * row[reflect(x + k as i64 - r, w as i64)]).sum::<f64>())
            .collect::<Vec<f64>>()
    });
    Array2::from_shape_vec((h, w), rows.into_iter().flatten().collect()).expect("row lengths match")
}

/// Separable Gaussian blur with reflective boundaries. `sigma = 0` copies.
pub fn gaussian_blur(src: &Array2<f64>, sigma: f64) -> Array2<f64> {
    if sigma <= 0.0 || src.is_empty() {
        return src.clone();
    }
    let k = gaussian_kernel(sigma);
    let horiz = convolve_rows(src, &k);
    let t = horiz.reversed_axes().as_standard_layout().to_owned();
    convolve_rows(&t, &k).reversed_axes().as_standard_layout().to_owned()
}

/// `(1 − f)·primary + f·G(primary, σ)`.
pub fn add_scatter(primary: &Array2<f64>, scatter_fraction: f64, scatter_sigma_px: f64) -> Result<Array2<f64>> {
    if !(0.0..1.0).contains(&scatter_fraction) {
        return Err(Error::Parameter(format!("scatter fraction must be in [0, 1), got {scatter_fraction}")));
    }
    if !(scatter_sigma_px > 0.0) {
        return Err(Error::Parameter(format!("scatter sigma must be positive, got {scatter_sigma_px}")));
    }
    if scatter_fraction == 0.0 {
        return Ok(primary.clone());
    }
    let blurred = gaussian_blur(primary, scatter_sigma_px);
    Ok(primary * (1.0 - scatter_fraction) + blurred * scatter_fraction)
}

/// Run the detector chain and return raw digital numbers (DN ∝ transmission).
pub fn detect_pixels<R: Rng + ?Sized>(intensity: &Array2<f64>, protocol: &AcquisitionProtocol, rng: &mut R) -> Result<Array2<u16>> {
    if !(protocol.photons_ref > 0.0) || !(protocol.mas_rel > 0.0 && protocol.mas_rel.is_finite()) {
        return Err(Error::Parameter("photons_ref and mas_rel must be positive".into()));
    }
    if !(protocol.psf_sigma_px >= 0.0 && protocol.readout_sigma_dn >= 0.0) {
        return Err(Error::Parameter("PSF and readout sigmas must be non-negative".into()));
    }
    if intensity.iter().any(|&v| !(0.0..=1.0 + 1e-12).contains(&v)) {
        return Err(Error::Parameter("intensity values must lie in [0, 1]".into()));
    }
    let blurred = gaussian_blur(intensity, protocol.psf_sigma_px);
    let n = protocol.photons_ref * protocol.mas_rel;
    let readout = if protocol.readout_sigma_dn > 0.0 {
        Some(Normal::new(0.0, protocol.readout_sigma_dn).map_err(|e| Error::Parameter(e.to_string()))?)
    } else {
        None
    };
    let mut out = Array2::<u16>::zeros(blurred.dim());
    for (o, &t) in out.iter_mut().zip(blurred.iter()) {
        let noisy = if n.is_finite() {
            let lambda = n * t;
            let counts = if lambda > 0.0 {
                Poisson::new(lambda).map_err(|e| Error::Parameter(e.to_string()))?.sample(rng)
            } else {
                0.0
            };
            counts / n
        } else {
            t
        };
        let mut dn = (noisy * DN_GAIN).round();
        if let Some(g) = &readout {
            dn = (dn + g.sample(rng)).round();
        }
        *o = dn.clamp(0.0, 65535.0) as u16;
    }
    Ok(out)
}

/// Detector chain wrapped into a [`Radiograph`]; metadata other than the
/// protocol name is left at neutral values for the caller to fill in.
pub fn detect<R: Rng + ?Sized>(intensity: &Array2<f64>, protocol: &AcquisitionProtocol, rng: &mut R) -> Result<Radiograph> {
    let pixels = detect_pixels(intensity, protocol, rng)?;
    let (h, w) = pixels.dim();
    Ok(Radiograph {
        pixels,
        protocol: protocol.name.clone(),
        seed: 0,
        knee_id: String::new(),
        joint_center_px: [(w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0],
    })
}

#[cfg(test)]
mod tests {
    use super::super::physics::SpectrumBin;
    use super::*;
    use crate::seed;

    fn table(mu_c: f64, mu_t: f64, mu_s: f64) -> AttenuationTable {
        AttenuationTable {
            energies_kev: vec![10.0, 100.0],
            cortical_bone: vec![mu_c, mu_c],
            trabecular_bone: vec![mu_t, mu_t],
            soft_tissue: vec![mu_s, mu_s],
        }
    }

    fn one_pixel(t_cortical: f64) -> MaterialThicknessMap {
        let mut m = MaterialThicknessMap::empty(1, 1, 1.0);
        m.cortical[[0, 0]] = t_cortical;
        m
    }

    #[test]
    fn transmit_of_empty_map_is_one() {
        let m = MaterialThicknessMap::empty(8, 5, 1.0);
        let s = EnergySpectrum::mono(40.0).unwrap();
        let out = transmit(&m, &s, &table(0.3, 0.05, 0.02), &m.density).unwrap();
        assert!(out.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn transmit_mono_closed_form() {
        let m = one_pixel(10.0);
        let s = EnergySpectrum::mono(40.0).unwrap();
        let out = transmit(&m, &s, &table(0.05, 0.01, 0.005), &m.density).unwrap();
        assert!((out[[0, 0]] - (-0.5f64).exp()).abs() < 1e-12);
        assert!((out[[0, 0]] - 0.60653).abs() < 1e-5);
    }

    #[test]
    fn transmit_two_bins() {
        let m = one_pixel(10.0);
        let s = EnergySpectrum::new(vec![
            SpectrumBin { energy_kev: 30.0, weight: 0.5 },
            SpectrumBin { energy_kev: 60.0, weight: 0.5 },
        ])
        .unwrap();
        let atten = AttenuationTable {
            energies_kev: vec![30.0, 60.0],
            cortical_bone: vec![0.10, 0.02],
            trabecular_bone: vec![0.05, 0.01],
            soft_tissue: vec![0.02, 0.005],
        };
        let out = transmit(&m, &s, &atten, &m.density).unwrap();
        let expected = 0.5 * (-1.0f64).exp() + 0.5 * (-0.2f64).exp();
        assert!((out[[0, 0]] - expected).abs() < 1e-9);
        assert!((out[[0, 0]] - 0.593305).abs() < 1e-6);
    }

    #[test]
    fn transmit_errors() {
        let mut m = one_pixel(1.0);
        let s = EnergySpectrum::mono(40.0).unwrap();
        let t = table(0.3, 0.05, 0.02);
        assert!(matches!(transmit(&m, &s, &t, &Array2::ones((2, 2))), Err(Error::Shape(_))));
        m.cortical[[0, 0]] = -1.0;
        assert!(matches!(transmit(&m, &s, &t, &m.density.clone()), Err(Error::Invariant(_))));
    }

    #[test]
    fn transmit_monotone_in_thickness_and_energy() {
        let tables = crate::projector::PhysicsTables::default();
        let lo = EnergySpectrum::mono(30.0).unwrap();
        let hi = EnergySpectrum::mono(60.0).unwrap();
        let mut prev = 1.0;
        for t in [1.0, 2.0, 5.0, 10.0] {
            let m = one_pixel(t);
            let a = transmit(&m, &lo, &tables.attenuation, &m.density).unwrap()[[0, 0]];
            let b = transmit(&m, &hi, &tables.attenuation, &m.density).unwrap()[[0, 0]];
            assert!(a < prev && b >= a);
            prev = a;
        }
    }

    #[test]
    fn kernel_is_normalized() {
        for s in [0.5, 1.0, 3.7, 10.0] {
            let k = gaussian_kernel(s);
            assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert_eq!(k.len(), 2 * (4.0 * s).ceil() as usize + 1);
        }
    }

    #[test]
    fn scatter_zero_fraction_is_identity() {
        let a = Array2::from_shape_fn((9, 7), |(i, j)| (i * 7 + j) as f64 / 100.0);
        assert_eq!(add_scatter(&a, 0.0, 5.0).unwrap(), a);
    }

    #[test]
    fn scatter_of_constant_is_constant() {
        let a = Array2::from_elem((20, 30), 0.37);
        let out = add_scatter(&a, 0.4, 6.0).unwrap();
        assert!(out.iter().all(|&v| (v - 0.37).abs() < 1e-12));
    }

    #[test]
    fn scatter_single_pixel() {
        let n = 41;
        let mut a = Array2::zeros((n, n));
        a[[20, 20]] = 1.0;
        let sigma = 2.0;
        let out = add_scatter(&a, 0.2, sigma).unwrap();
        // 2D kernel centre weight is the square of the 1D centre weight.
        let k = gaussian_kernel(sigma);
        let c = k[k.len() / 2] * k[k.len() / 2];
        assert!((out[[20, 20]] - (0.8 + 0.2 * c)).abs() < 1e-12);
        let off = out.sum() - out[[20, 20]];
        assert!((off - 0.2 * (1.0 - c)).abs() < 1e-12);
    }

    #[test]
    fn scatter_conserves_flux() {
        let mut rng = seed::rng(3);
        let a = Array2::from_shape_fn((64, 48), |_| rng.random::<f64>());
        let out = add_scatter(&a, 0.15, 10.0).unwrap();
        assert!(((out.sum() - a.sum()) / a.sum()).abs() < 1e-3);
    }

    #[test]
    fn scatter_rejects_bad_fraction() {
        let a = Array2::zeros((3, 3));
        assert!(add_scatter(&a, 1.0, 1.0).is_err());
        assert!(add_scatter(&a, -0.1, 1.0).is_err());
    }

    fn bare_protocol() -> AcquisitionProtocol {
        let mut p = AcquisitionProtocol::reference(&crate::projector::ResolutionProfile::desk());
        p.psf_sigma_px = 0.0;
        p.readout_sigma_dn = 0.0;
        p
    }

    #[test]
    fn poisson_mean_and_dispersion() {
        let mut p = bare_protocol();
        p.photons_ref = 10000.0;
        p.mas_rel = 1.0;
        let flat = Array2::from_elem((400, 400), 0.5);
        let px = detect_pixels(&flat, &p, &mut seed::rng(11)).unwrap();
        // counts = DN / gain · N
        let counts: Vec<f64> = px.iter().map(|&v| v as f64 / DN_GAIN * 10000.0).collect();
        let n = counts.len() as f64;
        let mean = counts.iter().sum::<f64>() / n;
        let var = counts.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!((mean / 5000.0 - 1.0).abs() < 0.01, "{mean}");
        // DN rounding adds (N/gain)²/12 ≈ 0.002 counts² of variance.
        assert!((var / 5000.0 - 1.0).abs() < 0.03, "{var}");
        assert!((0.97..=1.03).contains(&(var / mean)));
    }

    #[test]
    fn noiseless_limit_matches_gain() {
        let mut p = bare_protocol();
        p.photons_ref = f64::INFINITY;
        let a = Array2::from_shape_fn((32, 32), |(i, j)| ((i * 32 + j) as f64 / 1024.0).min(1.0));
        let px = detect_pixels(&a, &p, &mut seed::rng(1)).unwrap();
        for (&d, &t) in px.iter().zip(a.iter()) {
            assert_eq!(d as f64, (t * DN_GAIN).round());
        }
    }

    #[test]
    fn detect_is_deterministic() {
        let p = AcquisitionProtocol::reference(&crate::projector::ResolutionProfile::desk());
        let a = Array2::from_shape_fn((40, 40), |(i, j)| 0.2 + 0.6 * ((i + j) % 7) as f64 / 7.0);
        let x = detect(&a, &p, &mut seed::rng(9)).unwrap();
        let y = detect(&a, &p, &mut seed::rng(9)).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn detect_rejects_nonpositive_exposure() {
        let mut p = bare_protocol();
        p.mas_rel = 0.0;
        assert!(matches!(detect_pixels(&Array2::zeros((2, 2)), &p, &mut seed::rng(0)), Err(Error::Parameter(_))));
        let mut p = bare_protocol();
        p.photons_ref = -1.0;
        assert!(matches!(detect_pixels(&Array2::zeros((2, 2)), &p, &mut seed::rng(0)), Err(Error::Parameter(_))));
    }
}
