//! Phantom plane to detector mapping.
//!
//! A phantom-plane point `X` (millimetres from the raster centre) is rotated
//! by the beam angle about the joint centre and scaled by the magnification
//! `m = sdd / sod` about the beam axis, which passes through both raster
//! centres:
//!
//! ```text
//! D = m · (J + R(angle) · (X − J))
//! ```
//!
//! Rasters are resampled bilinearly by pulling every detector pixel through
//! the inverse map; path lengths are unchanged by magnification.

use ndarray::Array2;

use super::AcquisitionProtocol;
use crate::error::{Error, Result};
use crate::phantom::MaterialThicknessMap;

/// Affine phantom→detector transform in pixel coordinates.
#[derive(Clone, Copy, Debug)]
pub struct DetectorTransform {
    magnification: f64,
    cos_a: f64,
    sin_a: f64,
    joint_mm: [f64; 2],
    src_center: [f64; 2],
    src_pixel_mm: f64,
    det_center: [f64; 2],
    det_pixel_mm: f64,
}

impl DetectorTransform {
    pub fn new(map: &MaterialThicknessMap, magnification: f64, angle_deg: f64, fov_px: usize, det_pixel_mm: f64) -> Self {
        let src_center = [(map.width_px as f64 - 1.0) / 2.0, (map.height_px as f64 - 1.0) / 2.0];
        let a = angle_deg.to_radians();
        DetectorTransform {
            magnification,
            cos_a: a.cos(),
            sin_a: a.sin(),
            joint_mm: [
                (map.joint_center_px[0] - src_center[0]) * map.pixel_mm,
                (map.joint_center_px[1] - src_center[1]) * map.pixel_mm,
            ],
            src_center,
            src_pixel_mm: map.pixel_mm,
            det_center: [(fov_px as f64 - 1.0) / 2.0, (fov_px as f64 - 1.0) / 2.0],
            det_pixel_mm,
        }
    }

    pub fn forward(&self, p: [f64; 2]) -> [f64; 2] {
        let x = (p[0] - self.src_center[0]) * self.src_pixel_mm - self.joint_mm[0];
        let y = (p[1] - self.src_center[1]) * self.src_pixel_mm - self.joint_mm[1];
        let rx = self.joint_mm[0] + self.cos_a * x - self.sin_a * y;
        let ry = self.joint_mm[1] + self.sin_a * x + self.cos_a * y;
        [
            self.det_center[0] + self.magnification * rx / self.det_pixel_mm,
            self.det_center[1] + self.magnification * ry / self.det_pixel_mm,
        ]
    }

    pub fn inverse(&self, d: [f64; 2]) -> [f64; 2] {
        let rx = (d[0] - self.det_center[0]) * self.det_pixel_mm / self.magnification - self.joint_mm[0];
        let ry = (d[1] - self.det_center[1]) * self.det_pixel_mm / self.magnification - self.joint_mm[1];
        let x = self.joint_mm[0] + self.cos_a * rx + self.sin_a * ry;
        let y = self.joint_mm[1] - self.sin_a * rx + self.cos_a * ry;
        [
            self.src_center[0] + x / self.src_pixel_mm,
            self.src_center[1] + y / self.src_pixel_mm,
        ]
    }
}

fn bilinear(src: &Array2<f64>, x: f64, y: f64, fill: f64) -> f64 {
    let (h, w) = src.dim();
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let at = |ix: f64, iy: f64| -> f64 {
        if ix < 0.0 || iy < 0.0 || ix >= w as f64 || iy >= h as f64 {
            fill
        } else {
            src[[iy as usize, ix as usize]]
        }
    };
    let a = at(x0, y0);
    let b = at(x0 + 1.0, y0);
    let c = at(x0, y0 + 1.0);
    let d = at(x0 + 1.0, y0 + 1.0);
    (a * (1.0 - fx) + b * fx) * (1.0 - fy) + (c * (1.0 - fx) + d * fx) * fy
}

/// Map `map` onto a `fov_px × fov_px` detector with the given magnification
/// and beam angle. The identity (m = 1, angle 0, same grid) is returned as an
/// exact copy.
pub fn project_affine(
    map: &MaterialThicknessMap,
    magnification: f64,
    angle_deg: f64,
    fov_px: usize,
    det_pixel_mm: f64,
) -> Result<MaterialThicknessMap> {
    if !(magnification > 0.0 && det_pixel_mm > 0.0 && fov_px > 0) {
        return Err(Error::Parameter("magnification, detector pitch and FOV must be positive".into()));
    }
    if magnification == 1.0
        && angle_deg == 0.0
        && fov_px == map.width_px
        && fov_px == map.height_px
        && det_pixel_mm == map.pixel_mm
    {
        return Ok(map.clone());
    }
    let t = DetectorTransform::new(map, magnification, angle_deg, fov_px, det_pixel_mm);
    check_fits(map, &t, fov_px)?;

    let mut out = MaterialThicknessMap::empty(fov_px, fov_px, det_pixel_mm);
    let rows: Vec<Vec<[f64; 4]>> = crate::par::map_range(fov_px, |iy| {
        (0..fov_px)
            .map(|ix| {
                let [sx, sy] = t.inverse([ix as f64, iy as f64]);
                [
                    bilinear(&map.cortical, sx, sy, 0.0),
                    bilinear(&map.trabecular, sx, sy, 0.0),
                    bilinear(&map.soft_tissue, sx, sy, 0.0),
                    bilinear(&map.density, sx, sy, 1.0),
                ]
            })
            .collect()
    });
    for (iy, row) in rows.into_iter().enumerate() {
        for (ix, v) in row.into_iter().enumerate() {
            out.cortical[[iy, ix]] = v[0];
            out.trabecular[[iy, ix]] = v[1];
            out.soft_tissue[[iy, ix]] = v[2];
            out.density[[iy, ix]] = v[3];
        }
    }
    out.joint_center_px = t.forward(map.joint_center_px);
    Ok(out)
}

fn check_fits(map: &MaterialThicknessMap, t: &DetectorTransform, fov_px: usize) -> Result<()> {
    let mut bbox: Option<[usize; 4]> = None;
    for ((iy, ix), _) in map.soft_tissue.indexed_iter().filter(|(idx, &s)| {
        s > 0.0 || map.cortical[*idx] > 0.0 || map.trabecular[*idx] > 0.0
    }) {
        bbox = Some(match bbox {
            None => [ix, iy, ix, iy],
            Some([x0, y0, x1, y1]) => [x0.min(ix), y0.min(iy), x1.max(ix), y1.max(iy)],
        });
    }
    let Some([x0, y0, x1, y1]) = bbox else {
        return Ok(());
    };
    let lim = fov_px as f64 - 0.5;
    for (x, y) in [
        (x0 as f64 - 0.5, y0 as f64 - 0.5),
        (x1 as f64 + 0.5, y0 as f64 - 0.5),
        (x0 as f64 - 0.5, y1 as f64 + 0.5),
        (x1 as f64 + 0.5, y1 as f64 + 0.5),
    ] {
        let [dx, dy] = t.forward([x, y]);
        if dx < -0.5 || dy < -0.5 || dx > lim || dy > lim {
            return Err(Error::GeometryOverflow(format!(
                "projected anatomy reaches ({dx:.1}, {dy:.1}) outside a {fov_px}-pixel detector"
            )));
        }
    }
    Ok(())
}

/// Resample `map` onto the protocol's detector.
pub fn project_geometry(map: &MaterialThicknessMap, protocol: &AcquisitionProtocol) -> Result<MaterialThicknessMap> {
    protocol.validate()?;
    project_affine(map, protocol.magnification(), protocol.beam_angle_deg, protocol.fov_px, protocol.pixel_mm)
}
