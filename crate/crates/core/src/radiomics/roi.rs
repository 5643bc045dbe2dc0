//! ROI localization by normalized cross-correlation, and z-score +
//! fixed-bin-number discretization.

use ndarray::{s, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::phantom::{KneeMorphology, Side};
use crate::projector::{simulate, AcquisitionProtocol, Radiograph, SimulationSetup};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoiMethod {
    TemplateMatch,
    GroundTruthFallback,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoiBox {
    /// `(x, y)` centre in detector pixels.
    pub center_px: [f64; 2],
    pub size_px: usize,
    pub localization_score: f64,
    pub method: RoiMethod,
}

impl RoiBox {
    /// Top-left `(x, y)` of the pixel block the box covers.
    pub fn origin(&self) -> [usize; 2] {
        let half = (self.size_px as f64 - 1.0) / 2.0;
        [
            (self.center_px[0] - half).round().max(0.0) as usize,
            (self.center_px[1] - half).round().max(0.0) as usize,
        ]
    }

    pub fn fits(&self, width: usize, height: usize) -> bool {
        let [x0, y0] = self.origin();
        let half = (self.size_px as f64 - 1.0) / 2.0;
        self.center_px[0] - half > -0.5 - 1e-9
            && self.center_px[1] - half > -0.5 - 1e-9
            && x0 + self.size_px <= width
            && y0 + self.size_px <= height
    }

    /// The covered block as floats.
    pub fn crop(&self, pixels: &Array2<u16>) -> Result<Array2<f64>> {
        let (h, w) = pixels.dim();
        if !self.fits(w, h) {
            return Err(Error::Shape(format!("ROI {:?} of side {} does not fit {w}x{h}", self.center_px, self.size_px)));
        }
        let [x0, y0] = self.origin();
        Ok(pixels.slice(s![y0..y0 + self.size_px, x0..x0 + self.size_px]).mapv(f64::from))
    }
}

/// Move `center` the least amount so a `size`-box fits a `w × h` image.
fn snap(center: [f64; 2], size: usize, w: usize, h: usize) -> [f64; 2] {
    let half = (size as f64 - 1.0) / 2.0;
    let clamp = |c: f64, n: usize| c.clamp(half, (n as f64 - 1.0 - half).max(half));
    [clamp(center[0], w), clamp(center[1], h)]
}

/// Localization templates for both sides.
#[derive(Clone, Debug, PartialEq)]
pub struct RoiTemplate {
    pub right: Array2<f64>,
    pub left: Array2<f64>,
}

impl RoiTemplate {
    pub fn from_right(right: Array2<f64>) -> Self {
        let left = right.slice(s![.., ..;-1]).to_owned();
        RoiTemplate { right, left }
    }

    pub fn for_side(&self, side: Side) -> &Array2<f64> {
        match side {
            Side::Right => &self.right,
            Side::Left => &self.left,
        }
    }

    /// Noiseless grade-0 right knee with mid-range geometry, cropped at the
    /// known joint centre.
    pub fn synthesize(protocol: &AcquisitionProtocol, setup: &SimulationSetup, size_px: usize) -> Result<Self> {
        let r = simulate(&canonical_knee(), &protocol.noiseless(), setup, 0, "template")?;
        let b = RoiBox {
            center_px: r.joint_center_px,
            size_px,
            localization_score: 1.0,
            method: RoiMethod::GroundTruthFallback,
        };
        Ok(Self::from_right(b.crop(&r.pixels)?))
    }
}

pub fn canonical_knee() -> KneeMorphology {
    KneeMorphology {
        kl_grade: 0,
        jsw_med_mm: 5.25,
        jsw_lat_mm: 5.25,
        osteophyte_count: 0,
        osteophyte_max_size_mm: 0.0,
        osteophyte_sites: vec![],
        sclerosis_factor: 1.0,
        varus_valgus_deg: 0.0,
        condyle_width_mm: 32.0,
        condyle_height_mm: 21.0,
        plateau_width_mm: 78.0,
        side: Side::Right,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocateParams {
    pub roi_px: usize,
    /// Half-width of the square search window around the image middle.
    pub search_radius_px: usize,
    pub min_score: f64,
}

/// NCC of `t` against every placement in `img` whose top-left lies in
/// `[x0, x1] × [y0, y1]`; returns `(score, x, y)` of the best one, first in
/// raster order on ties.
fn ncc_search(img: ArrayView2<f64>, t: ArrayView2<f64>, xr: (usize, usize), yr: (usize, usize)) -> Option<(f64, usize, usize)> {
    let (th, tw) = t.dim();
    let n = (th * tw) as f64;
    let tm = t.sum() / n;
    let tc: Array2<f64> = t.mapv(|v| v - tm);
    let tn = tc.iter().map(|v| v * v).sum::<f64>().sqrt();
    if tn == 0.0 {
        return None;
    }
    let rows = crate::par::map_range(yr.1 + 1 - yr.0, |dy| {
        let y = yr.0 + dy;
        let mut best: Option<(f64, usize, usize)> = None;
        for x in xr.0..=xr.1 {
            let win = img.slice(s![y..y + th, x..x + tw]);
            let mut sum = 0.0;
            let mut sq = 0.0;
            let mut cross = 0.0;
            for (a, b) in win.iter().zip(tc.iter()) {
                sum += a;
                sq += a * a;
                cross += a * b;
            }
            let var = sq - sum * sum / n;
            let score = if var > 1e-12 * n { cross / (var.sqrt() * tn) } else { 0.0 };
            if best.is_none_or(|(b, _, _)| score > b) {
                best = Some((score, x, y));
            }
        }
        best
    });
    rows.into_iter().flatten().fold(None, |acc: Option<(f64, usize, usize)>, c| match acc {
        Some(a) if a.0 >= c.0 => Some(a),
        _ => Some(c),
    })
}

fn downsample(a: ArrayView2<f64>, f: usize) -> Array2<f64> {
    let (h, w) = a.dim();
    let (hh, ww) = (h / f, w / f);
    Array2::from_shape_fn((hh, ww), |(i, j)| a.slice(s![i * f..(i + 1) * f, j * f..(j + 1) * f]).sum() / (f * f) as f64)
}

/// Find the joint by template matching; fall back to the radiograph's
/// ground-truth centre when the best correlation is below `min_score`.
pub fn locate_roi(image: &Radiograph, template: &Array2<f64>, params: &LocateParams) -> Result<RoiBox> {
    let (h, w) = image.pixels.dim();
    let (th, tw) = template.dim();
    if th > h || tw > w || th == 0 || tw == 0 {
        return Err(Error::Shape(format!("template {tw}x{th} does not fit image {w}x{h}")));
    }
    if params.roi_px > w || params.roi_px > h {
        return Err(Error::Shape(format!("ROI side {} exceeds image {w}x{h}", params.roi_px)));
    }
    let img = image.pixels.mapv(f64::from);
    // Top-left range that centres the template within the search radius.
    let r = params.search_radius_px as f64;
    let (cx, cy) = ((w as f64 - tw as f64) / 2.0, (h as f64 - th as f64) / 2.0);
    let clamp = |v: f64, hi: usize| v.round().clamp(0.0, hi as f64) as usize;
    let xr = (clamp(cx - r, w - tw), clamp(cx + r, w - tw));
    let yr = (clamp(cy - r, h - th), clamp(cy + r, h - th));

    let f = (th.min(tw) / 32).max(1);
    let (x, y) = if f > 1 {
        let ci = downsample(img.view(), f);
        let ct = downsample(template.view(), f);
        let (ch, cw) = ci.dim();
        let (cth, ctw) = ct.dim();
        let cxr = ((xr.0 / f).min(cw - ctw), (xr.1 / f).min(cw - ctw));
        let cyr = ((yr.0 / f).min(ch - cth), (yr.1 / f).min(ch - cth));
        match ncc_search(ci.view(), ct.view(), cxr, cyr) {
            Some((_, x, y)) => (x * f, y * f),
            None => ((xr.0 + xr.1) / 2, (yr.0 + yr.1) / 2),
        }
    } else {
        ((xr.0 + xr.1) / 2, (yr.0 + yr.1) / 2)
    };
    let (fxr, fyr) = if f > 1 {
        (
            (x.saturating_sub(f).max(xr.0), (x + f).min(xr.1)),
            (y.saturating_sub(f).max(yr.0), (y + f).min(yr.1)),
        )
    } else {
        (xr, yr)
    };
    let best = ncc_search(img.view(), template.view(), fxr, fyr);

    let size = params.roi_px;
    Ok(match best {
        Some((score, x, y)) if score >= params.min_score => RoiBox {
            center_px: snap([x as f64 + (tw as f64 - 1.0) / 2.0, y as f64 + (th as f64 - 1.0) / 2.0], size, w, h),
            size_px: size,
            localization_score: score.clamp(-1.0, 1.0),
            method: RoiMethod::TemplateMatch,
        },
        other => RoiBox {
            center_px: snap(image.joint_center_px, size, w, h),
            size_px: size,
            localization_score: other.map_or(0.0, |b| b.0.clamp(-1.0, 1.0)),
            method: RoiMethod::GroundTruthFallback,
        },
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiscretizedRoi {
    /// Grey levels in `1..=n_bins`, indexed `[row, column]`.
    pub levels: Array2<u32>,
    pub n_bins: u32,
    pub z_mean: f64,
    pub z_std: f64,
    /// Z-scored intensities.
    pub z: Array2<f64>,
}

/// Z-score with the population standard deviation, then
/// `level = 1 + floor((clamp(z, −3, 3) + 3) / 6 · n_bins)`, capped at `n_bins`.
pub fn discretize(raw: &Array2<f64>, n_bins: u32) -> Result<DiscretizedRoi> {
    if n_bins < 1 {
        return Err(Error::Parameter("n_bins must be at least 1".into()));
    }
    let n = raw.len() as f64;
    if raw.is_empty() {
        return Err(Error::DegenerateRoi("empty ROI".into()));
    }
    let mean = raw.sum() / n;
    let var = raw.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if !(std > 0.0 && std.is_finite()) {
        return Err(Error::DegenerateRoi("ROI has zero intensity variance".into()));
    }
    let z = raw.mapv(|v| (v - mean) / std);
    let nb = n_bins as f64;
    let levels = z.mapv(|v| {
        let c = v.clamp(-3.0, 3.0);
        ((1.0 + ((c + 3.0) / 6.0 * nb).floor()) as u32).min(n_bins)
    });
    Ok(DiscretizedRoi { levels, n_bins, z_mean: mean, z_std: std, z })
}

/// Crop `image` to `roi` and discretize.
pub fn preprocess(image: &Radiograph, roi: &RoiBox, n_bins: u32) -> Result<DiscretizedRoi> {
    discretize(&roi.crop(&image.pixels)?, n_bins)
}
