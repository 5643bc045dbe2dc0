//! Parametric 2D knee anatomy.
//!
//! A knee is described by a [`KneeMorphology`] (joint space widths,
//! osteophytes, subchondral sclerosis, alignment and a few shape descriptors).
//! [`sample_morphology`] draws one uniformly from the grade-conditioned ranges
//! and [`build_phantom`] rasterizes it into per-material path-length maps.
//!
//! Geometry, in an anatomical frame `(u, v)` in millimetres with `u` pointing
//! medially and `v` pointing distally (down, towards the tibia):
//!
//! * the distal femur is an elliptic cylinder of width `2·condyle_width +
//!   notch` that tapers to the shaft above the condyles and is cut below by two
//!   half-elliptic condyle lobes separated by the intercondylar notch;
//! * the proximal tibia is an elliptic cylinder of width `plateau_width` cut
//!   above by a flat medial and lateral plateau with the tibial spine between;
//! * the lowest point of both condyles sits at `v = -jsw_med/2`; the medial
//!   plateau sits at `v = +jsw_med/2` and the lateral one at
//!   `v = -jsw_med/2 + jsw_lat`, so the gap at each contact column is exactly
//!   the corresponding joint space width;
//! * soft tissue fills an elliptic limb envelope minus the bone chords.
//!
//! Each row of an elliptic cylinder of half-width `w` is assumed to have an
//! elliptic cross-section of depth `depth_ratio · 2w` along the beam; the
//! traversed thickness at `u` is the chord through that ellipse. Cortical bone
//! is the chord difference between the outer ellipse and an inner ellipse
//! shrunk by the cortical shell; within the subchondral plate band (vertical
//! distance to the articular surface below `plate_mm · sclerosis_factor`) the
//! whole chord is cortical and carries a density multiplier of
//! `sclerosis_factor`.
//!
//! Sign conventions: `varus_valgus_deg < 0` is varus. The construct is rotated
//! by the angle about the medial joint centre in the anatomical frame (positive
//! angle turns `+u` towards `+v`), then left knees are mirrored so the medial
//! compartment of a right knee lies on the raster's right-hand side and that of
//! a left knee on its left-hand side.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Left,
    Right,
}

impl Side {
    pub fn as_str(self) -> &'static str {
        match self {
            Side::Left => "left",
            Side::Right => "right",
        }
    }

    /// Horizontal raster sign of the medial direction.
    fn medial_sign(self) -> f64 {
        match self {
            Side::Right => 1.0,
            Side::Left => -1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OsteophyteSite {
    MedialFemoral,
    LateralFemoral,
    TibialSpine,
}

pub const OSTEOPHYTE_SITES: [OsteophyteSite; 3] = [
    OsteophyteSite::MedialFemoral,
    OsteophyteSite::LateralFemoral,
    OsteophyteSite::TibialSpine,
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Osteophyte {
    pub site: OsteophyteSite,
    pub size_mm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KneeMorphology {
    pub kl_grade: u8,
    pub jsw_med_mm: f64,
    pub jsw_lat_mm: f64,
    pub osteophyte_count: u32,
    pub osteophyte_max_size_mm: f64,
    pub osteophyte_sites: Vec<Osteophyte>,
    pub sclerosis_factor: f64,
    pub varus_valgus_deg: f64,
    pub condyle_width_mm: f64,
    pub condyle_height_mm: f64,
    pub plateau_width_mm: f64,
    pub side: Side,
}

/// Closed interval `[lo, hi]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Interval { lo, hi }
    }

    pub fn contains(&self, x: f64) -> bool {
        x >= self.lo && x <= self.hi
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        if self.lo == self.hi {
            self.lo
        } else {
            rng.random_range(self.lo..=self.hi)
        }
    }
}

/// Grade-conditioned parameter ranges.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradeRanges {
    pub jsw_med_mm: Interval,
    pub jsw_lat_mm: Interval,
    pub osteophyte_max_size_mm: Interval,
    pub osteophyte_count: (u32, u32),
    pub sclerosis_factor: Interval,
    pub varus_valgus_deg: Interval,
}

pub fn grade_ranges(grade: u8) -> Result<GradeRanges> {
    let r = match grade {
        0 => GradeRanges {
            jsw_med_mm: Interval::new(4.5, 5.5),
            jsw_lat_mm: Interval::new(4.5, 5.5),
            osteophyte_max_size_mm: Interval::new(0.0, 0.0),
            osteophyte_count: (0, 0),
            sclerosis_factor: Interval::new(1.0, 1.0),
            varus_valgus_deg: Interval::new(-1.0, 1.0),
        },
        1 => GradeRanges {
            jsw_med_mm: Interval::new(3.5, 5.0),
            jsw_lat_mm: Interval::new(4.0, 5.5),
            osteophyte_max_size_mm: Interval::new(0.0, 1.5),
            osteophyte_count: (0, 2),
            sclerosis_factor: Interval::new(1.0, 1.3),
            varus_valgus_deg: Interval::new(-3.0, 3.0),
        },
        2 => GradeRanges {
            jsw_med_mm: Interval::new(2.5, 4.0),
            jsw_lat_mm: Interval::new(3.5, 5.0),
            osteophyte_max_size_mm: Interval::new(1.0, 3.0),
            osteophyte_count: (1, 4),
            sclerosis_factor: Interval::new(1.2, 1.6),
            varus_valgus_deg: Interval::new(-5.0, 5.0),
        },
        g => return Err(Error::InvalidGrade(g)),
    };
    Ok(r)
}

/// Ranges for the condyle and plateau shape descriptors. These are
/// grade-independent illustrative defaults, not measured anatomy.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeRanges {
    pub condyle_width_mm: Interval,
    pub condyle_height_mm: Interval,
    pub plateau_width_mm: Interval,
}

impl Default for ShapeRanges {
    fn default() -> Self {
        ShapeRanges {
            condyle_width_mm: Interval::new(30.0, 34.0),
            condyle_height_mm: Interval::new(18.0, 24.0),
            plateau_width_mm: Interval::new(74.0, 82.0),
        }
    }
}

/// Draw a morphology for `grade` with the default shape ranges.
pub fn sample_morphology<R: Rng + ?Sized>(grade: u8, rng: &mut R) -> Result<KneeMorphology> {
    sample_morphology_with(grade, &ShapeRanges::default(), rng)
}

pub fn sample_morphology_with<R: Rng + ?Sized>(
    grade: u8,
    shape: &ShapeRanges,
    rng: &mut R,
) -> Result<KneeMorphology> {
    let r = grade_ranges(grade)?;
    let jsw_med_mm = r.jsw_med_mm.sample(rng);
    let jsw_lat_mm = r.jsw_lat_mm.sample(rng);
    let (cmin, cmax) = r.osteophyte_count;
    let osteophyte_count = if cmin == cmax {
        cmin
    } else {
        rng.random_range(cmin..=cmax)
    };
    // Count first: a zero count forces a zero size.
    let osteophyte_max_size_mm = if osteophyte_count == 0 {
        0.0
    } else {
        r.osteophyte_max_size_mm.sample(rng)
    };
    let osteophyte_sites = sample_sites(osteophyte_count, osteophyte_max_size_mm, rng);
    let sclerosis_factor = if grade == 0 {
        1.0
    } else {
        r.sclerosis_factor.sample(rng)
    };
    let varus_valgus_deg = r.varus_valgus_deg.sample(rng);
    let condyle_width_mm = shape.condyle_width_mm.sample(rng);
    let condyle_height_mm = shape.condyle_height_mm.sample(rng);
    let plateau_width_mm = shape.plateau_width_mm.sample(rng);
    let side = if rng.random_bool(0.5) {
        Side::Right
    } else {
        Side::Left
    };
    let m = KneeMorphology {
        kl_grade: grade,
        jsw_med_mm,
        jsw_lat_mm,
        osteophyte_count,
        osteophyte_max_size_mm,
        osteophyte_sites,
        sclerosis_factor,
        varus_valgus_deg,
        condyle_width_mm,
        condyle_height_mm,
        plateau_width_mm,
        side,
    };
    m.validate_with(shape)?;
    Ok(m)
}

/// Sites without replacement; beyond three, extra bumps stack on the sites
/// already chosen, in the same order. The first osteophyte has the maximal
/// size, the others are drawn from `[max/2, max]`.
fn sample_sites<R: Rng + ?Sized>(count: u32, max_size: f64, rng: &mut R) -> Vec<Osteophyte> {
    if count == 0 {
        return Vec::new();
    }
    let mut order = OSTEOPHYTE_SITES;
    order.shuffle(rng);
    (0..count as usize)
        .map(|i| {
            let size_mm = if i == 0 {
                max_size
            } else {
                Interval::new(0.5 * max_size, max_size).sample(rng)
            };
            Osteophyte {
                site: order[i % order.len()],
                size_mm,
            }
        })
        .collect()
}

impl KneeMorphology {
    pub fn validate(&self) -> Result<()> {
        self.validate_with(&ShapeRanges::default())
    }

    pub fn validate_with(&self, shape: &ShapeRanges) -> Result<()> {
        let r = grade_ranges(self.kl_grade)?;
        let bad = |what: &str| Err(Error::Invariant(format!("{what} (grade {})", self.kl_grade)));
        if !(self.jsw_med_mm > 0.0 && self.jsw_lat_mm > 0.0) {
            return bad("joint space widths must be positive");
        }
        if !r.jsw_med_mm.contains(self.jsw_med_mm) {
            return bad("jsw_med_mm outside its range");
        }
        if !r.jsw_lat_mm.contains(self.jsw_lat_mm) {
            return bad("jsw_lat_mm outside its range");
        }
        if self.osteophyte_count < r.osteophyte_count.0 || self.osteophyte_count > r.osteophyte_count.1 {
            return bad("osteophyte_count outside its range");
        }
        if self.osteophyte_count == 0 {
            if self.osteophyte_max_size_mm != 0.0 {
                return bad("zero osteophyte count with nonzero size");
            }
        } else if !r.osteophyte_max_size_mm.contains(self.osteophyte_max_size_mm) {
            return bad("osteophyte_max_size_mm outside its range");
        }
        if self.osteophyte_sites.len() != self.osteophyte_count as usize {
            return bad("osteophyte_sites length differs from osteophyte_count");
        }
        if self
            .osteophyte_sites
            .iter()
            .any(|o| !(o.size_mm >= 0.0 && o.size_mm <= self.osteophyte_max_size_mm))
        {
            return bad("osteophyte site larger than the maximal size");
        }
        if !(self.sclerosis_factor >= 1.0) || !r.sclerosis_factor.contains(self.sclerosis_factor) {
            return bad("sclerosis_factor outside its range");
        }
        if !r.varus_valgus_deg.contains(self.varus_valgus_deg) {
            return bad("varus_valgus_deg outside its range");
        }
        if !shape.condyle_width_mm.contains(self.condyle_width_mm)
            || !shape.condyle_height_mm.contains(self.condyle_height_mm)
            || !shape.plateau_width_mm.contains(self.plateau_width_mm)
        {
            return bad("shape descriptor outside its range");
        }
        Ok(())
    }
}

/// Fixed geometric constants of the anatomical model (not sampled).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomConfig {
    /// Beam-direction depth of each bone cross-section relative to its width.
    pub bone_depth_ratio: f64,
    pub soft_depth_ratio: f64,
    /// Intercondylar notch width relative to one condyle width.
    pub notch_ratio: f64,
    pub femur_shaft_half_width_mm: f64,
    pub tibia_shaft_half_width_mm: f64,
    /// Length over which the epiphysis tapers to the shaft.
    pub metaphysis_length_mm: f64,
    pub shell_epiphysis_mm: f64,
    pub shell_shaft_mm: f64,
    /// Subchondral plate thickness at `sclerosis_factor = 1`.
    pub plate_mm: f64,
    pub spine_height_mm: f64,
    pub spine_half_width_mm: f64,
    /// Half length of the limb envelope along `v`.
    pub limb_half_length_mm: f64,
    /// Soft tissue margin beyond the widest bone.
    pub soft_margin_mm: f64,
    /// Angle of the femoral osteophyte anchors from the condyle's lowest point.
    pub osteophyte_anchor_deg: f64,
    /// Sub-samples per pixel side.
    pub supersample: usize,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            bone_depth_ratio: 0.8,
            soft_depth_ratio: 0.8,
            notch_ratio: 0.45,
            femur_shaft_half_width_mm: 15.0,
            tibia_shaft_half_width_mm: 14.0,
            metaphysis_length_mm: 40.0,
            shell_epiphysis_mm: 1.0,
            shell_shaft_mm: 3.0,
            plate_mm: 1.5,
            spine_height_mm: 3.0,
            spine_half_width_mm: 6.0,
            limb_half_length_mm: 95.0,
            soft_margin_mm: 30.0,
            osteophyte_anchor_deg: 55.0,
            supersample: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaterialThicknessMap {
    pub width_px: usize,
    pub height_px: usize,
    pub pixel_mm: f64,
    /// Rasters are indexed `[row, column]`, millimetres of path length.
    pub cortical: Array2<f64>,
    pub trabecular: Array2<f64>,
    pub soft_tissue: Array2<f64>,
    /// Per-pixel attenuation multiplier (1 except sclerotic subchondral bone).
    pub density: Array2<f64>,
    /// Medial joint-line centre `(x, y)`, pixel-centre coordinates.
    pub joint_center_px: [f64; 2],
}

impl MaterialThicknessMap {
    /// A map of the given size with every thickness zero.
    pub fn empty(width_px: usize, height_px: usize, pixel_mm: f64) -> Self {
        let z = Array2::zeros((height_px, width_px));
        MaterialThicknessMap {
            width_px,
            height_px,
            pixel_mm,
            cortical: z.clone(),
            trabecular: z.clone(),
            soft_tissue: z,
            density: Array2::ones((height_px, width_px)),
            joint_center_px: [(width_px as f64 - 1.0) / 2.0, (height_px as f64 - 1.0) / 2.0],
        }
    }

    pub fn bone(&self) -> Array2<f64> {
        &self.cortical + &self.trabecular
    }

    pub fn validate(&self) -> Result<()> {
        let dims = (self.height_px, self.width_px);
        for (name, r) in [
            ("cortical", &self.cortical),
            ("trabecular", &self.trabecular),
            ("soft_tissue", &self.soft_tissue),
            ("density", &self.density),
        ] {
            if r.dim() != dims {
                return Err(Error::Shape(format!("{name} raster is {:?}, expected {dims:?}", r.dim())));
            }
            if r.iter().any(|&t| !(t.is_finite() && t >= 0.0)) {
                return Err(Error::Invariant(format!("{name} raster has negative or non-finite values")));
            }
        }
        Ok(())
    }
}

/// Geometry derived from one morphology, in the anatomical frame.
#[derive(Clone, Debug)]
pub struct Anatomy {
    cfg: PhantomConfig,
    /// Half width of one condyle lobe.
    lobe_a: f64,
    /// Condyle lobe height.
    lobe_b: f64,
    /// Lobe centres sit at `±lobe_u`.
    lobe_u: f64,
    /// Row where the lobes start (`v` of the notch roof).
    lobe_c: f64,
    femur_half: f64,
    tibia_half: f64,
    top_med: f64,
    top_lat: f64,
    soft_half: f64,
    sclerosis: f64,
    bumps: Vec<Bump>,
    cos_t: f64,
    sin_t: f64,
}

#[derive(Clone, Copy, Debug)]
struct Bump {
    center: [f64; 2],
    normal: [f64; 2],
    radius: f64,
}

#[derive(Clone, Copy, Debug, Default)]
struct Sample {
    cortical: f64,
    trabecular: f64,
    soft: f64,
    density: f64,
}

fn smoothstep(x: f64) -> f64 {
    let t = x.clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Chord through an ellipse of half-width `half` and depth `depth` at offset `du`.
fn chord(du: f64, half: f64, depth: f64) -> f64 {
    if half <= 0.0 || depth <= 0.0 {
        return 0.0;
    }
    let q = du / half;
    if q.abs() >= 1.0 {
        0.0
    } else {
        depth * (1.0 - q * q).sqrt()
    }
}

impl Anatomy {
    pub fn new(m: &KneeMorphology, cfg: &PhantomConfig) -> Self {
        let a = m.condyle_width_mm / 2.0;
        let notch = cfg.notch_ratio * m.condyle_width_mm;
        let lobe_u = notch / 2.0 + a;
        let lobe_b = m.condyle_height_mm;
        let lobe_c = -m.jsw_med_mm / 2.0 - lobe_b;
        let femur_half = lobe_u + a;
        let tibia_half = m.plateau_width_mm / 2.0;
        let top_med = m.jsw_med_mm / 2.0;
        let top_lat = -m.jsw_med_mm / 2.0 + m.jsw_lat_mm;
        let theta = m.varus_valgus_deg.to_radians();
        let mut anatomy = Anatomy {
            cfg: cfg.clone(),
            lobe_a: a,
            lobe_b,
            lobe_u,
            lobe_c,
            femur_half,
            tibia_half,
            top_med,
            top_lat,
            soft_half: femur_half.max(tibia_half) + cfg.soft_margin_mm,
            sclerosis: m.sclerosis_factor,
            bumps: Vec::new(),
            cos_t: theta.cos(),
            sin_t: theta.sin(),
        };
        let mut seen = [0usize; 3];
        for o in &m.osteophyte_sites {
            let idx = OSTEOPHYTE_SITES.iter().position(|s| *s == o.site).unwrap_or(0);
            let (center, normal) = anatomy.site_anchor(o.site, seen[idx]);
            seen[idx] += 1;
            if o.size_mm > 0.0 {
                anatomy.bumps.push(Bump {
                    center,
                    normal,
                    radius: o.size_mm,
                });
            }
        }
        anatomy
    }

    /// Medial joint-line centre in the anatomical frame.
    pub fn joint_center(&self) -> [f64; 2] {
        [self.lobe_u, 0.0]
    }

    /// Anchor point and outward unit normal of the `stack`-th osteophyte at `site`.
    pub fn site_anchor(&self, site: OsteophyteSite, stack: usize) -> ([f64; 2], [f64; 2]) {
        let step = 12f64.to_radians();
        match site {
            OsteophyteSite::MedialFemoral | OsteophyteSite::LateralFemoral => {
                let s = if site == OsteophyteSite::MedialFemoral { 1.0 } else { -1.0 };
                let alpha = self.cfg.osteophyte_anchor_deg.to_radians() + stack as f64 * step;
                let (a, b) = (self.lobe_a, self.lobe_b);
                let p = [s * self.lobe_u + s * a * alpha.sin(), self.lobe_c + b * alpha.cos()];
                let n = [s * alpha.sin() / a, alpha.cos() / b];
                let len = (n[0] * n[0] + n[1] * n[1]).sqrt();
                (p, [n[0] / len, n[1] / len])
            }
            OsteophyteSite::TibialSpine => {
                let u = stack as f64 * 0.5 * self.cfg.spine_half_width_mm;
                ([u, self.tibia_surface(u)], [0.0, -1.0])
            }
        }
    }

    fn taper(&self, dist: f64) -> f64 {
        smoothstep(dist / self.cfg.metaphysis_length_mm)
    }

    /// Half width and shell thickness of the femur at row `v`.
    fn femur_profile(&self, v: f64) -> (f64, f64) {
        let t = if v <= self.lobe_c { self.taper(self.lobe_c - v) } else { 0.0 };
        let half = self.femur_half + (self.cfg.femur_shaft_half_width_mm - self.femur_half) * t;
        let shell = self.cfg.shell_epiphysis_mm + (self.cfg.shell_shaft_mm - self.cfg.shell_epiphysis_mm) * t;
        (half, shell)
    }

    fn tibia_profile(&self, v: f64) -> (f64, f64) {
        let top = self.top_med.max(self.top_lat);
        let t = if v >= top { self.taper(v - top) } else { 0.0 };
        let half = self.tibia_half + (self.cfg.tibia_shaft_half_width_mm - self.tibia_half) * t;
        let shell = self.cfg.shell_epiphysis_mm + (self.cfg.shell_shaft_mm - self.cfg.shell_epiphysis_mm) * t;
        (half, shell)
    }

    /// Articular surface of the tibia (smallest `v` that is bone) at `u`.
    fn tibia_surface(&self, u: f64) -> f64 {
        let top = if u >= 0.0 { self.top_med } else { self.top_lat };
        let q = u / self.cfg.spine_half_width_mm;
        top - self.cfg.spine_height_mm * (1.0 - q * q).max(0.0)
    }

    /// Lower articular contour of the condyle lobe containing `u`, if any.
    fn condyle_surface(&self, u: f64) -> Option<f64> {
        let du = u.abs() - self.lobe_u;
        let q = du / self.lobe_a;
        if q.abs() > 1.0 {
            None
        } else {
            Some(self.lobe_c + self.lobe_b * (1.0 - q * q).sqrt())
        }
    }

    fn bone_chords(&self, u: f64, half: f64, shell: f64, plate: bool) -> (f64, f64) {
        let r = self.cfg.bone_depth_ratio;
        let outer = chord(u, half, r * 2.0 * half);
        if plate {
            return (outer, 0.0);
        }
        let inner = chord(u, half - shell, r * 2.0 * half - 2.0 * shell);
        (outer - inner, inner)
    }

    fn sample(&self, u: f64, v: f64) -> Sample {
        let cfg = &self.cfg;
        let mut s = Sample {
            density: 1.0,
            ..Default::default()
        };
        if v.abs() > cfg.limb_half_length_mm || u.abs() >= self.soft_half {
            return s;
        }
        let envelope = chord(u, self.soft_half, cfg.soft_depth_ratio * 2.0 * self.soft_half);
        let plate_band = cfg.plate_mm * self.sclerosis;
        let plate_density = self.sclerosis.max(1.0);

        let femur = if v <= self.lobe_c {
            let (half, _) = self.femur_profile(v);
            u.abs() <= half
        } else {
            self.condyle_surface(u).is_some_and(|surf| v <= surf)
        };
        if femur {
            let (half, shell) = self.femur_profile(v);
            let plate = self
                .condyle_surface(u)
                .is_some_and(|surf| surf - v >= 0.0 && surf - v < plate_band);
            let (c, t) = self.bone_chords(u, half, shell, plate);
            s.cortical = c;
            s.trabecular = t;
            if plate {
                s.density = plate_density;
            }
        } else {
            let (half, shell) = self.tibia_profile(v);
            let surf = self.tibia_surface(u);
            if u.abs() <= half && v >= surf {
                let plate = v - surf < plate_band;
                let (c, t) = self.bone_chords(u, half, shell, plate);
                s.cortical = c;
                s.trabecular = t;
                if plate {
                    s.density = plate_density;
                }
            } else {
                for b in &self.bumps {
                    let d = [u - b.center[0], v - b.center[1]];
                    let r2 = d[0] * d[0] + d[1] * d[1];
                    if r2 < b.radius * b.radius && d[0] * b.normal[0] + d[1] * b.normal[1] >= 0.0 {
                        s.cortical += cfg.bone_depth_ratio * 2.0 * (b.radius * b.radius - r2).sqrt();
                    }
                }
            }
        }
        s.soft = (envelope - s.cortical - s.trabecular).max(0.0);
        s
    }

    /// Raster-plane millimetres (medial-positive, unmirrored) to the anatomical frame.
    fn unrotate(&self, x: f64, y: f64) -> (f64, f64) {
        let [jx, jy] = self.joint_center();
        let (dx, dy) = (x - jx, y - jy);
        (jx + self.cos_t * dx + self.sin_t * dy, jy - self.sin_t * dx + self.cos_t * dy)
    }
}

/// Rasterize `m` into a `width_px × height_px` map at `pixel_mm`.
pub fn build_phantom(m: &KneeMorphology, pixel_mm: f64, width_px: usize, height_px: usize) -> Result<MaterialThicknessMap> {
    build_phantom_with(m, &PhantomConfig::default(), pixel_mm, width_px, height_px)
}

pub fn build_phantom_with(
    m: &KneeMorphology,
    cfg: &PhantomConfig,
    pixel_mm: f64,
    width_px: usize,
    height_px: usize,
) -> Result<MaterialThicknessMap> {
    if !(pixel_mm > 0.0 && pixel_mm.is_finite()) {
        return Err(Error::Parameter(format!("pixel_mm must be positive, got {pixel_mm}")));
    }
    if width_px < 3 || height_px < 3 {
        return Err(Error::GeometryOverflow(format!("raster {width_px}x{height_px} is too small")));
    }
    let anatomy = Anatomy::new(m, cfg);
    let ss = cfg.supersample.max(1);
    let sign = m.side.medial_sign();
    let cx = (width_px as f64 - 1.0) / 2.0;
    let cy = (height_px as f64 - 1.0) / 2.0;
    let weight = 1.0 / (ss * ss) as f64;

    let rows: Vec<Vec<Sample>> = par::map_range(height_px, |iy| {
        (0..width_px)
            .map(|ix| {
                let mut acc = Sample::default();
                for sy in 0..ss {
                    for sx in 0..ss {
                        let ox = (sx as f64 + 0.5) / ss as f64 - 0.5;
                        let oy = (sy as f64 + 0.5) / ss as f64 - 0.5;
                        let x = sign * (ix as f64 + ox - cx) * pixel_mm;
                        let y = (iy as f64 + oy - cy) * pixel_mm;
                        let (u, v) = anatomy.unrotate(x, y);
                        let s = anatomy.sample(u, v);
                        acc.cortical += s.cortical;
                        acc.trabecular += s.trabecular;
                        acc.soft += s.soft;
                        acc.density += s.density;
                    }
                }
                Sample {
                    cortical: acc.cortical * weight,
                    trabecular: acc.trabecular * weight,
                    soft: acc.soft * weight,
                    density: acc.density * weight,
                }
            })
            .collect()
    });

    let mut map = MaterialThicknessMap::empty(width_px, height_px, pixel_mm);
    for (iy, row) in rows.iter().enumerate() {
        for (ix, s) in row.iter().enumerate() {
            map.cortical[[iy, ix]] = s.cortical;
            map.trabecular[[iy, ix]] = s.trabecular;
            map.soft_tissue[[iy, ix]] = s.soft;
            map.density[[iy, ix]] = s.density;
        }
    }
    let [ju, jv] = anatomy.joint_center();
    map.joint_center_px = [cx + sign * ju / pixel_mm, cy + jv / pixel_mm];

    let occupied = |iy: usize, ix: usize| map.soft_tissue[[iy, ix]] > 0.0 || map.cortical[[iy, ix]] > 0.0 || map.trabecular[[iy, ix]] > 0.0;
    let border_hit = (0..width_px).any(|ix| occupied(0, ix) || occupied(height_px - 1, ix))
        || (0..height_px).any(|iy| occupied(iy, 0) || occupied(iy, width_px - 1));
    if border_hit {
        return Err(Error::GeometryOverflow(format!(
            "limb envelope does not fit a {width_px}x{height_px} raster at {pixel_mm} mm/px"
        )));
    }
    Ok(map)
}
