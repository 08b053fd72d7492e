//! Deterministic synthetic longitudinal brain-slice cohort.
//!
//! A subject is a set of analytic ellipses (brain outline with a folded
//! cortical band, one central ventricle, bilateral hippocampus and amygdala)
//! plus a smooth multiplicative texture. Ageing scales the ventricle area up
//! and the two atrophying regions down at diagnosis-dependent rates; the
//! displacement field realising this is known in closed form.

use std::f64::consts::PI;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{DisplacementField, Image, Mask};
use crate::progression::Diagnosis;
use crate::rng::SeededRng;

pub const WHITE_MATTER: f64 = 0.75;
pub const GREY_MATTER: f64 = 0.55;
pub const HIPPOCAMPUS_LEVEL: f64 = 0.40;
pub const AMYGDALA_LEVEL: f64 = 0.30;
pub const VENTRICLE_LEVEL: f64 = 0.10;

/// Elliptic radius (in units of the baseline radii) beyond which a region's
/// deformation has faded to zero.
pub const FALLOFF_RADIUS: f64 = 1.4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Region {
    Ventricles,
    Hippocampus,
    Amygdala,
}

impl Region {
    pub const ALL: [Region; 3] = [Region::Ventricles, Region::Hippocampus, Region::Amygdala];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Region::Ventricles => "ventricles",
            Region::Hippocampus => "hippocampus",
            Region::Amygdala => "amygdala",
        }
    }

    pub fn level(self) -> f64 {
        match self {
            Region::Ventricles => VENTRICLE_LEVEL,
            Region::Hippocampus => HIPPOCAMPUS_LEVEL,
            Region::Amygdala => AMYGDALA_LEVEL,
        }
    }

    /// True for regions that grow with disease (ventricles), false for atrophying ones.
    pub fn expands(self) -> bool {
        matches!(self, Region::Ventricles)
    }
}

/// One coverage mask per [`Region`], in `Region::ALL` order.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionMasks(pub [Mask; 3]);

impl RegionMasks {
    pub fn get(&self, region: Region) -> &Mask {
        &self.0[region.index()]
    }

    pub fn as_slice(&self) -> &[Mask] {
        &self.0
    }

    pub fn area(&self, region: Region) -> f64 {
        self.get(region).iter().map(|v| *v as f64).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomConfig {
    pub image_height: usize,
    pub image_width: usize,
    /// Ventricle area growth per year for CN, MCI, AD.
    pub ventricle_rates: [f64; 3],
    /// Hippocampus and amygdala area loss per year for CN, MCI, AD.
    pub atrophy_rates: [f64; 3],
    /// Cross-sectional ventricle area factor at baseline for CN, MCI, AD.
    pub baseline_ventricle_factor: [f64; 3],
    /// Cross-sectional hippocampus/amygdala area factor at baseline.
    pub baseline_atrophy_factor: [f64; 3],
    pub texture_amplitude: f64,
    /// Sub-samples per pixel side for anti-aliased coverage.
    pub supersample: usize,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            image_height: 64,
            image_width: 64,
            ventricle_rates: [0.005, 0.02, 0.05],
            atrophy_rates: [0.002, 0.01, 0.02],
            baseline_ventricle_factor: [1.0, 1.1, 1.25],
            baseline_atrophy_factor: [1.0, 0.93, 0.85],
            texture_amplitude: 0.12,
            supersample: 8,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_height < 16 || self.image_width < 16 {
            return Err(Error::Config("phantom images must be at least 16x16".into()));
        }
        if self.supersample == 0 {
            return Err(Error::Config("supersample must be positive".into()));
        }
        let ordered = |r: &[f64; 3]| r[0] < r[1] && r[1] < r[2] && r[0] >= 0.0;
        if !ordered(&self.ventricle_rates) || !ordered(&self.atrophy_rates) {
            return Err(Error::Config(
                "progression rates must be non-negative and strictly increase CN < MCI < AD".into(),
            ));
        }
        if self.atrophy_rates[2] * 5.0 >= 0.5 {
            return Err(Error::Config("atrophy rates too large for a 5-year horizon".into()));
        }
        if !(0.0..0.2).contains(&self.texture_amplitude) {
            return Err(Error::Config("texture_amplitude must lie in [0, 0.2)".into()));
        }
        Ok(())
    }

    /// Area scale factor of `region` after `years` of progression.
    pub fn area_factor(&self, region: Region, diagnosis: Diagnosis, years: f64) -> f64 {
        let d = diagnosis.index();
        if region.expands() {
            1.0 + self.ventricle_rates[d] * years
        } else {
            1.0 - self.atrophy_rates[d] * years
        }
    }
}

/// Axis-aligned ellipse in pixel coordinates (row, col).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ellipse {
    pub center: (f64, f64),
    pub radii: (f64, f64),
}

impl Ellipse {
    /// Elliptic radius: 1 on the boundary.
    pub fn rho(&self, r: f64, c: f64) -> f64 {
        let dr = (r - self.center.0) / self.radii.0;
        let dc = (c - self.center.1) / self.radii.1;
        (dr * dr + dc * dc).sqrt()
    }

    pub fn scaled(&self, area_factor: f64) -> Ellipse {
        let s = area_factor.sqrt();
        Ellipse {
            center: self.center,
            radii: (self.radii.0 * s, self.radii.1 * s),
        }
    }

    pub fn area(&self) -> f64 {
        PI * self.radii.0 * self.radii.1
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct TextureWave {
    freq: (f64, f64),
    phase: f64,
    weight: f64,
}

/// Subject identity: geometry and texture fixed across visits.
#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSubject {
    pub subject_id: String,
    pub identity_seed: u64,
    pub diagnosis: Diagnosis,
    pub baseline_age: f64,
    pub brain: Ellipse,
    pub cortex_thickness: f64,
    pub fold_amplitude: f64,
    pub fold_count: f64,
    pub fold_phase: f64,
    /// Baseline region geometry; index by `Region::index()`. One ellipse for
    /// the ventricles, left and right for the others.
    pub regions: [Vec<Ellipse>; 3],
    pub texture_seed: u64,
    texture: Vec<TextureWave>,
}

impl PhantomSubject {
    /// Regenerates the subject's shape from its identity seed.
    pub fn new(
        subject_id: impl Into<String>,
        identity_seed: u64,
        diagnosis: Diagnosis,
        baseline_age: f64,
        config: &PhantomConfig,
    ) -> Self {
        let mut rng = SeededRng::new(identity_seed);
        let h = config.image_height as f64;
        let w = config.image_width as f64;
        let cy = h / 2.0 - 0.5 + rng.uniform_range(-0.02, 0.02) * h;
        let cx = w / 2.0 - 0.5 + rng.uniform_range(-0.02, 0.02) * w;
        let mut jitter = |x: f64, rel: f64| x * (1.0 + rng.uniform_range(-rel, rel));
        let brain = Ellipse {
            center: (cy, cx),
            radii: (jitter(0.445 * h, 0.07), jitter(0.40 * w, 0.07)),
        };
        let cortex_thickness = jitter(0.10, 0.2);
        let fold_amplitude = jitter(0.025, 0.3);

        let d = diagnosis.index();
        let years_past_63 = (baseline_age - 63.0).max(0.0);
        let ventricle_area = config.baseline_ventricle_factor[d] * (1.0 + 0.012 * years_past_63);
        let atrophy_area = config.baseline_atrophy_factor[d] * (1.0 - 0.004 * years_past_63);

        // Deep structures are laid out relative to the subject's brain size.
        let (sh, sw) = (brain.radii.0 / 0.445, brain.radii.1 / 0.40);
        let ellipse = |dr: f64, dc: f64, rr: f64, rc: f64, area: f64, rng: &mut SeededRng| {
            let e = Ellipse {
                center: (
                    cy + (dr + rng.uniform_range(-0.008, 0.008)) * sh,
                    cx + (dc + rng.uniform_range(-0.008, 0.008)) * sw,
                ),
                radii: (
                    rr * sh * (1.0 + rng.uniform_range(-0.06, 0.06)),
                    rc * sw * (1.0 + rng.uniform_range(-0.06, 0.06)),
                ),
            };
            e.scaled(area)
        };
        let mut rng = SeededRng::substream(identity_seed, 1);
        let ventricles = vec![ellipse(-0.12, 0.0, 0.08, 0.125, ventricle_area, &mut rng)];
        let hippocampus = [-1.0, 1.0]
            .iter()
            .map(|side| ellipse(0.10, side * 0.19, 0.07, 0.095, atrophy_area, &mut rng))
            .collect();
        let amygdala = [-1.0, 1.0]
            .iter()
            .map(|side| ellipse(0.27, side * 0.11, 0.065, 0.07, atrophy_area, &mut rng))
            .collect();

        let texture_seed = rng.next_u64();
        let fold_count = rng.int_inclusive(5, 9) as f64;
        let fold_phase = rng.uniform_range(0.0, 2.0 * PI);
        let mut trng = SeededRng::new(texture_seed);
        let texture = (0..4)
            .map(|_| TextureWave {
                freq: (trng.uniform_range(-2.0, 2.0) / h, trng.uniform_range(-2.0, 2.0) / w),
                phase: trng.uniform_range(0.0, 2.0 * PI),
                weight: trng.uniform_range(0.5, 1.0),
            })
            .collect();

        Self {
            subject_id: subject_id.into(),
            identity_seed,
            diagnosis,
            baseline_age,
            brain,
            cortex_thickness,
            fold_amplitude,
            fold_count,
            fold_phase,
            regions: [ventricles, hippocampus, amygdala],
            texture_seed,
            texture,
        }
    }

    pub fn components(&self, region: Region) -> &[Ellipse] {
        &self.regions[region.index()]
    }

    /// Multiplicative texture in `[1 - amplitude, 1 + amplitude]`.
    pub fn texture_at(&self, r: f64, c: f64, amplitude: f64) -> f64 {
        let total: f64 = self.texture.iter().map(|t| t.weight).sum();
        let v: f64 = self
            .texture
            .iter()
            .map(|t| t.weight * (2.0 * PI * (t.freq.0 * r + t.freq.1 * c) + t.phase).cos())
            .sum();
        1.0 + amplitude * v / total
    }

    pub fn texture_map(&self, config: &PhantomConfig) -> Array2<f64> {
        Array2::from_shape_fn((config.image_height, config.image_width), |(r, c)| {
            self.texture_at(r as f64, c as f64, config.texture_amplitude)
        })
    }

    fn in_cortex(&self, r: f64, c: f64, rho: f64) -> bool {
        let theta = (r - self.brain.center.0).atan2(c - self.brain.center.1);
        let band = self.cortex_thickness + self.fold_amplitude * (self.fold_count * theta + self.fold_phase).sin();
        rho > 1.0 - band
    }
}

/// Radial falloff weight: 1 inside the region, `h(rho)/rho` in the transition
/// shell and 0 beyond [`FALLOFF_RADIUS`]; `h` is the cubic Hermite blend with
/// unit slope at the boundary so the map is C1.
fn falloff(rho: f64) -> f64 {
    if rho <= 1.0 {
        return 1.0;
    }
    if rho >= FALLOFF_RADIUS {
        return 0.0;
    }
    let width = FALLOFF_RADIUS - 1.0;
    let s = (rho - 1.0) / width;
    let h00 = 2.0 * s * s * s - 3.0 * s * s + 1.0;
    let h10 = s * s * s - 2.0 * s * s + s;
    (h00 + h10 * width) / rho
}

/// Forward displacement of a baseline point under the progression map.
pub fn analytic_displacement(
    subject: &PhantomSubject,
    config: &PhantomConfig,
    years: f64,
    r: f64,
    c: f64,
) -> (f64, f64) {
    let mut u = (0.0, 0.0);
    for region in Region::ALL {
        let lambda = config.area_factor(region, subject.diagnosis, years).sqrt();
        if lambda == 1.0 {
            continue;
        }
        for e in subject.components(region) {
            let g = (lambda - 1.0) * falloff(e.rho(r, c));
            u.0 += g * (r - e.center.0);
            u.1 += g * (c - e.center.1);
        }
    }
    u
}

/// One visit of one subject.
#[derive(Debug, Clone)]
pub struct LongitudinalSample {
    pub subject_id: String,
    pub image: Image,
    pub masks: Option<RegionMasks>,
    pub age: f64,
    pub diagnosis: Diagnosis,
    /// Displacement from the baseline grid, present for rendered follow-ups.
    pub displacement: Option<DisplacementField>,
}

impl LongitudinalSample {
    pub fn masks(&self) -> Result<&RegionMasks> {
        self.masks
            .as_ref()
            .ok_or_else(|| Error::UndefinedRegion(format!("{} has no region masks", self.subject_id)))
    }
}

/// Renders `subject` at `age`; region radii follow the progression rates and
/// everything else is identical to the baseline rendering.
pub fn render_phantom(
    subject: &PhantomSubject,
    age: f64,
    config: &PhantomConfig,
) -> Result<LongitudinalSample> {
    let years = age - subject.baseline_age;
    if !(years >= 0.0) {
        return Err(Error::Argument(format!(
            "age {age} precedes baseline age {} of {}",
            subject.baseline_age, subject.subject_id
        )));
    }
    let (h, w) = (config.image_height, config.image_width);
    let regions: Vec<(Region, Vec<Ellipse>)> = Region::ALL
        .iter()
        .map(|&region| {
            let k = config.area_factor(region, subject.diagnosis, years);
            (
                region,
                subject.components(region).iter().map(|e| e.scaled(k)).collect(),
            )
        })
        .collect();

    let s = config.supersample;
    let inv = 1.0 / (s * s) as f64;
    let mut image = Image::zeros((h, w));
    let mut masks: [Mask; 3] = std::array::from_fn(|_| Mask::zeros((h, w)));
    for r in 0..h {
        for c in 0..w {
            let mut value = 0.0;
            let mut coverage = [0.0f64; 3];
            for i in 0..s {
                let rr = r as f64 + (i as f64 + 0.5) / s as f64 - 0.5;
                for j in 0..s {
                    let cc = c as f64 + (j as f64 + 0.5) / s as f64 - 0.5;
                    let rho = subject.brain.rho(rr, cc);
                    if rho > 1.0 {
                        continue;
                    }
                    let hit = regions
                        .iter()
                        .find(|(_, es)| es.iter().any(|e| e.rho(rr, cc) <= 1.0));
                    value += match hit {
                        Some((region, _)) => {
                            coverage[region.index()] += 1.0;
                            region.level()
                        }
                        None if subject.in_cortex(rr, cc, rho) => GREY_MATTER,
                        None => WHITE_MATTER,
                    };
                }
            }
            let tex = subject.texture_at(r as f64, c as f64, config.texture_amplitude);
            image[[r, c]] = ((value * inv * tex).clamp(0.0, 1.0)) as f32;
            for (m, cov) in masks.iter_mut().zip(coverage) {
                m[[r, c]] = (cov * inv) as f32;
            }
        }
    }
    let displacement = (years > 0.0).then(|| {
        let mut field = DisplacementField::zeros(h, w);
        for r in 0..h {
            for c in 0..w {
                let (ur, uc) = analytic_displacement(subject, config, years, r as f64, c as f64);
                field.rows[[r, c]] = ur;
                field.cols[[r, c]] = uc;
            }
        }
        field
    });
    Ok(LongitudinalSample {
        subject_id: subject.subject_id.clone(),
        image,
        masks: Some(RegionMasks(masks)),
        age,
        diagnosis: subject.diagnosis,
        displacement: Some(displacement.unwrap_or_else(|| DisplacementField::zeros(h, w))),
    })
}

/// Brain coverage area in pixels, used to normalise region areas.
pub fn brain_area(subject: &PhantomSubject) -> f64 {
    subject.brain.area()
}
