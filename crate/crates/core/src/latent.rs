//! Latent-space experiments: progression-subspace swaps between paired
//! subjects and linear 2-D projections of latent codes.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};
use tch::Tensor;

use crate::cohort::{Cohort, CohortSubject, Split};
use crate::error::{Error, Result};
use crate::eval::{item_seed, psnr, to_grid, Grid};
use crate::imaging::Image;
use crate::phantom::Region;
use crate::progression::{encode_attributes, AttributeVector, Diagnosis, LatentVector};
use crate::segment::{normalized_volume, PhantomSegmenter, Segmenter};
use crate::train::{generate_from_latents, shifted_latents, TrainState};

/// Exchanges the leading `m` coordinates:
/// `([z_b[..m]; z_a[m..]], [z_a[..m]; z_b[m..]])`.
pub fn latent_swap(z_a: &LatentVector, z_b: &LatentVector, m: usize) -> Result<(LatentVector, LatentVector)> {
    let d = z_a.dim();
    if z_b.dim() != d {
        return Err(Error::Contract(format!("latent dimensions differ: {d} vs {}", z_b.dim())));
    }
    if m >= d {
        return Err(Error::Contract(format!("swap width m={m} must be below d={d}")));
    }
    let mut a = z_a.0.clone();
    let mut b = z_b.0.clone();
    a[..m].copy_from_slice(&z_b.0[..m]);
    b[..m].copy_from_slice(&z_a.0[..m]);
    Ok((LatentVector(a), LatentVector(b)))
}

/// Relative ventricle growth below which a CN-attribute output counts as stasis.
pub const STASIS_TOLERANCE: f64 = 0.005;

/// Age-gap bin used for the CN side of a swap; the encoding has no zero-gap bin.
pub const CN_SWAP_BIN: usize = 1;

/// How far PSNR to the own baseline must exceed the mean PSNR to other
/// subjects' baselines for a swapped output to keep its identity.
pub const IDENTITY_MARGIN_DB: f64 = 5.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwapRow {
    pub cn_subject: String,
    pub ad_subject: String,
    pub cn_attribute_bin: usize,
    pub ad_attribute_bin: usize,
    /// Normalized ventricle volume of the CN subject's baseline.
    pub cn_baseline_ventricles: f64,
    pub ad_baseline_ventricles: f64,
    /// CN identity carrying the AD subject's progression code.
    pub cn_swapped_ventricles: f64,
    /// AD identity carrying the CN subject's progression code.
    pub ad_swapped_ventricles: f64,
    pub cn_psnr_own: f64,
    pub cn_psnr_partner: f64,
    pub ad_psnr_own: f64,
    pub ad_psnr_partner: f64,
    /// Mean PSNR of the output against every other test-split baseline.
    pub cn_psnr_cross_mean: f64,
    pub ad_psnr_cross_mean: f64,
}

impl SwapRow {
    pub fn ad_recipient_grows(&self) -> bool {
        self.cn_swapped_ventricles > self.cn_baseline_ventricles
    }

    pub fn cn_recipient_holds(&self) -> bool {
        self.ad_swapped_ventricles <= self.ad_baseline_ventricles * (1.0 + STASIS_TOLERANCE)
    }

    /// Both outputs resemble their own baseline more than their partner's.
    pub fn identity_kept(&self) -> bool {
        self.cn_psnr_own > self.cn_psnr_partner && self.ad_psnr_own > self.ad_psnr_partner
    }

    /// Both outputs clear [`IDENTITY_MARGIN_DB`] over the cross-subject mean.
    pub fn identity_margin_kept(&self) -> bool {
        self.cn_psnr_own - self.cn_psnr_cross_mean >= IDENTITY_MARGIN_DB
            && self.ad_psnr_own - self.ad_psnr_cross_mean >= IDENTITY_MARGIN_DB
    }
}

#[derive(Debug, Clone, Default)]
pub struct SwapReport {
    pub rows: Vec<SwapRow>,
}

impl SwapReport {
    fn fraction(&self, pred: impl Fn(&SwapRow) -> bool) -> f64 {
        if self.rows.is_empty() {
            return f64::NAN;
        }
        self.rows.iter().filter(|r| pred(r)).count() as f64 / self.rows.len() as f64
    }

    pub fn ad_growth_fraction(&self) -> f64 {
        self.fraction(SwapRow::ad_recipient_grows)
    }

    pub fn cn_stasis_fraction(&self) -> f64 {
        self.fraction(SwapRow::cn_recipient_holds)
    }

    pub fn direction_fraction(&self) -> f64 {
        self.fraction(|r| r.ad_recipient_grows() && r.cn_recipient_holds())
    }

    pub fn identity_fraction(&self) -> f64 {
        self.fraction(SwapRow::identity_kept)
    }

    pub fn identity_margin_fraction(&self) -> f64 {
        self.fraction(SwapRow::identity_margin_kept)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for row in &self.rows {
            w.serialize(row)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn summary(&self) -> String {
        let mean = |f: fn(&SwapRow) -> f64| self.rows.iter().map(f).sum::<f64>() / self.rows.len().max(1) as f64;
        format!(
            "pairs: {}\n\
             CN baseline ventricles {:.5} -> with AD code {:.5}\n\
             AD baseline ventricles {:.5} -> with CN code {:.5}\n\
             PSNR own/partner/cross-subject mean: CN {:.2}/{:.2}/{:.2} dB, AD {:.2}/{:.2}/{:.2} dB\n\
             AD-code growth {:.1}%, CN-code stasis {:.1}%\n\
             closer to own baseline than partner's {:.1}%, {IDENTITY_MARGIN_DB} dB margin over cross-subject mean {:.1}%\n\
             note: CN attributes use gap bin {CN_SWAP_BIN}, the smallest available\n",
            self.rows.len(),
            mean(|r| r.cn_baseline_ventricles),
            mean(|r| r.cn_swapped_ventricles),
            mean(|r| r.ad_baseline_ventricles),
            mean(|r| r.ad_swapped_ventricles),
            mean(|r| r.cn_psnr_own),
            mean(|r| r.cn_psnr_partner),
            mean(|r| r.cn_psnr_cross_mean),
            mean(|r| r.ad_psnr_own),
            mean(|r| r.ad_psnr_partner),
            mean(|r| r.ad_psnr_cross_mean),
            100.0 * self.ad_growth_fraction(),
            100.0 * self.cn_stasis_fraction(),
            100.0 * self.identity_fraction(),
            100.0 * self.identity_margin_fraction(),
        )
    }
}

fn pair_subjects<'a>(cohort: &'a Cohort, cn: &str, ad: &str) -> Result<(&'a CohortSubject, &'a CohortSubject)> {
    let find = |id: &str| {
        cohort
            .find(id)
            .ok_or_else(|| Error::Pairing(format!("swap pair names unknown subject {id}")))
    };
    Ok((find(cn)?, find(ad)?))
}

/// Shifts each partner's latent by its own attributes, swaps the progression
/// subspaces and decodes both results.
pub fn run_swap_experiment(state: &TrainState, cohort: &Cohort, seed: u64) -> Result<SwapReport> {
    if state.progression_steps == 0 {
        return Err(Error::Checkpoint("swap experiment needs a progression-trained model".into()));
    }
    let m = state.config.model.progression_dim;
    let kind = state.nets.kind();
    let subseq = state.config.subsequence()?;
    let cfg = &cohort.config.phantom;
    let test_baselines: Vec<(&str, _)> = cohort
        .split(Split::Test)
        .map(|s| (s.subject.subject_id.as_str(), to_grid(&s.baseline.image)))
        .collect();
    let cross_mean = |own: &str, out: &Grid| -> Result<f64> {
        let mut values = Vec::new();
        for (id, b) in &test_baselines {
            if *id != own {
                values.push(psnr(out, b)?);
            }
        }
        if values.is_empty() {
            return Err(Error::Argument("cross-subject PSNR needs a second test subject".into()));
        }
        Ok(values.iter().sum::<f64>() / values.len() as f64)
    };
    let mut rows = Vec::with_capacity(cohort.swap_pairs.len());
    for (i, pair) in cohort.swap_pairs.iter().enumerate() {
        let (cn, ad) = pair_subjects(cohort, &pair.cn_subject, &pair.ad_subject)?;
        let cn_attr = AttributeVector::from_bin(Diagnosis::Cn, CN_SWAP_BIN)?;
        let ad_attr = encode_attributes(Diagnosis::Ad, pair.ad_gap)?;
        let z = shifted_latents(&state.nets, &[&cn.baseline.image, &ad.baseline.image], &[cn_attr, ad_attr])?;
        let z = LatentVector::from_tensor_rows(&z)?;
        let (cn_swapped, ad_swapped) = latent_swap(&z[0], &z[1], m)?;
        let latents = Tensor::cat(&[cn_swapped.to_tensor(kind), ad_swapped.to_tensor(kind)], 0);
        let seeds = [item_seed(seed, 2 * i), item_seed(seed, 2 * i + 1)];
        let out = generate_from_latents(&state.nets, state.schedule(), &subseq, &latents, &seeds)?;
        let vent = |s: &CohortSubject, img: &Image| -> Result<f64> {
            let masks = PhantomSegmenter::new(&s.subject, cfg).segment(img)?;
            Ok(normalized_volume(&masks, Region::Ventricles, &s.subject))
        };
        let (cn_b, ad_b) = (to_grid(&cn.baseline.image), to_grid(&ad.baseline.image));
        let (cn_o, ad_o) = (to_grid(&out[0]), to_grid(&out[1]));
        rows.push(SwapRow {
            cn_subject: pair.cn_subject.clone(),
            ad_subject: pair.ad_subject.clone(),
            cn_attribute_bin: cn_attr.age_bin(),
            ad_attribute_bin: ad_attr.age_bin(),
            cn_baseline_ventricles: vent(cn, &cn.baseline.image)?,
            ad_baseline_ventricles: vent(ad, &ad.baseline.image)?,
            cn_swapped_ventricles: vent(cn, &out[0])?,
            ad_swapped_ventricles: vent(ad, &out[1])?,
            cn_psnr_own: psnr(&cn_o, &cn_b)?,
            cn_psnr_partner: psnr(&cn_o, &ad_b)?,
            ad_psnr_own: psnr(&ad_o, &ad_b)?,
            ad_psnr_partner: psnr(&ad_o, &cn_b)?,
            cn_psnr_cross_mean: cross_mean(&pair.cn_subject, &cn_o)?,
            ad_psnr_cross_mean: cross_mean(&pair.ad_subject, &ad_o)?,
        });
    }
    Ok(SwapReport { rows })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Subspace {
    Full,
    FirstM(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassEllipse {
    pub label: String,
    pub count: usize,
    pub mean: [f64; 2],
    /// Row-major 2x2 covariance.
    pub covariance: [f64; 4],
}

#[derive(Debug, Clone)]
pub struct Projection {
    pub coords: Vec<[f64; 2]>,
    /// Variance along the two principal axes.
    pub variances: [f64; 2],
    pub ellipses: Vec<ClassEllipse>,
}

/// Centers the (restricted) latents and projects them on their top two
/// principal directions. Axis signs are fixed so each axis has a positive
/// largest-magnitude loading, which keeps the output deterministic.
pub fn project_latents(latents: &[LatentVector], labels: &[String], subspace: Subspace) -> Result<Projection> {
    if latents.len() < 3 {
        return Err(Error::Argument(format!("projection needs at least 3 latents, got {}", latents.len())));
    }
    if labels.len() != latents.len() {
        return Err(Error::Contract("one label per latent required".into()));
    }
    let d = latents[0].dim();
    if latents.iter().any(|z| z.dim() != d) {
        return Err(Error::Contract("latents differ in dimension".into()));
    }
    let width = match subspace {
        Subspace::Full => d,
        Subspace::FirstM(m) if m >= 1 && m <= d => m,
        Subspace::FirstM(m) => return Err(Error::Contract(format!("subspace width {m} outside 1..={d}"))),
    };
    let n = latents.len();
    let mut x = DMatrix::from_fn(n, width, |i, j| latents[i].0[j]);
    let first = x.row(0).clone_owned();
    if (1..n).all(|i| x.row(i) == first) {
        return Err(Error::Degenerate("all latents coincide".into()));
    }
    for j in 0..width {
        let mean = x.column(j).mean();
        x.column_mut(j).add_scalar_mut(-mean);
    }
    let cov = x.transpose() * &x / (n as f64 - 1.0);
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..width).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut axes = Vec::new();
    let mut variances = [0.0; 2];
    for (k, &idx) in order.iter().take(2).enumerate() {
        let mut v = eig.eigenvectors.column(idx).clone_owned();
        let lead = v.iter().cloned().fold(0.0f64, |acc, e| if e.abs() > acc.abs() { e } else { acc });
        if lead < 0.0 {
            v = -v;
        }
        variances[k] = eig.eigenvalues[idx].max(0.0);
        axes.push(v);
    }
    let coords: Vec<[f64; 2]> = (0..n)
        .map(|i| {
            let row = x.row(i);
            let p = |k: usize| axes.get(k).map_or(0.0, |a| row.dot(&a.transpose()));
            [p(0), p(1)]
        })
        .collect();
    let mut groups: BTreeMap<&str, Vec<[f64; 2]>> = BTreeMap::new();
    for (c, l) in coords.iter().zip(labels) {
        groups.entry(l.as_str()).or_default().push(*c);
    }
    let ellipses = groups
        .into_iter()
        .map(|(label, pts)| {
            let k = pts.len() as f64;
            let mean = [pts.iter().map(|p| p[0]).sum::<f64>() / k, pts.iter().map(|p| p[1]).sum::<f64>() / k];
            let denom = (k - 1.0).max(1.0);
            let c = |a: usize, b: usize| pts.iter().map(|p| (p[a] - mean[a]) * (p[b] - mean[b])).sum::<f64>() / denom;
            ClassEllipse {
                label: label.to_string(),
                count: pts.len(),
                mean,
                covariance: [c(0, 0), c(0, 1), c(1, 0), c(1, 1)],
            }
        })
        .collect();
    Ok(Projection {
        coords,
        variances,
        ellipses,
    })
}

/// Mean silhouette coefficient with Euclidean distance. Points in singleton
/// classes score 0.
pub fn silhouette(coords: &[[f64; 2]], labels: &[String]) -> Result<f64> {
    if coords.len() != labels.len() {
        return Err(Error::Contract("one label per point required".into()));
    }
    let classes: Vec<&String> = {
        let mut c: Vec<&String> = labels.iter().collect();
        c.sort();
        c.dedup();
        c
    };
    if classes.len() < 2 {
        return Err(Error::Degenerate("silhouette needs at least two classes".into()));
    }
    let dist = |a: [f64; 2], b: [f64; 2]| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
    let mut total = 0.0;
    for (i, (&p, l)) in coords.iter().zip(labels).enumerate() {
        let mut own = (0.0, 0usize);
        let mut other: BTreeMap<&String, (f64, usize)> = BTreeMap::new();
        for (j, (&q, m)) in coords.iter().zip(labels).enumerate() {
            if i == j {
                continue;
            }
            let d = dist(p, q);
            if m == l {
                own = (own.0 + d, own.1 + 1);
            } else {
                let e = other.entry(m).or_default();
                *e = (e.0 + d, e.1 + 1);
            }
        }
        if own.1 == 0 {
            continue;
        }
        let a = own.0 / own.1 as f64;
        let b = other.values().map(|(s, n)| s / *n as f64).fold(f64::INFINITY, f64::min);
        let denom = a.max(b);
        if denom > 0.0 {
            total += (b - a) / denom;
        }
    }
    Ok(total / coords.len() as f64)
}

/// Age band used in projection class labels.
pub fn age_band(age: f64) -> &'static str {
    if age < 70.0 {
        "<70"
    } else if age < 76.0 {
        "70-76"
    } else {
        ">=76"
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectedPoint {
    pub subject_id: String,
    pub diagnosis: Diagnosis,
    pub age: f64,
    pub x: f64,
    pub y: f64,
}

/// Shifted latents (own diagnosis, true gap) of every subject in `split` with a follow-up.
pub fn cohort_latents<'a>(state: &TrainState, cohort: &'a Cohort, split: Split) -> Result<Vec<(&'a CohortSubject, LatentVector)>> {
    let subjects: Vec<&CohortSubject> = cohort.split(split).filter(|s| !s.followups.is_empty()).collect();
    let mut out = Vec::with_capacity(subjects.len());
    for chunk in subjects.chunks(32) {
        let attrs = chunk
            .iter()
            .map(|s| encode_attributes(s.subject.diagnosis, s.followups[0].age - s.baseline.age))
            .collect::<Result<Vec<_>>>()?;
        let images: Vec<&Image> = chunk.iter().map(|s| &s.baseline.image).collect();
        let z = LatentVector::from_tensor_rows(&shifted_latents(&state.nets, &images, &attrs)?)?;
        out.extend(chunk.iter().copied().zip(z));
    }
    Ok(out)
}

pub fn write_projection_csv(points: &[ProjectedPoint], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for p in points {
        w.serialize(p)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Scatter plot with one colour per diagnosis.
pub fn save_scatter(points: &[ProjectedPoint], path: &Path, size: u32) -> Result<()> {
    let mut img = image::RgbImage::from_pixel(size, size, image::Rgb([255, 255, 255]));
    if points.is_empty() {
        img.save(path)?;
        return Ok(());
    }
    let span = |f: fn(&ProjectedPoint) -> f64| {
        let lo = points.iter().map(f).fold(f64::INFINITY, f64::min);
        let hi = points.iter().map(f).fold(f64::NEG_INFINITY, f64::max);
        (lo, (hi - lo).max(1e-12))
    };
    let ((x0, xs), (y0, ys)) = (span(|p| p.x), span(|p| p.y));
    let margin = 6.0;
    let usable = size as f64 - 2.0 * margin;
    for p in points {
        let colour = match p.diagnosis {
            Diagnosis::Cn => image::Rgb([30, 110, 220]),
            Diagnosis::Mci => image::Rgb([40, 170, 70]),
            Diagnosis::Ad => image::Rgb([220, 50, 40]),
        };
        let cx = margin + (p.x - x0) / xs * usable;
        let cy = margin + (1.0 - (p.y - y0) / ys) * usable;
        for dy in -2i64..=2 {
            for dx in -2i64..=2 {
                let (px, py) = (cx as i64 + dx, cy as i64 + dy);
                if dx * dx + dy * dy <= 4 && px >= 0 && py >= 0 && px < size as i64 && py < size as i64 {
                    img.put_pixel(px as u32, py as u32, colour);
                }
            }
        }
    }
    img.save(path)?;
    Ok(())
}
