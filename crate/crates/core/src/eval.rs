//! Image-quality metrics, region volumetrics, demons registration with
//! Jacobian analysis, the classifier augmentation study and report output.

use std::path::{Path, PathBuf};

use ndarray::{Array2, Zip};
use num_rational::Ratio;
use serde::{Deserialize, Serialize};
use tch::{Kind, Tensor};

use crate::cohort::{Cohort, CohortSubject, Split};
use crate::error::{Error, Result};
use crate::imaging::{images_to_tensor, DisplacementField, Image, Mask};
use crate::nn::{Conv2d, Linear, ParamBuilder, ParamStore};
use crate::phantom::{PhantomConfig, Region};
use crate::progression::{encode_attributes, AttributeVector, Diagnosis, AGE_BINS};
use crate::segment::{normalized_volume, PhantomSegmenter, Segmenter};
use crate::rng::SeededRng;
use crate::train::{generate_followups, parameter_grads, Adam, TrainState};

pub const PSNR_CAP_DB: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

pub type Grid = Array2<f64>;

pub fn to_grid(image: &Image) -> Grid {
    image.mapv(|v| v as f64)
}

fn same_dims(a: &Grid, b: &Grid, what: &str) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::Contract(format!("{what}: shapes {:?} and {:?} differ", a.dim(), b.dim())));
    }
    Ok(())
}

pub fn mse(a: &Grid, b: &Grid) -> Result<f64> {
    same_dims(a, b, "mse")?;
    Ok(Zip::from(a).and(b).fold(0.0, |acc, x, y| acc + (x - y) * (x - y)) / a.len() as f64)
}

/// PSNR for unit dynamic range, capped at [`PSNR_CAP_DB`].
pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_CAP_DB
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB)
    }
}

pub fn psnr(a: &Grid, b: &Grid) -> Result<f64> {
    mse(a, b).map(psnr_from_mse)
}

fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let half = (size / 2) as f64;
    let k: Vec<f64> = (0..size)
        .map(|i| (-(i as f64 - half).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable filtering keeping only positions where the window fits.
fn filter_valid(x: &Grid, k: &[f64]) -> Grid {
    let (h, w) = x.dim();
    let n = k.len();
    let rows = Array2::from_shape_fn((h, w - n + 1), |(r, c)| (0..n).map(|i| k[i] * x[[r, c + i]]).sum::<f64>());
    Array2::from_shape_fn((h - n + 1, w - n + 1), |(r, c)| (0..n).map(|i| k[i] * rows[[r + i, c]]).sum::<f64>())
}

/// Mean structural similarity with an 11-tap Gaussian window (sigma 1.5),
/// K1 = 0.01, K2 = 0.03 and unit dynamic range, over window positions that
/// fit inside the image. Smaller images shrink the window to fit.
pub fn ssim(a: &Grid, b: &Grid) -> Result<f64> {
    same_dims(a, b, "ssim")?;
    if a == b {
        return Ok(1.0);
    }
    let (h, w) = a.dim();
    let mut size = SSIM_WINDOW.min(h).min(w);
    if size % 2 == 0 {
        size -= 1;
    }
    let k = gaussian_kernel(size, SSIM_SIGMA);
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let mu_a = filter_valid(a, &k);
    let mu_b = filter_valid(b, &k);
    let aa = filter_valid(&(a * a), &k);
    let bb = filter_valid(&(b * b), &k);
    let ab = filter_valid(&(a * b), &k);
    let mut total = 0.0;
    Zip::from(&mu_a).and(&mu_b).and(&aa).and(&bb).and(&ab).for_each(|ma, mb, aa, bb, ab| {
        let va = aa - ma * ma;
        let vb = bb - mb * mb;
        let cov = ab - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    });
    Ok(total / mu_a.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub psnr: f64,
    pub ssim: f64,
    pub mse: f64,
}

pub fn image_metrics(a: &Grid, b: &Grid) -> Result<ImageMetrics> {
    let mse = mse(a, b)?;
    Ok(ImageMetrics {
        psnr: psnr_from_mse(mse),
        ssim: ssim(a, b)?,
        mse,
    })
}

/// `|(gen - b)/b - (true - b)/b|` for region volumes.
pub fn relative_volume_error(vol_b: f64, vol_true: f64, vol_gen: f64) -> Result<f64> {
    if !(vol_b > 0.0) {
        return Err(Error::UndefinedRegion(format!("baseline region volume is {vol_b}")));
    }
    Ok(((vol_gen - vol_b) / vol_b - (vol_true - vol_b) / vol_b).abs())
}

/// Exact rational form of [`relative_volume_error`] for voxel counts.
pub fn relative_volume_error_exact(vol_b: u64, vol_true: u64, vol_gen: u64) -> Result<Ratio<i128>> {
    if vol_b == 0 {
        return Err(Error::UndefinedRegion("baseline region has no voxels".into()));
    }
    let b = vol_b as i128;
    let change = |v: u64| Ratio::new(v as i128 - b, b);
    let d = change(vol_gen) - change(vol_true);
    Ok(if d < Ratio::from_integer(0) { -d } else { d })
}

/// Voxels with coverage of at least one half.
pub fn voxel_count(mask: &Mask) -> u64 {
    mask.iter().filter(|v| **v >= 0.5).count() as u64
}

pub fn gaussian_smooth(x: &Grid, sigma: f64) -> Grid {
    if sigma <= 0.0 {
        return x.clone();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let k = gaussian_kernel((2 * radius + 1) as usize, sigma);
    let (h, w) = x.dim();
    let clamp = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let rows = Array2::from_shape_fn((h, w), |(r, c)| {
        (-radius..=radius)
            .map(|d| k[(d + radius) as usize] * x[[r, clamp(c as isize + d, w)]])
            .sum::<f64>()
    });
    Array2::from_shape_fn((h, w), |(r, c)| {
        (-radius..=radius)
            .map(|d| k[(d + radius) as usize] * rows[[clamp(r as isize + d, h), c]])
            .sum::<f64>()
    })
}

/// Bilinear sample with replicated borders.
pub fn sample_bilinear(x: &Grid, r: f64, c: f64) -> f64 {
    let (h, w) = x.dim();
    let r = r.clamp(0.0, (h - 1) as f64);
    let c = c.clamp(0.0, (w - 1) as f64);
    let (r0, c0) = (r.floor() as usize, c.floor() as usize);
    let (r1, c1) = ((r0 + 1).min(h - 1), (c0 + 1).min(w - 1));
    let (fr, fc) = (r - r0 as f64, c - c0 as f64);
    let top = x[[r0, c0]] * (1.0 - fc) + x[[r0, c1]] * fc;
    let bottom = x[[r1, c0]] * (1.0 - fc) + x[[r1, c1]] * fc;
    top * (1.0 - fr) + bottom * fr
}

/// `moving(x + u(x))` on the field's grid.
pub fn warp(moving: &Grid, field: &DisplacementField) -> Grid {
    Array2::from_shape_fn(field.shape(), |(r, c)| {
        sample_bilinear(moving, r as f64 + field.rows[[r, c]], c as f64 + field.cols[[r, c]])
    })
}

fn gradient(x: &Grid) -> (Grid, Grid) {
    let (h, w) = x.dim();
    let d = |get: &dyn Fn(usize) -> f64, i: usize, n: usize| -> f64 {
        if n == 1 {
            0.0
        } else if i == 0 {
            get(1) - get(0)
        } else if i == n - 1 {
            get(n - 1) - get(n - 2)
        } else {
            (get(i + 1) - get(i - 1)) / 2.0
        }
    };
    let gr = Array2::from_shape_fn((h, w), |(r, c)| d(&|i| x[[i, c]], r, h));
    let gc = Array2::from_shape_fn((h, w), |(r, c)| d(&|j| x[[r, j]], c, w));
    (gr, gc)
}

/// `det(I + grad u)` with central differences, one-sided at the borders.
pub fn jacobian_determinant(field: &DisplacementField) -> Grid {
    let (dur_dr, dur_dc) = gradient(&field.rows);
    let (duc_dr, duc_dc) = gradient(&field.cols);
    Zip::from(&dur_dr)
        .and(&dur_dc)
        .and(&duc_dr)
        .and(&duc_dc)
        .map_collect(|a, b, c, d| (1.0 + a) * (1.0 + d) - b * c)
}

/// Coverage-weighted mean of `values` over `mask`.
pub fn region_mean(values: &Grid, mask: &Mask) -> Result<f64> {
    if values.dim() != mask.dim() {
        return Err(Error::Contract("region mask and value map differ in shape".into()));
    }
    let (num, den) = Zip::from(values)
        .and(mask)
        .fold((0.0, 0.0), |(n, d), v, m| (n + v * *m as f64, d + *m as f64));
    if den <= 0.0 {
        return Err(Error::UndefinedRegion("empty region mask".into()));
    }
    Ok(num / den)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DemonsConfig {
    pub scales: usize,
    pub iterations: usize,
    /// Gaussian smoothing of each update step (fluid regularisation), in pixels.
    pub smoothing_sigma: f64,
    /// Gaussian smoothing of the accumulated field after each step (diffusion regularisation).
    pub field_sigma: f64,
    /// Weight of the intensity-difference term in the update normaliser.
    pub normalizer: f64,
}

impl Default for DemonsConfig {
    fn default() -> Self {
        Self {
            scales: 3,
            iterations: 50,
            smoothing_sigma: 2.0,
            field_sigma: 0.0,
            normalizer: 1.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Registration {
    pub field: DisplacementField,
    pub ssd_identity: f64,
    pub ssd_final: f64,
    /// Set when the sum of squared differences rose at every scale.
    pub diverged: bool,
}

fn ssd(a: &Grid, b: &Grid) -> f64 {
    Zip::from(a).and(b).fold(0.0, |acc, x, y| acc + (x - y) * (x - y))
}

fn downsample(x: &Grid) -> Grid {
    let (h, w) = x.dim();
    let (hh, ww) = (h.div_ceil(2), w.div_ceil(2));
    Array2::from_shape_fn((hh, ww), |(r, c)| {
        let rs = [2 * r, (2 * r + 1).min(h - 1)];
        let cs = [2 * c, (2 * c + 1).min(w - 1)];
        rs.iter().flat_map(|&i| cs.iter().map(move |&j| (i, j))).map(|(i, j)| x[[i, j]]).sum::<f64>() / 4.0
    })
}

fn upsample_field(f: &DisplacementField, shape: (usize, usize)) -> DisplacementField {
    let (h, w) = f.shape();
    let scale_r = h as f64 / shape.0 as f64;
    let scale_c = w as f64 / shape.1 as f64;
    let resample = |g: &Grid, factor: f64| {
        Array2::from_shape_fn(shape, |(r, c)| {
            let rr = (r as f64 + 0.5) * scale_r - 0.5;
            let cc = (c as f64 + 0.5) * scale_c - 0.5;
            sample_bilinear(g, rr, cc) * factor
        })
    };
    DisplacementField {
        rows: resample(&f.rows, 1.0 / scale_r),
        cols: resample(&f.cols, 1.0 / scale_c),
    }
}

/// Multi-scale demons registration: returns `u` on the fixed grid such that
/// `moving(x + u(x))` matches `fixed(x)`.
pub fn register_demons(moving: &Grid, fixed: &Grid, config: &DemonsConfig) -> Result<Registration> {
    same_dims(moving, fixed, "register_demons")?;
    if config.scales == 0 {
        return Err(Error::Config("demons needs at least one scale".into()));
    }
    let mut pyramid = vec![(moving.clone(), fixed.clone())];
    for _ in 1..config.scales {
        let (m, f) = pyramid.last().expect("non-empty");
        if m.dim().0 < 8 || m.dim().1 < 8 {
            break;
        }
        pyramid.push((downsample(m), downsample(f)));
    }
    let mut field: Option<DisplacementField> = None;
    let mut rises = 0;
    for (m, f) in pyramid.iter().rev() {
        let shape = f.dim();
        let mut u = match &field {
            Some(coarse) => upsample_field(coarse, shape),
            None => DisplacementField::zeros(shape.0, shape.1),
        };
        let (gfr, gfc) = gradient(f);
        let start = ssd(&warp(m, &u), f);
        for _ in 0..config.iterations {
            let warped = warp(m, &u);
            let (gwr, gwc) = gradient(&warped);
            let mut step = DisplacementField::zeros(shape.0, shape.1);
            for ((r, c), fv) in f.indexed_iter() {
                let diff = fv - warped[[r, c]];
                let gr = 0.5 * (gfr[[r, c]] + gwr[[r, c]]);
                let gc = 0.5 * (gfc[[r, c]] + gwc[[r, c]]);
                let denom = gr * gr + gc * gc + config.normalizer * diff * diff;
                if denom > 1e-12 {
                    step.rows[[r, c]] = diff * gr / denom;
                    step.cols[[r, c]] = diff * gc / denom;
                }
            }
            u = DisplacementField {
                rows: gaussian_smooth(&(u.rows + gaussian_smooth(&step.rows, config.smoothing_sigma)), config.field_sigma),
                cols: gaussian_smooth(&(u.cols + gaussian_smooth(&step.cols, config.smoothing_sigma)), config.field_sigma),
            };
        }
        if ssd(&warp(m, &u), f) > start {
            rises += 1;
        }
        field = Some(u);
    }
    let field = field.expect("at least one scale");
    if !field.is_finite() {
        return Err(Error::Degenerate("registration produced a non-finite field".into()));
    }
    let diverged = rises == pyramid.len() && rises >= 3;
    if diverged {
        log::warn!("demons registration: SSD increased at every scale");
    }
    Ok(Registration {
        ssd_identity: ssd(moving, fixed),
        ssd_final: ssd(&warp(moving, &field), fixed),
        field,
        diverged,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierConfig {
    pub channels: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Training images per run; defaults to the real pool size.
    pub budget: Option<usize>,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            channels: vec![8, 16, 32],
            epochs: 15,
            batch_size: 32,
            learning_rate: 1e-3,
            budget: None,
        }
    }
}

/// Small strided CNN over single slices with a 3-way diagnosis head.
pub struct Classifier {
    store: ParamStore,
    convs: Vec<Conv2d>,
    head: Linear,
}

impl Classifier {
    pub fn new(config: &ClassifierConfig, seed: u64) -> Self {
        let mut store = ParamStore::new(Kind::Float);
        let mut rng = SeededRng::substream(seed, 0xc1a5);
        let mut pb = ParamBuilder::new(&mut store, &mut rng);
        let mut convs = Vec::new();
        let mut prev = 1;
        for (i, &c) in config.channels.iter().enumerate() {
            convs.push(Conv2d::new(&mut pb.sub(&format!("conv{i}")), prev, c, 3, 2));
            prev = c;
        }
        let head = Linear::new(&mut pb.sub("head"), prev, Diagnosis::ALL.len());
        Self { store, convs, head }
    }

    pub fn logits(&self, x: &Tensor) -> Tensor {
        let mut h = x.shallow_clone();
        for conv in &self.convs {
            h = conv.forward(&h).silu();
        }
        self.head.forward(&h.mean_dim(&[2i64, 3][..], false, Kind::Float))
    }

    pub fn fit(&mut self, images: &[&Image], labels: &[Diagnosis], config: &ClassifierConfig, seed: u64) -> Result<()> {
        let mut rng = SeededRng::substream(seed, 0xf17);
        let mut adam = Adam::new(config.learning_rate);
        let mut order: Vec<usize> = (0..images.len()).collect();
        for _ in 0..config.epochs {
            rng.shuffle(&mut order);
            for chunk in order.chunks(config.batch_size.max(1)) {
                let x = images_to_tensor(chunk.iter().map(|&i| images[i]), Kind::Float)?;
                let y: Vec<i64> = chunk.iter().map(|&i| labels[i].index() as i64).collect();
                let loss = self.logits(&x).cross_entropy_for_logits(&Tensor::from_slice(&y));
                let grads = parameter_grads(&self.store, &loss);
                adam.step(&self.store, &grads);
            }
        }
        Ok(())
    }

    pub fn accuracy(&self, images: &[&Image], labels: &[Diagnosis]) -> Result<f64> {
        if images.is_empty() {
            return Err(Error::EmptyClass("no evaluation images".into()));
        }
        let mut correct = 0;
        for (chunk, truth) in images.chunks(64).zip(labels.chunks(64)) {
            let x = images_to_tensor(chunk.iter().copied(), Kind::Float)?;
            let pred: Vec<i64> = tch::no_grad(|| self.logits(&x).argmax(1, false)).try_into()?;
            correct += pred.iter().zip(truth).filter(|(p, t)| **p == t.index() as i64).count();
        }
        Ok(correct as f64 / images.len() as f64)
    }
}

pub const STUDY_RATIOS: [(u32, u32); 5] = [(20, 80), (40, 60), (60, 40), (80, 20), (100, 0)];

#[derive(Debug, Clone)]
pub struct LabeledImage {
    pub image: Image,
    pub label: Diagnosis,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyRow {
    pub label: String,
    pub real_percent: u32,
    pub generated_percent: u32,
    pub real_count: usize,
    pub generated_count: usize,
    pub accuracy_mean: f64,
    pub accuracy_std: f64,
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 {
        values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

/// `n` items drawn without replacement, split across classes in proportion
/// to their share of `pool` (largest remainder).
fn stratified_pick<'a>(pool: &'a [LabeledImage], n: usize, rng: &mut SeededRng) -> Vec<&'a LabeledImage> {
    let mut by_class: Vec<Vec<usize>> = Diagnosis::ALL
        .iter()
        .map(|d| (0..pool.len()).filter(|&i| pool[i].label == *d).collect())
        .collect();
    for idx in &mut by_class {
        rng.shuffle(idx);
    }
    let total = pool.len().max(1) as f64;
    let exact: Vec<f64> = by_class.iter().map(|c| n as f64 * c.len() as f64 / total).collect();
    let mut take: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..take.len()).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())));
    let mut missing = n.saturating_sub(take.iter().sum());
    for &k in order.iter().cycle().take(3 * take.len()) {
        if missing == 0 {
            break;
        }
        if take[k] < by_class[k].len() {
            take[k] += 1;
            missing -= 1;
        }
    }
    by_class
        .iter()
        .zip(&take)
        .flat_map(|(idx, &k)| idx[..k].iter().map(|&i| &pool[i]))
        .collect()
}

fn check_classes(items: &[&LabeledImage], what: &str) -> Result<()> {
    for d in Diagnosis::ALL {
        if !items.iter().any(|i| i.label == d) {
            return Err(Error::EmptyClass(format!("{what} has no {d} images")));
        }
    }
    Ok(())
}

/// Accuracy on `held_out` of classifiers trained on real/generated mixtures of a fixed budget,
/// plus real-only rows using just the real share of each mixture.
pub fn augmentation_study(
    real: &[LabeledImage],
    generated: &[LabeledImage],
    held_out: &[LabeledImage],
    ratios: &[(u32, u32)],
    config: &ClassifierConfig,
    seeds: &[u64],
) -> Result<Vec<StudyRow>> {
    let budget = config.budget.unwrap_or(real.len());
    if budget == 0 || seeds.is_empty() {
        return Err(Error::Config("augmentation study needs a positive budget and at least one seed".into()));
    }
    let test_imgs: Vec<&Image> = held_out.iter().map(|i| &i.image).collect();
    let test_labels: Vec<Diagnosis> = held_out.iter().map(|i| i.label).collect();
    let mut rows = Vec::new();
    for &(rd, gd) in ratios {
        if rd + gd != 100 {
            return Err(Error::Argument(format!("ratio {rd}:{gd} does not sum to 100")));
        }
        let n_real = (budget as u64 * rd as u64 / 100) as usize;
        let n_gen = budget - n_real;
        if n_real > real.len() || n_gen > generated.len() {
            return Err(Error::Argument(format!(
                "ratio {rd}:{gd} needs {n_real} real and {n_gen} generated images, have {} and {}",
                real.len(),
                generated.len()
            )));
        }
        let mut mixed = Vec::new();
        let mut real_only = Vec::new();
        for &seed in seeds {
            let mut rng = SeededRng::substream(seed, rd as u64);
            let reals = stratified_pick(real, n_real, &mut rng);
            let mut train = reals.clone();
            train.extend(stratified_pick(generated, n_gen, &mut rng));
            check_classes(&train, &format!("training mixture {rd}:{gd}"))?;
            let fit = |items: &[&LabeledImage]| -> Result<f64> {
                let imgs: Vec<&Image> = items.iter().map(|i| &i.image).collect();
                let labels: Vec<Diagnosis> = items.iter().map(|i| i.label).collect();
                let mut clf = Classifier::new(config, seed);
                clf.fit(&imgs, &labels, config, seed)?;
                clf.accuracy(&test_imgs, &test_labels)
            };
            mixed.push(fit(&train)?);
            if gd > 0 {
                check_classes(&reals, &format!("real share of {rd}:{gd}"))?;
                real_only.push(fit(&reals)?);
            }
        }
        let (m, s) = mean_std(&mixed);
        log::info!("augmentation {rd}:{gd} accuracy {m:.3} +- {s:.3}");
        rows.push(StudyRow {
            label: format!("RD{rd}+GD{gd}"),
            real_percent: rd,
            generated_percent: gd,
            real_count: n_real,
            generated_count: n_gen,
            accuracy_mean: m,
            accuracy_std: s,
        });
        if gd > 0 {
            let (m, s) = mean_std(&real_only);
            rows.push(StudyRow {
                label: format!("RD{rd}"),
                real_percent: rd,
                generated_percent: 0,
                real_count: n_real,
                generated_count: 0,
                accuracy_mean: m,
                accuracy_std: s,
            });
        }
    }
    Ok(rows)
}

/// One evaluated test subject.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectMetrics {
    pub subject_id: String,
    pub diagnosis: Diagnosis,
    pub age_gap: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub mse: f64,
    pub rve_ventricles: f64,
    pub rve_hippocampus: f64,
    pub rve_amygdala: f64,
    pub jac_true_ventricles: f64,
    pub jac_gen_ventricles: f64,
    pub jac_true_hippocampus: f64,
    pub jac_gen_hippocampus: f64,
    pub jac_true_amygdala: f64,
    pub jac_gen_amygdala: f64,
}

impl SubjectMetrics {
    fn numeric(&self) -> [(&'static str, f64); 12] {
        [
            ("psnr", self.psnr),
            ("ssim", self.ssim),
            ("mse", self.mse),
            ("rve_ventricles", self.rve_ventricles),
            ("rve_hippocampus", self.rve_hippocampus),
            ("rve_amygdala", self.rve_amygdala),
            ("jac_true_ventricles", self.jac_true_ventricles),
            ("jac_gen_ventricles", self.jac_gen_ventricles),
            ("jac_true_hippocampus", self.jac_true_hippocampus),
            ("jac_gen_hippocampus", self.jac_gen_hippocampus),
            ("jac_true_amygdala", self.jac_true_amygdala),
            ("jac_gen_amygdala", self.jac_gen_amygdala),
        ]
    }
}

#[derive(Debug, Clone, Default)]
pub struct MetricReport {
    pub rows: Vec<SubjectMetrics>,
}

impl MetricReport {
    /// `(name, mean, std)` per numeric column, recomputed from the rows.
    pub fn aggregates(&self) -> Vec<(&'static str, f64, f64)> {
        let Some(first) = self.rows.first() else {
            return Vec::new();
        };
        first
            .numeric()
            .iter()
            .enumerate()
            .map(|(i, (name, _))| {
                let values: Vec<f64> = self.rows.iter().map(|r| r.numeric()[i].1).collect();
                let (m, s) = mean_std(&values);
                (*name, m, s)
            })
            .collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for row in &self.rows {
            w.serialize(row)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn summary_table(&self) -> String {
        let mut out = format!("{:<22} {:>12} {:>12}\n", "metric", "mean", "std");
        for (name, m, s) in self.aggregates() {
            out.push_str(&format!("{name:<22} {m:>12.5} {s:>12.5}\n"));
        }
        out.push_str(&format!("subjects: {}\n", self.rows.len()));
        out
    }
}

/// Side-by-side panel: baseline, generated follow-up, true follow-up and
/// the absolute error map scaled to its own maximum.
pub fn save_error_panel(baseline: &Image, generated: &Image, truth: &Image, path: &Path) -> Result<()> {
    let (h, w) = baseline.dim();
    let err = (generated - truth).mapv(f32::abs);
    let peak = err.iter().cloned().fold(f32::EPSILON, f32::max);
    let mut panel = Image::zeros((h, 4 * w));
    for (i, img) in [baseline.clone(), generated.clone(), truth.clone(), err / peak].iter().enumerate() {
        panel.slice_mut(ndarray::s![.., i * w..(i + 1) * w]).assign(img);
    }
    crate::imaging::save_png(&panel, path, 0.0, 1.0)
}

/// Seed for the `index`-th generated image of a run.
pub fn item_seed(seed: u64, index: usize) -> u64 {
    SeededRng::substream(seed, 0x5eed_0000 + index as u64).next_u64()
}

#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub seed: u64,
    pub demons: DemonsConfig,
    pub max_subjects: Option<usize>,
    /// Directory for per-subject error panels.
    pub error_maps: Option<PathBuf>,
    pub batch_size: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            demons: DemonsConfig::default(),
            max_subjects: None,
            error_maps: None,
            batch_size: 16,
        }
    }
}

/// Generates each subject's first follow-up from its baseline with the true
/// diagnosis and gap, then scores it against the rendered follow-up.
pub fn evaluate_split(state: &TrainState, cohort: &Cohort, split: Split, options: &EvalOptions) -> Result<MetricReport> {
    let subjects: Vec<&CohortSubject> = cohort
        .split(split)
        .filter(|s| !s.followups.is_empty())
        .take(options.max_subjects.unwrap_or(usize::MAX))
        .collect();
    if let Some(dir) = &options.error_maps {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let subseq = state.config.subsequence()?;
    let cfg = &cohort.config.phantom;
    let mut rows = Vec::with_capacity(subjects.len());
    for (chunk_index, chunk) in subjects.chunks(options.batch_size.max(1)).enumerate() {
        let attrs = chunk
            .iter()
            .map(|s| encode_attributes(s.subject.diagnosis, s.followups[0].age - s.baseline.age))
            .collect::<Result<Vec<_>>>()?;
        let seeds: Vec<u64> = (0..chunk.len())
            .map(|i| item_seed(options.seed, chunk_index * options.batch_size.max(1) + i))
            .collect();
        let images: Vec<&Image> = chunk.iter().map(|s| &s.baseline.image).collect();
        let generated = generate_followups(&state.nets, state.schedule(), &subseq, &images, &attrs, &seeds)?;
        for (s, gen) in chunk.iter().zip(&generated) {
            let truth = &s.followups[0];
            let base_masks = s.baseline.masks()?;
            let true_masks = truth.masks()?;
            let gen_masks = PhantomSegmenter::new(&s.subject, cfg).segment(gen)?;
            let base = to_grid(&s.baseline.image);
            let m = image_metrics(&to_grid(gen), &to_grid(&truth.image))?;
            let rve = |r: Region| relative_volume_error(base_masks.area(r), true_masks.area(r), gen_masks.area(r));
            let jac_true = jacobian_determinant(&register_demons(&to_grid(&truth.image), &base, &options.demons)?.field);
            let jac_gen = jacobian_determinant(&register_demons(&to_grid(gen), &base, &options.demons)?.field);
            let jt = |r: Region| region_mean(&jac_true, base_masks.get(r));
            let jg = |r: Region| region_mean(&jac_gen, base_masks.get(r));
            if let Some(dir) = &options.error_maps {
                let path = dir.join(format!("{}_error.png", s.subject.subject_id));
                save_error_panel(&s.baseline.image, gen, &truth.image, &path)?;
            }
            rows.push(SubjectMetrics {
                subject_id: s.subject.subject_id.clone(),
                diagnosis: s.subject.diagnosis,
                age_gap: truth.age - s.baseline.age,
                psnr: m.psnr,
                ssim: m.ssim,
                mse: m.mse,
                rve_ventricles: rve(Region::Ventricles)?,
                rve_hippocampus: rve(Region::Hippocampus)?,
                rve_amygdala: rve(Region::Amygdala)?,
                jac_true_ventricles: jt(Region::Ventricles)?,
                jac_gen_ventricles: jg(Region::Ventricles)?,
                jac_true_hippocampus: jt(Region::Hippocampus)?,
                jac_gen_hippocampus: jg(Region::Hippocampus)?,
                jac_true_amygdala: jt(Region::Amygdala)?,
                jac_gen_amygdala: jg(Region::Amygdala)?,
            });
        }
    }
    Ok(MetricReport { rows })
}

/// Normalized region areas of generated follow-ups, averaged over `subjects`,
/// for each of the age-gap bins under a fixed `status`. Entry `[bin - 1][region]`.
pub fn area_by_age_bin(
    state: &TrainState,
    subjects: &[&CohortSubject],
    config: &PhantomConfig,
    status: Diagnosis,
    seed: u64,
) -> Result<Vec<[f64; 3]>> {
    if subjects.is_empty() {
        return Err(Error::Argument("no subjects to sweep".into()));
    }
    let subseq = state.config.subsequence()?;
    let images: Vec<&Image> = subjects.iter().map(|s| &s.baseline.image).collect();
    let segmenters: Vec<PhantomSegmenter> = subjects.iter().map(|s| PhantomSegmenter::new(&s.subject, config)).collect();
    let mut out = Vec::with_capacity(AGE_BINS);
    for bin in 1..=AGE_BINS {
        let attrs = vec![AttributeVector::from_bin(status, bin)?; subjects.len()];
        // The same noise for every bin isolates the effect of the attribute.
        let seeds: Vec<u64> = (0..subjects.len()).map(|i| item_seed(seed, i)).collect();
        let generated = generate_followups(&state.nets, state.schedule(), &subseq, &images, &attrs, &seeds)?;
        let mut sums = [0.0; 3];
        for ((s, seg), gen) in subjects.iter().zip(&segmenters).zip(&generated) {
            let masks = seg.segment(gen)?;
            for r in Region::ALL {
                sums[r.index()] += normalized_volume(&masks, r, &s.subject);
            }
        }
        out.push(sums.map(|v| v / subjects.len() as f64));
    }
    Ok(out)
}

fn ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            ranks[order[k]] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::Argument("spearman needs two equal-length series of at least 2".into()));
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let (mx, _) = mean_std(&rx);
    let (my, _) = mean_std(&ry);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        return Err(Error::Degenerate("constant series has no rank correlation".into()));
    }
    Ok(cov / (vx * vy).sqrt())
}
