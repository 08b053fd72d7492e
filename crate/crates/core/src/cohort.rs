//! Cohort generation, the flat volume codec and on-disk dataset layout.
//!
//! Flat volume format: one ASCII header line `H W D dtype\n` (dtype is `f32`)
//! followed by `H*W*D` little-endian 32-bit floats, slice-major (index
//! `d*H*W + r*W + c`).

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{DisplacementField, Image, Mask};
use crate::phantom::{render_phantom, LongitudinalSample, PhantomConfig, PhantomSubject, RegionMasks};
use crate::progression::Diagnosis;
use crate::rng::SeededRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CohortConfig {
    pub phantom: PhantomConfig,
    /// Subjects per diagnosis (CN, MCI, AD) in the training split.
    pub train_counts: [usize; 3],
    pub test_counts: [usize; 3],
    pub age_min: f64,
    pub age_max: f64,
    pub gap_mean: f64,
    pub gap_std: f64,
    pub gap_min: f64,
    pub gap_max: f64,
    pub followups_per_subject: usize,
    pub swap_age_tolerance: f64,
    /// Swap pairs: the AD partner's gap is at least this, the CN partner's below it.
    pub swap_gap_split: f64,
    pub min_swap_pairs: usize,
}

impl Default for CohortConfig {
    fn default() -> Self {
        Self {
            phantom: PhantomConfig::default(),
            train_counts: [179, 160, 147],
            test_counts: [159, 156, 151],
            age_min: 63.0,
            age_max: 82.0,
            gap_mean: 2.93,
            gap_std: 1.35,
            gap_min: 0.5,
            gap_max: 5.0,
            followups_per_subject: 1,
            swap_age_tolerance: 0.5,
            swap_gap_split: 2.0,
            min_swap_pairs: 1,
        }
    }
}

impl CohortConfig {
    /// Small cohort for CPU-scale training runs.
    pub fn toy() -> Self {
        Self {
            train_counts: [150, 150, 150],
            test_counts: [16, 8, 16],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.phantom.validate()?;
        if self.train_counts.iter().chain(&self.test_counts).any(|c| *c == 0) {
            return Err(Error::Config("every diagnosis needs a positive count in both splits".into()));
        }
        if !(self.age_min < self.age_max) {
            return Err(Error::Config("age_min must be below age_max".into()));
        }
        if !(0.0 < self.gap_min && self.gap_min <= self.gap_max && self.gap_max <= 5.0) {
            return Err(Error::Config("need 0 < gap_min <= gap_max <= 5".into()));
        }
        if self.followups_per_subject == 0 {
            return Err(Error::Config("followups_per_subject must be at least 1".into()));
        }
        if !(self.gap_min < self.swap_gap_split && self.swap_gap_split <= self.gap_max) {
            return Err(Error::Config("swap_gap_split must lie inside the gap range".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct CohortSubject {
    pub subject: PhantomSubject,
    pub split: Split,
    pub baseline: LongitudinalSample,
    pub followups: Vec<LongitudinalSample>,
}

/// A CN and an AD subject of similar age with the age gaps used when generating their follow-ups.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwapPair {
    pub cn_subject: String,
    pub ad_subject: String,
    pub cn_age: f64,
    pub ad_age: f64,
    pub cn_gap: f64,
    pub ad_gap: f64,
}

#[derive(Debug, Clone)]
pub struct Cohort {
    pub config: CohortConfig,
    pub seed: u64,
    pub subjects: Vec<CohortSubject>,
    pub swap_pairs: Vec<SwapPair>,
}

impl Cohort {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &CohortSubject> {
        self.subjects.iter().filter(move |s| s.split == split)
    }

    pub fn find(&self, subject_id: &str) -> Option<&CohortSubject> {
        self.subjects.iter().find(|s| s.subject.subject_id == subject_id)
    }
}

pub fn generate_cohort(config: &CohortConfig, seed: u64) -> Result<Cohort> {
    config.validate()?;
    let mut rng = SeededRng::new(seed);
    let mut subjects = Vec::new();
    for (split, counts) in [(Split::Train, config.train_counts), (Split::Test, config.test_counts)] {
        let mut n = 0;
        for diagnosis in Diagnosis::ALL {
            for _ in 0..counts[diagnosis.index()] {
                n += 1;
                let id = format!("{}{n:04}", if split == Split::Train { "TR" } else { "TE" });
                let identity_seed = rng.next_u64();
                let age = round2(rng.uniform_range(config.age_min, config.age_max));
                let subject = PhantomSubject::new(id, identity_seed, diagnosis, age, &config.phantom);
                let baseline = render_phantom(&subject, age, &config.phantom)?;
                let followups = (0..config.followups_per_subject)
                    .map(|_| {
                        let gap = draw_gap(&mut rng, config);
                        render_phantom(&subject, round2(age + gap), &config.phantom)
                    })
                    .collect::<Result<Vec<_>>>()?;
                subjects.push(CohortSubject {
                    subject,
                    split,
                    baseline,
                    followups,
                });
            }
        }
    }
    let swap_pairs = pair_for_swap(&subjects, config, &mut rng)?;
    Ok(Cohort {
        config: config.clone(),
        seed,
        subjects,
        swap_pairs,
    })
}

fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

fn draw_gap(rng: &mut SeededRng, config: &CohortConfig) -> f64 {
    (config.gap_mean + config.gap_std * rng.normal()).clamp(config.gap_min, config.gap_max)
}

/// Greedy age-ordered matching of test-split CN and AD subjects.
fn pair_for_swap(
    subjects: &[CohortSubject],
    config: &CohortConfig,
    rng: &mut SeededRng,
) -> Result<Vec<SwapPair>> {
    let of = |d: Diagnosis| {
        let mut v: Vec<&PhantomSubject> = subjects
            .iter()
            .filter(|s| s.split == Split::Test && s.subject.diagnosis == d)
            .map(|s| &s.subject)
            .collect();
        v.sort_by(|a, b| a.baseline_age.total_cmp(&b.baseline_age));
        v
    };
    let cn = of(Diagnosis::Cn);
    let ad = of(Diagnosis::Ad);
    let mut used = vec![false; ad.len()];
    let mut pairs = Vec::new();
    for c in cn {
        let best = ad
            .iter()
            .enumerate()
            .filter(|(i, a)| !used[*i] && (a.baseline_age - c.baseline_age).abs() <= config.swap_age_tolerance)
            .min_by(|x, y| {
                (x.1.baseline_age - c.baseline_age)
                    .abs()
                    .total_cmp(&(y.1.baseline_age - c.baseline_age).abs())
            });
        if let Some((i, a)) = best {
            used[i] = true;
            pairs.push(SwapPair {
                cn_subject: c.subject_id.clone(),
                ad_subject: a.subject_id.clone(),
                cn_age: c.baseline_age,
                ad_age: a.baseline_age,
                cn_gap: round2(rng.uniform_range(config.gap_min, config.swap_gap_split - 0.01)),
                ad_gap: round2(rng.uniform_range(config.swap_gap_split, config.gap_max)),
            });
        }
    }
    if pairs.len() < config.min_swap_pairs {
        return Err(Error::Pairing(format!(
            "only {} CN/AD test pairs lie within {} years of age, {} required",
            pairs.len(),
            config.swap_age_tolerance,
            config.min_swap_pairs
        )));
    }
    Ok(pairs)
}

/// Row-major stack of `depth` slices of `height x width` floats.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub height: usize,
    pub width: usize,
    pub depth: usize,
    pub data: Vec<f32>,
}

impl Volume {
    pub fn from_slices(slices: &[&Image]) -> Result<Self> {
        let (height, width) = slices
            .first()
            .map(|s| s.dim())
            .ok_or_else(|| Error::Contract("volume needs at least one slice".into()))?;
        if slices.iter().any(|s| s.dim() != (height, width)) {
            return Err(Error::Contract("volume slices differ in shape".into()));
        }
        Ok(Self {
            height,
            width,
            depth: slices.len(),
            data: slices.iter().flat_map(|s| s.iter().copied()).collect(),
        })
    }

    pub fn slice(&self, d: usize) -> Result<Image> {
        if d >= self.depth {
            return Err(Error::OutOfRange(format!("slice {d} of depth {}", self.depth)));
        }
        let n = self.height * self.width;
        Ok(Image::from_shape_vec((self.height, self.width), self.data[d * n..(d + 1) * n].to_vec())
            .expect("slice size"))
    }
}

pub fn encode_volume(v: &Volume) -> Vec<u8> {
    let mut out = format!("{} {} {} f32\n", v.height, v.width, v.depth).into_bytes();
    out.reserve(v.data.len() * 4);
    for x in &v.data {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

pub fn decode_volume(bytes: &[u8], path: &Path) -> Result<Volume> {
    let parse = |offset: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        offset: offset as u64,
        message,
    };
    let newline = bytes
        .iter()
        .position(|b| *b == b'\n')
        .ok_or_else(|| parse(bytes.len(), "header line is not terminated".into()))?;
    let header = std::str::from_utf8(&bytes[..newline])
        .map_err(|e| parse(e.valid_up_to(), "header is not UTF-8".into()))?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    if fields.len() != 4 {
        return Err(parse(0, format!("header must be `H W D dtype`, got {header:?}")));
    }
    let mut dims = [0usize; 3];
    for (i, f) in fields[..3].iter().enumerate() {
        let offset = header.find(f).unwrap_or(0);
        dims[i] = f
            .parse()
            .ok()
            .filter(|d| *d > 0)
            .ok_or_else(|| parse(offset, format!("dimension {f:?} is not a positive integer")))?;
    }
    if fields[3] != "f32" {
        let offset = header.rfind(fields[3]).unwrap_or(0);
        return Err(parse(offset, format!("unsupported dtype {:?}, expected f32", fields[3])));
    }
    let start = newline + 1;
    let expected = dims.iter().product::<usize>() * 4;
    let actual = bytes.len() - start;
    if actual != expected {
        return Err(parse(
            start,
            format!("payload holds {actual} bytes, header {}x{}x{} f32 needs {expected}", dims[0], dims[1], dims[2]),
        ));
    }
    let data = bytes[start..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Ok(Volume {
        height: dims[0],
        width: dims[1],
        depth: dims[2],
        data,
    })
}

pub fn write_volume(path: &Path, v: &Volume) -> Result<()> {
    fs::write(path, encode_volume(v)).map_err(|e| Error::io(path, e))
}

pub fn read_volume(path: &Path) -> Result<Volume> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_volume(&bytes, path)
}

/// Metadata row accompanying an external volume.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeMetadata {
    pub subject_id: String,
    pub age: f64,
    pub diagnosis: Diagnosis,
}

pub fn read_volume_metadata(path: &Path) -> Result<Vec<VolumeMetadata>> {
    let mut reader = csv::Reader::from_path(path)?;
    reader
        .deserialize()
        .map(|row| row.map_err(Error::from))
        .collect()
}

/// Extracts the requested axial slices of an external volume; masks are left
/// empty because no segmentation accompanies external data.
pub fn load_external_volume(
    path: &Path,
    meta: &VolumeMetadata,
    slices: &[usize],
) -> Result<Vec<LongitudinalSample>> {
    let volume = read_volume(path)?;
    slices
        .iter()
        .map(|&d| {
            Ok(LongitudinalSample {
                subject_id: meta.subject_id.clone(),
                image: volume.slice(d)?,
                masks: None,
                age: meta.age,
                diagnosis: meta.diagnosis,
                displacement: None,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub subject_id: String,
    pub split: Split,
    pub diagnosis: Diagnosis,
    pub age: f64,
    pub image_path: String,
    /// Semicolon-separated, in region order.
    pub mask_paths: String,
    /// Empty for baseline visits.
    pub field_path: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SubjectRow {
    subject_id: String,
    split: Split,
    diagnosis: Diagnosis,
    baseline_age: f64,
    identity_seed: u64,
}

pub const MANIFEST_FILE: &str = "manifest.csv";
pub const SUBJECTS_FILE: &str = "subjects.csv";
pub const SWAP_FILE: &str = "swap_pairs.csv";
pub const COHORT_CONFIG_FILE: &str = "cohort.toml";

fn write_sample(dir: &Path, stem: &str, sample: &LongitudinalSample, with_field: bool) -> Result<(String, String, String)> {
    let image_rel = format!("images/{stem}.f32");
    write_volume(&dir.join(&image_rel), &Volume::from_slices(&[&sample.image])?)?;
    let masks = sample.masks()?;
    let mut mask_rel = Vec::new();
    for (region, mask) in crate::phantom::Region::ALL.iter().zip(masks.as_slice()) {
        let rel = format!("masks/{stem}_{}.f32", region.as_str());
        write_volume(&dir.join(&rel), &Volume::from_slices(&[mask])?)?;
        mask_rel.push(rel);
    }
    let field_rel = match (&sample.displacement, with_field) {
        (Some(f), true) => {
            let rel = format!("fields/{stem}.f32");
            let rows = f.rows.mapv(|v| v as f32);
            let cols = f.cols.mapv(|v| v as f32);
            write_volume(&dir.join(&rel), &Volume::from_slices(&[&rows, &cols])?)?;
            rel
        }
        _ => String::new(),
    };
    Ok((image_rel, mask_rel.join(";"), field_rel))
}

/// Writes images, masks, fields, the manifest, subject table, swap pairs and
/// generating config under `dir`.
pub fn write_cohort(cohort: &Cohort, dir: &Path) -> Result<()> {
    for sub in ["images", "masks", "fields"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let mut manifest = csv::Writer::from_path(dir.join(MANIFEST_FILE))?;
    let mut subjects = csv::Writer::from_path(dir.join(SUBJECTS_FILE))?;
    for s in &cohort.subjects {
        let id = &s.subject.subject_id;
        subjects.serialize(SubjectRow {
            subject_id: id.clone(),
            split: s.split,
            diagnosis: s.subject.diagnosis,
            baseline_age: s.subject.baseline_age,
            identity_seed: s.subject.identity_seed,
        })?;
        let visits = std::iter::once((&s.baseline, false)).chain(s.followups.iter().map(|f| (f, true)));
        for (visit, (sample, is_followup)) in visits.enumerate() {
            let (image_path, mask_paths, field_path) = write_sample(dir, &format!("{id}_v{visit}"), sample, is_followup)?;
            manifest.serialize(ManifestRow {
                subject_id: id.clone(),
                split: s.split,
                diagnosis: sample.diagnosis,
                age: sample.age,
                image_path,
                mask_paths,
                field_path,
            })?;
        }
    }
    manifest.flush().map_err(|e| Error::io(dir.join(MANIFEST_FILE), e))?;
    subjects.flush().map_err(|e| Error::io(dir.join(SUBJECTS_FILE), e))?;
    let mut swaps = csv::Writer::from_path(dir.join(SWAP_FILE))?;
    for p in &cohort.swap_pairs {
        swaps.serialize(p)?;
    }
    swaps.flush().map_err(|e| Error::io(dir.join(SWAP_FILE), e))?;
    let config = toml::to_string(&CohortFile {
        seed: cohort.seed,
        cohort: cohort.config.clone(),
    })
    .map_err(|e| Error::Config(e.to_string()))?;
    let path = dir.join(COHORT_CONFIG_FILE);
    let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    f.write_all(config.as_bytes()).map_err(|e| Error::io(&path, e))?;
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct CohortFile {
    seed: u64,
    cohort: CohortConfig,
}

fn read_image(dir: &Path, rel: &str) -> Result<Image> {
    read_volume(&dir.join(rel))?.slice(0)
}

fn read_sample(dir: &Path, row: &ManifestRow) -> Result<LongitudinalSample> {
    let image = read_image(dir, &row.image_path)?;
    let masks: Vec<Mask> = row
        .mask_paths
        .split(';')
        .filter(|p| !p.is_empty())
        .map(|p| read_image(dir, p))
        .collect::<Result<_>>()?;
    let masks = match <[Mask; 3]>::try_from(masks) {
        Ok(m) => Some(RegionMasks(m)),
        Err(v) if v.is_empty() => None,
        Err(v) => {
            return Err(Error::Contract(format!(
                "{}: expected 3 masks, manifest lists {}",
                row.subject_id,
                v.len()
            )))
        }
    };
    let displacement = if row.field_path.is_empty() {
        None
    } else {
        let v = read_volume(&dir.join(&row.field_path))?;
        Some(DisplacementField {
            rows: v.slice(0)?.mapv(|x| x as f64),
            cols: v.slice(1)?.mapv(|x| x as f64),
        })
    };
    Ok(LongitudinalSample {
        subject_id: row.subject_id.clone(),
        image,
        masks,
        age: row.age,
        diagnosis: row.diagnosis,
        displacement,
    })
}

/// Loads a dataset written by [`write_cohort`]. Subject geometry is
/// regenerated from the stored identity seeds.
pub fn read_cohort(dir: &Path) -> Result<Cohort> {
    let cfg_path = dir.join(COHORT_CONFIG_FILE);
    let text = fs::read_to_string(&cfg_path).map_err(|e| Error::io(&cfg_path, e))?;
    let file: CohortFile = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", cfg_path.display())))?;
    let config = file.cohort;

    let mut rows: Vec<ManifestRow> = Vec::new();
    for row in csv::Reader::from_path(dir.join(MANIFEST_FILE))?.deserialize() {
        rows.push(row?);
    }
    let mut subjects = Vec::new();
    for row in csv::Reader::from_path(dir.join(SUBJECTS_FILE))?.deserialize() {
        let row: SubjectRow = row?;
        let subject = PhantomSubject::new(
            row.subject_id.clone(),
            row.identity_seed,
            row.diagnosis,
            row.baseline_age,
            &config.phantom,
        );
        let mut visits = rows.iter().filter(|r| r.subject_id == row.subject_id);
        let base_row = visits
            .next()
            .ok_or_else(|| Error::Contract(format!("manifest has no visit for {}", row.subject_id)))?;
        let baseline = read_sample(dir, base_row)?;
        let followups = visits.map(|r| read_sample(dir, r)).collect::<Result<Vec<_>>>()?;
        subjects.push(CohortSubject {
            subject,
            split: row.split,
            baseline,
            followups,
        });
    }
    let mut swap_pairs = Vec::new();
    for row in csv::Reader::from_path(dir.join(SWAP_FILE))?.deserialize() {
        swap_pairs.push(row?);
    }
    Ok(Cohort {
        config,
        seed: file.seed,
        subjects,
        swap_pairs,
    })
}

pub fn manifest_path(dir: &Path) -> PathBuf {
    dir.join(MANIFEST_FILE)
}
