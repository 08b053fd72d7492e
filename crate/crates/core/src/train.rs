//! Two-phase training (auto-encoding, then latent-shift progression),
//! optimizer, resumable training state and follow-up generation.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tch::{Kind, Tensor};

use crate::checkpoint;
use crate::cohort::{Cohort, Split};
use crate::diffusion::{
    ddim_sample, forward_noise_batch, NoiseSchedule, TimestepSubsequence, DEFAULT_BETA_END, DEFAULT_BETA_START,
    DEFAULT_SAMPLE_STEPS, DEFAULT_TIMESTEPS,
};
use crate::error::{Error, Result};
use crate::imaging::{images_to_tensor, tensor_to_images, Image, Mask};
use crate::model::{ModelConfig, Networks, Precision};
use crate::nn::ParamStore;
use crate::phantom::RegionMasks;
use crate::progression::{
    apply_shift_tensor, attribute_ce_loss, attributes_tensor, encode_attributes, residual_roi_mask_with_margin,
    AttributeVector, Diagnosis, AGE_BINS,
};
use crate::rng::{RngState, SeededRng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs_autoencode: usize,
    pub epochs_progression: usize,
    /// Weight of the reconstruction term.
    pub mse_weight: f64,
    /// Weight of the attribute-consistency term.
    pub ce_weight: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub sample_steps: usize,
    pub precision: Precision,
    /// Dilation in pixels of the region box that masks the residual.
    pub mask_margin: usize,
    /// Epoch checkpoints retained on disk (0 keeps all).
    pub keep_checkpoints: usize,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs_autoencode: 50,
            epochs_progression: 100,
            mse_weight: 1.0,
            ce_weight: 0.001,
            learning_rate: 0.001,
            batch_size: 16,
            seed: 0,
            timesteps: DEFAULT_TIMESTEPS,
            beta_start: DEFAULT_BETA_START,
            beta_end: DEFAULT_BETA_END,
            sample_steps: DEFAULT_SAMPLE_STEPS,
            precision: Precision::F32,
            mask_margin: 2,
            keep_checkpoints: 3,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Full phase lengths on the [`ModelConfig::toy`] network.
    pub fn toy() -> Self {
        Self {
            model: ModelConfig::toy(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if !(self.mse_weight > 0.0) {
            return Err(Error::Config("mse_weight must be positive".into()));
        }
        if !(self.ce_weight >= 0.0) {
            return Err(Error::Config("ce_weight must be non-negative".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.sample_steps == 0 || self.sample_steps > self.timesteps {
            return Err(Error::Config(format!(
                "sample_steps must lie in 1..={}",
                self.timesteps
            )));
        }
        self.schedule().map(|_| ())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.timesteps, self.beta_start, self.beta_end)
    }

    pub fn subsequence(&self) -> Result<TimestepSubsequence> {
        TimestepSubsequence::uniform(self.timesteps, self.sample_steps)
    }

    pub fn total_epochs(&self) -> usize {
        self.epochs_autoencode + self.epochs_progression
    }

    pub fn phase_of_epoch(&self, epoch: usize) -> Phase {
        if epoch < self.epochs_autoencode {
            Phase::Autoencode
        } else {
            Phase::Progression
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// SHA-256 of the canonical serialization.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Autoencode,
    Progression,
}

impl Phase {
    /// Gate on the latent shift: 0 while auto-encoding, 1 in progression mode.
    pub fn shift_gate(self) -> f64 {
        match self {
            Phase::Autoencode => 0.0,
            Phase::Progression => 1.0,
        }
    }
}

/// Adam with per-parameter step counts so parameters that join training
/// late get their own bias correction.
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    slots: HashMap<String, AdamSlot>,
}

struct AdamSlot {
    m: Tensor,
    v: Tensor,
    steps: u64,
}

impl Adam {
    pub fn new(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            slots: HashMap::new(),
        }
    }

    /// Updates every parameter whose gradient is defined; `grads` is aligned with `store.params()`.
    pub fn step(&mut self, store: &ParamStore, grads: &[Tensor]) {
        tch::no_grad(|| {
            for (p, g) in store.params().iter().zip(grads) {
                if !g.defined() {
                    continue;
                }
                let slot = self.slots.entry(p.name.clone()).or_insert_with(|| AdamSlot {
                    m: g.zeros_like(),
                    v: g.zeros_like(),
                    steps: 0,
                });
                slot.steps += 1;
                slot.m = &slot.m * self.beta1 + g * (1.0 - self.beta1);
                slot.v = &slot.v * self.beta2 + g * g * (1.0 - self.beta2);
                let t = slot.steps as i32;
                let m_hat = &slot.m / (1.0 - self.beta1.powi(t));
                let v_hat = &slot.v / (1.0 - self.beta2.powi(t));
                let update = m_hat / (v_hat.sqrt() + self.eps) * self.learning_rate;
                let mut w = p.tensor.shallow_clone();
                let _ = w.g_sub_(&update);
            }
        });
    }

    fn tensors(&self, store: &ParamStore) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for p in store.params() {
            if let Some(s) = self.slots.get(&p.name) {
                out.push((format!("adam.m.{}", p.name), s.m.shallow_clone()));
                out.push((format!("adam.v.{}", p.name), s.v.shallow_clone()));
                out.push((format!("adam.t.{}", p.name), Tensor::from(s.steps as f64)));
            }
        }
        out
    }

    fn restore(&mut self, tensors: &HashMap<String, Tensor>) -> Result<()> {
        self.slots.clear();
        for (name, m) in tensors {
            let Some(param) = name.strip_prefix("adam.m.") else {
                continue;
            };
            let get = |k: &str| {
                tensors
                    .get(&format!("adam.{k}.{param}"))
                    .ok_or_else(|| Error::Checkpoint(format!("optimizer state for {param} lacks {k}")))
            };
            self.slots.insert(
                param.to_string(),
                AdamSlot {
                    m: m.copy(),
                    v: get("v")?.copy(),
                    steps: get("t")?.double_value(&[]) as u64,
                },
            );
        }
        Ok(())
    }
}

/// A baseline slice with its region masks and diagnosis label.
#[derive(Debug, Clone)]
pub struct TrainingExample {
    pub image: Image,
    pub masks: RegionMasks,
    pub diagnosis: Diagnosis,
}

impl TrainingExample {
    /// Baseline visits of one split; follow-up scans are never used for training.
    pub fn from_cohort(cohort: &Cohort, split: Split) -> Result<Vec<Self>> {
        cohort
            .split(split)
            .map(|s| {
                Ok(TrainingExample {
                    image: s.baseline.image.clone(),
                    masks: s.baseline.masks()?.clone(),
                    diagnosis: s.baseline.diagnosis,
                })
            })
            .collect()
    }
}

/// Timesteps and noise for one step, drawn from the training generator.
pub struct StepNoise {
    pub timesteps: Vec<usize>,
    pub eps: Tensor,
}

impl StepNoise {
    pub fn draw(rng: &mut SeededRng, batch: usize, shape: (usize, usize), max_t: usize, kind: Kind) -> Self {
        let timesteps = (0..batch).map(|_| rng.int_inclusive(1, max_t)).collect();
        let eps = rng.normal_tensor(&[batch as i64, 1, shape.0 as i64, shape.1 as i64], kind);
        Self { timesteps, eps }
    }
}

/// Inputs of one progression-mode step.
pub struct ProgressionBatch {
    pub x_b: Tensor,
    /// Residual region-of-interest mask, `[B, 1, H, W]`.
    pub roi: Tensor,
    pub attrs: Vec<AttributeVector>,
}

impl ProgressionBatch {
    pub fn new(images: &[&Image], masks: &[&RegionMasks], attrs: Vec<AttributeVector>, margin: usize, kind: Kind) -> Result<Self> {
        if images.len() != masks.len() || images.len() != attrs.len() || images.is_empty() {
            return Err(Error::Contract(format!(
                "progression batch: {} images, {} mask sets, {} attribute vectors",
                images.len(),
                masks.len(),
                attrs.len()
            )));
        }
        // Ground-truth masks of the baseline stand in for both images.
        let rois: Vec<Mask> = masks
            .iter()
            .map(|m| residual_roi_mask_with_margin(m.as_slice(), m.as_slice(), margin).map(|r| r.mask))
            .collect::<Result<_>>()?;
        Ok(Self {
            x_b: images_to_tensor(images.iter().copied(), kind)?,
            roi: images_to_tensor(rois.iter(), kind)?,
            attrs,
        })
    }
}

pub struct ProgressionLoss {
    pub total: Tensor,
    pub mse: Tensor,
    pub ce: Tensor,
}

/// Reconstruction loss of the auto-encoding phase.
pub fn autoencode_objective(nets: &Networks, sched: &NoiseSchedule, x_b: &Tensor, noise: &StepNoise) -> Result<Tensor> {
    let z = nets.encode(x_b)?;
    let x_t = forward_noise_batch(x_b, &noise.timesteps, &noise.eps, sched)?;
    let x0_hat = nets.denoise(&x_t, &noise.timesteps, &z)?;
    Ok((x0_hat - x_b).square().mean(x_b.kind()))
}

/// Weighted reconstruction plus attribute-consistency loss of the progression phase.
/// With a zero consistency weight the regressor runs outside the graph.
pub fn progression_objective(
    nets: &Networks,
    sched: &NoiseSchedule,
    batch: &ProgressionBatch,
    noise: &StepNoise,
    mse_weight: f64,
    ce_weight: f64,
) -> Result<ProgressionLoss> {
    let kind = nets.kind();
    let z_b = nets.encode(&batch.x_b)?;
    let shift = nets.shift_estimator().forward(&attributes_tensor(&batch.attrs, kind))?;
    let z_f = apply_shift_tensor(&z_b, &shift)?;
    let x_t = forward_noise_batch(&batch.x_b, &noise.timesteps, &noise.eps, sched)?;
    let x_f_hat = nets.denoise(&x_t, &noise.timesteps, &z_f)?;
    let mse = (&batch.x_b - &x_f_hat).square().mean(kind);
    let consistency = |x_f_hat: &Tensor| -> Result<Tensor> {
        let residual = (&batch.x_b - x_f_hat) * &batch.roi;
        let logits = nets.regressor().forward(&batch.x_b, x_f_hat, &residual)?;
        attribute_ce_loss(&logits, &batch.attrs)
    };
    let (total, ce) = if ce_weight > 0.0 {
        let ce = consistency(&x_f_hat)?;
        (&mse * mse_weight + &ce * ce_weight, ce)
    } else {
        let ce = tch::no_grad(|| consistency(&x_f_hat.detach()))?;
        (&mse * mse_weight, ce)
    };
    Ok(ProgressionLoss { total, mse, ce })
}

/// Gradients of `loss` for every stored parameter, undefined where unused.
pub fn parameter_grads(store: &ParamStore, loss: &Tensor) -> Vec<Tensor> {
    let params: Vec<&Tensor> = store.params().iter().map(|p| &p.tensor).collect();
    Tensor::run_backward(&[loss], &params, false, false)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLosses {
    pub mse: f64,
    pub ce: Option<f64>,
}

/// Full, resumable training state.
pub struct TrainState {
    pub config: TrainConfig,
    pub nets: Networks,
    pub optimizer: Adam,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimizer steps.
    pub step: u64,
    pub progression_steps: u64,
    pub rng: SeededRng,
    schedule: NoiseSchedule,
}

#[derive(Serialize, Deserialize)]
struct StateMeta {
    kind: String,
    epoch: usize,
    step: u64,
    progression_steps: u64,
    config_hash: String,
    rng_seed: String,
    rng_stream: String,
    rng_word_pos: String,
    config: TrainConfig,
}

const STATE_KIND: &str = "train-state";

impl TrainState {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let nets = Networks::new(config.model.clone(), config.precision, config.seed)?;
        Ok(Self {
            optimizer: Adam::new(config.learning_rate),
            schedule: config.schedule()?,
            rng: SeededRng::substream(config.seed, 2),
            nets,
            epoch: 0,
            step: 0,
            progression_steps: 0,
            config,
        })
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn check_loss(&self, value: f64, what: &str, detail: impl FnOnce() -> String) -> Result<()> {
        if value.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite {
                step: self.step + 1,
                detail: format!("{what} = {value}; {}", detail()),
            })
        }
    }

    fn diagnostics(&self, x: &Tensor, noise: &StepNoise) -> String {
        let norms: Vec<String> = ["enc", "dec", "shift", "reg"]
            .iter()
            .map(|prefix| {
                let sq: f64 = self
                    .nets
                    .params_with_prefix(prefix)
                    .map(|p| p.tensor.square().sum(Kind::Double).double_value(&[]))
                    .sum();
                format!("|{prefix}|={:.4e}", sq.sqrt())
            })
            .collect();
        format!(
            "input range [{:.4}, {:.4}], timesteps {:?}, parameter norms {}",
            x.min().double_value(&[]),
            x.max().double_value(&[]),
            noise.timesteps,
            norms.join(" ")
        )
    }

    /// One auto-encoding update on the encoder and decoder.
    pub fn train_step_autoencode(&mut self, images: &[&Image]) -> Result<f64> {
        if images.is_empty() {
            return Err(Error::Contract("empty training batch".into()));
        }
        let kind = self.nets.kind();
        let x = images_to_tensor(images.iter().copied(), kind)?;
        let noise = StepNoise::draw(&mut self.rng, images.len(), self.config.model.image_shape(), self.schedule.timesteps(), kind);
        let loss = autoencode_objective(&self.nets, &self.schedule, &x, &noise)?;
        let value = loss.double_value(&[]);
        self.check_loss(value, "mse", || self.diagnostics(&x, &noise))?;
        let grads = parameter_grads(self.nets.store(), &loss);
        self.optimizer.step(self.nets.store(), &grads);
        self.step += 1;
        Ok(value)
    }

    /// One joint update of all four networks in progression mode.
    pub fn train_step_progression(&mut self, batch: &ProgressionBatch) -> Result<StepLosses> {
        let kind = self.nets.kind();
        let b = batch.attrs.len();
        let noise = StepNoise::draw(&mut self.rng, b, self.config.model.image_shape(), self.schedule.timesteps(), kind);
        let loss = progression_objective(
            &self.nets,
            &self.schedule,
            batch,
            &noise,
            self.config.mse_weight,
            self.config.ce_weight,
        )?;
        let mse = loss.mse.double_value(&[]);
        let ce = loss.ce.double_value(&[]);
        self.check_loss(mse, "mse", || self.diagnostics(&batch.x_b, &noise))?;
        self.check_loss(ce, "ce", || self.diagnostics(&batch.x_b, &noise))?;
        let grads = parameter_grads(self.nets.store(), &loss.total);
        self.optimizer.step(self.nets.store(), &grads);
        self.step += 1;
        self.progression_steps += 1;
        Ok(StepLosses { mse, ce: Some(ce) })
    }

    pub fn to_checkpoint(&self) -> Result<(String, Vec<(String, Tensor)>)> {
        let rng = self.rng.state();
        let meta = StateMeta {
            kind: STATE_KIND.into(),
            epoch: self.epoch,
            step: self.step,
            progression_steps: self.progression_steps,
            config_hash: self.config.hash(),
            rng_seed: rng.seed.to_string(),
            rng_stream: rng.stream.to_string(),
            rng_word_pos: rng.word_pos.to_string(),
            config: self.config.clone(),
        };
        let meta = toml::to_string(&meta).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut tensors = self.nets.store().snapshot();
        tensors.extend(self.optimizer.tensors(self.nets.store()));
        Ok((meta, tensors))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let (meta, tensors) = self.to_checkpoint()?;
        checkpoint::save(path, &meta, &tensors)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ckpt = checkpoint::load(path)?;
        let meta: StateMeta = toml::from_str(&ckpt.meta)
            .map_err(|e| Error::Checkpoint(format!("{}: bad metadata: {e}", path.display())))?;
        if meta.kind != STATE_KIND {
            return Err(Error::Checkpoint(format!("{}: unexpected kind {}", path.display(), meta.kind)));
        }
        if meta.config.hash() != meta.config_hash {
            return Err(Error::Checkpoint(format!("{}: stored config does not match its hash", path.display())));
        }
        let mut state = Self::new(meta.config)?;
        let tensors = ckpt.tensor_map();
        state.nets.store().load(&tensors)?;
        state.optimizer.restore(&tensors)?;
        let parse = |s: &str| {
            s.parse::<u128>()
                .map_err(|e| Error::Checkpoint(format!("bad generator state {s:?}: {e}")))
        };
        state.rng = SeededRng::from_state(RngState {
            seed: parse(&meta.rng_seed)? as u64,
            stream: parse(&meta.rng_stream)? as u64,
            word_pos: parse(&meta.rng_word_pos)?,
        });
        state.epoch = meta.epoch;
        state.step = meta.step;
        state.progression_steps = meta.progression_steps;
        Ok(state)
    }
}

/// Loads networks for inference; refuses checkpoints that never trained the shift estimator.
pub fn load_trained(path: &Path) -> Result<TrainState> {
    let state = TrainState::load(path)?;
    if state.progression_steps == 0 {
        return Err(Error::Checkpoint(format!(
            "{}: no progression-mode training recorded, shift estimator is untrained",
            path.display()
        )));
    }
    Ok(state)
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Stop once all auto-encoding epochs are done.
    pub autoencode_only: bool,
    pub resume: Option<PathBuf>,
    /// Stop after this many epochs in total (used to simulate interruption).
    pub stop_after_epoch: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub epochs_completed: usize,
    pub steps: u64,
    pub final_checkpoint: PathBuf,
    pub metrics_path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub step: u64,
    pub epoch: usize,
    pub mse: f64,
    pub ce: Option<f64>,
    pub lr: f64,
}

pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

pub fn epoch_checkpoint_name(epoch: usize) -> String {
    format!("epoch_{epoch:04}.ckpt")
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricRow>> {
    let mut rows = Vec::new();
    for row in csv::Reader::from_path(path)?.deserialize() {
        rows.push(row?);
    }
    Ok(rows)
}

/// Runs (or resumes) both phases over `examples`, writing a checkpoint per
/// epoch and one metrics row per step under `out_dir`.
pub fn run_training(
    config: &TrainConfig,
    examples: &[TrainingExample],
    out_dir: &Path,
    options: &RunOptions,
) -> Result<TrainSummary> {
    config.validate()?;
    if examples.is_empty() {
        return Err(Error::Contract("training set is empty".into()));
    }
    if let Some(bad) = examples.iter().find(|e| e.image.dim() != config.model.image_shape()) {
        return Err(Error::Contract(format!(
            "training image {:?} does not match model input {:?}",
            bad.image.dim(),
            config.model.image_shape()
        )));
    }
    let ckpt_dir = out_dir.join(CHECKPOINT_DIR);
    fs::create_dir_all(&ckpt_dir).map_err(|e| Error::io(&ckpt_dir, e))?;
    let metrics_path = out_dir.join(METRICS_FILE);

    let (mut state, previous_rows) = match &options.resume {
        Some(path) => {
            let state = TrainState::load(path)?;
            if state.config.hash() != config.hash() {
                return Err(Error::Config(format!(
                    "refusing to resume from {}: its training config differs from the requested one",
                    path.display()
                )));
            }
            let rows = if metrics_path.exists() {
                read_metrics(&metrics_path)?
                    .into_iter()
                    .filter(|r| r.step <= state.step)
                    .collect()
            } else {
                Vec::new()
            };
            (state, rows)
        }
        None => (TrainState::new(config.clone())?, Vec::new()),
    };
    let mut metrics = csv::Writer::from_path(&metrics_path)?;
    for row in &previous_rows {
        metrics.serialize(row)?;
    }

    let mut end = config.total_epochs();
    if options.autoencode_only {
        end = end.min(config.epochs_autoencode);
    }
    if let Some(stop) = options.stop_after_epoch {
        end = end.min(stop);
    }
    let kind = state.nets.kind();
    let mut last = None;
    while state.epoch < end {
        let phase = config.phase_of_epoch(state.epoch);
        let mut order: Vec<usize> = (0..examples.len()).collect();
        state.rng.shuffle(&mut order);
        let mut epoch_mse = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(config.batch_size) {
            let images: Vec<&Image> = chunk.iter().map(|&i| &examples[i].image).collect();
            let losses = match phase {
                Phase::Autoencode => StepLosses {
                    mse: state.train_step_autoencode(&images)?,
                    ce: None,
                },
                Phase::Progression => {
                    let attrs = chunk
                        .iter()
                        .map(|&i| {
                            let bin = state.rng.int_inclusive(1, AGE_BINS);
                            AttributeVector::from_bin(examples[i].diagnosis, bin)
                        })
                        .collect::<Result<Vec<_>>>()?;
                    let masks: Vec<&RegionMasks> = chunk.iter().map(|&i| &examples[i].masks).collect();
                    let batch = ProgressionBatch::new(&images, &masks, attrs, config.mask_margin, kind)?;
                    state.train_step_progression(&batch)?
                }
            };
            metrics.serialize(MetricRow {
                step: state.step,
                epoch: state.epoch + 1,
                mse: losses.mse,
                ce: losses.ce,
                lr: config.learning_rate,
            })?;
            epoch_mse += losses.mse;
            batches += 1;
        }
        metrics.flush().map_err(|e| Error::io(&metrics_path, e))?;
        state.epoch += 1;
        log::info!(
            "epoch {}/{} ({:?}) mean mse {:.6}",
            state.epoch,
            config.total_epochs(),
            phase,
            epoch_mse / batches as f64
        );
        let path = ckpt_dir.join(epoch_checkpoint_name(state.epoch));
        state.save(&path)?;
        prune_checkpoints(&ckpt_dir, state.epoch, config.keep_checkpoints)?;
        last = Some(path);
    }
    let final_checkpoint = out_dir.join(FINAL_CHECKPOINT);
    match last {
        Some(path) => {
            fs::copy(&path, &final_checkpoint).map_err(|e| Error::io(&final_checkpoint, e))?;
        }
        None => state.save(&final_checkpoint)?,
    }
    Ok(TrainSummary {
        epochs_completed: state.epoch,
        steps: state.step,
        final_checkpoint,
        metrics_path,
    })
}

fn prune_checkpoints(dir: &Path, newest: usize, keep: usize) -> Result<()> {
    if keep == 0 || newest <= keep {
        return Ok(());
    }
    for epoch in 1..=newest - keep {
        let p = dir.join(epoch_checkpoint_name(epoch));
        if p.exists() {
            fs::remove_file(&p).map_err(|e| Error::io(&p, e))?;
        }
    }
    Ok(())
}

/// Deterministic DDIM generation from given latent codes, one seed per row.
pub fn generate_from_latents(
    nets: &Networks,
    sched: &NoiseSchedule,
    subseq: &TimestepSubsequence,
    latents: &Tensor,
    seeds: &[u64],
) -> Result<Vec<Image>> {
    let (h, w) = nets.config().image_shape();
    if latents.size().first().copied() != Some(seeds.len() as i64) {
        return Err(Error::Contract(format!(
            "{} seeds for latent batch {:?}",
            seeds.len(),
            latents.size()
        )));
    }
    let kind = nets.kind();
    let noise: Vec<Tensor> = seeds
        .iter()
        .map(|&s| SeededRng::new(s).normal_tensor(&[1, 1, h as i64, w as i64], kind))
        .collect();
    let init = Tensor::cat(&noise, 0);
    let out = tch::no_grad(|| {
        ddim_sample(
            |x, t, z| nets.denoise(x, &vec![t; seeds.len()], z),
            latents,
            sched,
            subseq,
            &init,
        )
    })?;
    tensor_to_images(&out.clamp(0.0, 1.0))
}

/// Shifted latent codes `E(x_b) + [A(v); 0]`, `[B, d]`.
pub fn shifted_latents(nets: &Networks, images: &[&Image], attrs: &[AttributeVector]) -> Result<Tensor> {
    let kind = nets.kind();
    tch::no_grad(|| {
        let z = nets.encode(&images_to_tensor(images.iter().copied(), kind)?)?;
        let shift = nets.shift_estimator().forward(&attributes_tensor(attrs, kind))?;
        apply_shift_tensor(&z, &shift)
    })
}

/// Follow-ups for a batch of baselines, each with its own attributes and seed.
pub fn generate_followups(
    nets: &Networks,
    sched: &NoiseSchedule,
    subseq: &TimestepSubsequence,
    images: &[&Image],
    attrs: &[AttributeVector],
    seeds: &[u64],
) -> Result<Vec<Image>> {
    let z = shifted_latents(nets, images, attrs)?;
    generate_from_latents(nets, sched, subseq, &z, seeds)
}

/// Predicted follow-up of one baseline after `age_gap` years with cognitive status `status`.
pub fn infer_followup(
    state: &TrainState,
    x_b: &Image,
    status: Diagnosis,
    age_gap: f64,
    seed: u64,
) -> Result<Image> {
    let attrs = encode_attributes(status, age_gap)?;
    let subseq = state.config.subsequence()?;
    Ok(generate_followups(&state.nets, state.schedule(), &subseq, &[x_b], &[attrs], &[seed])?.remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::{generate_cohort, CohortConfig};
    use crate::model::{REGRESSOR_PREFIX, SHIFT_PREFIX};
    use crate::phantom::PhantomConfig;

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            epochs_autoencode: 1,
            epochs_progression: 1,
            batch_size: 4,
            timesteps: 50,
            sample_steps: 5,
            model: ModelConfig {
                image_height: 16,
                image_width: 16,
                ..ModelConfig::tiny()
            },
            ..TrainConfig::default()
        }
    }

    fn examples(n: usize) -> Vec<TrainingExample> {
        let cfg = CohortConfig {
            phantom: PhantomConfig {
                image_height: 16,
                image_width: 16,
                supersample: 2,
                ..PhantomConfig::default()
            },
            train_counts: [n, n, n],
            test_counts: [4, 1, 4],
            age_max: 66.0,
            ..CohortConfig::default()
        };
        TrainingExample::from_cohort(&generate_cohort(&cfg, 1).unwrap(), Split::Train).unwrap()
    }

    fn snapshot(state: &TrainState, prefix: &str) -> Vec<Tensor> {
        state.nets.params_with_prefix(prefix).map(|p| p.tensor.copy()).collect()
    }

    fn changed(before: &[Tensor], state: &TrainState, prefix: &str) -> usize {
        state
            .nets
            .params_with_prefix(prefix)
            .zip(before)
            .filter(|(p, b)| !p.tensor.equal(b))
            .count()
    }

    #[test]
    fn config_defaults_and_validation() {
        let c = TrainConfig::default();
        assert_eq!((c.epochs_autoencode, c.epochs_progression), (50, 100));
        assert_eq!((c.mse_weight, c.ce_weight, c.learning_rate), (1.0, 0.001, 0.001));
        assert!(TrainConfig { mse_weight: 0.0, ..c.clone() }.validate().is_err());
        assert!(TrainConfig { ce_weight: -1.0, ..c.clone() }.validate().is_err());
        let back = TrainConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        assert!(TrainConfig::from_toml("no_such_key = 1").is_err());
    }

    #[test]
    fn autoencode_step_leaves_shift_and_regressor_alone() {
        let ex = examples(2);
        let mut state = TrainState::new(tiny_config()).unwrap();
        let (a, r) = (snapshot(&state, SHIFT_PREFIX), snapshot(&state, REGRESSOR_PREFIX));
        let enc = snapshot(&state, "enc");
        let imgs: Vec<&Image> = ex.iter().take(4).map(|e| &e.image).collect();
        state.train_step_autoencode(&imgs).unwrap();
        assert_eq!(changed(&a, &state, SHIFT_PREFIX), 0);
        assert_eq!(changed(&r, &state, REGRESSOR_PREFIX), 0);
        assert!(changed(&enc, &state, "enc") > 0);
        assert!(state.train_step_autoencode(&[]).is_err());
    }

    #[test]
    fn progression_step_moves_shift_estimator() {
        let ex = examples(2);
        let mut state = TrainState::new(tiny_config()).unwrap();
        let a = snapshot(&state, SHIFT_PREFIX);
        let imgs: Vec<&Image> = ex.iter().take(4).map(|e| &e.image).collect();
        let masks: Vec<&RegionMasks> = ex.iter().take(4).map(|e| &e.masks).collect();
        let attrs = ex.iter().take(4).map(|e| AttributeVector::from_bin(e.diagnosis, 3).unwrap()).collect();
        let batch = ProgressionBatch::new(&imgs, &masks, attrs, 2, Kind::Float).unwrap();
        let losses = state.train_step_progression(&batch).unwrap();
        assert!(losses.mse.is_finite() && losses.ce.unwrap().is_finite());
        assert!(changed(&a, &state, SHIFT_PREFIX) > 0);
    }

    #[test]
    fn zero_consistency_weight_keeps_regressor_fixed() {
        let ex = examples(2);
        let mut state = TrainState::new(TrainConfig {
            ce_weight: 0.0,
            ..tiny_config()
        })
        .unwrap();
        let r = snapshot(&state, REGRESSOR_PREFIX);
        let imgs: Vec<&Image> = ex.iter().take(4).map(|e| &e.image).collect();
        let masks: Vec<&RegionMasks> = ex.iter().take(4).map(|e| &e.masks).collect();
        let attrs = ex.iter().take(4).map(|e| AttributeVector::from_bin(e.diagnosis, 7).unwrap()).collect();
        let batch = ProgressionBatch::new(&imgs, &masks, attrs, 2, Kind::Float).unwrap();
        let losses = state.train_step_progression(&batch).unwrap();
        assert!(losses.ce.unwrap().is_finite());
        assert_eq!(changed(&r, &state, REGRESSOR_PREFIX), 0);
    }

    #[test]
    fn zero_head_first_loss_is_mean_square() {
        let ex = examples(2);
        let mut config = tiny_config();
        config.model.zero_output_head = true;
        let mut state = TrainState::new(config).unwrap();
        let imgs: Vec<&Image> = ex.iter().take(4).map(|e| &e.image).collect();
        let expected: f64 = imgs.iter().flat_map(|i| i.iter()).map(|v| (*v as f64).powi(2)).sum::<f64>()
            / (4 * 16 * 16) as f64;
        let loss = state.train_step_autoencode(&imgs).unwrap();
        assert!((loss - expected).abs() < 1e-6, "{loss} vs {expected}");
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let ex = examples(2);
        let config = tiny_config();
        let full = tempfile::tempdir().unwrap();
        let split = tempfile::tempdir().unwrap();
        run_training(&config, &ex, full.path(), &RunOptions::default()).unwrap();
        let first = run_training(
            &config,
            &ex,
            split.path(),
            &RunOptions {
                autoencode_only: true,
                ..RunOptions::default()
            },
        )
        .unwrap();
        assert_eq!(first.epochs_completed, 1);
        let resumed = run_training(
            &config,
            &ex,
            split.path(),
            &RunOptions {
                resume: Some(split.path().join(CHECKPOINT_DIR).join(epoch_checkpoint_name(1))),
                ..RunOptions::default()
            },
        )
        .unwrap();
        assert_eq!(resumed.epochs_completed, 2);
        let a = TrainState::load(&full.path().join(FINAL_CHECKPOINT)).unwrap();
        let b = TrainState::load(&resumed.final_checkpoint).unwrap();
        for (p, q) in a.nets.store().params().iter().zip(b.nets.store().params()) {
            assert!(p.tensor.equal(&q.tensor), "{} differs", p.name);
        }
        assert_eq!(
            read_metrics(&full.path().join(METRICS_FILE)).unwrap(),
            read_metrics(&resumed.metrics_path).unwrap()
        );
        let other = TrainConfig {
            learning_rate: 0.002,
            ..config
        };
        let refused = run_training(
            &other,
            &ex,
            split.path(),
            &RunOptions {
                resume: Some(resumed.final_checkpoint.clone()),
                ..RunOptions::default()
            },
        );
        assert!(matches!(refused, Err(Error::Config(_))));
    }

    #[test]
    fn inference_requires_progression_training_and_is_deterministic() {
        let ex = examples(2);
        let config = tiny_config();
        let dir = tempfile::tempdir().unwrap();
        let ae = run_training(
            &config,
            &ex,
            dir.path(),
            &RunOptions {
                autoencode_only: true,
                ..RunOptions::default()
            },
        )
        .unwrap();
        assert!(matches!(load_trained(&ae.final_checkpoint), Err(Error::Checkpoint(_))));
        let done = run_training(&config, &ex, dir.path(), &RunOptions {
            resume: Some(ae.final_checkpoint.clone()),
            ..RunOptions::default()
        })
        .unwrap();
        let state = load_trained(&done.final_checkpoint).unwrap();
        let a = infer_followup(&state, &ex[0].image, Diagnosis::Ad, 4.0, 7).unwrap();
        let b = infer_followup(&state, &ex[0].image, Diagnosis::Ad, 4.0, 7).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(infer_followup(&state, &ex[0].image, Diagnosis::Ad, 6.0, 7).is_err());
    }
}
