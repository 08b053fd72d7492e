//! Closed-form diffusion mathematics: noise schedules, forward noising,
//! the deterministic (zero-variance) DDIM reverse step and the sampler loop.
//!
//! Timesteps are 1-based (`1..=T`). Index 0 denotes the clean image, with
//! cumulative signal level 1.

use tch::Tensor;

use crate::error::{Error, Result};

pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;
pub const DEFAULT_TIMESTEPS: usize = 1000;
pub const DEFAULT_SAMPLE_STEPS: usize = 50;

/// Per-step noise levels and their cumulative signal retention.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Linearly spaced noise levels from `beta_start` to `beta_end`.
    pub fn linear(timesteps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if timesteps == 0 {
            return Err(Error::Config("schedule needs at least one timestep".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::Config(format!(
                "beta endpoints must satisfy 0 < start <= end < 1, got ({beta_start}, {beta_end})"
            )));
        }
        let betas = if timesteps == 1 {
            vec![beta_start]
        } else {
            let span = (beta_end - beta_start) / (timesteps - 1) as f64;
            (0..timesteps)
                .map(|i| beta_start + span * i as f64)
                .collect()
        };
        Self::from_betas(betas)
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::Config("schedule needs at least one timestep".into()));
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::Config(format!("beta {b} outside (0, 1)")));
        }
        let mut acc = 1.0;
        let alpha_bars = betas
            .iter()
            .map(|b| {
                acc *= 1.0 - b;
                acc
            })
            .collect();
        Ok(Self { betas, alpha_bars })
    }

    pub fn timesteps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    /// Cumulative signal level at `t`; `t == 0` is the clean image (1.0).
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        match t {
            0 => Ok(1.0),
            t if t <= self.timesteps() => Ok(self.alpha_bars[t - 1]),
            t => Err(Error::TimestepRange {
                t,
                max: self.timesteps(),
            }),
        }
    }

    fn check_step(&self, t: usize) -> Result<f64> {
        if t == 0 {
            return Err(Error::TimestepRange {
                t,
                max: self.timesteps(),
            });
        }
        self.alpha_bar(t)
    }
}

/// Strictly decreasing timesteps visited by the sampler, from `T` down to 1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TimestepSubsequence {
    steps: Vec<usize>,
}

impl TimestepSubsequence {
    /// `count` timesteps on a uniform stride over `1..=T`, always containing both ends.
    /// A single-step subsequence is `[T]`.
    pub fn uniform(timesteps: usize, count: usize) -> Result<Self> {
        if count == 0 || count > timesteps {
            return Err(Error::Config(format!(
                "sample step count {count} must lie in 1..={timesteps}"
            )));
        }
        if count == 1 {
            return Ok(Self {
                steps: vec![timesteps],
            });
        }
        let stride = (timesteps - 1) as f64 / (count - 1) as f64;
        let steps = (0..count)
            .map(|i| timesteps - (i as f64 * stride).round() as usize)
            .collect();
        Self::from_steps(timesteps, steps)
    }

    pub fn from_steps(timesteps: usize, steps: Vec<usize>) -> Result<Self> {
        if steps.first() != Some(&timesteps) {
            return Err(Error::Config(format!(
                "subsequence must start at T={timesteps}"
            )));
        }
        if steps.len() > 1 && steps.last() != Some(&1) {
            return Err(Error::Config("subsequence must end at timestep 1".into()));
        }
        if steps.windows(2).any(|w| w[0] <= w[1]) {
            return Err(Error::Config(
                "subsequence must be strictly decreasing".into(),
            ));
        }
        Ok(Self { steps })
    }

    pub fn steps(&self) -> &[usize] {
        &self.steps
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.size() != b.size() {
        return Err(Error::Contract(format!(
            "{what}: shape {:?} vs {:?}",
            a.size(),
            b.size()
        )));
    }
    Ok(())
}

/// `x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps`.
pub fn forward_noise(x0: &Tensor, t: usize, eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    let abar = sched.check_step(t)?;
    same_shape(x0, eps, "forward_noise noise")?;
    Ok(x0 * abar.sqrt() + eps * (1.0 - abar).sqrt())
}

/// Batched forward noising with one timestep per leading-axis entry.
pub fn forward_noise_batch(
    x0: &Tensor,
    ts: &[usize],
    eps: &Tensor,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    same_shape(x0, eps, "forward_noise_batch noise")?;
    let size = x0.size();
    if size.first().copied() != Some(ts.len() as i64) {
        return Err(Error::Contract(format!(
            "{} timesteps for batch of {:?}",
            ts.len(),
            size
        )));
    }
    let abars = ts
        .iter()
        .map(|&t| sched.check_step(t))
        .collect::<Result<Vec<f64>>>()?;
    let mut coef_shape = vec![ts.len() as i64];
    coef_shape.extend(std::iter::repeat_n(1, size.len() - 1));
    let signal: Vec<f64> = abars.iter().map(|a| a.sqrt()).collect();
    let noise: Vec<f64> = abars.iter().map(|a| (1.0 - a).sqrt()).collect();
    let kind = x0.kind();
    let signal = Tensor::from_slice(&signal).reshape(&coef_shape).to_kind(kind);
    let noise = Tensor::from_slice(&noise).reshape(&coef_shape).to_kind(kind);
    Ok(x0 * signal + eps * noise)
}

/// One deterministic reverse step from `t_from` to `t_to` given an estimate of the clean image.
/// Stepping to `t_to == 0` returns the estimate itself.
pub fn ddim_step(
    x_t: &Tensor,
    x0_hat: &Tensor,
    t_from: usize,
    t_to: usize,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    if t_from <= t_to {
        return Err(Error::Argument(format!(
            "ddim_step must move backwards in time, got {t_from} -> {t_to}"
        )));
    }
    same_shape(x_t, x0_hat, "ddim_step estimate")?;
    let abar_from = sched.check_step(t_from)?;
    if t_to == 0 {
        return Ok(x0_hat.copy());
    }
    let abar_to = sched.alpha_bar(t_to)?;
    if abar_from >= 1.0 {
        return Err(Error::DivisionGuard(format!(
            "cumulative signal level at t={t_from} is 1"
        )));
    }
    let direction = (x_t - x0_hat * abar_from.sqrt()) / (1.0 - abar_from).sqrt();
    Ok(x0_hat * abar_to.sqrt() + direction * (1.0 - abar_to).sqrt())
}

/// Runs the reverse process from `init_noise` along `subseq`, calling
/// `denoiser(x_t, t, z)` for a clean-image estimate at every visited step.
pub fn ddim_sample<F>(
    mut denoiser: F,
    z: &Tensor,
    sched: &NoiseSchedule,
    subseq: &TimestepSubsequence,
    init_noise: &Tensor,
) -> Result<Tensor>
where
    F: FnMut(&Tensor, usize, &Tensor) -> Result<Tensor>,
{
    if subseq.steps().first() != Some(&sched.timesteps()) {
        return Err(Error::Config(format!(
            "subsequence starts at {:?} but schedule has T={}",
            subseq.steps().first(),
            sched.timesteps()
        )));
    }
    let steps = subseq.steps();
    let mut x = init_noise.shallow_clone();
    for (i, &t) in steps.iter().enumerate() {
        let x0_hat = denoiser(&x, t, z)?;
        if x0_hat.size() != x.size() {
            return Err(Error::Contract(format!(
                "denoiser returned shape {:?} for input {:?}",
                x0_hat.size(),
                x.size()
            )));
        }
        let t_to = steps.get(i + 1).copied().unwrap_or(0);
        x = ddim_step(&x, &x0_hat, t, t_to, sched)?;
    }
    Ok(x)
}
