//! Encoder, latent-conditioned denoising UNet and the network bundle used for
//! training and inference.
//!
//! The decoder predicts the clean image directly. Every residual block of the
//! UNet receives the timestep embedding additively and the latent code
//! through modulated group normalisation.

use serde::{Deserialize, Serialize};
use tch::{Kind, Tensor};

use crate::error::{Error, Result};
use crate::imaging::{image_to_tensor, Image};
use crate::nn::{timestep_embedding, Conv2d, GroupNorm, Linear, ParamBuilder, ParamStore, ResBlock, ResBlockSpec};
use crate::progression::{ConsistencyRegressor, LatentVector, ShiftEstimator};
use crate::rng::SeededRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    pub fn kind(self) -> Kind {
        match self {
            Precision::F32 => Kind::Float,
            Precision::F64 => Kind::Double,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub image_height: usize,
    pub image_width: usize,
    /// Latent dimension `d`.
    pub latent_dim: usize,
    /// Leading latent coordinates reserved for progression, `m < d`.
    pub progression_dim: usize,
    /// Decoder widths per resolution level (one downsampling between levels).
    pub channels: Vec<usize>,
    pub encoder_channels: Vec<usize>,
    pub regressor_channels: Vec<usize>,
    pub groups: usize,
    /// Width of the sinusoidal embedding and of its MLP.
    pub time_embed_dim: usize,
    pub shift_hidden: usize,
    pub regressor_hidden: usize,
    /// Start the decoder output convolution at zero (the model first predicts a blank image).
    pub zero_output_head: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_height: 64,
            image_width: 64,
            latent_dim: 64,
            progression_dim: 8,
            channels: vec![32, 64, 128, 128],
            encoder_channels: vec![32, 64, 128, 128],
            regressor_channels: vec![16, 32, 64, 64],
            groups: 8,
            time_embed_dim: 64,
            shift_hidden: 64,
            regressor_hidden: 64,
            zero_output_head: false,
        }
    }
}

impl ModelConfig {
    /// Full-scale geometry: 208x160 slices, d = 512, m = 50.
    pub fn full_scale() -> Self {
        Self {
            image_height: 208,
            image_width: 160,
            latent_dim: 512,
            progression_dim: 50,
            ..Self::default()
        }
    }

    /// Desk-scale 64x64 model (d = 64, m = 8) with narrow layers for CPU training.
    pub fn toy() -> Self {
        Self {
            channels: vec![16, 32, 64, 64],
            encoder_channels: vec![16, 32, 64, 64],
            regressor_channels: vec![8, 16, 32, 32],
            ..Self::default()
        }
    }

    /// Smallest useful configuration, for gradient checks.
    pub fn tiny() -> Self {
        Self {
            image_height: 8,
            image_width: 8,
            latent_dim: 8,
            progression_dim: 2,
            channels: vec![4, 8],
            encoder_channels: vec![4, 8],
            regressor_channels: vec![4, 8],
            groups: 2,
            time_embed_dim: 8,
            shift_hidden: 8,
            regressor_hidden: 8,
            zero_output_head: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0 < self.progression_dim && self.progression_dim < self.latent_dim) {
            return Err(Error::Config(format!(
                "need 0 < m < d, got m={}, d={}",
                self.progression_dim, self.latent_dim
            )));
        }
        for (name, widths) in [
            ("channels", &self.channels),
            ("encoder_channels", &self.encoder_channels),
            ("regressor_channels", &self.regressor_channels),
        ] {
            if widths.is_empty() {
                return Err(Error::Config(format!("{name} must list at least one level")));
            }
            if let Some(c) = widths.iter().find(|c| self.groups == 0 || **c % self.groups != 0) {
                return Err(Error::Config(format!(
                    "{name}: {} groups do not divide {c} channels",
                    self.groups
                )));
            }
            let factor = 1usize << (widths.len() - 1);
            if self.image_height % factor != 0 || self.image_width % factor != 0 {
                return Err(Error::Config(format!(
                    "{name}: image {}x{} not divisible by downsampling factor {factor}",
                    self.image_height, self.image_width
                )));
            }
        }
        if self.time_embed_dim < 2 {
            return Err(Error::Config("time_embed_dim must be at least 2".into()));
        }
        Ok(())
    }

    pub fn image_shape(&self) -> (usize, usize) {
        (self.image_height, self.image_width)
    }
}

/// Residual CNN with global average pooling onto the latent code.
pub struct Encoder {
    conv_in: Conv2d,
    levels: Vec<(ResBlock, Option<Conv2d>)>,
    norm_out: GroupNorm,
    head: Linear,
}

impl Encoder {
    fn new(pb: &mut ParamBuilder, cfg: &ModelConfig) -> Result<Self> {
        let widths = &cfg.encoder_channels;
        let conv_in = Conv2d::new(&mut pb.sub("conv_in"), 1, widths[0], 3, 1);
        let mut levels = Vec::new();
        let mut prev = widths[0];
        for (i, &c) in widths.iter().enumerate() {
            let mut level = pb.sub(&format!("level{i}"));
            let block = ResBlock::new(
                &mut level.sub("block"),
                ResBlockSpec {
                    inputs: prev,
                    outputs: c,
                    groups: cfg.groups,
                    time_dim: None,
                    latent_dim: None,
                },
            )?;
            let down = (i + 1 < widths.len()).then(|| Conv2d::new(&mut level.sub("down"), c, c, 3, 2));
            levels.push((block, down));
            prev = c;
        }
        Ok(Self {
            conv_in,
            levels,
            norm_out: GroupNorm::new(&mut pb.sub("norm_out"), prev, cfg.groups)?,
            head: Linear::new(&mut pb.sub("head"), prev, cfg.latent_dim),
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = self.conv_in.forward(x);
        for (block, down) in &self.levels {
            h = block.forward(&h, None, None)?;
            if let Some(down) = down {
                h = down.forward(&h);
            }
        }
        let pooled = self
            .norm_out
            .forward(&h)
            .silu()
            .mean_dim(&[2i64, 3][..], false, h.kind());
        Ok(self.head.forward(&pooled))
    }
}

/// UNet denoiser conditioned on timestep and latent code.
pub struct Decoder {
    time_dim: usize,
    time_fc1: Linear,
    time_fc2: Linear,
    conv_in: Conv2d,
    down: Vec<(ResBlock, Option<Conv2d>)>,
    mid: ResBlock,
    up: Vec<ResBlock>,
    norm_out: GroupNorm,
    conv_out: Conv2d,
}

impl Decoder {
    fn new(pb: &mut ParamBuilder, cfg: &ModelConfig) -> Result<Self> {
        let widths = &cfg.channels;
        let td = cfg.time_embed_dim;
        let spec = |inputs, outputs| ResBlockSpec {
            inputs,
            outputs,
            groups: cfg.groups,
            time_dim: Some(td),
            latent_dim: Some(cfg.latent_dim),
        };
        let time_fc1 = Linear::new(&mut pb.sub("time_fc1"), td, td);
        let time_fc2 = Linear::new(&mut pb.sub("time_fc2"), td, td);
        let conv_in = Conv2d::new(&mut pb.sub("conv_in"), 1, widths[0], 3, 1);
        let mut down = Vec::new();
        let mut prev = widths[0];
        for (i, &c) in widths.iter().enumerate() {
            let mut level = pb.sub(&format!("down{i}"));
            let block = ResBlock::new(&mut level.sub("block"), spec(prev, c))?;
            let ds = (i + 1 < widths.len()).then(|| Conv2d::new(&mut level.sub("down"), c, c, 3, 2));
            down.push((block, ds));
            prev = c;
        }
        let mid = ResBlock::new(&mut pb.sub("mid"), spec(prev, prev))?;
        // Built deepest-first to match the order they are applied in.
        let mut up = Vec::new();
        for i in (0..widths.len()).rev() {
            let block = ResBlock::new(&mut pb.sub(&format!("up{i}")), spec(prev + widths[i], widths[i]))?;
            up.push(block);
            prev = widths[i];
        }
        let norm_out = GroupNorm::new(&mut pb.sub("norm_out"), prev, cfg.groups)?;
        let conv_out = if cfg.zero_output_head {
            Conv2d::zeros(&mut pb.sub("conv_out"), prev, 1, 3)
        } else {
            Conv2d::new(&mut pb.sub("conv_out"), prev, 1, 3, 1)
        };
        Ok(Self {
            time_dim: td,
            time_fc1,
            time_fc2,
            conv_in,
            down,
            mid,
            up,
            norm_out,
            conv_out,
        })
    }

    fn forward(&self, x_t: &Tensor, ts: &[usize], z: &Tensor) -> Result<Tensor> {
        let temb = timestep_embedding(ts, self.time_dim, x_t.kind());
        let temb = self.time_fc2.forward(&self.time_fc1.forward(&temb).silu());
        let mut h = self.conv_in.forward(x_t);
        let mut skips = Vec::with_capacity(self.down.len());
        for (block, ds) in &self.down {
            h = block.forward(&h, Some(&temb), Some(z))?;
            skips.push(h.shallow_clone());
            if let Some(ds) = ds {
                h = ds.forward(&h);
            }
        }
        h = self.mid.forward(&h, Some(&temb), Some(z))?;
        for (block, skip) in self.up.iter().zip(skips.iter().rev()) {
            if h.size()[2] != skip.size()[2] {
                h = h.upsample_nearest2d([skip.size()[2], skip.size()[3]], None, None);
            }
            h = block.forward(&Tensor::cat(&[&h, skip], 1), Some(&temb), Some(z))?;
        }
        Ok(self.conv_out.forward(&self.norm_out.forward(&h).silu()))
    }
}

/// Encoder, decoder, shift estimator and consistency regressor sharing one parameter store.
pub struct Networks {
    config: ModelConfig,
    store: ParamStore,
    encoder: Encoder,
    decoder: Decoder,
    shift: ShiftEstimator,
    regressor: ConsistencyRegressor,
}

pub const ENCODER_PREFIX: &str = "enc";
pub const DECODER_PREFIX: &str = "dec";
pub const SHIFT_PREFIX: &str = "shift";
pub const REGRESSOR_PREFIX: &str = "reg";

impl Networks {
    /// Fresh networks with weights drawn from `seed`.
    pub fn new(config: ModelConfig, precision: Precision, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new(precision.kind());
        let mut rng = SeededRng::substream(seed, 0x1417);
        let mut pb = ParamBuilder::new(&mut store, &mut rng);
        let encoder = Encoder::new(&mut pb.sub(ENCODER_PREFIX), &config)?;
        let decoder = Decoder::new(&mut pb.sub(DECODER_PREFIX), &config)?;
        let shift = ShiftEstimator::new(&mut pb.sub(SHIFT_PREFIX), config.shift_hidden, config.progression_dim);
        let regressor = ConsistencyRegressor::new(
            &mut pb.sub(REGRESSOR_PREFIX),
            &config.regressor_channels,
            config.groups,
            config.regressor_hidden,
        )?;
        Ok(Self {
            config,
            store,
            encoder,
            decoder,
            shift,
            regressor,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn kind(&self) -> Kind {
        self.store.kind()
    }

    pub fn shift_estimator(&self) -> &ShiftEstimator {
        &self.shift
    }

    pub fn regressor(&self) -> &ConsistencyRegressor {
        &self.regressor
    }

    fn check_images(&self, x: &Tensor, what: &str) -> Result<()> {
        let size = x.size();
        let (h, w) = self.config.image_shape();
        if size.len() != 4 || size[1] != 1 || size[2] != h as i64 || size[3] != w as i64 {
            return Err(Error::Contract(format!(
                "{what}: expected [B, 1, {h}, {w}], got {size:?}"
            )));
        }
        Ok(())
    }

    /// `[B, 1, H, W] -> [B, d]`.
    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        self.check_images(x, "encode")?;
        self.encoder.forward(x)
    }

    pub fn encode_image(&self, image: &Image) -> Result<LatentVector> {
        let x = image_to_tensor(image, self.kind());
        let z = tch::no_grad(|| self.encode(&x))?;
        Ok(LatentVector::from_tensor_rows(&z)?.remove(0))
    }

    /// Clean-image estimate `[B, 1, H, W]` from noisy input, per-sample timesteps and latents `[B, d]`.
    pub fn denoise(&self, x_t: &Tensor, ts: &[usize], z: &Tensor) -> Result<Tensor> {
        self.check_images(x_t, "denoise")?;
        let b = x_t.size()[0];
        if z.size() != [b, self.config.latent_dim as i64] {
            return Err(Error::Contract(format!(
                "latent must be [{b}, {}], got {:?}",
                self.config.latent_dim,
                z.size()
            )));
        }
        if ts.len() as i64 != b {
            return Err(Error::Contract(format!("{} timesteps for batch {b}", ts.len())));
        }
        self.decoder.forward(x_t, ts, z)
    }

    /// Parameters whose names start with `prefix.`.
    pub fn params_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = &'a crate::nn::Param> + 'a {
        self.store
            .params()
            .iter()
            .filter(move |p| p.name.split('.').next() == Some(prefix))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tch::Device;

    fn small_config() -> ModelConfig {
        ModelConfig {
            image_height: 16,
            image_width: 16,
            latent_dim: 8,
            progression_dim: 2,
            channels: vec![4, 8],
            encoder_channels: vec![4, 8],
            regressor_channels: vec![4, 8],
            groups: 2,
            time_embed_dim: 8,
            shift_hidden: 8,
            regressor_hidden: 8,
            zero_output_head: false,
        }
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        assert!(ModelConfig::full_scale().validate().is_ok());
        let bad_m = ModelConfig {
            progression_dim: 8,
            latent_dim: 8,
            ..small_config()
        };
        assert!(matches!(bad_m.validate(), Err(Error::Config(_))));
        let bad_size = ModelConfig {
            image_height: 15,
            ..small_config()
        };
        assert!(bad_size.validate().is_err());
        let bad_groups = ModelConfig {
            groups: 3,
            ..small_config()
        };
        assert!(bad_groups.validate().is_err());
    }

    #[test]
    fn full_scale_latent_width() {
        let cfg = ModelConfig {
            latent_dim: 512,
            progression_dim: 50,
            ..small_config()
        };
        let nets = Networks::new(cfg, Precision::F32, 0).unwrap();
        let z = nets.encode_image(&Image::zeros((16, 16))).unwrap();
        assert_eq!(z.dim(), 512);
        let s = nets
            .shift_estimator()
            .estimate_shift(
                &crate::progression::encode_attributes(crate::progression::Diagnosis::Ad, 2.0).unwrap(),
                Kind::Float,
            )
            .unwrap();
        assert_eq!(s.0.len(), 50);
    }

    #[test]
    fn encode_is_deterministic_and_shape_checked() {
        let nets = Networks::new(small_config(), Precision::F32, 1).unwrap();
        let img = Image::from_shape_fn((16, 16), |(r, c)| ((r * 3 + c) % 7) as f32 / 7.0);
        assert_eq!(nets.encode_image(&img).unwrap(), nets.encode_image(&img).unwrap());
        let wrong = Tensor::zeros([1, 1, 8, 8], (Kind::Float, Device::Cpu));
        assert!(matches!(nets.encode(&wrong), Err(Error::Contract(_))));
    }

    #[test]
    fn denoise_shapes_and_latent_check() {
        let nets = Networks::new(small_config(), Precision::F32, 2).unwrap();
        let x = SeededRng::new(1).normal_tensor(&[3, 1, 16, 16], Kind::Float);
        let z = Tensor::zeros([3, 8], (Kind::Float, Device::Cpu));
        let out = nets.denoise(&x, &[1, 500, 1000], &z).unwrap();
        assert_eq!(out.size(), x.size());
        let bad_z = Tensor::zeros([3, 7], (Kind::Float, Device::Cpu));
        assert!(matches!(nets.denoise(&x, &[1, 2, 3], &bad_z), Err(Error::Contract(_))));
    }

    #[test]
    fn same_seed_same_weights() {
        let a = Networks::new(small_config(), Precision::F32, 3).unwrap();
        let b = Networks::new(small_config(), Precision::F32, 3).unwrap();
        for (pa, pb) in a.store().params().iter().zip(b.store().params()) {
            assert_eq!(pa.name, pb.name);
            assert!(pa.tensor.equal(&pb.tensor));
        }
        let groups: Vec<usize> = [ENCODER_PREFIX, DECODER_PREFIX, SHIFT_PREFIX, REGRESSOR_PREFIX]
            .iter()
            .map(|p| a.params_with_prefix(p).count())
            .collect();
        assert!(groups.iter().all(|&n| n > 0));
        assert_eq!(groups.iter().sum::<usize>(), a.store().len());
    }
}
