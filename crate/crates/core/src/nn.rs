//! Minimal parameter store and layer set on top of libtorch tensors.
//!
//! Parameters are initialised from [`SeededRng`] rather than the libtorch
//! generator so that initialisation is reproducible and independent of the
//! torch build.

use std::collections::HashMap;

use tch::{Device, Kind, Tensor};

use crate::error::{Error, Result};
use crate::rng::SeededRng;

pub const GROUP_NORM_EPS: f64 = 1e-5;

pub struct Param {
    pub name: String,
    pub tensor: Tensor,
}

/// Ordered, named collection of trainable tensors.
pub struct ParamStore {
    kind: Kind,
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new(kind: Kind) -> Self {
        Self {
            kind,
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn kind(&self) -> Kind {
        self.kind
    }

    fn insert(&mut self, name: String, tensor: Tensor) -> Tensor {
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let tensor = tensor.to_kind(self.kind).set_requires_grad(true);
        let handle = tensor.shallow_clone();
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Param { name, tensor });
        handle
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.params[i].tensor)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    /// Deep copies of every parameter, detached from the graph.
    pub fn snapshot(&self) -> Vec<(String, Tensor)> {
        self.params
            .iter()
            .map(|p| (p.name.clone(), p.tensor.detach().copy()))
            .collect()
    }

    /// Overwrites parameter values in place from `(name, tensor)` pairs.
    /// Every stored parameter must be present with a matching shape.
    pub fn load(&self, values: &HashMap<String, Tensor>) -> Result<()> {
        for p in &self.params {
            let src = values
                .get(&p.name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {}", p.name)))?;
            if src.size() != p.tensor.size() {
                return Err(Error::Checkpoint(format!(
                    "parameter {} has shape {:?}, checkpoint has {:?}",
                    p.name,
                    p.tensor.size(),
                    src.size()
                )));
            }
            tch::no_grad(|| {
                let mut dst = p.tensor.shallow_clone();
                dst.copy_(&src.to_kind(self.kind));
            });
        }
        Ok(())
    }

    pub fn zero_grad(&self) {
        for p in &self.params {
            let mut g = p.tensor.grad();
            if g.defined() {
                let _ = g.detach_();
                let _ = g.zero_();
            }
        }
    }
}

/// Scoped view used while constructing layers.
pub struct ParamBuilder<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut SeededRng,
    prefix: String,
}

impl<'a> ParamBuilder<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut SeededRng) -> Self {
        Self {
            store,
            rng,
            prefix: String::new(),
        }
    }

    pub fn sub(&mut self, name: &str) -> ParamBuilder<'_> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        ParamBuilder {
            store: self.store,
            rng: self.rng,
            prefix,
        }
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    pub fn uniform(&mut self, name: &str, shape: &[i64], bound: f64) -> Tensor {
        let n: i64 = shape.iter().product();
        let values: Vec<f64> = (0..n)
            .map(|_| self.rng.uniform_range(-bound, bound))
            .collect();
        let t = Tensor::from_slice(&values).reshape(shape);
        let full = self.full_name(name);
        self.store.insert(full, t)
    }

    pub fn constant(&mut self, name: &str, shape: &[i64], value: f64) -> Tensor {
        let t = Tensor::full(shape, value, (Kind::Double, Device::Cpu));
        let full = self.full_name(name);
        self.store.insert(full, t)
    }
}

#[derive(Debug)]
pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    pub fn new(pb: &mut ParamBuilder, inputs: usize, outputs: usize) -> Self {
        let bound = 1.0 / (inputs as f64).sqrt();
        Self {
            weight: pb.uniform("weight", &[outputs as i64, inputs as i64], bound),
            bias: pb.uniform("bias", &[outputs as i64], bound),
        }
    }

    pub fn zeros(pb: &mut ParamBuilder, inputs: usize, outputs: usize) -> Self {
        Self {
            weight: pb.constant("weight", &[outputs as i64, inputs as i64], 0.0),
            bias: pb.constant("bias", &[outputs as i64], 0.0),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        x.linear(&self.weight, Some(&self.bias))
    }
}

#[derive(Debug)]
pub struct Conv2d {
    weight: Tensor,
    bias: Tensor,
    stride: i64,
    padding: i64,
}

impl Conv2d {
    pub fn new(
        pb: &mut ParamBuilder,
        inputs: usize,
        outputs: usize,
        kernel: usize,
        stride: usize,
    ) -> Self {
        let fan_in = (inputs * kernel * kernel) as f64;
        let bound = 1.0 / fan_in.sqrt();
        let k = kernel as i64;
        Self {
            weight: pb.uniform("weight", &[outputs as i64, inputs as i64, k, k], bound),
            bias: pb.uniform("bias", &[outputs as i64], bound),
            stride: stride as i64,
            padding: (kernel / 2) as i64,
        }
    }

    pub fn zeros(pb: &mut ParamBuilder, inputs: usize, outputs: usize, kernel: usize) -> Self {
        let k = kernel as i64;
        Self {
            weight: pb.constant("weight", &[outputs as i64, inputs as i64, k, k], 0.0),
            bias: pb.constant("bias", &[outputs as i64], 0.0),
            stride: 1,
            padding: (kernel / 2) as i64,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        x.conv2d(
            &self.weight,
            Some(&self.bias),
            [self.stride, self.stride],
            [self.padding, self.padding],
            [1, 1],
            1,
        )
    }
}

fn check_groups(channels: usize, groups: usize) -> Result<()> {
    if groups == 0 || channels % groups != 0 {
        return Err(Error::Config(format!(
            "{groups} groups do not divide {channels} channels"
        )));
    }
    Ok(())
}

/// Group normalisation with a learned per-channel affine.
#[derive(Debug)]
pub struct GroupNorm {
    groups: i64,
    weight: Tensor,
    bias: Tensor,
}

impl GroupNorm {
    pub fn new(pb: &mut ParamBuilder, channels: usize, groups: usize) -> Result<Self> {
        check_groups(channels, groups)?;
        Ok(Self {
            groups: groups as i64,
            weight: pb.constant("weight", &[channels as i64], 1.0),
            bias: pb.constant("bias", &[channels as i64], 0.0),
        })
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        x.group_norm(
            self.groups,
            Some(&self.weight),
            Some(&self.bias),
            GROUP_NORM_EPS,
            false,
        )
    }
}

/// Normalises `h` per group then applies `h * (1 + scale) + bias` channelwise,
/// with `scale` and `bias` of shape `[batch, channels]`.
pub fn modulated_group_norm(
    h: &Tensor,
    scale: &Tensor,
    bias: &Tensor,
    groups: usize,
) -> Result<Tensor> {
    let size = h.size();
    if size.len() != 4 {
        return Err(Error::Contract(format!(
            "feature map must be [B, C, H, W], got {size:?}"
        )));
    }
    let (b, c) = (size[0], size[1]);
    check_groups(c as usize, groups)?;
    if scale.size() != [b, c] || bias.size() != [b, c] {
        return Err(Error::Contract(format!(
            "modulation must be [{b}, {c}], got {:?} / {:?}",
            scale.size(),
            bias.size()
        )));
    }
    let normed = h.group_norm(groups as i64, None::<Tensor>, None::<Tensor>, GROUP_NORM_EPS, false);
    let scale = scale.view([b, c, 1, 1]);
    let bias = bias.view([b, c, 1, 1]);
    Ok(normed * (scale + 1.0) + bias)
}

/// Group normalisation whose per-channel scale and bias are projected from a latent code.
/// The scale half of the projection starts at zero, i.e. identity modulation.
#[derive(Debug)]
pub struct ModulatedGroupNorm {
    groups: usize,
    channels: i64,
    scale: Linear,
    bias: Linear,
}

impl ModulatedGroupNorm {
    pub fn new(
        pb: &mut ParamBuilder,
        channels: usize,
        groups: usize,
        latent_dim: usize,
    ) -> Result<Self> {
        check_groups(channels, groups)?;
        Ok(Self {
            groups,
            channels: channels as i64,
            scale: Linear::zeros(&mut pb.sub("scale"), latent_dim, channels),
            bias: Linear::new(&mut pb.sub("bias"), latent_dim, channels),
        })
    }

    pub fn forward(&self, h: &Tensor, z: &Tensor) -> Result<Tensor> {
        let scale = self.scale.forward(z);
        let bias = self.bias.forward(z);
        debug_assert_eq!(scale.size()[1], self.channels);
        modulated_group_norm(h, &scale, &bias, self.groups)
    }
}

/// Sinusoidal embedding of integer timesteps, `[batch, dim]`.
pub fn timestep_embedding(ts: &[usize], dim: usize, kind: Kind) -> Tensor {
    let half = dim / 2;
    let mut values = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        let t = t as f64;
        for i in 0..half {
            let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
            values.push((t * freq).sin());
        }
        for i in 0..half {
            let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
            values.push((t * freq).cos());
        }
        values.extend(std::iter::repeat_n(0.0, dim - 2 * half));
    }
    Tensor::from_slice(&values)
        .reshape([ts.len() as i64, dim as i64])
        .to_kind(kind)
}

enum SecondNorm {
    Plain(GroupNorm),
    Modulated(ModulatedGroupNorm),
}

/// Pre-activation residual block. Optionally adds a projected timestep
/// embedding after the first convolution and modulates the second
/// normalisation with a latent code.
pub struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    time_proj: Option<Linear>,
    norm2: SecondNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

pub struct ResBlockSpec {
    pub inputs: usize,
    pub outputs: usize,
    pub groups: usize,
    pub time_dim: Option<usize>,
    pub latent_dim: Option<usize>,
}

impl ResBlock {
    pub fn new(pb: &mut ParamBuilder, spec: ResBlockSpec) -> Result<Self> {
        let ResBlockSpec {
            inputs,
            outputs,
            groups,
            time_dim,
            latent_dim,
        } = spec;
        let norm1 = GroupNorm::new(&mut pb.sub("norm1"), inputs, groups)?;
        let conv1 = Conv2d::new(&mut pb.sub("conv1"), inputs, outputs, 3, 1);
        let time_proj = time_dim.map(|td| Linear::new(&mut pb.sub("time_proj"), td, outputs));
        let norm2 = match latent_dim {
            Some(d) => SecondNorm::Modulated(ModulatedGroupNorm::new(
                &mut pb.sub("norm2"),
                outputs,
                groups,
                d,
            )?),
            None => SecondNorm::Plain(GroupNorm::new(&mut pb.sub("norm2"), outputs, groups)?),
        };
        let conv2 = Conv2d::new(&mut pb.sub("conv2"), outputs, outputs, 3, 1);
        let skip = (inputs != outputs).then(|| Conv2d::new(&mut pb.sub("skip"), inputs, outputs, 1, 1));
        Ok(Self {
            norm1,
            conv1,
            time_proj,
            norm2,
            conv2,
            skip,
        })
    }

    pub fn forward(&self, x: &Tensor, temb: Option<&Tensor>, z: Option<&Tensor>) -> Result<Tensor> {
        let mut h = self.conv1.forward(&self.norm1.forward(x).silu());
        if let (Some(proj), Some(temb)) = (&self.time_proj, temb) {
            let t = proj.forward(&temb.silu());
            let (b, c) = (t.size()[0], t.size()[1]);
            h = h + t.view([b, c, 1, 1]);
        }
        let h = match (&self.norm2, z) {
            (SecondNorm::Modulated(n), Some(z)) => n.forward(&h, z)?,
            (SecondNorm::Modulated(_), None) => {
                return Err(Error::Contract("latent-modulated block called without latent".into()))
            }
            (SecondNorm::Plain(n), _) => n.forward(&h),
        };
        let h = self.conv2.forward(&h.silu());
        Ok(match &self.skip {
            Some(skip) => skip.forward(x) + h,
            None => x + h,
        })
    }
}
