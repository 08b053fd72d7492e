//! Progression control: attribute encoding, the latent shift estimator, the
//! subspace-restricted shift, the ROI-masked residual and the consistency
//! regressor with its cross-entropy objective.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use tch::{Kind, Tensor};

use crate::error::{Error, Result};
use crate::imaging::{fill_bbox, mask_bbox, BBox, Mask};
use crate::nn::{Conv2d, GroupNorm, Linear, ParamBuilder, ResBlock, ResBlockSpec};

pub const STATUS_SLOTS: usize = 3;
pub const AGE_BINS: usize = 10;
pub const AGE_BIN_YEARS: f64 = 0.5;
pub const ATTRIBUTE_LEN: usize = STATUS_SLOTS + AGE_BINS;
pub const MAX_AGE_GAP: f64 = AGE_BINS as f64 * AGE_BIN_YEARS;
/// Floor applied to probabilities before taking logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Diagnosis {
    #[serde(rename = "CN")]
    Cn,
    #[serde(rename = "MCI")]
    Mci,
    #[serde(rename = "AD")]
    Ad,
}

impl Diagnosis {
    pub const ALL: [Diagnosis; 3] = [Diagnosis::Cn, Diagnosis::Mci, Diagnosis::Ad];

    pub fn index(self) -> usize {
        match self {
            Diagnosis::Cn => 0,
            Diagnosis::Mci => 1,
            Diagnosis::Ad => 2,
        }
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Diagnosis::Cn => "CN",
            Diagnosis::Mci => "MCI",
            Diagnosis::Ad => "AD",
        }
    }
}

impl fmt::Display for Diagnosis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Diagnosis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "CN" => Ok(Diagnosis::Cn),
            "MCI" => Ok(Diagnosis::Mci),
            "AD" => Ok(Diagnosis::Ad),
            other => Err(Error::Argument(format!("unknown cognitive status {other:?}"))),
        }
    }
}

/// One-hot cognitive status followed by one-hot age-gap bin (13 slots).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct AttributeVector {
    status: Diagnosis,
    /// 1-based bin; bin `k` covers gaps in `((k-1)*0.5, k*0.5]` years.
    age_bin: usize,
}

impl AttributeVector {
    pub fn from_bin(status: Diagnosis, age_bin: usize) -> Result<Self> {
        if !(1..=AGE_BINS).contains(&age_bin) {
            return Err(Error::OutOfRange(format!(
                "age-gap bin {age_bin} outside 1..={AGE_BINS}"
            )));
        }
        Ok(Self { status, age_bin })
    }

    pub fn status(&self) -> Diagnosis {
        self.status
    }

    pub fn age_bin(&self) -> usize {
        self.age_bin
    }

    /// Upper edge of the bin in years.
    pub fn age_gap_years(&self) -> f64 {
        self.age_bin as f64 * AGE_BIN_YEARS
    }

    pub fn status_one_hot(&self) -> [f64; STATUS_SLOTS] {
        let mut v = [0.0; STATUS_SLOTS];
        v[self.status.index()] = 1.0;
        v
    }

    pub fn age_one_hot(&self) -> [f64; AGE_BINS] {
        let mut v = [0.0; AGE_BINS];
        v[self.age_bin - 1] = 1.0;
        v
    }

    pub fn combined(&self) -> [f64; ATTRIBUTE_LEN] {
        let mut v = [0.0; ATTRIBUTE_LEN];
        v[self.status.index()] = 1.0;
        v[STATUS_SLOTS + self.age_bin - 1] = 1.0;
        v
    }
}

/// Bins a follow-up gap: bin index is `ceil(gap / 0.5)`.
pub fn encode_attributes(status: Diagnosis, age_gap: f64) -> Result<AttributeVector> {
    if !(age_gap > 0.0 && age_gap <= MAX_AGE_GAP) {
        return Err(Error::OutOfRange(format!(
            "age gap {age_gap} years outside (0, {MAX_AGE_GAP}]"
        )));
    }
    // Absorb representation error so that e.g. 1.5000000000000002 stays in bin 3.
    let bin = ((age_gap / AGE_BIN_YEARS) - 1e-9).ceil().max(1.0) as usize;
    AttributeVector::from_bin(status, bin)
}

pub fn attributes_tensor(attrs: &[AttributeVector], kind: Kind) -> Tensor {
    let flat: Vec<f64> = attrs.iter().flat_map(|a| a.combined()).collect();
    Tensor::from_slice(&flat)
        .reshape([attrs.len() as i64, ATTRIBUTE_LEN as i64])
        .to_kind(kind)
}

/// Semantic code of an image.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentVector(pub Vec<f64>);

/// Movement applied to the leading (progression) coordinates of a latent.
#[derive(Debug, Clone, PartialEq)]
pub struct ShiftVector(pub Vec<f64>);

impl LatentVector {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn to_tensor(&self, kind: Kind) -> Tensor {
        Tensor::from_slice(&self.0)
            .reshape([1, self.0.len() as i64])
            .to_kind(kind)
    }

    /// Rows of a `[batch, d]` tensor.
    pub fn from_tensor_rows(t: &Tensor) -> Result<Vec<LatentVector>> {
        let size = t.size();
        if size.len() != 2 {
            return Err(Error::Contract(format!("latent batch must be 2-D, got {size:?}")));
        }
        let d = size[1] as usize;
        let flat: Vec<f64> = t
            .detach()
            .to_kind(Kind::Double)
            .contiguous()
            .flatten(0, -1)
            .try_into()?;
        Ok(flat.chunks(d).map(|c| LatentVector(c.to_vec())).collect())
    }
}

impl ShiftVector {
    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// `z_f = z_b + [shift; 0]`: only the first `m = len(shift)` coordinates move.
pub fn apply_shift(z_b: &LatentVector, shift: &ShiftVector) -> Result<LatentVector> {
    let (d, m) = (z_b.dim(), shift.0.len());
    if m == 0 || m >= d {
        return Err(Error::Config(format!(
            "progression subspace must satisfy 0 < m < d, got m={m}, d={d}"
        )));
    }
    let mut out = z_b.0.clone();
    for (o, s) in out.iter_mut().zip(&shift.0) {
        *o += s;
    }
    Ok(LatentVector(out))
}

/// Batched, differentiable form of [`apply_shift`] for `[B, d]` latents and `[B, m]` shifts.
/// The trailing `d - m` columns are copied through untouched.
pub fn apply_shift_tensor(z: &Tensor, shift: &Tensor) -> Result<Tensor> {
    let (zs, ss) = (z.size(), shift.size());
    if zs.len() != 2 || ss.len() != 2 || zs[0] != ss[0] {
        return Err(Error::Contract(format!(
            "latent {zs:?} and shift {ss:?} batch mismatch"
        )));
    }
    let (d, m) = (zs[1], ss[1]);
    if m == 0 || m >= d {
        return Err(Error::Config(format!(
            "progression subspace must satisfy 0 < m < d, got m={m}, d={d}"
        )));
    }
    let head = z.narrow(1, 0, m) + shift;
    Ok(Tensor::cat(&[head, z.narrow(1, m, d - m)], 1))
}

/// Filled bounding box of every region in both mask sets.
#[derive(Debug, Clone)]
pub struct ResidualMask {
    pub mask: Mask,
    pub bbox: Option<BBox>,
}

impl ResidualMask {
    pub fn has_box(&self) -> bool {
        self.bbox.is_some()
    }
}

pub fn residual_roi_mask(mask_b: &[Mask], mask_f: &[Mask]) -> Result<ResidualMask> {
    residual_roi_mask_with_margin(mask_b, mask_f, 0)
}

/// As [`residual_roi_mask`] with the box grown by `margin` pixels on every side
/// (equivalent to dilating the regions before boxing).
pub fn residual_roi_mask_with_margin(
    mask_b: &[Mask],
    mask_f: &[Mask],
    margin: usize,
) -> Result<ResidualMask> {
    let shape = mask_b
        .first()
        .or(mask_f.first())
        .map(|m| m.dim())
        .ok_or_else(|| Error::Contract("no region masks supplied".into()))?;
    if let Some(bad) = mask_b.iter().chain(mask_f).find(|m| m.dim() != shape) {
        return Err(Error::Contract(format!(
            "region mask shape {:?} differs from {shape:?}",
            bad.dim()
        )));
    }
    let bbox = mask_b
        .iter()
        .chain(mask_f)
        .filter_map(mask_bbox)
        .reduce(BBox::union)
        .map(|b| b.expand(margin, shape.0, shape.1));
    if bbox.is_none() {
        log::warn!("residual mask: no region pixels in either image, residual fully masked");
    }
    Ok(ResidualMask {
        mask: fill_bbox(shape.0, shape.1, bbox),
        bbox,
    })
}

/// Latent shift estimator: MLP from the 13-slot attribute vector to an `m`-dimensional shift.
pub struct ShiftEstimator {
    layers: [Linear; 3],
    progression_dim: usize,
}

impl ShiftEstimator {
    pub fn new(pb: &mut ParamBuilder, hidden: usize, progression_dim: usize) -> Self {
        Self {
            layers: [
                Linear::new(&mut pb.sub("fc1"), ATTRIBUTE_LEN, hidden),
                Linear::new(&mut pb.sub("fc2"), hidden, hidden),
                Linear::new(&mut pb.sub("fc3"), hidden, progression_dim),
            ],
            progression_dim,
        }
    }

    pub fn progression_dim(&self) -> usize {
        self.progression_dim
    }

    /// `[B, 13] -> [B, m]`.
    pub fn forward(&self, attrs: &Tensor) -> Result<Tensor> {
        let size = attrs.size();
        if size.len() != 2 || size[1] != ATTRIBUTE_LEN as i64 {
            return Err(Error::Contract(format!(
                "attribute batch must be [B, {ATTRIBUTE_LEN}], got {size:?}"
            )));
        }
        let h = self.layers[0].forward(attrs).silu();
        let h = self.layers[1].forward(&h).silu();
        Ok(self.layers[2].forward(&h))
    }

    pub fn estimate_shift(&self, attrs: &AttributeVector, kind: Kind) -> Result<ShiftVector> {
        let out = tch::no_grad(|| self.forward(&attributes_tensor(&[*attrs], kind)))?;
        let values: Vec<f64> = out.to_kind(Kind::Double).flatten(0, -1).try_into()?;
        Ok(ShiftVector(values))
    }
}

/// Attribute logits regressed by the consistency module.
pub struct AttributeLogits {
    /// `[B, 3]`
    pub status: Tensor,
    /// `[B, 10]`
    pub age: Tensor,
}

/// Consistency regressor: small residual CNN over the channel-stacked
/// (baseline, generated follow-up, masked residual) triple with an MLP head.
pub struct ConsistencyRegressor {
    conv_in: Conv2d,
    blocks: Vec<(ResBlock, Option<Conv2d>)>,
    norm_out: GroupNorm,
    fc1: Linear,
    fc2: Linear,
}

impl ConsistencyRegressor {
    pub fn new(
        pb: &mut ParamBuilder,
        channels: &[usize],
        groups: usize,
        hidden: usize,
    ) -> Result<Self> {
        let first = *channels
            .first()
            .ok_or_else(|| Error::Config("regressor needs at least one level".into()))?;
        let conv_in = Conv2d::new(&mut pb.sub("conv_in"), 3, first, 3, 1);
        let mut blocks = Vec::new();
        let mut prev = first;
        for (i, &c) in channels.iter().enumerate() {
            let mut level = pb.sub(&format!("level{i}"));
            let block = ResBlock::new(
                &mut level.sub("block"),
                ResBlockSpec {
                    inputs: prev,
                    outputs: c,
                    groups,
                    time_dim: None,
                    latent_dim: None,
                },
            )?;
            let down = (i + 1 < channels.len()).then(|| Conv2d::new(&mut level.sub("down"), c, c, 3, 2));
            blocks.push((block, down));
            prev = c;
        }
        Ok(Self {
            conv_in,
            blocks,
            norm_out: GroupNorm::new(&mut pb.sub("norm_out"), prev, groups)?,
            fc1: Linear::new(&mut pb.sub("fc1"), prev, hidden),
            fc2: Linear::new(&mut pb.sub("fc2"), hidden, ATTRIBUTE_LEN),
        })
    }

    pub fn forward(
        &self,
        x_b: &Tensor,
        x_f_hat: &Tensor,
        masked_residual: &Tensor,
    ) -> Result<AttributeLogits> {
        if x_b.size() != x_f_hat.size() || x_b.size() != masked_residual.size() {
            return Err(Error::Contract(format!(
                "regressor inputs differ in shape: {:?}, {:?}, {:?}",
                x_b.size(),
                x_f_hat.size(),
                masked_residual.size()
            )));
        }
        if x_b.dim() != 4 || x_b.size()[1] != 1 {
            return Err(Error::Contract(format!(
                "regressor inputs must be [B, 1, H, W], got {:?}",
                x_b.size()
            )));
        }
        let x = Tensor::cat(&[x_b, x_f_hat, masked_residual], 1);
        let mut h = self.conv_in.forward(&x);
        for (block, down) in &self.blocks {
            h = block.forward(&h, None, None)?;
            if let Some(down) = down {
                h = down.forward(&h);
            }
        }
        let pooled = self.norm_out.forward(&h).silu().mean_dim(&[2i64, 3][..], false, h.kind());
        let logits = self.fc2.forward(&self.fc1.forward(&pooled).silu());
        Ok(AttributeLogits {
            status: logits.narrow(1, 0, STATUS_SLOTS as i64),
            age: logits.narrow(1, STATUS_SLOTS as i64, AGE_BINS as i64),
        })
    }
}

/// Batch-mean of `-v_d . log p_d - v_a . log p_a` with per-head softmax
/// probabilities floored at [`PROB_FLOOR`].
pub fn attribute_ce_loss(logits: &AttributeLogits, attrs: &[AttributeVector]) -> Result<Tensor> {
    let b = attrs.len() as i64;
    if logits.status.size() != [b, STATUS_SLOTS as i64] || logits.age.size() != [b, AGE_BINS as i64]
    {
        return Err(Error::Contract(format!(
            "logits {:?}/{:?} for {b} attribute vectors",
            logits.status.size(),
            logits.age.size()
        )));
    }
    let floor = PROB_FLOOR.ln();
    let status_idx: Vec<i64> = attrs.iter().map(|a| a.status().index() as i64).collect();
    let age_idx: Vec<i64> = attrs.iter().map(|a| (a.age_bin() - 1) as i64).collect();
    let nll = |logits: &Tensor, idx: &[i64]| {
        let idx = Tensor::from_slice(idx).view([b, 1]);
        logits
            .log_softmax(1, logits.kind())
            .clamp_min(floor)
            .gather(1, &idx, false)
            .neg()
            .squeeze_dim(1)
    };
    let total = nll(&logits.status, &status_idx) + nll(&logits.age, &age_idx);
    Ok(total.mean(total.kind()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use crate::rng::SeededRng;
    use proptest::prelude::*;
    use tch::Device;

    #[test]
    fn attribute_binning_examples() {
        let a = encode_attributes(Diagnosis::Ad, 1.0).unwrap();
        assert_eq!(a.status_one_hot(), [0.0, 0.0, 1.0]);
        assert_eq!(a.age_bin(), 2);
        assert_eq!(a.age_one_hot()[1], 1.0);

        let c = encode_attributes(Diagnosis::Cn, 0.5).unwrap();
        assert_eq!(c.status_one_hot(), [1.0, 0.0, 0.0]);
        assert_eq!(c.age_bin(), 1);

        let m = encode_attributes(Diagnosis::Mci, 5.0).unwrap();
        assert_eq!(m.age_bin(), 10);
        let combined = m.combined();
        assert_eq!(combined.len(), 13);
        assert_eq!(combined[1], 1.0);
        assert_eq!(combined[12], 1.0);
        assert_eq!(combined.iter().sum::<f64>(), 2.0);

        assert_eq!(encode_attributes(Diagnosis::Cn, 0.7).unwrap().age_bin(), 2);
        assert_eq!(encode_attributes(Diagnosis::Cn, 0.1 + 0.2 + 1.2).unwrap().age_bin(), 3);
    }

    #[test]
    fn attribute_range_errors() {
        for gap in [0.0, -1.0, 5.01, f64::NAN] {
            assert!(matches!(
                encode_attributes(Diagnosis::Cn, gap),
                Err(Error::OutOfRange(_))
            ));
        }
        assert!("XYZ".parse::<Diagnosis>().is_err());
        assert_eq!("ad".parse::<Diagnosis>().unwrap(), Diagnosis::Ad);
    }

    #[test]
    fn shift_examples() {
        let z = LatentVector(vec![1.0, 1.0, 1.0, 1.0]);
        let out = apply_shift(&z, &ShiftVector(vec![0.5, -0.5])).unwrap();
        assert_eq!(out.0, vec![1.5, 0.5, 1.0, 1.0]);
        let zero = apply_shift(&z, &ShiftVector(vec![0.0, 0.0])).unwrap();
        assert_eq!(zero, z);
        assert!(matches!(
            apply_shift(&z, &ShiftVector(vec![0.0; 4])),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn tensor_shift_matches_vector_shift() {
        let mut rng = SeededRng::new(9);
        let z = rng.normal_tensor(&[3, 6], Kind::Double);
        let s = rng.normal_tensor(&[3, 2], Kind::Double);
        let out = apply_shift_tensor(&z, &s).unwrap();
        let zs = LatentVector::from_tensor_rows(&z).unwrap();
        let ss = LatentVector::from_tensor_rows(&s).unwrap();
        let outs = LatentVector::from_tensor_rows(&out).unwrap();
        for i in 0..3 {
            let expected = apply_shift(&zs[i], &ShiftVector(ss[i].0.clone())).unwrap();
            assert_eq!(outs[i], expected);
        }
    }

    fn point_mask(n: usize, r: usize, c: usize) -> Mask {
        let mut m = Mask::zeros((n, n));
        m[[r, c]] = 1.0;
        m
    }

    fn box_mask(n: usize, lo: usize, hi: usize) -> Mask {
        let mut m = Mask::zeros((n, n));
        m.slice_mut(ndarray::s![lo..=hi, lo..=hi]).fill(1.0);
        m
    }

    #[test]
    fn residual_mask_examples() {
        let a = point_mask(12, 5, 5);
        let r = residual_roi_mask(&[a.clone()], &[a]).unwrap();
        assert_eq!(r.mask.sum(), 1.0);
        assert_eq!(r.mask[[5, 5]], 1.0);

        let b = box_mask(12, 2, 4);
        let f = box_mask(12, 6, 8);
        let r = residual_roi_mask(&[b], &[f]).unwrap();
        // Union box by coordinate min/max: rows and columns 2..=8.
        assert_eq!(
            r.bbox.unwrap(),
            BBox {
                row_min: 2,
                row_max: 8,
                col_min: 2,
                col_max: 8
            }
        );
        assert_eq!(r.mask.sum(), 49.0);

        let empty = Mask::zeros((12, 12));
        let r = residual_roi_mask(&[empty.clone()], &[empty]).unwrap();
        assert!(!r.has_box());
        assert_eq!(r.mask.sum(), 0.0);

        let small = Mask::zeros((5, 5));
        assert!(matches!(
            residual_roi_mask(&[small], &[Mask::zeros((6, 6))]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn margin_grows_box_within_image() {
        let a = point_mask(10, 1, 8);
        let r = residual_roi_mask_with_margin(&[a.clone()], &[a], 2).unwrap();
        assert_eq!(
            r.bbox.unwrap(),
            BBox {
                row_min: 0,
                row_max: 3,
                col_min: 6,
                col_max: 9
            }
        );
    }

    fn logits(status: &[f64], age: &[f64]) -> AttributeLogits {
        AttributeLogits {
            status: Tensor::from_slice(status).view([1, 3]),
            age: Tensor::from_slice(age).view([1, 10]),
        }
    }

    #[test]
    fn ce_loss_closed_forms() {
        let attrs = [encode_attributes(Diagnosis::Mci, 2.0).unwrap()];
        let ninf = f64::NEG_INFINITY;
        let mut age = [ninf; 10];
        age[3] = 0.0;
        let perfect = attribute_ce_loss(&logits(&[ninf, 0.0, ninf], &age), &attrs).unwrap();
        assert_eq!(perfect.double_value(&[]), 0.0);

        let uniform = attribute_ce_loss(&logits(&[0.0; 3], &[0.0; 10]), &attrs).unwrap();
        let expected = 3f64.ln() + 10f64.ln();
        assert!((uniform.double_value(&[]) - expected).abs() < 1e-12);
        assert!((expected - 3.4012).abs() < 1e-4);

        let half = attribute_ce_loss(&logits(&[ninf, 0.0, ninf], &[0.0; 10]), &attrs).unwrap();
        assert!((half.double_value(&[]) - 10f64.ln()).abs() < 1e-12);

        // Probability floor caps a confidently wrong head at -ln(1e-12).
        let wrong = attribute_ce_loss(&logits(&[0.0, ninf, ninf], &age), &attrs).unwrap();
        assert!((wrong.double_value(&[]) + PROB_FLOOR.ln()).abs() < 1e-9);
    }

    fn tiny_nets(kind: Kind) -> (ParamStore, ShiftEstimator, ConsistencyRegressor) {
        let mut store = ParamStore::new(kind);
        let mut rng = SeededRng::new(21);
        let mut pb = ParamBuilder::new(&mut store, &mut rng);
        let a = ShiftEstimator::new(&mut pb.sub("shift"), 16, 4);
        let r = ConsistencyRegressor::new(&mut pb.sub("reg"), &[4, 8], 2, 16).unwrap();
        (store, a, r)
    }

    #[test]
    fn shift_estimator_shape_and_purity() {
        let (_store, a, _) = tiny_nets(Kind::Double);
        let attrs = encode_attributes(Diagnosis::Ad, 4.0).unwrap();
        let s1 = a.estimate_shift(&attrs, Kind::Double).unwrap();
        let s2 = a.estimate_shift(&attrs, Kind::Double).unwrap();
        assert_eq!(s1.0.len(), 4);
        assert_eq!(s1, s2);
    }

    #[test]
    fn regressor_arity_and_gradient_path() {
        let (_store, _, r) = tiny_nets(Kind::Double);
        let mut rng = SeededRng::new(5);
        let xb = rng.normal_tensor(&[2, 1, 8, 8], Kind::Double);
        let xf = rng
            .normal_tensor(&[2, 1, 8, 8], Kind::Double)
            .set_requires_grad(true);
        let mask = Tensor::ones([2, 1, 8, 8], (Kind::Double, Device::Cpu));
        let resid = (&xb - &xf) * &mask;
        let out = r.forward(&xb, &xf, &resid).unwrap();
        assert_eq!(out.status.size(), vec![2, 3]);
        assert_eq!(out.age.size(), vec![2, 10]);
        let attrs = [
            encode_attributes(Diagnosis::Cn, 0.5).unwrap(),
            encode_attributes(Diagnosis::Ad, 3.0).unwrap(),
        ];
        let loss = attribute_ce_loss(&out, &attrs).unwrap();
        let grad = Tensor::run_backward(&[&loss], &[&xf], false, false);
        let g = grad[0].abs().max().double_value(&[]);
        assert!(g > 0.0);

        // Finite-difference probe on one input pixel agrees with the analytic path.
        let analytic = grad[0].double_value(&[0, 0, 3, 4]);
        let h = 1e-6;
        let eval = |delta: f64| {
            tch::no_grad(|| {
                let xf2 = xf.detach().copy();
                let _ = xf2.get(0).get(0).get(3).get(4).fill_(xf.double_value(&[0, 0, 3, 4]) + delta);
                let resid = (&xb - &xf2) * &mask;
                let out = r.forward(&xb, &xf2, &resid).unwrap();
                attribute_ce_loss(&out, &attrs).unwrap().double_value(&[])
            })
        };
        let numeric = (eval(h) - eval(-h)) / (2.0 * h);
        assert!((analytic - numeric).abs() <= 1e-6 * analytic.abs().max(1e-3));
    }

    #[test]
    fn regressor_shape_mismatch() {
        let (_store, _, r) = tiny_nets(Kind::Float);
        let a = Tensor::zeros([1, 1, 8, 8], (Kind::Float, Device::Cpu));
        let b = Tensor::zeros([1, 1, 4, 4], (Kind::Float, Device::Cpu));
        assert!(matches!(r.forward(&a, &a, &b), Err(Error::Contract(_))));
    }

    #[test]
    fn relabelled_age_bins_change_loss() {
        let (_store, _, r) = tiny_nets(Kind::Double);
        let mut rng = SeededRng::new(6);
        let xb = rng.normal_tensor(&[1, 1, 8, 8], Kind::Double);
        let xf = rng.normal_tensor(&[1, 1, 8, 8], Kind::Double);
        let out = r.forward(&xb, &xf, &(&xb - &xf)).unwrap();
        let losses: Vec<f64> = (1..=AGE_BINS)
            .map(|bin| {
                let a = AttributeVector::from_bin(Diagnosis::Cn, bin).unwrap();
                attribute_ce_loss(&out, &[a]).unwrap().double_value(&[])
            })
            .collect();
        let distinct = losses
            .iter()
            .filter(|l| (*l - losses[0]).abs() > 1e-12)
            .count();
        assert!(distinct > 0, "all age bins gave identical loss");
    }

    proptest! {
        #[test]
        fn shift_leaves_identity_dims_bitwise(
            z in prop::collection::vec(-1e3f64..1e3, 2..40),
            frac in 0.0f64..1.0,
            seed in any::<u64>(),
        ) {
            let d = z.len();
            let m = 1 + ((d - 1) as f64 * frac) as usize % (d - 1);
            let mut rng = SeededRng::new(seed);
            let shift = ShiftVector(rng.normals(m));
            let out = apply_shift(&LatentVector(z.clone()), &shift).unwrap();
            for i in m..d {
                prop_assert_eq!(out.0[i].to_bits(), z[i].to_bits());
            }
            for i in 0..m {
                prop_assert_eq!(out.0[i], z[i] + shift.0[i]);
            }
        }
    }
}
