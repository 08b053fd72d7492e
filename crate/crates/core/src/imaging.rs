//! 2-D image and mask containers plus conversions to batched tensors.

use std::path::Path;

use ndarray::Array2;
use tch::{Kind, Tensor};

use crate::error::{Error, Result};

/// Single-channel image, row-major `[height, width]`, intensities nominally in `[0, 1]`.
pub type Image = Array2<f32>;

/// Region mask as per-pixel coverage in `[0, 1]`; binary masks use exactly 0 and 1.
pub type Mask = Array2<f32>;

/// Per-pixel displacement in pixel units on a regular grid: a point `(r, c)`
/// maps to `(r + rows[r, c], c + cols[r, c])`.
#[derive(Debug, Clone, PartialEq)]
pub struct DisplacementField {
    pub rows: Array2<f64>,
    pub cols: Array2<f64>,
}

impl DisplacementField {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            rows: Array2::zeros((height, width)),
            cols: Array2::zeros((height, width)),
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        self.rows.dim()
    }

    pub fn is_finite(&self) -> bool {
        self.rows.iter().chain(self.cols.iter()).all(|v| v.is_finite())
    }

    pub fn max_magnitude(&self) -> f64 {
        self.rows
            .iter()
            .zip(self.cols.iter())
            .map(|(a, b)| a.hypot(*b))
            .fold(0.0, f64::max)
    }
}

/// Inclusive pixel bounding box.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BBox {
    pub row_min: usize,
    pub row_max: usize,
    pub col_min: usize,
    pub col_max: usize,
}

impl BBox {
    pub fn union(self, other: BBox) -> BBox {
        BBox {
            row_min: self.row_min.min(other.row_min),
            row_max: self.row_max.max(other.row_max),
            col_min: self.col_min.min(other.col_min),
            col_max: self.col_max.max(other.col_max),
        }
    }

    pub fn expand(self, margin: usize, height: usize, width: usize) -> BBox {
        BBox {
            row_min: self.row_min.saturating_sub(margin),
            row_max: (self.row_max + margin).min(height - 1),
            col_min: self.col_min.saturating_sub(margin),
            col_max: (self.col_max + margin).min(width - 1),
        }
    }

    pub fn height(&self) -> usize {
        self.row_max - self.row_min + 1
    }

    pub fn width(&self) -> usize {
        self.col_max - self.col_min + 1
    }
}

/// Box around pixels with coverage of at least one half.
pub fn mask_bbox(mask: &Mask) -> Option<BBox> {
    let mut bbox: Option<BBox> = None;
    for ((r, c), &v) in mask.indexed_iter() {
        if v >= 0.5 {
            let b = BBox {
                row_min: r,
                row_max: r,
                col_min: c,
                col_max: c,
            };
            bbox = Some(bbox.map_or(b, |acc| acc.union(b)));
        }
    }
    bbox
}

pub fn fill_bbox(height: usize, width: usize, bbox: Option<BBox>) -> Mask {
    let mut out = Mask::zeros((height, width));
    if let Some(b) = bbox {
        out.slice_mut(ndarray::s![b.row_min..=b.row_max, b.col_min..=b.col_max])
            .fill(1.0);
    }
    out
}

/// Stacks images into a `[batch, 1, height, width]` tensor.
pub fn images_to_tensor<'a, I>(images: I, kind: Kind) -> Result<Tensor>
where
    I: IntoIterator<Item = &'a Image>,
{
    let mut data = Vec::new();
    let mut shape: Option<(usize, usize)> = None;
    let mut count = 0i64;
    for img in images {
        let dim = img.dim();
        match shape {
            None => shape = Some(dim),
            Some(s) if s != dim => {
                return Err(Error::Contract(format!(
                    "image batch mixes shapes {s:?} and {dim:?}"
                )))
            }
            _ => {}
        }
        data.extend(img.iter().copied());
        count += 1;
    }
    let (h, w) = shape.ok_or_else(|| Error::Contract("empty image batch".into()))?;
    Ok(Tensor::from_slice(&data)
        .reshape([count, 1, h as i64, w as i64])
        .to_kind(kind))
}

pub fn image_to_tensor(image: &Image, kind: Kind) -> Tensor {
    images_to_tensor(std::iter::once(image), kind).expect("single image batch")
}

/// Splits a `[batch, 1, height, width]` tensor back into images.
pub fn tensor_to_images(t: &Tensor) -> Result<Vec<Image>> {
    let size = t.size();
    if size.len() != 4 || size[1] != 1 {
        return Err(Error::Contract(format!(
            "expected [B, 1, H, W] tensor, got {size:?}"
        )));
    }
    let (b, h, w) = (size[0] as usize, size[2] as usize, size[3] as usize);
    let flat: Vec<f32> = t
        .detach()
        .to_kind(Kind::Float)
        .contiguous()
        .flatten(0, -1)
        .try_into()?;
    Ok(flat
        .chunks(h * w)
        .take(b)
        .map(|chunk| Image::from_shape_vec((h, w), chunk.to_vec()).expect("chunk size"))
        .collect())
}

/// Writes an image as 8-bit grayscale PNG, clamping to `[lo, hi]`.
pub fn save_png(image: &Image, path: &Path, lo: f32, hi: f32) -> Result<()> {
    let (h, w) = image.dim();
    let span = (hi - lo).max(f32::EPSILON);
    let bytes: Vec<u8> = image
        .iter()
        .map(|v| (((v - lo) / span).clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let buf = image::GrayImage::from_raw(w as u32, h as u32, bytes)
        .ok_or_else(|| Error::Contract("png buffer size".into()))?;
    buf.save(path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_roundtrip_is_exact() {
        let a = Image::from_shape_fn((3, 4), |(r, c)| (r * 4 + c) as f32 / 7.0);
        let b = a.mapv(|v| 1.0 - v);
        let t = images_to_tensor([&a, &b], Kind::Float).unwrap();
        assert_eq!(t.size(), vec![2, 1, 3, 4]);
        let back = tensor_to_images(&t).unwrap();
        assert_eq!(back[0], a);
        assert_eq!(back[1], b);
    }

    #[test]
    fn mixed_shapes_rejected() {
        let a = Image::zeros((3, 4));
        let b = Image::zeros((4, 3));
        assert!(images_to_tensor([&a, &b], Kind::Float).is_err());
    }

    #[test]
    fn bbox_of_mask() {
        let mut m = Mask::zeros((10, 10));
        m[[2, 3]] = 1.0;
        m[[6, 1]] = 0.7;
        m[[9, 9]] = 0.2;
        let b = mask_bbox(&m).unwrap();
        assert_eq!(
            b,
            BBox {
                row_min: 2,
                row_max: 6,
                col_min: 1,
                col_max: 3
            }
        );
        assert_eq!(fill_bbox(10, 10, Some(b)).sum(), 15.0);
        assert!(mask_bbox(&Mask::zeros((4, 4))).is_none());
    }
}
