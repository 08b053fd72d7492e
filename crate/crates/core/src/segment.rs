//! Region segmentation of (possibly generated) slices.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::phantom::{PhantomConfig, PhantomSubject, Region, RegionMasks, WHITE_MATTER};

/// Window around each region component, in units of its baseline radii.
/// Regions grow by at most a factor 1.12 in radius over the modelled horizon.
const WINDOW_RADIUS: f64 = 1.3;

pub trait Segmenter {
    fn segment(&self, image: &Image) -> Result<RegionMasks>;
}

/// Partial-volume segmenter for images of one known phantom subject.
///
/// Inside a window around each region the only tissues are white matter and
/// the region itself, so after dividing out the subject's texture the pixel
/// value is a linear mix of the two levels and the mixing weight is the
/// region coverage. Exact on rendered phantoms; on generated images it reads
/// the region size the generator drew.
pub struct PhantomSegmenter {
    texture: Array2<f64>,
    windows: [Array2<bool>; 3],
}

impl PhantomSegmenter {
    pub fn new(subject: &PhantomSubject, config: &PhantomConfig) -> Self {
        let (h, w) = (config.image_height, config.image_width);
        // Stay clear of the cortical band, whose grey level would read as region.
        let deep_limit = 1.0 - subject.cortex_thickness - subject.fold_amplitude - 0.02;
        let windows = Region::ALL.map(|region| {
            Array2::from_shape_fn((h, w), |(r, c)| {
                let (rr, cc) = (r as f64, c as f64);
                subject.brain.rho(rr, cc) < deep_limit
                    && subject
                        .components(region)
                        .iter()
                        .any(|e| e.rho(rr, cc) < WINDOW_RADIUS)
            })
        });
        Self {
            texture: subject.texture_map(config),
            windows,
        }
    }
}

impl Segmenter for PhantomSegmenter {
    fn segment(&self, image: &Image) -> Result<RegionMasks> {
        if image.dim() != self.texture.dim() {
            return Err(Error::Contract(format!(
                "segmenter built for {:?}, image is {:?}",
                self.texture.dim(),
                image.dim()
            )));
        }
        let masks = Region::ALL.map(|region| {
            let window = &self.windows[region.index()];
            let span = WHITE_MATTER - region.level();
            Array2::from_shape_fn(image.dim(), |(r, c)| {
                if !window[[r, c]] {
                    return 0.0;
                }
                let v = image[[r, c]] as f64 / self.texture[[r, c]];
                ((WHITE_MATTER - v) / span).clamp(0.0, 1.0) as f32
            })
        });
        Ok(RegionMasks(masks))
    }
}

/// Region area divided by brain area.
pub fn normalized_volume(masks: &RegionMasks, region: Region, subject: &PhantomSubject) -> f64 {
    masks.area(region) / subject.brain.area()
}
