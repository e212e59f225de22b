//! Slices, HU windowing, augmentation, the phantom generator and the on-disk
//! dataset layout.

mod augment;
mod dataset;
mod phantom;

pub use augment::{augment, augment_rng, AugmentConfig};
pub use dataset::{Dataset, ManifestRow, MANIFEST_FILE};
pub use phantom::{generate_phantom, generate_slice, generate_slices, write_split, LesionZone, PhantomSpec};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Mask, Tensor};

/// Lower edge of the cardiac window.
pub const HU_WINDOW_MIN: f32 = -150.0;
/// Upper edge of the cardiac window.
pub const HU_WINDOW_MAX: f32 = 230.0;
/// Calcium detection threshold used by the phantom and the lesion score.
pub const CALCIUM_HU: f32 = 130.0;

pub const CLASS_NAMES: [&str; 6] = ["background", "bone", "lm", "lad", "lcx", "rca"];
pub const BACKGROUND: u8 = 0;
pub const BONE: u8 = 1;
pub const LM: u8 = 2;
pub const LAD: u8 = 3;
pub const LCX: u8 = 4;
pub const RCA: u8 = 5;
/// Lesion classes in vessel order LM, LAD, LCX, RCA.
pub const LESION_CLASSES: [u8; 4] = [LM, LAD, LCX, RCA];

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SliceMeta {
    pub slice_id: String,
    pub source_id: String,
}

/// One CT slice in raw HU (`[1, H, W]`) with its label grid (`[H, W]`).
#[derive(Clone, Debug, PartialEq)]
pub struct SliceSample {
    pub image: Tensor<f32>,
    pub mask: Mask,
    pub meta: SliceMeta,
}

impl SliceSample {
    pub fn new(image: Tensor<f32>, mask: Mask, meta: SliceMeta) -> Result<Self> {
        let d = image.dims();
        if d.len() != 3 || d[0] != 1 {
            return Err(Error::dim(format!("slice image must be [1, H, W], got {d:?}")));
        }
        if mask.dims() != [d[1], d[2]] {
            return Err(Error::dim(format!(
                "slice mask {:?} does not match image [{}, {}]",
                mask.dims(),
                d[1],
                d[2]
            )));
        }
        mask.validate(CLASS_NAMES.len())?;
        Ok(Self { image, mask, meta })
    }

    pub fn height(&self) -> usize {
        self.image.dims()[1]
    }

    pub fn width(&self) -> usize {
        self.image.dims()[2]
    }
}

/// Maps one HU value into `[0, 1]` through the cardiac window.
#[inline]
pub fn window_hu(v: f32) -> f32 {
    (v.clamp(HU_WINDOW_MIN, HU_WINDOW_MAX) - HU_WINDOW_MIN) / (HU_WINDOW_MAX - HU_WINDOW_MIN)
}

/// Clips to the cardiac window and rescales to `[0, 1]`.
pub fn preprocess(raw: &SliceSample) -> Tensor<f32> {
    raw.image.map(window_hu)
}

/// Stacks preprocessed slices into an `[N, 1, H, W]` batch and `[N, H, W]` mask.
pub fn collate(samples: &[SliceSample]) -> Result<(Tensor<f32>, Mask)> {
    let first = samples
        .first()
        .ok_or_else(|| Error::dim("cannot collate an empty batch"))?;
    let (h, w) = (first.height(), first.width());
    let mut data = Vec::with_capacity(samples.len() * h * w);
    for s in samples {
        if (s.height(), s.width()) != (h, w) {
            return Err(Error::dim(format!(
                "batch slices disagree in size: {}x{} vs {h}x{w}",
                s.height(),
                s.width()
            )));
        }
        data.extend(preprocess(s).into_data());
    }
    let masks: Vec<&Mask> = samples.iter().map(|s| &s.mask).collect();
    Ok((Tensor::new(vec![samples.len(), 1, h, w], data)?, Mask::stack(&masks)?))
}

/// Deterministic RNG for a named stream under a master seed.
pub fn stream_rng(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    let mut state = seed ^ 0x243f_6a88_85a3_08d3;
    for &t in tags {
        state = splitmix(state ^ splitmix(t.wrapping_add(0x9e37_79b9_7f4a_7c15)));
    }
    ChaCha8Rng::seed_from_u64(splitmix(state))
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
