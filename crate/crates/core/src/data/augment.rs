use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{stream_rng, SliceSample, HU_WINDOW_MAX, HU_WINDOW_MIN};
use crate::error::{Error, Result};
use crate::tensor::{Mask, Tensor};

const AUGMENT_STREAM: u64 = 0xa5;

/// On-the-fly augmentation settings. Each transform fires independently with
/// its own probability.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentConfig {
    pub p_rotate: f64,
    pub p_crop: f64,
    pub p_blur: f64,
    pub p_noise: f64,
    pub p_salt_pepper: f64,
    /// Candidate angles in degrees; positive turns counterclockwise on screen.
    pub rotation_degrees: Vec<f64>,
    /// Candidate center-crop sides in pixels.
    pub crop_sizes: Vec<usize>,
    pub blur_sigma: (f64, f64),
    /// Standard deviation in windowed `[0, 1]` units.
    pub noise_sigma: f64,
    pub salt_pepper_rate: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            p_rotate: 0.5,
            p_crop: 0.5,
            p_blur: 0.5,
            p_noise: 0.5,
            p_salt_pepper: 0.5,
            rotation_degrees: vec![-10.0, -5.0, 5.0, 10.0],
            crop_sizes: vec![300, 400],
            blur_sigma: (0.5, 1.0),
            noise_sigma: 0.01,
            salt_pepper_rate: 0.002,
        }
    }
}

impl AugmentConfig {
    /// Every probability set to zero.
    pub fn disabled() -> Self {
        Self {
            p_rotate: 0.0,
            p_crop: 0.0,
            p_blur: 0.0,
            p_noise: 0.0,
            p_salt_pepper: 0.0,
            ..Self::default()
        }
    }

    /// Crop sides rescaled from a 512-pixel reference to `extent`.
    pub fn scaled_to(mut self, extent: usize) -> Self {
        self.crop_sizes = self
            .crop_sizes
            .iter()
            .map(|&s| ((s * extent) as f64 / 512.0).round().max(1.0) as usize)
            .collect();
        self
    }

    pub fn validate(&self) -> Result<()> {
        for (field, p) in [
            ("data.p_rotate", self.p_rotate),
            ("data.p_crop", self.p_crop),
            ("data.p_blur", self.p_blur),
            ("data.p_noise", self.p_noise),
            ("data.p_salt_pepper", self.p_salt_pepper),
            ("data.salt_pepper_rate", self.salt_pepper_rate),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(field, format!("{p} is not a probability")));
            }
        }
        if self.p_rotate > 0.0 && self.rotation_degrees.is_empty() {
            return Err(Error::config("data.rotation_degrees", "needs at least one angle"));
        }
        if self.p_crop > 0.0 && (self.crop_sizes.is_empty() || self.crop_sizes.contains(&0)) {
            return Err(Error::config("data.crop_sizes", "needs at least one positive side"));
        }
        let (lo, hi) = self.blur_sigma;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::config("data.blur_sigma", format!("invalid range ({lo}, {hi})")));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::config("data.noise_sigma", "must be finite and non-negative"));
        }
        Ok(())
    }
}

/// RNG stream for one sample in one epoch.
pub fn augment_rng(seed: u64, sample_index: u64, epoch: u64) -> ChaCha8Rng {
    stream_rng(seed, &[AUGMENT_STREAM, sample_index, epoch])
}

/// Applies rotation, center crop, blur, noise and salt-and-pepper in that order.
/// Geometry moves image and mask together; noise touches the image only.
pub fn augment(sample: &SliceSample, cfg: &AugmentConfig, rng: &mut impl Rng) -> Result<SliceSample> {
    cfg.validate()?;
    let (h, w) = (sample.height(), sample.width());
    if cfg.p_crop > 0.0 {
        if let Some(&s) = cfg.crop_sizes.iter().find(|&&s| s > h.min(w)) {
            return Err(Error::config(
                "data.crop_sizes",
                format!("crop side {s} exceeds the {h}x{w} slice"),
            ));
        }
    }
    let mut img = sample.image.data().to_vec();
    let mut mask = sample.mask.data().to_vec();

    if rng.gen_bool(cfg.p_rotate) {
        let deg = cfg.rotation_degrees[rng.gen_range(0..cfg.rotation_degrees.len())];
        (img, mask) = rotate(&img, &mask, h, w, deg);
    }
    if rng.gen_bool(cfg.p_crop) {
        let side = cfg.crop_sizes[rng.gen_range(0..cfg.crop_sizes.len())];
        (img, mask) = crop_resize(&img, &mask, h, w, side);
    }
    if rng.gen_bool(cfg.p_blur) {
        let sigma = rng.gen_range(cfg.blur_sigma.0..=cfg.blur_sigma.1);
        img = gaussian_blur(&img, h, w, sigma);
    }
    if rng.gen_bool(cfg.p_noise) && cfg.noise_sigma > 0.0 {
        let scale = cfg.noise_sigma * f64::from(HU_WINDOW_MAX - HU_WINDOW_MIN);
        let normal = Normal::new(0.0, scale).expect("validated sigma");
        for v in &mut img {
            *v += normal.sample(rng) as f32;
        }
    }
    if rng.gen_bool(cfg.p_salt_pepper) {
        salt_and_pepper(&mut img, cfg.salt_pepper_rate, rng);
    }

    Ok(SliceSample {
        image: Tensor::new(vec![1, h, w], img)?,
        mask: Mask::new(vec![h, w], mask)?,
        meta: sample.meta.clone(),
    })
}

/// Sets each pixel to a window extreme with probability `rate`.
pub(crate) fn salt_and_pepper(img: &mut [f32], rate: f64, rng: &mut impl Rng) {
    for v in img.iter_mut() {
        if rng.gen_bool(rate) {
            *v = if rng.gen_bool(0.5) { HU_WINDOW_MAX } else { HU_WINDOW_MIN };
        }
    }
}

fn bilinear(img: &[f32], h: usize, w: usize, y: f64, x: f64) -> f32 {
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = ((y - y0 as f64) as f32, (x - x0 as f64) as f32);
    let top = img[y0 * w + x0] * (1.0 - fx) + img[y0 * w + x1] * fx;
    let bot = img[y1 * w + x0] * (1.0 - fx) + img[y1 * w + x1] * fx;
    top * (1.0 - fy) + bot * fy
}

fn nearest(mask: &[u8], h: usize, w: usize, y: f64, x: f64) -> u8 {
    let y = y.round().clamp(0.0, (h - 1) as f64) as usize;
    let x = x.round().clamp(0.0, (w - 1) as f64) as usize;
    mask[y * w + x]
}

/// Rotation about the slice center with edge-clamped sampling, so the mask
/// never gains a label the source lacks.
pub(crate) fn rotate(img: &[f32], mask: &[u8], h: usize, w: usize, degrees: f64) -> (Vec<f32>, Vec<u8>) {
    let (s, c) = degrees.to_radians().sin_cos();
    let (cy, cx) = ((h - 1) as f64 / 2.0, (w - 1) as f64 / 2.0);
    let mut out = Vec::with_capacity(h * w);
    let mut out_mask = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let (dx, dy) = (x as f64 - cx, y as f64 - cy);
            let sx = cx + dx * c - dy * s;
            let sy = cy + dx * s + dy * c;
            out.push(bilinear(img, h, w, sy, sx));
            out_mask.push(nearest(mask, h, w, sy, sx));
        }
    }
    (out, out_mask)
}

/// Takes the centered `side × side` window and resamples it to `h × w`.
pub(crate) fn crop_resize(img: &[f32], mask: &[u8], h: usize, w: usize, side: usize) -> (Vec<f32>, Vec<u8>) {
    let (oy, ox) = ((h - side) as f64 / 2.0, (w - side) as f64 / 2.0);
    let (ry, rx) = (side as f64 / h as f64, side as f64 / w as f64);
    let mut out = Vec::with_capacity(h * w);
    let mut out_mask = Vec::with_capacity(h * w);
    for y in 0..h {
        let sy = oy + (y as f64 + 0.5) * ry - 0.5;
        for x in 0..w {
            let sx = ox + (x as f64 + 0.5) * rx - 0.5;
            out.push(bilinear(img, h, w, sy, sx));
            out_mask.push(nearest(mask, h, w, sy, sx));
        }
    }
    (out, out_mask)
}

pub(crate) fn gaussian_blur(img: &[f32], h: usize, w: usize, sigma: f64) -> Vec<f32> {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f32> = (-radius..=radius)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp() as f32)
        .collect();
    let total: f32 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);

    let tap = |i: usize, off: isize, n: usize| (i as isize + off).clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = (-radius..=radius)
                .zip(&kernel)
                .map(|(o, k)| k * img[y * w + tap(x, o, w)])
                .sum();
        }
    }
    let mut out = vec![0.0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = (-radius..=radius)
                .zip(&kernel)
                .map(|(o, k)| k * tmp[tap(y, o, h) * w + x])
                .sum();
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SliceMeta;

    fn sample(h: usize, w: usize) -> SliceSample {
        let img = Tensor::from_fn(vec![1, h, w], |i| (i % 97) as f32 * 3.0 - 100.0).unwrap();
        let mask = Mask::new(vec![h, w], (0..h * w).map(|i| (i % 3) as u8).collect()).unwrap();
        SliceSample::new(img, mask, SliceMeta::default()).unwrap()
    }

    #[test]
    fn disabled_is_identity() {
        let s = sample(16, 16);
        let out = augment(&s, &AugmentConfig::disabled(), &mut augment_rng(0, 0, 0)).unwrap();
        assert_eq!(out, s);
    }

    #[test]
    fn oversized_crop_is_config_error() {
        let s = sample(16, 16);
        let cfg = AugmentConfig {
            p_crop: 1.0,
            ..AugmentConfig::disabled()
        };
        let err = augment(&s, &cfg, &mut augment_rng(0, 0, 0)).unwrap_err();
        assert!(matches!(err, Error::Config { .. }), "{err}");
    }

    #[test]
    fn rotate_round_trip_in_interior() {
        let (h, w) = (32, 32);
        let img: Vec<f32> = (0..h * w)
            .map(|i| {
                let (y, x) = ((i / w) as f64 - 15.5, (i % w) as f64 - 15.5);
                if y * y + x * x < 100.0 { 40.0 } else { -1000.0 }
            })
            .collect();
        let mask = vec![0u8; h * w];
        let (a, m) = rotate(&img, &mask, h, w, 5.0);
        let (b, _) = rotate(&a, &m, h, w, -5.0);
        for y in 10..22 {
            for x in 10..22 {
                let r2 = (y as f64 - 15.5).powi(2) + (x as f64 - 15.5).powi(2);
                if r2 < 64.0 {
                    assert!((b[y * w + x] - 40.0).abs() < 1e-3);
                }
            }
        }
    }

    #[test]
    fn rotation_direction_is_counterclockwise() {
        let (h, w) = (5, 5);
        let mut img = vec![0.0f32; 25];
        img[2 * w + 4] = 1.0;
        let (out, _) = rotate(&img, &[0; 25], h, w, 90.0);
        assert!((out[2] - 1.0).abs() < 1e-6, "{out:?}");
    }

    #[test]
    fn blur_preserves_constant() {
        let img = vec![7.0f32; 64];
        for v in gaussian_blur(&img, 8, 8, 0.8) {
            assert!((v - 7.0).abs() < 1e-5);
        }
    }

    #[test]
    fn crop_keeps_source_labels() {
        let s = sample(20, 20);
        let (_, m) = crop_resize(s.image.data(), s.mask.data(), 20, 20, 9);
        assert!(m.iter().all(|&v| v < 3));
    }
}
