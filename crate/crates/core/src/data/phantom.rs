//! Synthetic thoracic CT slices with labeled bone and coronary calcium.
//!
//! Each slice has air around an elliptical body with a fat rim, two lungs, a
//! soft-tissue heart, a spine, a sternum and a ring of ribs (class 1). Lesions
//! are drawn independently per vessel with probability `p_lesion[v]` and sit
//! in a fixed zone of the heart, so position alone tells the vessels apart.

use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::dataset::{write_split_rows, ManifestRow};
use super::{stream_rng, SliceMeta, SliceSample, BONE, LESION_CLASSES};
use crate::error::{Error, Result};
use crate::tensor::{Mask, Tensor};

const PHANTOM_STREAM: u64 = 0x50;

/// Zone centers as fractions of the slice extent `(x, y)`, in vessel order.
const ZONES: [(f64, f64); 4] = [(0.45, 0.42), (0.56, 0.34), (0.63, 0.47), (0.38, 0.55)];
const ZONE_JITTER: f64 = 0.025;

/// Placement zone of one vessel's lesions.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LesionZone {
    pub class: u8,
    pub center: (f64, f64),
    pub jitter: f64,
}

impl LesionZone {
    pub fn all() -> [LesionZone; 4] {
        std::array::from_fn(|v| LesionZone {
            class: LESION_CLASSES[v],
            center: ZONES[v],
            jitter: ZONE_JITTER,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomSpec {
    pub slices: usize,
    /// Square slice side in pixels.
    pub size: usize,
    /// Per-slice lesion probability for LM, LAD, LCX, RCA.
    pub p_lesion: [f64; 4],
    /// Inclusive lesion size range in pixels, per vessel.
    pub lesion_pixel_range: [(usize, usize); 4],
    pub hu_range_cac: (f32, f32),
    pub hu_range_bone: (f32, f32),
    pub hu_background: f32,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            slices: 1000,
            size: 512,
            p_lesion: [0.013, 0.06, 0.035, 0.074],
            lesion_pixel_range: [(5, 60), (5, 200), (5, 150), (5, 200)],
            hu_range_cac: (130.0, 800.0),
            hu_range_bone: (250.0, 1000.0),
            hu_background: -1000.0,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    /// 64×64 slices with lesion sizes scaled to fit.
    pub fn desk(slices: usize, seed: u64) -> Self {
        Self {
            slices,
            size: 64,
            lesion_pixel_range: [(5, 16), (6, 30), (6, 24), (6, 30)],
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.size < 32 {
            return Err(Error::config("data.size", "phantom slices need at least 32 pixels"));
        }
        for (v, &p) in self.p_lesion.iter().enumerate() {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(format!("data.p_{}", vessel(v)), format!("{p} is not a probability")));
            }
        }
        let zone_area = (self.size * self.size) / 64;
        for (v, &(lo, hi)) in self.lesion_pixel_range.iter().enumerate() {
            if lo == 0 || lo > hi || hi > zone_area {
                return Err(Error::config(
                    format!("data.lesion_px_{}", vessel(v)),
                    format!("range ({lo}, {hi}) must satisfy 1 <= min <= max <= {zone_area}"),
                ));
            }
        }
        let (lo, hi) = self.hu_range_cac;
        if !(lo >= super::CALCIUM_HU && lo <= hi && hi.is_finite()) {
            return Err(Error::config("data.hu_cac", format!("({lo}, {hi}) must start at or above 130 HU")));
        }
        let (lo, hi) = self.hu_range_bone;
        if !(lo <= hi && lo.is_finite() && hi.is_finite()) {
            return Err(Error::config("data.hu_bone", format!("({lo}, {hi}) is not a range")));
        }
        if !self.hu_background.is_finite() {
            return Err(Error::config("data.hu_background", "must be finite"));
        }
        Ok(())
    }
}

fn vessel(v: usize) -> &'static str {
    ["lm", "lad", "lcx", "rca"][v]
}

struct Canvas {
    n: usize,
    img: Vec<f32>,
    mask: Vec<u8>,
}

impl Canvas {
    fn fill_ellipse(&mut self, c: (f64, f64), r: (f64, f64), angle: f64, mut paint: impl FnMut(usize, &mut f32, &mut u8)) {
        let (s, co) = angle.sin_cos();
        let reach = r.0.max(r.1).ceil() as isize + 1;
        let (cx, cy) = (c.0.round() as isize, c.1.round() as isize);
        for y in (cy - reach).max(0)..=(cy + reach).min(self.n as isize - 1) {
            for x in (cx - reach).max(0)..=(cx + reach).min(self.n as isize - 1) {
                let (dx, dy) = (x as f64 - c.0, y as f64 - c.1);
                let u = dx * co + dy * s;
                let v = -dx * s + dy * co;
                if (u / r.0).powi(2) + (v / r.1).powi(2) <= 1.0 {
                    let i = y as usize * self.n + x as usize;
                    paint(i, &mut self.img[i], &mut self.mask[i]);
                }
            }
        }
    }
}

/// One slice of `spec`, reproducible from `(spec.seed, index)` alone.
pub fn generate_slice(spec: &PhantomSpec, index: usize) -> Result<SliceSample> {
    let mut rng = stream_rng(spec.seed, &[PHANTOM_STREAM, index as u64]);
    let present: [bool; 4] = std::array::from_fn(|v| rng.gen_bool(spec.p_lesion[v]));
    let n = spec.size;
    let s = n as f64;
    let air = Normal::new(spec.hu_background as f64, 15.0).expect("finite");
    let tissue = Normal::new(0.0, 10.0).expect("finite");
    let mut cv = Canvas {
        n,
        img: (0..n * n).map(|_| air.sample(&mut rng) as f32).collect(),
        mask: vec![0; n * n],
    };
    let jitter = |rng: &mut ChaCha8Rng, amount: f64| rng.gen_range(-amount..=amount);

    let body_c = (0.5 * s + jitter(&mut rng, 0.01) * s, 0.52 * s + jitter(&mut rng, 0.01) * s);
    let scale = 1.0 + jitter(&mut rng, 0.03);
    let body_r = (0.45 * s * scale, 0.40 * s * scale);
    let inner = (body_r.0 * 0.88, body_r.1 * 0.88);
    cv.fill_ellipse(body_c, body_r, 0.0, |_, v, _| *v = -100.0 + tissue.sample(&mut rng) as f32);
    cv.fill_ellipse(body_c, inner, 0.0, |_, v, _| *v = (40.0 + tissue.sample(&mut rng) as f32).min(100.0));

    for side in [-1.0, 1.0] {
        let c = (0.5 * s + side * 0.2 * s, 0.45 * s);
        let r = (0.13 * s * scale, 0.19 * s * scale);
        cv.fill_ellipse(c, r, side * 0.15, |_, v, _| *v = -850.0 + 3.0 * tissue.sample(&mut rng) as f32);
    }
    let heart_c = (0.5 * s, 0.47 * s);
    cv.fill_ellipse(heart_c, (0.17 * s, 0.15 * s), 0.0, |_, v, _| {
        *v = (40.0 + tissue.sample(&mut rng) as f32).min(100.0)
    });

    let (blo, bhi) = spec.hu_range_bone;
    let bone = |cv: &mut Canvas, rng: &mut ChaCha8Rng, c: (f64, f64), r: (f64, f64), angle: f64| {
        let level = rng.gen_range(blo..=bhi);
        let noise = Normal::new(0.0, 25.0).expect("finite");
        cv.fill_ellipse(c, r, angle, |_, v, m| {
            *v = (level + noise.sample(rng) as f32).clamp(blo, bhi);
            *m = BONE;
        });
    };
    bone(&mut cv, &mut rng, (0.5 * s, 0.78 * s), (0.07 * s, 0.06 * s), 0.0);
    bone(&mut cv, &mut rng, (0.5 * s, 0.86 * s), (0.02 * s, 0.03 * s), 0.0);
    let sternum_y = body_c.1 - body_r.1 * 0.8;
    bone(&mut cv, &mut rng, (body_c.0, sternum_y), (0.035 * s, 0.02 * s), 0.0);
    let ribs_per_side = rng.gen_range(3..=5);
    for side in [0.0, std::f64::consts::PI] {
        for k in 0..ribs_per_side {
            let spread = (k as f64 + 0.5) / ribs_per_side as f64;
            let theta = side + (spread - 0.5) * 1.9 + jitter(&mut rng, 0.08);
            let c = (
                body_c.0 + body_r.0 * 0.93 * theta.cos(),
                body_c.1 + body_r.1 * 0.93 * theta.sin(),
            );
            let r = (0.028 * s, 0.016 * s);
            bone(&mut cv, &mut rng, c, r, theta + std::f64::consts::FRAC_PI_2);
        }
    }

    for (v, zone) in LesionZone::all().iter().enumerate() {
        if !present[v] {
            continue;
        }
        let (lo, hi) = spec.lesion_pixel_range[v];
        let k = rng.gen_range(lo..=hi);
        let c = (
            (zone.center.0 + jitter(&mut rng, zone.jitter)) * s,
            (zone.center.1 + jitter(&mut rng, zone.jitter)) * s,
        );
        place_lesion(&mut cv, &mut rng, spec, zone.class, c, k);
    }

    let meta = SliceMeta {
        slice_id: format!("slice_{index:05}"),
        source_id: format!("phantom-{}", spec.seed),
    };
    SliceSample::new(Tensor::new(vec![1, n, n], cv.img)?, Mask::new(vec![n, n], cv.mask)?, meta)
}

/// Paints exactly `k` pixels: the background pixels nearest to `c` under a
/// random elliptical metric. HU falls off from the peak at the center and stays
/// inside the calcium range.
fn place_lesion(cv: &mut Canvas, rng: &mut ChaCha8Rng, spec: &PhantomSpec, class: u8, c: (f64, f64), k: usize) {
    let aspect = rng.gen_range(0.55..=1.0);
    let angle = rng.gen_range(0.0..std::f64::consts::PI);
    let (sn, co) = f64::sin_cos(angle);
    let reach = ((k as f64).sqrt() * 2.0).ceil() as isize + 2;
    let (cx, cy) = (c.0.round() as isize, c.1.round() as isize);
    let n = cv.n as isize;
    let mut cand = Vec::new();
    for y in (cy - reach).max(0)..=(cy + reach).min(n - 1) {
        for x in (cx - reach).max(0)..=(cx + reach).min(n - 1) {
            let i = (y * n + x) as usize;
            if cv.mask[i] != 0 {
                continue;
            }
            let (dx, dy) = (x as f64 - c.0, y as f64 - c.1);
            let u = dx * co + dy * sn;
            let w = (-dx * sn + dy * co) / aspect;
            cand.push((u * u + w * w, i));
        }
    }
    cand.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let (lo, hi) = spec.hu_range_cac;
    let peak = rng.gen_range(lo + 0.1 * (hi - lo)..=hi);
    let taken = k.min(cand.len());
    for (rank, &(_, i)) in cand[..taken].iter().enumerate() {
        let fall = 0.6 * rank as f32 / taken as f32;
        let wobble = if rank == 0 { 0.0 } else { rng.gen_range(-10.0..=10.0) };
        cv.img[i] = (lo + (peak - lo) * (1.0 - fall) + wobble).clamp(lo, peak);
        cv.mask[i] = class;
    }
}

/// All slices of `spec`, in index order.
pub fn generate_slices(spec: &PhantomSpec) -> Result<Vec<SliceSample>> {
    spec.validate()?;
    (0..spec.slices).map(|i| generate_slice(spec, i)).collect()
}

/// Writes `samples` as a dataset directory and returns the manifest rows.
pub fn write_split(dest: impl AsRef<Path>, samples: &[SliceSample]) -> Result<Vec<ManifestRow>> {
    write_split_rows(dest.as_ref(), samples)
}

/// Generates `spec` straight to disk.
pub fn generate_phantom(spec: &PhantomSpec, dest: impl AsRef<Path>) -> Result<Vec<ManifestRow>> {
    let samples = generate_slices(spec)?;
    write_split(dest, &samples)
}
