use std::collections::VecDeque;
use std::fmt::Write as _;

use crate::data::{CALCIUM_HU, LESION_CLASSES};
use crate::error::{Error, Result};
use crate::tensor::{Mask, Tensor};

/// Components smaller than this are ignored.
pub const MIN_COMPONENT_AREA_MM2: f64 = 1.0;

/// Density weight for a component's peak attenuation: 0 below 130 HU, then
/// 1 / 2 / 3 / 4 from 130, 200, 300 and 400 HU.
pub fn density_weight(peak_hu: f32) -> f64 {
    match peak_hu {
        p if p >= 400.0 => 4.0,
        p if p >= 300.0 => 3.0,
        p if p >= 200.0 => 2.0,
        p if p >= CALCIUM_HU => 1.0,
        _ => 0.0,
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LesionScoreReport {
    /// LM, LAD, LCX, RCA.
    pub scores: [f64; 4],
    pub total: f64,
}

impl LesionScoreReport {
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("vessel\tscore\n");
        for (name, v) in ["lm", "lad", "lcx", "rca"].iter().zip(self.scores) {
            writeln!(s, "{name}\t{v:.4}").expect("string write");
        }
        writeln!(s, "total\t{:.4}", self.total).expect("string write");
        s
    }
}

/// Sums area × density weight over the 4-connected components of each vessel
/// label. `hu` is `[H, W]` or `[1, H, W]` in raw HU.
pub fn agatston_per_lesion(mask: &Mask, hu: &Tensor<f32>, pixel_area_mm2: f64) -> Result<LesionScoreReport> {
    if !(pixel_area_mm2 > 0.0 && pixel_area_mm2.is_finite()) {
        return Err(Error::config("eval.pixel_area_mm2", format!("must be positive, got {pixel_area_mm2}")));
    }
    let (h, w) = mask.spatial();
    if mask.batch() != 1 || hu.len() != h * w || hu.dims().last() != Some(&w) {
        return Err(Error::dim(format!(
            "scoring needs one slice; mask {:?} vs image {:?}",
            mask.dims(),
            hu.dims()
        )));
    }
    let labels = mask.data();
    let img = hu.data();
    let mut seen = vec![false; h * w];
    let mut report = LesionScoreReport::default();
    let mut queue = VecDeque::new();
    for start in 0..h * w {
        let Some(v) = LESION_CLASSES.iter().position(|&c| c == labels[start]) else {
            continue;
        };
        if seen[start] {
            continue;
        }
        let class = labels[start];
        seen[start] = true;
        queue.push_back(start);
        let (mut area, mut peak) = (0usize, f32::NEG_INFINITY);
        while let Some(i) = queue.pop_front() {
            area += 1;
            peak = peak.max(img[i]);
            let (y, x) = (i / w, i % w);
            let mut visit = |j: usize| {
                if !seen[j] && labels[j] == class {
                    seen[j] = true;
                    queue.push_back(j);
                }
            };
            if y > 0 {
                visit(i - w);
            }
            if y + 1 < h {
                visit(i + w);
            }
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < w {
                visit(i + 1);
            }
        }
        let area_mm2 = area as f64 * pixel_area_mm2;
        if area_mm2 >= MIN_COMPONENT_AREA_MM2 {
            report.scores[v] += area_mm2 * density_weight(peak);
        }
    }
    report.total = report.scores.iter().sum();
    Ok(report)
}
