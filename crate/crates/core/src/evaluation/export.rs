use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::data::window_hu;
use crate::error::{Error, Result};
use crate::tensor::io as tns;
use crate::tensor::{Mask, Real, Tensor};

/// Overlay colors for background, bone, LM, LAD, LCX, RCA.
pub const PALETTE: [[u8; 3]; 6] = [
    [0, 0, 0],
    [200, 200, 200],
    [255, 0, 0],
    [0, 200, 0],
    [0, 110, 255],
    [255, 200, 0],
];

/// Per-pixel argmax over the channel axis of `[N, C, H, W]` logits. Ties go
/// to the lower class index.
pub fn argmax_mask<T: Real>(logits: &Tensor<T>) -> Result<Mask> {
    if logits.rank() != 4 {
        return Err(Error::dim(format!("logits must be [N, C, H, W], got {:?}", logits.dims())));
    }
    let [n, c, h, w] = logits.dims4();
    if c > PALETTE.len() {
        return Err(Error::dim(format!("{c} classes exceed the label range")));
    }
    let hw = h * w;
    let d = logits.data();
    let mut out = vec![0u8; n * hw];
    for b in 0..n {
        for p in 0..hw {
            let mut best = 0;
            for k in 1..c {
                if d[(b * c + k) * hw + p] > d[(b * c + best) * hw + p] {
                    best = k;
                }
            }
            out[b * hw + p] = best as u8;
        }
    }
    if n == 1 {
        Mask::new(vec![h, w], out)
    } else {
        Mask::new(vec![n, h, w], out)
    }
}

/// Binary PPM of `mask`: labeled pixels take their palette color, background
/// shows the windowed image when one is given.
pub fn write_ppm(path: &Path, mask: &Mask, hu: Option<&Tensor<f32>>) -> Result<()> {
    let (h, w) = mask.spatial();
    if mask.batch() != 1 {
        return Err(Error::dim("overlay needs a single slice"));
    }
    if let Some(img) = hu {
        if img.len() != h * w {
            return Err(Error::dim(format!("overlay image {:?} does not match mask {:?}", img.dims(), mask.dims())));
        }
    }
    let mut bytes = format!("P6\n{w} {h}\n255\n").into_bytes();
    for (i, &lab) in mask.data().iter().enumerate() {
        let px = match (lab, hu) {
            (0, Some(img)) => {
                let g = (window_hu(img.data()[i]) * 255.0).round() as u8;
                [g, g, g]
            }
            _ => PALETTE[lab as usize],
        };
        bytes.extend_from_slice(&px);
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExportedPrediction {
    pub mask: Mask,
    pub mask_path: PathBuf,
    pub overlay_path: Option<PathBuf>,
}

/// Writes `{stem}.mask.tns` and, if `overlay` is set, `{stem}.ppm` under `dir`.
/// `logits` is `[1, C, H, W]`.
pub fn export_prediction(
    logits: &Tensor<f32>,
    dir: &Path,
    stem: &str,
    overlay: bool,
    hu: Option<&Tensor<f32>>,
) -> Result<ExportedPrediction> {
    let mask = argmax_mask(logits)?;
    if mask.batch() != 1 {
        return Err(Error::dim("export handles one slice at a time"));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mask_path = dir.join(format!("{stem}.mask.tns"));
    tns::save_mask(&mask_path, &mask)?;
    let overlay_path = if overlay {
        let p = dir.join(format!("{stem}.ppm"));
        write_ppm(&p, &mask, hu)?;
        Some(p)
    } else {
        None
    };
    Ok(ExportedPrediction {
        mask,
        mask_path,
        overlay_path,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn palette_is_distinct() {
        for i in 0..PALETTE.len() {
            for j in 0..i {
                assert_ne!(PALETTE[i], PALETTE[j]);
            }
        }
    }

    #[test]
    fn uniform_logits_give_background() {
        let t = Tensor::<f32>::zeros(vec![1, 6, 3, 3]).unwrap();
        assert!(argmax_mask(&t).unwrap().data().iter().all(|&v| v == 0));
    }

    #[test]
    fn export_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let t = Tensor::from_fn(vec![1, 6, 4, 4], |i| ((i * 37) % 11) as f32).unwrap();
        let out = export_prediction(&t, dir.path(), "s0", true, None).unwrap();
        let back = tns::load(&out.mask_path).unwrap().into_mask().unwrap();
        assert_eq!(back, argmax_mask(&t).unwrap());
        let ppm = fs::read(out.overlay_path.unwrap()).unwrap();
        assert!(ppm.starts_with(b"P6\n4 4\n255\n"));
        assert_eq!(ppm.len(), 11 + 16 * 3);
    }
}
