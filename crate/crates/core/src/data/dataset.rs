use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{SliceMeta, SliceSample, CLASS_NAMES};
use crate::error::{Error, Result};
use crate::tensor::io as tns;

pub const MANIFEST_FILE: &str = "manifest.tsv";

/// One `manifest.tsv` line. Paths are relative to the dataset directory.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestRow {
    pub image_path: String,
    pub mask_path: String,
    pub counts: [u64; 6],
}

fn header() -> String {
    let mut h = String::from("image_path\tmask_path");
    for c in CLASS_NAMES {
        h.push('\t');
        h.push_str(c);
    }
    h
}

fn counts_of(sample: &SliceSample) -> [u64; 6] {
    let v = sample.mask.class_counts(CLASS_NAMES.len());
    std::array::from_fn(|i| v[i])
}

pub(super) fn write_split_rows(dest: &Path, samples: &[SliceSample]) -> Result<Vec<ManifestRow>> {
    for sub in ["images", "masks"] {
        let d = dest.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let mut rows = Vec::with_capacity(samples.len());
    let mut text = header();
    text.push('\n');
    for (i, s) in samples.iter().enumerate() {
        let stem = if s.meta.slice_id.is_empty() {
            format!("slice_{i:05}")
        } else {
            s.meta.slice_id.clone()
        };
        let row = ManifestRow {
            image_path: format!("images/{stem}.tns"),
            mask_path: format!("masks/{stem}.tns"),
            counts: counts_of(s),
        };
        tns::save_f32(dest.join(&row.image_path), &s.image)?;
        tns::save_mask(dest.join(&row.mask_path), &s.mask)?;
        write!(text, "{}\t{}", row.image_path, row.mask_path).expect("string write");
        for c in row.counts {
            write!(text, "\t{c}").expect("string write");
        }
        text.push('\n');
        rows.push(row);
    }
    let path = dest.join(MANIFEST_FILE);
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(rows)
}

/// Slices held in memory together with the manifest they came from.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub samples: Vec<SliceSample>,
    pub rows: Vec<ManifestRow>,
}

impl Dataset {
    pub fn from_samples(samples: Vec<SliceSample>) -> Self {
        let rows = samples
            .iter()
            .enumerate()
            .map(|(i, s)| ManifestRow {
                image_path: format!("images/slice_{i:05}.tns"),
                mask_path: format!("masks/slice_{i:05}.tns"),
                counts: counts_of(s),
            })
            .collect();
        Self { samples, rows }
    }

    pub fn read_manifest(dir: impl AsRef<Path>) -> Result<Vec<ManifestRow>> {
        let path = dir.as_ref().join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut lines = text.lines();
        if lines.next() != Some(header().as_str()) {
            return Err(Error::Format(format!("{}: unexpected manifest header", path.display())));
        }
        lines
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(n, line)| {
                let bad = |what: &str| Error::Format(format!("{}:{}: {what}", path.display(), n + 2));
                let cols: Vec<&str> = line.split('\t').collect();
                if cols.len() != 2 + CLASS_NAMES.len() {
                    return Err(bad("wrong column count"));
                }
                let mut counts = [0u64; 6];
                for (c, v) in counts.iter_mut().zip(&cols[2..]) {
                    *c = v.parse().map_err(|_| bad("pixel count is not an integer"))?;
                }
                Ok(ManifestRow {
                    image_path: cols[0].to_string(),
                    mask_path: cols[1].to_string(),
                    counts,
                })
            })
            .collect()
    }

    /// Loads every pair listed in the manifest and checks the recorded pixel
    /// counts against the masks.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let rows = Self::read_manifest(dir)?;
        let mut samples = Vec::with_capacity(rows.len());
        for row in &rows {
            let image = tns::load(dir.join(&row.image_path))?.into_f32()?;
            let mask = tns::load(dir.join(&row.mask_path))?.into_mask()?;
            let slice_id = Path::new(&row.image_path)
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            let meta = SliceMeta {
                slice_id,
                source_id: dir.display().to_string(),
            };
            let sample = SliceSample::new(image, mask, meta)?;
            if counts_of(&sample) != row.counts {
                return Err(Error::Format(format!(
                    "{}: manifest counts {:?} disagree with mask counts {:?}",
                    row.mask_path,
                    row.counts,
                    counts_of(&sample)
                )));
            }
            samples.push(sample);
        }
        Ok(Self { samples, rows })
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        write_split_rows(dir.as_ref(), &self.samples).map(|_| ())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Summed pixel counts per class.
    pub fn class_counts(&self) -> [u64; 6] {
        let mut total = [0u64; 6];
        for r in &self.rows {
            for (t, c) in total.iter_mut().zip(r.counts) {
                *t += c;
            }
        }
        total
    }

    /// Number of slices containing each class at least once.
    pub fn slices_with_class(&self) -> [usize; 6] {
        let mut total = [0usize; 6];
        for r in &self.rows {
            for (t, c) in total.iter_mut().zip(r.counts) {
                *t += usize::from(c > 0);
            }
        }
        total
    }

    /// Slice extent shared by every sample.
    pub fn extent(&self) -> Result<(usize, usize)> {
        let first = self.samples.first().ok_or_else(|| Error::Format("dataset is empty".into()))?;
        let hw = (first.height(), first.width());
        if let Some(s) = self.samples.iter().find(|s| (s.height(), s.width()) != hw) {
            return Err(Error::dim(format!(
                "slice {} is {}x{}, expected {}x{}",
                s.meta.slice_id,
                s.height(),
                s.width(),
                hw.0,
                hw.1
            )));
        }
        Ok(hw)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_slices, PhantomSpec};

    #[test]
    fn disk_round_trip_and_recount() {
        let dir = tempfile::tempdir().unwrap();
        let samples = generate_slices(&PhantomSpec::desk(4, 2)).unwrap();
        let rows = write_split_rows(dir.path(), &samples).unwrap();
        let ds = Dataset::load(dir.path()).unwrap();
        assert_eq!(ds.rows, rows);
        for (a, b) in ds.samples.iter().zip(&samples) {
            assert_eq!(a.image, b.image);
            assert_eq!(a.mask, b.mask);
        }
    }

    #[test]
    fn tampered_counts_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let samples = generate_slices(&PhantomSpec::desk(1, 2)).unwrap();
        write_split_rows(dir.path(), &samples).unwrap();
        let p = dir.path().join(MANIFEST_FILE);
        let text = fs::read_to_string(&p).unwrap();
        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        let mut cols: Vec<String> = lines[1].split('\t').map(String::from).collect();
        cols[2] = "1".into();
        lines[1] = cols.join("\t");
        fs::write(&p, lines.join("\n")).unwrap();
        assert!(matches!(Dataset::load(dir.path()), Err(Error::Format(_))));
    }
}
