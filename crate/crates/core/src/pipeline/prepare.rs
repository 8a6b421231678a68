//! One-off dataset preparation: fold file plus contour and hematoxylin caches.

use std::path::{Path, PathBuf};

use crate::data::{io, load_dataset_with, make_folds, FoldSplit};
use crate::error::{Error, Result};
use crate::stain::{extract_hematoxylin_with, StainOptions};

pub const FOLDS_FILE: &str = "folds.json";
pub const CONTOURS_DIR: &str = "contours";
pub const HEMATOXYLIN_DIR: &str = "hematoxylin";

#[derive(Clone, Debug)]
pub struct Prepared {
    pub samples: usize,
    pub folds_path: PathBuf,
    pub split: FoldSplit,
}

/// Checks the dataset, derives the folds and writes per-image contour masks and
/// whole-image hematoxylin channels as 16-bit PNGs.
pub fn prepare(data_root: &Path, out: &Path, contour_thickness: usize) -> Result<Prepared> {
    let samples = load_dataset_with(data_root, contour_thickness)?;
    let split = make_folds(&samples)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let folds_path = out.join(FOLDS_FILE);
    split.save(&folds_path)?;
    let stain = StainOptions::default();
    for s in &samples {
        let name = format!("{}.png", s.id);
        io::write_gray16(
            &out.join(CONTOURS_DIR).join(&name),
            &s.contours.mapv(|c| if c { 1.0 } else { 0.0 }),
        )?;
        let h = extract_hematoxylin_with(s.image.view(), &stain)?;
        io::write_gray16(&out.join(HEMATOXYLIN_DIR).join(&name), &h)?;
    }
    Ok(Prepared {
        samples: samples.len(),
        folds_path,
        split,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic::{write_corpus, SyntheticConfig};

    #[test]
    fn writes_folds_and_caches() {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("data");
        let cfg = SyntheticConfig {
            size: 64,
            min_nuclei: 2,
            max_nuclei: 4,
            ..SyntheticConfig::default()
        };
        let ids = write_corpus(&data, &["skin", "testis"], 3, 1, &cfg).unwrap();
        let out = dir.path().join("prep");
        let p = prepare(&data, &out, 2).unwrap();
        assert_eq!(p.samples, 6);
        assert_eq!(FoldSplit::load(&p.folds_path).unwrap(), p.split);
        for id in &ids {
            let c = io::read_gray16(&out.join(CONTOURS_DIR).join(format!("{id}.png"))).unwrap();
            assert!(c.iter().all(|&v| v == 0.0 || v == 1.0));
            assert!(out.join(HEMATOXYLIN_DIR).join(format!("{id}.png")).is_file());
        }
        assert!(prepare(&dir.path().join("missing"), &out, 2).is_err());
    }
}
