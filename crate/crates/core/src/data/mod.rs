//! Dataset loading, contour targets, patch tiling, augmentation and fold splits.

pub mod augment;
mod contours;
pub mod folds;
pub mod io;
pub mod patches;
pub mod resize;
pub mod synthetic;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

pub use augment::{augment, AugmentConfig, AugmentedExample, Provenance, TransformStep};
pub use contours::{mask_to_contours, DEFAULT_CONTOUR_THICKNESS};
pub use folds::{make_folds, Fold, FoldSplit};
pub use patches::{crop_cell, crop_into_patches, grid_cells, tile_cells, GridCell, Patch, PatchOptions};

use crate::error::{Error, Result};
use crate::types::{foreground, BinaryMap, ContourMap, LabelMap, RgbImage};

/// One annotated image.
#[derive(Clone, Debug)]
pub struct Sample {
    pub id: String,
    pub organ: String,
    pub image: RgbImage,
    pub instances: LabelMap,
    pub binary_mask: BinaryMap,
    pub contours: ContourMap,
}

impl Sample {
    pub fn new(id: impl Into<String>, image: RgbImage, instances: LabelMap, thickness: usize) -> Result<Self> {
        let id = id.into();
        let (h, w, c) = image.dim();
        if c != 3 {
            return Err(Error::Integrity(format!("{id}: image has {c} channels, expected 3")));
        }
        if instances.dim() != (h, w) {
            return Err(Error::Integrity(format!(
                "{id}: image is {h}×{w} but mask is {}×{}",
                instances.nrows(),
                instances.ncols()
            )));
        }
        Ok(Self {
            organ: organ_of(&id),
            binary_mask: foreground(&instances),
            contours: mask_to_contours(&instances, thickness),
            id,
            image,
            instances,
        })
    }

    pub fn dims(&self) -> (usize, usize) {
        self.instances.dim()
    }
}

/// Organ name: the file stem up to its first underscore.
pub fn organ_of(id: &str) -> String {
    id.split('_').next().unwrap_or(id).to_string()
}

/// Loads `root/images` and `root/masks`, pairing files by stem.
pub fn load_dataset(root: &Path) -> Result<Vec<Sample>> {
    load_dataset_with(root, DEFAULT_CONTOUR_THICKNESS)
}

pub fn load_dataset_with(root: &Path, contour_thickness: usize) -> Result<Vec<Sample>> {
    let pairs = pair_files(root)?;
    pairs
        .into_iter()
        .map(|(id, image_path, mask_path)| {
            let image = io::read_rgb(&image_path)?;
            let instances = io::read_labels(&mask_path)?;
            Sample::new(id, image, instances, contour_thickness)
        })
        .collect()
}

/// `(id, image path, mask path)` for every sample under `root`.
pub fn pair_files(root: &Path) -> Result<Vec<(String, PathBuf, PathBuf)>> {
    let images_dir = root.join("images");
    let masks_dir = root.join("masks");
    for d in [&images_dir, &masks_dir] {
        if !d.is_dir() {
            return Err(Error::Integrity(format!("missing directory {}", d.display())));
        }
    }
    let by_stem = |paths: Vec<PathBuf>| -> Result<BTreeMap<String, PathBuf>> {
        let mut map = BTreeMap::new();
        for p in paths {
            let stem = io::file_stem(&p);
            if let Some(prev) = map.insert(stem.clone(), p.clone()) {
                return Err(Error::Integrity(format!(
                    "duplicate sample id {stem}: {} and {}",
                    prev.display(),
                    p.display()
                )));
            }
        }
        Ok(map)
    };
    let images = by_stem(io::list_images(&images_dir)?)?;
    let mut masks = by_stem(io::list_images(&masks_dir)?)?;
    let orphans: Vec<String> = images
        .iter()
        .filter(|(stem, _)| !masks.contains_key(*stem))
        .map(|(_, p)| p.display().to_string())
        .collect();
    if !orphans.is_empty() {
        return Err(Error::Integrity(format!(
            "no mask for image(s): {}",
            orphans.join(", ")
        )));
    }
    let stray: Vec<String> = masks
        .iter()
        .filter(|(stem, _)| !images.contains_key(*stem))
        .map(|(_, p)| p.display().to_string())
        .collect();
    if !stray.is_empty() {
        return Err(Error::Integrity(format!(
            "no image for mask(s): {}",
            stray.join(", ")
        )));
    }
    if images.is_empty() {
        return Err(Error::Integrity(format!("no images in {}", images_dir.display())));
    }
    Ok(images
        .into_iter()
        .map(|(id, img)| {
            let mask = masks.remove(&id).expect("paired above");
            (id, img, mask)
        })
        .collect())
}
