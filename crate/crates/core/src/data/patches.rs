//! 4×4 grid tiling of native images into network-sized patches.

use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};

use super::resize::{resize_bilinear, resize_bilinear_rgb, resize_nearest};
use super::Sample;
use crate::error::{Error, Result};
use crate::stain::{extract_hematoxylin_with, StainOptions};
use crate::types::{compact_labels, ContourMap, HematoxylinMap, LabelMap, RgbImage};

pub const NATIVE_SIZE: usize = 512;
pub const GRID: usize = 4;
pub const PATCH_SIZE: usize = 256;
/// Side of one grid cell of a native image.
pub const CELL_SIZE: usize = NATIVE_SIZE / GRID;

/// One cell of the tiling grid, in native pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridCell {
    pub index: usize,
    pub y0: usize,
    pub x0: usize,
    pub height: usize,
    pub width: usize,
}

impl GridCell {
    pub fn rows(&self) -> std::ops::Range<usize> {
        self.y0..self.y0 + self.height
    }

    pub fn cols(&self) -> std::ops::Range<usize> {
        self.x0..self.x0 + self.width
    }
}

/// Non-overlapping `grid × grid` cells covering an `h × w` image in raster order.
pub fn grid_cells(h: usize, w: usize, grid: usize) -> Result<Vec<GridCell>> {
    if grid == 0 || h == 0 || w == 0 || h % grid != 0 || w % grid != 0 {
        return Err(Error::invalid(format!(
            "a {h}×{w} image cannot be split into a {grid}×{grid} grid"
        )));
    }
    let (ch, cw) = (h / grid, w / grid);
    Ok((0..grid * grid)
        .map(|i| GridCell {
            index: i,
            y0: (i / grid) * ch,
            x0: (i % grid) * cw,
            height: ch,
            width: cw,
        })
        .collect())
}

/// Non-overlapping `cell × cell` tiles covering an `h × w` image in raster order.
pub fn tile_cells(h: usize, w: usize, cell: usize) -> Result<Vec<GridCell>> {
    if cell == 0 || h == 0 || w == 0 || h % cell != 0 || w % cell != 0 {
        return Err(Error::invalid(format!(
            "a {h}×{w} image cannot be tiled by {cell}×{cell} cells"
        )));
    }
    let cols = w / cell;
    Ok((0..(h / cell) * cols)
        .map(|i| GridCell {
            index: i,
            y0: (i / cols) * cell,
            x0: (i % cols) * cell,
            height: cell,
            width: cell,
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchOptions {
    pub output_size: usize,
    pub stain: StainOptions,
}

impl Default for PatchOptions {
    fn default() -> Self {
        Self {
            output_size: PATCH_SIZE,
            stain: StainOptions::default(),
        }
    }
}

/// A resized grid cell with its hematoxylin channel and targets.
#[derive(Clone, Debug)]
pub struct Patch {
    pub sample_id: String,
    pub cell: GridCell,
    pub image: RgbImage,
    pub hematoxylin: HematoxylinMap,
    pub instances: LabelMap,
    pub contours: ContourMap,
}

impl Patch {
    pub fn index(&self) -> usize {
        self.cell.index
    }
}

/// Extracts the hematoxylin channel of the crop at native resolution, then resizes.
pub fn crop_cell(
    sample_id: &str,
    image: &RgbImage,
    instances: &LabelMap,
    contours: &ContourMap,
    cell: GridCell,
    options: &PatchOptions,
) -> Result<Patch> {
    let n = options.output_size;
    let (rows, cols) = (cell.rows(), cell.cols());
    let img = image.slice(s![rows.clone(), cols.clone(), ..]);
    let h = extract_hematoxylin_with(img, &options.stain)?;
    let inst = compact_labels(&instances.slice(s![rows.clone(), cols.clone()]).to_owned());
    Ok(Patch {
        sample_id: sample_id.to_string(),
        cell,
        image: resize_bilinear_rgb(img, n, n),
        hematoxylin: resize_bilinear(h.view(), n, n),
        instances: resize_nearest(inst.view(), n, n),
        contours: resize_nearest(contours.slice(s![rows, cols]), n, n),
    })
}

/// The 16 patches of a 512×512 sample, in raster order.
pub fn crop_into_patches(sample: &Sample, options: &PatchOptions) -> Result<Vec<Patch>> {
    let (h, w) = sample.dims();
    if (h, w) != (NATIVE_SIZE, NATIVE_SIZE) {
        return Err(Error::invalid(format!(
            "{}: expected a {NATIVE_SIZE}×{NATIVE_SIZE} image, got {h}×{w}",
            sample.id
        )));
    }
    if options.output_size == 0 {
        return Err(Error::invalid("patch output size must be positive"));
    }
    grid_cells(h, w, GRID)?
        .into_iter()
        .map(|cell| {
            crop_cell(
                &sample.id,
                &sample.image,
                &sample.instances,
                &sample.contours,
                cell,
                options,
            )
        })
        .collect()
}

/// Binary map of a patch's instances.
pub fn patch_foreground(patch: &Patch) -> Array2<bool> {
    patch.instances.mapv(|l| l > 0)
}
