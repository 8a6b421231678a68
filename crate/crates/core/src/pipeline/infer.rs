//! Whole-image inference: tile, predict each tile, stitch the probability maps at
//! native resolution and only then form instances.

use std::path::{Path, PathBuf};

use ndarray::{s, Array2};

use crate::data::io;
use crate::data::patches::{crop_cell, tile_cells, CELL_SIZE};
use crate::data::resize::resize_bilinear_f64;
use crate::data::{GridCell, PatchOptions};
use crate::error::{Error, Result};
use crate::model::{BranchOutputs, Checkpoint, TripleUNet};
use crate::postprocess::{segment_instances, PostprocessParams};
use crate::stain::StainOptions;
use crate::types::{ContourMap, LabelMap, RgbImage};

/// Tiles forwarded together; bounds activation memory.
const TILE_BATCH: usize = 4;

/// Stitched per-pixel maps and the instances formed from them.
#[derive(Clone, Debug)]
pub struct Inference {
    pub maps: BranchOutputs,
    pub labels: LabelMap,
}

/// Probability maps for a whole image.
///
/// The image is cut into native cells; each cell gets its own hematoxylin channel,
/// is resized to the network input, and its outputs are resized back and averaged
/// into place.
pub fn predict_image(model: &TripleUNet, image: &RgbImage, stain: &StainOptions) -> Result<BranchOutputs> {
    let (h, w, c) = image.dim();
    if c != 3 {
        return Err(Error::invalid(format!("expected an RGB image, got {c} channels")));
    }
    let cells = tile_cells(h, w, CELL_SIZE)?;
    let options = PatchOptions {
        output_size: model.config().input_size,
        stain: *stain,
    };
    let labels = LabelMap::zeros((h, w));
    let contours = ContourMap::from_elem((h, w), false);
    let mut sums = [Array2::<f64>::zeros((h, w)), Array2::zeros((h, w)), Array2::zeros((h, w))];
    let mut hits = Array2::<f64>::zeros((h, w));
    for chunk in cells.chunks(TILE_BATCH) {
        let patches = chunk
            .iter()
            .map(|&cell| crop_cell("", image, &labels, &contours, cell, &options))
            .collect::<Result<Vec<_>>>()?;
        let batch: Vec<_> = patches.iter().map(|p| (&p.image, &p.hematoxylin)).collect();
        for (out, cell) in model.predict(&batch)?.into_iter().zip(chunk) {
            place(&mut sums, &mut hits, &out, cell);
        }
    }
    let [rgb, contour, seg] = sums.map(|m| m / &hits);
    Ok(BranchOutputs {
        rgb_prob: rgb,
        contour_prob: contour,
        seg_prob: seg,
    })
}

fn place(sums: &mut [Array2<f64>; 3], hits: &mut Array2<f64>, out: &BranchOutputs, cell: &GridCell) {
    let maps = [&out.rgb_prob, &out.contour_prob, &out.seg_prob];
    for (sum, map) in sums.iter_mut().zip(maps) {
        let back = resize_bilinear_f64(map.view(), cell.height, cell.width);
        let mut dst = sum.slice_mut(s![cell.rows(), cell.cols()]);
        dst += &back;
    }
    hits.slice_mut(s![cell.rows(), cell.cols()]).mapv_inplace(|v| v + 1.0);
}

pub fn infer_image(model: &TripleUNet, image: &RgbImage, params: &PostprocessParams) -> Result<Inference> {
    let maps = predict_image(model, image, &StainOptions::default())?;
    let labels = segment_instances(&maps, params)?;
    Ok(Inference { maps, labels })
}

/// Post-processing stored with a checkpoint, or the defaults.
pub fn checkpoint_postprocess(checkpoint: &Checkpoint) -> Result<PostprocessParams> {
    match checkpoint.metadata.get("postprocess") {
        Some(v) => {
            let p: PostprocessParams = serde_json::from_value(v.clone())?;
            p.validate()?;
            Ok(p)
        }
        None => Ok(PostprocessParams::default()),
    }
}

/// Images to run on: `dir/images` when present, else `dir` itself.
pub fn image_inputs(dir: &Path) -> Result<Vec<PathBuf>> {
    let sub = dir.join("images");
    let src = if sub.is_dir() { sub } else { dir.to_path_buf() };
    if !src.is_dir() {
        return Err(Error::invalid(format!("missing directory {}", src.display())));
    }
    let files = io::list_images(&src)?;
    if files.is_empty() {
        return Err(Error::invalid(format!("no images found in {}", src.display())));
    }
    Ok(files)
}

/// Labels every image under `images` and writes `out/<stem>.png` as 16-bit labels.
pub fn infer_dir(
    model: &TripleUNet,
    params: &PostprocessParams,
    images: &Path,
    out: &Path,
) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    for path in image_inputs(images)? {
        let image = io::read_rgb(&path)?;
        let result = infer_image(model, &image, params)?;
        let target = out.join(format!("{}.png", io::file_stem(&path)));
        io::write_labels(&target, &result.labels)?;
        log::info!(
            "{}: {} instances",
            io::file_stem(&path),
            crate::types::count_instances(&result.labels)
        );
        written.push(target);
    }
    Ok(written)
}
