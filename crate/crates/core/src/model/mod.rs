//! The three-branch segmentation network, its inputs and outputs.

pub mod checkpoint;
mod pdfa;
mod unet;

use ndarray::{s, Array2, Axis};
use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use pdfa::{Conv, PdfaBlock, UpConv};
pub use unet::{Branch, BranchFeatures, BranchKind, HeadOutputs, TripleUNet, DECODER_LAYERS, ENCODER_LAYERS};

use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::types::{HematoxylinMap, ProbabilityMap, RgbImage};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkConfig {
    /// Number of 2× down-sampling steps.
    pub depth: usize,
    pub base_channels: usize,
    /// Channels added by each aggregation-block layer.
    pub growth_rate: usize,
    pub input_size: usize,
    /// Also feed the raw patch to the segmentation branch.
    pub seg_raw_input: bool,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            depth: 4,
            base_channels: 32,
            growth_rate: 32,
            input_size: 256,
            seg_raw_input: false,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth < 2 {
            return Err(Error::invalid(format!("depth must be at least 2, got {}", self.depth)));
        }
        if self.depth > 10 {
            return Err(Error::invalid(format!("depth {} is unreasonably large", self.depth)));
        }
        if self.base_channels == 0 || self.growth_rate == 0 {
            return Err(Error::invalid("channel counts must be positive"));
        }
        let step = 1usize << self.depth;
        if self.input_size == 0 || self.input_size % step != 0 {
            return Err(Error::invalid(format!(
                "input size {} is not divisible by 2^{} = {step}",
                self.input_size, self.depth
            )));
        }
        Ok(())
    }

    pub fn bottleneck_size(&self) -> usize {
        self.input_size >> self.depth
    }
}

/// Per-pixel probabilities from the three heads for one patch.
#[derive(Clone, Debug, PartialEq)]
pub struct BranchOutputs {
    /// Nucleus probability from the RGB branch.
    pub rgb_prob: ProbabilityMap,
    /// Contour probability from the hematoxylin branch.
    pub contour_prob: ProbabilityMap,
    /// Final nucleus probability from the segmentation branch.
    pub seg_prob: ProbabilityMap,
}

/// Stacks patches into network inputs; RGB values are divided by 255.
pub fn input_tensors(batch: &[(&RgbImage, &HematoxylinMap)]) -> Result<(Tensor, Tensor)> {
    let Some((first, _)) = batch.first() else {
        return Err(Error::invalid("empty batch"));
    };
    let (h, w, _) = first.dim();
    let n = batch.len();
    let mut rgb = Tensor::zeros((n, 3, h, w));
    let mut hem = Tensor::zeros((n, 1, h, w));
    for (i, (img, hm)) in batch.iter().enumerate() {
        if img.dim() != (h, w, 3) || hm.dim() != (h, w) {
            return Err(Error::invalid(format!(
                "batch entry {i} is {:?}/{:?}, expected {h}×{w}",
                img.dim(),
                hm.dim()
            )));
        }
        for c in 0..3 {
            rgb.slice_mut(s![i, c, .., ..])
                .assign(&img.index_axis(Axis(2), c).mapv(|v| v / 255.0));
        }
        hem.slice_mut(s![i, 0, .., ..]).assign(hm);
    }
    Ok((rgb, hem))
}

fn plane(t: &Tensor, i: usize) -> Array2<f64> {
    t.slice(s![i, 0, .., ..]).mapv(|v| v as f64)
}

impl TripleUNet {
    /// Runs a batch through the network; outputs keep the batch order.
    pub fn predict(&self, batch: &[(&RgbImage, &HematoxylinMap)]) -> Result<Vec<BranchOutputs>> {
        let (rgb, hem) = input_tensors(batch)?;
        let [r, c, sg] = self.infer(rgb, hem)?;
        Ok((0..batch.len())
            .map(|i| BranchOutputs {
                rgb_prob: plane(&r, i),
                contour_prob: plane(&c, i),
                seg_prob: plane(&sg, i),
            })
            .collect())
    }
}
