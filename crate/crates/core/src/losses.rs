//! Branch losses and their weighted total.
//!
//! Every loss is computed in `f64` over flattened pixels and comes with a closed-form
//! gradient with respect to the predicted probabilities, which the trainer feeds back
//! through the sigmoid heads.

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Probability clipping bound for the cross-entropy logarithms.
pub const PROB_EPS: f64 = 1e-7;
/// Denominator smoothing of the soft Dice loss.
pub const DICE_SMOOTH: f64 = 1e-6;

/// Predicted probabilities `x` (clipped to `[ε, 1−ε]`) against binary targets `y`.
#[derive(Clone, Debug)]
pub struct PixelPrediction {
    x: Vec<f64>,
    y: Vec<f64>,
}

impl PixelPrediction {
    pub fn new(x: &[f64], y: &[f64]) -> Result<Self> {
        if x.len() != y.len() {
            return Err(Error::invalid(format!(
                "prediction has {} pixels, target has {}",
                x.len(),
                y.len()
            )));
        }
        if x.is_empty() {
            return Err(Error::invalid("empty prediction"));
        }
        if let Some(bad) = y.iter().find(|&&v| v != 0.0 && v != 1.0) {
            return Err(Error::invalid(format!("target value {bad} is not binary")));
        }
        Ok(Self {
            x: x.iter().map(|&v| v.clamp(PROB_EPS, 1.0 - PROB_EPS)).collect(),
            y: y.to_vec(),
        })
    }

    pub fn from_maps(x: ArrayView2<'_, f64>, y: ArrayView2<'_, f64>) -> Result<Self> {
        if x.shape() != y.shape() {
            return Err(Error::invalid(format!(
                "prediction shape {:?} differs from target shape {:?}",
                x.shape(),
                y.shape()
            )));
        }
        let xv: Vec<f64> = x.iter().copied().collect();
        let yv: Vec<f64> = y.iter().copied().collect();
        Self::new(&xv, &yv)
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }
}

/// Mean binary cross-entropy with natural logarithm.
pub fn bce_loss(p: &PixelPrediction) -> f64 {
    let n = p.len() as f64;
    let sum: f64 = p
        .x
        .iter()
        .zip(&p.y)
        .map(|(&x, &y)| y * x.ln() + (1.0 - y) * (1.0 - x).ln())
        .sum();
    -sum / n
}

/// BCE value and its gradient with respect to each (clipped) probability.
pub fn bce_loss_grad(p: &PixelPrediction) -> (f64, Vec<f64>) {
    let n = p.len() as f64;
    let grad = p
        .x
        .iter()
        .zip(&p.y)
        .map(|(&x, &y)| -(y / x - (1.0 - y) / (1.0 - x)) / n)
        .collect();
    (bce_loss(p), grad)
}

struct DiceSums {
    overlap: f64,
    pred_sq: f64,
    target_sq: f64,
}

fn dice_sums(p: &PixelPrediction) -> DiceSums {
    let mut s = DiceSums {
        overlap: 0.0,
        pred_sq: 0.0,
        target_sq: 0.0,
    };
    for (&x, &y) in p.x.iter().zip(&p.y) {
        s.overlap += x * y;
        s.pred_sq += x * x;
        s.target_sq += y * y;
    }
    s
}

/// `1 − (2Σxy + s) / (Σx² + Σy² + s)`; the smoothing term makes an empty
/// prediction of an empty target cost 0.
pub fn soft_dice_loss(p: &PixelPrediction) -> f64 {
    let s = dice_sums(p);
    (1.0 - (2.0 * s.overlap + DICE_SMOOTH) / (s.pred_sq + s.target_sq + DICE_SMOOTH)).clamp(0.0, 1.0)
}

pub fn soft_dice_loss_grad(p: &PixelPrediction) -> (f64, Vec<f64>) {
    let s = dice_sums(p);
    let denom = s.pred_sq + s.target_sq + DICE_SMOOTH;
    let grad = p
        .x
        .iter()
        .zip(&p.y)
        .map(|(&x, &y)| -(2.0 * y * denom - 2.0 * x * (2.0 * s.overlap + DICE_SMOOTH)) / (denom * denom))
        .collect();
    (soft_dice_loss(p), grad)
}

/// Which loss supervises the segmentation head alongside its soft Dice term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegStLoss {
    #[default]
    Bce,
    SoftDice,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub rgb: f64,
    pub h: f64,
    pub seg_st: f64,
    pub seg_sd: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            rgb: 1.0,
            h: 1.0,
            seg_st: 1.0,
            seg_sd: 1.0,
        }
    }
}

impl LossWeights {
    pub fn new(rgb: f64, h: f64, seg_st: f64, seg_sd: f64) -> Result<Self> {
        let w = Self {
            rgb,
            h,
            seg_st,
            seg_sd,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.rgb, self.h, self.seg_st, self.seg_sd];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::invalid(format!("loss weights must be non-negative: {all:?}")));
        }
        if all.iter().all(|&w| w == 0.0) {
            return Err(Error::invalid("at least one loss weight must be positive"));
        }
        Ok(())
    }
}

/// The four raw terms and their weighted sum.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub rgb: f64,
    pub h: f64,
    pub seg_st: f64,
    pub seg_sd: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.rgb, self.h, self.seg_st, self.seg_sd, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Flattened head probabilities and targets for one or more images.
#[derive(Clone, Copy, Debug)]
pub struct HeadMaps<'a> {
    pub rgb_prob: &'a [f64],
    pub contour_prob: &'a [f64],
    pub seg_prob: &'a [f64],
    pub seg_target: &'a [f64],
    pub contour_target: &'a [f64],
}

/// Gradients of the total loss with respect to each head's probabilities.
#[derive(Clone, Debug)]
pub struct HeadGradients {
    pub rgb: Vec<f64>,
    pub contour: Vec<f64>,
    pub seg: Vec<f64>,
}

fn seg_st_term(kind: SegStLoss, p: &PixelPrediction) -> (f64, Vec<f64>) {
    match kind {
        SegStLoss::Bce => bce_loss_grad(p),
        SegStLoss::SoftDice => soft_dice_loss_grad(p),
    }
}

/// Weighted total loss over the three heads, with per-head gradients.
pub fn total_loss_grad(
    maps: HeadMaps<'_>,
    weights: &LossWeights,
    seg_st: SegStLoss,
) -> Result<(LossBreakdown, HeadGradients)> {
    weights.validate()?;
    let rgb = PixelPrediction::new(maps.rgb_prob, maps.seg_target)?;
    let h = PixelPrediction::new(maps.contour_prob, maps.contour_target)?;
    let seg = PixelPrediction::new(maps.seg_prob, maps.seg_target)?;
    let (l_rgb, g_rgb) = bce_loss_grad(&rgb);
    let (l_h, g_h) = soft_dice_loss_grad(&h);
    let (l_st, g_st) = seg_st_term(seg_st, &seg);
    let (l_sd, g_sd) = soft_dice_loss_grad(&seg);
    let breakdown = LossBreakdown {
        rgb: l_rgb,
        h: l_h,
        seg_st: l_st,
        seg_sd: l_sd,
        total: weights.rgb * l_rgb + weights.h * l_h + weights.seg_st * l_st + weights.seg_sd * l_sd,
    };
    let scale = |g: Vec<f64>, w: f64| g.into_iter().map(|v| v * w).collect::<Vec<_>>();
    let grads = HeadGradients {
        rgb: scale(g_rgb, weights.rgb),
        contour: scale(g_h, weights.h),
        seg: g_st
            .iter()
            .zip(&g_sd)
            .map(|(a, b)| weights.seg_st * a + weights.seg_sd * b)
            .collect(),
    };
    Ok((breakdown, grads))
}

pub fn total_loss(maps: HeadMaps<'_>, weights: &LossWeights, seg_st: SegStLoss) -> Result<LossBreakdown> {
    total_loss_grad(maps, weights, seg_st).map(|(b, _)| b)
}
