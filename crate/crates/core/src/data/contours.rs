use ndarray::Array2;

use crate::types::{ContourMap, LabelMap};

pub const DEFAULT_CONTOUR_THICKNESS: usize = 2;

/// Marks every nucleus pixel whose Chebyshev neighbourhood of radius `thickness`
/// contains a differently labelled pixel (background or another nucleus).
///
/// Background pixels are never marked, and pixels outside the image do not count
/// as a different label.
pub fn mask_to_contours(instances: &LabelMap, thickness: usize) -> ContourMap {
    let (h, w) = instances.dim();
    let t = thickness.max(1);
    // A pixel differs from some neighbour in its window iff the window's min or max
    // label differs from its own; compute both with separable running extrema.
    let row_pass = |f: fn(u32, u32) -> u32| {
        let mut out = Array2::<u32>::zeros((h, w));
        for y in 0..h {
            for x in 0..w {
                let lo = x.saturating_sub(t);
                let hi = (x + t).min(w - 1);
                let mut acc = instances[[y, lo]];
                for xx in lo + 1..=hi {
                    acc = f(acc, instances[[y, xx]]);
                }
                out[[y, x]] = acc;
            }
        }
        out
    };
    let col_pass = |src: &Array2<u32>, f: fn(u32, u32) -> u32| {
        let mut out = Array2::<u32>::zeros((h, w));
        for y in 0..h {
            let lo = y.saturating_sub(t);
            let hi = (y + t).min(h - 1);
            for x in 0..w {
                let mut acc = src[[lo, x]];
                for yy in lo + 1..=hi {
                    acc = f(acc, src[[yy, x]]);
                }
                out[[y, x]] = acc;
            }
        }
        out
    };
    if h == 0 || w == 0 {
        return Array2::from_elem((h, w), false);
    }
    let mins = col_pass(&row_pass(u32::min), u32::min);
    let maxs = col_pass(&row_pass(u32::max), u32::max);
    Array2::from_shape_fn((h, w), |(y, x)| {
        let l = instances[[y, x]];
        l > 0 && (mins[[y, x]] != l || maxs[[y, x]] != l)
    })
}
