//! Resampling with half-pixel centres (a destination pixel `d` samples source
//! coordinate `(d + 0.5)·scale − 0.5`).

use ndarray::{Array2, Array3, ArrayView2, ArrayView3};

/// Bilinear sample at a fractional coordinate, clamping to the border.
#[inline]
pub fn sample_bilinear(src: &ArrayView2<'_, f32>, y: f64, x: f64) -> f32 {
    let (h, w) = src.dim();
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let y0 = y.floor() as usize;
    let x0 = x.floor() as usize;
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let fy = (y - y0 as f64) as f32;
    let fx = (x - x0 as f64) as f32;
    if fy == 0.0 && fx == 0.0 {
        return src[[y0, x0]];
    }
    let top = src[[y0, x0]] * (1.0 - fx) + src[[y0, x1]] * fx;
    let bot = src[[y1, x0]] * (1.0 - fx) + src[[y1, x1]] * fx;
    top * (1.0 - fy) + bot * fy
}

/// Nearest-neighbour sample (round half up), clamping to the border.
#[inline]
pub fn sample_nearest<T: Copy>(src: &ArrayView2<'_, T>, y: f64, x: f64) -> T {
    let (h, w) = src.dim();
    let yi = (y + 0.5).floor().clamp(0.0, (h - 1) as f64) as usize;
    let xi = (x + 0.5).floor().clamp(0.0, (w - 1) as f64) as usize;
    src[[yi, xi]]
}

fn source_coord(d: usize, scale: f64) -> f64 {
    (d as f64 + 0.5) * scale - 0.5
}

pub fn resize_bilinear(src: ArrayView2<'_, f32>, out_h: usize, out_w: usize) -> Array2<f32> {
    let (h, w) = src.dim();
    if (h, w) == (out_h, out_w) {
        return src.to_owned();
    }
    let (sy, sx) = (h as f64 / out_h as f64, w as f64 / out_w as f64);
    Array2::from_shape_fn((out_h, out_w), |(y, x)| {
        sample_bilinear(&src, source_coord(y, sy), source_coord(x, sx))
    })
}

pub fn resize_bilinear_rgb(src: ArrayView3<'_, f32>, out_h: usize, out_w: usize) -> Array3<f32> {
    let mut out = Array3::<f32>::zeros((out_h, out_w, src.shape()[2]));
    for c in 0..src.shape()[2] {
        let plane = resize_bilinear(src.index_axis(ndarray::Axis(2), c), out_h, out_w);
        out.index_axis_mut(ndarray::Axis(2), c).assign(&plane);
    }
    out
}

pub fn resize_bilinear_f64(src: ArrayView2<'_, f64>, out_h: usize, out_w: usize) -> Array2<f64> {
    let f = src.mapv(|v| v as f32);
    resize_bilinear(f.view(), out_h, out_w).mapv(|v| v as f64)
}

/// Nearest-neighbour resize. Integer up-scaling replicates each pixel exactly.
pub fn resize_nearest<T: Copy>(src: ArrayView2<'_, T>, out_h: usize, out_w: usize) -> Array2<T> {
    let (h, w) = src.dim();
    let (sy, sx) = (h as f64 / out_h as f64, w as f64 / out_w as f64);
    Array2::from_shape_fn((out_h, out_w), |(y, x)| {
        let yi = (((y as f64 + 0.5) * sy).floor() as usize).min(h - 1);
        let xi = (((x as f64 + 0.5) * sx).floor() as usize).min(w - 1);
        src[[yi, xi]]
    })
}
