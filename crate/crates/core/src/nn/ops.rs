//! Dense CPU kernels for the handful of layer types the segmentation network uses.
//!
//! All tensors are `N×C×H×W` in standard (row-major) layout. Convolutions run as
//! im2col + GEMM over horizontal bands of rows so the column buffer stays small
//! regardless of image size.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, Array4, ArrayView2, ArrayViewMut2, ShapeBuilder};

use super::Tensor;

/// Upper bound on pixels per im2col band.
const BAND_PIXELS: usize = 4096;

fn slice(t: &Tensor) -> &[f32] {
    t.as_slice().expect("tensor must be in standard layout")
}

fn slice_mut(t: &mut Tensor) -> &mut [f32] {
    t.as_slice_mut().expect("tensor must be in standard layout")
}

fn dims(t: &Tensor) -> (usize, usize, usize, usize) {
    let s = t.shape();
    (s[0], s[1], s[2], s[3])
}

fn band_rows(width: usize) -> usize {
    (BAND_PIXELS / width.max(1)).max(1)
}

/// Fill `cols` (`C·k·k × rows·W`) with the receptive fields of output rows `y0..y0+rows`.
fn im2col_band(
    x: &[f32],
    channels: usize,
    height: usize,
    width: usize,
    k: usize,
    y0: usize,
    rows: usize,
    cols: &mut [f32],
) {
    let pad = (k / 2) as isize;
    let n = rows * width;
    for c in 0..channels {
        let plane = &x[c * height * width..(c + 1) * height * width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * n..(row + 1) * n];
                let dx = kx as isize - pad;
                for r in 0..rows {
                    let sy = (y0 + r) as isize + ky as isize - pad;
                    let out = &mut dst[r * width..(r + 1) * width];
                    if sy < 0 || sy >= height as isize {
                        out.fill(0.0);
                        continue;
                    }
                    let src = &plane[sy as usize * width..(sy as usize + 1) * width];
                    // valid output columns: 0 <= x + dx < width
                    let lo = (-dx).max(0) as usize;
                    let hi = (width as isize - dx).min(width as isize).max(0) as usize;
                    out[..lo.min(width)].fill(0.0);
                    if hi > lo {
                        let s0 = (lo as isize + dx) as usize;
                        out[lo..hi].copy_from_slice(&src[s0..s0 + (hi - lo)]);
                    }
                    if hi < width {
                        out[hi.max(lo)..].fill(0.0);
                    }
                }
            }
        }
    }
}

/// Scatter-add a column buffer back into the input gradient (adjoint of `im2col_band`).
fn col2im_band(
    cols: &[f32],
    channels: usize,
    height: usize,
    width: usize,
    k: usize,
    y0: usize,
    rows: usize,
    dx_out: &mut [f32],
) {
    let pad = (k / 2) as isize;
    let n = rows * width;
    for c in 0..channels {
        let plane = &mut dx_out[c * height * width..(c + 1) * height * width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * n..(row + 1) * n];
                let dx = kx as isize - pad;
                for r in 0..rows {
                    let sy = (y0 + r) as isize + ky as isize - pad;
                    if sy < 0 || sy >= height as isize {
                        continue;
                    }
                    let dst = &mut plane[sy as usize * width..(sy as usize + 1) * width];
                    let lo = (-dx).max(0) as usize;
                    let hi = (width as isize - dx).min(width as isize).max(0) as usize;
                    for xo in lo..hi {
                        dst[(xo as isize + dx) as usize] += src[r * width + xo];
                    }
                }
            }
        }
    }
}

/// Same-padded, stride-1 convolution. `w` is `Co×Ci×k×k`, `b` is `1×Co×1×1`.
pub fn conv2d(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let (n, ci, h, wd) = dims(x);
    let (co, wci, k, _) = dims(w);
    assert_eq!(ci, wci, "conv2d channel mismatch");
    let ckk = ci * k * k;
    let hw = h * wd;
    let wmat = ArrayView2::from_shape((co, ckk), slice(w)).unwrap();
    let bias = slice(b);
    let mut y = Array4::<f32>::zeros((n, co, h, wd));
    let xs = slice(x);
    let ys = slice_mut(&mut y);
    let step = band_rows(wd);
    let mut cols = vec![0f32; ckk * step * wd];
    for s in 0..n {
        let xin = &xs[s * ci * hw..(s + 1) * ci * hw];
        let yout = &mut ys[s * co * hw..(s + 1) * co * hw];
        for (c, plane) in yout.chunks_mut(hw).enumerate() {
            plane.fill(bias[c]);
        }
        let mut y0 = 0;
        while y0 < h {
            let rows = step.min(h - y0);
            let np = rows * wd;
            let band_view = if k == 1 {
                // 1×1 kernels read the input directly; rows of the band are strided by hw.
                ArrayView2::from_shape((ci, np).strides((hw, 1)), &xin[y0 * wd..])
                    .expect("1x1 band view")
            } else {
                im2col_band(xin, ci, h, wd, k, y0, rows, &mut cols[..ckk * np]);
                ArrayView2::from_shape((ckk, np), &cols[..ckk * np]).unwrap()
            };
            let out = ArrayViewMut2::from_shape((co, np).strides((hw, 1)), &mut yout[y0 * wd..])
                .expect("conv output band view");
            general_mat_mul(1.0, &wmat, &band_view, 1.0, &mut { out });
            y0 += rows;
        }
    }
    y
}

/// Gradients of `conv2d`. Returns `(dx, dw, db)`; `dx` is skipped when not needed.
pub fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    dy: &Tensor,
    need_dx: bool,
) -> (Option<Tensor>, Tensor, Tensor) {
    let (n, ci, h, wd) = dims(x);
    let (co, _, k, _) = dims(w);
    let ckk = ci * k * k;
    let hw = h * wd;
    let wmat = ArrayView2::from_shape((co, ckk), slice(w)).unwrap();
    let mut dw = Array2::<f32>::zeros((co, ckk));
    let mut db = Array4::<f32>::zeros((1, co, 1, 1));
    let mut dx = need_dx.then(|| Array4::<f32>::zeros((n, ci, h, wd)));
    let xs = slice(x);
    let dys = slice(dy);
    let step = band_rows(wd);
    let mut cols = vec![0f32; ckk * step * wd];
    let mut dcols = vec![0f32; ckk * step * wd];
    {
        let dbs = slice_mut(&mut db);
        for s in 0..n {
            let g = &dys[s * co * hw..(s + 1) * co * hw];
            for (c, plane) in g.chunks(hw).enumerate() {
                dbs[c] += plane.iter().sum::<f32>();
            }
        }
    }
    for s in 0..n {
        let xin = &xs[s * ci * hw..(s + 1) * ci * hw];
        let g = &dys[s * co * hw..(s + 1) * co * hw];
        let mut y0 = 0;
        while y0 < h {
            let rows = step.min(h - y0);
            let np = rows * wd;
            let gview = ArrayView2::from_shape((co, np).strides((hw, 1)), &g[y0 * wd..]).unwrap();
            if k == 1 {
                let xv = ArrayView2::from_shape((ci, np).strides((hw, 1)), &xin[y0 * wd..]).unwrap();
                general_mat_mul(1.0, &gview, &xv.t(), 1.0, &mut dw);
                if let Some(dx) = dx.as_mut() {
                    let dxs = slice_mut(dx);
                    let dxv = ArrayViewMut2::from_shape(
                        (ci, np).strides((hw, 1)),
                        &mut dxs[s * ci * hw + y0 * wd..],
                    )
                    .unwrap();
                    general_mat_mul(1.0, &wmat.t(), &gview, 1.0, &mut { dxv });
                }
            } else {
                im2col_band(xin, ci, h, wd, k, y0, rows, &mut cols[..ckk * np]);
                let cv = ArrayView2::from_shape((ckk, np), &cols[..ckk * np]).unwrap();
                general_mat_mul(1.0, &gview, &cv.t(), 1.0, &mut dw);
                if let Some(dx) = dx.as_mut() {
                    let mut dcv =
                        ArrayViewMut2::from_shape((ckk, np), &mut dcols[..ckk * np]).unwrap();
                    general_mat_mul(1.0, &wmat.t(), &gview, 0.0, &mut dcv);
                    let dxs = slice_mut(dx);
                    col2im_band(
                        &dcols[..ckk * np],
                        ci,
                        h,
                        wd,
                        k,
                        y0,
                        rows,
                        &mut dxs[s * ci * hw..(s + 1) * ci * hw],
                    );
                }
            }
            y0 += rows;
        }
    }
    let dw = dw.into_shape_with_order((co, ci, k, k)).unwrap();
    (dx, dw, db)
}

/// 2×2, stride-2 transposed convolution. `w` is `Ci×Co×2×2`, `b` is `1×Co×1×1`.
pub fn conv_transpose2x2(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let (n, ci, h, wd) = dims(x);
    let (wci, co, _, _) = dims(w);
    assert_eq!(ci, wci, "transpose conv channel mismatch");
    let hw = h * wd;
    let (oh, ow) = (2 * h, 2 * wd);
    let wmat = ArrayView2::from_shape((ci, co * 4), slice(w)).unwrap();
    let bias = slice(b);
    let mut y = Array4::<f32>::zeros((n, co, oh, ow));
    let mut tmp = Array2::<f32>::zeros((co * 4, hw));
    let xs = slice(x);
    let ys = slice_mut(&mut y);
    for s in 0..n {
        let xv = ArrayView2::from_shape((ci, hw), &xs[s * ci * hw..(s + 1) * ci * hw]).unwrap();
        general_mat_mul(1.0, &wmat.t(), &xv, 0.0, &mut tmp);
        let t = tmp.as_slice().unwrap();
        let out = &mut ys[s * co * oh * ow..(s + 1) * co * oh * ow];
        for c in 0..co {
            for a in 0..2 {
                for bb in 0..2 {
                    let src = &t[(c * 4 + a * 2 + bb) * hw..(c * 4 + a * 2 + bb + 1) * hw];
                    for yy in 0..h {
                        let orow = &mut out[c * oh * ow + (2 * yy + a) * ow..][..ow];
                        let srow = &src[yy * wd..(yy + 1) * wd];
                        for xx in 0..wd {
                            orow[2 * xx + bb] = srow[xx] + bias[c];
                        }
                    }
                }
            }
        }
    }
    y
}

pub fn conv_transpose2x2_backward(
    x: &Tensor,
    w: &Tensor,
    dy: &Tensor,
    need_dx: bool,
) -> (Option<Tensor>, Tensor, Tensor) {
    let (n, ci, h, wd) = dims(x);
    let (_, co, _, _) = dims(w);
    let hw = h * wd;
    let (oh, ow) = (2 * h, 2 * wd);
    let wmat = ArrayView2::from_shape((ci, co * 4), slice(w)).unwrap();
    let mut dw = Array2::<f32>::zeros((ci, co * 4));
    let mut db = Array4::<f32>::zeros((1, co, 1, 1));
    let mut dx = need_dx.then(|| Array4::<f32>::zeros((n, ci, h, wd)));
    let mut gathered = Array2::<f32>::zeros((co * 4, hw));
    let xs = slice(x);
    let dys = slice(dy);
    for s in 0..n {
        let g = &dys[s * co * oh * ow..(s + 1) * co * oh * ow];
        {
            let gs = gathered.as_slice_mut().unwrap();
            let dbs = slice_mut(&mut db);
            for c in 0..co {
                dbs[c] += g[c * oh * ow..(c + 1) * oh * ow].iter().sum::<f32>();
                for a in 0..2 {
                    for bb in 0..2 {
                        let dst = &mut gs[(c * 4 + a * 2 + bb) * hw..][..hw];
                        for yy in 0..h {
                            let grow = &g[c * oh * ow + (2 * yy + a) * ow..][..ow];
                            for xx in 0..wd {
                                dst[yy * wd + xx] = grow[2 * xx + bb];
                            }
                        }
                    }
                }
            }
        }
        let xv = ArrayView2::from_shape((ci, hw), &xs[s * ci * hw..(s + 1) * ci * hw]).unwrap();
        general_mat_mul(1.0, &xv, &gathered.t(), 1.0, &mut dw);
        if let Some(dx) = dx.as_mut() {
            let dxs = slice_mut(dx);
            let mut dxv =
                ArrayViewMut2::from_shape((ci, hw), &mut dxs[s * ci * hw..(s + 1) * ci * hw])
                    .unwrap();
            general_mat_mul(1.0, &wmat, &gathered, 0.0, &mut dxv);
        }
    }
    let dw = dw.into_shape_with_order((ci, co, 2, 2)).unwrap();
    (dx, dw, db)
}

/// 2×2 max pooling with stride 2. Returns the pooled tensor and, for every output
/// element, the flat index of the winning input element.
pub fn max_pool2x2(x: &Tensor) -> (Tensor, Vec<u32>) {
    let (n, c, h, wd) = dims(x);
    let (oh, ow) = (h / 2, wd / 2);
    let mut y = Array4::<f32>::zeros((n, c, oh, ow));
    let mut arg = vec![0u32; n * c * oh * ow];
    let xs = slice(x);
    let ys = slice_mut(&mut y);
    for p in 0..n * c {
        let base = p * h * wd;
        for yy in 0..oh {
            for xx in 0..ow {
                let mut best = base + (2 * yy) * wd + 2 * xx;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = base + (2 * yy + dy) * wd + 2 * xx + dx;
                    if xs[i] > xs[best] {
                        best = i;
                    }
                }
                let o = p * oh * ow + yy * ow + xx;
                ys[o] = xs[best];
                arg[o] = best as u32;
            }
        }
    }
    (y, arg)
}

pub fn max_pool2x2_backward(input_shape: &[usize], arg: &[u32], dy: &Tensor) -> Tensor {
    let mut dx = Array4::<f32>::zeros((input_shape[0], input_shape[1], input_shape[2], input_shape[3]));
    let dxs = slice_mut(&mut dx);
    for (g, &i) in slice(dy).iter().zip(arg) {
        dxs[i as usize] += g;
    }
    dx
}

/// Concatenate along the channel axis.
pub fn concat_channels(parts: &[&Tensor]) -> Tensor {
    let (n, _, h, wd) = dims(parts[0]);
    let total: usize = parts.iter().map(|p| p.shape()[1]).sum();
    let hw = h * wd;
    let mut y = Array4::<f32>::zeros((n, total, h, wd));
    let ys = slice_mut(&mut y);
    for s in 0..n {
        let mut off = s * total * hw;
        for p in parts {
            let pc = p.shape()[1];
            let src = &slice(p)[s * pc * hw..(s + 1) * pc * hw];
            ys[off..off + pc * hw].copy_from_slice(src);
            off += pc * hw;
        }
    }
    y
}

/// Slice channels `c0..c0+count` out of `t`.
pub fn channel_slice(t: &Tensor, c0: usize, count: usize) -> Tensor {
    let (n, c, h, wd) = dims(t);
    let hw = h * wd;
    let mut y = Array4::<f32>::zeros((n, count, h, wd));
    let ys = slice_mut(&mut y);
    let ts = slice(t);
    for s in 0..n {
        ys[s * count * hw..(s + 1) * count * hw]
            .copy_from_slice(&ts[(s * c + c0) * hw..(s * c + c0 + count) * hw]);
    }
    y
}

pub fn relu(x: &Tensor) -> Tensor {
    x.mapv(|v| v.max(0.0))
}

pub fn relu_backward(y: &Tensor, dy: &Tensor) -> Tensor {
    let mut dx = dy.clone();
    ndarray::Zip::from(&mut dx).and(y).for_each(|d, &o| {
        if o <= 0.0 {
            *d = 0.0;
        }
    });
    dx
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.mapv(|v| 1.0 / (1.0 + (-v).exp()))
}

pub fn sigmoid_backward(y: &Tensor, dy: &Tensor) -> Tensor {
    let mut dx = dy.clone();
    ndarray::Zip::from(&mut dx)
        .and(y)
        .for_each(|d, &o| *d *= o * (1.0 - o));
    dx
}
