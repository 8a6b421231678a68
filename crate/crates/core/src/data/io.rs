//! Image files: RGB patches, 16-bit label maps and 16-bit grayscale maps.

use std::path::Path;

use image::{DynamicImage, ImageBuffer, Luma, Rgb};
use ndarray::{Array2, Array3};

use crate::error::{Error, Result};
use crate::types::{LabelMap, RgbImage};

pub const IMAGE_EXTENSIONS: [&str; 3] = ["png", "tif", "tiff"];

fn open(path: &Path) -> Result<DynamicImage> {
    image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

fn save<P, C>(path: &Path, buf: &ImageBuffer<P, C>) -> Result<()>
where
    P: image::Pixel + image::PixelWithColorType,
    [P::Subpixel]: image::EncodableLayout,
    C: std::ops::Deref<Target = [P::Subpixel]>,
{
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    buf.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_rgb(path: &Path) -> Result<RgbImage> {
    let img = open(path)?.into_rgb8();
    let (w, h) = img.dimensions();
    Ok(Array3::from_shape_fn((h as usize, w as usize, 3), |(y, x, c)| {
        img.get_pixel(x as u32, y as u32)[c] as f32
    }))
}

pub fn write_rgb(path: &Path, image: &RgbImage) -> Result<()> {
    let (h, w, _) = image.dim();
    let buf = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let px = |c| image[[y as usize, x as usize, c]].round().clamp(0.0, 255.0) as u8;
        Rgb([px(0), px(1), px(2)])
    });
    save(path, &buf)
}

/// Reads a label-encoded mask (8- or 16-bit single channel).
pub fn read_labels(path: &Path) -> Result<LabelMap> {
    // 8-bit masks are read as-is; converting them to 16 bits would rescale the labels.
    let img = open(path)?;
    match img {
        DynamicImage::ImageLuma8(_) | DynamicImage::ImageLumaA8(_) => {
            let gray = img.into_luma8();
            let (w, h) = gray.dimensions();
            Ok(Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
                gray.get_pixel(x as u32, y as u32)[0] as u32
            }))
        }
        DynamicImage::ImageLuma16(_) | DynamicImage::ImageLumaA16(_) => {
            let gray = img.into_luma16();
            let (w, h) = gray.dimensions();
            Ok(Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
                gray.get_pixel(x as u32, y as u32)[0] as u32
            }))
        }
        other => Err(Error::Integrity(format!(
            "{}: mask must be a single-channel label image, found {:?}",
            path.display(),
            other.color()
        ))),
    }
}

pub fn write_labels(path: &Path, labels: &LabelMap) -> Result<()> {
    if let Some(&max) = labels.iter().max() {
        if max > u16::MAX as u32 {
            return Err(Error::invalid(format!(
                "label {max} does not fit a 16-bit label image"
            )));
        }
    }
    let (h, w) = labels.dim();
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_fn(w as u32, h as u32, |x, y| Luma([labels[[y as usize, x as usize]] as u16]));
    save(path, &buf)
}

/// Writes a `[0, 1]` map as 16-bit grayscale.
pub fn write_gray16(path: &Path, map: &Array2<f32>) -> Result<()> {
    let (h, w) = map.dim();
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let v = map[[y as usize, x as usize]].clamp(0.0, 1.0);
        Luma([(v * u16::MAX as f32).round() as u16])
    });
    save(path, &buf)
}

pub fn read_gray16(path: &Path) -> Result<Array2<f32>> {
    let img = open(path)?.into_luma16();
    let (w, h) = img.dimensions();
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
        img.get_pixel(x as u32, y as u32)[0] as f32 / u16::MAX as f32
    }))
}

/// Files in `dir` with a recognised image extension, sorted by name.
pub fn list_images(dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ok = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| IMAGE_EXTENSIONS.iter().any(|k| k.eq_ignore_ascii_case(e)));
        if ok && path.is_file() {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

pub fn file_stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}
