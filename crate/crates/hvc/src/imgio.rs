//! Image and mask file I/O.
//!
//! Frames are 8-bit RGB PNG or PPM; masks are 8-bit single-channel PNG or
//! PGM where the pixel value is the class id (0 = background). All writes
//! go through a temp file plus rename so partially written artifacts never
//! appear under the final name.

use std::io::Write;
use std::path::Path;

use image::{DynamicImage, ImageFormat};
use ndarray::{Array2, Array3};

use crate::error::{Error, Result};
use crate::geometry::ImageBuffer;

/// Writes `bytes` to `path` atomically (temp file + rename).
pub fn write_bytes_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp_path = std::path::PathBuf::from(tmp);
    {
        let mut f = std::fs::File::create(&tmp_path)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp_path, path)?;
    Ok(())
}

pub fn write_string_atomic(path: &Path, text: &str) -> Result<()> {
    write_bytes_atomic(path, text.as_bytes())
}

fn format_for(path: &Path) -> Result<ImageFormat> {
    match path
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase())
        .as_deref()
    {
        Some("png") => Ok(ImageFormat::Png),
        Some("ppm") | Some("pgm") | Some("pnm") => Ok(ImageFormat::Pnm),
        other => Err(Error::Config(format!(
            "unsupported image extension {other:?} for '{}'",
            path.display()
        ))),
    }
}

/// Loads an 8-bit RGB image into `[0, 1]` reals.
pub fn load_image(path: &Path) -> Result<ImageBuffer> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    let mut data = Array3::zeros((3, h as usize, w as usize));
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            data[[c, y as usize, x as usize]] = px.0[c] as f64 / 255.0;
        }
    }
    ImageBuffer::new(data)
}

pub fn save_image(path: &Path, img: &ImageBuffer) -> Result<()> {
    let (h, w) = (img.height(), img.width());
    let mut out = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = [
                (img.data()[[0, y, x]] * 255.0).round().clamp(0.0, 255.0) as u8,
                (img.data()[[1, y, x]] * 255.0).round().clamp(0.0, 255.0) as u8,
                (img.data()[[2, y, x]] * 255.0).round().clamp(0.0, 255.0) as u8,
            ];
            out.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    let mut buf = std::io::Cursor::new(Vec::new());
    DynamicImage::ImageRgb8(out).write_to(&mut buf, format_for(path)?)?;
    write_bytes_atomic(path, buf.get_ref())
}

/// Loads a class-id mask. The file must be single-channel; an RGB file is
/// accepted only when all three channels agree.
pub fn load_mask(path: &Path) -> Result<Array2<u8>> {
    let img = image::open(path)?;
    match img {
        DynamicImage::ImageLuma8(g) => {
            let (w, h) = g.dimensions();
            let mut mask = Array2::zeros((h as usize, w as usize));
            for (x, y, px) in g.enumerate_pixels() {
                mask[[y as usize, x as usize]] = px.0[0];
            }
            Ok(mask)
        }
        DynamicImage::ImageRgb8(rgb) => {
            let (w, h) = rgb.dimensions();
            let mut mask = Array2::zeros((h as usize, w as usize));
            for (x, y, px) in rgb.enumerate_pixels() {
                let [r, g, b] = px.0;
                if r != g || g != b {
                    return Err(Error::Config(format!(
                        "mask '{}' is not single-channel (pixel {x},{y} = {r},{g},{b})",
                        path.display()
                    )));
                }
                mask[[y as usize, x as usize]] = r;
            }
            Ok(mask)
        }
        other => Err(Error::Config(format!(
            "mask '{}' has unsupported color type {:?}",
            path.display(),
            other.color()
        ))),
    }
}

pub fn save_mask(path: &Path, mask: &Array2<u8>) -> Result<()> {
    let (h, w) = mask.dim();
    let mut out = image::GrayImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            out.put_pixel(x as u32, y as u32, image::Luma([mask[[y, x]]]));
        }
    }
    let mut buf = std::io::Cursor::new(Vec::new());
    DynamicImage::ImageLuma8(out).write_to(&mut buf, format_for(path)?)?;
    write_bytes_atomic(path, buf.get_ref())
}

/// Image files in a directory, sorted by file name.
pub fn list_images(dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| Error::Config(format!("cannot read '{}': {e}", dir.display())))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()),
                Some("png") | Some("ppm") | Some("pgm") | Some("pnm")
            )
        })
        .collect();
    files.sort();
    Ok(files)
}
