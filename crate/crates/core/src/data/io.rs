//! Lossless 8-bit PNG images and conversions between pixel values in
//! `[0, 1]` and the model's sample space in `[-1, 1]`.

use std::path::Path;

use image::{GrayImage, ImageFormat, Luma, Rgb, RgbImage};
use ndarray::{Array2, Array3};

use crate::error::{Error, Result};

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// `[3, h, w]` in `[0, 1]` to an RGB image.
pub fn to_rgb_image(pixels: &Array3<f64>) -> RgbImage {
    let (_, h, w) = pixels.dim();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        Rgb([to_u8(pixels[[0, y, x]]), to_u8(pixels[[1, y, x]]), to_u8(pixels[[2, y, x]])])
    })
}

pub fn from_rgb_image(img: &RgbImage) -> Array3<f64> {
    let (w, h) = img.dimensions();
    Array3::from_shape_fn((3, h as usize, w as usize), |(c, y, x)| {
        f64::from(img.get_pixel(x as u32, y as u32)[c]) / 255.0
    })
}

pub fn to_gray_image(pixels: &Array2<f64>) -> GrayImage {
    let (h, w) = pixels.dim();
    GrayImage::from_fn(w as u32, h as u32, |x, y| Luma([to_u8(pixels[[y as usize, x as usize]])]))
}

pub fn from_gray_image(img: &GrayImage) -> Array2<f64> {
    let (w, h) = img.dimensions();
    Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
        f64::from(img.get_pixel(x as u32, y as u32)[0]) / 255.0
    })
}

fn image_error(path: &Path, cause: image::ImageError) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        cause,
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(())
}

pub fn save_rgb(path: &Path, pixels: &Array3<f64>) -> Result<()> {
    ensure_parent(path)?;
    to_rgb_image(pixels)
        .save_with_format(path, ImageFormat::Png)
        .map_err(|e| image_error(path, e))
}

pub fn load_rgb(path: &Path) -> Result<Array3<f64>> {
    let img = image::open(path).map_err(|e| image_error(path, e))?;
    Ok(from_rgb_image(&img.to_rgb8()))
}

pub fn save_gray(path: &Path, pixels: &Array2<f64>) -> Result<()> {
    ensure_parent(path)?;
    to_gray_image(pixels)
        .save_with_format(path, ImageFormat::Png)
        .map_err(|e| image_error(path, e))
}

pub fn load_gray(path: &Path) -> Result<Array2<f64>> {
    let img = image::open(path).map_err(|e| image_error(path, e))?;
    Ok(from_gray_image(&img.to_luma8()))
}

/// PNG bytes of an RGB image in `[0, 1]`.
pub fn encode_png(pixels: &Array3<f64>) -> Result<Vec<u8>> {
    let mut out = std::io::Cursor::new(Vec::new());
    to_rgb_image(pixels)
        .write_to(&mut out, ImageFormat::Png)
        .map_err(|e| image_error(Path::new("<memory>"), e))?;
    Ok(out.into_inner())
}

pub fn decode_png(bytes: &[u8]) -> Result<Array3<f64>> {
    let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)
        .map_err(|e| image_error(Path::new("<memory>"), e))?;
    Ok(from_rgb_image(&img.to_rgb8()))
}

pub fn pixels_to_sample(pixels: &Array3<f64>) -> Array3<f64> {
    pixels.mapv(|v| 2.0 * v - 1.0)
}

pub fn sample_to_pixels(sample: &Array3<f64>) -> Array3<f64> {
    sample.mapv(|v| ((v + 1.0) / 2.0).clamp(0.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_is_lossless_on_8bit_values() {
        let px = Array3::from_shape_fn((3, 5, 7), |(c, y, x)| ((c * 35 + y * 7 + x) % 256) as f64 / 255.0);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("nested/img.png");
        save_rgb(&p, &px).unwrap();
        assert_eq!(load_rgb(&p).unwrap(), px);
        assert_eq!(decode_png(&encode_png(&px).unwrap()).unwrap(), px);

        let g = Array2::from_shape_fn((4, 6), |(y, x)| (y * 6 + x) as f64 / 255.0);
        let gp = dir.path().join("g.png");
        save_gray(&gp, &g).unwrap();
        assert_eq!(load_gray(&gp).unwrap(), g);
    }

    #[test]
    fn sample_space_conversion() {
        let px = Array3::from_shape_fn((3, 2, 2), |(c, y, x)| (c + y + x) as f64 / 5.0);
        let back = sample_to_pixels(&pixels_to_sample(&px));
        assert!((&back - &px).iter().all(|d| d.abs() < 1e-15));
    }

    #[test]
    fn missing_file_names_path() {
        let err = load_rgb(Path::new("/nonexistent/x.png")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/x.png"));
    }
}
