//! 8-bit PNG reading and writing for images and masks.
//!
//! Intensities are quantized as `round(255 v)`, so a save/load round trip
//! moves every value by at most half a quantization step (`1/510`).

use std::path::Path;

use image::{GrayImage, RgbImage};
use maskvae_core::{FaceMask, ImageTensor};

use crate::error::{Error, Result};

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn open(path: &Path) -> Result<image::DynamicImage> {
    image::open(path).map_err(|source| match source {
        image::ImageError::IoError(e) => Error::Io { path: path.to_owned(), source: e },
        source => Error::Image { path: path.to_owned(), source },
    })
}

fn save_err(path: &Path) -> impl FnOnce(image::ImageError) -> Error + '_ {
    move |source| Error::Image { path: path.to_owned(), source }
}

/// Loads an RGB image; grayscale files are expanded to three channels.
pub fn load_image(path: &Path) -> Result<ImageTensor<f64>> {
    let rgb = open(path)?.into_rgb8();
    let (w, h) = rgb.dimensions();
    let data = rgb.into_raw().into_iter().map(|b| b as f64 / 255.0).collect();
    Ok(ImageTensor::new(h as usize, w as usize, 3, data)?)
}

/// Loads a grayscale image keeping one channel.
pub fn load_gray(path: &Path) -> Result<ImageTensor<f64>> {
    let gray = open(path)?.into_luma8();
    let (w, h) = gray.dimensions();
    let data = gray.into_raw().into_iter().map(|b| b as f64 / 255.0).collect();
    Ok(ImageTensor::new(h as usize, w as usize, 1, data)?)
}

/// Loads a mask, treating luma ≥ 128 as face.
pub fn load_mask(path: &Path) -> Result<FaceMask<f64>> {
    let gray = open(path)?.into_luma8();
    let (w, h) = gray.dimensions();
    Ok(FaceMask::from_fn(h as usize, w as usize, |r, c| gray.get_pixel(c as u32, r as u32)[0] >= 128))
}

pub fn save_image(path: &Path, img: &ImageTensor<f64>) -> Result<()> {
    let (h, w, ch) = img.shape();
    let bytes: Vec<u8> = img.data().iter().map(|&v| quantize(v)).collect();
    match ch {
        3 => RgbImage::from_raw(w as u32, h as u32, bytes).expect("buffer sized from the tensor").save(path),
        _ => GrayImage::from_raw(w as u32, h as u32, bytes).expect("buffer sized from the tensor").save(path),
    }
    .map_err(save_err(path))
}

/// Writes a mask as 0/255 grayscale.
pub fn save_mask(path: &Path, mask: &FaceMask<f64>) -> Result<()> {
    let bytes = mask.data().iter().map(|&v| if v == 1.0 { 255 } else { 0 }).collect();
    GrayImage::from_raw(mask.width() as u32, mask.height() as u32, bytes)
        .expect("buffer sized from the mask")
        .save(path)
        .map_err(save_err(path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn round_trip_within_half_a_step(h in 1usize..9, w in 1usize..9, seed in any::<u64>()) {
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("a.png");
            let mut s = seed;
            let img = ImageTensor::from_fn(h, w, 3, |_, _, _| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                (s >> 11) as f64 / (1u64 << 53) as f64
            });
            save_image(&path, &img).unwrap();
            let back = load_image(&path).unwrap();
            prop_assert_eq!(back.shape(), img.shape());
            for (a, b) in img.data().iter().zip(back.data()) {
                prop_assert!((a - b).abs() <= 1.0 / 510.0 + 1e-12);
            }
        }
    }

    #[test]
    fn masks_round_trip_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.png");
        let mask = FaceMask::from_fn(7, 5, |r, c| (r * 5 + c) % 3 == 0);
        save_mask(&path, &mask).unwrap();
        assert_eq!(load_mask(&path).unwrap(), mask);
    }

    #[test]
    fn grayscale_files_load_as_rgb() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.png");
        let g = ImageTensor::from_fn(3, 4, 1, |r, c, _| (r * 4 + c) as f64 / 11.0);
        save_image(&path, &g).unwrap();
        let rgb = load_image(&path).unwrap();
        assert_eq!(rgb.shape(), (3, 4, 3));
        assert_eq!(rgb.get(2, 3, 0), rgb.get(2, 3, 2));
        assert_eq!(load_gray(&path).unwrap().shape(), (3, 4, 1));
    }

    #[test]
    fn missing_file_is_an_io_error() {
        let err = load_image(Path::new("/nonexistent/x.png")).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }
}
