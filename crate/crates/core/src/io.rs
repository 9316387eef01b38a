//! Image and sidecar persistence.
//!
//! Protected images are written as 8-bit RGB PNG. The exact floating-point
//! perturbation goes to a `.npy` sidecar of shape `[h, w, 3]`.

use std::path::Path;

use image::{ImageFormat, RgbImage};
use ndarray::Array3;
use ndarray_npy::{read_npy, write_npy};

use crate::error::{Error, Result};
use crate::types::{ImageTensor, Perturbation, CHANNELS};

/// Rounds to the nearest 8-bit level.
pub fn to_rgb8(image: &ImageTensor) -> RgbImage {
    let bytes = image.data().iter().map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8).collect();
    RgbImage::from_raw(image.width() as u32, image.height() as u32, bytes).expect("buffer length matches dimensions")
}

pub fn from_rgb8(image: &RgbImage) -> ImageTensor {
    let data = image.as_raw().iter().map(|&b| b as f64 / 255.0).collect();
    ImageTensor::new(image.height() as usize, image.width() as usize, data).expect("8-bit values are finite and in range")
}

/// The image as it will be after an 8-bit round trip.
pub fn quantize_8bit(image: &ImageTensor) -> ImageTensor {
    from_rgb8(&to_rgb8(image))
}

/// Reads any image format the decoder understands, converted to RGB.
pub fn read_image(path: &Path) -> Result<ImageTensor> {
    let img = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Codec { path: path.display().to_string(), message: other.to_string() },
    })?;
    Ok(from_rgb8(&img.to_rgb8()))
}

pub fn write_png(path: &Path, image: &ImageTensor) -> Result<()> {
    to_rgb8(image).save_with_format(path, ImageFormat::Png).map_err(|e| Error::Codec { path: path.display().to_string(), message: e.to_string() })
}

pub fn write_perturbation(path: &Path, perturbation: &Perturbation) -> Result<()> {
    let arr = Array3::from_shape_vec(perturbation.shape(), perturbation.data().to_vec()).expect("shape matches data");
    write_npy(path, &arr).map_err(|e| Error::Codec { path: path.display().to_string(), message: e.to_string() })
}

pub fn read_perturbation(path: &Path) -> Result<Perturbation> {
    let arr: Array3<f64> = read_npy(path).map_err(|e| Error::Codec { path: path.display().to_string(), message: e.to_string() })?;
    let (h, w, c) = arr.dim();
    if c != CHANNELS {
        return Err(Error::ShapeMismatch { expected: vec![h, w, CHANNELS], actual: vec![h, w, c] });
    }
    Perturbation::new(h, w, arr.into_iter().collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_is_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.png");
        let img = ImageTensor::random(7, 5, 1);
        write_png(&path, &img).unwrap();
        let back = read_image(&path).unwrap();
        assert_eq!(back, quantize_8bit(&img));
        assert!(back.linf_distance(&img).unwrap() <= 0.5 / 255.0 + 1e-12);
    }

    #[test]
    fn perturbation_sidecar_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.npy");
        let data: Vec<f64> = (0..4 * 3 * 3).map(|i| (i as f64 * 0.37).sin() * 0.05).collect();
        let p = Perturbation::new(4, 3, data).unwrap();
        write_perturbation(&path, &p).unwrap();
        let back = read_perturbation(&path).unwrap();
        assert_eq!(back.shape(), p.shape());
        assert!(back.data().iter().zip(p.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn unreadable_files_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("none.png");
        assert!(matches!(read_image(&missing), Err(Error::Io { .. })));
        let junk = dir.path().join("junk.png");
        std::fs::write(&junk, b"not an image").unwrap();
        assert!(matches!(read_image(&junk), Err(Error::Codec { .. })));
    }
}
