//! Pixel arrays in `[0,1]` — the substrate attacks operate on.

use crate::error::{Error, Result};
use ndarray::Array3;
use std::path::Path;

/// Gradient (or any other per-pixel field) with the same layout as an image.
pub type PixelField = Array3<f64>;

/// An H×W×C image with every element in `[0,1]`.
///
/// Clean and adversarial images share one shape per dataset; all attack math
/// runs on this type in f64.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    data: Array3<f64>,
}

impl ImageTensor {
    /// Wrap an array, validating the `[0,1]` range invariant.
    pub fn new(data: Array3<f64>) -> Result<Self> {
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidArgument(
                "image values must lie in [0,1]".into(),
            ));
        }
        Ok(Self { data })
    }

    /// Wrap an array that is already known to be in range (e.g. output of
    /// [`crate::perturb::clamp_valid`]).
    pub(crate) fn from_clamped(data: Array3<f64>) -> Self {
        debug_assert!(data.iter().all(|v| (0.0..=1.0).contains(v)));
        Self { data }
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self {
            data: Array3::zeros((height, width, channels)),
        }
    }

    /// Constant image with every element equal to `value`.
    pub fn splat(height: usize, width: usize, channels: usize, value: f64) -> Result<Self> {
        Self::new(Array3::from_elem((height, width, channels), value))
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }

    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }

    pub fn channels(&self) -> usize {
        self.data.dim().2
    }

    pub fn dim(&self) -> (usize, usize, usize) {
        self.data.dim()
    }

    pub fn same_shape(&self, other: &ImageTensor) -> bool {
        self.data.dim() == other.data.dim()
    }

    /// Largest absolute per-pixel difference to `other`.
    pub fn max_abs_diff(&self, other: &ImageTensor) -> f64 {
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Quantize to 8-bit with round-to-nearest. Images generated on the
    /// 1/255 grid survive this losslessly.
    pub fn to_rgb8(&self) -> Result<Vec<u8>> {
        if self.channels() != 3 {
            return Err(Error::InvalidArgument(format!(
                "PNG export needs 3 channels, image has {}",
                self.channels()
            )));
        }
        Ok(self.data.iter().map(|&v| (v * 255.0).round() as u8).collect())
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let buf = self.to_rgb8()?;
        image::save_buffer(
            path,
            &buf,
            self.width() as u32,
            self.height() as u32,
            image::ColorType::Rgb8,
        )?;
        Ok(())
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)?.into_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let raw = img.into_raw();
        let data = Array3::from_shape_vec((h, w, 3), raw)
            .expect("rgb8 buffer matches dimensions")
            .mapv(|v| f64::from(v) / 255.0);
        Ok(Self { data })
    }
}

/// Round an in-range value onto the 1/255 grid (the 8-bit artifact grid).
pub fn quantize_u8(v: f64) -> u8 {
    (v * 255.0).round() as u8
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    #[test]
    fn rejects_out_of_range_values() {
        let mut data = Array3::zeros((2, 2, 3));
        data[[0, 0, 0]] = 1.2;
        assert!(ImageTensor::new(data).is_err());
    }

    #[test]
    fn grid_aligned_png_roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.png");
        let data = Array3::from_shape_fn((8, 8, 3), |(h, w, c)| {
            f64::from(((h * 31 + w * 7 + c * 97) % 256) as u8) / 255.0
        });
        let img = ImageTensor::new(data).unwrap();
        img.save_png(&path).unwrap();
        let back = ImageTensor::load_png(&path).unwrap();
        assert_eq!(img.max_abs_diff(&back), 0.0);
    }
}
