//! Intensity images in `[0, 1]`, stored channel-last (H x W x C).

use std::path::Path;

use ndarray::{Array2, Array3};

use crate::error::{Error, Result};

/// An H x W x C intensity image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub data: Array3<f64>,
}

impl Image {
    pub fn new(data: Array3<f64>) -> Self {
        Image { data }
    }

    /// All-zero grayscale image.
    pub fn zeros(h: usize, w: usize) -> Self {
        Image {
            data: Array3::zeros((h, w, 1)),
        }
    }

    pub fn from_gray(plane: Array2<f64>) -> Self {
        let (h, w) = plane.dim();
        Image {
            data: plane.into_shape_with_order((h, w, 1)).expect("reshape"),
        }
    }

    /// First channel as a 2-D view, cloned.
    pub fn gray_plane(&self) -> Array2<f64> {
        self.data.index_axis(ndarray::Axis(2), 0).to_owned()
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

    pub fn same_shape(&self, other: &Image) -> bool {
        self.data.dim() == other.data.dim()
    }

    /// Clamp all intensities into `[0, 1]`.
    pub fn clamped(&self) -> Image {
        Image {
            data: self.data.mapv(|v| v.clamp(0.0, 1.0)),
        }
    }

    /// Load a PNG as grayscale, normalizing to `[0, 1]`.
    pub fn load_png(path: &Path) -> Result<Image> {
        let img = image::open(path)
            .map_err(|e| Error::Format {
                path: path.display().to_string(),
                reason: e.to_string(),
            })?
            .into_luma8();
        let (w, h) = img.dimensions();
        let mut data = Array3::zeros((h as usize, w as usize, 1));
        for (x, y, p) in img.enumerate_pixels() {
            data[[y as usize, x as usize, 0]] = p.0[0] as f64 / 255.0;
        }
        Ok(Image { data })
    }

    /// Write as an 8-bit grayscale PNG (first channel).
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let (h, w, _) = self.data.dim();
        let mut img = image::GrayImage::new(w as u32, h as u32);
        for y in 0..h {
            for x in 0..w {
                let v = (self.data[[y, x, 0]].clamp(0.0, 1.0) * 255.0).round() as u8;
                img.put_pixel(x as u32, y as u32, image::Luma([v]));
            }
        }
        img.save(path).map_err(|e| Error::Format {
            path: path.display().to_string(),
            reason: e.to_string(),
        })
    }
}
