//! Float RGB images and binary masks, plus 8-bit PNG conversion.
//!
//! Images are stored row-major, channel-interleaved (`H×W×3`), with values in
//! `[0, 1]`. PNG conversion maps `v -> round(v * 255)` on write and
//! `b -> b / 255` on read.

use std::path::Path;

use crate::error::{Error, Result};

/// Luma weights used everywhere a scalar intensity is needed.
pub const LUMA_WEIGHTS: [f64; 3] = [0.299, 0.587, 0.114];

#[derive(Debug, Clone, PartialEq)]
pub struct ImageRGB {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl ImageRGB {
    /// A `width × height` image filled with `color`.
    pub fn filled(width: usize, height: usize, color: [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&color);
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self::filled(width, height, [0.0; 3])
    }

    /// Wraps interleaved RGB data. Values are validated to be finite and in `[0, 1]`.
    pub fn from_raw(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::DimensionMismatch {
                what: "image data",
                expected: width * height * 3,
                got: data.len(),
            });
        }
        if let Some(v) = data.iter().find(|v| !(v.is_finite() && (0.0..=1.0).contains(*v))) {
            return Err(Error::InvalidInput(format!(
                "image value {v} outside [0, 1]"
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    /// Wraps interleaved RGB data, clamping every value into `[0, 1]`
    /// (non-finite values become 0).
    pub fn from_raw_clamped(width: usize, height: usize, mut data: Vec<f64>) -> Result<Self> {
        for v in &mut data {
            *v = if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 };
        }
        Self::from_raw(width, height, data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Sets a pixel, clamping into `[0, 1]`.
    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f64; 3]) {
        let i = (y * self.width + x) * 3;
        for c in 0..3 {
            self.data[i + c] = rgb[c].clamp(0.0, 1.0);
        }
    }

    pub fn same_dims(&self, other: &ImageRGB) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Per-pixel luma `0.299 R + 0.587 G + 0.114 B`.
    pub fn luma(&self) -> Vec<f64> {
        self.data
            .chunks_exact(3)
            .map(|p| LUMA_WEIGHTS[0] * p[0] + LUMA_WEIGHTS[1] * p[1] + LUMA_WEIGHTS[2] * p[2])
            .collect()
    }

    /// Element-wise product with a binary mask: pixels outside the mask become 0.
    pub fn masked(&self, mask: &FaceMask) -> Result<ImageRGB> {
        self.check_mask(mask)?;
        let mut out = self.clone();
        for (p, &m) in out.data.chunks_exact_mut(3).zip(mask.data()) {
            if m == 0 {
                p.fill(0.0);
            }
        }
        Ok(out)
    }

    pub fn flip_horizontal(&self) -> ImageRGB {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                let src = (y * self.width + (self.width - 1 - x)) * 3;
                let dst = (y * self.width + x) * 3;
                out.data[dst..dst + 3].copy_from_slice(&self.data[src..src + 3]);
            }
        }
        out
    }

    /// Shifts content by `(dx, dy)` with edge replication, keeping dimensions.
    /// Output pixel `(x, y)` reads input `(x + dx, y + dy)` clamped to the border.
    pub fn shifted(&self, dx: isize, dy: isize) -> ImageRGB {
        let mut out = self.clone();
        for y in 0..self.height {
            let sy = clamp_index(y as isize + dy, self.height);
            for x in 0..self.width {
                let sx = clamp_index(x as isize + dx, self.width);
                let src = (sy * self.width + sx) * 3;
                let dst = (y * self.width + x) * 3;
                out.data[dst..dst + 3].copy_from_slice(&self.data[src..src + 3]);
            }
        }
        out
    }

    /// Mean absolute difference over all pixels and channels.
    pub fn mean_abs_diff(&self, other: &ImageRGB) -> Result<f64> {
        self.check_dims(other)?;
        let sum: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .sum();
        Ok(sum / self.data.len().max(1) as f64)
    }

    /// Mean absolute difference restricted to pixels where `region` is set.
    pub fn region_abs_diff(&self, other: &ImageRGB, region: &FaceMask) -> Result<f64> {
        self.check_dims(other)?;
        self.check_mask(region)?;
        let mut sum = 0.0;
        let mut count = 0usize;
        for ((a, b), &m) in self
            .data
            .chunks_exact(3)
            .zip(other.data.chunks_exact(3))
            .zip(region.data())
        {
            if m != 0 {
                sum += (a[0] - b[0]).abs() + (a[1] - b[1]).abs() + (a[2] - b[2]).abs();
                count += 3;
            }
        }
        Ok(if count == 0 { 0.0 } else { sum / count as f64 })
    }

    pub(crate) fn check_dims(&self, other: &ImageRGB) -> Result<()> {
        if !self.same_dims(other) {
            return Err(Error::InvalidInput(format!(
                "image dimensions differ: {}x{} vs {}x{}",
                self.width, self.height, other.width, other.height
            )));
        }
        Ok(())
    }

    pub(crate) fn check_mask(&self, mask: &FaceMask) -> Result<()> {
        if mask.width() != self.width || mask.height() != self.height {
            return Err(Error::InvalidInput(format!(
                "mask dimensions {}x{} differ from image {}x{}",
                mask.width(),
                mask.height(),
                self.width,
                self.height
            )));
        }
        Ok(())
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data.iter().map(|&v| to_u8(v)).collect()
    }

    pub fn from_rgb8(width: usize, height: usize, bytes: &[u8]) -> Result<Self> {
        let data = bytes.iter().map(|&b| b as f64 / 255.0).collect();
        Self::from_raw(width, height, data)
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        image::save_buffer(
            path,
            &self.to_rgb8(),
            self.width as u32,
            self.height as u32,
            image::ExtendedColorType::Rgb8,
        )
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let img = open_image(path)?.to_rgb8();
        let (w, h) = img.dimensions();
        Self::from_rgb8(w as usize, h as usize, img.as_raw())
    }
}

/// Binary `{0, 1}` map, same layout as [`ImageRGB`] without channels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FaceMask {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl FaceMask {
    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0; width * height],
        }
    }

    /// Builds a mask from arbitrary bytes; any nonzero byte becomes 1.
    pub fn from_raw(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::DimensionMismatch {
                what: "mask data",
                expected: width * height,
                got: data.len(),
            });
        }
        Ok(Self {
            width,
            height,
            data: data.into_iter().map(|v| u8::from(v != 0)).collect(),
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x] != 0
    }

    pub fn set(&mut self, x: usize, y: usize, on: bool) {
        self.data[y * self.width + x] = u8::from(on);
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    /// Number of pixels set in both masks.
    pub fn overlap(&self, other: &FaceMask) -> usize {
        self.data
            .iter()
            .zip(&other.data)
            .filter(|(a, b)| **a != 0 && **b != 0)
            .count()
    }

    pub fn flip_horizontal(&self) -> FaceMask {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                out.data[y * self.width + x] = self.data[y * self.width + (self.width - 1 - x)];
            }
        }
        out
    }

    /// Same edge-replicating shift as [`ImageRGB::shifted`].
    pub fn shifted(&self, dx: isize, dy: isize) -> FaceMask {
        let mut out = self.clone();
        for y in 0..self.height {
            let sy = clamp_index(y as isize + dy, self.height);
            for x in 0..self.width {
                let sx = clamp_index(x as isize + dx, self.width);
                out.data[y * self.width + x] = self.data[sy * self.width + sx];
            }
        }
        out
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes: Vec<u8> = self.data.iter().map(|&v| if v != 0 { 255 } else { 0 }).collect();
        image::save_buffer(
            path,
            &bytes,
            self.width as u32,
            self.height as u32,
            image::ExtendedColorType::L8,
        )
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
    }

    /// Loads a grayscale PNG; pixels ≥ 128 are set.
    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let img = open_image(path)?.to_luma8();
        let (w, h) = img.dimensions();
        let data = img.as_raw().iter().map(|&b| u8::from(b >= 128)).collect();
        Self::from_raw(w as usize, h as usize, data)
    }
}

/// RGBA float image, used for occluder sprites.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageRGBA {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl ImageRGBA {
    pub fn transparent(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height * 4],
        }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 4] {
        let i = (y * self.width + x) * 4;
        [self.data[i], self.data[i + 1], self.data[i + 2], self.data[i + 3]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgba: [f64; 4]) {
        let i = (y * self.width + x) * 4;
        for c in 0..4 {
            self.data[i + c] = rgba[c].clamp(0.0, 1.0);
        }
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes: Vec<u8> = self.data.iter().map(|&v| to_u8(v)).collect();
        image::save_buffer(
            path,
            &bytes,
            self.width as u32,
            self.height as u32,
            image::ExtendedColorType::Rgba8,
        )
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let img = open_image(path)?.to_rgba8();
        let (w, h) = img.dimensions();
        Ok(Self {
            width: w as usize,
            height: h as usize,
            data: img.as_raw().iter().map(|&b| b as f64 / 255.0).collect(),
        })
    }
}

/// Saves a scalar field as an 8-bit grayscale preview, linearly mapping
/// `[lo, hi]` of the finite values to `[0, 255]`. Non-finite values render black.
pub fn save_scalar_preview(
    path: impl AsRef<Path>,
    width: usize,
    height: usize,
    values: &[f64],
) -> Result<()> {
    let path = path.as_ref();
    let (lo, hi) = values
        .iter()
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let span = if hi > lo { hi - lo } else { 1.0 };
    let bytes: Vec<u8> = values
        .iter()
        .map(|&v| {
            if v.is_finite() {
                to_u8((v - lo) / span)
            } else {
                0
            }
        })
        .collect();
    image::save_buffer(
        path,
        &bytes,
        width as u32,
        height as u32,
        image::ExtendedColorType::L8,
    )
    .map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

fn open_image(path: &Path) -> Result<image::DynamicImage> {
    if !path.exists() {
        return Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "file not found"),
        ));
    }
    image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn clamp_index(i: isize, len: usize) -> usize {
    i.clamp(0, len as isize - 1) as usize
}
