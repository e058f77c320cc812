//! Grayscale `f64` raster with values nominally in `[0, 1]`, plus PNG/PGM IO.

use std::path::Path;

use image::{ImageBuffer, Luma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;

#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl Raster {
    pub fn new(width: usize, height: usize, fill: f64) -> Self {
        Self {
            width,
            height,
            data: vec![fill; width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::InvalidParameter(format!(
                "raster data length {} does not match {}x{}",
                data.len(),
                width,
                height
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }

    pub fn row(&self, y: usize) -> &[f64] {
        &self.data[y * self.width..(y + 1) * self.width]
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            0.0
        } else {
            self.sum() / self.data.len() as f64
        }
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Raster {
        Raster {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Bilinear sample at continuous coordinates (pixel centers at `i + 0.5`),
    /// clamping to the edge outside the raster.
    pub fn sample_bilinear(&self, x: f64, y: f64) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        let u = (x - 0.5).clamp(0.0, (self.width - 1) as f64);
        let v = (y - 0.5).clamp(0.0, (self.height - 1) as f64);
        let x0 = u.floor() as usize;
        let y0 = v.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = u - x0 as f64;
        let fy = v - y0 as f64;
        let top = self.get(x0, y0) * (1.0 - fx) + self.get(x1, y0) * fx;
        let bottom = self.get(x0, y1) * (1.0 - fx) + self.get(x1, y1) * fx;
        top * (1.0 - fy) + bottom * fy
    }

    /// Resample the region `bbox` onto an `out_w x out_h` grid (bilinear).
    pub fn crop_resample(&self, bbox: &BBox, out_w: usize, out_h: usize) -> Raster {
        let sx = bbox.width() / out_w as f64;
        let sy = bbox.height() / out_h as f64;
        Raster::from_fn(out_w, out_h, |i, j| {
            self.sample_bilinear(
                bbox.x_min + (i as f64 + 0.5) * sx,
                bbox.y_min + (j as f64 + 0.5) * sy,
            )
        })
    }

    pub fn resize_bilinear(&self, out_w: usize, out_h: usize) -> Raster {
        let full = BBox::new(0.0, 0.0, self.width as f64, self.height as f64);
        self.crop_resample(&full, out_w, out_h)
    }

    pub fn flip_h(&self) -> Raster {
        Raster::from_fn(self.width, self.height, |x, y| {
            self.get(self.width - 1 - x, y)
        })
    }

    pub fn flip_v(&self) -> Raster {
        Raster::from_fn(self.width, self.height, |x, y| {
            self.get(x, self.height - 1 - y)
        })
    }

    /// Rotate by 90 degrees counter-clockwise in image coordinates
    /// (x right, y down): output `(x, y)` reads input `(w - 1 - y, x)`.
    pub fn rotate90(&self) -> Raster {
        Raster::from_fn(self.height, self.width, |x, y| {
            self.get(self.width - 1 - y, x)
        })
    }

    /// Round-half-up quantization to integer levels of the given depth.
    pub fn quantize(&self, depth: BitDepth) -> Vec<u16> {
        let max = depth.max_level() as f64;
        self.data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * max + 0.5).floor() as u16)
            .collect()
    }

    /// Snap values onto the levels of `depth`, keeping the `[0, 1]` scale.
    pub fn quantized(&self, depth: BitDepth) -> Raster {
        let max = depth.max_level() as f64;
        Raster {
            width: self.width,
            height: self.height,
            data: self
                .quantize(depth)
                .into_iter()
                .map(|q| q as f64 / max)
                .collect(),
        }
    }

    /// Write as grayscale PNG, or binary PGM when the extension is `.pgm`.
    pub fn save(&self, path: &Path, depth: BitDepth) -> Result<()> {
        let levels = self.quantize(depth);
        let (w, h) = (self.width as u32, self.height as u32);
        let res = match depth {
            BitDepth::Eight => {
                let buf: ImageBuffer<Luma<u8>, Vec<u8>> =
                    ImageBuffer::from_raw(w, h, levels.iter().map(|&v| v as u8).collect())
                        .expect("buffer size matches");
                buf.save(path)
            }
            BitDepth::Sixteen => {
                let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
                    ImageBuffer::from_raw(w, h, levels).expect("buffer size matches");
                buf.save(path)
            }
        };
        res.map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
    }

    /// Load any grayscale-convertible image, scaled to `[0, 1]`.
    pub fn load(path: &Path) -> Result<Raster> {
        let img = image::open(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
        let luma = img.to_luma16();
        let (w, h) = luma.dimensions();
        let data = luma
            .into_raw()
            .into_iter()
            .map(|v| v as f64 / u16::MAX as f64)
            .collect();
        Raster::from_vec(w as usize, h as usize, data)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum BitDepth {
    Eight,
    Sixteen,
}

impl BitDepth {
    pub fn max_level(self) -> u16 {
        match self {
            BitDepth::Eight => u8::MAX as u16,
            BitDepth::Sixteen => u16::MAX,
        }
    }
}

impl TryFrom<u8> for BitDepth {
    type Error = String;

    fn try_from(v: u8) -> std::result::Result<Self, String> {
        match v {
            8 => Ok(BitDepth::Eight),
            16 => Ok(BitDepth::Sixteen),
            other => Err(format!("bit depth must be 8 or 16, got {other}")),
        }
    }
}

impl From<BitDepth> for u8 {
    fn from(d: BitDepth) -> u8 {
        match d {
            BitDepth::Eight => 8,
            BitDepth::Sixteen => 16,
        }
    }
}
