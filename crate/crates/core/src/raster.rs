//! Minimal raster containers and PNG I/O.
//!
//! Pixel `(x, y)` covers the continuous square `[x, x+1) × [y, y+1)`, so its
//! center sits at `(x + 0.5, y + 0.5)`. Every projection in the crate uses
//! these continuous coordinates.

use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::BoundingBox;

/// Interleaved RGB image with channels in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    width: usize,
    height: usize,
    data: Vec<[f32; 3]>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![[0.0; 3]; width * height],
        }
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        mut f: impl FnMut(usize, usize) -> [f32; 3],
    ) -> Self {
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

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [f32; 3] {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        self.data[y * self.width + x] = rgb;
    }

    pub fn pixels(&self) -> &[[f32; 3]] {
        &self.data
    }

    /// Luma with weights 0.299, 0.587, 0.114.
    pub fn luma(&self, x: usize, y: usize) -> f32 {
        let [r, g, b] = self.get(x, y);
        0.299 * r + 0.587 * g + 0.114 * b
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let img = open_image(path)?.to_rgb8();
        let (w, h) = img.dimensions();
        let mut out = RgbImage::new(w as usize, h as usize);
        for (x, y, px) in img.enumerate_pixels() {
            out.set(
                x as usize,
                y as usize,
                [
                    px[0] as f32 / 255.0,
                    px[1] as f32 / 255.0,
                    px[2] as f32 / 255.0,
                ],
            );
        }
        Ok(out)
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        image::RgbImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let [r, g, b] = self.get(x as usize, y as usize);
            image::Rgb([to_u8(r), to_u8(g), to_u8(b)])
        })
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        self.to_rgb8().save(path).map_err(|e| image_error(path, e))
    }
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Binary mask, `true` marks foreground.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    width: usize,
    height: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![false; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
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

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    /// Foreground test at a continuous coordinate; false outside the raster.
    pub fn contains_point(&self, u: f64, v: f64) -> bool {
        if u < 0.0 || v < 0.0 {
            return false;
        }
        let (x, y) = (u.floor() as usize, v.floor() as usize);
        x < self.width && y < self.height && self.get(x, y)
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&b| b)
    }

    pub fn iter_foreground(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.data
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(move |(i, _)| (i % self.width, i / self.width))
    }

    /// Continuous extent of the foreground pixels, `None` for an empty mask.
    pub fn bounding_box(&self) -> Option<BoundingBox> {
        let mut bb: Option<(usize, usize, usize, usize)> = None;
        for (x, y) in self.iter_foreground() {
            bb = Some(match bb {
                None => (x, y, x, y),
                Some((x0, y0, x1, y1)) => (x0.min(x), y0.min(y), x1.max(x), y1.max(y)),
            });
        }
        bb.map(|(x0, y0, x1, y1)| {
            BoundingBox::new(x0 as f64, y0 as f64, (x1 + 1) as f64, (y1 + 1) as f64)
        })
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let img = open_image(path)?.to_luma8();
        let (w, h) = img.dimensions();
        Ok(Mask::from_fn(w as usize, h as usize, |x, y| {
            img.get_pixel(x as u32, y as u32)[0] > 0
        }))
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let img = image::GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            image::Luma([if self.get(x as usize, y as usize) {
                255
            } else {
                0
            }])
        });
        img.save(path).map_err(|e| image_error(path, e))
    }
}

/// Per-pixel camera-space depth in millimeters, 0 marks background.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl DepthMap {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, d: f64) {
        self.data[y * self.width + x] = d;
    }

    pub fn values(&self) -> &[f64] {
        &self.data
    }

    pub fn to_mask(&self) -> Mask {
        Mask::from_fn(self.width, self.height, |x, y| self.get(x, y) > 0.0)
    }

    /// Writes a 16-bit PNG in units of 0.1 mm.
    pub fn save_png16(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let img = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::from_fn(
            self.width as u32,
            self.height as u32,
            |x, y| {
                let d = self.get(x as usize, y as usize) * 10.0;
                image::Luma([d.round().clamp(0.0, u16::MAX as f64) as u16])
            },
        );
        img.save(path).map_err(|e| image_error(path, e))
    }

    pub fn load_png16(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let img = open_image(path)?.to_luma16();
        let (w, h) = img.dimensions();
        let mut out = DepthMap::new(w as usize, h as usize);
        for (x, y, px) in img.enumerate_pixels() {
            out.set(x as usize, y as usize, px[0] as f64 / 10.0);
        }
        Ok(out)
    }
}

fn open_image(path: &Path) -> Result<image::DynamicImage> {
    if !path.exists() {
        return Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "file not found"),
        ));
    }
    image::open(path).map_err(|e| image_error(path, e))
}

fn image_error(path: &Path, e: image::ImageError) -> Error {
    match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Image {
            path: path.to_path_buf(),
            message: other.to_string(),
        },
    }
}
