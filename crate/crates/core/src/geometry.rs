//! Box geometry, class labels and the RGB image buffer shared by every module.
//!
//! Boxes are `(u, v, w, h)` with `(u, v)` the top-left corner in pixels. Pixel
//! intensities are `f32` in `[0, 1]`, stored row-major with interleaved RGB.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A class label. Id 0 is reserved for background.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassId(pub u32);

impl ClassId {
    pub const BACKGROUND: ClassId = ClassId(0);

    pub fn is_background(self) -> bool {
        self.0 == 0
    }
}

impl fmt::Display for ClassId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Axis-aligned box with a positive extent and a non-negative origin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawBox", into = "RawBox")]
pub struct BoundingBox {
    u: f32,
    v: f32,
    w: f32,
    h: f32,
}

#[derive(Serialize, Deserialize)]
struct RawBox {
    u: f32,
    v: f32,
    w: f32,
    h: f32,
}

impl TryFrom<RawBox> for BoundingBox {
    type Error = Error;

    fn try_from(r: RawBox) -> Result<Self> {
        BoundingBox::new(r.u, r.v, r.w, r.h)
    }
}

impl From<BoundingBox> for RawBox {
    fn from(b: BoundingBox) -> Self {
        RawBox {
            u: b.u,
            v: b.v,
            w: b.w,
            h: b.h,
        }
    }
}

impl BoundingBox {
    pub fn new(u: f32, v: f32, w: f32, h: f32) -> Result<Self> {
        let finite = [u, v, w, h].iter().all(|x| x.is_finite());
        if !finite || w <= 0.0 || h <= 0.0 || u < 0.0 || v < 0.0 {
            return Err(Error::invalid(format!(
                "invalid box (u={u}, v={v}, w={w}, h={h})"
            )));
        }
        Ok(Self { u, v, w, h })
    }

    /// Builds a box from corner coordinates `(x0, y0)`..`(x1, y1)`.
    pub fn from_corners(x0: f32, y0: f32, x1: f32, y1: f32) -> Result<Self> {
        Self::new(x0, y0, x1 - x0, y1 - y0)
    }

    /// Clips corner coordinates to a `width`x`height` image. Returns `None` when
    /// nothing of positive area remains.
    pub fn clipped(x0: f32, y0: f32, x1: f32, y1: f32, width: usize, height: usize) -> Option<Self> {
        let x0 = x0.clamp(0.0, width as f32);
        let x1 = x1.clamp(0.0, width as f32);
        let y0 = y0.clamp(0.0, height as f32);
        let y1 = y1.clamp(0.0, height as f32);
        Self::from_corners(x0, y0, x1, y1).ok()
    }

    pub fn u(&self) -> f32 {
        self.u
    }

    pub fn v(&self) -> f32 {
        self.v
    }

    pub fn w(&self) -> f32 {
        self.w
    }

    pub fn h(&self) -> f32 {
        self.h
    }

    pub fn right(&self) -> f32 {
        self.u + self.w
    }

    pub fn bottom(&self) -> f32 {
        self.v + self.h
    }

    pub fn area(&self) -> f32 {
        self.w * self.h
    }

    pub fn center(&self) -> (f32, f32) {
        (self.u + 0.5 * self.w, self.v + 0.5 * self.h)
    }

    pub fn corners(&self) -> [f32; 4] {
        [self.u, self.v, self.right(), self.bottom()]
    }

    pub fn intersection_area(&self, other: &BoundingBox) -> f32 {
        let iw = self.right().min(other.right()) - self.u.max(other.u);
        let ih = self.bottom().min(other.bottom()) - self.v.max(other.v);
        if iw <= 0.0 || ih <= 0.0 {
            0.0
        } else {
            iw * ih
        }
    }

    /// Whether the box lies fully inside a `width`x`height` image.
    pub fn fits_in(&self, width: usize, height: usize) -> bool {
        self.right() <= width as f32 && self.bottom() <= height as f32
    }

    /// The enclosing integer pixel rectangle `(x0, y0, w, h)`.
    pub fn pixel_rect(&self) -> (usize, usize, usize, usize) {
        let x0 = self.u.floor() as usize;
        let y0 = self.v.floor() as usize;
        let x1 = self.right().ceil() as usize;
        let y1 = self.bottom().ceil() as usize;
        (x0, y0, (x1 - x0).max(1), (y1 - y0).max(1))
    }

    pub fn translated(&self, du: f32, dv: f32) -> Result<Self> {
        Self::new(self.u + du, self.v + dv, self.w, self.h)
    }
}

/// Intersection over union; symmetric, `1` for identical boxes.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f32 {
    if a == b {
        return 1.0;
    }
    let inter = a.intersection_area(b);
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// A labelled box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub class_id: ClassId,
    /// VOC "difficult" flag; excluded from evaluation penalties.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub difficult: bool,
}

impl Annotation {
    pub fn new(bbox: BoundingBox, class_id: ClassId) -> Self {
        Self {
            bbox,
            class_id,
            difficult: false,
        }
    }
}

/// Interleaved RGB image with `f32` intensities.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    pub const CHANNELS: usize = 3;

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width * Self::CHANNELS],
        }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * Self::CHANNELS {
            return Err(Error::Shape(format!(
                "{} values for a {height}x{width}x3 image",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    /// Builds an image from a per-pixel function returning RGB.
    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(y, x));
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Copies the integer rectangle at `(x0, y0)` of size `w`x`h`.
    pub fn crop_rect(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<Image> {
        if w == 0 || h == 0 || x0 + w > self.width || y0 + h > self.height {
            return Err(Error::OutOfBounds {
                what: format!("[{x0}, {y0}, {w}, {h}]"),
                width: self.width,
                height: self.height,
            });
        }
        let mut data = Vec::with_capacity(w * h * 3);
        for y in y0..y0 + h {
            let start = (y * self.width + x0) * 3;
            data.extend_from_slice(&self.data[start..start + w * 3]);
        }
        Ok(Image {
            height: h,
            width: w,
            data,
        })
    }

    /// Writes `patch` with its top-left corner at `(x0, y0)`.
    pub fn paste(&mut self, patch: &Image, x0: usize, y0: usize) -> Result<()> {
        if x0 + patch.width > self.width || y0 + patch.height > self.height {
            return Err(Error::OutOfBounds {
                what: format!("[{x0}, {y0}, {}, {}]", patch.width, patch.height),
                width: self.width,
                height: self.height,
            });
        }
        for y in 0..patch.height {
            let dst = ((y0 + y) * self.width + x0) * 3;
            let src = y * patch.width * 3;
            self.data[dst..dst + patch.width * 3].copy_from_slice(&patch.data[src..src + patch.width * 3]);
        }
        Ok(())
    }

    /// Bilinear resize (half-pixel centres, edge clamped).
    pub fn resize_bilinear(&self, new_height: usize, new_width: usize) -> Image {
        let sy = self.height as f32 / new_height as f32;
        let sx = self.width as f32 / new_width as f32;
        Image::from_fn(new_height, new_width, |y, x| {
            let fy = ((y as f32 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f32);
            let fx = ((x as f32 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f32);
            let y0 = fy.floor() as usize;
            let x0 = fx.floor() as usize;
            let y1 = (y0 + 1).min(self.height - 1);
            let x1 = (x0 + 1).min(self.width - 1);
            let ly = fy - y0 as f32;
            let lx = fx - x0 as f32;
            let (p00, p01, p10, p11) = (
                self.pixel(y0, x0),
                self.pixel(y0, x1),
                self.pixel(y1, x0),
                self.pixel(y1, x1),
            );
            let mut out = [0.0; 3];
            for c in 0..3 {
                let top = p00[c] * (1.0 - lx) + p01[c] * lx;
                let bot = p10[c] * (1.0 - lx) + p11[c] * lx;
                out[c] = top * (1.0 - ly) + bot * ly;
            }
            out
        })
    }

    /// Approximate in-memory footprint of the pixels at 8 bits per channel.
    pub fn byte_size(&self) -> usize {
        self.height * self.width * 3
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        let buf = self
            .data
            .iter()
            .map(|&v| quantize(v))
            .collect::<Vec<u8>>();
        image::RgbImage::from_raw(self.width as u32, self.height as u32, buf)
            .expect("buffer length matches dimensions")
    }

    pub fn from_rgb8(img: &image::RgbImage) -> Image {
        let data = img.as_raw().iter().map(|&b| dequantize(b)).collect();
        Image {
            height: img.height() as usize,
            width: img.width() as usize,
            data,
        }
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb8().save(path).map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Image> {
        let img = image::open(path).map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        Ok(Image::from_rgb8(&img.to_rgb8()))
    }
}

/// `[0, 1]` float to 8-bit; exact inverse of [`dequantize`] on `k / 255` values.
pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn dequantize(b: u8) -> f32 {
    b as f32 / 255.0
}

/// An image together with its (possibly partial) annotations.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedImage {
    pub id: String,
    pub pixels: Image,
    pub annotations: Vec<Annotation>,
}

impl AnnotatedImage {
    pub fn new(id: impl Into<String>, pixels: Image, annotations: Vec<Annotation>) -> Result<Self> {
        let (w, h) = (pixels.width(), pixels.height());
        if let Some(a) = annotations.iter().find(|a| !a.bbox.fits_in(w, h)) {
            return Err(Error::OutOfBounds {
                what: format!("{:?}", a.bbox),
                width: w,
                height: h,
            });
        }
        Ok(Self {
            id: id.into(),
            pixels,
            annotations,
        })
    }

    pub fn width(&self) -> usize {
        self.pixels.width()
    }

    pub fn height(&self) -> usize {
        self.pixels.height()
    }
}

/// Cuts out the enclosing integer rectangle of `bbox`; output pixel `(i, j)`
/// is image pixel `(v + i, u + j)`.
pub fn crop(image: &Image, bbox: &BoundingBox) -> Result<Image> {
    if !bbox.fits_in(image.width(), image.height()) {
        return Err(Error::OutOfBounds {
            what: format!("{bbox:?}"),
            width: image.width(),
            height: image.height(),
        });
    }
    let (x0, y0, w, h) = bbox.pixel_rect();
    image.crop_rect(x0, y0, w, h)
}
