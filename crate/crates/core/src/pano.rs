//! Image containers: RGB panoramas, layout label maps and binary masks.

use std::path::Path;

use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};

use crate::error::{PanoError, Result};
use crate::tensor::{Real, Tensor};

pub const CEILING: u8 = 0;
pub const WALL: u8 = 1;
pub const FLOOR: u8 = 2;
pub const NUM_CLASSES: usize = 3;

fn check_aspect(height: usize, width: usize) -> Result<()> {
    if height == 0 || width != 2 * height {
        return Err(PanoError::Aspect { width, height });
    }
    Ok(())
}

fn check_same(what: &'static str, a: (usize, usize), b: (usize, usize)) -> Result<()> {
    if a != b {
        return Err(PanoError::shape(what, format!("{}x{} vs {}x{}", a.0, a.1, b.0, b.1)));
    }
    Ok(())
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Equirectangular RGB image, channel-planar, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Panorama {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Panorama {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        check_aspect(height, width)?;
        if data.len() != 3 * height * width {
            return Err(PanoError::shape("panorama", format!("{} values for 3x{height}x{width}", data.len())));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(PanoError::NonFinite("panorama".into()));
        }
        Ok(Panorama { height, width, data })
    }

    pub fn constant(height: usize, rgb: [f32; 3]) -> Result<Self> {
        let width = 2 * height;
        let mut data = Vec::with_capacity(3 * height * width);
        for c in rgb {
            data.extend(std::iter::repeat_n(c, height * width));
        }
        Self::new(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    /// Bilinear sample at fractional pixel coordinates (pixel centers at
    /// integers); columns wrap, rows clamp.
    pub fn sample(&self, u: f64, v: f64) -> [f64; 3] {
        let (h, w) = (self.height as i64, self.width as i64);
        let (u0, v0) = (u.floor(), v.floor());
        let (fu, fv) = (u - u0, v - v0);
        let (u0, v0) = (u0 as i64, v0 as i64);
        let col = |x: i64| x.rem_euclid(w) as usize;
        let row = |y: i64| y.clamp(0, h - 1) as usize;
        let (x0, x1, y0, y1) = (col(u0), col(u0 + 1), row(v0), row(v0 + 1));
        let mut out = [0.0; 3];
        for (c, o) in out.iter_mut().enumerate() {
            let p = |y: usize, x: usize| self.get(c, y, x) as f64;
            let top = p(y0, x0) * (1.0 - fu) + p(y0, x1) * fu;
            let bot = p(y1, x0) * (1.0 - fu) + p(y1, x1) * fu;
            *o = top * (1.0 - fv) + bot * fv;
        }
        out
    }

    /// Rounds every value to the nearest 8-bit level.
    pub fn quantized(&self) -> Self {
        let data = self.data.iter().map(|&v| to_u8(v) as f32 / 255.0).collect();
        Panorama { height: self.height, width: self.width, data }
    }

    pub fn to_rgb8(&self) -> RgbImage {
        let (h, w) = (self.height, self.width);
        ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
            let (x, y) = (x as usize, y as usize);
            Rgb([to_u8(self.get(0, y, x)), to_u8(self.get(1, y, x)), to_u8(self.get(2, y, x))])
        })
    }

    pub fn from_rgb8(img: &RgbImage) -> Result<Self> {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut data = vec![0.0; 3 * h * w];
        for (x, y, px) in img.enumerate_pixels() {
            for c in 0..3 {
                data[(c * h + y as usize) * w + x as usize] = px[c] as f32 / 255.0;
            }
        }
        Self::new(h, w, data)
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        Self::from_rgb8(&image::open(path)?.to_rgb8())
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb8().save(path)?;
        Ok(())
    }

    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::new(&[1, 3, self.height, self.width], self.data.iter().map(|&v| T::lit(v as f64)).collect())
    }

    /// Reads batch item `index` of a `[N, 3, H, W]` tensor.
    pub fn from_tensor<T: Real>(t: &Tensor<T>, index: usize) -> Result<Self> {
        let (n, c, h, w) = t.dims4();
        if c != 3 || index >= n {
            return Err(PanoError::shape("panorama tensor", format!("{:?} item {index}", t.shape())));
        }
        let per = 3 * h * w;
        let data = t.data()[index * per..(index + 1) * per].iter().map(|v| v.as_f64() as f32).collect();
        Self::new(h, w, data)
    }
}

/// Dense per-pixel structural labels (`CEILING`, `WALL`, `FLOOR`).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayoutMap {
    height: usize,
    width: usize,
    labels: Vec<u8>,
}

impl LayoutMap {
    pub fn new(height: usize, width: usize, labels: Vec<u8>) -> Result<Self> {
        check_aspect(height, width)?;
        if labels.len() != height * width {
            return Err(PanoError::shape("layout", format!("{} labels for {height}x{width}", labels.len())));
        }
        if let Some(bad) = labels.iter().find(|&&l| l as usize >= NUM_CLASSES) {
            return Err(PanoError::shape("layout", format!("label {bad} outside 0..3")));
        }
        Ok(LayoutMap { height, width, labels })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    /// One-hot `[1, 3, H, W]` encoding.
    pub fn one_hot<T: Real>(&self) -> Tensor<T> {
        let hw = self.height * self.width;
        let mut data = vec![T::zero(); NUM_CLASSES * hw];
        for (p, &l) in self.labels.iter().enumerate() {
            data[l as usize * hw + p] = T::one();
        }
        Tensor::new(&[1, NUM_CLASSES, self.height, self.width], data)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let img: GrayImage = ImageBuffer::from_raw(self.width as u32, self.height as u32, self.labels.clone())
            .expect("buffer sized to image");
        img.save(path)?;
        Ok(())
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)?.to_luma8();
        Self::new(img.height() as usize, img.width() as usize, img.into_raw())
    }

    /// Class-colored visualization: ceiling blue, wall gray, floor green.
    pub fn to_color(&self) -> RgbImage {
        ImageBuffer::from_fn(self.width as u32, self.height as u32, |x, y| {
            Rgb(match self.get(y as usize, x as usize) {
                CEILING => [66, 110, 220],
                WALL => [150, 150, 150],
                _ => [70, 180, 90],
            })
        })
    }
}

/// Binary mask; 1 marks pixels to diminish.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DiminishMask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl DiminishMask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        check_aspect(height, width)?;
        if data.len() != height * width {
            return Err(PanoError::shape("mask", format!("{} values for {height}x{width}", data.len())));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(PanoError::shape("mask", "values must be 0 or 1"));
        }
        Ok(DiminishMask { height, width, data })
    }

    pub fn zeros(height: usize) -> Result<Self> {
        Self::new(height, 2 * height, vec![0; 2 * height * height])
    }

    pub fn ones(height: usize) -> Result<Self> {
        Self::new(height, 2 * height, vec![1; 2 * height * height])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x] == 1
    }

    pub fn set(&mut self, y: usize, x: usize, on: bool) {
        self.data[y * self.width + x] = on as u8;
    }

    pub fn count(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    pub fn area_fraction(&self) -> f64 {
        self.count() as f64 / self.data.len() as f64
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    pub fn union(&self, other: &DiminishMask) -> Result<Self> {
        check_same("mask union", self.dims(), other.dims())?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a | b).collect();
        Self::new(self.height, self.width, data)
    }

    /// Grows the mask by `steps` 8-neighborhood dilations; columns wrap across
    /// the 360 degree seam, rows clamp at the poles.
    pub fn dilate(&self, steps: usize) -> Self {
        let (h, w) = (self.height, self.width);
        let mut cur = self.data.clone();
        for _ in 0..steps {
            let mut next = cur.clone();
            for y in 0..h {
                for x in 0..w {
                    if cur[y * w + x] == 0 {
                        continue;
                    }
                    for dy in -1i64..=1 {
                        let ny = y as i64 + dy;
                        if ny < 0 || ny >= h as i64 {
                            continue;
                        }
                        for dx in -1i64..=1 {
                            let nx = (x as i64 + dx).rem_euclid(w as i64) as usize;
                            next[ny as usize * w + nx] = 1;
                        }
                    }
                }
            }
            cur = next;
        }
        DiminishMask { height: h, width: w, data: cur }
    }

    /// `[1, 1, H, W]` float encoding.
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::new(&[1, 1, self.height, self.width], self.data.iter().map(|&v| T::lit(v as f64)).collect())
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_gray().save(path)?;
        Ok(())
    }

    pub fn to_gray(&self) -> GrayImage {
        ImageBuffer::from_fn(self.width as u32, self.height as u32, |x, y| {
            Luma([if self.get(y as usize, x as usize) { 255 } else { 0 }])
        })
    }

    /// Thresholds a grayscale image at 128.
    pub fn from_gray(img: &GrayImage) -> Result<Self> {
        let data = img.pixels().map(|p| (p[0] >= 128) as u8).collect();
        Self::new(img.height() as usize, img.width() as usize, data)
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        Self::from_gray(&image::open(path)?.to_luma8())
    }
}

/// `out = input * (1 - mask) + raw * mask`, per pixel.
pub fn composite(input: &Panorama, raw: &Panorama, mask: &DiminishMask) -> Result<Panorama> {
    check_same("composite raw", input.dims(), raw.dims())?;
    check_same("composite mask", input.dims(), mask.dims())?;
    let hw = input.height * input.width;
    let mut data = input.data.clone();
    for (i, v) in data.iter_mut().enumerate() {
        if mask.data[i % hw] == 1 {
            *v = raw.data[i];
        }
    }
    Panorama::new(input.height, input.width, data)
}

/// Masked RGB `furnished * (1 - mask)`.
pub fn apply_mask(pano: &Panorama, mask: &DiminishMask) -> Result<Panorama> {
    check_same("apply mask", pano.dims(), mask.dims())?;
    let hw = pano.height * pano.width;
    let mut data = pano.data.clone();
    for (i, v) in data.iter_mut().enumerate() {
        if mask.data[i % hw] == 1 {
            *v = 0.0;
        }
    }
    Panorama::new(pano.height, pano.width, data)
}
