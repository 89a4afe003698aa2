//! Equirectangular conventions, seam-aware padding and gnomonic views.
//!
//! Pixel `(u, v)` covers longitude `2*pi*(u + 0.5)/W - pi` and latitude
//! `pi/2 - pi*(v + 0.5)/H`; row 0 is next to the zenith. The world frame is
//! z-up with longitude 0 looking along +y and longitude +pi/2 along +x, so
//! increasing image columns turn the viewer to the right.

use std::f64::consts::{FRAC_PI_2, PI, TAU};

use serde::{Deserialize, Serialize};

use crate::error::{PanoError, Result};
use crate::pano::Panorama;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SphericalCoord {
    pub lon: f64,
    pub lat: f64,
}

impl SphericalCoord {
    /// Wraps longitude into `[-pi, pi)` and clamps latitude to `[-pi/2, pi/2]`.
    pub fn new(lon: f64, lat: f64) -> Self {
        let mut lon = (lon + PI).rem_euclid(TAU) - PI;
        if lon >= PI {
            lon -= TAU;
        }
        SphericalCoord { lon, lat: lat.clamp(-FRAC_PI_2, FRAC_PI_2) }
    }

    /// Unit direction in the z-up world frame.
    pub fn direction(&self) -> [f64; 3] {
        let (sl, cl) = self.lon.sin_cos();
        let (sb, cb) = self.lat.sin_cos();
        [cb * sl, cb * cl, sb]
    }

    pub fn from_direction(d: [f64; 3]) -> Self {
        let r = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
        Self::new(d[0].atan2(d[1]), (d[2] / r).clamp(-1.0, 1.0).asin())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewSpec {
    pub center: SphericalCoord,
    pub fov_deg: f64,
    pub out_w: usize,
    pub out_h: usize,
}

impl ViewSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.fov_deg > 0.0 && self.fov_deg < 170.0) {
            return Err(PanoError::Fov(self.fov_deg));
        }
        if self.out_w < 2 || self.out_h < 2 {
            return Err(PanoError::shape("view", format!("{}x{} below 2x2", self.out_w, self.out_h)));
        }
        Ok(())
    }
}

fn check_aspect(w: usize, h: usize) -> Result<()> {
    if h == 0 || w != 2 * h {
        return Err(PanoError::Aspect { width: w, height: h });
    }
    Ok(())
}

pub fn pixel_to_spherical(u: usize, v: usize, w: usize, h: usize) -> Result<SphericalCoord> {
    check_aspect(w, h)?;
    if u >= w || v >= h {
        return Err(PanoError::shape("pixel", format!("({u}, {v}) outside {w}x{h}")));
    }
    Ok(SphericalCoord {
        lon: TAU * (u as f64 + 0.5) / w as f64 - PI,
        lat: FRAC_PI_2 - PI * (v as f64 + 0.5) / h as f64,
    })
}

/// Fractional pixel coordinates of `c`; exact inverse of [`pixel_to_spherical`]
/// at pixel centers.
pub fn spherical_to_pixel(c: SphericalCoord, w: usize, h: usize) -> Result<(f64, f64)> {
    check_aspect(w, h)?;
    let c = SphericalCoord::new(c.lon, c.lat);
    Ok(((c.lon + PI) * w as f64 / TAU - 0.5, (FRAC_PI_2 - c.lat) * h as f64 / PI - 0.5))
}

/// Camera basis `(forward, right, up)` looking at `center`.
pub fn view_basis(center: SphericalCoord) -> [[f64; 3]; 3] {
    let forward = center.direction();
    let (sl, cl) = center.lon.sin_cos();
    let right = [cl, -sl, 0.0];
    let up = [
        forward[1] * right[2] - forward[2] * right[1],
        forward[2] * right[0] - forward[0] * right[2],
        forward[0] * right[1] - forward[1] * right[0],
    ];
    // forward x right points down for this handedness
    [forward, right, [-up[0], -up[1], -up[2]]]
}

/// Planar RGB image produced by [`gnomonic_project`].
#[derive(Clone, Debug, PartialEq)]
pub struct ViewImage {
    pub height: usize,
    pub width: usize,
    /// Channel-planar values in `[0, 1]`.
    pub data: Vec<f32>,
}

impl ViewImage {
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        image::ImageBuffer::from_fn(self.width as u32, self.height as u32, |x, y| {
            let px = |c| (self.get(c, y as usize, x as usize).clamp(0.0, 1.0) * 255.0).round() as u8;
            image::Rgb([px(0), px(1), px(2)])
        })
    }

    pub fn save_png(&self, path: &std::path::Path) -> Result<()> {
        self.to_rgb8().save(path)?;
        Ok(())
    }
}

/// Tangent-plane perspective image of `pano`, sampled bilinearly.
pub fn gnomonic_project(pano: &Panorama, view: &ViewSpec) -> Result<ViewImage> {
    view.validate()?;
    let [fwd, right, up] = view_basis(view.center);
    let half = (view.fov_deg.to_radians() / 2.0).tan();
    let aspect = view.out_h as f64 / view.out_w as f64;
    let (w, h) = (pano.width(), pano.height());
    let mut out = vec![0.0f32; 3 * view.out_w * view.out_h];
    let plane = view.out_w * view.out_h;
    for j in 0..view.out_h {
        let y = (1.0 - 2.0 * (j as f64 + 0.5) / view.out_h as f64) * half * aspect;
        for i in 0..view.out_w {
            let x = (2.0 * (i as f64 + 0.5) / view.out_w as f64 - 1.0) * half;
            let d = [
                fwd[0] + x * right[0] + y * up[0],
                fwd[1] + x * right[1] + y * up[1],
                fwd[2] + x * right[2] + y * up[2],
            ];
            let (u, v) = spherical_to_pixel(SphericalCoord::from_direction(d), w, h)?;
            let rgb = pano.sample(u, v);
            for c in 0..3 {
                out[c * plane + j * view.out_w + i] = rgb[c] as f32;
            }
        }
    }
    Ok(ViewImage { height: view.out_h, width: view.out_w, data: out })
}

/// Pads a `[N, C, H, W]` array: columns wrap modulo `W`, rows replicate edges.
pub fn circular_pad<T: Real>(x: &Tensor<T>, pad: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4();
    if pad > w {
        return Err(PanoError::PadTooLarge { pad, width: w });
    }
    let data = crate::autograd::kernels::circular_pad_forward(x.data(), n * c, h, w, pad, pad);
    Ok(Tensor::new(&[n, c, h + 2 * pad, w + 2 * pad], data))
}

/// Cyclic column shift: `out[.., j] = x[.., (j - k) mod W]`.
pub fn roll_horizontal<T: Real>(x: &Tensor<T>, k: i64) -> Tensor<T> {
    let shape = x.shape();
    let w = *shape.last().expect("non-scalar tensor");
    let shift = k.rem_euclid(w as i64) as usize;
    let mut out = x.data().to_vec();
    for (dst, src) in out.chunks_mut(w).zip(x.data().chunks(w)) {
        dst[shift..].copy_from_slice(&src[..w - shift]);
        dst[..shift].copy_from_slice(&src[w - shift..]);
    }
    Tensor::new(shape, out)
}

/// Row-major roll for flat `[H, W]` buffers such as masks and label maps.
pub fn roll_rows<V: Copy>(data: &[V], w: usize, k: i64) -> Vec<V> {
    let shift = k.rem_euclid(w as i64) as usize;
    let mut out = data.to_vec();
    for (dst, src) in out.chunks_mut(w).zip(data.chunks(w)) {
        dst[shift..].copy_from_slice(&src[..w - shift]);
        dst[..shift].copy_from_slice(&src[w - shift..]);
    }
    out
}
