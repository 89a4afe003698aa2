//! Brute-force references for tests. Everything works on plain arrays so
//! the oracles share no code with the implementation they check.
//!
//! Conventions: equirect images are planar RGB, `H x 2H`; pixel `(u, v)` has
//! longitude `2 pi (u + 0.5) / W - pi` and latitude `pi/2 - pi (v + 0.5) / H`.
//! The world is z-up and longitude 0 looks along +y.

use std::f64::consts::{FRAC_PI_2, PI};

fn lonlat(u: usize, v: usize, w: usize, h: usize) -> (f64, f64) {
    (2.0 * PI * (u as f64 + 0.5) / w as f64 - PI, FRAC_PI_2 - PI * (v as f64 + 0.5) / h as f64)
}

/// Layout label (0 ceiling, 1 wall, 2 floor) of every pixel of an empty
/// `dims = [x, y, z]` room seen from `camera`, found by walking the
/// azimuth to the wall first and comparing the elevation with the angles
/// subtended by ceiling and floor edges there.
pub fn room_layout(dims: [f64; 3], camera: [f64; 3], h: usize) -> Vec<u8> {
    let w = 2 * h;
    let mut out = Vec::with_capacity(h * w);
    for v in 0..h {
        for u in 0..w {
            let (lon, lat) = lonlat(u, v, w, h);
            let (dx, dy) = (lon.sin(), lon.cos());
            // horizontal distance to the first wall along the azimuth
            let mut reach = f64::INFINITY;
            for (d, c, size) in [(dx, camera[0], dims[0]), (dy, camera[1], dims[1])] {
                if d > 1e-15 {
                    reach = reach.min((size - c) / d);
                } else if d < -1e-15 {
                    reach = reach.min(-c / d);
                }
            }
            let rise = lat.tan() * reach;
            out.push(if lat >= FRAC_PI_2 - 1e-12 || rise > dims[2] - camera[2] {
                0
            } else if lat <= -FRAC_PI_2 + 1e-12 || rise < -camera[2] {
                2
            } else {
                1
            });
        }
    }
    out
}

/// Bilinear lookup at continuous equirect coordinates, wrapping columns and
/// clamping rows.
pub fn bilinear(img: &[f32], h: usize, w: usize, c: usize, x: f64, y: f64) -> f64 {
    let (x0, y0) = (x.floor(), y.floor());
    let (ax, ay) = (x - x0, y - y0);
    let at = |xi: f64, yi: f64| {
        let col = (xi as i64).rem_euclid(w as i64) as usize;
        let row = (yi.max(0.0).min(h as f64 - 1.0)) as usize;
        img[(c * h + row) * w + col] as f64
    };
    (1.0 - ay) * ((1.0 - ax) * at(x0, y0) + ax * at(x0 + 1.0, y0)) + ay * ((1.0 - ax) * at(x0, y0 + 1.0) + ax * at(x0 + 1.0, y0 + 1.0))
}

/// Perspective view of an equirect image by rotating each camera-frame ray
/// (x right, y forward, z up) by the view pitch about x, then by the yaw about z.
pub fn perspective(img: &[f32], h: usize, lon: f64, lat: f64, fov_deg: f64, out_w: usize, out_h: usize) -> Vec<f32> {
    let w = 2 * h;
    let t = (fov_deg.to_radians() * 0.5).tan();
    let mut out = vec![0.0f32; 3 * out_w * out_h];
    for j in 0..out_h {
        for i in 0..out_w {
            let px = ((i as f64 + 0.5) / out_w as f64 * 2.0 - 1.0) * t;
            let pz = (1.0 - (j as f64 + 0.5) / out_h as f64 * 2.0) * t * out_h as f64 / out_w as f64;
            let (x, y, z) = (px, 1.0, pz);
            let (y, z) = (y * lat.cos() - z * lat.sin(), y * lat.sin() + z * lat.cos());
            let (x, y) = (x * lon.cos() + y * lon.sin(), -x * lon.sin() + y * lon.cos());
            let r_lon = x.atan2(y);
            let r_lat = (z / (x * x + y * y + z * z).sqrt()).asin();
            let fx = (r_lon + PI) / (2.0 * PI) * w as f64 - 0.5;
            let fy = (FRAC_PI_2 - r_lat) / PI * h as f64 - 0.5;
            for c in 0..3 {
                out[(c * out_h + j) * out_w + i] = bilinear(img, h, w, c, fx, fy) as f32;
            }
        }
    }
    out
}

/// Planar RGB checkerboard with `cells` squares around the equator.
pub fn checkerboard(h: usize, cells: usize) -> Vec<f32> {
    let w = 2 * h;
    let size = (w / cells).max(1);
    let mut out = vec![0.0f32; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let on = ((x / size) + (y / size)) % 2 == 0;
            let rgb = if on { [0.9, 0.8, 0.1] } else { [0.1, 0.2, 0.7] };
            for c in 0..3 {
                out[(c * h + y) * w + x] = rgb[c] + 0.001 * ((x * 7 + y * 3) % 11) as f32;
            }
        }
    }
    out
}

/// Direct 2-D convolution with wrapped columns and clamped rows, `same` size,
/// stride 1: `x` is `[cin, h, w]`, `weight` is `[cout, cin, k, k]`.
pub fn seam_conv(x: &[f64], cin: usize, h: usize, w: usize, weight: &[f64], cout: usize, k: usize, dilation: usize) -> Vec<f64> {
    let r = (dilation * (k - 1) / 2) as i64;
    let mut out = vec![0.0; cout * h * w];
    for co in 0..cout {
        for y in 0..h as i64 {
            for xx in 0..w as i64 {
                let mut acc = 0.0;
                for ci in 0..cin {
                    for ky in 0..k as i64 {
                        for kx in 0..k as i64 {
                            let sy = (y - r + ky * dilation as i64).clamp(0, h as i64 - 1) as usize;
                            let sx = (xx - r + kx * dilation as i64).rem_euclid(w as i64) as usize;
                            acc += x[(ci * h + sy) * w + sx] * weight[((co * cin + ci) * k + ky as usize) * k + kx as usize];
                        }
                    }
                }
                out[(co * h + y as usize) * w + xx as usize] = acc;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn straight_up_and_down() {
        let l = room_layout([4.0, 4.0, 3.0], [2.0, 2.0, 1.5], 32);
        assert!(l[..64].iter().all(|&c| c == 0));
        assert!(l[31 * 64..].iter().all(|&c| c == 2));
        assert!(l[15 * 64..16 * 64].iter().all(|&c| c == 1));
    }

    #[test]
    fn bilinear_hits_pixel_centers() {
        let img = checkerboard(8, 4);
        assert_eq!(bilinear(&img, 8, 16, 1, 3.0, 2.0), img[(8 + 2) * 16 + 3] as f64);
    }
}
