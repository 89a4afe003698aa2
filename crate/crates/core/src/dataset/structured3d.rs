//! Ingestion of Structured3D-style scene directories.
//!
//! A scene directory holds a furnished render, an empty render, an instance
//! image and a layout annotation, all equirectangular at one resolution:
//!
//! - `full.png` or `full/rgb_rawlight.png`
//! - `empty.png` or `empty/rgb_rawlight.png`
//! - `instance.png` or `full/instance.png` (8 or 16 bit; 0 and the maximum value mean no instance)
//! - `layout.png` (dense labels 0/1/2) or `layout.txt` (corner pixels, see [`rasterize_corners`])

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use image::DynamicImage;

use super::{DRSample, MaskPolicy};
use crate::error::{PanoError, Result};
use crate::geometry::pixel_to_spherical;
use crate::pano::{DiminishMask, LayoutMap, Panorama, CEILING, FLOOR, WALL};

fn find(scene: &Path, names: &[&str]) -> Result<PathBuf> {
    names
        .iter()
        .map(|n| scene.join(n))
        .find(|p| p.is_file())
        .ok_or_else(|| PanoError::Scene { scene: scene.display().to_string(), reason: format!("missing {}", names.join(" or ")) })
}

fn scene_err(scene: &Path, reason: impl Into<String>) -> PanoError {
    PanoError::Scene { scene: scene.display().to_string(), reason: reason.into() }
}

/// Box-filter resize of a planar float image.
pub fn area_resize(src: &[f32], channels: usize, sh: usize, sw: usize, oh: usize, ow: usize) -> Vec<f32> {
    fn weights(sn: usize, on: usize) -> Vec<Vec<(usize, f64)>> {
        let r = sn as f64 / on as f64;
        (0..on)
            .map(|o| {
                let (a, b) = (o as f64 * r, (o + 1) as f64 * r);
                let mut w = Vec::new();
                let mut i = a.floor() as usize;
                while (i as f64) < b && i < sn {
                    let ov = (b.min(i as f64 + 1.0) - a.max(i as f64)).max(0.0);
                    if ov > 0.0 {
                        w.push((i, ov / r));
                    }
                    i += 1;
                }
                w
            })
            .collect()
    }
    let (wy, wx) = (weights(sh, oh), weights(sw, ow));
    let mut out = vec![0.0f32; channels * oh * ow];
    let mut row = vec![0.0f64; sw];
    for c in 0..channels {
        let plane = &src[c * sh * sw..(c + 1) * sh * sw];
        for (oy, ys) in wy.iter().enumerate() {
            row.fill(0.0);
            for &(y, wgt) in ys {
                for (x, r) in row.iter_mut().enumerate() {
                    *r += wgt * plane[y * sw + x] as f64;
                }
            }
            for (ox, xs) in wx.iter().enumerate() {
                let v: f64 = xs.iter().map(|&(x, wgt)| wgt * row[x]).sum();
                out[(c * oh + oy) * ow + ox] = v.clamp(0.0, 1.0) as f32;
            }
        }
    }
    out
}

/// Nearest-neighbour resize of a label grid (pixel-center sampling).
pub fn nearest_resize<T: Copy>(src: &[T], sh: usize, sw: usize, oh: usize, ow: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(oh * ow);
    for oy in 0..oh {
        let y = (((oy as f64 + 0.5) * sh as f64 / oh as f64) as usize).min(sh - 1);
        for ox in 0..ow {
            let x = (((ox as f64 + 0.5) * sw as f64 / ow as f64) as usize).min(sw - 1);
            out.push(src[y * sw + x]);
        }
    }
    out
}

fn load_rgb(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0f32; 3 * h * w];
    for (i, p) in img.pixels().enumerate() {
        for c in 0..3 {
            data[c * h * w + i] = p[c] as f32 / 255.0;
        }
    }
    Ok((h, w, data))
}

/// Instance ids per pixel, 0 meaning none.
fn load_instances(path: &Path) -> Result<(usize, usize, Vec<u32>)> {
    let img = image::open(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let ids: Vec<u32> = match img {
        DynamicImage::ImageLuma8(g) => g.pixels().map(|p| if p[0] == 255 { 0 } else { p[0] as u32 }).collect(),
        other => other.to_luma16().pixels().map(|p| if p[0] == u16::MAX { 0 } else { p[0] as u32 }).collect(),
    };
    Ok((h, w, ids))
}

/// Rasterizes a corner annotation into labels at `height x 2*height`.
///
/// `corners` lists `(u, v)` pixel positions in a `src_h x 2*src_h` image as
/// consecutive (ceiling, floor) pairs, one pair per vertical wall edge, in
/// order around the room. The floor corner fixes the horizontal distance of
/// each edge (camera height 1); the ceiling corner fixes the ceiling height.
/// Each column's boundary latitudes come from intersecting its ray with the
/// wall polygon in the horizontal plane.
pub fn rasterize_corners(corners: &[(f64, f64)], src_h: usize, height: usize) -> Result<LayoutMap> {
    if corners.len() < 6 || corners.len() % 2 != 0 {
        return Err(PanoError::Config(format!("layout needs >= 3 corner pairs, got {} points", corners.len())));
    }
    let to_lonlat = |(u, v): (f64, f64)| {
        let w = 2.0 * src_h as f64;
        (2.0 * std::f64::consts::PI * (u + 0.5) / w - std::f64::consts::PI, std::f64::consts::FRAC_PI_2 - std::f64::consts::PI * (v + 0.5) / src_h as f64)
    };
    let mut poly = Vec::new();
    let mut ceil_h = 0.0;
    for pair in corners.chunks(2) {
        let (_, lat_c) = to_lonlat(pair[0]);
        let (lon_f, lat_f) = to_lonlat(pair[1]);
        if !(lat_f < 0.0 && lat_c > 0.0) {
            return Err(PanoError::Config("ceiling corner must lie above the horizon and floor corner below".into()));
        }
        let d = 1.0 / (-lat_f).tan();
        poly.push([d * lon_f.sin(), d * lon_f.cos()]);
        ceil_h += d * lat_c.tan();
    }
    let ceil_h = ceil_h / poly.len() as f64;
    let width = 2 * height;
    let mut labels = vec![WALL; height * width];
    for u in 0..width {
        let lon = pixel_to_spherical(u, 0, width, height)?.lon;
        let dir = [lon.sin(), lon.cos()];
        let mut dist = f64::INFINITY;
        for k in 0..poly.len() {
            let (a, b) = (poly[k], poly[(k + 1) % poly.len()]);
            let e = [b[0] - a[0], b[1] - a[1]];
            let den = dir[0] * e[1] - dir[1] * e[0];
            if den.abs() < 1e-12 {
                continue;
            }
            let t = (a[0] * e[1] - a[1] * e[0]) / den;
            let s = (a[0] * dir[1] - a[1] * dir[0]) / den;
            if t > 0.0 && (-1e-12..=1.0 + 1e-12).contains(&s) {
                dist = dist.min(t);
            }
        }
        if !dist.is_finite() {
            return Err(PanoError::Config(format!("column {u} ray misses the layout polygon")));
        }
        let (lat_top, lat_bottom) = (ceil_h.atan2(dist), (-1.0f64).atan2(dist));
        for v in 0..height {
            let lat = pixel_to_spherical(u, v, width, height)?.lat;
            labels[v * width + u] = if lat > lat_top {
                CEILING
            } else if lat < lat_bottom {
                FLOOR
            } else {
                WALL
            };
        }
    }
    LayoutMap::new(height, width, labels)
}

fn parse_corners(text: &str) -> Result<Vec<(f64, f64)>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let v: Vec<f64> = l.split_whitespace().map(str::parse).collect::<std::result::Result<_, _>>().map_err(|e| PanoError::Config(format!("layout.txt: {e}")))?;
            match v[..] {
                [u, v] => Ok((u, v)),
                _ => Err(PanoError::Config(format!("layout.txt: expected two numbers per line, got {l:?}"))),
            }
        })
        .collect()
}

/// Reads one scene into one sample per instance whose mask area lies within
/// the policy bounds. Samples share the scene name as `scene_id`.
pub fn load_structured3d_pair(scene: &Path, height: usize, policy: &MaskPolicy) -> Result<Vec<DRSample>> {
    policy.validate()?;
    let name = scene.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let full_p = find(scene, &["full.png", "full/rgb_rawlight.png"])?;
    let empty_p = find(scene, &["empty.png", "empty/rgb_rawlight.png"])?;
    let inst_p = find(scene, &["instance.png", "full/instance.png"])?;
    let dense = scene.join("layout.png");
    let corners = scene.join("layout.txt");
    if !dense.is_file() && !corners.is_file() {
        return Err(scene_err(scene, "missing layout.png or layout.txt"));
    }
    let (fh, fw, full) = load_rgb(&full_p)?;
    let (eh, ew, empty) = load_rgb(&empty_p)?;
    let (ih, iw, inst) = load_instances(&inst_p)?;
    if (eh, ew) != (fh, fw) || (ih, iw) != (fh, fw) {
        return Err(scene_err(scene, format!("mismatched resolutions full {fh}x{fw}, empty {eh}x{ew}, instance {ih}x{iw}")));
    }
    if fw != 2 * fh {
        return Err(PanoError::Aspect { width: fw, height: fh });
    }
    let layout = if dense.is_file() {
        let src = LayoutMap::load_png(&dense)?;
        if src.dims() != (fh, fw) {
            return Err(scene_err(scene, format!("layout {:?} vs renders {fh}x{fw}", src.dims())));
        }
        LayoutMap::new(height, 2 * height, nearest_resize(src.labels(), fh, fw, height, 2 * height))?
    } else {
        rasterize_corners(&parse_corners(&std::fs::read_to_string(&corners)?)?, fh, height)?
    };
    let (h, w) = (height, 2 * height);
    let furnished = Panorama::new(h, w, area_resize(&full, 3, fh, fw, h, w))?;
    let empty = Panorama::new(h, w, area_resize(&empty, 3, fh, fw, h, w))?;
    let ids = nearest_resize(&inst, fh, fw, h, w);
    let mut by_id: BTreeMap<u32, Vec<u8>> = BTreeMap::new();
    for (i, &id) in ids.iter().enumerate() {
        if id != 0 {
            by_id.entry(id).or_insert_with(|| vec![0; h * w])[i] = 1;
        }
    }
    let mut out = Vec::new();
    for (id, data) in by_id {
        let object_mask = DiminishMask::new(h, w, data)?;
        let mask = object_mask.dilate(policy.dilate_px);
        let frac = mask.area_fraction();
        if frac < policy.area_bounds.0 || frac > policy.area_bounds.1 {
            log::debug!("{name}: instance {id} area {frac:.4} outside bounds");
            continue;
        }
        out.push(DRSample { furnished: furnished.clone(), empty: empty.clone(), mask, object_mask, layout: layout.clone(), scene_id: name.clone() });
    }
    if out.is_empty() {
        log::warn!("{name}: no object instance within the mask area bounds");
    }
    Ok(out)
}

/// Ingests every scene directory under `root` in name order. Failing scenes
/// are reported and skipped.
pub fn ingest_structured3d(root: &Path, height: usize, policy: &MaskPolicy) -> Result<(Vec<DRSample>, Vec<PanoError>)> {
    let mut scenes: Vec<PathBuf> = std::fs::read_dir(root)?.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.is_dir()).collect();
    scenes.sort();
    let (mut ok, mut errs) = (Vec::new(), Vec::new());
    for s in scenes {
        match load_structured3d_pair(&s, height, policy) {
            Ok(v) => ok.extend(v),
            Err(e) => {
                log::warn!("{e}");
                errs.push(e);
            }
        }
    }
    Ok((ok, errs))
}
