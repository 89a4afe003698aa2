//! Diminished-reality samples: furnished / empty pairs, masks and splits.

pub mod store;
pub mod structured3d;
pub mod synth;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{PanoError, Result};
use crate::pano::{DiminishMask, LayoutMap, Panorama};
use crate::tensor::{Real, Tensor};

pub use synth::{random_room_spec, synth_room, BoxObject, Material, Pattern, RoomSpec};

pub const MASK_ATTEMPTS: usize = 50;

#[derive(Clone, Debug, PartialEq)]
pub struct DRSample {
    pub furnished: Panorama,
    pub empty: Panorama,
    pub mask: DiminishMask,
    /// Undilated object support. Equals `mask` for samples read back from disk.
    pub object_mask: DiminishMask,
    pub layout: LayoutMap,
    pub scene_id: String,
}

impl DRSample {
    pub fn dims(&self) -> (usize, usize) {
        self.furnished.dims()
    }

    /// Checks that every field shares one equirect resolution.
    pub fn validate(&self) -> Result<()> {
        let d = self.furnished.dims();
        if d.1 != 2 * d.0 {
            return Err(PanoError::Aspect { width: d.1, height: d.0 });
        }
        let others = [
            ("empty", self.empty.dims()),
            ("mask", self.mask.dims()),
            ("object_mask", self.object_mask.dims()),
            ("layout", self.layout.dims()),
        ];
        for (what, o) in others {
            if o != d {
                return Err(PanoError::shape(what, format!("{o:?} vs furnished {d:?}")));
            }
        }
        if self.mask.data().iter().any(|&m| m > 1) || self.layout.labels().iter().any(|&l| l > 2) {
            return Err(PanoError::Config(format!("{}: label out of range", self.scene_id)));
        }
        if self.furnished.data().iter().chain(self.empty.data()).any(|v| !(0.0..=1.0).contains(v)) {
            return Err(PanoError::NonFinite(format!("{}: pixel outside [0,1]", self.scene_id)));
        }
        Ok(())
    }

    pub fn with_mask(&self, mask: DiminishMask) -> Result<Self> {
        if mask.dims() != self.dims() {
            return Err(PanoError::shape("mask", format!("{:?} vs {:?}", mask.dims(), self.dims())));
        }
        Ok(DRSample { mask, ..self.clone() })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskKind {
    ObjectDilate,
    FreeformStrokes,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MaskPolicy {
    pub kind: MaskKind,
    pub dilate_px: usize,
    pub stroke_count: (usize, usize),
    /// Stroke radius range in pixels, relative to H = 64.
    pub stroke_width: (f64, f64),
    pub area_bounds: (f64, f64),
}

impl Default for MaskPolicy {
    fn default() -> Self {
        MaskPolicy {
            kind: MaskKind::ObjectDilate,
            dilate_px: 2,
            stroke_count: (1, 4),
            stroke_width: (2.0, 6.0),
            area_bounds: (0.01, 0.4),
        }
    }
}

impl MaskPolicy {
    pub fn freeform() -> Self {
        MaskPolicy { kind: MaskKind::FreeformStrokes, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.area_bounds;
        if !(lo > 0.0 && lo < hi && hi <= 0.4) {
            return Err(PanoError::Config(format!("area bounds ({lo}, {hi}) must satisfy 0 < min < max <= 0.4")));
        }
        let (c0, c1) = self.stroke_count;
        let (w0, w1) = self.stroke_width;
        if c0 == 0 || c0 > c1 || !(w0 > 0.0 && w0 <= w1) {
            return Err(PanoError::Config("stroke ranges must be non-empty and positive".into()));
        }
        Ok(())
    }

    fn violated(&self, frac: f64) -> Option<&'static str> {
        if frac < self.area_bounds.0 {
            Some("min_frac")
        } else if frac > self.area_bounds.1 {
            Some("max_frac")
        } else {
            None
        }
    }
}

/// Random-walk brush strokes with wrap-aware horizontal extent.
fn freeform_strokes(h: usize, policy: &MaskPolicy, rng: &mut ChaCha8Rng) -> DiminishMask {
    let w = 2 * h;
    let mut data = vec![0u8; h * w];
    let scale = h as f64 / 64.0;
    let strokes = rng.gen_range(policy.stroke_count.0..=policy.stroke_count.1);
    for _ in 0..strokes {
        let radius = rng.gen_range(policy.stroke_width.0..=policy.stroke_width.1) * scale;
        let (mut x, mut y) = (rng.gen_range(0.0..w as f64), rng.gen_range(0.0..h as f64));
        let mut angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        for _ in 0..rng.gen_range(2..6) {
            angle += rng.gen_range(-1.2..1.2);
            let len = rng.gen_range(4.0..16.0) * scale;
            let steps = (len / (0.5 * radius.max(0.5))).ceil() as usize + 1;
            let (dx, dy) = (angle.cos() * len / steps as f64, angle.sin() * len / steps as f64);
            for _ in 0..steps {
                stamp_disk(&mut data, h, w, x, y, radius);
                x = (x + dx).rem_euclid(w as f64);
                y = (y + dy).clamp(0.0, h as f64 - 1.0);
            }
        }
    }
    DiminishMask::new(h, w, data).expect("stroke mask dims")
}

fn stamp_disk(data: &mut [u8], h: usize, w: usize, cx: f64, cy: f64, r: f64) {
    let ri = r.ceil() as i64;
    for oy in -ri..=ri {
        let y = cy.floor() as i64 + oy;
        if y < 0 || y >= h as i64 {
            continue;
        }
        for ox in -ri..=ri {
            let x = cx.floor() as i64 + ox;
            let (fx, fy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
            if fx * fx + fy * fy <= r * r {
                data[y as usize * w + x.rem_euclid(w as i64) as usize] = 1;
            }
        }
    }
}

/// Builds a diminish mask for `sample` under `policy`.
pub fn sample_mask(sample: &DRSample, policy: &MaskPolicy, seed: u64) -> Result<DiminishMask> {
    policy.validate()?;
    match policy.kind {
        MaskKind::ObjectDilate => {
            let m = sample.object_mask.dilate(policy.dilate_px);
            match policy.violated(m.area_fraction()) {
                None => Ok(m),
                Some(bound) => Err(PanoError::MaskArea { bound, attempts: 1 }),
            }
        }
        MaskKind::FreeformStrokes => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut last = "min_frac";
            for _ in 0..MASK_ATTEMPTS {
                let m = freeform_strokes(sample.dims().0, policy, &mut rng);
                match policy.violated(m.area_fraction()) {
                    None => return Ok(m),
                    Some(b) => last = b,
                }
            }
            Err(PanoError::MaskArea { bound: last, attempts: MASK_ATTEMPTS })
        }
    }
}

/// Model input `[1,4,H,W]` (masked RGB then mask) and target `[1,3,H,W]`.
pub fn make_model_input<T: Real>(sample: &DRSample) -> (Tensor<T>, Tensor<T>) {
    let (h, w) = sample.dims();
    let hw = h * w;
    let mut data = Vec::with_capacity(4 * hw);
    let m = sample.mask.data();
    for c in 0..3 {
        let plane = &sample.furnished.data()[c * hw..(c + 1) * hw];
        data.extend(plane.iter().zip(m).map(|(&v, &mk)| if mk == 1 { T::zero() } else { T::lit(v as f64) }));
    }
    data.extend(m.iter().map(|&mk| T::lit(mk as f64)));
    (Tensor::new(&[1, 4, h, w], data), sample.empty.to_tensor())
}

/// Stacks model inputs, targets and one-hot layouts of several samples.
pub fn make_batch<T: Real>(samples: &[&DRSample]) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (mut xs, mut ys, mut ls) = (Vec::new(), Vec::new(), Vec::new());
    for s in samples {
        let (x, y) = make_model_input(s);
        xs.push(x);
        ys.push(y);
        ls.push(s.layout.one_hot());
    }
    (Tensor::concat_batch(&xs), Tensor::concat_batch(&ys), Tensor::concat_batch(&ls))
}

fn scene_hash(scene_id: &str) -> u64 {
    let d = Sha256::digest(scene_id.as_bytes());
    u64::from_be_bytes(d[..8].try_into().expect("digest length"))
}

#[derive(Clone, Debug, Default)]
pub struct Splits {
    pub train: Vec<DRSample>,
    pub val: Vec<DRSample>,
    pub test: Vec<DRSample>,
}

/// Scene-level split. Scenes are ranked by a SHA-256 of their id and cut
/// into consecutive quotas, so counts track the ratios to within one scene.
pub fn split_dataset(samples: Vec<DRSample>, ratios: (f64, f64, f64)) -> Result<Splits> {
    let (a, b, c) = ratios;
    if [a, b, c].iter().any(|r| !(*r >= 0.0)) || ((a + b + c) - 1.0).abs() > 1e-9 {
        return Err(PanoError::Config(format!("split ratios {ratios:?} must be non-negative and sum to 1")));
    }
    let mut scenes: Vec<&str> = samples.iter().map(|s| s.scene_id.as_str()).collect();
    scenes.sort_unstable();
    scenes.dedup();
    scenes.sort_by_key(|s| (scene_hash(s), *s));
    let n = scenes.len() as f64;
    let cut_train = (a * n).round() as usize;
    let cut_val = ((a + b) * n).round() as usize;
    let bucket: std::collections::HashMap<String, usize> = scenes
        .iter()
        .enumerate()
        .map(|(i, s)| (s.to_string(), if i < cut_train { 0 } else if i < cut_val { 1 } else { 2 }))
        .collect();
    let mut out = Splits::default();
    let mut samples = samples;
    samples.sort_by(|x, y| x.scene_id.cmp(&y.scene_id));
    for s in samples {
        match bucket[&s.scene_id] {
            0 => out.train.push(s),
            1 => out.val.push(s),
            _ => out.test.push(s),
        }
    }
    Ok(out)
}

/// Toy dataset of `count` rooms at height `h`. Rooms whose mask falls outside
/// the policy bounds are redrawn.
pub fn synth_dataset(count: usize, h: usize, seed: u64, policy: &MaskPolicy) -> Result<Vec<(DRSample, RoomSpec, u64)>> {
    policy.validate()?;
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let scene_id = format!("toy_{seed}_{i:05}");
        let mut made = None;
        for attempt in 0..MASK_ATTEMPTS {
            let spec = random_room_spec(&mut rng);
            let room_seed = rng.gen::<u64>();
            let s = synth_room(room_seed, &spec, h, policy.dilate_px, scene_id.clone())?;
            let mask = match sample_mask(&s, policy, room_seed) {
                Ok(m) => m,
                Err(PanoError::MaskArea { .. }) if attempt + 1 < MASK_ATTEMPTS => continue,
                Err(e) => return Err(e),
            };
            made = Some((s.with_mask(mask)?, spec, room_seed));
            break;
        }
        out.push(made.expect("loop returns or fills"));
    }
    Ok(out)
}
