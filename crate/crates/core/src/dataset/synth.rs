//! Procedural cuboid rooms rendered as furnished / empty panorama pairs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::DRSample;
use crate::error::{PanoError, Result};
use crate::geometry::pixel_to_spherical;
use crate::pano::{DiminishMask, LayoutMap, Panorama, CEILING, FLOOR, WALL};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pattern {
    Flat,
    Checker,
    Gradient,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Material {
    pub base: [f32; 3],
    pub pattern: Pattern,
    /// Relative modulation depth of the pattern.
    pub amplitude: f32,
    /// Pattern period in meters.
    pub scale: f64,
}

impl Material {
    fn shade(&self, s: f64, t: f64, phase: f64, light: f32) -> [f32; 3] {
        let m = match self.pattern {
            Pattern::Flat => 0.0,
            Pattern::Checker => {
                let cell = ((s + phase) / self.scale).floor() + (t / self.scale).floor();
                if (cell as i64).rem_euclid(2) == 0 {
                    1.0
                } else {
                    -1.0
                }
            }
            Pattern::Gradient => (std::f64::consts::TAU * (s + phase) / self.scale).cos(),
        } as f32;
        self.base.map(|b| (b * light * (1.0 + self.amplitude * m)).clamp(0.0, 1.0))
    }
}

/// Axis-aligned box standing on the floor.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxObject {
    pub min: [f64; 3],
    pub max: [f64; 3],
    pub color: [f32; 3],
}

/// Room `[0, width] x [0, depth] x [0, height]` (z up) seen from `camera`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoomSpec {
    pub width: f64,
    pub depth: f64,
    pub height: f64,
    pub camera: [f64; 3],
    pub ceiling: Material,
    pub wall: Material,
    pub floor: Material,
    pub objects: Vec<BoxObject>,
}

/// Which room face a ray leaves through.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Face {
    Ceiling,
    Floor,
    WallXMin,
    WallXMax,
    WallYMin,
    WallYMax,
}

impl Face {
    pub fn label(self) -> u8 {
        match self {
            Face::Ceiling => CEILING,
            Face::Floor => FLOOR,
            _ => WALL,
        }
    }

    fn light(self) -> f32 {
        match self {
            Face::Ceiling => 1.0,
            Face::Floor => 0.92,
            Face::WallXMin => 0.86,
            Face::WallXMax => 0.95,
            Face::WallYMin => 0.9,
            Face::WallYMax => 1.0,
        }
    }
}

impl RoomSpec {
    pub fn dims(&self) -> [f64; 3] {
        [self.width, self.depth, self.height]
    }

    pub fn validate(&self) -> Result<()> {
        let dims = self.dims();
        if dims.iter().any(|d| !(d.is_finite() && *d > 0.0)) {
            return Err(PanoError::Room(format!("degenerate dimensions {dims:?}")));
        }
        if (0..3).any(|a| !(self.camera[a] > 0.0 && self.camera[a] < dims[a])) {
            return Err(PanoError::Room(format!("camera {:?} outside room {dims:?}", self.camera)));
        }
        for (i, o) in self.objects.iter().enumerate() {
            let inside = (0..3).all(|a| o.min[a] >= 0.0 && o.max[a] <= dims[a] && o.min[a] < o.max[a]);
            if !inside || o.min[2] != 0.0 {
                return Err(PanoError::Room(format!("object {i} not a box on the floor inside the room")));
            }
            if (0..3).all(|a| self.camera[a] > o.min[a] && self.camera[a] < o.max[a]) {
                return Err(PanoError::Room(format!("camera inside object {i}")));
            }
        }
        Ok(())
    }

    /// Exit face and distance of a ray from the camera through the empty room.
    pub fn trace_room(&self, dir: [f64; 3]) -> (Face, f64) {
        let dims = self.dims();
        let faces = [(Face::WallXMin, Face::WallXMax), (Face::WallYMin, Face::WallYMax), (Face::Floor, Face::Ceiling)];
        let mut best = (Face::Ceiling, f64::INFINITY);
        for a in 0..3 {
            let (t, face) = if dir[a] > 0.0 {
                ((dims[a] - self.camera[a]) / dir[a], faces[a].1)
            } else if dir[a] < 0.0 {
                (-self.camera[a] / dir[a], faces[a].0)
            } else {
                continue;
            };
            if t < best.1 {
                best = (face, t);
            }
        }
        best
    }

    /// Nearest object hit as `(index, distance, axis of the entered face)`.
    pub fn trace_objects(&self, dir: [f64; 3]) -> Option<(usize, f64, usize)> {
        let mut best: Option<(usize, f64, usize)> = None;
        for (i, o) in self.objects.iter().enumerate() {
            let (mut t0, mut t1, mut axis) = (0.0f64, f64::INFINITY, 0);
            let mut hit = true;
            for a in 0..3 {
                if dir[a] == 0.0 {
                    if self.camera[a] <= o.min[a] || self.camera[a] >= o.max[a] {
                        hit = false;
                        break;
                    }
                    continue;
                }
                let (mut ta, mut tb) = ((o.min[a] - self.camera[a]) / dir[a], (o.max[a] - self.camera[a]) / dir[a]);
                if ta > tb {
                    std::mem::swap(&mut ta, &mut tb);
                }
                if ta > t0 {
                    t0 = ta;
                    axis = a;
                }
                t1 = t1.min(tb);
            }
            if hit && t0 <= t1 && t0 > 0.0 && best.is_none_or(|b| t0 < b.1) {
                best = Some((i, t0, axis));
            }
        }
        best
    }

    fn material(&self, face: Face) -> &Material {
        match face {
            Face::Ceiling => &self.ceiling,
            Face::Floor => &self.floor,
            _ => &self.wall,
        }
    }

    fn room_color(&self, dir: [f64; 3], face: Face, t: f64, phase: f64) -> [f32; 3] {
        let p = [0, 1, 2].map(|a| self.camera[a] + t * dir[a]);
        let (s, u) = match face {
            Face::Ceiling | Face::Floor => (p[0], p[1]),
            Face::WallXMin | Face::WallXMax => (p[1], p[2]),
            Face::WallYMin | Face::WallYMax => (p[0], p[2]),
        };
        self.material(face).shade(s, u, phase, face.light())
    }
}

/// Draws a plausible furnished room.
pub fn random_room_spec(rng: &mut impl Rng) -> RoomSpec {
    let (width, depth, height) = (rng.gen_range(3.0..6.0), rng.gen_range(3.0..6.0), rng.gen_range(2.6..3.2));
    let camera = [
        width * rng.gen_range(0.35..0.65),
        depth * rng.gen_range(0.35..0.65),
        rng.gen_range(1.3..1.7),
    ];
    let pattern = |rng: &mut dyn rand::RngCore| match rng.gen_range(0..3) {
        0 => Pattern::Flat,
        1 => Pattern::Checker,
        _ => Pattern::Gradient,
    };
    let tint = |rng: &mut dyn rand::RngCore, lo: f32, hi: f32, spread: f32| {
        let v = rng.gen_range(lo..hi);
        [0; 3].map(|_| (v + rng.gen_range(-spread..spread)).clamp(0.0, 1.0))
    };
    let ceiling = Material { base: tint(rng, 0.82, 0.95, 0.03), pattern: Pattern::Flat, amplitude: 0.0, scale: 1.0 };
    let wall = Material {
        base: tint(rng, 0.5, 0.75, 0.12),
        pattern: pattern(rng),
        amplitude: rng.gen_range(0.02..0.06),
        scale: rng.gen_range(0.4..1.2),
    };
    let floor_v = rng.gen_range(0.22..0.42);
    let floor = Material {
        base: [floor_v * 1.15, floor_v, floor_v * 0.8],
        pattern: pattern(rng),
        amplitude: rng.gen_range(0.03..0.08),
        scale: rng.gen_range(0.3..0.8),
    };
    let count = rng.gen_range(1..=3);
    let mut objects = Vec::with_capacity(count);
    for _ in 0..count * 8 {
        if objects.len() == count {
            break;
        }
        let (sx, sy) = (rng.gen_range(0.4..1.4), rng.gen_range(0.4..1.4));
        let sz = rng.gen_range(0.4..1.1);
        let (x0, y0) = (rng.gen_range(0.0..width - sx), rng.gen_range(0.0..depth - sy));
        let o = BoxObject {
            min: [x0, y0, 0.0],
            max: [x0 + sx, y0 + sy, sz],
            color: {
                let hue = rng.gen_range(0..3);
                let mut c = [rng.gen_range(0.05..0.3), rng.gen_range(0.05..0.3), rng.gen_range(0.05..0.3)];
                c[hue] = rng.gen_range(0.7..0.95);
                c
            },
        };
        // keep the camera footprint clear
        let margin = 0.3;
        let clear = camera[0] < o.min[0] - margin
            || camera[0] > o.max[0] + margin
            || camera[1] < o.min[1] - margin
            || camera[1] > o.max[1] + margin;
        if clear {
            objects.push(o);
        }
    }
    RoomSpec { width, depth, height, camera, ceiling, wall, floor, objects }
}

/// Per-pixel ray casting of `spec` at `height x 2*height`.
///
/// `seed` offsets the texture phase. The empty render ignores objects, the
/// furnished one draws them; `object_mask` marks pixels whose nearest hit is
/// an object and `layout` the room face seen in the empty scene.
pub fn synth_room(seed: u64, spec: &RoomSpec, height: usize, dilate_px: usize, scene_id: impl Into<String>) -> Result<DRSample> {
    spec.validate()?;
    if height < 16 {
        return Err(PanoError::Config(format!("synthetic height {height} below 16")));
    }
    let phase = ChaCha8Rng::seed_from_u64(seed).gen_range(0.0..1.0);
    let width = 2 * height;
    let hw = height * width;
    let mut empty = vec![0.0f32; 3 * hw];
    let mut furnished = vec![0.0f32; 3 * hw];
    let mut labels = vec![0u8; hw];
    let mut object = vec![0u8; hw];
    for v in 0..height {
        for u in 0..width {
            let i = v * width + u;
            let dir = pixel_to_spherical(u, v, width, height)?.direction();
            let (face, t) = spec.trace_room(dir);
            labels[i] = face.label();
            let bg = spec.room_color(dir, face, t, phase);
            let fg = match spec.trace_objects(dir) {
                Some((k, t_obj, axis)) if t_obj < t => {
                    object[i] = 1;
                    let light = [0.8f32, 0.9, 1.0][axis];
                    spec.objects[k].color.map(|c| c * light)
                }
                _ => bg,
            };
            for c in 0..3 {
                empty[c * hw + i] = bg[c];
                furnished[c * hw + i] = fg[c];
            }
        }
    }
    let object_mask = DiminishMask::new(height, width, object)?;
    Ok(DRSample {
        furnished: Panorama::new(height, width, furnished)?,
        empty: Panorama::new(height, width, empty)?,
        mask: object_mask.dilate(dilate_px),
        object_mask,
        layout: LayoutMap::new(height, width, labels)?,
        scene_id: scene_id.into(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn bare_room() -> RoomSpec {
        let m = Material { base: [0.5; 3], pattern: Pattern::Checker, amplitude: 0.05, scale: 0.5 };
        RoomSpec {
            width: 4.0,
            depth: 4.0,
            height: 3.0,
            camera: [2.0, 2.0, 1.5],
            ceiling: m,
            wall: m,
            floor: m,
            objects: vec![],
        }
    }

    #[test]
    fn vertical_rays_hit_ceiling_and_floor() {
        let spec = bare_room();
        assert_eq!(spec.trace_room([0.0, 0.0, 1.0]).0.label(), CEILING);
        assert_eq!(spec.trace_room([0.0, 0.0, -1.0]).0.label(), FLOOR);
        for lon in [0.0, 1.0, 2.5, -2.0] {
            let d = crate::geometry::SphericalCoord::new(lon, 0.0).direction();
            assert_eq!(spec.trace_room(d).0.label(), WALL);
        }
        let s = synth_room(0, &spec, 16, 0, "t").unwrap();
        assert!(s.layout.labels()[..32].iter().all(|&l| l == CEILING));
        assert!(s.layout.labels()[15 * 32..].iter().all(|&l| l == FLOOR));
    }

    #[test]
    fn invalid_rooms_are_rejected() {
        let mut spec = bare_room();
        spec.camera = [5.0, 2.0, 1.5];
        assert!(matches!(synth_room(0, &spec, 16, 0, "t"), Err(PanoError::Room(_))));
        let mut spec = bare_room();
        spec.camera[2] = 3.0;
        assert!(synth_room(0, &spec, 16, 0, "t").is_err());
        let mut spec = bare_room();
        spec.height = 0.0;
        assert!(synth_room(0, &spec, 16, 0, "t").is_err());
        let mut spec = bare_room();
        spec.objects.push(BoxObject { min: [1.5, 1.5, 0.0], max: [2.5, 2.5, 2.0], color: [1.0; 3] });
        assert!(synth_room(0, &spec, 16, 0, "t").is_err());
        assert!(synth_room(0, &bare_room(), 8, 0, "t").is_err());
    }

    #[test]
    fn objects_are_the_only_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for i in 0..5 {
            let spec = random_room_spec(&mut rng);
            let s = synth_room(i, &spec, 16, 2, "t").unwrap();
            let hw = 16 * 32;
            for p in 0..hw {
                if s.object_mask.data()[p] == 0 {
                    for c in 0..3 {
                        assert_eq!(s.furnished.data()[c * hw + p], s.empty.data()[c * hw + p]);
                    }
                }
            }
            s.validate().unwrap();
            assert_eq!(synth_room(i, &spec, 16, 2, "t").unwrap(), s);
        }
    }
}
