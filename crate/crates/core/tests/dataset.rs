use std::collections::HashSet;
use std::f64::consts::{FRAC_PI_2, PI};
use std::path::Path;

use image::{ImageBuffer, Luma};
use panodr_core::dataset::structured3d::{ingest_structured3d, load_structured3d_pair, rasterize_corners};
use panodr_core::dataset::*;
use panodr_core::dataset::store::{read_dataset, validate_dir, write_sample, SampleMeta};
use panodr_core::pano::{DiminishMask, LayoutMap};
use panodr_core::PanoError;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn toy() -> DRSample {
    let spec = random_room_spec(&mut ChaCha8Rng::seed_from_u64(2));
    synth_room(3, &spec, 64, 0, "toy").unwrap()
}

#[test]
fn freeform_masks_respect_area_bounds() {
    let s = toy();
    let policy = MaskPolicy::freeform();
    for seed in 0..1000 {
        let m = sample_mask(&s, &policy, seed).unwrap();
        let f = m.area_fraction();
        assert!(f >= policy.area_bounds.0 && f <= policy.area_bounds.1, "seed {seed}: {f}");
    }
}

#[test]
fn dilation_wraps_across_the_seam() {
    let mut m = DiminishMask::zeros(16).unwrap();
    m.set(8, 0, true);
    let d = m.dilate(2);
    assert!(d.get(8, 31) && d.get(8, 30) && d.get(8, 2));
    assert!(!d.get(8, 29) && !d.get(8, 3));
    let mut top = DiminishMask::zeros(16).unwrap();
    top.set(0, 5, true);
    assert!(!top.dilate(1).get(15, 5), "rows must not wrap");
}

fn scenes(n: usize) -> Vec<DRSample> {
    let base = toy();
    (0..n)
        .flat_map(|i| {
            let reps = 1 + i % 3;
            let mut s = base.clone();
            s.scene_id = format!("scene_{i:03}");
            std::iter::repeat(s).take(reps)
        })
        .collect()
}

#[test]
fn split_counts_track_ratios() {
    let sp = split_dataset(scenes(100), (0.8, 0.1, 0.1)).unwrap();
    let ids = |v: &[DRSample]| v.iter().map(|s| s.scene_id.clone()).collect::<HashSet<_>>();
    let (a, b, c) = (ids(&sp.train), ids(&sp.val), ids(&sp.test));
    assert!(a.len().abs_diff(80) <= 5 && b.len().abs_diff(10) <= 5 && c.len().abs_diff(10) <= 5);
    assert!(a.is_disjoint(&b) && a.is_disjoint(&c) && b.is_disjoint(&c));
    assert_eq!(a.len() + b.len() + c.len(), 100);
    assert_eq!(sp.train.len() + sp.val.len() + sp.test.len(), scenes(100).len());
}

#[test]
fn split_is_a_stable_partition() {
    use proptest::prelude::*;
    proptest!(ProptestConfig::with_cases(40), |(n in 1usize..60, a in 0.0f64..1.0, b in 0.0f64..1.0)| {
        let (ra, rb) = (a, (1.0 - a) * b);
        let ratios = (ra, rb, 1.0 - ra - rb);
        let x = split_dataset(scenes(n), ratios).unwrap();
        let mut shuffled = scenes(n);
        shuffled.reverse();
        let y = split_dataset(shuffled, ratios).unwrap();
        prop_assert_eq!(x.train.len() + x.val.len() + x.test.len(), scenes(n).len());
        let ids = |v: &[DRSample]| v.iter().map(|s| s.scene_id.clone()).collect::<Vec<_>>();
        prop_assert_eq!(ids(&x.train), ids(&y.train));
        prop_assert_eq!(ids(&x.test), ids(&y.test));
        let tr: HashSet<_> = x.train.iter().map(|s| &s.scene_id).collect();
        prop_assert!(x.val.iter().chain(&x.test).all(|s| !tr.contains(&s.scene_id)));
    });
}

#[test]
fn store_validator_flags_broken_samples() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth_dataset(3, 32, 1, &MaskPolicy::default()).unwrap();
    for (s, spec, seed) in &data {
        let meta = SampleMeta { scene_id: s.scene_id.clone(), seed: Some(*seed), spec: Some(spec.clone()), source: "synth".into() };
        write_sample(&tmp.path().join(&s.scene_id), s, &meta).unwrap();
    }
    let back = read_dataset(tmp.path()).unwrap();
    assert_eq!(back.len(), 3);
    for (a, (b, _, _)) in back.iter().zip(&data) {
        assert_eq!(a.mask, b.mask);
        assert_eq!(a.layout, b.layout);
        assert_eq!(a.furnished, b.furnished.quantized());
    }
    std::fs::remove_file(tmp.path().join(&data[1].0.scene_id).join("layout.png")).unwrap();
    let report = validate_dir(tmp.path()).unwrap();
    assert_eq!(report.iter().filter(|(_, r)| r.is_err()).count(), 1);
}

fn write_scene(dir: &Path, h: usize, rects: &[(usize, usize, usize, usize)], layout: Option<&LayoutMap>) {
    std::fs::create_dir_all(dir).unwrap();
    let spec = random_room_spec(&mut ChaCha8Rng::seed_from_u64(4));
    let s = synth_room(1, &spec, h, 0, "x").unwrap();
    s.furnished.save_png(&dir.join("full.png")).unwrap();
    s.empty.save_png(&dir.join("empty.png")).unwrap();
    let mut inst: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::new(2 * h as u32, h as u32);
    for (id, &(y0, x0, rh, rw)) in rects.iter().enumerate() {
        for y in y0..y0 + rh {
            for x in x0..x0 + rw {
                inst.put_pixel(x as u32, y as u32, Luma([id as u16 + 1]));
            }
        }
    }
    inst.save(dir.join("instance.png")).unwrap();
    layout.unwrap_or(&s.layout).save_png(&dir.join("layout.png")).unwrap();
}

#[test]
fn structured3d_one_sample_per_instance() {
    let tmp = tempfile::tempdir().unwrap();
    let rects = [(24, 4, 16, 24), (24, 48, 16, 24), (30, 96, 16, 24)];
    write_scene(&tmp.path().join("scene_a"), 64, &rects, None);
    let policy = MaskPolicy { dilate_px: 1, ..Default::default() };
    let samples = load_structured3d_pair(&tmp.path().join("scene_a"), 32, &policy).unwrap();
    assert_eq!(samples.len(), 3);
    for (i, a) in samples.iter().enumerate() {
        assert_eq!(a.scene_id, "scene_a");
        assert_eq!(a.dims(), (32, 64));
        assert_eq!(a.object_mask.count(), 8 * 12);
        for b in &samples[i + 1..] {
            assert!(a.mask.data().iter().zip(b.mask.data()).all(|(x, y)| x & y == 0));
        }
    }

    write_scene(&tmp.path().join("scene_b"), 64, &[], None);
    assert!(load_structured3d_pair(&tmp.path().join("scene_b"), 32, &policy).unwrap().is_empty());
}

#[test]
fn structured3d_dense_layout_keeps_boundary_row() {
    let tmp = tempfile::tempdir().unwrap();
    let labels: Vec<u8> = (0..64 * 128).map(|i| match i / 128 {
        r if r < 20 => 0,
        r if r < 44 => 1,
        _ => 2,
    }).collect();
    let layout = LayoutMap::new(64, 128, labels).unwrap();
    write_scene(&tmp.path().join("s"), 64, &[(24, 4, 16, 24)], Some(&layout));
    let s = &load_structured3d_pair(&tmp.path().join("s"), 32, &MaskPolicy::default()).unwrap()[0];
    for x in 0..64 {
        assert_eq!((s.layout.get(9, x), s.layout.get(10, x)), (0, 1));
        assert_eq!((s.layout.get(21, x), s.layout.get(22, x)), (1, 2));
    }
}

fn to_pixel(lon: f64, lat: f64, h: usize) -> (f64, f64) {
    ((lon + PI) / (2.0 * PI) * (2 * h) as f64 - 0.5, (FRAC_PI_2 - lat) / PI * h as f64 - 0.5)
}

#[test]
fn corner_annotation_matches_synthetic_room() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..10 {
        let spec = random_room_spec(&mut rng);
        let [dx, dy, dz] = spec.dims();
        let c = spec.camera;
        let mut corners = Vec::new();
        for (x, y) in [(0.0, 0.0), (dx, 0.0), (dx, dy), (0.0, dy)] {
            let (rx, ry) = (x - c[0], y - c[1]);
            let d = rx.hypot(ry);
            let lon = rx.atan2(ry);
            corners.push(to_pixel(lon, (dz - c[2]).atan2(d), 256));
            corners.push(to_pixel(lon, (-c[2]).atan2(d), 256));
        }
        let raster = rasterize_corners(&corners, 256, 32).unwrap();
        let want = panodr_oracles::room_layout(spec.dims(), spec.camera, 32);
        let bad = raster.labels().iter().zip(&want).filter(|(a, b)| a != b).count();
        assert_eq!(bad, 0);
    }
}

#[test]
fn broken_scene_is_reported_and_skipped() {
    let tmp = tempfile::tempdir().unwrap();
    write_scene(&tmp.path().join("a"), 64, &[(24, 4, 16, 24)], None);
    write_scene(&tmp.path().join("b"), 64, &[(24, 4, 16, 24)], None);
    write_scene(&tmp.path().join("c"), 64, &[(24, 4, 16, 24), (24, 60, 16, 24)], None);
    std::fs::remove_file(tmp.path().join("b/empty.png")).unwrap();
    let (ok, errs) = ingest_structured3d(tmp.path(), 32, &MaskPolicy::default()).unwrap();
    assert_eq!(ok.len(), 3);
    assert_eq!(errs.len(), 1);
    assert!(matches!(&errs[0], PanoError::Scene { reason, .. } if reason.contains("empty.png")));
}
