use panodr_core::dataset::{random_room_spec, synth_room};
use panodr_core::geometry::{gnomonic_project, SphericalCoord, ViewSpec};
use panodr_core::pano::Panorama;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn gnomonic_matches_rotated_ray_oracle() {
    let h = 32;
    let img = panodr_oracles::checkerboard(h, 8);
    let pano = Panorama::new(h, 2 * h, img.clone()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut views = vec![(0.0, 0.0, 90.0), (3.1, 0.0, 60.0), (-3.1, 1.2, 100.0), (1.0, -1.5, 40.0), (0.0, 1.5707, 120.0)];
    for _ in 0..20 {
        views.push((rng.gen_range(-3.2..3.2), rng.gen_range(-1.5..1.5), rng.gen_range(20.0..150.0)));
    }
    for (lon, lat, fov) in views {
        let (ow, oh) = (24, 18);
        let view = ViewSpec { center: SphericalCoord::new(lon, lat), fov_deg: fov, out_w: ow, out_h: oh };
        let got = gnomonic_project(&pano, &view).unwrap();
        let want = panodr_oracles::perspective(&img, h, lon, lat, fov, ow, oh);
        let worst = got.data.iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
        assert!(worst < 1e-6, "view ({lon}, {lat}, {fov}) differs by {worst}");
    }
}

#[test]
fn synth_layout_matches_ray_box_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut specs: Vec<_> = (0..20).map(|_| random_room_spec(&mut rng)).collect();
    let mut centered = specs[0].clone();
    (centered.width, centered.depth, centered.height, centered.camera) = (4.0, 4.0, 3.0, [2.0, 2.0, 1.5]);
    centered.objects.clear();
    specs.push(centered);
    for (i, spec) in specs.iter().enumerate() {
        let s = synth_room(i as u64, spec, 32, 0, format!("room{i}")).unwrap();
        let want = panodr_oracles::room_layout(spec.dims(), spec.camera, 32);
        let bad = s.layout.labels().iter().zip(&want).filter(|(a, b)| a != b).count();
        assert_eq!(bad, 0, "spec {i}: {bad} labels differ");
    }
}
