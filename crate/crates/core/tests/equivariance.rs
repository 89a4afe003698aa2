use panodr_core::autograd::Graph;
use panodr_core::dataset::{synth_dataset, MaskPolicy};
use panodr_core::generator::{Generator, GeneratorConfig};
use panodr_core::geometry::{roll_horizontal, roll_rows};
use panodr_core::pano::{DiminishMask, Panorama};
use panodr_core::pipeline::Pipeline;
use panodr_core::structure::{StructureNet, StructureNetConfig};
use panodr_core::supervision::{Discriminator, DiscriminatorConfig};
use panodr_core::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn roll_pano(p: &Panorama, k: i64) -> Panorama {
    let t = roll_horizontal(&p.to_tensor::<f32>(), k);
    Panorama::from_tensor(&t, 0).unwrap()
}

fn untrained_pipeline(guided: bool) -> Pipeline {
    let (structure, spb) = StructureNet::new(StructureNetConfig::default()).unwrap();
    let (generator, gpb) = Generator::new(GeneratorConfig::default()).unwrap();
    Pipeline { structure, structure_params: spb.init(1), generator, generator_params: gpb.init(2), guided }
}

fn ks(seed: u64, w: usize, count: usize) -> Vec<i64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| rng.gen_range(-(w as i64)..w as i64)).collect()
}

#[test]
fn pipeline_commutes_with_roll() {
    let data = synth_dataset(2, 64, 3, &MaskPolicy::default()).unwrap();
    for guided in [true, false] {
        let pipe = untrained_pipeline(guided);
        for (s, _, _) in &data {
            let base = pipe.diminish(&s.furnished, &s.mask).unwrap();
            for k in ks(4, 128, 5) {
                let mask = DiminishMask::new(64, 128, roll_rows(s.mask.data(), 128, k)).unwrap();
                let out = pipe.diminish(&roll_pano(&s.furnished, k), &mask).unwrap();
                let want = roll_pano(&base.composite, k);
                let err = out.composite.to_tensor::<f32>().max_abs_diff(&want.to_tensor());
                assert!(err < 1e-4, "guided={guided} k={k}: {err}");
                assert_eq!(out.layout.labels(), roll_rows(base.layout.labels(), 128, k).as_slice());
            }
        }
    }
}

#[test]
fn structure_net_commutes_with_any_roll() {
    let (net, pb) = StructureNet::new(StructureNetConfig { base_channels: 4, depth: 3 }).unwrap();
    let store = pb.init::<f64>(5);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = Tensor::from_f64(&[1, 4, 16, 32], &(0..4 * 16 * 32).map(|_| rng.gen::<f64>()).collect::<Vec<_>>());
    let base = net.predict(&store, &x).unwrap();
    for k in [1, 3, 7, -5, 31] {
        let out = net.predict(&store, &roll_horizontal(&x, k)).unwrap();
        assert!(out.max_abs_diff(&roll_horizontal(&base, k)) < 1e-12, "k={k}");
    }
}

#[test]
fn generator_commutes_with_any_roll() {
    let (gen, pb) = Generator::new(GeneratorConfig { base_channels: 4, depth: 2, style_dim: 4, ..Default::default() }).unwrap();
    let store = pb.init::<f64>(7);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut x: Vec<f64> = (0..4 * 16 * 32).map(|_| rng.gen()).collect();
    for v in &mut x[3 * 512..] {
        *v = v.round();
    }
    let x = Tensor::from_f64(&[1, 4, 16, 32], &x);
    let l = Tensor::from_f64(&[1, 3, 16, 32], &(0..3 * 512).map(|i| ((i / 512) as f64 + 1.0) / 6.0).collect::<Vec<_>>());
    let base = gen.generate(&store, &x, &l).unwrap();
    for k in [1, 2, 9, -13] {
        let out = gen.generate(&store, &roll_horizontal(&x, k), &roll_horizontal(&l, k)).unwrap();
        assert!(out.max_abs_diff(&roll_horizontal(&base, k)) < 1e-12, "k={k}");
    }
}

#[test]
fn critic_commutes_with_rolls_of_its_stride() {
    let (d, pb) = Discriminator::new(DiscriminatorConfig { base_channels: 4 }).unwrap();
    let store = pb.init::<f64>(9);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let x = Tensor::from_f64(&[1, 3, 16, 64], &(0..3 * 16 * 64).map(|_| rng.gen::<f64>()).collect::<Vec<_>>());
    let run = |x: &Tensor<f64>| {
        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        let v = g.constant(x.clone());
        let out = d.forward(&mut g, &p, v).unwrap();
        g.value(out).clone()
    };
    let base = run(&x);
    for k in [8i64, 16, -24, 56] {
        let out = run(&roll_horizontal(&x, k));
        assert!(out.max_abs_diff(&roll_horizontal(&base, k / 8)) < 1e-12, "k={k}");
    }
}
