use panodr_core::autograd::Graph;
use panodr_core::dataset::{make_model_input, sample_mask, synth_dataset, MaskPolicy};
use panodr_core::geometry::roll_horizontal;
use panodr_core::nn::{Conv, ParamBuilder};
use panodr_core::pano::{composite, DiminishMask, Panorama};
use panodr_core::supervision::{Discriminator, DiscriminatorConfig};
use panodr_core::tensor::Tensor;
use panodr_core::trainer::{load_data, train_structure, Stage, SynthData, TrainConfig};
use panodr_core::structure::StructureNetConfig;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn conv_out(conv: &Conv, store: &panodr_core::nn::ParamStore<f64>, x: &Tensor<f64>) -> Tensor<f64> {
    let mut g = Graph::new();
    let p = store.bind(&mut g, false);
    let v = g.constant(x.clone());
    let y = conv.forward(&mut g, &p, v);
    g.value(y).clone()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn seam_conv_matches_direct_loop_and_commutes_with_roll(seed in 0u64..10_000, dil in 1usize..4, k in -20i64..20) {
        let (cin, cout, h, w) = (2, 3, 6, 10);
        let mut pb = ParamBuilder::new();
        let conv = Conv::new(&mut pb, "c", cin, cout, 3, 1, dil, 1.0);
        let store = pb.init::<f64>(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..cin * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let xt = Tensor::from_f64(&[1, cin, h, w], &x);
        let got = conv_out(&conv, &store, &xt);
        let want = panodr_oracles::seam_conv(&x, cin, h, w, store.tensors()[0].data(), cout, 3, dil);
        prop_assert!(got.data().iter().zip(&want).all(|(a, b)| (a - b).abs() < 1e-12));
        let rolled = conv_out(&conv, &store, &roll_horizontal(&xt, k));
        prop_assert!(rolled.max_abs_diff(&roll_horizontal(&got, k)) < 1e-12);
    }

    #[test]
    fn composite_matches_select_loop(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, w) = (8, 16);
        let a = Panorama::new(h, w, (0..3 * h * w).map(|_| rng.gen()).collect()).unwrap();
        let b = Panorama::new(h, w, (0..3 * h * w).map(|_| rng.gen()).collect()).unwrap();
        let m = DiminishMask::new(h, w, (0..h * w).map(|_| rng.gen_bool(0.3) as u8).collect()).unwrap();
        let out = composite(&a, &b, &m).unwrap();
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    let want = if m.get(y, x) { b.get(c, y, x) } else { a.get(c, y, x) };
                    prop_assert_eq!(out.get(c, y, x).to_bits(), want.to_bits());
                }
            }
        }
    }
}

#[test]
fn model_input_is_zero_inside_the_mask() {
    let data = synth_dataset(4, 16, 7, &MaskPolicy::default()).unwrap();
    for (i, (s, _, _)) in data.iter().enumerate() {
        let s = s.with_mask(sample_mask(s, &MaskPolicy::freeform(), i as u64).unwrap()).unwrap();
        let (x, _) = make_model_input::<f32>(&s);
        let hw = 16 * 32;
        for c in 0..3 {
            assert!((0..hw).all(|p| s.mask.data()[p] == 0 || x.data()[c * hw + p] == 0.0));
        }
        assert!((0..hw).all(|p| x.data()[3 * hw + p] == s.mask.data()[p] as f32));
    }
}

#[test]
fn untrained_critic_is_finite() {
    let (d, pb) = Discriminator::new(DiscriminatorConfig { base_channels: 4 }).unwrap();
    for seed in 0..100u64 {
        let store = pb.init::<f32>(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::new(&[1, 3, 16, 32], (0..3 * 512).map(|_| rng.gen::<f32>()).collect());
        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        let v = g.constant(x);
        let out = d.forward(&mut g, &p, v).unwrap();
        assert!(g.value(out).all_finite());
    }
}

#[test]
fn two_single_sample_steps_repeat_exactly() {
    let cfg = TrainConfig {
        stage: Stage::Structure,
        synth: SynthData { count: 6, seed: 1, mask: MaskPolicy::default() },
        height: 16,
        batch_size: 1,
        steps: 2,
        structure: StructureNetConfig { base_channels: 4, depth: 2 },
        ..Default::default()
    };
    let splits = load_data(&cfg).unwrap();
    let losses = || train_structure(&cfg, &splits).unwrap().log.steps.iter().map(|s| s.losses["layout_loss"].to_bits()).collect::<Vec<_>>();
    let a = losses();
    assert_eq!(a.len(), 2);
    assert_eq!(a, losses());
}
