use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::gradcheck;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect())
}

fn assert_grad(inputs: &[Tensor<f64>], f: impl Fn(&mut Graph<f64>, &[Var]) -> Var) {
    let r = gradcheck::check(inputs, f, 1e-6, None, 0);
    assert!(r.rel_err < 1e-6, "rel err {} (max abs {})", r.rel_err, r.max_abs_err);
}

#[test]
fn broadcast_binary_ops_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = rand_tensor(&mut rng, &[2, 3, 2, 4], 0.5, 1.5);
    let b = rand_tensor(&mut rng, &[2, 1, 2, 4], 0.5, 1.5);
    for kind in 0..4 {
        assert_grad(&[a.clone(), b.clone()], |g, v| {
            let y = match kind {
                0 => g.add(v[0], v[1]),
                1 => g.sub(v[0], v[1]),
                2 => g.mul(v[0], v[1]),
                _ => g.div(v[0], v[1]),
            };
            let y = g.square(y);
            g.mean(y)
        });
    }
}

#[test]
fn unary_ops_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = rand_tensor(&mut rng, &[1, 2, 3, 4], -2.0, 2.0);
    assert_grad(&[a.clone()], |g, v| {
        let e = g.elu(v[0]);
        let s = g.sigmoid(e);
        let l = g.leaky_relu(v[0], 0.2);
        let m = g.mul(s, l);
        let q = g.abs(m);
        let c = g.clamp(q, 0.05, 10.0);
        let lg = g.log(c);
        let r = g.relu(v[0]);
        let t = g.add(lg, r);
        let t = g.scale(t, 0.7);
        let t = g.add_scalar(t, 3.0);
        g.sum(t)
    });
}

#[test]
fn conv_and_pad_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = rand_tensor(&mut rng, &[2, 3, 6, 8], -1.0, 1.0);
    let w = rand_tensor(&mut rng, &[4, 3, 3, 3], -0.5, 0.5);
    let b = rand_tensor(&mut rng, &[4], -0.5, 0.5);
    for (stride, dil) in [(1, 1), (2, 1), (1, 2)] {
        assert_grad(&[x.clone(), w.clone(), b.clone()], |g, v| {
            let p = g.circular_pad(v[0], dil, dil);
            let y = g.conv2d(p, v[1], Some(v[2]), stride, dil);
            let y = g.square(y);
            g.mean(y)
        });
    }
    let w1 = rand_tensor(&mut rng, &[5, 3, 1, 1], -0.5, 0.5);
    assert_grad(&[x, w1], |g, v| {
        let y = g.conv2d(v[0], v[1], None, 1, 1);
        let y = g.elu(y);
        g.sum(y)
    });
}

#[test]
fn conv_matches_direct_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = rand_tensor(&mut rng, &[1, 2, 7, 9], -1.0, 1.0);
    let w = rand_tensor(&mut rng, &[3, 2, 3, 3], -1.0, 1.0);
    let (stride, dil) = (2, 2);
    let mut g = Graph::new();
    let (xv, wv) = (g.constant(x.clone()), g.constant(w.clone()));
    let y = g.conv2d(xv, wv, None, stride, dil);
    let (_, _, ho, wo) = g.value(y).dims4();
    assert_eq!((ho, wo), (2, 3));
    for co in 0..3 {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = 0.0;
                for ci in 0..2 {
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let (iy, ix) = (oy * stride + ky * dil, ox * stride + kx * dil);
                            acc += x.data()[(ci * 7 + iy) * 9 + ix] * w.data()[((co * 2 + ci) * 3 + ky) * 3 + kx];
                        }
                    }
                }
                let got = g.value(y).data()[(co * ho + oy) * wo + ox];
                assert!((got - acc).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn norm_softmax_concat_pool_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = rand_tensor(&mut rng, &[2, 3, 4, 4], -1.0, 1.0);
    let y = rand_tensor(&mut rng, &[2, 2, 4, 4], -1.0, 1.0);
    let t = rand_tensor(&mut rng, &[2, 5, 2, 2], -1.0, 1.0);
    assert_grad(&[x, y, t], |g, v| {
        let n = g.instance_norm(v[0], 1e-5);
        let c = g.concat_channels(&[n, v[1]]);
        let c = g.slice_channels(c, 1, 4);
        let c = g.concat_channels(&[c, v[1]]);
        let c = g.slice_channels(c, 0, 5);
        let s = g.softmax_channels(c);
        let p = g.avg_pool2(s);
        let d = g.sub(p, v[2]);
        let d = g.square(d);
        let cs = g.channel_sum(d);
        g.mean(cs)
    });
}

#[test]
fn layout_mixing_and_region_mean_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let layout = rand_tensor(&mut rng, &[2, 3, 3, 4], 0.1, 1.0);
    let coeffs = rand_tensor(&mut rng, &[2, 3, 5], -1.0, 1.0);
    let feat = rand_tensor(&mut rng, &[2, 4, 3, 4], -1.0, 1.0);
    let fallback = rand_tensor(&mut rng, &[3, 4], -1.0, 1.0);
    let w = rand_tensor(&mut rng, &[3, 4, 5], -1.0, 1.0);
    let b = rand_tensor(&mut rng, &[3, 5], -1.0, 1.0);
    assert_grad(&[layout, coeffs, feat, fallback, w, b], |g, v| {
        let (style, _) = g.region_mean(v[2], v[0], v[3], 1e-6);
        let h = g.class_linear(style, v[4], v[5]);
        let c = g.add(h, v[1]);
        let m = g.mix_by_layout(v[0], c);
        let m = g.square(m);
        g.mean(m)
    });
}

#[test]
fn region_mean_fallback_routes_gradient_to_default() {
    let feat = Tensor::<f64>::full(&[1, 2, 2, 2], 3.0);
    let mut wts = Tensor::<f64>::zeros(&[1, 3, 2, 2]);
    wts.data_mut()[0..4].fill(0.5); // class 0 present, others absent
    let fb = Tensor::<f64>::from_f64(&[3, 2], &[9.0, 9.0, 1.0, 2.0, 3.0, 4.0]);
    let mut g = Graph::new();
    let f = g.constant(feat);
    let w = g.constant(wts);
    let d = g.param(fb);
    let (m, present) = g.region_mean(f, w, d, 1e-6);
    assert_eq!(present, vec![true, false, false]);
    assert_eq!(g.value(m).data(), &[3.0, 3.0, 1.0, 2.0, 3.0, 4.0]);
    let s = g.sum(m);
    let grads = g.backward(s);
    assert_eq!(grads.get(d).unwrap().data(), &[0.0, 0.0, 1.0, 1.0, 1.0, 1.0]);
}

#[test]
fn constants_receive_no_gradient() {
    let mut g = Graph::<f64>::new();
    let a = g.param(Tensor::scalar(2.0));
    let c = g.constant(Tensor::scalar(5.0));
    let y = g.mul(a, c);
    let grads = g.backward(y);
    assert_eq!(grads.get(a).unwrap().data(), &[5.0]);
    assert!(grads.get(c).is_none());
}
