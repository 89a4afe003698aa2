//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] is built fresh for every forward pass. Parameters enter as
//! tracked leaves, inputs and frozen weights as constants; constants never
//! receive gradient.

pub mod kernels;

use kernels::ConvGeom;

use crate::tensor::{gemm, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug)]
enum UnaryKind {
    Abs,
    Log,
    Relu,
    Elu,
    Sigmoid,
    Square,
}

enum Op<T> {
    Leaf,
    Binary(BinaryKind, Var, Var),
    Unary(UnaryKind, Var),
    LeakyRelu(Var, T),
    Scale(Var, T),
    AddScalar(Var),
    Clamp(Var, T, T),
    Sum(Var),
    Mean(Var),
    ChannelSum(Var),
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        n: usize,
        cout: usize,
    },
    CircularPad {
        x: Var,
        ph: usize,
        pw: usize,
    },
    SoftmaxChannels(Var),
    InstanceNorm {
        x: Var,
        inv_std: Vec<T>,
    },
    ConcatChannels(Vec<Var>),
    SliceChannels {
        x: Var,
        start: usize,
    },
    AvgPool2(Var),
    MixByLayout {
        layout: Var,
        coeffs: Var,
    },
    ClassLinear {
        x: Var,
        w: Var,
        b: Var,
    },
    RegionMean {
        feat: Var,
        weights: Var,
        fallback: Var,
        denom: Vec<T>,
        eps: T,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    tracked: bool,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

/// Strides for broadcasting `shape` against `out` (0 on broadcast axes).
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; out.len()];
    let mut acc = 1;
    for i in (0..out.len()).rev() {
        strides[i] = if shape[i] == 1 && out[i] != 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

/// Visits every output index of a broadcast binary op with the flat offsets
/// of both operands.
fn for_each_broadcast(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let rank = out.len();
    let total: usize = out.iter().product();
    let mut idx = vec![0usize; rank];
    let (mut ia, mut ib) = (0usize, 0usize);
    for o in 0..total {
        f(o, ia, ib);
        for d in (0..rank).rev() {
            idx[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if idx[d] < out[d] {
                break;
            }
            ia -= sa[d] * out[d];
            ib -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

fn accumulate<T: Real>(slot: &mut Option<Tensor<T>>, shape: &[usize], g: Vec<T>) {
    match slot {
        Some(t) => {
            for (a, b) in t.data_mut().iter_mut().zip(g) {
                *a = *a + b;
            }
        }
        None => *slot = Some(Tensor::new(shape, g)),
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// Untracked leaf: inputs, targets and frozen weights.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Tracked leaf that will receive gradient.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        assert_eq!(sa.len(), sb.len(), "binary op rank mismatch {sa:?} vs {sb:?}");
        let out_shape: Vec<usize> = sa
            .iter()
            .zip(sb)
            .map(|(&x, &y)| {
                assert!(x == y || x == 1 || y == 1, "cannot broadcast {sa:?} with {sb:?}");
                x.max(y)
            })
            .collect();
        let f = |x: T, y: T| match kind {
            BinaryKind::Add => x + y,
            BinaryKind::Sub => x - y,
            BinaryKind::Mul => x * y,
            BinaryKind::Div => x / y,
        };
        let data = if sa == sb {
            ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let mut out = vec![T::zero(); out_shape.iter().product()];
            let (stra, strb) = (broadcast_strides(sa, &out_shape), broadcast_strides(sb, &out_shape));
            let (da, db) = (ta.data(), tb.data());
            for_each_broadcast(&out_shape, &stra, &strb, |o, i, j| out[o] = f(da[i], db[j]));
            out
        };
        let tracked = self.tracked(a) || self.tracked(b);
        self.push(Tensor::new(&out_shape, data), Op::Binary(kind, a, b), tracked)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary(BinaryKind::Div, a, b)
    }

    fn unary(&mut self, kind: UnaryKind, a: Var) -> Var {
        let f = |x: T| match kind {
            UnaryKind::Abs => x.abs(),
            UnaryKind::Log => x.ln(),
            UnaryKind::Relu => x.max(T::zero()),
            UnaryKind::Elu => {
                if x > T::zero() {
                    x
                } else {
                    x.exp_m1()
                }
            }
            UnaryKind::Sigmoid => T::one() / (T::one() + (-x).exp()),
            UnaryKind::Square => x * x,
        };
        let value = self.value(a).map(f);
        let tracked = self.tracked(a);
        self.push(value, Op::Unary(kind, a), tracked)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Abs, a)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Log, a)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Relu, a)
    }

    pub fn elu(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Elu, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Sigmoid, a)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Square, a)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let s = T::lit(slope);
        let value = self.value(a).map(|x| if x > T::zero() { x } else { x * s });
        let tracked = self.tracked(a);
        self.push(value, Op::LeakyRelu(a, s), tracked)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let c = T::lit(c);
        let value = self.value(a).map(|x| x * c);
        let tracked = self.tracked(a);
        self.push(value, Op::Scale(a, c), tracked)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let c = T::lit(c);
        let value = self.value(a).map(|x| x + c);
        let tracked = self.tracked(a);
        self.push(value, Op::AddScalar(a), tracked)
    }

    /// Clamps into `[lo, hi]`; gradient passes only strictly inside.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let (lo, hi) = (T::lit(lo), T::lit(hi));
        let value = self.value(a).map(|x| x.max(lo).min(hi));
        let tracked = self.tracked(a);
        self.push(value, Op::Clamp(a, lo, hi), tracked)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let tracked = self.tracked(a);
        self.push(Tensor::scalar(s), Op::Sum(a), tracked)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let m = t.sum() / T::lit(t.len() as f64);
        let tracked = self.tracked(a);
        self.push(Tensor::scalar(m), Op::Mean(a), tracked)
    }

    /// Sums over the channel axis of an NCHW tensor, keeping a unit channel.
    pub fn channel_sum(&mut self, a: Var) -> Var {
        let (n, c, h, w) = self.value(a).dims4();
        let hw = h * w;
        let src = self.value(a).data();
        let mut out = vec![T::zero(); n * hw];
        for b in 0..n {
            for k in 0..c {
                let plane = &src[(b * c + k) * hw..(b * c + k + 1) * hw];
                for (o, &v) in out[b * hw..(b + 1) * hw].iter_mut().zip(plane) {
                    *o = *o + v;
                }
            }
        }
        let tracked = self.tracked(a);
        self.push(Tensor::new(&[n, 1, h, w], out), Op::ChannelSum(a), tracked)
    }

    /// Valid convolution of `x: [N, Cin, H, W]` with `w: [Cout, Cin, kh, kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, dilation: usize) -> Var {
        let (n, cin, h, wd) = self.value(x).dims4();
        let (cout, wcin, kh, kw) = self.value(w).dims4();
        assert_eq!(cin, wcin, "conv input channels {cin} != weight channels {wcin}");
        assert!(stride >= 1 && dilation >= 1);
        let geom = ConvGeom { cin, h, w: wd, kh, kw, stride, dilation };
        assert!(
            h > dilation * (kh - 1) && wd > dilation * (kw - 1),
            "conv kernel larger than input {h}x{wd}"
        );
        let (ho, wo) = geom.out_hw();
        let bias = b.map(|b| {
            assert_eq!(self.value(b).len(), cout);
            self.value(b).data()
        });
        let out = kernels::conv2d_forward(self.value(x).data(), n, &geom, self.value(w).data(), cout, bias);
        let tracked = self.tracked(x) || self.tracked(w) || b.is_some_and(|b| self.tracked(b));
        self.push(
            Tensor::new(&[n, cout, ho, wo], out),
            Op::Conv { x, w, b, geom, n, cout },
            tracked,
        )
    }

    /// Horizontal wrap / vertical replicate padding.
    pub fn circular_pad(&mut self, x: Var, ph: usize, pw: usize) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        assert!(pw <= w, "circular pad {pw} exceeds width {w}");
        let out = kernels::circular_pad_forward(self.value(x).data(), n * c, h, w, ph, pw);
        let tracked = self.tracked(x);
        self.push(
            Tensor::new(&[n, c, h + 2 * ph, w + 2 * pw], out),
            Op::CircularPad { x, ph, pw },
            tracked,
        )
    }

    pub fn softmax_channels(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let (n, c, h, w) = t.dims4();
        let hw = h * w;
        let src = t.data();
        let mut out = vec![T::zero(); src.len()];
        for b in 0..n {
            let base = b * c * hw;
            for p in 0..hw {
                let mut m = src[base + p];
                for k in 1..c {
                    m = m.max(src[base + k * hw + p]);
                }
                let mut z = T::zero();
                for k in 0..c {
                    let e = (src[base + k * hw + p] - m).exp();
                    out[base + k * hw + p] = e;
                    z = z + e;
                }
                for k in 0..c {
                    out[base + k * hw + p] = out[base + k * hw + p] / z;
                }
            }
        }
        let tracked = self.tracked(x);
        self.push(Tensor::new(&[n, c, h, w], out), Op::SoftmaxChannels(x), tracked)
    }

    pub fn instance_norm(&mut self, x: Var, eps: f64) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        let (out, inv_std) = kernels::instance_norm_forward(self.value(x).data(), n * c, h * w, T::lit(eps));
        let tracked = self.tracked(x);
        self.push(Tensor::new(&[n, c, h, w], out), Op::InstanceNorm { x, inv_std }, tracked)
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let (n, _, h, w) = self.value(parts[0]).dims4();
        let hw = h * w;
        let mut ctotal = 0;
        for &p in parts {
            let (pn, pc, ph, pw) = self.value(p).dims4();
            assert!(pn == n && ph == h && pw == w, "concat spatial mismatch");
            ctotal += pc;
        }
        let mut out = Vec::with_capacity(n * ctotal * hw);
        for b in 0..n {
            for &p in parts {
                let t = self.value(p);
                let pc = t.shape()[1];
                out.extend_from_slice(&t.data()[b * pc * hw..(b + 1) * pc * hw]);
            }
        }
        let tracked = parts.iter().any(|&p| self.tracked(p));
        self.push(Tensor::new(&[n, ctotal, h, w], out), Op::ConcatChannels(parts.to_vec()), tracked)
    }

    /// Channels `[start, start + len)` of an NCHW tensor.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        assert!(start + len <= c, "channel slice {start}+{len} beyond {c}");
        let hw = h * w;
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(n * len * hw);
        for b in 0..n {
            out.extend_from_slice(&src[(b * c + start) * hw..(b * c + start + len) * hw]);
        }
        let tracked = self.tracked(x);
        self.push(Tensor::new(&[n, len, h, w], out), Op::SliceChannels { x, start }, tracked)
    }

    /// 2x2 average pooling with stride 2; odd trailing rows/columns are dropped.
    pub fn avg_pool2(&mut self, x: Var) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        let (oh, ow) = (h / 2, w / 2);
        let src = self.value(x).data();
        let quarter = T::lit(0.25);
        let mut out = Vec::with_capacity(n * c * oh * ow);
        for pl in 0..n * c {
            let s = &src[pl * h * w..(pl + 1) * h * w];
            for oy in 0..oh {
                for ox in 0..ow {
                    let (y, x0) = (2 * oy, 2 * ox);
                    out.push((s[y * w + x0] + s[y * w + x0 + 1] + s[(y + 1) * w + x0] + s[(y + 1) * w + x0 + 1]) * quarter);
                }
            }
        }
        let tracked = self.tracked(x);
        self.push(Tensor::new(&[n, c, oh, ow], out), Op::AvgPool2(x), tracked)
    }

    /// `out[n, ch, p] = sum_k layout[n, k, p] * coeffs[n, k, ch]` for
    /// `layout: [N, K, H, W]` and `coeffs: [N, K, C]`.
    pub fn mix_by_layout(&mut self, layout: Var, coeffs: Var) -> Var {
        let (n, k, h, w) = self.value(layout).dims4();
        let cs = self.value(coeffs).shape().to_vec();
        assert!(cs.len() == 3 && cs[0] == n && cs[1] == k, "coeffs {cs:?} vs layout [{n},{k},..]");
        let c = cs[2];
        let hw = h * w;
        let mut out = vec![T::zero(); n * c * hw];
        let (l, g) = (self.value(layout).data(), self.value(coeffs).data());
        for b in 0..n {
            // [C, HW] = coeffs_b^T [C, K] x layout_b [K, HW]
            gemm(
                true,
                false,
                c,
                hw,
                k,
                &g[b * k * c..(b + 1) * k * c],
                &l[b * k * hw..(b + 1) * k * hw],
                T::zero(),
                &mut out[b * c * hw..(b + 1) * c * hw],
            );
        }
        let tracked = self.tracked(layout) || self.tracked(coeffs);
        self.push(Tensor::new(&[n, c, h, w], out), Op::MixByLayout { layout, coeffs }, tracked)
    }

    /// Per-class affine map: `x: [N, K, Din]`, `w: [K, Din, Dout]`, `b: [K, Dout]`.
    pub fn class_linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        assert!(xs.len() == 3 && ws.len() == 3 && xs[1] == ws[0] && xs[2] == ws[1], "class_linear {xs:?} x {ws:?}");
        let (n, k, din, dout) = (xs[0], xs[1], xs[2], ws[2]);
        assert_eq!(self.value(b).len(), k * dout);
        let (xd, wd, bd) = (self.value(x).data(), self.value(w).data(), self.value(b).data());
        let mut out = vec![T::zero(); n * k * dout];
        for bi in 0..n {
            for c in 0..k {
                let xr = &xd[(bi * k + c) * din..(bi * k + c + 1) * din];
                let o = &mut out[(bi * k + c) * dout..(bi * k + c + 1) * dout];
                o.copy_from_slice(&bd[c * dout..(c + 1) * dout]);
                gemm(false, false, 1, dout, din, xr, &wd[c * din * dout..(c + 1) * din * dout], T::one(), o);
            }
        }
        let tracked = self.tracked(x) || self.tracked(w) || self.tracked(b);
        self.push(Tensor::new(&[n, k, dout], out), Op::ClassLinear { x, w, b }, tracked)
    }

    /// Weighted regional mean of `feat: [N, D, H, W]` under `weights: [N, K, H, W]`.
    ///
    /// Classes whose total weight is below `eps` take `fallback[k]` (`[K, D]`).
    /// Returns the `[N, K, D]` means and per-(sample, class) presence flags.
    pub fn region_mean(&mut self, feat: Var, weights: Var, fallback: Var, eps: f64) -> (Var, Vec<bool>) {
        let (n, d, h, w) = self.value(feat).dims4();
        let (wn, k, wh, ww) = self.value(weights).dims4();
        assert!(wn == n && wh == h && ww == w, "region weights must match feature resolution");
        assert_eq!(self.value(fallback).shape(), &[k, d]);
        let hw = h * w;
        let eps = T::lit(eps);
        let (f, wt, fb) = (self.value(feat).data(), self.value(weights).data(), self.value(fallback).data());
        let mut out = vec![T::zero(); n * k * d];
        let mut denom = Vec::with_capacity(n * k);
        let mut present = Vec::with_capacity(n * k);
        for b in 0..n {
            let fb_b = &f[b * d * hw..(b + 1) * d * hw];
            let wb = &wt[b * k * hw..(b + 1) * k * hw];
            // numerators [K, D] = weights_b [K, HW] x feat_b^T [HW, D]
            let ob = &mut out[b * k * d..(b + 1) * k * d];
            gemm(false, true, k, d, hw, wb, fb_b, T::zero(), ob);
            for c in 0..k {
                let s: T = wb[c * hw..(c + 1) * hw].iter().copied().sum();
                let row = &mut ob[c * d..(c + 1) * d];
                if s >= eps {
                    for v in row.iter_mut() {
                        *v = *v / s;
                    }
                    present.push(true);
                } else {
                    row.copy_from_slice(&fb[c * d..(c + 1) * d]);
                    present.push(false);
                }
                denom.push(s);
            }
        }
        let tracked = self.tracked(feat) || self.tracked(weights) || self.tracked(fallback);
        let v = self.push(
            Tensor::new(&[n, k, d], out),
            Op::RegionMean { feat, weights, fallback, denom, eps },
            tracked,
        );
        (v, present)
    }

    /// Reverse pass from a scalar node (seeded with 1).
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.value(loss).len(), 1, "backward requires a scalar");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.tracked(loss) {
            return Gradients { grads };
        }
        grads[loss.0] = Some(Tensor::new(self.value(loss).shape(), vec![T::one()]));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.tracked {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gout) = grads[i].take() else { continue };
            self.backward_node(node, &gout, &mut grads);
        }
        Gradients { grads }
    }

    fn backward_node(&self, node: &Node<T>, gout: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let g = gout.data();
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Binary(kind, a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (da, db) = (ta.data(), tb.data());
                let out_shape = node.value.shape();
                let (sa, sb) = (broadcast_strides(ta.shape(), out_shape), broadcast_strides(tb.shape(), out_shape));
                let mut ga = self.tracked(*a).then(|| vec![T::zero(); da.len()]);
                let mut gb = self.tracked(*b).then(|| vec![T::zero(); db.len()]);
                for_each_broadcast(out_shape, &sa, &sb, |o, i, j| {
                    let go = g[o];
                    let (x, y) = (da[i], db[j]);
                    let (dx, dy) = match kind {
                        BinaryKind::Add => (go, go),
                        BinaryKind::Sub => (go, -go),
                        BinaryKind::Mul => (go * y, go * x),
                        BinaryKind::Div => (go / y, -go * x / (y * y)),
                    };
                    if let Some(ga) = ga.as_mut() {
                        ga[i] = ga[i] + dx;
                    }
                    if let Some(gb) = gb.as_mut() {
                        gb[j] = gb[j] + dy;
                    }
                });
                if let Some(ga) = ga {
                    accumulate(&mut grads[a.0], ta.shape(), ga);
                }
                if let Some(gb) = gb {
                    accumulate(&mut grads[b.0], tb.shape(), gb);
                }
            }
            Op::Unary(kind, a) => {
                let x = self.value(*a).data();
                let d: Vec<T> = g
                    .iter()
                    .zip(x)
                    .zip(out)
                    .map(|((&go, &xi), &yi)| {
                        go * match kind {
                            UnaryKind::Abs => {
                                if xi > T::zero() {
                                    T::one()
                                } else if xi < T::zero() {
                                    -T::one()
                                } else {
                                    T::zero()
                                }
                            }
                            UnaryKind::Log => T::one() / xi,
                            UnaryKind::Relu => {
                                if xi > T::zero() {
                                    T::one()
                                } else {
                                    T::zero()
                                }
                            }
                            UnaryKind::Elu => {
                                if xi > T::zero() {
                                    T::one()
                                } else {
                                    yi + T::one()
                                }
                            }
                            UnaryKind::Sigmoid => yi * (T::one() - yi),
                            UnaryKind::Square => xi + xi,
                        }
                    })
                    .collect();
                accumulate(&mut grads[a.0], self.shape(*a), d);
            }
            Op::LeakyRelu(a, s) => {
                let x = self.value(*a).data();
                let d = g.iter().zip(x).map(|(&go, &xi)| if xi > T::zero() { go } else { go * *s }).collect();
                accumulate(&mut grads[a.0], self.shape(*a), d);
            }
            Op::Scale(a, c) => {
                let d = g.iter().map(|&go| go * *c).collect();
                accumulate(&mut grads[a.0], self.shape(*a), d);
            }
            Op::AddScalar(a) => accumulate(&mut grads[a.0], self.shape(*a), g.to_vec()),
            Op::Clamp(a, lo, hi) => {
                let x = self.value(*a).data();
                let d = g
                    .iter()
                    .zip(x)
                    .map(|(&go, &xi)| if xi > *lo && xi < *hi { go } else { T::zero() })
                    .collect();
                accumulate(&mut grads[a.0], self.shape(*a), d);
            }
            Op::Sum(a) => {
                let len = self.value(*a).len();
                accumulate(&mut grads[a.0], self.shape(*a), vec![g[0]; len]);
            }
            Op::Mean(a) => {
                let len = self.value(*a).len();
                accumulate(&mut grads[a.0], self.shape(*a), vec![g[0] / T::lit(len as f64); len]);
            }
            Op::ChannelSum(a) => {
                let (n, c, h, w) = self.value(*a).dims4();
                let hw = h * w;
                let mut d = Vec::with_capacity(n * c * hw);
                for b in 0..n {
                    for _ in 0..c {
                        d.extend_from_slice(&g[b * hw..(b + 1) * hw]);
                    }
                }
                accumulate(&mut grads[a.0], self.shape(*a), d);
            }
            Op::Conv { x, w, b, geom, n, cout } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let mut dx = self.tracked(*x).then(|| vec![T::zero(); xv.len()]);
                let mut dw = self.tracked(*w).then(|| vec![T::zero(); wv.len()]);
                let mut db = b.filter(|b| self.tracked(*b)).map(|_| vec![T::zero(); *cout]);
                kernels::conv2d_backward(
                    xv.data(),
                    *n,
                    geom,
                    wv.data(),
                    *cout,
                    g,
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                );
                if let Some(dx) = dx {
                    accumulate(&mut grads[x.0], xv.shape(), dx);
                }
                if let Some(dw) = dw {
                    accumulate(&mut grads[w.0], wv.shape(), dw);
                }
                if let (Some(db), Some(b)) = (db, b) {
                    accumulate(&mut grads[b.0], self.shape(*b), db);
                }
            }
            Op::CircularPad { x, ph, pw } => {
                let (n, c, h, w) = self.value(*x).dims4();
                let mut d = vec![T::zero(); n * c * h * w];
                kernels::circular_pad_backward(g, n * c, h, w, *ph, *pw, &mut d);
                accumulate(&mut grads[x.0], self.shape(*x), d);
            }
            Op::SoftmaxChannels(x) => {
                let (n, c, h, w) = node.value.dims4();
                let hw = h * w;
                let mut d = vec![T::zero(); out.len()];
                for b in 0..n {
                    let base = b * c * hw;
                    for p in 0..hw {
                        let mut dot = T::zero();
                        for k in 0..c {
                            dot = dot + out[base + k * hw + p] * g[base + k * hw + p];
                        }
                        for k in 0..c {
                            let i = base + k * hw + p;
                            d[i] = out[i] * (g[i] - dot);
                        }
                    }
                }
                accumulate(&mut grads[x.0], self.shape(*x), d);
            }
            Op::InstanceNorm { x, inv_std } => {
                let (_, _, h, w) = node.value.dims4();
                let mut d = vec![T::zero(); out.len()];
                kernels::instance_norm_backward(out, inv_std, g, h * w, &mut d);
                accumulate(&mut grads[x.0], self.shape(*x), d);
            }
            Op::ConcatChannels(parts) => {
                let (n, ctot, h, w) = node.value.dims4();
                let hw = h * w;
                let mut offset = 0;
                for &p in parts {
                    let pc = self.shape(p)[1];
                    if self.tracked(p) {
                        let mut d = Vec::with_capacity(n * pc * hw);
                        for b in 0..n {
                            let start = (b * ctot + offset) * hw;
                            d.extend_from_slice(&g[start..start + pc * hw]);
                        }
                        accumulate(&mut grads[p.0], self.shape(p), d);
                    }
                    offset += pc;
                }
            }
            Op::SliceChannels { x, start } => {
                let (n, c, h, w) = self.value(*x).dims4();
                let len = node.value.shape()[1];
                let hw = h * w;
                let mut d = vec![T::zero(); n * c * hw];
                for b in 0..n {
                    d[(b * c + start) * hw..(b * c + start + len) * hw].copy_from_slice(&g[b * len * hw..(b + 1) * len * hw]);
                }
                accumulate(&mut grads[x.0], self.shape(*x), d);
            }
            Op::AvgPool2(x) => {
                let (n, c, h, w) = self.value(*x).dims4();
                let (oh, ow) = (h / 2, w / 2);
                let quarter = T::lit(0.25);
                let mut d = vec![T::zero(); n * c * h * w];
                for pl in 0..n * c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let v = g[(pl * oh + oy) * ow + ox] * quarter;
                            for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                                d[pl * h * w + (2 * oy + dy) * w + 2 * ox + dx] = v;
                            }
                        }
                    }
                }
                accumulate(&mut grads[x.0], self.shape(*x), d);
            }
            Op::MixByLayout { layout, coeffs } => {
                let (n, k, h, w) = self.value(*layout).dims4();
                let c = self.shape(*coeffs)[2];
                let hw = h * w;
                let (l, co) = (self.value(*layout).data(), self.value(*coeffs).data());
                if self.tracked(*layout) {
                    let mut d = vec![T::zero(); l.len()];
                    for b in 0..n {
                        // [K, HW] = coeffs_b [K, C] x gout_b [C, HW]
                        gemm(
                            false,
                            false,
                            k,
                            hw,
                            c,
                            &co[b * k * c..(b + 1) * k * c],
                            &g[b * c * hw..(b + 1) * c * hw],
                            T::zero(),
                            &mut d[b * k * hw..(b + 1) * k * hw],
                        );
                    }
                    accumulate(&mut grads[layout.0], self.shape(*layout), d);
                }
                if self.tracked(*coeffs) {
                    let mut d = vec![T::zero(); co.len()];
                    for b in 0..n {
                        // [K, C] = layout_b [K, HW] x gout_b^T [HW, C]
                        gemm(
                            false,
                            true,
                            k,
                            c,
                            hw,
                            &l[b * k * hw..(b + 1) * k * hw],
                            &g[b * c * hw..(b + 1) * c * hw],
                            T::zero(),
                            &mut d[b * k * c..(b + 1) * k * c],
                        );
                    }
                    accumulate(&mut grads[coeffs.0], self.shape(*coeffs), d);
                }
            }
            Op::ClassLinear { x, w, b } => {
                let xs = self.shape(*x).to_vec();
                let (n, k, din) = (xs[0], xs[1], xs[2]);
                let dout = self.shape(*w)[2];
                let (xd, wd) = (self.value(*x).data(), self.value(*w).data());
                let mut dx = self.tracked(*x).then(|| vec![T::zero(); xd.len()]);
                let mut dw = self.tracked(*w).then(|| vec![T::zero(); wd.len()]);
                let mut db = self.tracked(*b).then(|| vec![T::zero(); k * dout]);
                for bi in 0..n {
                    for c in 0..k {
                        let row = (bi * k + c) * dout;
                        let go = &g[row..row + dout];
                        let xr = &xd[(bi * k + c) * din..(bi * k + c + 1) * din];
                        let wc = &wd[c * din * dout..(c + 1) * din * dout];
                        if let Some(db) = db.as_mut() {
                            for (d, &v) in db[c * dout..(c + 1) * dout].iter_mut().zip(go) {
                                *d = *d + v;
                            }
                        }
                        if let Some(dw) = dw.as_mut() {
                            gemm(true, false, din, dout, 1, xr, go, T::one(), &mut dw[c * din * dout..(c + 1) * din * dout]);
                        }
                        if let Some(dx) = dx.as_mut() {
                            gemm(false, true, 1, din, dout, go, wc, T::one(), &mut dx[(bi * k + c) * din..(bi * k + c + 1) * din]);
                        }
                    }
                }
                if let Some(dx) = dx {
                    accumulate(&mut grads[x.0], &xs, dx);
                }
                if let Some(dw) = dw {
                    accumulate(&mut grads[w.0], self.shape(*w), dw);
                }
                if let Some(db) = db {
                    accumulate(&mut grads[b.0], self.shape(*b), db);
                }
            }
            Op::RegionMean { feat, weights, fallback, denom, eps } => {
                let (n, d, h, w) = self.value(*feat).dims4();
                let k = self.shape(*weights)[1];
                let hw = h * w;
                let (f, wt) = (self.value(*feat).data(), self.value(*weights).data());
                let mut dfeat = self.tracked(*feat).then(|| vec![T::zero(); f.len()]);
                let mut dwts = self.tracked(*weights).then(|| vec![T::zero(); wt.len()]);
                let mut dfb = self.tracked(*fallback).then(|| vec![T::zero(); k * d]);
                for b in 0..n {
                    for c in 0..k {
                        let s = denom[b * k + c];
                        let go = &g[(b * k + c) * d..(b * k + c + 1) * d];
                        if s < *eps {
                            if let Some(dfb) = dfb.as_mut() {
                                for (x, &v) in dfb[c * d..(c + 1) * d].iter_mut().zip(go) {
                                    *x = *x + v;
                                }
                            }
                            continue;
                        }
                        let mean = &out[(b * k + c) * d..(b * k + c + 1) * d];
                        let wrow = &wt[(b * k + c) * hw..(b * k + c + 1) * hw];
                        if let Some(df) = dfeat.as_mut() {
                            for (dd, &gv) in go.iter().enumerate() {
                                let coef = gv / s;
                                let dst = &mut df[(b * d + dd) * hw..(b * d + dd + 1) * hw];
                                for (x, &wv) in dst.iter_mut().zip(wrow) {
                                    *x = *x + coef * wv;
                                }
                            }
                        }
                        if let Some(dw) = dwts.as_mut() {
                            let dst = &mut dw[(b * k + c) * hw..(b * k + c + 1) * hw];
                            for (dd, &gv) in go.iter().enumerate() {
                                let coef = gv / s;
                                let frow = &f[(b * d + dd) * hw..(b * d + dd + 1) * hw];
                                for (x, &fv) in dst.iter_mut().zip(frow) {
                                    *x = *x + coef * (fv - mean[dd]);
                                }
                            }
                        }
                    }
                }
                if let Some(df) = dfeat {
                    accumulate(&mut grads[feat.0], self.shape(*feat), df);
                }
                if let Some(dw) = dwts {
                    accumulate(&mut grads[weights.0], self.shape(*weights), dw);
                }
                if let Some(dfb) = dfb {
                    accumulate(&mut grads[fallback.0], self.shape(*fallback), dfb);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests;
