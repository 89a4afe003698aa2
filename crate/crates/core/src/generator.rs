//! Layout-guided inpainting generator.
//!
//! Gated-convolution encoder / decoder (undecimated, dilation `2^l` at level
//! `l`). Every decoder stage is preceded by a structure-aware regional
//! normalization: features are instance-normalized, then modulated per pixel
//! by `gamma(p) = sum_c layout_c(p) * (1 + mlp_gamma_c(style_c))` and
//! `beta(p) = sum_c layout_c(p) * mlp_beta_c(style_c)`, where `style_c` is the
//! mean of a pointwise projection of the masked input over the unmasked
//! support of layout class `c`.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{PanoError, Result};
use crate::nn::{Bound, Conv, Init, ParamBuilder, ParamId, ParamStore};
use crate::pano::NUM_CLASSES;
use crate::structure::{check_input, INPUT_CHANNELS};
use crate::tensor::{Real, Tensor};

/// Total class weight below which a style is treated as absent.
pub const STYLE_PRESENCE_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateActivation {
    Elu,
    LeakyRelu,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub base_channels: usize,
    pub depth: usize,
    pub style_dim: usize,
    /// Feature-branch activation; the gate is always a logistic sigmoid.
    pub activation: GateActivation,
    pub norm_eps: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig { base_channels: 8, depth: 3, style_dim: 8, activation: GateActivation::Elu, norm_eps: 1e-5 }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.style_dim == 0 {
            return Err(PanoError::Config("style_dim must be >= 1".into()));
        }
        if !(self.norm_eps > 0.0) {
            return Err(PanoError::Config("norm_eps must be > 0".into()));
        }
        if self.base_channels == 0 || self.depth == 0 || self.depth > 8 {
            return Err(PanoError::Config(format!("generator {self:?}")));
        }
        Ok(())
    }
}

/// `phi(conv_f(x)) * sigmoid(conv_g(x))` over a shared seam-aware pad.
#[derive(Clone, Debug)]
pub struct GatedConv {
    pub feature: Conv,
    pub gate: Conv,
    pub activation: GateActivation,
}

impl GatedConv {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        pb: &mut ParamBuilder,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        dilation: usize,
        activation: GateActivation,
    ) -> Self {
        GatedConv {
            feature: Conv::new(pb, &format!("{name}.feature"), cin, cout, kernel, 1, dilation, 1.0),
            gate: Conv::new(pb, &format!("{name}.gate"), cin, cout, kernel, 1, dilation, 1.0),
            activation,
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Var {
        let pad = self.feature.pad();
        let xp = if pad > 0 { g.circular_pad(x, pad, pad) } else { x };
        let f = self.feature.apply_padded(g, p, xp);
        let f = match self.activation {
            GateActivation::Elu => g.elu(f),
            GateActivation::LeakyRelu => g.leaky_relu(f, 0.2),
        };
        let gate = self.gate.apply_padded(g, p, xp);
        let gate = g.sigmoid(gate);
        g.mul(f, gate)
    }
}

/// Per-class style vectors `[N, 3, D]` plus presence flags (`[n * 3 + c]`).
#[derive(Clone, Copy, Debug)]
pub struct StyleBank {
    pub styles: Var,
}

/// Weighted class means of `features` with weights `layout * (1 - mask)`.
///
/// `layout` (`[N, 3, h, w]`) and `mask` (`[N, 1, h, w]`) must already be at the
/// feature resolution. Absent classes take the rows of `defaults` (`[3, D]`).
pub fn extract_style_bank<T: Real>(
    g: &mut Graph<T>,
    features: Var,
    layout: Var,
    mask: Var,
    defaults: Var,
) -> (StyleBank, Vec<bool>) {
    let keep = g.scale(mask, -1.0);
    let keep = g.add_scalar(keep, 1.0);
    let weights = g.mul(layout, keep);
    let (styles, present) = g.region_mean(features, weights, defaults, STYLE_PRESENCE_EPS);
    (StyleBank { styles }, present)
}

/// Brings layout probabilities and the mask down to `factor`-times smaller
/// feature maps: area averaging, with probabilities renormalized.
pub fn to_feature_resolution<T: Real>(g: &mut Graph<T>, layout: Var, mask: Var, factor: usize) -> (Var, Var) {
    assert!(factor.is_power_of_two(), "resolution factor must be a power of two");
    let (mut l, mut m) = (layout, mask);
    for _ in 0..factor.trailing_zeros() {
        l = g.avg_pool2(l);
        m = g.avg_pool2(m);
    }
    if factor > 1 {
        let s = g.channel_sum(l);
        l = g.div(l, s);
    }
    (l, m)
}

/// Per-class MLP producing the modulation of one normalization layer.
#[derive(Clone, Debug)]
pub struct StructureNorm {
    pub hidden_w: ParamId,
    pub hidden_b: ParamId,
    pub gamma_w: ParamId,
    pub gamma_b: ParamId,
    pub beta_w: ParamId,
    pub beta_b: ParamId,
    pub eps: f64,
}

impl StructureNorm {
    pub fn new(pb: &mut ParamBuilder, name: &str, style_dim: usize, channels: usize, eps: f64) -> Self {
        let k = NUM_CLASSES;
        let d = style_dim;
        StructureNorm {
            hidden_w: pb.add(format!("{name}.hidden.weight"), &[k, d, d], Init::Kaiming { fan_in: d, gain: 1.0 }),
            hidden_b: pb.add(format!("{name}.hidden.bias"), &[k, d], Init::Const(0.0)),
            gamma_w: pb.add(format!("{name}.gamma.weight"), &[k, d, channels], Init::Kaiming { fan_in: d, gain: 0.1 }),
            gamma_b: pb.add(format!("{name}.gamma.bias"), &[k, channels], Init::Const(0.0)),
            beta_w: pb.add(format!("{name}.beta.weight"), &[k, d, channels], Init::Kaiming { fan_in: d, gain: 0.1 }),
            beta_b: pb.add(format!("{name}.beta.bias"), &[k, channels], Init::Const(0.0)),
            eps,
        }
    }

    /// Per-class `(1 + gamma_c, beta_c)`, each `[N, 3, C]`.
    pub fn modulation<T: Real>(&self, g: &mut Graph<T>, p: &Bound, bank: &StyleBank) -> (Var, Var) {
        let h = g.class_linear(bank.styles, p[self.hidden_w], p[self.hidden_b]);
        let h = g.relu(h);
        let gamma = g.class_linear(h, p[self.gamma_w], p[self.gamma_b]);
        let gamma = g.add_scalar(gamma, 1.0);
        let beta = g.class_linear(h, p[self.beta_w], p[self.beta_b]);
        (gamma, beta)
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var, layout: Var, bank: &StyleBank) -> Var {
        let xhat = g.instance_norm(x, self.eps);
        let (gamma, beta) = self.modulation(g, p, bank);
        let gamma_map = g.mix_by_layout(layout, gamma);
        let beta_map = g.mix_by_layout(layout, beta);
        let y = g.mul(xhat, gamma_map);
        g.add(y, beta_map)
    }
}

#[derive(Clone, Debug)]
pub struct Generator {
    cfg: GeneratorConfig,
    encoder: Vec<GatedConv>,
    bottleneck: GatedConv,
    style_proj: Conv,
    default_styles: ParamId,
    decoder: Vec<(StructureNorm, GatedConv)>,
    out_norm: StructureNorm,
    out_conv: Conv,
}

/// Tensors produced by one generator pass.
#[derive(Clone, Debug)]
pub struct GeneratorOutput {
    pub raw: Var,
    pub present: Vec<bool>,
}

impl Generator {
    pub fn new(cfg: GeneratorConfig) -> Result<(Self, ParamBuilder)> {
        cfg.validate()?;
        let mut pb = ParamBuilder::new();
        let (c, d, act) = (cfg.base_channels, cfg.style_dim, cfg.activation);
        let encoder = (0..cfg.depth)
            .map(|l| {
                let cin = if l == 0 { INPUT_CHANNELS } else { c };
                GatedConv::new(&mut pb, &format!("enc{l}"), cin, c, 3, 1 << l, act)
            })
            .collect();
        let bottleneck = GatedConv::new(&mut pb, "bottleneck", c, c, 3, 1 << cfg.depth, act);
        let style_proj = Conv::new(&mut pb, "style_proj", INPUT_CHANNELS, d, 1, 1, 1, 1.0);
        let default_styles = pb.add("default_styles", &[NUM_CLASSES, d], Init::Const(0.0));
        let decoder = (0..cfg.depth)
            .rev()
            .map(|l| {
                (
                    StructureNorm::new(&mut pb, &format!("dec{l}.norm"), d, c, cfg.norm_eps),
                    GatedConv::new(&mut pb, &format!("dec{l}"), 2 * c, c, 3, 1 << l, act),
                )
            })
            .collect();
        let out_norm = StructureNorm::new(&mut pb, "out.norm", d, c, cfg.norm_eps);
        let out_conv = Conv::new(&mut pb, "out", c, 3, 3, 1, 1, 1.0);
        Ok((
            Generator { cfg, encoder, bottleneck, style_proj, default_styles, decoder, out_norm, out_conv },
            pb,
        ))
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.cfg
    }

    /// Full-frame prediction in `[0, 1]` for `input = masked RGB (+) mask`
    /// (`[N, 4, H, W]`) guided by `layout` probabilities (`[N, 3, H, W]`).
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, input: Var, layout: Var) -> Result<GeneratorOutput> {
        check_input(g.shape(input), INPUT_CHANNELS, self.cfg.depth, "generator input")?;
        let (n, _, h, w) = g.value(input).dims4();
        if g.shape(layout) != [n, NUM_CLASSES, h, w] {
            return Err(PanoError::shape("generator layout", format!("{:?} for input {n}x4x{h}x{w}", g.shape(layout))));
        }
        let mask = g.slice_channels(input, 3, 1);

        let mut x = input;
        let mut skips = Vec::with_capacity(self.cfg.depth);
        for gc in &self.encoder {
            x = gc.forward(g, p, x);
            skips.push(x);
        }
        x = self.bottleneck.forward(g, p, x);

        // styles are pooled from a pointwise projection of the visible pixels
        let proj = self.style_proj.forward(g, p, input);
        let (layout_f, mask_f) = to_feature_resolution(g, layout, mask, 1);
        let (bank, present) = extract_style_bank(g, proj, layout_f, mask_f, p[self.default_styles]);

        for (norm, gc) in &self.decoder {
            let skip = skips.pop().expect("one skip per level");
            let y = norm.forward(g, p, x, layout_f, &bank);
            let cat = g.concat_channels(&[y, skip]);
            x = gc.forward(g, p, cat);
        }
        let y = self.out_norm.forward(g, p, x, layout_f, &bank);
        let y = self.out_conv.forward(g, p, y);
        Ok(GeneratorOutput { raw: g.sigmoid(y), present })
    }

    /// Untracked inference returning the raw `[N, 3, H, W]` prediction.
    pub fn generate<T: Real>(&self, params: &ParamStore<T>, input: &Tensor<T>, layout: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let p = params.bind(&mut g, false);
        let x = g.constant(input.clone());
        let l = g.constant(layout.clone());
        let out = self.forward(&mut g, &p, x, l)?;
        Ok(g.value(out.raw).clone())
    }
}

/// Layout replaced by `1/3` everywhere (the structure-guidance ablation).
pub fn uniform_layout<T: Real>(n: usize, h: usize, w: usize) -> Tensor<T> {
    Tensor::full(&[n, NUM_CLASSES, h, w], T::lit(1.0 / NUM_CLASSES as f64))
}

/// Pixelwise `input * (1 - mask) + raw * mask` on `[N, 3, H, W]` / `[N, 1, H, W]` graph values.
pub fn composite_var<T: Real>(g: &mut Graph<T>, input_rgb: Var, raw: Var, mask: Var) -> Var {
    let keep = g.scale(mask, -1.0);
    let keep = g.add_scalar(keep, 1.0);
    let a = g.mul(input_rgb, keep);
    let b = g.mul(raw, mask);
    g.add(a, b)
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
        Tensor::new(shape, (0..shape.iter().product()).map(|_| rng.gen_range(lo..hi)).collect())
    }

    fn gated_with_gate_bias(bias: f64) -> (Tensor<f64>, Tensor<f64>, Tensor<f64>) {
        let mut pb = ParamBuilder::new();
        let gc = GatedConv::new(&mut pb, "g", 2, 3, 3, 1, GateActivation::Elu);
        let mut params: ParamStore<f64> = pb.init(4);
        params.get_mut(gc.gate.weight).data_mut().fill(0.0);
        params.get_mut(gc.gate.bias).data_mut().fill(bias);
        params.get_mut(gc.feature.bias).data_mut().fill(0.3);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_tensor(&mut rng, &[1, 2, 4, 8], -1.0, 1.0);
        let mut g = Graph::new();
        let p = params.bind(&mut g, false);
        let xv = g.constant(x);
        let y = gc.forward(&mut g, &p, xv);
        let f = gc.feature.forward(&mut g, &p, xv);
        let f = g.elu(f);
        let zero = g.constant(Tensor::zeros(&[1, 2, 4, 8]));
        let z = gc.forward(&mut g, &p, zero);
        (g.value(y).clone(), g.value(f).clone(), g.value(z).clone())
    }

    #[test]
    fn gate_saturation() {
        let (y, f, _) = gated_with_gate_bias(20.0);
        assert!(y.max_abs_diff(&f) < 1e-8);
        let (y, _, _) = gated_with_gate_bias(-20.0);
        assert!(y.data().iter().all(|v| v.abs() < 1e-7));
    }

    #[test]
    fn zero_input_zero_bias_gives_zero() {
        let mut pb = ParamBuilder::new();
        let gc = GatedConv::new(&mut pb, "g", 2, 3, 3, 2, GateActivation::Elu);
        let params: ParamStore<f64> = pb.init(4);
        let mut g = Graph::new();
        let p = params.bind(&mut g, false);
        let x = g.constant(Tensor::zeros(&[1, 2, 4, 8]));
        let y = gc.forward(&mut g, &p, x);
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    fn bank_for(features: Tensor<f64>, layout: Tensor<f64>, mask: Tensor<f64>) -> (Tensor<f64>, Vec<bool>) {
        let d = features.shape()[1];
        let mut g = Graph::new();
        let f = g.constant(features);
        let l = g.constant(layout);
        let m = g.constant(mask);
        let defaults = g.constant(Tensor::full(&[3, d], -7.0));
        let (bank, present) = extract_style_bank(&mut g, f, l, m, defaults);
        (g.value(bank.styles).clone(), present)
    }

    #[test]
    fn style_of_constant_features_is_that_constant() {
        let features = Tensor::full(&[1, 2, 4, 8], 0.625);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut layout = rand_tensor(&mut rng, &[1, 3, 4, 8], 0.1, 1.0);
        for p in 0..32 {
            let s: f64 = (0..3).map(|c| layout.data()[c * 32 + p]).sum();
            (0..3).for_each(|c| layout.data_mut()[c * 32 + p] /= s);
        }
        let mask = Tensor::new(&[1, 1, 4, 8], (0..32).map(|i| (i % 3 == 0) as u8 as f64).collect());
        let (styles, present) = bank_for(features, layout.clone(), mask);
        assert!(present.iter().all(|&p| p));
        assert!(styles.data().iter().all(|v| (v - 0.625).abs() < 1e-12));

        let (styles, present) = bank_for(Tensor::full(&[1, 2, 4, 8], 0.625), layout, Tensor::full(&[1, 1, 4, 8], 1.0));
        assert_eq!(present, vec![false; 3]);
        assert!(styles.data().iter().all(|&v| v == -7.0));
    }

    #[test]
    fn two_class_styles_match_accumulation_oracle() {
        // Hard layout: top half wall, bottom half floor, with distinct features.
        let (h, w, d) = (4, 8, 3);
        let mut layout = Tensor::<f64>::zeros(&[1, 3, h, w]);
        let mut features = Tensor::<f64>::zeros(&[1, d, h, w]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mask: Vec<f64> = (0..h * w).map(|_| (rng.gen_range(0.0..1.0) < 0.3) as u8 as f64).collect();
        for y in 0..h {
            for x in 0..w {
                let class = if y < h / 2 { 1 } else { 2 };
                layout.data_mut()[class * h * w + y * w + x] = 1.0;
                for c in 0..d {
                    features.data_mut()[c * h * w + y * w + x] = if class == 1 { 0.2 + c as f64 } else { -1.5 * c as f64 };
                }
            }
        }
        let (styles, present) = bank_for(features.clone(), layout.clone(), Tensor::new(&[1, 1, h, w], mask.clone()));
        assert_eq!(present, vec![false, true, true]);
        for class in 1..3 {
            for c in 0..d {
                let (mut num, mut den) = (0.0, 0.0);
                for p in 0..h * w {
                    let wgt = layout.data()[class * h * w + p] * (1.0 - mask[p]);
                    num += wgt * features.data()[c * h * w + p];
                    den += wgt;
                }
                assert!((styles.data()[class * d + c] - num / den).abs() < 1e-12);
            }
        }
        assert!((styles.data()[d] - 0.2).abs() < 1e-12 && (styles.data()[2 * d + 1] + 1.5).abs() < 1e-12);
    }

    #[test]
    fn style_bank_ignores_pixel_order_within_support() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let features = rand_tensor(&mut rng, &[1, 2, 4, 8], -1.0, 1.0);
        let layout = Tensor::<f64>::full(&[1, 3, 4, 8], 1.0 / 3.0);
        let mask = Tensor::zeros(&[1, 1, 4, 8]);
        let (a, _) = bank_for(features.clone(), layout.clone(), mask.clone());
        let mut perm: Vec<usize> = (0..32).collect();
        perm.reverse();
        perm.swap(3, 17);
        let mut shuffled = features.clone();
        for c in 0..2 {
            for (i, &j) in perm.iter().enumerate() {
                shuffled.data_mut()[c * 32 + i] = features.data()[c * 32 + j];
            }
        }
        let (b, _) = bank_for(shuffled, layout, mask);
        assert!(a.max_abs_diff(&b) < 1e-12);
    }

    fn norm_setup() -> (StructureNorm, ParamStore<f64>, Tensor<f64>, Tensor<f64>) {
        let mut pb = ParamBuilder::new();
        let norm = StructureNorm::new(&mut pb, "n", 4, 3, 1e-5);
        let mut params: ParamStore<f64> = pb.init(5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for id in [norm.gamma_b, norm.beta_b] {
            for v in params.get_mut(id).data_mut() {
                *v = rng.gen_range(-1.0..1.0);
            }
        }
        let styles = rand_tensor(&mut rng, &[2, 3, 4], -1.0, 1.0);
        let x = rand_tensor(&mut rng, &[2, 3, 4, 8], -2.0, 2.0);
        (norm, params, styles, x)
    }

    fn run_norm(norm: &StructureNorm, params: &ParamStore<f64>, styles: &Tensor<f64>, x: &Tensor<f64>, layout: &Tensor<f64>) -> (Tensor<f64>, Tensor<f64>, Tensor<f64>) {
        let mut g = Graph::new();
        let p = params.bind(&mut g, false);
        let bank = StyleBank { styles: g.constant(styles.clone()) };
        let xv = g.constant(x.clone());
        let lv = g.constant(layout.clone());
        let y = norm.forward(&mut g, &p, xv, lv, &bank);
        let (gm, bt) = norm.modulation(&mut g, &p, &bank);
        (g.value(y).clone(), g.value(gm).clone(), g.value(bt).clone())
    }

    fn instance_normalized(x: &Tensor<f64>, eps: f64) -> Vec<f64> {
        let (n, c, h, w) = x.dims4();
        let hw = h * w;
        let mut out = Vec::new();
        for pl in 0..n * c {
            let s = &x.data()[pl * hw..(pl + 1) * hw];
            let mean = s.iter().sum::<f64>() / hw as f64;
            let var = s.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / hw as f64;
            out.extend(s.iter().map(|v| (v - mean) / (var + eps).sqrt()));
        }
        out
    }

    #[test]
    fn single_class_layout_is_conditional_instance_norm() {
        let (norm, params, styles, x) = norm_setup();
        let mut layout = Tensor::zeros(&[2, 3, 4, 8]);
        for b in 0..2 {
            layout.data_mut()[(b * 3 + 2) * 32..(b * 3 + 3) * 32].fill(1.0);
        }
        let (y, gm, bt) = run_norm(&norm, &params, &styles, &x, &layout);
        let xhat = instance_normalized(&x, 1e-5);
        for b in 0..2 {
            for ch in 0..3 {
                let (gam, bet) = (gm.data()[(b * 3 + 2) * 3 + ch], bt.data()[(b * 3 + 2) * 3 + ch]);
                for p in 0..32 {
                    let i = (b * 3 + ch) * 32 + p;
                    assert!((y.data()[i] - (gam * xhat[i] + bet)).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn equal_class_codes_make_modulation_layout_independent() {
        let (norm, params, mut styles, x) = norm_setup();
        let mut params = params;
        // identical per-class MLPs and identical styles give identical outputs
        for id in [norm.hidden_w, norm.hidden_b, norm.gamma_w, norm.gamma_b, norm.beta_w, norm.beta_b] {
            let t = params.get_mut(id);
            let per = t.len() / 3;
            let first = t.data()[..per].to_vec();
            for c in 1..3 {
                t.data_mut()[c * per..(c + 1) * per].copy_from_slice(&first);
            }
        }
        for b in 0..2 {
            let first = styles.data()[b * 12..b * 12 + 4].to_vec();
            for c in 1..3 {
                styles.data_mut()[b * 12 + c * 4..b * 12 + c * 4 + 4].copy_from_slice(&first);
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut layout_a = rand_tensor(&mut rng, &[2, 3, 4, 8], 0.0, 1.0);
        for b in 0..2 {
            for p in 0..32 {
                let s: f64 = (0..3).map(|c| layout_a.data()[(b * 3 + c) * 32 + p]).sum();
                (0..3).for_each(|c| layout_a.data_mut()[(b * 3 + c) * 32 + p] /= s);
            }
        }
        let layout_b = uniform_layout::<f64>(2, 4, 8);
        let (ya, _, _) = run_norm(&norm, &params, &styles, &x, &layout_a);
        let (yb, _, _) = run_norm(&norm, &params, &styles, &x, &layout_b);
        assert!(ya.max_abs_diff(&yb) < 1e-12);
    }

    #[test]
    fn identity_modulation_yields_unit_instance_statistics() {
        let mut pb = ParamBuilder::new();
        let norm = StructureNorm::new(&mut pb, "n", 2, 3, 1e-5);
        let mut params: ParamStore<f64> = pb.init(1);
        for id in [norm.gamma_w, norm.gamma_b, norm.beta_w, norm.beta_b] {
            params.get_mut(id).data_mut().fill(0.0);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_tensor(&mut rng, &[1, 3, 8, 16], -3.0, 5.0);
        let styles = rand_tensor(&mut rng, &[1, 3, 2], -1.0, 1.0);
        let mut layout = rand_tensor(&mut rng, &[1, 3, 8, 16], 0.0, 1.0);
        for p in 0..128 {
            let s: f64 = (0..3).map(|c| layout.data()[c * 128 + p]).sum();
            (0..3).for_each(|c| layout.data_mut()[c * 128 + p] /= s);
        }
        let (y, _, _) = run_norm(&norm, &params, &styles, &x, &layout);
        for c in 0..3 {
            let s = &y.data()[c * 128..(c + 1) * 128];
            let mean = s.iter().sum::<f64>() / 128.0;
            let var = s.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 128.0;
            assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn structure_norm_matches_per_pixel_reference() {
        let (norm, params, styles, x) = norm_setup();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let layout = rand_tensor(&mut rng, &[2, 3, 4, 8], 0.0, 1.0);
        let (y, _, _) = run_norm(&norm, &params, &styles, &x, &layout);
        let xhat = instance_normalized(&x, 1e-5);
        let t = |id: ParamId| params.get(id).data().to_vec();
        let (hw_, hb, gw, gb, bw, bb) = (t(norm.hidden_w), t(norm.hidden_b), t(norm.gamma_w), t(norm.gamma_b), t(norm.beta_w), t(norm.beta_b));
        let (d, c) = (4, 3);
        for b in 0..2 {
            for ch in 0..c {
                for p in 0..32 {
                    let (mut gam, mut bet) = (0.0, 0.0);
                    for k in 0..3 {
                        let s = &styles.data()[(b * 3 + k) * d..(b * 3 + k + 1) * d];
                        let hidden: Vec<f64> = (0..d)
                            .map(|j| (hb[k * d + j] + (0..d).map(|i| s[i] * hw_[(k * d + i) * d + j]).sum::<f64>()).max(0.0))
                            .collect();
                        let gk = 1.0 + gb[k * c + ch] + (0..d).map(|j| hidden[j] * gw[(k * d + j) * c + ch]).sum::<f64>();
                        let bk = bb[k * c + ch] + (0..d).map(|j| hidden[j] * bw[(k * d + j) * c + ch]).sum::<f64>();
                        let l = layout.data()[(b * 3 + k) * 32 + p];
                        gam += l * gk;
                        bet += l * bk;
                    }
                    let i = (b * c + ch) * 32 + p;
                    assert!((y.data()[i] - (gam * xhat[i] + bet)).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn untrained_output_is_finite_and_in_range() {
        let (gen, pb) = Generator::new(GeneratorConfig { base_channels: 4, depth: 2, style_dim: 3, ..Default::default() }).unwrap();
        for seed in 0..100u64 {
            let params: ParamStore<f32> = pb.init(seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut input = rand_tensor(&mut rng, &[1, 4, 8, 16], 0.0, 1.0).cast::<f32>();
            for p in 0..128 {
                input.data_mut()[3 * 128 + p] = (p % 5 == 0) as u8 as f32;
            }
            let layout = uniform_layout::<f32>(1, 8, 16);
            let raw = gen.generate(&params, &input, &layout).unwrap();
            assert!(raw.data().iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn generator_rejects_bad_shapes() {
        let (gen, pb) = Generator::new(GeneratorConfig { base_channels: 2, depth: 2, style_dim: 2, ..Default::default() }).unwrap();
        let params: ParamStore<f32> = pb.init(0);
        let err = gen.generate(&params, &Tensor::zeros(&[1, 4, 8, 18]), &uniform_layout(1, 8, 18)).unwrap_err();
        assert!(err.to_string().contains("width 18"));
        let err = gen.generate(&params, &Tensor::zeros(&[1, 4, 8, 16]), &uniform_layout(1, 4, 8)).unwrap_err();
        assert!(err.to_string().contains("layout"));
        assert!(Generator::new(GeneratorConfig { style_dim: 0, ..Default::default() }).is_err());
        assert!(Generator::new(GeneratorConfig { norm_eps: 0.0, ..Default::default() }).is_err());
    }
}
