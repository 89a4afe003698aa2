//! Losses for generator training and hole-restricted image metrics.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{PanoError, Result};
use crate::nn::{Bound, Conv, ParamBuilder};
use crate::pano::{DiminishMask, Panorama};
use crate::structure::{StructureNet, PROB_FLOOR};
use crate::tensor::Real;

pub const PSNR_CAP: f64 = 100.0;
pub const SSIM_WINDOW: usize = 7;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub w_adv: f64,
    pub w_rec_hole: f64,
    pub w_rec_valid: f64,
    pub w_perc: f64,
    pub w_struct: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { w_adv: 0.1, w_rec_hole: 6.0, w_rec_valid: 1.0, w_perc: 0.05, w_struct: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let w = [self.w_adv, self.w_rec_hole, self.w_rec_valid, self.w_perc, self.w_struct];
        if w.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
            return Err(PanoError::Config(format!("loss weights must be finite and >= 0: {w:?}")));
        }
        if w.iter().all(|&x| x == 0.0) {
            return Err(PanoError::Config("at least one loss weight must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiscriminatorConfig {
    pub base_channels: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        DiscriminatorConfig { base_channels: 16 }
    }
}

/// Patch critic: three stride-2 3x3 convs with LeakyReLU(0.2), no
/// normalization, then a 3x3 conv to one logit. Total stride 8.
#[derive(Clone, Debug)]
pub struct Discriminator {
    layers: Vec<Conv>,
    head: Conv,
}

impl Discriminator {
    pub const STRIDE: usize = 8;

    pub fn new(cfg: DiscriminatorConfig) -> Result<(Self, ParamBuilder)> {
        if cfg.base_channels == 0 {
            return Err(PanoError::Config("discriminator base_channels must be > 0".into()));
        }
        let c = cfg.base_channels;
        let mut pb = ParamBuilder::new();
        let chans = [(3, c), (c, 2 * c), (2 * c, 2 * c)];
        let layers = chans
            .iter()
            .enumerate()
            .map(|(i, &(ci, co))| Conv::new(&mut pb, &format!("d{i}"), ci, co, 3, 2, 1, 1.0))
            .collect();
        let head = Conv::new(&mut pb, "d_head", 2 * c, 1, 3, 1, 1, 1.0);
        Ok((Discriminator { layers, head }, pb))
    }

    /// Logits `[N, 1, H/8, W/8]` for images `[N, 3, H, W]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, image: Var) -> Result<Var> {
        let s = g.shape(image);
        if s.len() != 4 || s[1] != 3 || s[2] % Self::STRIDE != 0 || s[3] % Self::STRIDE != 0 {
            return Err(PanoError::shape("discriminator input", format!("{s:?}, need [N,3,H,W] with H, W divisible by 8")));
        }
        let mut x = image;
        for l in &self.layers {
            let y = l.forward(g, p, x);
            x = g.leaky_relu(y, 0.2);
        }
        Ok(self.head.forward(g, p, x))
    }
}

/// `mean(relu(1 - real)) + mean(relu(1 + fake))`.
pub fn hinge_d_loss<T: Real>(g: &mut Graph<T>, real: Var, fake: Var) -> Var {
    let r = g.scale(real, -1.0);
    let r = g.add_scalar(r, 1.0);
    let r = g.relu(r);
    let r = g.mean(r);
    let f = g.add_scalar(fake, 1.0);
    let f = g.relu(f);
    let f = g.mean(f);
    g.add(r, f)
}

/// `-mean(fake)`.
pub fn hinge_g_loss<T: Real>(g: &mut Graph<T>, fake: Var) -> Var {
    let m = g.mean(fake);
    g.scale(m, -1.0)
}

/// Mask-weighted L1, averaged over every element. `mask` is `[N,1,H,W]`.
pub fn recon_loss<T: Real>(g: &mut Graph<T>, pred: Var, target: Var, mask: Var, w_hole: f64, w_valid: f64) -> Var {
    let d = g.sub(pred, target);
    let d = g.abs(d);
    let wm = g.scale(mask, w_hole - w_valid);
    let wm = g.add_scalar(wm, w_valid);
    let d = g.mul(d, wm);
    g.mean(d)
}

/// Maps an image to the feature maps compared by [`perceptual_loss`].
pub trait FeatureExtractor {
    fn features<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Vec<Var>;
}

/// The image itself followed by `levels - 1` successive 2x average pools.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolPyramid {
    pub levels: usize,
}

impl Default for PoolPyramid {
    fn default() -> Self {
        PoolPyramid { levels: 3 }
    }
}

impl FeatureExtractor for PoolPyramid {
    fn features<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Vec<Var> {
        let mut out = vec![x];
        for _ in 1..self.levels {
            let last = *out.last().expect("non-empty");
            let s = g.shape(last);
            if s[2] % 2 != 0 || s[3] % 2 != 0 {
                break;
            }
            out.push(g.avg_pool2(last));
        }
        out
    }
}

/// `sum_l mean |F_l(pred) - F_l(target)|`.
pub fn perceptual_loss<T: Real, E: FeatureExtractor>(g: &mut Graph<T>, pred: Var, target: Var, extractor: &E) -> Result<Var> {
    let fp = extractor.features(g, pred);
    let ft = extractor.features(g, target);
    if fp.len() != ft.len() || fp.is_empty() {
        return Err(PanoError::shape("perceptual features", format!("{} vs {} levels", fp.len(), ft.len())));
    }
    let mut total: Option<Var> = None;
    for (a, b) in fp.into_iter().zip(ft) {
        if !g.value(a).all_finite() || !g.value(b).all_finite() {
            return Err(PanoError::NonFinite("perceptual features".into()));
        }
        let d = g.sub(a, b);
        let d = g.abs(d);
        let m = g.mean(d);
        total = Some(match total {
            Some(t) => g.add(t, m),
            None => m,
        });
    }
    Ok(total.expect("at least one level"))
}

/// Cross-entropy of the frozen structure net's layout for `composited`
/// (`[N,3,H,W]`, fed with an all-zero mask channel) against `gt_one_hot`,
/// summed over hole pixels and divided by their count. `sp` must be bound
/// as constants. Zero when the mask is empty.
pub fn structure_consistency_loss<T: Real>(
    g: &mut Graph<T>,
    net: &StructureNet,
    sp: &Bound,
    composited: Var,
    gt_one_hot: Var,
    mask: Var,
) -> Result<Var> {
    let (n, _, h, w) = g.value(composited).dims4();
    let count = g.value(mask).sum().as_f64();
    let zeros = g.constant(crate::tensor::Tensor::zeros(&[n, 1, h, w]));
    let input = g.concat_channels(&[composited, zeros]);
    let probs = net.forward(g, sp, input)?;
    let clipped = g.clamp(probs, PROB_FLOOR, 1.0);
    let logp = g.log(clipped);
    let picked = g.mul(logp, gt_one_hot);
    let per_pixel = g.channel_sum(picked);
    let in_hole = g.mul(per_pixel, mask);
    let s = g.sum(in_hole);
    Ok(g.scale(s, if count > 0.0 { -1.0 / count } else { 0.0 }))
}

fn check_pair(pred: &Panorama, target: &Panorama, mask: &DiminishMask) -> Result<()> {
    if pred.dims() != target.dims() || mask.dims() != pred.dims() {
        return Err(PanoError::shape("metric inputs", format!("{:?} / {:?} / {:?}", pred.dims(), target.dims(), mask.dims())));
    }
    if mask.is_empty() {
        return Err(PanoError::EmptyRegion("metric mask"));
    }
    Ok(())
}

/// `10 log10(1 / MSE)` over hole pixels, capped at 100 dB.
pub fn psnr_hole(pred: &Panorama, target: &Panorama, mask: &DiminishMask) -> Result<f64> {
    check_pair(pred, target, mask)?;
    let hw = mask.data().len();
    let (mut se, mut n) = (0.0f64, 0usize);
    for c in 0..3 {
        for (i, &m) in mask.data().iter().enumerate() {
            if m == 1 {
                let d = pred.data()[c * hw + i] as f64 - target.data()[c * hw + i] as f64;
                se += d * d;
                n += 1;
            }
        }
    }
    let mse = se / n as f64;
    Ok(if mse <= 0.0 { PSNR_CAP } else { (10.0 * (1.0 / mse).log10()).min(PSNR_CAP) })
}

pub fn l1_hole(pred: &Panorama, target: &Panorama, mask: &DiminishMask) -> Result<f64> {
    check_pair(pred, target, mask)?;
    let hw = mask.data().len();
    let mut acc = 0.0;
    for c in 0..3 {
        for (i, &m) in mask.data().iter().enumerate() {
            if m == 1 {
                acc += (pred.data()[c * hw + i] as f64 - target.data()[c * hw + i] as f64).abs();
            }
        }
    }
    Ok(acc / (3 * mask.count()) as f64)
}

/// Mean SSIM (uniform 7x7 windows, C1 = 0.01^2, C2 = 0.03^2, channel
/// average) over windows at least half covered by the mask. Windows do not
/// wrap. When no window qualifies, the window with the largest coverage is used.
pub fn ssim_hole(pred: &Panorama, target: &Panorama, mask: &DiminishMask) -> Result<f64> {
    check_pair(pred, target, mask)?;
    let (h, w) = pred.dims();
    let k = SSIM_WINDOW.min(h);
    let hw = h * w;
    // integral image of the mask for coverage queries
    let mut integ = vec![0u32; (h + 1) * (w + 1)];
    for y in 0..h {
        for x in 0..w {
            integ[(y + 1) * (w + 1) + x + 1] =
                mask.data()[y * w + x] as u32 + integ[y * (w + 1) + x + 1] + integ[(y + 1) * (w + 1) + x] - integ[y * (w + 1) + x];
        }
    }
    let cover = |y: usize, x: usize| {
        integ[(y + k) * (w + 1) + x + k] + integ[y * (w + 1) + x] - integ[y * (w + 1) + x + k] - integ[(y + k) * (w + 1) + x]
    };
    let mut windows: Vec<(usize, usize)> = Vec::new();
    let mut best = (0u32, (0usize, 0usize));
    for y in 0..=h - k {
        for x in 0..=w - k {
            let cov = cover(y, x);
            if 2 * cov as usize >= k * k {
                windows.push((y, x));
            }
            if cov > best.0 {
                best = (cov, (y, x));
            }
        }
    }
    if windows.is_empty() {
        windows.push(best.1);
    }
    let (c1, c2) = (1e-4, 9e-4);
    let nk = (k * k) as f64;
    let mut total = 0.0;
    for &(y0, x0) in &windows {
        for c in 0..3 {
            let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for y in y0..y0 + k {
                for x in x0..x0 + k {
                    let a = pred.data()[c * hw + y * w + x] as f64;
                    let b = target.data()[c * hw + y * w + x] as f64;
                    sa += a;
                    sb += b;
                    saa += a * a;
                    sbb += b * b;
                    sab += a * b;
                }
            }
            let (ma, mb) = (sa / nk, sb / nk);
            let va = saa / nk - ma * ma;
            let vb = sbb / nk - mb * mb;
            let cov = sab / nk - ma * mb;
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        }
    }
    Ok((total / (3 * windows.len()) as f64).clamp(-1.0, 1.0))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub scene_id: String,
    pub psnr_hole: f64,
    pub ssim_hole: f64,
    pub layout_iou_hole: f64,
    pub l1_hole: f64,
}

impl MetricsReport {
    /// Per-sample image metrics; `layout_iou_hole` is filled by the caller.
    pub fn image(scene_id: &str, pred: &Panorama, target: &Panorama, mask: &DiminishMask) -> Result<Self> {
        Ok(MetricsReport {
            scene_id: scene_id.to_string(),
            psnr_hole: psnr_hole(pred, target, mask)?,
            ssim_hole: ssim_hole(pred, target, mask)?,
            layout_iou_hole: 0.0,
            l1_hole: l1_hole(pred, target, mask)?,
        })
    }

    /// Field-wise mean, tagged `scene_id = "aggregate"`.
    pub fn aggregate(reports: &[MetricsReport]) -> Result<Self> {
        if reports.is_empty() {
            return Err(PanoError::EmptyRegion("metrics aggregate"));
        }
        let n = reports.len() as f64;
        let mean = |f: fn(&MetricsReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        Ok(MetricsReport {
            scene_id: "aggregate".into(),
            psnr_hole: mean(|r| r.psnr_hole),
            ssim_hole: mean(|r| r.ssim_hole),
            layout_iou_hole: mean(|r| r.layout_iou_hole),
            l1_hole: mean(|r| r.l1_hole),
        })
    }

    /// JSON lines: one per sample, then the aggregate.
    pub fn to_json_lines(reports: &[MetricsReport]) -> Result<String> {
        let mut out = String::new();
        for r in reports.iter().cloned().chain(std::iter::once(Self::aggregate(reports)?)) {
            out.push_str(&serde_json::to_string(&r)?);
            out.push('\n');
        }
        Ok(out)
    }
}

/// Hole filled with the mean colour of the valid pixels.
pub fn context_mean_fill(input: &Panorama, mask: &DiminishMask) -> Result<Panorama> {
    if input.dims() != mask.dims() {
        return Err(PanoError::shape("mask", format!("{:?} vs {:?}", mask.dims(), input.dims())));
    }
    let hw = mask.data().len();
    let valid = hw - mask.count();
    let mut out = input.clone();
    for c in 0..3 {
        let plane = &input.data()[c * hw..(c + 1) * hw];
        let mean = if valid == 0 {
            0.5
        } else {
            plane.iter().zip(mask.data()).filter(|(_, &m)| m == 0).map(|(&v, _)| v as f64).sum::<f64>() / valid as f64
        };
        for (i, &m) in mask.data().iter().enumerate() {
            if m == 1 {
                out.data_mut()[c * hw + i] = mean as f32;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn hinge_closed_forms() {
        let mut g = Graph::<f64>::new();
        let r = g.constant(Tensor::full(&[1, 1, 2, 2], 2.0));
        let f = g.constant(Tensor::full(&[1, 1, 2, 2], -2.0));
        let l = hinge_d_loss(&mut g, r, f);
        assert_eq!(g.value(l).data(), &[0.0]);
        let z = g.constant(Tensor::zeros(&[1, 1, 2, 2]));
        let l = hinge_d_loss(&mut g, z, z);
        assert_eq!(g.value(l).data(), &[2.0]);
        let f = g.param(Tensor::from_f64(&[2], &[1.0, 3.0]));
        let l = hinge_g_loss(&mut g, f);
        assert_eq!(g.value(l).data(), &[-2.0]);
        let grads = g.backward(l);
        assert_eq!(grads.get(f).unwrap().data(), &[-0.5, -0.5]);
    }

    #[test]
    fn recon_closed_form() {
        let mut g = Graph::<f64>::new();
        let p = g.constant(Tensor::full(&[1, 3, 2, 2], 0.5));
        let t = g.constant(Tensor::zeros(&[1, 3, 2, 2]));
        let m = g.constant(Tensor::from_f64(&[1, 1, 2, 2], &[1.0, 1.0, 0.0, 0.0]));
        let l = recon_loss(&mut g, p, t, m, 6.0, 1.0);
        assert!((g.value(l).data()[0] - 1.75).abs() < 1e-12);
        let l = recon_loss(&mut g, p, p, m, 6.0, 1.0);
        assert_eq!(g.value(l).data(), &[0.0]);
    }

    #[test]
    fn pyramid_perceptual_hand_computed() {
        // 4x4 single-channel pair broadcast to 3 channels; differences at
        // level 0 are 1 at one pixel, pooled levels see 1/4 and 1/16.
        let mut a = Tensor::<f64>::zeros(&[1, 3, 4, 4]);
        for c in 0..3 {
            a.data_mut()[c * 16] = 1.0;
        }
        let b = Tensor::<f64>::zeros(&[1, 3, 4, 4]);
        let mut g = Graph::new();
        let (av, bv) = (g.constant(a), g.constant(b));
        let l = perceptual_loss(&mut g, av, bv, &PoolPyramid::default()).unwrap();
        let expect = 1.0 / 16.0 + 0.25 / 4.0 + 0.0625;
        assert!((g.value(l).data()[0] - expect).abs() < 1e-12);
        let l1 = perceptual_loss(&mut g, av, bv, &PoolPyramid { levels: 1 }).unwrap();
        assert!((g.value(l1).data()[0] - 1.0 / 16.0).abs() < 1e-12);
    }

    #[test]
    fn discriminator_output_scales_with_width() {
        let (d, pb) = Discriminator::new(DiscriminatorConfig { base_channels: 4 }).unwrap();
        let params = pb.init::<f32>(1);
        for w in [16, 32] {
            let mut g = Graph::new();
            let p = params.bind(&mut g, false);
            let x = g.constant(Tensor::full(&[1, 3, 8, w], 0.3));
            let y = d.forward(&mut g, &p, x).unwrap();
            assert_eq!(g.shape(y), &[1, 1, 1, w / 8]);
        }
        let mut g = Graph::new();
        let p = params.bind(&mut g, false);
        let x = g.constant(Tensor::full(&[1, 3, 8, 12], 0.3));
        assert!(d.forward(&mut g, &p, x).is_err());
    }

    #[test]
    fn metric_caps_and_closed_forms() {
        let a = Panorama::constant(8, [0.5; 3]).unwrap();
        let m = DiminishMask::ones(8).unwrap();
        assert_eq!(psnr_hole(&a, &a, &m).unwrap(), PSNR_CAP);
        assert!((ssim_hole(&a, &a, &m).unwrap() - 1.0).abs() < 1e-12);
        let b = Panorama::constant(8, [0.6; 3]).unwrap();
        assert!((psnr_hole(&a, &b, &m).unwrap() - 20.0).abs() < 1e-5);
        assert!(psnr_hole(&a, &b, &DiminishMask::zeros(8).unwrap()).is_err());
    }

    #[test]
    fn mean_fill_uses_context_only() {
        let mut p = Panorama::constant(8, [0.2, 0.4, 0.6]).unwrap();
        let mut m = DiminishMask::zeros(8).unwrap();
        m.set(3, 3, true);
        p.set(0, 3, 3, 1.0);
        let f = context_mean_fill(&p, &m).unwrap();
        assert!((f.get(0, 3, 3) - 0.2).abs() < 1e-6);
        assert!((f.get(2, 3, 3) - 0.6).abs() < 1e-6);
    }
}
