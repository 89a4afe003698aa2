//! Dense ceiling / wall / floor segmentation of masked panoramas.
//!
//! The network is an undecimated U-Net: instead of striding, level `l` uses
//! convolutions dilated by `2^l` at full resolution. Every layer pads with the
//! seam-aware circular pad and there is no positional input, so the output is
//! equivariant to horizontal rolls by any number of columns.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{PanoError, Result};
use crate::nn::{Bound, Conv, ParamBuilder, ParamStore};
use crate::pano::{DiminishMask, LayoutMap, NUM_CLASSES};
use crate::tensor::{Real, Tensor};

pub const INPUT_CHANNELS: usize = 4;
pub const PROB_FLOOR: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct StructureNetConfig {
    pub base_channels: usize,
    pub depth: usize,
}

impl Default for StructureNetConfig {
    fn default() -> Self {
        StructureNetConfig { base_channels: 8, depth: 4 }
    }
}

impl StructureNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 || self.depth == 0 || self.depth > 8 {
            return Err(PanoError::Config(format!("structure net {self:?}")));
        }
        Ok(())
    }
}

/// Rejects inputs that are not `[N, expected_c, H, W]` with `H` and `W`
/// divisible by `2^depth`.
pub(crate) fn check_input(shape: &[usize], expected_c: usize, depth: usize, what: &'static str) -> Result<()> {
    let [_, c, h, w] = shape else {
        return Err(PanoError::shape(what, format!("expected rank 4, got {shape:?}")));
    };
    if *c != expected_c {
        return Err(PanoError::shape(what, format!("channels: expected {expected_c}, got {c}")));
    }
    let unit = 1usize << depth;
    if *h % unit != 0 || *h == 0 {
        return Err(PanoError::shape(what, format!("height {h} not divisible by {unit}")));
    }
    if *w % unit != 0 || *w == 0 {
        return Err(PanoError::shape(what, format!("width {w} not divisible by {unit}")));
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct StructureNet {
    cfg: StructureNetConfig,
    encoder: Vec<(Conv, Conv)>,
    decoder: Vec<Conv>,
    head: Conv,
}

impl StructureNet {
    pub fn new(cfg: StructureNetConfig) -> Result<(Self, ParamBuilder)> {
        cfg.validate()?;
        let mut pb = ParamBuilder::new();
        let c = cfg.base_channels;
        let encoder = (0..cfg.depth)
            .map(|l| {
                let d = 1 << l;
                let cin = if l == 0 { INPUT_CHANNELS } else { c };
                (
                    Conv::new(&mut pb, &format!("enc{l}.a"), cin, c, 3, 1, d, 1.0),
                    Conv::new(&mut pb, &format!("enc{l}.b"), c, c, 3, 1, d, 1.0),
                )
            })
            .collect();
        let decoder = (0..cfg.depth - 1)
            .rev()
            .map(|l| Conv::new(&mut pb, &format!("dec{l}"), 2 * c, c, 3, 1, 1 << l, 1.0))
            .collect();
        let head = Conv::new(&mut pb, "head", c, NUM_CLASSES, 1, 1, 1, 1.0);
        Ok((StructureNet { cfg, encoder, decoder, head }, pb))
    }

    pub fn config(&self) -> &StructureNetConfig {
        &self.cfg
    }

    /// Layout probabilities `[N, 3, H, W]` for a `[N, 4, H, W]` masked input.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, input: Var) -> Result<Var> {
        check_input(g.shape(input), INPUT_CHANNELS, self.cfg.depth, "structure input")?;
        let mut h = input;
        let mut skips = Vec::with_capacity(self.cfg.depth);
        for (a, b) in &self.encoder {
            let y = a.forward(g, p, h);
            let y = g.elu(y);
            let y = b.forward(g, p, y);
            h = g.elu(y);
            skips.push(h);
        }
        skips.pop();
        for conv in &self.decoder {
            let skip = skips.pop().expect("one skip per decoder level");
            let cat = g.concat_channels(&[h, skip]);
            let y = conv.forward(g, p, cat);
            h = g.elu(y);
        }
        let logits = self.head.forward(g, p, h);
        Ok(g.softmax_channels(logits))
    }

    /// Untracked inference.
    pub fn predict<T: Real>(&self, params: &ParamStore<T>, input: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let p = params.bind(&mut g, false);
        let x = g.constant(input.clone());
        let probs = self.forward(&mut g, &p, x)?;
        Ok(g.value(probs).clone())
    }
}

/// Mean per-pixel cross-entropy of `probs` against one-hot targets, with
/// probabilities clipped to `[1e-7, 1]`.
pub fn layout_loss<T: Real>(g: &mut Graph<T>, probs: Var, gt_one_hot: Var) -> Var {
    let clipped = g.clamp(probs, PROB_FLOOR, 1.0);
    let logp = g.log(clipped);
    let picked = g.mul(logp, gt_one_hot);
    let per_pixel = g.channel_sum(picked);
    let mean = g.mean(per_pixel);
    g.scale(mean, -1.0)
}

/// Stacks label maps into a `[N, 3, H, W]` one-hot tensor.
pub fn one_hot_batch<T: Real>(maps: &[&LayoutMap]) -> Tensor<T> {
    Tensor::concat_batch(&maps.iter().map(|m| m.one_hot()).collect::<Vec<_>>())
}

/// Mean IoU over classes present in `pred` or `gt` (inside `region` when given).
pub fn layout_miou(pred: &LayoutMap, gt: &LayoutMap, region: Option<&DiminishMask>) -> Result<f64> {
    if pred.dims() != gt.dims() {
        return Err(PanoError::shape("miou", format!("{:?} vs {:?}", pred.dims(), gt.dims())));
    }
    if let Some(r) = region {
        if r.dims() != gt.dims() {
            return Err(PanoError::shape("miou region", format!("{:?} vs {:?}", r.dims(), gt.dims())));
        }
    }
    let mut inter = [0usize; NUM_CLASSES];
    let mut union = [0usize; NUM_CLASSES];
    let mut scored = 0usize;
    for (i, (&p, &t)) in pred.labels().iter().zip(gt.labels()).enumerate() {
        if region.is_some_and(|r| r.data()[i] == 0) {
            continue;
        }
        scored += 1;
        if p == t {
            inter[p as usize] += 1;
            union[p as usize] += 1;
        } else {
            union[p as usize] += 1;
            union[t as usize] += 1;
        }
    }
    if scored == 0 {
        return Err(PanoError::EmptyRegion("miou region"));
    }
    let present: Vec<f64> = (0..NUM_CLASSES)
        .filter(|&c| union[c] > 0)
        .map(|c| inter[c] as f64 / union[c] as f64)
        .collect();
    Ok(present.iter().sum::<f64>() / present.len() as f64)
}

/// Arg-max labels of batch item `index` of a probability tensor.
pub fn labels_from_probs<T: Real>(probs: &Tensor<T>, index: usize) -> Result<LayoutMap> {
    let (_, _, h, w) = probs.dims4();
    let labels = probs.batch_slice(index, 1).argmax_channels();
    LayoutMap::new(h, w, labels)
}
