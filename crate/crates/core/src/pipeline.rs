//! Two-stage inference: layout prediction, guided generation, compositing.

use std::path::Path;

use crate::checkpoint::{load_generator, load_structure, GeneratorMeta};
use crate::error::{PanoError, Result};
use crate::generator::{uniform_layout, Generator};
use crate::nn::ParamStore;
use crate::pano::{composite, DiminishMask, LayoutMap, Panorama};
use crate::structure::{labels_from_probs, StructureNet};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct DiminishOutput {
    pub composite: Panorama,
    pub raw: Panorama,
    /// Layout probabilities `[1, 3, H, W]` fed to the generator.
    pub layout_probs: Tensor<f32>,
    pub layout: LayoutMap,
}

/// Immutable model pair, shareable across threads.
#[derive(Clone, Debug)]
pub struct Pipeline {
    pub structure: StructureNet,
    pub structure_params: ParamStore<f32>,
    pub generator: Generator,
    pub generator_params: ParamStore<f32>,
    pub guided: bool,
}

/// `[1, 4, H, W]`: RGB zeroed inside the mask, then the mask.
pub fn masked_input(pano: &Panorama, mask: &DiminishMask) -> Result<Tensor<f32>> {
    if pano.dims() != mask.dims() {
        return Err(PanoError::shape("mask", format!("{:?} vs panorama {:?}", mask.dims(), pano.dims())));
    }
    let hw = mask.data().len();
    let mut data = Vec::with_capacity(4 * hw);
    for c in 0..3 {
        data.extend(pano.data()[c * hw..(c + 1) * hw].iter().zip(mask.data()).map(|(&v, &m)| if m == 1 { 0.0 } else { v }));
    }
    data.extend(mask.data().iter().map(|&m| m as f32));
    Ok(Tensor::new(&[1, 4, pano.height(), pano.width()], data))
}

impl Pipeline {
    pub fn load(generator_ckpt: &Path, structure_ckpt: &Path) -> Result<Self> {
        let (structure, structure_params, _) = load_structure(structure_ckpt)?;
        let (generator, generator_params, GeneratorMeta { disable_structure_guidance, .. }, _) = load_generator(generator_ckpt)?;
        Ok(Pipeline { structure, structure_params, generator, generator_params, guided: !disable_structure_guidance })
    }

    /// Resolution unit both networks require of H and W.
    pub fn size_unit(&self) -> usize {
        1 << self.structure.config().depth.max(self.generator.config().depth)
    }

    pub fn diminish(&self, pano: &Panorama, mask: &DiminishMask) -> Result<DiminishOutput> {
        let input = masked_input(pano, mask)?;
        let probs = self.structure.predict(&self.structure_params, &input)?;
        let layout = labels_from_probs(&probs, 0)?;
        let guide = if self.guided { probs.clone() } else { uniform_layout(1, pano.height(), pano.width()) };
        let raw = self.generator.generate(&self.generator_params, &input, &guide)?;
        let raw = Panorama::from_tensor(&raw, 0)?;
        Ok(DiminishOutput { composite: composite(pano, &raw, mask)?, raw, layout_probs: probs, layout })
    }
}

/// Bilinear resample to `h x 2h` (columns wrap, rows clamp).
fn resample(p: &Panorama, h: usize) -> Panorama {
    let (sh, sw, w) = (p.height(), p.width(), 2 * h);
    let mut out = vec![0.0f32; 3 * h * w];
    for y in 0..h {
        let v = (y as f64 + 0.5) * sh as f64 / h as f64 - 0.5;
        for x in 0..w {
            let u = (x as f64 + 0.5) * sw as f64 / w as f64 - 0.5;
            let rgb = p.sample(u, v);
            for c in 0..3 {
                out[(c * h + y) * w + x] = rgb[c] as f32;
            }
        }
    }
    Panorama::new(h, w, out).expect("sized buffer")
}

fn nearest<V: Copy>(src: &[V], sh: usize, oh: usize) -> Vec<V> {
    let (sw, ow) = (2 * sh, 2 * oh);
    (0..oh * ow).map(|i| src[((i / ow) * sh / oh) * sw + (i % ow) * sw / ow]).collect()
}

pub struct Diminished {
    pub composite: Panorama,
    pub layout: LayoutMap,
}

/// Runs the pipeline at the nearest size the networks accept and composites
/// against the original pixels.
pub fn run_pipeline(pipe: &Pipeline, pano: &Panorama, mask: &DiminishMask) -> Result<Diminished> {
    let h = pano.height();
    let unit = pipe.size_unit();
    let work_h = ((h as f64 / unit as f64).round() as usize).max(1) * unit;
    if work_h == h {
        let out = pipe.diminish(pano, mask)?;
        return Ok(Diminished { composite: out.composite, layout: out.layout });
    }
    let small = resample(pano, work_h);
    let small_mask = DiminishMask::new(work_h, 2 * work_h, nearest(mask.data(), h, work_h))?;
    let out = pipe.diminish(&small, &small_mask)?;
    let raw = resample(&out.raw, h);
    let layout = LayoutMap::new(h, 2 * h, nearest(out.layout.labels(), work_h, h))?;
    Ok(Diminished { composite: composite(pano, &raw, mask)?, layout })
}
