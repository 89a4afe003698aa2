//! Two-stage training, evaluation and convergence comparison.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{Graph, Var};
use crate::checkpoint::{self, GeneratorMeta, ModelKind};
use crate::dataset::store::read_dataset;
use crate::dataset::{make_model_input, split_dataset, synth_dataset, DRSample, MaskPolicy, Splits};
use crate::error::{PanoError, Result};
use crate::generator::{composite_var, uniform_layout, Generator, GeneratorConfig};
use crate::nn::{Adam, AdamConfig, ParamStore};
use crate::pano::Panorama;
use crate::pipeline::{masked_input, Pipeline};
use crate::structure::{labels_from_probs, layout_loss, layout_miou, StructureNet, StructureNetConfig};
use crate::supervision::{
    hinge_d_loss, hinge_g_loss, perceptual_loss, recon_loss, structure_consistency_loss, Discriminator, DiscriminatorConfig,
    LossWeights, MetricsReport, PoolPyramid,
};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Structure,
    Generator,
}

/// In-memory toy data used when no dataset directory is given.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthData {
    pub count: usize,
    pub seed: u64,
    pub mask: MaskPolicy,
}

impl Default for SynthData {
    fn default() -> Self {
        SynthData { count: 200, seed: 0, mask: MaskPolicy::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub stage: Stage,
    pub data_dir: Option<PathBuf>,
    pub synth: SynthData,
    pub height: usize,
    pub split: (f64, f64, f64),
    pub batch_size: usize,
    pub steps: usize,
    pub lr_g: f64,
    pub lr_d: f64,
    pub lr_s: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weights: LossWeights,
    pub perceptual_levels: usize,
    pub seed: u64,
    pub eval_every: usize,
    /// Cap on validation samples scored per evaluation.
    pub eval_limit: Option<usize>,
    pub checkpoint_dir: Option<PathBuf>,
    /// Required for the generator stage when training from `train`.
    pub structure_ckpt: Option<PathBuf>,
    pub disable_structure_guidance: bool,
    /// Keep training the structure net on the layout loss during the
    /// generator stage. Off by default: the structure net stays frozen.
    pub joint_finetune: bool,
    /// Structure stage stops early once validation mIoU reaches this value.
    pub stop_at_val_miou: Option<f64>,
    pub structure: StructureNetConfig,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            stage: Stage::Structure,
            data_dir: None,
            synth: SynthData::default(),
            height: 64,
            split: (0.8, 0.1, 0.1),
            batch_size: 4,
            steps: 2000,
            lr_g: 1e-4,
            lr_d: 4e-4,
            lr_s: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            adam_eps: 1e-8,
            weights: LossWeights::default(),
            perceptual_levels: 3,
            seed: 0,
            eval_every: 100,
            eval_limit: None,
            checkpoint_dir: None,
            structure_ckpt: None,
            disable_structure_guidance: false,
            joint_finetune: false,
            stop_at_val_miou: None,
            structure: StructureNetConfig::default(),
            generator: GeneratorConfig::default(),
            discriminator: DiscriminatorConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 || self.eval_every == 0 {
            return Err(PanoError::Config("steps, batch_size and eval_every must be > 0".into()));
        }
        if self.height < 16 {
            return Err(PanoError::Config(format!("height {} below 16", self.height)));
        }
        for (name, lr) in [("lr_g", self.lr_g), ("lr_d", self.lr_d), ("lr_s", self.lr_s)] {
            if !(lr.is_finite() && lr > 0.0) {
                return Err(PanoError::Config(format!("{name} must be > 0")));
            }
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return Err(PanoError::Config("Adam betas must lie in [0,1) and eps > 0".into()));
        }
        if self.perceptual_levels == 0 {
            return Err(PanoError::Config("perceptual_levels must be >= 1".into()));
        }
        self.weights.validate()?;
        self.structure.validate()?;
        self.generator.validate()?;
        Ok(())
    }

    fn adam(&self, lr: f64) -> AdamConfig {
        AdamConfig { lr, beta1: self.beta1, beta2: self.beta2, eps: self.adam_eps }
    }

    /// SHA-256 of the crate version and the canonical config JSON, output
    /// location excluded.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_string(&TrainConfig { checkpoint_dir: None, ..self.clone() }).expect("config serializes");
        let mut h = Sha256::new();
        h.update(env!("CARGO_PKG_VERSION").as_bytes());
        h.update(json.as_bytes());
        hex::encode(h.finalize())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub losses: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalLog {
    pub step: usize,
    pub metrics: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub stage: Stage,
    pub fingerprint: String,
    pub steps: Vec<StepLog>,
    pub evals: Vec<EvalLog>,
    /// Seconds since run start after each step. Not part of the reproducible record.
    pub wall_clock: Vec<f64>,
}

impl RunLog {
    fn new(stage: Stage, cfg: &TrainConfig) -> Self {
        RunLog { stage, fingerprint: cfg.fingerprint(), steps: Vec::new(), evals: Vec::new(), wall_clock: Vec::new() }
    }

    /// Everything except wall-clock timings, as JSON.
    pub fn deterministic_json(&self) -> String {
        let mut c = self.clone();
        c.wall_clock.clear();
        serde_json::to_string(&c).expect("log serializes")
    }

    pub fn metric_series(&self, key: &str) -> Vec<(usize, f64)> {
        self.evals.iter().filter_map(|e| e.metrics.get(key).map(|&v| (e.step, v))).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// Epoch-wise shuffled index stream driven by one seed.
struct BatchOrder {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    pos: usize,
}

impl BatchOrder {
    fn new(n: usize, seed: u64) -> Self {
        BatchOrder { rng: ChaCha8Rng::seed_from_u64(seed), order: (0..n).collect(), pos: n }
    }

    fn next(&mut self, size: usize) -> Vec<usize> {
        (0..size)
            .map(|_| {
                if self.pos == self.order.len() {
                    self.order.shuffle(&mut self.rng);
                    self.pos = 0;
                }
                self.pos += 1;
                self.order[self.pos - 1]
            })
            .collect()
    }
}

fn finite(name: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(PanoError::NonFinite(name.to_string()))
    }
}

/// Loads the configured dataset and splits it by scene.
pub fn load_data(cfg: &TrainConfig) -> Result<Splits> {
    let samples = match &cfg.data_dir {
        Some(dir) => {
            if !dir.is_dir() {
                return Err(PanoError::Config(format!("dataset directory {} not found", dir.display())));
            }
            let s = read_dataset(dir)?;
            if let Some(bad) = s.iter().find(|s| s.dims().0 != cfg.height) {
                return Err(PanoError::Config(format!("{} has height {}, config expects {}", bad.scene_id, bad.dims().0, cfg.height)));
            }
            s
        }
        None => synth_dataset(cfg.synth.count, cfg.height, cfg.synth.seed, &cfg.synth.mask)?.into_iter().map(|t| t.0).collect(),
    };
    split_dataset(samples, cfg.split)
}

fn eval_set<'a>(cfg: &TrainConfig, splits: &'a Splits) -> Result<&'a [DRSample]> {
    let set = if splits.val.is_empty() { &splits.test } else { &splits.val };
    if set.is_empty() {
        return Err(PanoError::EmptyRegion("validation split"));
    }
    Ok(&set[..cfg.eval_limit.unwrap_or(usize::MAX).min(set.len())])
}

fn stack_inputs(samples: &[DRSample], idx: &[usize]) -> (Tensor<f32>, Tensor<f32>, Tensor<f32>) {
    let (mut xs, mut ys, mut ls) = (Vec::new(), Vec::new(), Vec::new());
    for &i in idx {
        let (x, y) = make_model_input::<f32>(&samples[i]);
        xs.push(x);
        ys.push(y);
        ls.push(samples[i].layout.one_hot());
    }
    (Tensor::concat_batch(&xs), Tensor::concat_batch(&ys), Tensor::concat_batch(&ls))
}

/// Mean full-frame mIoU of the structure net over `samples`.
pub fn structure_miou(net: &StructureNet, params: &ParamStore<f32>, samples: &[DRSample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(PanoError::EmptyRegion("structure evaluation split"));
    }
    let mut acc = 0.0;
    for s in samples {
        let (x, _) = make_model_input::<f32>(s);
        let probs = net.predict(params, &x)?;
        acc += layout_miou(&labels_from_probs(&probs, 0)?, &s.layout, None)?;
    }
    Ok(acc / samples.len() as f64)
}

pub struct StructureRun {
    pub net: StructureNet,
    pub params: ParamStore<f32>,
    pub log: RunLog,
}

pub fn train_structure(cfg: &TrainConfig, splits: &Splits) -> Result<StructureRun> {
    cfg.validate()?;
    if splits.train.is_empty() {
        return Err(PanoError::EmptyRegion("training split"));
    }
    let val = eval_set(cfg, splits)?;
    let (net, pb) = StructureNet::new(cfg.structure)?;
    let mut params = pb.init::<f32>(cfg.seed);
    let mut opt = Adam::new(cfg.adam(cfg.lr_s), &params);
    let mut order = BatchOrder::new(splits.train.len(), cfg.seed);
    let mut log = RunLog::new(Stage::Structure, cfg);
    let start = Instant::now();
    for step in 1..=cfg.steps {
        let idx = order.next(cfg.batch_size);
        let (x, _, gt) = stack_inputs(&splits.train, &idx);
        let mut g = Graph::new();
        let p = params.bind(&mut g, true);
        let (xv, gv) = (g.constant(x), g.constant(gt));
        let probs = net.forward(&mut g, &p, xv)?;
        let loss = layout_loss(&mut g, probs, gv);
        let lv = finite("layout_loss", g.value(loss).data()[0] as f64)?;
        let grads = g.backward(loss);
        opt.step(&mut params, &p.grads(&grads));
        if !params.all_finite() {
            return Err(PanoError::NonFinite("structure parameters".into()));
        }
        log.steps.push(StepLog { step, losses: BTreeMap::from([("layout_loss".to_string(), lv)]) });
        log.wall_clock.push(start.elapsed().as_secs_f64());
        if step % cfg.eval_every == 0 || step == cfg.steps {
            let miou = structure_miou(&net, &params, val)?;
            log::info!("structure step {step}: loss {lv:.4} val mIoU {miou:.4}");
            log.evals.push(EvalLog { step, metrics: BTreeMap::from([("val_miou".to_string(), miou)]) });
            if let Some(dir) = &cfg.checkpoint_dir {
                save_structure(&dir.join(format!("structure_step{step:06}.bin")), &net, &params, step, &log)?;
            }
            if cfg.stop_at_val_miou.is_some_and(|t| miou >= t) {
                break;
            }
        }
    }
    Ok(StructureRun { net, params, log })
}

pub fn save_structure(path: &Path, net: &StructureNet, params: &ParamStore<f32>, step: usize, log: &RunLog) -> Result<()> {
    let metrics = log.evals.iter().map(|e| serde_json::to_value(e).expect("eval serializes")).collect();
    checkpoint::save(path, params, ModelKind::Structure, serde_json::to_value(net.config())?, step, metrics)?;
    Ok(())
}

pub struct GeneratorRun {
    pub generator: Generator,
    pub params: ParamStore<f32>,
    pub discriminator: Discriminator,
    pub disc_params: ParamStore<f32>,
    pub disc_config: DiscriminatorConfig,
    pub meta: GeneratorMeta,
    /// Fine-tuned structure net when `joint_finetune` was set.
    pub finetuned_structure: Option<(StructureNet, ParamStore<f32>)>,
    pub log: RunLog,
}

impl GeneratorRun {
    pub fn pipeline(&self, structure: &StructureNet, structure_params: &ParamStore<f32>) -> Pipeline {
        Pipeline {
            structure: structure.clone(),
            structure_params: self.finetuned_structure.as_ref().map_or(structure_params, |f| &f.1).clone(),
            generator: self.generator.clone(),
            generator_params: self.params.clone(),
            guided: !self.meta.disable_structure_guidance,
        }
    }

    pub fn save(&self, dir: &Path, tag: &str) -> Result<PathBuf> {
        let step = self.log.steps.last().map_or(0, |s| s.step);
        let metrics: Vec<_> = self.log.evals.iter().map(|e| serde_json::to_value(e).expect("eval serializes")).collect();
        let gpath = dir.join(format!("generator{tag}.bin"));
        checkpoint::save(&gpath, &self.params, ModelKind::Generator, serde_json::to_value(&self.meta)?, step, metrics)?;
        let dpath = dir.join(format!("discriminator{tag}.bin"));
        checkpoint::save(&dpath, &self.disc_params, ModelKind::Discriminator, serde_json::to_value(self.disc_config)?, step, vec![])?;
        if let Some((net, sp)) = &self.finetuned_structure {
            save_structure(&dir.join(format!("structure{tag}.bin")), net, sp, step, &RunLog { evals: vec![], ..self.log.clone() })?;
        }
        Ok(gpath)
    }
}

/// Layout guidance per sample: frozen structure probabilities, or uniform maps for the ablation.
fn guidance(structure: &StructureNet, sparams: &ParamStore<f32>, samples: &[DRSample], guided: bool) -> Result<Vec<Tensor<f32>>> {
    samples
        .iter()
        .map(|s| {
            let (h, w) = s.dims();
            if guided {
                structure.predict(sparams, &masked_input(&s.furnished, &s.mask)?)
            } else {
                Ok(uniform_layout(1, h, w))
            }
        })
        .collect()
}

/// Generator + discriminator training against a frozen structure net, or
/// one trained alongside on the layout loss when `joint_finetune` is set.
/// Each step updates the discriminator once on the current composites, then
/// the generator once against the updated discriminator.
pub fn train_generator(cfg: &TrainConfig, splits: &Splits, structure: &StructureNet, sparams: &ParamStore<f32>) -> Result<GeneratorRun> {
    cfg.validate()?;
    if splits.train.is_empty() {
        return Err(PanoError::EmptyRegion("training split"));
    }
    let val = eval_set(cfg, splits)?;
    let guided = !cfg.disable_structure_guidance;
    let meta = GeneratorMeta { generator: cfg.generator, disable_structure_guidance: cfg.disable_structure_guidance };
    let (generator, gpb) = Generator::new(cfg.generator)?;
    let (discriminator, dpb) = Discriminator::new(cfg.discriminator)?;
    let mut params = gpb.init::<f32>(cfg.seed.wrapping_add(1));
    let mut disc_params = dpb.init::<f32>(cfg.seed.wrapping_add(2));
    let mut gopt = Adam::new(cfg.adam(cfg.lr_g), &params);
    let mut dopt = Adam::new(cfg.adam(cfg.lr_d), &disc_params);
    let mut layouts = guidance(structure, sparams, &splits.train, guided)?;
    let mut sp_live = sparams.clone();
    let mut sopt = cfg.joint_finetune.then(|| Adam::new(cfg.adam(cfg.lr_s), sparams));
    let pyramid = PoolPyramid { levels: cfg.perceptual_levels };
    let w = cfg.weights;
    let mut order = BatchOrder::new(splits.train.len(), cfg.seed);
    let mut log = RunLog::new(Stage::Generator, cfg);
    let start = Instant::now();
    for step in 1..=cfg.steps {
        let idx = order.next(cfg.batch_size);
        let (x, y, gt) = stack_inputs(&splits.train, &idx);
        let mut losses = BTreeMap::new();
        if let Some(sopt) = sopt.as_mut() {
            let mut gs = Graph::new();
            let p = sp_live.bind(&mut gs, true);
            let (xv, gv) = (gs.constant(x.clone()), gs.constant(gt.clone()));
            let probs = structure.forward(&mut gs, &p, xv)?;
            let loss = layout_loss(&mut gs, probs, gv);
            losses.insert("layout_loss".to_string(), finite("layout_loss", gs.value(loss).data()[0] as f64)?);
            let grads = gs.backward(loss);
            sopt.step(&mut sp_live, &p.grads(&grads));
            if !sp_live.all_finite() {
                return Err(PanoError::NonFinite("structure parameters".into()));
            }
            if guided {
                let fresh = guidance(structure, &sp_live, &idx.iter().map(|&i| splits.train[i].clone()).collect::<Vec<_>>(), true)?;
                for (&i, l) in idx.iter().zip(fresh) {
                    layouts[i] = l;
                }
            }
        }
        let lay = Tensor::concat_batch(&idx.iter().map(|&i| layouts[i].clone()).collect::<Vec<_>>());

        let mut g = Graph::new();
        let gp = params.bind(&mut g, true);
        let xv = g.constant(x);
        let yv = g.constant(y.clone());
        let lv = g.constant(lay);
        let out = generator.forward(&mut g, &gp, xv, lv)?;
        let rgb = g.slice_channels(xv, 0, 3);
        let mask = g.slice_channels(xv, 3, 1);
        let comp = composite_var(&mut g, rgb, out.raw, mask);

        if w.w_adv > 0.0 {
            let mut gd = Graph::new();
            let dp = disc_params.bind(&mut gd, true);
            let real = gd.constant(y);
            let fake = gd.constant(g.value(comp).clone());
            let lr = discriminator.forward(&mut gd, &dp, real)?;
            let lf = discriminator.forward(&mut gd, &dp, fake)?;
            let dl = hinge_d_loss(&mut gd, lr, lf);
            losses.insert("d_hinge".to_string(), finite("d_hinge", gd.value(dl).data()[0] as f64)?);
            let grads = gd.backward(dl);
            dopt.step(&mut disc_params, &dp.grads(&grads));
            if !disc_params.all_finite() {
                return Err(PanoError::NonFinite("discriminator parameters".into()));
            }
        }

        let mut terms: Vec<(&str, Var, f64)> = Vec::new();
        if w.w_adv > 0.0 {
            let dp = disc_params.bind(&mut g, false);
            let logits = discriminator.forward(&mut g, &dp, comp)?;
            terms.push(("g_adv", hinge_g_loss(&mut g, logits), w.w_adv));
        }
        if w.w_rec_hole > 0.0 || w.w_rec_valid > 0.0 {
            terms.push(("recon", recon_loss(&mut g, out.raw, yv, mask, w.w_rec_hole, w.w_rec_valid), 1.0));
        }
        if w.w_perc > 0.0 {
            terms.push(("perceptual", perceptual_loss(&mut g, out.raw, yv, &pyramid)?, w.w_perc));
        }
        if w.w_struct > 0.0 {
            let sp = sp_live.bind(&mut g, false);
            let gv = g.constant(gt);
            terms.push(("structure", structure_consistency_loss(&mut g, structure, &sp, comp, gv, mask)?, w.w_struct));
        }
        let mut total: Option<Var> = None;
        for &(name, v, weight) in &terms {
            losses.insert(name.to_string(), finite(name, g.value(v).data()[0] as f64)?);
            let sv = g.scale(v, weight);
            total = Some(match total {
                Some(t) => g.add(t, sv),
                None => sv,
            });
        }
        let total = total.expect("validated weights leave a term");
        losses.insert("total".to_string(), finite("total", g.value(total).data()[0] as f64)?);
        let grads = g.backward(total);
        gopt.step(&mut params, &gp.grads(&grads));
        if !params.all_finite() {
            return Err(PanoError::NonFinite("generator parameters".into()));
        }
        log.steps.push(StepLog { step, losses });
        log.wall_clock.push(start.elapsed().as_secs_f64());

        if step % cfg.eval_every == 0 || step == cfg.steps {
            let pipe = Pipeline {
                structure: structure.clone(),
                structure_params: sp_live.clone(),
                generator: generator.clone(),
                generator_params: params.clone(),
                guided,
            };
            let (_, agg) = evaluate(&pipe, val)?;
            log::info!("generator step {step}: psnr_hole {:.2} layout_iou_hole {:.3}", agg.psnr_hole, agg.layout_iou_hole);
            log.evals.push(EvalLog { step, metrics: report_map(&agg) });
            if let Some(dir) = &cfg.checkpoint_dir {
                let run = GeneratorRun {
                    generator: generator.clone(),
                    params: params.clone(),
                    discriminator: discriminator.clone(),
                    disc_params: disc_params.clone(),
                    disc_config: cfg.discriminator,
                    meta: meta.clone(),
                    finetuned_structure: cfg.joint_finetune.then(|| (structure.clone(), sp_live.clone())),
                    log: log.clone(),
                };
                run.save(dir, &format!("_step{step:06}"))?;
            }
        }
    }
    let finetuned_structure = cfg.joint_finetune.then(|| (structure.clone(), sp_live));
    Ok(GeneratorRun { generator, params, discriminator, disc_params, disc_config: cfg.discriminator, meta, finetuned_structure, log })
}

fn report_map(r: &MetricsReport) -> BTreeMap<String, f64> {
    BTreeMap::from([
        ("psnr_hole".to_string(), r.psnr_hole),
        ("ssim_hole".to_string(), r.ssim_hole),
        ("l1_hole".to_string(), r.l1_hole),
        ("layout_iou_hole".to_string(), r.layout_iou_hole),
    ])
}

/// Scores composited predictions against the empty panoramas inside each
/// mask. `layout_iou_hole` compares the structure net's labels for the
/// prediction (mask channel zero) with the ground-truth layout in the hole.
pub fn evaluate_predictions(
    structure: &StructureNet,
    sparams: &ParamStore<f32>,
    samples: &[DRSample],
    preds: &[Panorama],
) -> Result<(Vec<MetricsReport>, MetricsReport)> {
    if samples.is_empty() {
        return Err(PanoError::EmptyRegion("evaluation split"));
    }
    if samples.len() != preds.len() {
        return Err(PanoError::shape("predictions", format!("{} for {} samples", preds.len(), samples.len())));
    }
    let mut reports = Vec::with_capacity(samples.len());
    for (s, p) in samples.iter().zip(preds) {
        let mut r = MetricsReport::image(&s.scene_id, p, &s.empty, &s.mask)?;
        let clear = crate::pano::DiminishMask::zeros(s.dims().0)?;
        let probs = structure.predict(sparams, &masked_input(p, &clear)?)?;
        r.layout_iou_hole = layout_miou(&labels_from_probs(&probs, 0)?, &s.layout, Some(&s.mask))?;
        reports.push(r);
    }
    let agg = MetricsReport::aggregate(&reports)?;
    Ok((reports, agg))
}

pub fn evaluate(pipe: &Pipeline, samples: &[DRSample]) -> Result<(Vec<MetricsReport>, MetricsReport)> {
    let preds = samples.iter().map(|s| pipe.diminish(&s.furnished, &s.mask).map(|o| o.composite)).collect::<Result<Vec<_>>>()?;
    evaluate_predictions(&pipe.structure, &pipe.structure_params, samples, &preds)
}

/// Context-mean-fill composites for each sample.
pub fn mean_fill_predictions(samples: &[DRSample]) -> Result<Vec<Panorama>> {
    samples.iter().map(|s| crate::supervision::context_mean_fill(&s.furnished, &s.mask)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub threshold_db: f64,
    /// First eval step at or above the threshold; `None` means never reached.
    pub steps_a: Option<usize>,
    pub steps_b: Option<usize>,
    pub grid: Vec<usize>,
    pub psnr_a: Vec<f64>,
    pub psnr_b: Vec<f64>,
    pub delta: Vec<f64>,
}

pub fn steps_to_threshold(series: &[(usize, f64)], threshold: f64) -> Option<usize> {
    series.iter().find(|(_, v)| *v >= threshold).map(|(s, _)| *s)
}

pub fn convergence_report(a: &RunLog, b: &RunLog, threshold_db: f64) -> Result<ConvergenceReport> {
    let (sa, sb) = (a.metric_series("psnr_hole"), b.metric_series("psnr_hole"));
    let grid: Vec<usize> = sa.iter().map(|p| p.0).collect();
    if grid != sb.iter().map(|p| p.0).collect::<Vec<_>>() {
        return Err(PanoError::Config("runs were evaluated on different step grids".into()));
    }
    Ok(ConvergenceReport {
        threshold_db,
        steps_a: steps_to_threshold(&sa, threshold_db),
        steps_b: steps_to_threshold(&sb, threshold_db),
        psnr_a: sa.iter().map(|p| p.1).collect(),
        psnr_b: sb.iter().map(|p| p.1).collect(),
        delta: sa.iter().zip(&sb).map(|(x, y)| x.1 - y.1).collect(),
        grid,
    })
}

/// Line plot of both PSNR curves and the threshold.
pub fn plot_convergence(report: &ConvergenceReport, path: &Path) -> Result<()> {
    let (w, h, m) = (480u32, 240u32, 20i64);
    let mut img = image::RgbImage::from_pixel(w, h, image::Rgb([255, 255, 255]));
    let all: Vec<f64> = report.psnr_a.iter().chain(&report.psnr_b).copied().chain([report.threshold_db]).filter(|v| v.is_finite()).collect();
    let lo = all.iter().copied().fold(f64::INFINITY, f64::min) - 1.0;
    let hi = all.iter().copied().fold(f64::NEG_INFINITY, f64::max) + 1.0;
    let max_step = report.grid.last().copied().unwrap_or(1).max(1) as f64;
    let to_px = |step: f64, v: f64| {
        let x = m + ((step / max_step) * (w as i64 - 2 * m) as f64) as i64;
        let y = h as i64 - m - (((v - lo) / (hi - lo)) * (h as i64 - 2 * m) as f64) as i64;
        (x, y)
    };
    let mut line = |(x0, y0): (i64, i64), (x1, y1): (i64, i64), c: [u8; 3], dashed: bool| {
        let n = (x1 - x0).abs().max((y1 - y0).abs()).max(1);
        for i in 0..=n {
            if dashed && (i / 4) % 2 == 1 {
                continue;
            }
            let (x, y) = (x0 + (x1 - x0) * i / n, y0 + (y1 - y0) * i / n);
            if (0..w as i64).contains(&x) && (0..h as i64).contains(&y) {
                img.put_pixel(x as u32, y as u32, image::Rgb(c));
            }
        }
    };
    line((m, h as i64 - m), (w as i64 - m, h as i64 - m), [0, 0, 0], false);
    line((m, m), (m, h as i64 - m), [0, 0, 0], false);
    line(to_px(0.0, report.threshold_db), to_px(max_step, report.threshold_db), [120, 120, 120], true);
    for (series, color) in [(&report.psnr_a, [31, 119, 180]), (&report.psnr_b, [255, 127, 14])] {
        for i in 1..series.len() {
            line(to_px(report.grid[i - 1] as f64, series[i - 1]), to_px(report.grid[i] as f64, series[i]), color, false);
        }
    }
    img.save(path)?;
    Ok(())
}

pub struct TrainOutcome {
    pub checkpoint: Option<PathBuf>,
    pub log: RunLog,
}

/// Runs the configured stage end to end, writing checkpoints and the run
/// log under `checkpoint_dir` when set.
pub fn train(cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let splits = load_data(cfg)?;
    match cfg.stage {
        Stage::Structure => {
            let run = train_structure(cfg, &splits)?;
            let mut ckpt = None;
            if let Some(dir) = &cfg.checkpoint_dir {
                let path = dir.join("structure.bin");
                save_structure(&path, &run.net, &run.params, run.log.steps.len(), &run.log)?;
                run.log.save(&dir.join("structure_runlog.json"))?;
                ckpt = Some(path);
            }
            Ok(TrainOutcome { checkpoint: ckpt, log: run.log })
        }
        Stage::Generator => {
            let sp = cfg
                .structure_ckpt
                .as_ref()
                .ok_or_else(|| PanoError::Config("generator stage requires structure_ckpt".into()))?;
            let (snet, sparams, _) = checkpoint::load_structure(sp)?;
            let run = train_generator(cfg, &splits, &snet, &sparams)?;
            let mut ckpt = None;
            if let Some(dir) = &cfg.checkpoint_dir {
                ckpt = Some(run.save(dir, "")?);
                run.log.save(&dir.join("generator_runlog.json"))?;
            }
            Ok(TrainOutcome { checkpoint: ckpt, log: run.log })
        }
    }
}
