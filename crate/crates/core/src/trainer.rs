//! Episodic source training, target finetuning and evaluation.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::autodiff::{Tape, Var};
use crate::episodes::{self, Dataset, Episode, Sample};
use crate::error::{Error, Result};
use crate::fusion::{self, FusionWeights, Miou};
use crate::optim::{Optimizer, OptimizerKind};
use crate::pipeline::{self, Model, ModelConfig, Phase, QuerySpec};
use crate::rng::derive_seed;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub episodes: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub lambda: f64,
    pub shots: usize,
    pub seed: u64,
    pub finetune_steps: usize,
    pub finetune_lr: f64,
    /// With `K ≥ 2`, each support is scored against the other supports'
    /// prototypes instead of all of them.
    pub leave_one_out: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            episodes: 600,
            lr: 1e-3,
            optimizer: OptimizerKind::Adam,
            lambda: 0.1,
            shots: 1,
            seed: 0,
            finetune_steps: 50,
            finetune_lr: 1e-2,
            leave_one_out: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) {
            return Err(Error::contract(format!("lambda must be non-negative, got {}", self.lambda)));
        }
        // zero is allowed here so a run can be replayed without moving weights
        if !(self.lr >= 0.0 && self.lr.is_finite()) || !(self.finetune_lr >= 0.0 && self.finetune_lr.is_finite()) {
            return Err(Error::contract("learning rates must be finite and non-negative"));
        }
        if self.shots == 0 {
            return Err(Error::contract("shots must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub train: TrainConfig,
    /// Optimizer steps taken so far.
    pub step: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SourceReport {
    /// Total loss of every trained episode.
    pub losses: Vec<f64>,
    pub bce: Vec<f64>,
    pub skipped: usize,
}

/// Seed of source episode `i`.
pub fn source_episode_seed(seed: u64, i: usize) -> u64 {
    derive_seed(derive_seed(seed, 0x5eed), i as u64)
}

fn gradients(tape: &Tape, loss: Var, vars: &[Var]) -> Result<Vec<Vec<f64>>> {
    let g = tape.backward(loss)?;
    Ok(vars.iter().map(|&v| g.wrt_f64(v)).collect())
}

fn finite_or(value: f64, what: impl FnOnce() -> String) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::contract(what()))
    }
}

/// One source episode on a fresh tape. Returns `(loss, bce, tape, loss var)`.
fn source_episode_loss(model: &Model, episode: &Episode, lambda: f64) -> Result<(Tape, Var, Var, Vec<Var>)> {
    let mut tape = Tape::new();
    let bound = pipeline::bind(&mut tape, model, Phase::Source);
    let mut images = Vec::with_capacity(episode.shots() + 1);
    let mut supports = Vec::with_capacity(episode.shots());
    for (i, s) in episode.supports.iter().enumerate() {
        supports.push((i, pipeline::grid_mask(model, &s.mask)?));
        images.push(pipeline::components_on(&mut tape, model, &bound.vit, &s.image)?);
    }
    images.push(pipeline::components_on(&mut tape, model, &bound.vit, &episode.query.image)?);
    let q = QuerySpec { image: episode.shots(), shots: (0..episode.shots()).collect() };
    let head = pipeline::head_on(&mut tape, model, &bound, &images, &supports, &[q])?;
    let bce = pipeline::bce_over_queries(&mut tape, model, &head.fused, &[&episode.query.mask])?;
    let loss = pipeline::total_loss_on(&mut tape, bce, head.orth, lambda)?;
    let mut vars = bound.vit.all();
    if let Some(o) = &bound.osd {
        vars.extend([o.w_in, o.w_orth, o.w_out]);
    }
    Ok((tape, loss, bce, vars))
}

/// Gradient of the source loss of `episode` with respect to every trainable
/// tensor, in [`Model::named`] order (encoder then OSD).
pub fn source_gradients(model: &Model, episode: &Episode, lambda: f64) -> Result<(f64, Vec<Vec<f64>>)> {
    let (tape, loss, _, vars) = source_episode_loss(model, episode, lambda)?;
    Ok((tape.scalar(loss)?, gradients(&tape, loss, &vars)?))
}

fn source_params(model: &mut Model) -> Vec<&mut Tensor> {
    let mut params = model.vit.tensors_mut();
    if let Some(o) = &mut model.osd {
        params.extend([&mut o.w_in, &mut o.w_orth, &mut o.w_out]);
    }
    params
}

/// Trains encoder (and OSD) on episodes sampled from `dataset`. Episodes
/// whose masks lose a region at grid resolution are skipped.
pub fn train_source(config: &ModelConfig, train: &TrainConfig, dataset: &Dataset) -> Result<(Checkpoint, SourceReport)> {
    train.validate()?;
    if dataset.samples.is_empty() {
        return Err(Error::contract("source dataset is empty"));
    }
    let mut model = Model::init(config.clone(), train.seed)?;
    let mut opt = Optimizer::new(train.optimizer, train.lr)?;
    let mut report = SourceReport::default();
    for i in 0..train.episodes {
        let seed = source_episode_seed(train.seed, i);
        let episode = episodes::sample_episode(dataset, train.shots, seed)?;
        let (tape, loss, bce, vars) = match source_episode_loss(&model, &episode, train.lambda) {
            Ok(v) => v,
            Err(Error::EmptyMaskRegion(side)) => {
                log::debug!("skipping source episode {i}: empty {side} region");
                report.skipped += 1;
                continue;
            }
            Err(e) => return Err(e),
        };
        let value = finite_or(tape.scalar(loss)?, || format!("non-finite loss at source episode {i} (seed {seed})"))?;
        let grads = gradients(&tape, loss, &vars)?;
        opt.step(&mut source_params(&mut model), &grads)?;
        report.losses.push(value);
        report.bce.push(tape.scalar(bce)?);
    }
    if report.skipped > 0 {
        log::info!("skipped {} of {} source episodes with degenerate masks", report.skipped, train.episodes);
    }
    let step = opt.steps();
    Ok((Checkpoint { model, train: train.clone(), step }, report))
}

/// Adapts `w_orth` and the fusion weights to `supports`, scoring each support
/// as a pseudo-query. Everything else stays bitwise frozen.
pub fn finetune_target(ckpt: &Checkpoint, supports: &[Sample], steps: usize, lr: f64) -> Result<Checkpoint> {
    if supports.is_empty() {
        return Err(Error::contract("finetuning needs at least one support"));
    }
    let mut out = ckpt.clone();
    let model = &mut out.model;
    model.check()?;
    if model.config.modules.afw {
        model.afw = Some(FusionWeights::ones(model.config.components()));
    }
    let masks: Vec<Tensor> = supports.iter().map(|s| pipeline::grid_mask(model, &s.mask)).collect::<Result<_>>()?;
    let trainable = model.osd.is_some() || model.afw.is_some();
    if steps == 0 || !trainable {
        return Ok(out);
    }
    let cached: Vec<Vec<Tensor>> =
        supports.iter().map(|s| pipeline::encode_components(model, &s.image)).collect::<Result<_>>()?;
    let k = supports.len();
    let loo = ckpt.train.leave_one_out && k >= 2;
    let queries: Vec<QuerySpec> = (0..k)
        .map(|i| QuerySpec { image: i, shots: (0..k).filter(|&s| !loo || s != i).collect() })
        .collect();
    let support_masks: Vec<(usize, Tensor)> = masks.into_iter().enumerate().collect();
    let full_masks: Vec<&Tensor> = supports.iter().map(|s| &s.mask).collect();

    let mut opt = Optimizer::new(ckpt.train.optimizer, lr)?;
    for step in 0..steps {
        let mut tape = Tape::new();
        let bound = pipeline::bind(&mut tape, model, Phase::Target);
        let images: Vec<Vec<Var>> =
            cached.iter().map(|comps| comps.iter().map(|c| tape.constant(c)).collect()).collect();
        let head = pipeline::head_on(&mut tape, model, &bound, &images, &support_masks, &queries)?;
        let bce = pipeline::bce_over_queries(&mut tape, model, &head.fused, &full_masks)?;
        let loss = pipeline::total_loss_on(&mut tape, bce, head.orth, ckpt.train.lambda)?;
        finite_or(tape.scalar(loss)?, || format!("non-finite loss at finetune step {step}"))?;
        let mut vars = Vec::new();
        if let Some(o) = &bound.osd {
            vars.push(o.w_orth);
        }
        if let Some(a) = bound.afw {
            vars.push(a);
        }
        let grads = gradients(&tape, loss, &vars)?;
        let mut params: Vec<&mut Tensor> = Vec::new();
        if let Some(o) = &mut model.osd {
            params.push(&mut o.w_orth);
        }
        if let Some(a) = &mut model.afw {
            params.push(&mut a.w);
        }
        opt.step(&mut params, &grads)?;
    }
    out.step += steps as u64;
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    pub finetune_steps: usize,
    pub finetune_lr: f64,
}

impl EvalOptions {
    pub fn from_train(train: &TrainConfig) -> Self {
        Self { finetune_steps: train.finetune_steps, finetune_lr: train.finetune_lr }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeResult {
    pub index: usize,
    pub class_id: u32,
    pub miou: Option<Miou>,
    pub skipped: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    /// Mean over scored episodes; NaN when none were scored.
    pub mean_iou: f64,
    pub per_episode: Vec<EpisodeResult>,
}

impl EvalReport {
    pub fn scored(&self) -> usize {
        self.per_episode.iter().filter(|e| e.miou.is_some()).count()
    }
}

/// Finetunes a private copy per episode (when anything is trainable), then
/// scores the query.
pub fn evaluate_episode(ckpt: &Checkpoint, episode: &Episode, options: &EvalOptions) -> Result<Miou> {
    let adapted = finetune_target(ckpt, &episode.supports, options.finetune_steps, options.finetune_lr)?;
    let supports: Vec<(&Tensor, &Tensor)> = episode.supports.iter().map(|s| (&s.image, &s.mask)).collect();
    let pred = pipeline::predict_episode(&adapted.model, &supports, &episode.query.image)?;
    fusion::miou(&pred.prediction.labels, &episode.query.mask)
}

pub fn evaluate(ckpt: &Checkpoint, episodes: &[Episode], options: &EvalOptions) -> Result<EvalReport> {
    if episodes.is_empty() {
        return Err(Error::contract("no episodes to evaluate"));
    }
    let mut per_episode = Vec::with_capacity(episodes.len());
    let (mut total, mut scored) = (0.0, 0usize);
    for (index, e) in episodes.iter().enumerate() {
        let (miou, skipped) = match evaluate_episode(ckpt, e, options) {
            Ok(m) => {
                total += m.mean;
                scored += 1;
                (Some(m), None)
            }
            Err(err) => (None, Some(err.to_string())),
        };
        per_episode.push(EpisodeResult { index, class_id: e.class_id, miou, skipped });
    }
    let mean_iou = if scored == 0 { f64::NAN } else { total / scored as f64 };
    Ok(EvalReport { mean_iou, per_episode })
}
