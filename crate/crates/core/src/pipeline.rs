//! The segmentation model and its episode forward pass on a tape.
//!
//! Encoder features of each image are split into components (all recorded
//! contributions with CPC, the final output alone without), optionally run
//! through OSD, pooled into prototypes on the supports and compared against
//! each query. Score maps are fused and turned into per-pixel probabilities.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::autodiff::{Tape, Var};
use crate::cpc::{self, Metric, ScoreStack};
use crate::error::{Error, Result};
use crate::fusion::{self, FusionWeights, Prediction};
use crate::osd::{self, OsdParams, OsdVars};
use crate::rng::derive_seed;
use crate::tensor::Tensor;
use crate::vit::{self, VitConfig, VitParams, VitVars};

/// Ablation switches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Modules {
    pub cpc: bool,
    pub osd: bool,
    pub afw: bool,
}

impl Modules {
    pub const BASELINE: Modules = Modules { cpc: false, osd: false, afw: false };
    pub const FULL: Modules = Modules { cpc: true, osd: true, afw: true };

    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        for (on, name) in [(self.cpc, "cpc"), (self.osd, "osd"), (self.afw, "afw")] {
            if on {
                parts.push(name);
            }
        }
        if parts.is_empty() {
            String::from("baseline")
        } else {
            parts.join("+")
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub vit: VitConfig,
    pub rank: usize,
    pub metric: Metric,
    pub temperature: f64,
    pub modules: Modules,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vit: VitConfig::default(),
            rank: osd::DEFAULT_RANK,
            metric: Metric::Cosine,
            temperature: fusion::DEFAULT_TEMPERATURE,
            modules: Modules::FULL,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.vit.validate()?;
        if self.modules.osd && self.rank == 0 {
            return Err(Error::contract("osd rank must be positive"));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::contract("temperature must be positive"));
        }
        Ok(())
    }

    /// Components compared per image.
    pub fn components(&self) -> usize {
        if self.modules.cpc {
            self.vit.components()
        } else {
            1
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub vit: VitParams,
    pub osd: Option<OsdParams>,
    /// Present only after target finetuning with AFW enabled.
    pub afw: Option<FusionWeights>,
}

impl Model {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let vit = VitParams::init(&config.vit, derive_seed(seed, 1))?;
        let osd = if config.modules.osd {
            Some(OsdParams::init(config.components() * config.vit.dim, config.rank, derive_seed(seed, 2))?)
        } else {
            None
        };
        Ok(Self { config, vit, osd, afw: None })
    }

    /// Every tensor with its checkpoint name.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = self.vit.named();
        if let Some(o) = &self.osd {
            out.extend(o.named());
        }
        if let Some(a) = &self.afw {
            out.push((String::from("afw.w"), &a.w));
        }
        out
    }

    pub fn check(&self) -> Result<()> {
        self.config.validate()?;
        self.vit.check(&self.config.vit)?;
        match (&self.osd, self.config.modules.osd) {
            (Some(o), true) => o.check(self.config.components() * self.config.vit.dim)?,
            (None, false) => {}
            _ => return Err(Error::contract("osd parameters do not match the osd switch")),
        }
        if let Some(a) = &self.afw {
            if !self.config.modules.afw {
                return Err(Error::contract("fusion weights present with afw disabled"));
            }
            let p = self.config.components();
            if a.w.dims() != [p * p, 2] {
                return Err(Error::shape("afw", format!("{:?} for {p} components", a.w.dims())));
            }
        }
        Ok(())
    }
}

/// Which tensors a phase tracks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    /// Encoder and all OSD maps.
    Source,
    /// `w_orth` and fusion weights.
    Target,
    Inference,
}

#[derive(Debug, Clone)]
pub struct Bound {
    pub vit: VitVars,
    pub osd: Option<OsdVars>,
    pub afw: Option<Var>,
}

pub fn bind(tape: &mut Tape, model: &Model, phase: Phase) -> Bound {
    let vit = model.vit.bind(tape, phase == Phase::Source);
    let osd = model
        .osd
        .as_ref()
        .map(|o| o.bind(tape, phase == Phase::Source, phase != Phase::Inference));
    // Fusion weights never enter source training.
    let afw = match (phase, &model.afw) {
        (Phase::Source, _) | (_, None) => None,
        (Phase::Target, Some(a)) => Some(tape.param(&a.w)),
        (Phase::Inference, Some(a)) => Some(tape.constant(&a.w)),
    };
    Bound { vit, osd, afw }
}

/// Encoder components of one image, each `d×N`.
pub fn components_on(tape: &mut Tape, model: &Model, vars: &VitVars, image: &Tensor) -> Result<Vec<Var>> {
    let z0 = vit::embed_on(tape, image, vars, &model.config.vit)?;
    let stream = vit::forward_on(tape, z0, vars, &model.config.vit)?;
    Ok(if model.config.modules.cpc { stream.contributions } else { alloc::vec![stream.output] })
}

/// Encoder components as plain tensors, for caching a frozen encoder.
pub fn encode_components(model: &Model, image: &Tensor) -> Result<Vec<Tensor>> {
    let mut tape = Tape::new();
    let vars = model.vit.bind(&mut tape, false);
    let comps = components_on(&mut tape, model, &vars, image)?;
    Ok(comps.iter().map(|&c| tape.value(c)).collect())
}

/// One comparison: query image `image`, prototypes averaged over `shots`.
#[derive(Debug, Clone)]
pub struct QuerySpec {
    pub image: usize,
    pub shots: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct HeadOutput {
    /// `(2·P)×M` per query.
    pub scores: Vec<Var>,
    /// `2×M` per query.
    pub fused: Vec<Var>,
    /// Summed over all images, when OSD is on.
    pub orth: Option<Var>,
}

/// Everything after the encoder. `images[i]` holds the components of image
/// `i`; `supports` pairs an image index with its grid-resolution mask.
pub fn head_on(
    tape: &mut Tape,
    model: &Model,
    bound: &Bound,
    images: &[Vec<Var>],
    supports: &[(usize, Tensor)],
    queries: &[QuerySpec],
) -> Result<HeadOutput> {
    let l = model.config.components();
    let d = model.config.vit.dim;
    let mut feats: Vec<Vec<Var>> = Vec::with_capacity(images.len());
    let mut orth_terms = Vec::new();
    for comps in images {
        if comps.len() != l {
            return Err(Error::shape("head", format!("{} components, expected {l}", comps.len())));
        }
        match &bound.osd {
            Some(ov) => {
                let con = tape.concat_rows(comps)?;
                let (orth, up) = osd::osd_on(tape, con, ov)?;
                orth_terms.push(osd::orth_loss_on(tape, orth)?);
                feats.push((0..l).map(|i| tape.slice_rows(up, i * d, d)).collect::<Result<_>>()?);
            }
            None => feats.push(comps.clone()),
        }
    }
    let orth = if orth_terms.is_empty() { None } else { Some(tape.add_all(&orth_terms)?) };

    let mut shot_protos = Vec::with_capacity(supports.len());
    for (idx, mask) in supports {
        let f = feats.get(*idx).ok_or_else(|| Error::contract("support index out of range"))?;
        shot_protos.push(cpc::map_prototypes_on(tape, f, mask)?);
    }

    let pairs = l * l;
    let mut scores = Vec::with_capacity(queries.len());
    let mut fused = Vec::with_capacity(queries.len());
    for q in queries {
        let chosen: Vec<Vec<Var>> = q
            .shots
            .iter()
            .map(|&s| shot_protos.get(s).cloned().ok_or_else(|| Error::contract("shot index out of range")))
            .collect::<Result<_>>()?;
        let protos = cpc::average_prototypes_on(tape, &chosen)?;
        let qf = feats.get(q.image).ok_or_else(|| Error::contract("query index out of range"))?;
        let s = cpc::cross_compare_on(tape, qf, &protos, model.config.metric)?;
        fused.push(fusion::fuse_on(tape, s, pairs, bound.afw)?);
        scores.push(s);
    }
    Ok(HeadOutput { scores, fused, orth })
}

/// Mean BCE over queries against full-resolution masks.
pub fn bce_over_queries(tape: &mut Tape, model: &Model, fused: &[Var], masks: &[&Tensor]) -> Result<Var> {
    if fused.len() != masks.len() || fused.is_empty() {
        return Err(Error::contract("one full-resolution mask per query required"));
    }
    let n = model.config.vit.grid;
    let mut terms = Vec::with_capacity(fused.len());
    for (&f, mask) in fused.iter().zip(masks) {
        let [h, w] = *mask.dims() else {
            return Err(Error::shape("bce", format!("mask {:?}", mask.dims())));
        };
        let up = fusion::upsample_on(tape, f, (n, n), h, w)?;
        let probs = fusion::probs_on(tape, up, model.config.temperature)?;
        terms.push(fusion::bce_on(tape, probs, mask)?);
    }
    let total = tape.add_all(&terms)?;
    tape.scale(total, 1.0 / terms.len() as f64)
}

/// `bce + λ·orth` (orth only when present).
pub fn total_loss_on(tape: &mut Tape, bce: Var, orth: Option<Var>, lambda: f64) -> Result<Var> {
    if lambda < 0.0 {
        return Err(Error::contract("lambda must be non-negative"));
    }
    match orth {
        Some(o) if lambda > 0.0 => {
            let scaled = tape.scale(o, lambda)?;
            tape.add(bce, scaled)
        }
        _ => Ok(bce),
    }
}

/// Downsampled support masks, rejecting ones without both regions.
pub fn grid_mask(model: &Model, mask: &Tensor) -> Result<Tensor> {
    let m = cpc::downsample_mask(mask, model.config.vit.grid)?;
    cpc::pooling_weights(&m)?;
    Ok(m)
}

#[derive(Debug, Clone)]
pub struct EpisodePrediction {
    pub prediction: Prediction,
    pub scores: ScoreStack,
}

/// Inference on one query given support images and masks.
pub fn predict_episode(model: &Model, supports: &[(&Tensor, &Tensor)], query: &Tensor) -> Result<EpisodePrediction> {
    model.check()?;
    if supports.is_empty() {
        return Err(Error::contract("at least one support required"));
    }
    let mut tape = Tape::new();
    let bound = bind(&mut tape, model, Phase::Inference);
    let mut images = Vec::with_capacity(supports.len() + 1);
    let mut masks = Vec::with_capacity(supports.len());
    for (i, (img, mask)) in supports.iter().enumerate() {
        images.push(components_on(&mut tape, model, &bound.vit, img)?);
        masks.push((i, grid_mask(model, mask)?));
    }
    images.push(components_on(&mut tape, model, &bound.vit, query)?);
    let q = QuerySpec { image: supports.len(), shots: (0..supports.len()).collect() };
    let head = head_on(&mut tape, model, &bound, &images, &masks, &[q])?;
    let n = model.config.vit.grid;
    let l = model.config.components();
    let fused = tape.value(head.fused[0]).reshape([2, n, n])?;
    let (_, h, w) = image_dims(query)?;
    let prediction = fusion::predict(&fused, h, w, model.config.temperature)?;
    let scores = ScoreStack {
        maps: tape.value(head.scores[0]).reshape([l * l, 2, n, n])?,
        metric: model.config.metric,
        components: l,
    };
    Ok(EpisodePrediction { prediction, scores })
}

fn image_dims(image: &Tensor) -> Result<(usize, usize, usize)> {
    match *image.dims() {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(Error::shape("image", format!("expected C×H×W, got {:?}", image.dims()))),
    }
}

/// Components of one image as compared by CPC: after OSD when it is on.
/// Each is `d×M`.
pub fn compared_components(model: &Model, image: &Tensor) -> Result<Vec<Tensor>> {
    let mut tape = Tape::new();
    let bound = bind(&mut tape, model, Phase::Inference);
    let comps = components_on(&mut tape, model, &bound.vit, image)?;
    let Some(ov) = &bound.osd else {
        return Ok(comps.iter().map(|&c| tape.value(c)).collect());
    };
    let d = model.config.vit.dim;
    let con = tape.concat_rows(&comps)?;
    let (_, up) = osd::osd_on(&mut tape, con, ov)?;
    (0..comps.len())
        .map(|i| {
            let part = tape.slice_rows(up, i * d, d)?;
            Ok(tape.value(part))
        })
        .collect()
}
