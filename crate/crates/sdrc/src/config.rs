//! Flat `key=value` experiment configuration.
//!
//! One setting per line; `#` starts a comment; blank lines are ignored.
//! Later occurrences of a key override earlier ones (with a warning).
//! Precedence when driven from the command line: defaults, then the file,
//! then `--set` flags, then `--seed`.

use std::fmt::Write as _;
use std::str::FromStr;

use sdrc_core::cpc::Metric;
use sdrc_core::episodes::DomainSpec;
use sdrc_core::optim::OptimizerKind;
use sdrc_core::pipeline::{ModelConfig, Modules};
use sdrc_core::trainer::{EvalOptions, TrainConfig};
use sdrc_core::vit::{Granularity, NormMode};

use crate::error::ConfigError;

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    /// Top-level seed: model initialization and source episode order.
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub source: DomainSpec,
    pub source_classes: usize,
    pub source_samples: usize,
    pub target: DomainSpec,
    pub target_classes: usize,
    pub target_samples: usize,
    pub eval_episodes: usize,
    pub eval_seed: u64,
    /// Images per domain for `analyze-cka`.
    pub cka_images: usize,
    pub cka_topk: usize,
    pub mi_bins: usize,
    pub source_data: String,
    pub target_data: String,
    pub checkpoint: String,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            source: DomainSpec::source(),
            source_classes: 12,
            source_samples: 20,
            target: DomainSpec::target(),
            target_classes: 8,
            target_samples: 20,
            eval_episodes: 100,
            eval_seed: 99,
            cka_images: 48,
            cka_topk: 5,
            mi_bins: 8,
            source_data: "source.epds".into(),
            target_data: "target.epds".into(),
            checkpoint: "model.sdrc".into(),
        }
    }
}

/// Every accepted key with a one-line description, in render order.
pub const KEYS: &[(&str, &str)] = &[
    ("seed", "top-level seed for initialization and episode order"),
    ("layers", "transformer blocks L"),
    ("dim", "token width d"),
    ("grid", "tokens per side n"),
    ("heads", "attention heads"),
    ("mlp_ratio", "MLP hidden width as a multiple of d"),
    ("patch", "patch side in pixels"),
    ("channels", "image channels"),
    ("granularity", "block | sublayer"),
    ("norm", "none | pre"),
    ("rank", "OSD bottleneck rank r"),
    ("metric", "cosine | euclidean | dot"),
    ("temperature", "softmax temperature on fused scores"),
    ("cpc", "compare every component pair"),
    ("osd", "orthogonal bottleneck"),
    ("afw", "fusion weights learned at finetuning"),
    ("episodes", "source training episodes"),
    ("lr", "source learning rate"),
    ("optimizer", "sgd | adam"),
    ("lambda", "weight of the orthogonality loss"),
    ("shots", "supports per episode K"),
    ("finetune_steps", "target finetuning steps per episode"),
    ("finetune_lr", "target finetuning learning rate"),
    ("leave_one_out", "score each support against the others when K >= 2"),
    ("eval_episodes", "target episodes for finetune-eval"),
    ("eval_seed", "seed of the evaluation episodes"),
    ("cka_images", "images per domain for analyze-cka"),
    ("cka_topk", "entries averaged for the top/bottom CKA rows"),
    ("mi_bins", "histogram bins for mutual information"),
    ("source_data", "source dataset path, relative to --out"),
    ("target_data", "target dataset path, relative to --out"),
    ("checkpoint", "checkpoint path, relative to --out"),
    ("source.classes", "source classes"),
    ("source.samples_per_class", "source samples per class"),
    ("target.classes", "target classes"),
    ("target.samples_per_class", "target samples per class"),
];

const DOMAIN_KEYS: &[&str] = &[
    "seed",
    "part_seed",
    "grammar_seed",
    "height",
    "width",
    "channels",
    "class_offset",
    "background",
    "texture_freq_offset",
    "palette_rotation",
    "clutter_density",
    "style_jitter",
];

/// All keys, including the per-domain ones.
pub fn all_keys() -> Vec<String> {
    let mut out: Vec<String> = KEYS.iter().map(|(k, _)| k.to_string()).collect();
    for domain in ["source", "target"] {
        out.extend(DOMAIN_KEYS.iter().map(|k| format!("{domain}.{k}")));
    }
    out
}

fn parse<T: FromStr>(value: &str) -> Result<T, String>
where
    T::Err: std::fmt::Display,
{
    value.parse::<T>().map_err(|e| e.to_string())
}

fn parse_bool(value: &str) -> Result<bool, String> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        other => Err(format!("expected true or false, got '{other}'")),
    }
}

fn positive(v: f64) -> Result<f64, String> {
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(format!("must be positive and finite, got {v}"))
    }
}

fn non_negative(v: f64) -> Result<f64, String> {
    if v >= 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(format!("must be non-negative and finite, got {v}"))
    }
}

fn at_least(v: usize, min: usize) -> Result<usize, String> {
    if v >= min {
        Ok(v)
    } else {
        Err(format!("must be at least {min}, got {v}"))
    }
}

fn domain_get(d: &DomainSpec, key: &str) -> Option<String> {
    Some(match key {
        "seed" => d.seed.to_string(),
        "part_seed" => d.part_seed.to_string(),
        "grammar_seed" => d.grammar_seed.to_string(),
        "height" => d.height.to_string(),
        "width" => d.width.to_string(),
        "channels" => d.channels.to_string(),
        "class_offset" => d.class_offset.to_string(),
        "background" => d.background.to_string(),
        "texture_freq_offset" => d.texture_freq_offset.to_string(),
        "palette_rotation" => d.palette_rotation.to_string(),
        "clutter_density" => d.clutter_density.to_string(),
        "style_jitter" => d.style_jitter.to_string(),
        _ => return None,
    })
}

fn domain_set(d: &mut DomainSpec, key: &str, v: &str) -> Option<Result<(), String>> {
    if !DOMAIN_KEYS.contains(&key) {
        return None;
    }
    Some((|| -> Result<(), String> {
        match key {
            "seed" => d.seed = parse(v)?,
            "part_seed" => d.part_seed = parse(v)?,
            "grammar_seed" => d.grammar_seed = parse(v)?,
            "height" => d.height = at_least(parse(v)?, 1)?,
            "width" => d.width = at_least(parse(v)?, 1)?,
            "channels" => d.channels = at_least(parse(v)?, 1)?,
            "class_offset" => d.class_offset = parse(v)?,
            "background" => d.background = parse(v)?,
            "texture_freq_offset" => d.texture_freq_offset = parse(v)?,
            "palette_rotation" => d.palette_rotation = parse(v)?,
            "clutter_density" => d.clutter_density = non_negative(parse(v)?)?,
            "style_jitter" => d.style_jitter = non_negative(parse(v)?)?,
            _ => unreachable!("checked against DOMAIN_KEYS"),
        }
        Ok(())
    })())
}

impl ExperimentConfig {
    /// Current value of `key` in the syntax [`ExperimentConfig::set`] accepts.
    pub fn get(&self, key: &str) -> Option<String> {
        let m = &self.model;
        let t = &self.train;
        Some(match key {
            "seed" => self.seed.to_string(),
            "layers" => m.vit.layers.to_string(),
            "dim" => m.vit.dim.to_string(),
            "grid" => m.vit.grid.to_string(),
            "heads" => m.vit.heads.to_string(),
            "mlp_ratio" => m.vit.mlp_ratio.to_string(),
            "patch" => m.vit.patch.to_string(),
            "channels" => m.vit.channels.to_string(),
            "granularity" => match m.vit.granularity {
                Granularity::PerBlock => "block".into(),
                Granularity::PerSublayer => "sublayer".into(),
            },
            "norm" => match m.vit.norm_mode {
                NormMode::NormFree => "none".into(),
                NormMode::PreNorm => "pre".into(),
            },
            "rank" => m.rank.to_string(),
            "metric" => m.metric.to_string(),
            "temperature" => m.temperature.to_string(),
            "cpc" => m.modules.cpc.to_string(),
            "osd" => m.modules.osd.to_string(),
            "afw" => m.modules.afw.to_string(),
            "episodes" => t.episodes.to_string(),
            "lr" => t.lr.to_string(),
            "optimizer" => t.optimizer.to_string(),
            "lambda" => t.lambda.to_string(),
            "shots" => t.shots.to_string(),
            "finetune_steps" => t.finetune_steps.to_string(),
            "finetune_lr" => t.finetune_lr.to_string(),
            "leave_one_out" => t.leave_one_out.to_string(),
            "eval_episodes" => self.eval_episodes.to_string(),
            "eval_seed" => self.eval_seed.to_string(),
            "cka_images" => self.cka_images.to_string(),
            "cka_topk" => self.cka_topk.to_string(),
            "mi_bins" => self.mi_bins.to_string(),
            "source_data" => self.source_data.clone(),
            "target_data" => self.target_data.clone(),
            "checkpoint" => self.checkpoint.clone(),
            "source.classes" => self.source_classes.to_string(),
            "source.samples_per_class" => self.source_samples.to_string(),
            "target.classes" => self.target_classes.to_string(),
            "target.samples_per_class" => self.target_samples.to_string(),
            other => {
                if let Some(rest) = other.strip_prefix("source.") {
                    return domain_get(&self.source, rest);
                }
                if let Some(rest) = other.strip_prefix("target.") {
                    return domain_get(&self.target, rest);
                }
                return None;
            }
        })
    }

    /// Sets one key. `Ok(false)` means the key is unknown.
    pub fn set(&mut self, key: &str, v: &str) -> Result<bool, String> {
        let m = &mut self.model;
        let t = &mut self.train;
        match key {
            "seed" => {
                self.seed = parse(v)?;
                t.seed = self.seed;
            }
            "layers" => m.vit.layers = at_least(parse(v)?, 1)?,
            "dim" => m.vit.dim = at_least(parse(v)?, 1)?,
            "grid" => m.vit.grid = at_least(parse(v)?, 2)?,
            "heads" => m.vit.heads = at_least(parse(v)?, 1)?,
            "mlp_ratio" => m.vit.mlp_ratio = at_least(parse(v)?, 1)?,
            "patch" => m.vit.patch = at_least(parse(v)?, 1)?,
            "channels" => m.vit.channels = at_least(parse(v)?, 1)?,
            "granularity" => {
                m.vit.granularity = match v {
                    "block" => Granularity::PerBlock,
                    "sublayer" => Granularity::PerSublayer,
                    other => return Err(format!("expected block or sublayer, got '{other}'")),
                }
            }
            "norm" => {
                m.vit.norm_mode = match v {
                    "none" => NormMode::NormFree,
                    "pre" => NormMode::PreNorm,
                    other => return Err(format!("expected none or pre, got '{other}'")),
                }
            }
            "rank" => m.rank = at_least(parse(v)?, 1)?,
            "metric" => m.metric = Metric::from_str(v).map_err(|e| e.to_string())?,
            "temperature" => m.temperature = positive(parse(v)?)?,
            "cpc" => m.modules.cpc = parse_bool(v)?,
            "osd" => m.modules.osd = parse_bool(v)?,
            "afw" => m.modules.afw = parse_bool(v)?,
            "episodes" => t.episodes = parse(v)?,
            "lr" => t.lr = positive(parse(v)?)?,
            "optimizer" => t.optimizer = OptimizerKind::from_str(v).map_err(|e| e.to_string())?,
            "lambda" => t.lambda = non_negative(parse(v)?)?,
            "shots" => t.shots = at_least(parse(v)?, 1)?,
            "finetune_steps" => t.finetune_steps = parse(v)?,
            "finetune_lr" => t.finetune_lr = positive(parse(v)?)?,
            "leave_one_out" => t.leave_one_out = parse_bool(v)?,
            "eval_episodes" => self.eval_episodes = at_least(parse(v)?, 1)?,
            "eval_seed" => self.eval_seed = parse(v)?,
            "cka_images" => self.cka_images = at_least(parse(v)?, 2)?,
            "cka_topk" => self.cka_topk = at_least(parse(v)?, 1)?,
            "mi_bins" => self.mi_bins = at_least(parse(v)?, 2)?,
            "source_data" => self.source_data = non_empty(v)?,
            "target_data" => self.target_data = non_empty(v)?,
            "checkpoint" => self.checkpoint = non_empty(v)?,
            "source.classes" => self.source_classes = at_least(parse(v)?, 2)?,
            "source.samples_per_class" => self.source_samples = at_least(parse(v)?, 2)?,
            "target.classes" => self.target_classes = at_least(parse(v)?, 2)?,
            "target.samples_per_class" => self.target_samples = at_least(parse(v)?, 2)?,
            other => {
                let hit = match (other.strip_prefix("source."), other.strip_prefix("target.")) {
                    (Some(rest), _) => domain_set(&mut self.source, rest, v),
                    (_, Some(rest)) => domain_set(&mut self.target, rest, v),
                    _ => None,
                };
                return match hit {
                    Some(r) => r.map(|_| true),
                    None => Ok(false),
                };
            }
        }
        Ok(true)
    }

    /// Cross-field checks that no single key can catch.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |e: sdrc_core::Error| ConfigError::Inconsistent(e.to_string());
        self.model.validate().map_err(bad)?;
        self.train.validate().map_err(bad)?;
        self.source.validate().map_err(bad)?;
        self.target.validate().map_err(bad)?;
        let side = self.model.vit.image_side();
        for (name, d) in [("source", &self.source), ("target", &self.target)] {
            if d.height != side || d.width != side || d.channels != self.model.vit.channels {
                return Err(ConfigError::Inconsistent(format!(
                    "{name} images are {}×{}×{} but the encoder expects {}×{side}×{side}",
                    d.channels, d.height, d.width, self.model.vit.channels
                )));
            }
        }
        for (name, spc) in [("source", self.source_samples), ("target", self.target_samples)] {
            if spc <= self.train.shots {
                return Err(ConfigError::Inconsistent(format!(
                    "{name}.samples_per_class = {spc} leaves no query for {} shots",
                    self.train.shots
                )));
            }
        }
        Ok(())
    }

    pub fn eval_options(&self) -> EvalOptions {
        EvalOptions::from_train(&self.train)
    }

    pub fn modules(&self) -> Modules {
        self.model.modules
    }

    /// Every key on its own line, in [`all_keys`] order.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for key in all_keys() {
            let _ = writeln!(out, "{key}={}", self.get(&key).expect("every listed key has a value"));
        }
        out
    }

    /// `(key, value)` pairs in render order.
    pub fn entries(&self) -> Vec<(String, String)> {
        all_keys().into_iter().map(|k| {
            let v = self.get(&k).expect("every listed key has a value");
            (k, v)
        }).collect()
    }

    /// Applies one `key=value` assignment, as from a `--set` flag.
    pub fn apply(&mut self, assignment: &str, line: usize) -> Result<(), ConfigError> {
        let Some((key, value)) = assignment.split_once('=') else {
            return Err(ConfigError::Syntax { line, text: assignment.to_string() });
        };
        let (key, value) = (key.trim(), value.trim());
        match self.set(key, value) {
            Ok(true) => Ok(()),
            Ok(false) => Err(ConfigError::UnknownKey { line, key: key.to_string() }),
            Err(detail) => Err(ConfigError::BadValue { line, key: key.to_string(), detail }),
        }
    }
}

fn non_empty(v: &str) -> Result<String, String> {
    if v.is_empty() {
        Err("path must not be empty".into())
    } else {
        Ok(v.to_string())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Parsed {
    pub config: ExperimentConfig,
    /// One message per overridden duplicate key.
    pub warnings: Vec<String>,
}

/// Parses a document on top of the defaults. Does not run
/// [`ExperimentConfig::validate`].
pub fn parse_config(text: &str) -> Result<Parsed, ConfigError> {
    parse_onto(ExperimentConfig::default(), text)
}

pub fn parse_onto(mut config: ExperimentConfig, text: &str) -> Result<Parsed, ConfigError> {
    let mut seen: std::collections::HashMap<String, usize> = std::collections::HashMap::new();
    let mut warnings = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        config.apply(content, line)?;
        let key = content.split_once('=').map(|(k, _)| k.trim().to_string()).unwrap_or_default();
        if let Some(prev) = seen.insert(key.clone(), line) {
            let msg = format!("line {line}: '{key}' overrides the value from line {prev}");
            log::warn!("{msg}");
            warnings.push(msg);
        }
    }
    Ok(Parsed { config, warnings })
}
