//! `SDRC` checkpoint files.
//!
//! ```text
//! "SDRC"  u32 version=1  u32 tensor count
//! per tensor: u16 name length, UTF-8 name, u8 rank, u32 × rank dims,
//!             f32 × product(dims) data
//! ```
//!
//! Configuration and the step counter travel as `meta.*` tensors whose rows
//! are 64-bit words split into four 16-bit limbs (least significant first),
//! each stored exactly as an `f32`. Floats are stored by their `f64` bit
//! pattern, so every value survives the trip bit for bit.

use std::collections::BTreeMap;
use std::path::Path;

use sdrc_core::cpc::Metric;
use sdrc_core::fusion::FusionWeights;
use sdrc_core::optim::OptimizerKind;
use sdrc_core::osd::OsdParams;
use sdrc_core::pipeline::{Model, ModelConfig, Modules};
use sdrc_core::trainer::{Checkpoint, TrainConfig};
use sdrc_core::vit::{Granularity, NormMode, VitConfig};
use sdrc_core::Tensor;

use crate::binary::{put_f32s, Reader};
use crate::error::{FormatError, Result, SdrcError};

pub const MAGIC: [u8; 4] = *b"SDRC";
pub const VERSION: u32 = 1;

/// One decoded tensor and the byte offset of its record.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorRecord {
    pub name: String,
    pub tensor: Tensor,
    pub offset: u64,
}

pub fn encode_tensors(tensors: &[(String, &Tensor)]) -> Result<Vec<u8>> {
    let count = u32::try_from(tensors.len()).map_err(|_| SdrcError::Data("too many tensors".into()))?;
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&count.to_le_bytes());
    for (name, t) in tensors {
        let len = u16::try_from(name.len()).map_err(|_| SdrcError::Data(format!("tensor name too long: {name}")))?;
        let rank = u8::try_from(t.rank()).map_err(|_| SdrcError::Data(format!("{name}: rank {} too high", t.rank())))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(rank);
        for &d in t.dims() {
            let d = u32::try_from(d).map_err(|_| SdrcError::Data(format!("{name}: dimension {d} too large")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        put_f32s(&mut out, t.data());
    }
    Ok(out)
}

pub fn decode_tensors(bytes: &[u8]) -> Result<Vec<TensorRecord>, FormatError> {
    let mut r = Reader::new(bytes);
    r.magic(MAGIC)?;
    r.version(VERSION)?;
    let count = r.u32("tensor count")?;
    let mut out = Vec::with_capacity((count as usize).min(1 << 12));
    for _ in 0..count {
        let offset = r.offset();
        let len = r.u16("tensor name length")? as usize;
        let name_offset = r.offset();
        let name = std::str::from_utf8(r.take(len, "tensor name")?)
            .map_err(|e| FormatError::Invalid { offset: name_offset, what: "tensor name", detail: e.to_string() })?
            .to_owned();
        let rank = r.u8("tensor rank")? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32("tensor dims")? as usize);
        }
        let len = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| r.invalid("tensor dims", format!("{dims:?} overflow")))?;
        let data = r.f32s(len, "tensor data")?;
        let tensor = Tensor::new(dims, data).expect("sized from dims");
        out.push(TensorRecord { name, tensor, offset });
    }
    r.finish()?;
    Ok(out)
}

fn words(values: &[u64]) -> Tensor {
    let data = values
        .iter()
        .flat_map(|&v| (0..4).map(move |k| ((v >> (16 * k)) & 0xffff) as f32))
        .collect();
    Tensor::new([values.len(), 4], data).expect("four limbs per word")
}

fn unwords(rec: &TensorRecord, expected: usize) -> Result<Vec<u64>, FormatError> {
    let bad = |detail: String| FormatError::Invalid { offset: rec.offset, what: "metadata", detail };
    if rec.tensor.dims() != [expected, 4] {
        return Err(bad(format!("{} has shape {:?}, expected [{expected}, 4]", rec.name, rec.tensor.dims())));
    }
    rec.tensor
        .data()
        .chunks(4)
        .map(|limbs| {
            limbs.iter().enumerate().try_fold(0u64, |acc, (k, &l)| {
                if l.fract() != 0.0 || !(0.0..65536.0).contains(&l) {
                    return Err(bad(format!("{}: {l} is not a 16-bit limb", rec.name)));
                }
                Ok(acc | ((l as u64) << (16 * k)))
            })
        })
        .collect()
}

fn metric_code(m: Metric) -> u64 {
    match m {
        Metric::Cosine => 0,
        Metric::Euclidean => 1,
        Metric::Dot => 2,
    }
}

fn meta_tensors(ckpt: &Checkpoint) -> Vec<(String, Tensor)> {
    let c = &ckpt.model.config;
    let v = &c.vit;
    let t = &ckpt.train;
    let vit = words(&[
        v.layers as u64,
        v.dim as u64,
        v.grid as u64,
        v.heads as u64,
        v.mlp_ratio as u64,
        v.patch as u64,
        v.channels as u64,
        (v.granularity == Granularity::PerSublayer) as u64,
        (v.norm_mode == NormMode::PreNorm) as u64,
    ]);
    let model = words(&[
        c.rank as u64,
        metric_code(c.metric),
        c.temperature.to_bits(),
        c.modules.cpc as u64,
        c.modules.osd as u64,
        c.modules.afw as u64,
    ]);
    let train = words(&[
        t.episodes as u64,
        t.lr.to_bits(),
        (t.optimizer == OptimizerKind::Adam) as u64,
        t.lambda.to_bits(),
        t.shots as u64,
        t.seed,
        t.finetune_steps as u64,
        t.finetune_lr.to_bits(),
        t.leave_one_out as u64,
    ]);
    vec![
        ("meta.vit".into(), vit),
        ("meta.model".into(), model),
        ("meta.train".into(), train),
        ("meta.step".into(), words(&[ckpt.step])),
    ]
}

pub fn encode(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    ckpt.model.check()?;
    let meta = meta_tensors(ckpt);
    let mut all: Vec<(String, &Tensor)> = meta.iter().map(|(n, t)| (n.clone(), t)).collect();
    all.extend(ckpt.model.named());
    encode_tensors(&all)
}

fn flag(rec: &TensorRecord, v: u64) -> Result<bool, FormatError> {
    match v {
        0 => Ok(false),
        1 => Ok(true),
        other => Err(FormatError::Invalid { offset: rec.offset, what: "metadata", detail: format!("{}: flag {other}", rec.name) }),
    }
}

fn count(rec: &TensorRecord, v: u64) -> Result<usize, FormatError> {
    usize::try_from(v).map_err(|_| FormatError::Invalid { offset: rec.offset, what: "metadata", detail: format!("{}: {v} too large", rec.name) })
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint, FormatError> {
    let records = decode_tensors(bytes)?;
    let end = bytes.len() as u64;
    let mut by_name: BTreeMap<&str, &TensorRecord> = BTreeMap::new();
    for rec in &records {
        if by_name.insert(&rec.name, rec).is_some() {
            return Err(FormatError::Invalid { offset: rec.offset, what: "tensor", detail: format!("duplicate tensor {}", rec.name) });
        }
    }
    let take = |name: &str| -> Result<&TensorRecord, FormatError> {
        by_name
            .get(name)
            .copied()
            .ok_or_else(|| FormatError::Invalid { offset: end, what: "checkpoint", detail: format!("missing tensor {name}") })
    };

    let rec = take("meta.vit")?;
    let w = unwords(rec, 9)?;
    let vit = VitConfig {
        layers: count(rec, w[0])?,
        dim: count(rec, w[1])?,
        grid: count(rec, w[2])?,
        heads: count(rec, w[3])?,
        mlp_ratio: count(rec, w[4])?,
        patch: count(rec, w[5])?,
        channels: count(rec, w[6])?,
        granularity: if flag(rec, w[7])? { Granularity::PerSublayer } else { Granularity::PerBlock },
        norm_mode: if flag(rec, w[8])? { NormMode::PreNorm } else { NormMode::NormFree },
    };
    let rec = take("meta.model")?;
    let w = unwords(rec, 6)?;
    let metric = match w[1] {
        0 => Metric::Cosine,
        1 => Metric::Euclidean,
        2 => Metric::Dot,
        other => {
            return Err(FormatError::Invalid { offset: rec.offset, what: "metadata", detail: format!("metric code {other}") })
        }
    };
    let config = ModelConfig {
        vit,
        rank: count(rec, w[0])?,
        metric,
        temperature: f64::from_bits(w[2]),
        modules: Modules { cpc: flag(rec, w[3])?, osd: flag(rec, w[4])?, afw: flag(rec, w[5])? },
    };
    let rec = take("meta.train")?;
    let w = unwords(rec, 9)?;
    let train = TrainConfig {
        episodes: count(rec, w[0])?,
        lr: f64::from_bits(w[1]),
        optimizer: if flag(rec, w[2])? { OptimizerKind::Adam } else { OptimizerKind::Sgd },
        lambda: f64::from_bits(w[3]),
        shots: count(rec, w[4])?,
        seed: w[5],
        finetune_steps: count(rec, w[6])?,
        finetune_lr: f64::from_bits(w[7]),
        leave_one_out: flag(rec, w[8])?,
    };
    let step = unwords(take("meta.step")?, 1)?[0];

    let mut model = Model::init(config.clone(), 0).map_err(|e| FormatError::Invalid {
        offset: end,
        what: "checkpoint config",
        detail: e.to_string(),
    })?;
    if let Some(rec) = by_name.get("afw.w") {
        let fw = FusionWeights::from_tensor(rec.tensor.clone())
            .map_err(|e| FormatError::Invalid { offset: rec.offset, what: "tensor", detail: e.to_string() })?;
        model.afw = Some(fw);
    }
    let expected: Vec<String> = model.named().into_iter().map(|(n, _)| n).collect();
    let known = expected.len() + 4;
    if records.len() != known {
        let stray = records
            .iter()
            .find(|r| !r.name.starts_with("meta.") && !expected.contains(&r.name))
            .map(|r| (r.offset, r.name.clone()));
        let missing = expected.iter().find(|n| !by_name.contains_key(n.as_str()));
        let (offset, detail) = match (stray, missing) {
            (Some((o, n)), _) => (o, format!("unexpected tensor {n}")),
            (None, Some(n)) => (end, format!("missing tensor {n}")),
            (None, None) => (end, format!("{} tensors, expected {known}", records.len())),
        };
        return Err(FormatError::Invalid { offset, what: "checkpoint", detail });
    }
    let mut slots: Vec<&mut Tensor> = model.vit.tensors_mut();
    if let Some(OsdParams { w_in, w_orth, w_out }) = &mut model.osd {
        slots.extend([w_in, w_orth, w_out]);
    }
    if let Some(a) = &mut model.afw {
        slots.push(&mut a.w);
    }
    for (name, slot) in expected.iter().zip(slots) {
        let rec = take(name)?;
        if rec.tensor.dims() != slot.dims() {
            return Err(FormatError::Invalid {
                offset: rec.offset,
                what: "tensor",
                detail: format!("{name} has shape {:?}, expected {:?}", rec.tensor.dims(), slot.dims()),
            });
        }
        *slot = rec.tensor.clone();
    }
    Ok(Checkpoint { model, train, step })
}

pub fn write(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = encode(ckpt)?;
    crate::binary::write_file(path, &bytes)
}

pub fn read(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| SdrcError::io(path, e))?;
    decode(&bytes).map_err(|e| SdrcError::format(path, e))
}
