//! Re-composition of the `L²` score maps, prediction and losses.
//!
//! Source training averages all pair maps. Target finetuning scales each
//! pair's background and foreground map by a learned weight before
//! averaging; with all weights at one the two rules coincide.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::{Tape, Var};
use crate::cpc::ScoreStack;
use crate::error::{Error, Result};
use crate::math;
use crate::tensor::Tensor;

pub const DEFAULT_TEMPERATURE: f64 = 10.0;
pub const BCE_FLOOR: f64 = 1e-7;

/// Per-pair background/foreground weights, `L²×2`.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionWeights {
    pub w: Tensor,
}

impl FusionWeights {
    pub fn ones(components: usize) -> Self {
        Self { w: Tensor::ones([components * components, 2]) }
    }

    pub fn from_tensor(w: Tensor) -> Result<Self> {
        match *w.dims() {
            [pairs, 2] if is_square(pairs) => Ok(Self { w }),
            _ => Err(Error::shape("fusion weights", format!("expected L²×2, got {:?}", w.dims()))),
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.w.len()
    }

    pub fn pairs(&self) -> usize {
        self.w.dims()[0]
    }
}

fn is_square(n: usize) -> bool {
    let r = math::sqrt(n as f64) as usize;
    (r.saturating_sub(1)..=r + 1).any(|c| c * c == n)
}

/// Mean over pairs on the tape. `stack` is `(2·P)×M` ordered (pair, channel);
/// `weights`, when present, is the `P×2` weight node. Returns `2×M`.
pub fn fuse_on(tape: &mut Tape, stack: Var, pairs: usize, weights: Option<Var>) -> Result<Var> {
    let [rows, m] = *tape.dims(stack) else {
        return Err(Error::shape("fuse", format!("expected a matrix, got {:?}", tape.dims(stack))));
    };
    if rows != 2 * pairs {
        return Err(Error::shape("fuse", format!("{rows} rows for {pairs} pairs")));
    }
    let scaled = match weights {
        Some(w) => {
            if tape.dims(w) != [pairs, 2] {
                return Err(Error::shape("fuse", format!("weights {:?} for {pairs} pairs", tape.dims(w))));
            }
            // (pair, channel) row-major flattening matches the stack's row order.
            let column = tape.reshape(w, &[2 * pairs, 1])?;
            tape.mul_column(stack, column)?
        }
        None => stack,
    };
    let per_pair = tape.reshape(scaled, &[pairs, 2 * m])?;
    let ones = tape.constant(&Tensor::ones([1, pairs]));
    let total = tape.matmul(ones, per_pair)?;
    let total = tape.reshape(total, &[2, m])?;
    tape.scale(total, 1.0 / pairs as f64)
}

fn fuse(stack: &ScoreStack, weights: Option<&FusionWeights>) -> Result<Tensor> {
    let pairs = stack.pairs();
    let (h, w) = stack.grid();
    let mut tape = Tape::new();
    let s = tape.constant(&stack.maps.clone().reshape([2 * pairs, h * w])?);
    let wv = match weights {
        Some(fw) => {
            if fw.w.dims() != [pairs, 2] {
                return Err(Error::shape("fuse_afw", format!("weights {:?} for {pairs} pairs", fw.w.dims())));
            }
            Some(tape.constant(&fw.w))
        }
        None => None,
    };
    let out = fuse_on(&mut tape, s, pairs, wv)?;
    tape.value(out).reshape([2, h, w])
}

/// `Σ_l C(l) / L²`
pub fn fuse_source(stack: &ScoreStack) -> Result<Tensor> {
    fuse(stack, None)
}

/// `Σ_l w(l) ⊙ C(l) / L²`
pub fn fuse_afw(stack: &ScoreStack, weights: &FusionWeights) -> Result<Tensor> {
    fuse(stack, Some(weights))
}

/// 1-D bilinear weights from `n` source cells to `out` pixels (half-pixel
/// centers, edges clamped): `n×out`.
fn linear_weights(n: usize, out: usize) -> Vec<f64> {
    let mut u = vec![0.0; n * out];
    let scale = n as f64 / out as f64;
    for o in 0..out {
        let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = math::floor(src) as usize;
        let i1 = (i0 + 1).min(n - 1);
        let frac = src - i0 as f64;
        u[i0 * out + o] += 1.0 - frac;
        u[i1 * out + o] += frac;
    }
    u
}

/// `(gh·gw)×(h·w)` matrix that bilinearly resizes a flattened `gh×gw` map.
pub fn upsample_matrix(gh: usize, gw: usize, h: usize, w: usize) -> Tensor {
    let uy = linear_weights(gh, h);
    let ux = linear_weights(gw, w);
    let cols = h * w;
    Tensor::from_fn([gh * gw, cols], |i| {
        let (src, dst) = (i / cols, i % cols);
        let (ry, rx) = (src / gw, src % gw);
        let (y, x) = (dst / w, dst % w);
        (uy[ry * h + y] * ux[rx * w + x]) as f32
    })
}

/// Upsampled class scores on the tape: `fused` is `2×(gh·gw)`, the result
/// `2×(h·w)`.
pub fn upsample_on(tape: &mut Tape, fused: Var, grid: (usize, usize), h: usize, w: usize) -> Result<Var> {
    let u = tape.constant(&upsample_matrix(grid.0, grid.1, h, w));
    tape.matmul(fused, u)
}

/// Class probabilities on the tape from upsampled scores.
pub fn probs_on(tape: &mut Tape, upsampled: Var, temperature: f64) -> Result<Var> {
    let scaled = tape.scale(upsampled, temperature)?;
    tape.softmax(scaled, 0)
}

/// Mean `−ln p[target]` on the tape; `probs` is `2×P`, `target` has `P` binary entries.
pub fn bce_on(tape: &mut Tape, probs: Var, target: &Tensor) -> Result<Var> {
    let p = target.len();
    if tape.dims(probs) != [2, p] {
        return Err(Error::shape("bce", format!("probs {:?} for {p} target pixels", tape.dims(probs))));
    }
    let mut onehot = vec![0.0f32; 2 * p];
    for (i, &t) in target.data().iter().enumerate() {
        onehot[if t > 0.5 { p + i } else { i }] = 1.0;
    }
    let select = tape.constant(&Tensor::new([2, p], onehot)?);
    let logp = tape.ln_clamped(probs, BCE_FLOOR)?;
    let picked = tape.mul(logp, select)?;
    let total = tape.sum(picked)?;
    tape.scale(total, -1.0 / p as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    /// `2×h×w`
    pub probs: Tensor,
    /// `h×w` in {0, 1}
    pub labels: Tensor,
}

/// Foreground wherever its score strictly exceeds background; ties go to
/// background.
pub fn labels_from_scores(scores: &[f64], pixels: usize) -> Vec<f32> {
    (0..pixels).map(|i| if scores[pixels + i] > scores[i] { 1.0 } else { 0.0 }).collect()
}

pub fn predict(c_fusion: &Tensor, h: usize, w: usize, temperature: f64) -> Result<Prediction> {
    let [2, gh, gw] = *c_fusion.dims() else {
        return Err(Error::shape("predict", format!("expected 2×n×n, got {:?}", c_fusion.dims())));
    };
    if h < gh || w < gw {
        return Err(Error::contract(format!("predict: output {h}×{w} smaller than grid {gh}×{gw}")));
    }
    if temperature <= 0.0 {
        return Err(Error::contract("predict: temperature must be positive"));
    }
    let mut tape = Tape::new();
    let c = tape.constant(&c_fusion.clone().reshape([2, gh * gw])?);
    let up = upsample_on(&mut tape, c, (gh, gw), h, w)?;
    let probs = probs_on(&mut tape, up, temperature)?;
    let labels = labels_from_scores(tape.value_f64(up), h * w);
    Ok(Prediction { probs: tape.value(probs).reshape([2, h, w])?, labels: Tensor::new([h, w], labels)? })
}

pub fn bce_loss(probs: &Tensor, target: &Tensor) -> Result<f64> {
    let [2, h, w] = *probs.dims() else {
        return Err(Error::shape("bce", format!("expected 2×h×w, got {:?}", probs.dims())));
    };
    if target.dims() != [h, w] {
        return Err(Error::shape("bce", format!("target {:?} for probs {:?}", target.dims(), probs.dims())));
    }
    let mut tape = Tape::new();
    let p = tape.constant(&probs.clone().reshape([2, h * w])?);
    let loss = bce_on(&mut tape, p, target)?;
    tape.scalar(loss)
}

/// `bce + λ·orth`
pub fn total_loss(bce: f64, orth: f64, lambda: f64) -> Result<f64> {
    if lambda < 0.0 {
        return Err(Error::contract("lambda must be non-negative"));
    }
    Ok(bce + lambda * orth)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Miou {
    pub iou_fg: f64,
    pub iou_bg: f64,
    pub mean: f64,
}

/// Two-class IoU; a class absent from both prediction and ground truth
/// scores 1.
pub fn miou(pred: &Tensor, gt: &Tensor) -> Result<Miou> {
    if pred.dims() != gt.dims() {
        return Err(Error::shape("miou", format!("{:?} vs {:?}", pred.dims(), gt.dims())));
    }
    let (mut inter, mut union) = ([0usize; 2], [0usize; 2]);
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        let (p, g) = ((p > 0.5) as usize, (g > 0.5) as usize);
        for class in 0..2 {
            let (pc, gc) = (p == class, g == class);
            inter[class] += (pc && gc) as usize;
            union[class] += (pc || gc) as usize;
        }
    }
    let iou = |c: usize| if union[c] == 0 { 1.0 } else { inter[c] as f64 / union[c] as f64 };
    let (iou_bg, iou_fg) = (iou(0), iou(1));
    Ok(Miou { iou_fg, iou_bg, mean: 0.5 * (iou_fg + iou_bg) })
}
