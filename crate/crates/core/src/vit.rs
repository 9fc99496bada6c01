//! A small vision transformer that records its residual stream.
//!
//! Tokens are stored as columns: a stream state is a `d×N` matrix. Each block
//! applies `Ẑ = Z + MSA(Z)` then `Z' = Ẑ + MLP(Ẑ)`; the forward pass keeps
//! both increments so that the output can be written as `Z⁰` plus a sum of
//! per-component contributions. In pre-norm mode the sublayers see a
//! standardized copy of the stream, but the recorded values are still the
//! realized increments, so the sum identity holds in both modes.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::math;
use crate::rng::SplitMix64;
use crate::tensor::Tensor;

const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Granularity {
    /// One component per block (MSA + MLP merged).
    PerBlock,
    /// MSA and MLP recorded separately, `2L` components.
    PerSublayer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    NormFree,
    PreNorm,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VitConfig {
    pub layers: usize,
    pub dim: usize,
    /// Tokens per side; the stream has `grid²` tokens.
    pub grid: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Pixel side of one patch.
    pub patch: usize,
    pub channels: usize,
    pub granularity: Granularity,
    pub norm_mode: NormMode,
}

impl Default for VitConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            dim: 32,
            grid: 8,
            heads: 2,
            mlp_ratio: 2,
            patch: 4,
            channels: 1,
            granularity: Granularity::PerBlock,
            norm_mode: NormMode::NormFree,
        }
    }
}

impl VitConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::contract(msg));
        if self.layers == 0 {
            return fail("vit needs at least one layer".into());
        }
        if self.grid < 2 {
            return fail(format!("grid must be at least 2, got {}", self.grid));
        }
        if self.heads == 0 || self.dim == 0 || self.dim % self.heads != 0 {
            return fail(format!("dim {} not divisible by heads {}", self.dim, self.heads));
        }
        if self.mlp_ratio == 0 || self.patch == 0 || self.channels == 0 {
            return fail("mlp_ratio, patch and channels must be positive".into());
        }
        Ok(())
    }

    pub fn tokens(&self) -> usize {
        self.grid * self.grid
    }

    pub fn hidden(&self) -> usize {
        self.dim * self.mlp_ratio
    }

    pub fn image_side(&self) -> usize {
        self.grid * self.patch
    }

    pub fn patch_len(&self) -> usize {
        self.channels * self.patch * self.patch
    }

    /// Number of recorded components (excluding `Z⁰`).
    pub fn components(&self) -> usize {
        match self.granularity {
            Granularity::PerBlock => self.layers,
            Granularity::PerSublayer => 2 * self.layers,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    /// `hidden×d`
    pub w1: Tensor,
    /// `hidden×1`
    pub b1: Tensor,
    /// `d×hidden`
    pub w2: Tensor,
    /// `d×1`
    pub b2: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VitParams {
    /// `d×(C·p²)`
    pub patch: Tensor,
    /// `d×N`
    pub pos: Tensor,
    pub blocks: Vec<BlockParams>,
}

fn fan_in_uniform(rng: &mut SplitMix64, rows: usize, cols: usize) -> Tensor {
    let bound = 1.0 / math::sqrt(cols as f64);
    Tensor::from_fn([rows, cols], |_| rng.uniform(-bound, bound) as f32)
}

impl VitParams {
    /// Fan-in uniform weights, zero biases, positions from N(0, 0.02²).
    pub fn init(config: &VitConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = SplitMix64::new(seed);
        let (d, h) = (config.dim, config.hidden());
        let patch = fan_in_uniform(&mut rng, d, config.patch_len());
        let pos = Tensor::from_fn([d, config.tokens()], |_| (0.02 * rng.normal()) as f32);
        let blocks = (0..config.layers)
            .map(|_| BlockParams {
                wq: fan_in_uniform(&mut rng, d, d),
                wk: fan_in_uniform(&mut rng, d, d),
                wv: fan_in_uniform(&mut rng, d, d),
                wo: fan_in_uniform(&mut rng, d, d),
                w1: fan_in_uniform(&mut rng, h, d),
                b1: Tensor::zeros([h, 1]),
                w2: fan_in_uniform(&mut rng, d, h),
                b2: Tensor::zeros([d, 1]),
            })
            .collect();
        Ok(Self { patch, pos, blocks })
    }

    /// Named tensors in a fixed order (the checkpoint order).
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        out.push((String::from("vit.patch"), &self.patch));
        out.push((String::from("vit.pos"), &self.pos));
        for (l, b) in self.blocks.iter().enumerate() {
            for (name, t) in [
                ("wq", &b.wq),
                ("wk", &b.wk),
                ("wv", &b.wv),
                ("wo", &b.wo),
                ("w1", &b.w1),
                ("b1", &b.b1),
                ("w2", &b.w2),
                ("b2", &b.b2),
            ] {
                out.push((format!("vit.block{l}.{name}"), t));
            }
        }
        out
    }

    /// Mutable tensors in the same order as [`VitParams::named`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        out.push(&mut self.patch);
        out.push(&mut self.pos);
        for b in &mut self.blocks {
            out.extend([&mut b.wq, &mut b.wk, &mut b.wv, &mut b.wo, &mut b.w1, &mut b.b1, &mut b.w2, &mut b.b2]);
        }
        out
    }

    /// Checks every tensor against the shapes `config` implies.
    pub fn check(&self, config: &VitConfig) -> Result<()> {
        config.validate()?;
        let (d, h, n) = (config.dim, config.hidden(), config.tokens());
        let expect = |name: &str, t: &Tensor, dims: &[usize]| -> Result<()> {
            if t.dims() != dims {
                return Err(Error::shape("vit params", format!("{name}: {:?}, expected {dims:?}", t.dims())));
            }
            Ok(())
        };
        expect("patch", &self.patch, &[d, config.patch_len()])?;
        expect("pos", &self.pos, &[d, n])?;
        if self.blocks.len() != config.layers {
            return Err(Error::shape(
                "vit params",
                format!("{} blocks for {} layers", self.blocks.len(), config.layers),
            ));
        }
        for b in &self.blocks {
            for t in [&b.wq, &b.wk, &b.wv, &b.wo] {
                expect("attention", t, &[d, d])?;
            }
            expect("w1", &b.w1, &[h, d])?;
            expect("b1", &b.b1, &[h, 1])?;
            expect("w2", &b.w2, &[d, h])?;
            expect("b2", &b.b2, &[d, 1])?;
        }
        Ok(())
    }

    /// Puts every tensor on `tape`, tracked when `trainable`.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> VitVars {
        let mut put = |t: &Tensor| if trainable { tape.param(t) } else { tape.constant(t) };
        let patch = put(&self.patch);
        let pos = put(&self.pos);
        let blocks = self
            .blocks
            .iter()
            .map(|b| BlockVars {
                wq: put(&b.wq),
                wk: put(&b.wk),
                wv: put(&b.wv),
                wo: put(&b.wo),
                w1: put(&b.w1),
                b1: put(&b.b1),
                w2: put(&b.w2),
                b2: put(&b.b2),
            })
            .collect();
        VitVars { patch, pos, blocks }
    }
}

#[derive(Debug, Clone)]
pub struct BlockVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

/// [`VitParams`] bound to a tape.
#[derive(Debug, Clone)]
pub struct VitVars {
    pub patch: Var,
    pub pos: Var,
    pub blocks: Vec<BlockVars>,
}

impl VitVars {
    /// Vars in the order of [`VitParams::named`].
    pub fn all(&self) -> Vec<Var> {
        let mut out = alloc::vec![self.patch, self.pos];
        for b in &self.blocks {
            out.extend([b.wq, b.wk, b.wv, b.wo, b.w1, b.b1, b.w2, b.b2]);
        }
        out
    }
}

/// `Z⁰` plus the recorded additive contributions of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualStream {
    pub z0: Tensor,
    pub contributions: Vec<Tensor>,
    pub output: Tensor,
    pub granularity: Granularity,
}

impl ResidualStream {
    /// Merges per-sublayer contributions pairwise into per-block ones.
    pub fn fold_blocks(&self) -> Result<ResidualStream> {
        match self.granularity {
            Granularity::PerBlock => Ok(self.clone()),
            Granularity::PerSublayer => {
                let contributions = self
                    .contributions
                    .chunks(2)
                    .map(|pair| match pair {
                        [msa, mlp] => msa.add(mlp),
                        _ => Err(Error::contract("odd number of sublayer contributions")),
                    })
                    .collect::<Result<_>>()?;
                Ok(ResidualStream {
                    z0: self.z0.clone(),
                    contributions,
                    output: self.output.clone(),
                    granularity: Granularity::PerBlock,
                })
            }
        }
    }
}

/// Graph-side counterpart of [`ResidualStream`].
#[derive(Debug, Clone)]
pub struct StreamVars {
    pub z0: Var,
    pub contributions: Vec<Var>,
    pub output: Var,
}

/// Rearranges a `C×H×W` image into a `(C·p²)×N` matrix, one column per patch
/// in row-major patch order.
pub fn patchify(image: &Tensor, patch: usize) -> Result<Tensor> {
    let [c, h, w] = *image.dims() else {
        return Err(Error::shape("patch_embed", format!("expected C×H×W, got {:?}", image.dims())));
    };
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::shape("patch_embed", format!("{h}×{w} image is not divisible into {patch}-pixel patches")));
    }
    let (gy, gx) = (h / patch, w / patch);
    let rows = c * patch * patch;
    let cols = gy * gx;
    let src = image.data();
    Ok(Tensor::from_fn([rows, cols], |i| {
        let (r, t) = (i / cols, i % cols);
        let (ch, dy, dx) = (r / (patch * patch), (r / patch) % patch, r % patch);
        let (ty, tx) = (t / gx, t % gx);
        src[(ch * h + ty * patch + dy) * w + tx * patch + dx]
    }))
}

fn check_image(image: &Tensor, config: &VitConfig) -> Result<()> {
    let side = config.image_side();
    if image.dims() != [config.channels, side, side] {
        return Err(Error::shape(
            "patch_embed",
            format!("image {:?}, expected [{}, {side}, {side}]", image.dims(), config.channels),
        ));
    }
    Ok(())
}

/// `Z⁰ = W_patch · patches + positions` on the tape.
pub fn embed_on(tape: &mut Tape, image: &Tensor, vars: &VitVars, config: &VitConfig) -> Result<Var> {
    check_image(image, config)?;
    let patches = tape.constant(&patchify(image, config.patch)?);
    let projected = tape.matmul(vars.patch, patches)?;
    tape.add(projected, vars.pos)
}

pub fn patch_embed(image: &Tensor, params: &VitParams, config: &VitConfig) -> Result<Tensor> {
    params.check(config)?;
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape, false);
    let z0 = embed_on(&mut tape, image, &vars, config)?;
    Ok(tape.value(z0))
}

fn attention(tape: &mut Tape, x: Var, b: &BlockVars, config: &VitConfig) -> Result<Var> {
    let dh = config.dim / config.heads;
    let scale = 1.0 / math::sqrt(dh as f64);
    let q = tape.matmul(b.wq, x)?;
    let k = tape.matmul(b.wk, x)?;
    let v = tape.matmul(b.wv, x)?;
    let mut heads = Vec::with_capacity(config.heads);
    for h in 0..config.heads {
        let qh = tape.slice_rows(q, h * dh, dh)?;
        let kh = tape.slice_rows(k, h * dh, dh)?;
        let vh = tape.slice_rows(v, h * dh, dh)?;
        let qt = tape.transpose(qh)?;
        let scores = tape.matmul(qt, kh)?;
        let scores = tape.scale(scores, scale)?;
        // rows: query tokens, columns: key tokens
        let weights = tape.softmax(scores, 1)?;
        let wt = tape.transpose(weights)?;
        heads.push(tape.matmul(vh, wt)?);
    }
    let merged = tape.concat_rows(&heads)?;
    tape.matmul(b.wo, merged)
}

fn mlp(tape: &mut Tape, x: Var, b: &BlockVars) -> Result<Var> {
    let h = tape.matmul(b.w1, x)?;
    let h = tape.add_column(h, b.b1)?;
    let h = tape.gelu(h)?;
    let out = tape.matmul(b.w2, h)?;
    tape.add_column(out, b.b2)
}

fn sublayer_input(tape: &mut Tape, z: Var, config: &VitConfig) -> Result<Var> {
    match config.norm_mode {
        NormMode::NormFree => Ok(z),
        NormMode::PreNorm => tape.normalize_columns_std(z, NORM_EPS),
    }
}

/// Runs the blocks from `z0`, recording each increment per the configured
/// granularity.
pub fn forward_on(tape: &mut Tape, z0: Var, vars: &VitVars, config: &VitConfig) -> Result<StreamVars> {
    if tape.dims(z0) != [config.dim, config.tokens()] {
        return Err(Error::shape(
            "forward",
            format!("z0 {:?}, expected [{}, {}]", tape.dims(z0), config.dim, config.tokens()),
        ));
    }
    let mut z = z0;
    let mut contributions = Vec::with_capacity(config.components());
    for b in &vars.blocks {
        let x = sublayer_input(tape, z, config)?;
        let msa = attention(tape, x, b, config)?;
        let z_hat = tape.add(z, msa)?;
        let x = sublayer_input(tape, z_hat, config)?;
        let mlp_out = mlp(tape, x, b)?;
        z = tape.add(z_hat, mlp_out)?;
        match config.granularity {
            Granularity::PerSublayer => contributions.extend([msa, mlp_out]),
            Granularity::PerBlock => contributions.push(tape.add(msa, mlp_out)?),
        }
    }
    Ok(StreamVars { z0, contributions, output: z })
}

fn check_z0(z0: &Tensor, config: &VitConfig) -> Result<()> {
    if z0.dims() != [config.dim, config.tokens()] {
        return Err(Error::shape(
            "forward",
            format!("z0 {:?}, expected [{}, {}]", z0.dims(), config.dim, config.tokens()),
        ));
    }
    Ok(())
}

pub fn forward_recorded(z0: &Tensor, params: &VitParams, config: &VitConfig) -> Result<ResidualStream> {
    params.check(config)?;
    check_z0(z0, config)?;
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape, false);
    let z = tape.constant(z0);
    let stream = forward_on(&mut tape, z, &vars, config)?;
    Ok(ResidualStream {
        z0: z0.clone(),
        contributions: stream.contributions.iter().map(|&v| tape.value(v)).collect(),
        output: tape.value(stream.output),
        granularity: config.granularity,
    })
}

/// Image to residual stream: `patch_embed` followed by [`forward_recorded`].
pub fn encode(image: &Tensor, params: &VitParams, config: &VitConfig) -> Result<ResidualStream> {
    let z0 = patch_embed(image, params, config)?;
    forward_recorded(&z0, params, config)
}

/// `[Z⁰, component₁, …]` at the stream's granularity.
pub fn decompose(stream: &ResidualStream) -> Vec<Tensor> {
    let mut out = Vec::with_capacity(stream.contributions.len() + 1);
    out.push(stream.z0.clone());
    out.extend(stream.contributions.iter().cloned());
    out
}

/// Elementwise sum with `f64` accumulation.
pub fn reconstruct(components: &[Tensor]) -> Result<Tensor> {
    let first = components.first().ok_or_else(|| Error::shape("reconstruct", "no components"))?;
    let mut acc: Vec<f64> = first.data().iter().map(|&v| v as f64).collect();
    for c in &components[1..] {
        if c.dims() != first.dims() {
            return Err(Error::shape("reconstruct", format!("{:?} vs {:?}", c.dims(), first.dims())));
        }
        for (a, &v) in acc.iter_mut().zip(c.data()) {
            *a += v as f64;
        }
    }
    Tensor::new(first.dims().to_vec(), acc.into_iter().map(|v| v as f32).collect())
}
