//! Procedural two-domain benchmark and episodic sampling.
//!
//! A domain is a set of object classes. Every class composes 2–4 parts drawn
//! from a shared part library (shape, extent, texture), placed at class-fixed
//! offsets. Two domains built from the same `part_seed` but different
//! `grammar_seed`s have different classes made of the same kinds of parts.
//! The style knobs then shift how those parts look.
//!
//! Per-sample seeds are `derive_seed(derive_seed(seed, class), sample)`, and
//! rendering draws geometry and clutter from separate streams, so two domains
//! that differ only in style render the same geometry.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use crate::error::{Error, Result};
use crate::math;
use crate::rng::{derive_seed, SplitMix64};
use crate::tensor::Tensor;

const PART_LIBRARY: usize = 12;
const TEXTURE_AMPLITUDE: f64 = 0.22;
const MAX_ATTEMPTS: u64 = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct DomainSpec {
    pub seed: u64,
    /// Seeds the part library shared between domains.
    pub part_seed: u64,
    /// Seeds how classes compose library parts.
    pub grammar_seed: u64,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// First class id; class `c` gets `class_offset + c`.
    pub class_offset: u32,
    pub background: f64,
    /// Relative change of every texture frequency.
    pub texture_freq_offset: f64,
    /// Cyclic shift applied to part colors, in intensity units.
    pub palette_rotation: f64,
    /// Expected clutter blobs per 64 pixels.
    pub clutter_density: f64,
    /// Per-sample uniform offset range applied to the background level and
    /// the palette rotation.
    pub style_jitter: f64,
}

impl Default for DomainSpec {
    fn default() -> Self {
        Self::source()
    }
}

impl DomainSpec {
    pub fn source() -> Self {
        Self {
            seed: 1,
            part_seed: 7,
            grammar_seed: 11,
            height: 32,
            width: 32,
            channels: 1,
            class_offset: 0,
            background: 0.2,
            texture_freq_offset: 0.0,
            palette_rotation: 0.0,
            clutter_density: 0.0,
            style_jitter: 0.0,
        }
    }

    pub fn target() -> Self {
        Self {
            seed: 2,
            grammar_seed: 23,
            class_offset: 1000,
            background: 0.35,
            texture_freq_offset: 0.6,
            palette_rotation: 0.35,
            clutter_density: 0.5,
            ..Self::source()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.height < 4 || self.width < 4 || self.channels == 0 {
            return Err(Error::contract(format!(
                "domain images must be at least 4×4 with one channel, got {}×{}×{}",
                self.channels, self.height, self.width
            )));
        }
        if self.height > u16::MAX as usize || self.width > u16::MAX as usize || self.channels > u8::MAX as usize {
            return Err(Error::contract("domain image extents exceed the dataset format"));
        }
        let knobs = [self.background, self.texture_freq_offset, self.palette_rotation, self.clutter_density, self.style_jitter];
        if knobs.iter().any(|v| !v.is_finite())
            || self.clutter_density < 0.0
            || self.style_jitter < 0.0
            || self.texture_freq_offset <= -1.0
        {
            return Err(Error::contract("domain style knobs must be finite, clutter and jitter ≥ 0, frequency offset > −1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Shape {
    Ellipse,
    Rect,
    Triangle,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Texture {
    Flat,
    Stripes { freq: f64, angle: f64 },
    Checker { period: f64 },
    Rings { freq: f64 },
}

#[derive(Debug, Clone, PartialEq)]
struct PartTemplate {
    shape: Shape,
    /// Half extents as fractions of the image side.
    rx: f64,
    ry: f64,
    texture: Texture,
    /// One base intensity per channel.
    color: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
struct ClassPart {
    template: usize,
    /// Offset from the object center, fraction of the image side.
    dx: f64,
    dy: f64,
    angle: f64,
}

fn part_library(spec: &DomainSpec) -> Vec<PartTemplate> {
    let mut rng = SplitMix64::new(spec.part_seed);
    (0..PART_LIBRARY)
        .map(|_| {
            let shape = [Shape::Ellipse, Shape::Rect, Shape::Triangle][rng.below(3)];
            let rx = rng.uniform(0.09, 0.2);
            let ry = rng.uniform(0.09, 0.2);
            let texture = match rng.below(4) {
                0 => Texture::Flat,
                1 => Texture::Stripes { freq: rng.uniform(0.12, 0.3), angle: rng.uniform(0.0, PI) },
                2 => Texture::Checker { period: rng.uniform(2.0, 4.0) },
                _ => Texture::Rings { freq: rng.uniform(0.12, 0.3) },
            };
            let color = (0..spec.channels).map(|_| rng.uniform(0.45, 0.95)).collect();
            PartTemplate { shape, rx, ry, texture, color }
        })
        .collect()
}

fn class_grammar(spec: &DomainSpec, class: usize) -> Vec<ClassPart> {
    let mut rng = SplitMix64::new(derive_seed(spec.grammar_seed, class as u64));
    let count = 2 + rng.below(3);
    let mut templates: Vec<usize> = (0..PART_LIBRARY).collect();
    rng.shuffle(&mut templates);
    templates[..count]
        .iter()
        .enumerate()
        .map(|(i, &template)| {
            // The first part sits at the center; the rest attach around it.
            let (dx, dy) = if i == 0 {
                (0.0, 0.0)
            } else {
                let a = rng.uniform(0.0, 2.0 * PI);
                let r = rng.uniform(0.1, 0.2);
                (r * math::cos(a), r * math::sin(a))
            };
            ClassPart { template, dx, dy, angle: rng.uniform(0.0, PI) }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub class_id: u32,
    /// `C×h×w`
    pub image: Tensor,
    /// `h×w` in {0, 1}
    pub mask: Tensor,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

impl Dataset {
    /// Sorted distinct class ids.
    pub fn class_ids(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = self.samples.iter().map(|s| s.class_id).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    pub fn indices_of(&self, class_id: u32) -> Vec<usize> {
        (0..self.samples.len()).filter(|&i| self.samples[i].class_id == class_id).collect()
    }
}

/// A rendered sample plus how many object primitives wrote each pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct Rendered {
    pub sample: Sample,
    pub coverage: Vec<u32>,
}

fn texture_value(texture: Texture, freq_scale: f64, u: f64, v: f64) -> f64 {
    match texture {
        Texture::Flat => 0.0,
        Texture::Stripes { freq, angle } => {
            math::sin(2.0 * PI * freq * freq_scale * (u * math::cos(angle) + v * math::sin(angle)))
        }
        Texture::Checker { period } => {
            let p = period / freq_scale;
            let s = math::sin(PI * u / p) * math::sin(PI * v / p);
            if s >= 0.0 {
                1.0
            } else {
                -1.0
            }
        }
        Texture::Rings { freq } => math::cos(2.0 * PI * freq * freq_scale * math::sqrt(u * u + v * v)),
    }
}

/// Inside test in the part's local frame, with coordinates normalized by its
/// half extents.
fn inside(shape: Shape, a: f64, b: f64) -> bool {
    match shape {
        Shape::Ellipse => a * a + b * b <= 1.0,
        Shape::Rect => math::abs(a) <= 1.0 && math::abs(b) <= 1.0,
        // apex at b = −1, base at b = 1
        Shape::Triangle => (-1.0..=1.0).contains(&b) && math::abs(a) <= (b + 1.0) / 2.0,
    }
}

fn rotate_palette(v: f64, rotation: f64) -> f64 {
    let x = v + rotation;
    x - math::floor(x)
}

struct Canvas {
    c: usize,
    h: usize,
    w: usize,
    pixels: Vec<f32>,
}

impl Canvas {
    /// Paints an oriented shape; `paint(u, v, channel)` gives the value at
    /// local offsets `(u, v)` in pixels. Returns the covered pixel indices.
    fn fill(
        &mut self,
        shape: Shape,
        center: (f64, f64),
        half: (f64, f64),
        angle: f64,
        mut paint: impl FnMut(f64, f64, usize) -> f64,
    ) -> Vec<usize> {
        let (cs, sn) = (math::cos(angle), math::sin(angle));
        let reach = half.0.max(half.1) * 1.5 + 1.0;
        let y0 = (center.1 - reach).max(0.0) as usize;
        let y1 = ((center.1 + reach) as usize + 1).min(self.h);
        let x0 = (center.0 - reach).max(0.0) as usize;
        let x1 = ((center.0 + reach) as usize + 1).min(self.w);
        let mut covered = Vec::new();
        for y in y0..y1 {
            for x in x0..x1 {
                let (px, py) = (x as f64 + 0.5 - center.0, y as f64 + 0.5 - center.1);
                let (u, v) = (cs * px + sn * py, -sn * px + cs * py);
                if inside(shape, u / half.0, v / half.1) {
                    for ch in 0..self.c {
                        self.pixels[(ch * self.h + y) * self.w + x] = paint(u, v, ch) as f32;
                    }
                    covered.push(y * self.w + x);
                }
            }
        }
        covered
    }
}

fn render_attempt(
    spec: &DomainSpec,
    library: &[PartTemplate],
    grammar: &[ClassPart],
    class_id: u32,
    seed: u64,
) -> Rendered {
    let (h, w, c) = (spec.height, spec.width, spec.channels);
    let side = h.min(w) as f64;
    let mut geo = SplitMix64::new(derive_seed(seed, 1));
    let mut clutter = SplitMix64::new(derive_seed(seed, 2));

    let mut style = SplitMix64::new(derive_seed(seed, 3));
    let background = spec.background + style.uniform(-spec.style_jitter, spec.style_jitter);
    let rotation = spec.palette_rotation + style.uniform(-spec.style_jitter, spec.style_jitter);

    let mut canvas = Canvas { c, h, w, pixels: vec![background as f32; c * h * w] };

    let blobs = math::floor(spec.clutter_density * (h * w) as f64 / 64.0 + clutter.next_f64()) as usize;
    for _ in 0..blobs {
        let center = (clutter.uniform(0.0, w as f64), clutter.uniform(0.0, h as f64));
        let half = (clutter.uniform(0.8, 2.5), clutter.uniform(0.8, 2.5));
        let level: Vec<f64> = (0..c).map(|_| clutter.uniform(0.0, 1.0)).collect();
        canvas.fill(Shape::Ellipse, center, half, 0.0, |_, _, ch| level[ch]);
    }

    let scale = geo.uniform(0.85, 1.15) * side;
    let center = (
        w as f64 / 2.0 + geo.uniform(-0.12, 0.12) * side,
        h as f64 / 2.0 + geo.uniform(-0.12, 0.12) * side,
    );
    let spin = geo.uniform(-0.3, 0.3);
    let freq_scale = 1.0 + spec.texture_freq_offset;
    let mut coverage = vec![0u32; h * w];
    let mut mask = vec![0.0f32; h * w];
    for part in grammar {
        let t = &library[part.template];
        let jitter: Vec<f64> = (0..c).map(|_| geo.uniform(-0.06, 0.06)).collect();
        let (cs, sn) = (math::cos(spin), math::sin(spin));
        let (ox, oy) = (part.dx * scale, part.dy * scale);
        let pc = (center.0 + cs * ox - sn * oy, center.1 + sn * ox + cs * oy);
        let half = (t.rx * scale, t.ry * scale);
        let covered = canvas.fill(t.shape, pc, half, part.angle + spin, |u, v, ch| {
            let base = rotate_palette(t.color[ch] + jitter[ch], rotation);
            base + TEXTURE_AMPLITUDE * texture_value(t.texture, freq_scale, u, v)
        });
        for i in covered {
            coverage[i] += 1;
            mask[i] = 1.0;
        }
    }

    let sample = Sample {
        class_id,
        image: Tensor::new([c, h, w], canvas.pixels).expect("canvas matches its dims"),
        mask: Tensor::new([h, w], mask).expect("mask matches its dims"),
    };
    Rendered { sample, coverage }
}

/// Renders one sample of class index `class`, resampling geometry until the
/// mask holds both foreground and background.
pub fn render_sample(spec: &DomainSpec, class: usize, index: usize) -> Result<Rendered> {
    spec.validate()?;
    let library = part_library(spec);
    let grammar = class_grammar(spec, class);
    render_with(spec, &library, &grammar, class, index)
}

fn render_with(
    spec: &DomainSpec,
    library: &[PartTemplate],
    grammar: &[ClassPart],
    class: usize,
    index: usize,
) -> Result<Rendered> {
    let class_id = class_id_of(spec, class)?;
    let base = derive_seed(derive_seed(spec.seed, class as u64), index as u64);
    for attempt in 0..MAX_ATTEMPTS {
        let r = render_attempt(spec, library, grammar, class_id, derive_seed(base, attempt));
        let fg = r.sample.mask.data().iter().filter(|&&v| v > 0.5).count();
        if fg > 0 && fg < r.sample.mask.len() {
            return Ok(r);
        }
    }
    Err(Error::degenerate(format!("class {class} sample {index}: no non-degenerate mask in {MAX_ATTEMPTS} attempts")))
}

fn class_id_of(spec: &DomainSpec, class: usize) -> Result<u32> {
    u32::try_from(class)
        .ok()
        .and_then(|c| spec.class_offset.checked_add(c))
        .ok_or_else(|| Error::contract("class id overflows u32"))
}

pub fn generate_domain(spec: &DomainSpec, classes: usize, samples_per_class: usize) -> Result<Dataset> {
    spec.validate()?;
    if classes < 2 {
        return Err(Error::contract(format!("need at least 2 classes, got {classes}")));
    }
    if samples_per_class < 2 {
        return Err(Error::contract(format!("need at least 2 samples per class, got {samples_per_class}")));
    }
    class_id_of(spec, classes - 1)?;
    let library = part_library(spec);
    let mut samples = Vec::with_capacity(classes * samples_per_class);
    for class in 0..classes {
        let grammar = class_grammar(spec, class);
        for index in 0..samples_per_class {
            samples.push(render_with(spec, &library, &grammar, class, index)?.sample);
        }
    }
    Ok(Dataset { samples })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub class_id: u32,
    pub supports: Vec<Sample>,
    pub query: Sample,
    /// Dataset indices of the supports followed by the query.
    pub indices: Vec<usize>,
}

impl Episode {
    pub fn shots(&self) -> usize {
        self.supports.len()
    }
}

/// Uniform class among those with at least `k + 1` samples, then `k + 1`
/// distinct samples: the first `k` are supports, the last the query.
pub fn sample_episode(dataset: &Dataset, k: usize, seed: u64) -> Result<Episode> {
    if k == 0 {
        return Err(Error::contract("episodes need at least one support"));
    }
    let eligible: Vec<(u32, Vec<usize>)> = dataset
        .class_ids()
        .into_iter()
        .map(|c| (c, dataset.indices_of(c)))
        .filter(|(_, idx)| idx.len() > k)
        .collect();
    if eligible.is_empty() {
        return Err(Error::contract(format!("no class has {} samples for a {k}-shot episode", k + 1)));
    }
    let mut rng = SplitMix64::new(seed);
    let (class_id, mut pool) = eligible[rng.below(eligible.len())].clone();
    // partial Fisher–Yates
    for i in 0..=k {
        let j = i + rng.below(pool.len() - i);
        pool.swap(i, j);
    }
    let indices = pool[..=k].to_vec();
    Ok(Episode {
        class_id,
        supports: indices[..k].iter().map(|&i| dataset.samples[i].clone()).collect(),
        query: dataset.samples[indices[k]].clone(),
        indices,
    })
}

/// `count` episodes with seeds `derive_seed(seed, i)`.
pub fn sample_episodes(dataset: &Dataset, k: usize, seed: u64, count: usize) -> Result<Vec<Episode>> {
    (0..count).map(|i| sample_episode(dataset, k, derive_seed(seed, i as u64))).collect()
}
