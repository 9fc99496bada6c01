//! Cross-pattern comparison.
//!
//! Support components are mask-average-pooled into one background and one
//! foreground prototype per component. Every query component `i` is then
//! compared position by position with the prototypes of every component `j`,
//! giving `L²` two-channel score maps. Pair `(i, j)` lives at row `i·L + j`;
//! channel 0 is background, channel 1 foreground.

use alloc::format;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, MaskSide, Result};
use crate::math;
use crate::tensor::Tensor;

/// Guard for the column normalizations on the tape. Exact zero norms are
/// rejected before normalizing.
const NORM_EPS: f64 = 1e-12;

/// Similarity measure; larger always means more similar.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Cosine,
    /// Negated Euclidean distance.
    Euclidean,
    Dot,
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Metric::Cosine => "cosine",
            Metric::Euclidean => "euclidean",
            Metric::Dot => "dot",
        })
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(Metric::Cosine),
            "euclidean" => Ok(Metric::Euclidean),
            "dot" => Ok(Metric::Dot),
            other => Err(Error::contract(format!("unknown metric {other:?}"))),
        }
    }
}

pub fn distance(metric: Metric, x: &Tensor, p: &Tensor) -> Result<f64> {
    if x.len() != p.len() {
        return Err(Error::shape("distance", format!("{:?} vs {:?}", x.dims(), p.dims())));
    }
    match metric {
        Metric::Dot => x.dot(p),
        Metric::Cosine => {
            let (nx, np) = (x.norm(), p.norm());
            if nx == 0.0 || np == 0.0 {
                return Err(Error::degenerate("cosine distance of a zero-norm vector"));
            }
            Ok(x.dot(p)? / (nx * np))
        }
        Metric::Euclidean => {
            let sq: f64 = x
                .data()
                .iter()
                .zip(p.data())
                .map(|(&a, &b)| (a as f64 - b as f64) * (a as f64 - b as f64))
                .sum();
            Ok(-math::sqrt(sq))
        }
    }
}

/// Area-majority downsampling of an `h×w` binary mask to `n×n`: a cell is
/// foreground when strictly more than half of its pixels are; ties go to
/// background.
pub fn downsample_mask(mask: &Tensor, n: usize) -> Result<Tensor> {
    let [h, w] = *mask.dims() else {
        return Err(Error::shape("downsample_mask", format!("expected h×w, got {:?}", mask.dims())));
    };
    if n == 0 || h % n != 0 || w % n != 0 {
        return Err(Error::shape("downsample_mask", format!("{h}×{w} not divisible into {n}×{n} cells")));
    }
    let (ch, cw) = (h / n, w / n);
    let data = mask.data();
    Ok(Tensor::from_fn([n, n], |i| {
        let (cy, cx) = (i / n, i % n);
        let mut fg = 0;
        for y in cy * ch..(cy + 1) * ch {
            for x in cx * cw..(cx + 1) * cw {
                if data[y * w + x] > 0.5 {
                    fg += 1;
                }
            }
        }
        if 2 * fg > ch * cw {
            1.0
        } else {
            0.0
        }
    }))
}

/// `M×2` pooling matrix: column 0 averages background positions, column 1
/// foreground positions.
pub fn pooling_weights(mask: &Tensor) -> Result<Tensor> {
    let m = mask.len();
    let fg = mask.data().iter().filter(|&&v| v > 0.5).count();
    let bg = m - fg;
    if fg == 0 {
        return Err(Error::EmptyMaskRegion(MaskSide::Foreground));
    }
    if bg == 0 {
        return Err(Error::EmptyMaskRegion(MaskSide::Background));
    }
    let (wf, wb) = (1.0 / fg as f32, 1.0 / bg as f32);
    let data = mask
        .data()
        .iter()
        .flat_map(|&v| if v > 0.5 { [0.0, wf] } else { [wb, 0.0] })
        .collect();
    Tensor::new([m, 2], data)
}

/// One background and one foreground prototype per component, each `L×d`.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeSet {
    pub fg: Tensor,
    pub bg: Tensor,
}

impl PrototypeSet {
    pub fn components(&self) -> usize {
        self.fg.dims()[0]
    }
}

fn component_dims(components: &[Tensor], op: &'static str) -> Result<(usize, usize, usize)> {
    let first = components.first().ok_or_else(|| Error::shape(op, "no components"))?;
    let [d, h, w] = *first.dims() else {
        return Err(Error::shape(op, format!("expected d×n×n, got {:?}", first.dims())));
    };
    if components.iter().any(|c| c.dims() != first.dims()) {
        return Err(Error::shape(op, "components differ in shape"));
    }
    Ok((d, h, w))
}

/// Prototypes on the tape: for each `d×M` component, a `2×d` matrix whose
/// row 0 is the background prototype and row 1 the foreground one.
pub fn map_prototypes_on(tape: &mut Tape, components: &[Var], mask: &Tensor) -> Result<Vec<Var>> {
    let weights = pooling_weights(mask)?;
    let w = tape.constant(&weights);
    components
        .iter()
        .map(|&c| {
            let pooled = tape.matmul(c, w)?;
            tape.transpose(pooled)
        })
        .collect()
}

/// Averages per-shot prototype matrices component by component.
pub fn average_prototypes_on(tape: &mut Tape, shots: &[Vec<Var>]) -> Result<Vec<Var>> {
    let first = shots.first().ok_or_else(|| Error::contract("no support shots"))?;
    if shots.len() == 1 {
        return Ok(first.clone());
    }
    let k = shots.len() as f64;
    (0..first.len())
        .map(|l| {
            let terms: Vec<Var> = shots.iter().map(|s| s[l]).collect();
            let total = tape.add_all(&terms)?;
            tape.scale(total, 1.0 / k)
        })
        .collect()
}

pub fn map_prototypes(components: &[Tensor], mask: &Tensor) -> Result<PrototypeSet> {
    let (d, h, w) = component_dims(components, "map_prototypes")?;
    if mask.dims() != [h, w] {
        return Err(Error::shape("map_prototypes", format!("mask {:?} for {h}×{w} features", mask.dims())));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = components
        .iter()
        .map(|c| c.clone().reshape([d, h * w]).map(|t| tape.constant(&t)))
        .collect::<Result<_>>()?;
    let protos = map_prototypes_on(&mut tape, &vars, mask)?;
    let mut bg = Vec::with_capacity(components.len() * d);
    let mut fg = Vec::with_capacity(components.len() * d);
    for p in protos {
        let v = tape.value(p);
        bg.extend_from_slice(&v.data()[..d]);
        fg.extend_from_slice(&v.data()[d..]);
    }
    Ok(PrototypeSet { fg: Tensor::new([components.len(), d], fg)?, bg: Tensor::new([components.len(), d], bg)? })
}

/// Averages prototype sets of several support shots.
pub fn average_prototypes(sets: &[PrototypeSet]) -> Result<PrototypeSet> {
    let first = sets.first().ok_or_else(|| Error::contract("no prototype sets"))?;
    let k = sets.len() as f64;
    let avg = |pick: fn(&PrototypeSet) -> &Tensor| -> Result<Tensor> {
        let mut acc = alloc::vec![0.0f64; pick(first).len()];
        for s in sets {
            if pick(s).dims() != pick(first).dims() {
                return Err(Error::shape("average_prototypes", "prototype sets differ in shape"));
            }
            for (a, &v) in acc.iter_mut().zip(pick(s).data()) {
                *a += v as f64;
            }
        }
        Tensor::new(pick(first).dims().to_vec(), acc.into_iter().map(|v| (v / k) as f32).collect())
    };
    Ok(PrototypeSet { fg: avg(|s| &s.fg)?, bg: avg(|s| &s.bg)? })
}

fn reject_zero_columns(tape: &Tape, v: Var, what: &str) -> Result<()> {
    let dims = tape.dims(v);
    let (m, n) = (dims[0], dims[1]);
    let x = tape.value_f64(v);
    for j in 0..n {
        if (0..m).all(|i| x[i * n + j] == 0.0) {
            return Err(Error::degenerate(format!("cosine comparison of a zero-norm {what}")));
        }
    }
    Ok(())
}

/// Score maps on the tape: `query` holds `L` components of shape `d×M`,
/// `protos` the `2×d` prototype matrices. Returns a `(2·L²)×M` node whose
/// rows are ordered (pair `i·L + j`, channel).
pub fn cross_compare_on(tape: &mut Tape, query: &[Var], protos: &[Var], metric: Metric) -> Result<Var> {
    if query.len() != protos.len() || query.is_empty() {
        return Err(Error::shape(
            "cross_compare",
            format!("{} query components vs {} prototype sets", query.len(), protos.len()),
        ));
    }
    let mut rows = Vec::with_capacity(query.len() * protos.len());
    match metric {
        Metric::Cosine => {
            let mut qn = Vec::with_capacity(query.len());
            for &q in query {
                reject_zero_columns(tape, q, "query feature")?;
                qn.push(tape.normalize_columns_l2(q, NORM_EPS)?);
            }
            let mut pn = Vec::with_capacity(protos.len());
            for &p in protos {
                let pt = tape.transpose(p)?;
                reject_zero_columns(tape, pt, "prototype")?;
                let pt = tape.normalize_columns_l2(pt, NORM_EPS)?;
                pn.push(tape.transpose(pt)?);
            }
            for &q in &qn {
                for &p in &pn {
                    rows.push(tape.matmul(p, q)?);
                }
            }
        }
        Metric::Dot => {
            for &q in query {
                for &p in protos {
                    rows.push(tape.matmul(p, q)?);
                }
            }
        }
        Metric::Euclidean => {
            let d = tape.dims(query[0])[0];
            let ones = tape.constant(&Tensor::ones([1, d]));
            let mut columns = Vec::with_capacity(protos.len());
            for &p in protos {
                let mut pair = [p; 2];
                for (c, slot) in pair.iter_mut().enumerate() {
                    let row = tape.slice_rows(p, c, 1)?;
                    let col = tape.transpose(row)?;
                    *slot = tape.scale(col, -1.0)?;
                }
                columns.push(pair);
            }
            for &q in query {
                for pair in &columns {
                    let mut channels = [q; 2];
                    for (slot, &neg_p) in channels.iter_mut().zip(pair) {
                        let diff = tape.add_column(q, neg_p)?;
                        let sq = tape.mul(diff, diff)?;
                        let total = tape.matmul(ones, sq)?;
                        let dist = tape.sqrt(total, NORM_EPS)?;
                        *slot = tape.scale(dist, -1.0)?;
                    }
                    rows.push(tape.concat_rows(&channels)?);
                }
            }
        }
    }
    tape.concat_rows(&rows)
}

/// `L²×2×n×n` comparison maps.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreStack {
    pub maps: Tensor,
    pub metric: Metric,
    pub components: usize,
}

impl ScoreStack {
    /// Row of the (query component `i`, prototype component `j`) pair.
    pub fn pair_index(&self, i: usize, j: usize) -> usize {
        i * self.components + j
    }

    pub fn pairs(&self) -> usize {
        self.components * self.components
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.maps.dims()[2], self.maps.dims()[3])
    }

    /// The `2×n×n` map of one pair.
    pub fn pair_map(&self, i: usize, j: usize) -> Tensor {
        let (h, w) = self.grid();
        let len = 2 * h * w;
        let start = self.pair_index(i, j) * len;
        Tensor::new([2, h, w], self.maps.data()[start..start + len].to_vec()).expect("pair map shape")
    }
}

pub fn cross_compare(query: &[Tensor], protos: &PrototypeSet, metric: Metric) -> Result<ScoreStack> {
    let (d, h, w) = component_dims(query, "cross_compare")?;
    let l = query.len();
    if protos.fg.dims() != [l, d] || protos.bg.dims() != [l, d] {
        return Err(Error::shape(
            "cross_compare",
            format!("prototypes {:?} for {l} components of {d} channels", protos.fg.dims()),
        ));
    }
    let mut tape = Tape::new();
    let q: Vec<Var> = query
        .iter()
        .map(|c| c.clone().reshape([d, h * w]).map(|t| tape.constant(&t)))
        .collect::<Result<_>>()?;
    let p: Vec<Var> = (0..l)
        .map(|j| {
            let mut data = protos.bg.data()[j * d..(j + 1) * d].to_vec();
            data.extend_from_slice(&protos.fg.data()[j * d..(j + 1) * d]);
            Tensor::new([2, d], data).map(|t| tape.constant(&t))
        })
        .collect::<Result<_>>()?;
    let stack = cross_compare_on(&mut tape, &q, &p, metric)?;
    Ok(ScoreStack { maps: tape.value(stack).reshape([l * l, 2, h, w])?, metric, components: l })
}
