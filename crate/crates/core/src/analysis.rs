//! Representation diagnostics: HSIC/CKA, layer-pair CKA grids and their
//! aggregates, the cross-term expansion of a cosine similarity between two
//! residual streams, and a histogram mutual-information estimator.
//!
//! Everything here computes in `f64`.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;
use crate::tensor::Tensor;
use crate::vit::{decompose, ResidualStream};

/// Row-major `f64` matrix used by the similarity routines.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat64 {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat64 {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() || rows == 0 || cols == 0 {
            return Err(Error::shape("mat64", format!("{rows}×{cols} from {} values", data.len())));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let [rows, cols] = *t.dims() else {
            return Err(Error::shape("mat64", format!("expected a matrix, got {:?}", t.dims())));
        };
        Ok(Self { rows, cols, data: t.data().iter().map(|&v| v as f64).collect() })
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    /// `self · selfᵀ`
    pub fn gram(&self) -> Mat64 {
        let m = self.rows;
        let mut out = vec![0.0; m * m];
        for i in 0..m {
            for j in i..m {
                let s: f64 = (0..self.cols).map(|c| self.at(i, c) * self.at(j, c)).sum();
                out[i * m + j] = s;
                out[j * m + i] = s;
            }
        }
        Mat64 { rows: m, cols: m, data: out }
    }

    /// Subtracts each column's mean.
    pub fn center_columns(&self) -> Mat64 {
        let mut out = self.clone();
        for c in 0..self.cols {
            let mean = (0..self.rows).map(|r| self.at(r, c)).sum::<f64>() / self.rows as f64;
            for r in 0..self.rows {
                out.data[r * self.cols + c] -= mean;
            }
        }
        out
    }
}

/// `tr(K H L H) / (m − 1)²` with `H = I − 11ᵀ/m`.
pub fn hsic(k: &Mat64, l: &Mat64) -> Result<f64> {
    let m = k.rows;
    if k.cols != m || l.rows != m || l.cols != m {
        return Err(Error::shape("hsic", format!("{}×{} and {}×{}", k.rows, k.cols, l.rows, l.cols)));
    }
    if m < 2 {
        return Err(Error::contract("hsic needs at least two samples"));
    }
    // tr(KHLH) = tr((HKH) L); HKH is K with row, column and grand means removed.
    let row_mean: Vec<f64> = (0..m).map(|i| (0..m).map(|j| k.at(i, j)).sum::<f64>() / m as f64).collect();
    let col_mean: Vec<f64> = (0..m).map(|j| (0..m).map(|i| k.at(i, j)).sum::<f64>() / m as f64).collect();
    let grand = row_mean.iter().sum::<f64>() / m as f64;
    let mut trace = 0.0;
    for i in 0..m {
        for j in 0..m {
            let centered = k.at(i, j) - row_mean[i] - col_mean[j] + grand;
            trace += centered * l.at(j, i);
        }
    }
    Ok(trace / ((m - 1) * (m - 1)) as f64)
}

/// Linear CKA between two representations of the same `m` samples.
pub fn cka_mat(x: &Mat64, y: &Mat64) -> Result<f64> {
    if x.rows != y.rows {
        return Err(Error::shape("cka", format!("{} vs {} samples", x.rows, y.rows)));
    }
    if x.rows < 2 {
        return Err(Error::contract("cka needs at least two samples"));
    }
    let (xc, yc) = (x.center_columns(), y.center_columns());
    for (name, raw, centered) in [("X", x, &xc), ("Y", y, &yc)] {
        let scale = raw.data.iter().fold(1.0f64, |a, &v| a.max(math::abs(v)));
        let spread = centered.data.iter().fold(0.0f64, |a, &v| a.max(math::abs(v)));
        if spread <= 1e-12 * scale {
            return Err(Error::degenerate(format!("cka: {name} is constant across samples")));
        }
    }
    let (k, l) = (xc.gram(), yc.gram());
    let kl = hsic(&k, &l)?;
    let kk = hsic(&k, &k)?;
    let ll = hsic(&l, &l)?;
    if kk <= 0.0 || ll <= 0.0 {
        return Err(Error::degenerate("cka: zero self-HSIC"));
    }
    Ok((kl / math::sqrt(kk * ll)).clamp(0.0, 1.0))
}

pub fn cka(x: &Tensor, y: &Tensor) -> Result<f64> {
    cka_mat(&Mat64::from_tensor(x)?, &Mat64::from_tensor(y)?)
}

/// Mean over tokens of a `d×N` component, giving a length-`d` feature.
pub fn token_mean(component: &Tensor) -> Result<Vec<f64>> {
    let [d, n] = *component.dims() else {
        return Err(Error::shape("token_mean", format!("expected d×N, got {:?}", component.dims())));
    };
    let x = component.data();
    Ok((0..d).map(|r| x[r * n..(r + 1) * n].iter().map(|&v| v as f64).sum::<f64>() / n as f64).collect())
}

/// Square grid of CKA values between source layers (rows) and target layers
/// (columns).
#[derive(Debug, Clone, PartialEq)]
pub struct CkaMatrix {
    pub size: usize,
    pub values: Vec<f64>,
    pub row_domain: String,
    pub col_domain: String,
}

impl CkaMatrix {
    pub fn get(&self, source_layer: usize, target_layer: usize) -> f64 {
        self.values[source_layer * self.size + target_layer]
    }

    pub fn diagonal_mean(&self) -> f64 {
        (0..self.size).map(|i| self.get(i, i)).sum::<f64>() / self.size as f64
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }
}

fn layer_features(streams: &[ResidualStream], layer: usize) -> Result<Mat64> {
    let mut data = Vec::new();
    let mut cols = 0;
    for s in streams {
        let c = s
            .contributions
            .get(layer)
            .ok_or_else(|| Error::shape("layer_pair_cka", format!("stream has no component {layer}")))?;
        let f = token_mean(c)?;
        cols = f.len();
        data.extend(f);
    }
    Mat64::new(streams.len(), cols, data)
}

/// CKA between every (source component `i`, target component `j`) pair, with
/// each image represented by the token mean of its component. Streams are
/// paired by index.
pub fn layer_pair_cka(source: &[ResidualStream], target: &[ResidualStream]) -> Result<CkaMatrix> {
    if source.is_empty() || target.is_empty() {
        return Err(Error::contract("layer_pair_cka needs non-empty stream lists"));
    }
    if source.len() != target.len() {
        return Err(Error::contract(format!(
            "layer_pair_cka pairs streams by index: {} source vs {} target",
            source.len(),
            target.len()
        )));
    }
    let size = source[0].contributions.len();
    if target.iter().chain(source).any(|s| s.contributions.len() != size) {
        return Err(Error::shape("layer_pair_cka", "streams disagree on component count"));
    }
    let src: Vec<Mat64> = (0..size).map(|l| layer_features(source, l)).collect::<Result<_>>()?;
    let tgt: Vec<Mat64> = (0..size).map(|l| layer_features(target, l)).collect::<Result<_>>()?;
    let mut values = Vec::with_capacity(size * size);
    for (i, s) in src.iter().enumerate() {
        for (j, t) in tgt.iter().enumerate() {
            let v = cka_mat(s, t).map_err(|e| match e {
                Error::Degenerate(msg) => Error::degenerate(format!("layer pair ({i}, {j}): {msg}")),
                other => other,
            })?;
            values.push(v);
        }
    }
    Ok(CkaMatrix { size, values, row_domain: String::from("source"), col_domain: String::from("target") })
}

/// CKA between the final outputs of paired streams (token-mean features).
pub fn output_cka(source: &[ResidualStream], target: &[ResidualStream]) -> Result<f64> {
    let rows = |streams: &[ResidualStream]| -> Result<Mat64> {
        let mut data = Vec::new();
        let mut cols = 0;
        for s in streams {
            let f = token_mean(&s.output)?;
            cols = f.len();
            data.extend(f);
        }
        Mat64::new(streams.len(), cols, data)
    };
    cka_mat(&rows(source)?, &rows(target)?)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CkaAggregates {
    pub final_output: f64,
    /// Mean of the diagonal.
    pub layerwise_avg: f64,
    pub topk_avg: f64,
    pub bottomk_avg: f64,
    pub k: usize,
}

/// Summary rows: diagonal mean plus the means of the `k` largest and `k`
/// smallest entries of the whole grid.
pub fn cka_aggregates(matrix: &CkaMatrix, final_output_cka: f64, k: usize) -> Result<CkaAggregates> {
    if k == 0 {
        return Err(Error::contract("cka_aggregates: k must be positive"));
    }
    if k > matrix.values.len() {
        return Err(Error::contract(format!("cka_aggregates: k = {k} exceeds {} entries", matrix.values.len())));
    }
    let mut sorted = matrix.values.clone();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let bottom = sorted[..k].iter().sum::<f64>() / k as f64;
    let top = sorted[sorted.len() - k..].iter().sum::<f64>() / k as f64;
    Ok(CkaAggregates {
        final_output: final_output_cka,
        layerwise_avg: matrix.diagonal_mean(),
        topk_avg: top,
        bottomk_avg: bottom,
        k,
    })
}

/// Cosine similarity between two stream outputs, expanded into the dot
/// products of every pair of components (`Z⁰` included as component 0).
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityDecomposition {
    pub total: f64,
    /// `(L+1)×(L+1)`, row = support component, column = query component.
    pub cross_terms: Vec<f64>,
    pub size: usize,
    pub norm_product: f64,
}

impl SimilarityDecomposition {
    pub fn term(&self, i: usize, j: usize) -> f64 {
        self.cross_terms[i * self.size + j]
    }

    pub fn recomposed(&self) -> f64 {
        self.cross_terms.iter().sum::<f64>() / self.norm_product
    }
}

pub fn decomposed_similarity(support: &ResidualStream, query: &ResidualStream) -> Result<SimilarityDecomposition> {
    if support.output.dims() != query.output.dims() || support.contributions.len() != query.contributions.len() {
        return Err(Error::shape("decomposed_similarity", "streams differ in shape"));
    }
    let (ns, nq) = (support.output.norm(), query.output.norm());
    if ns == 0.0 || nq == 0.0 {
        return Err(Error::degenerate("decomposed_similarity: zero-norm feature"));
    }
    let total = support.output.dot(&query.output)? / (ns * nq);
    let cs = decompose(support);
    let cq = decompose(query);
    let size = cs.len();
    let mut cross_terms = Vec::with_capacity(size * size);
    for a in &cs {
        for b in &cq {
            cross_terms.push(a.dot(b)?);
        }
    }
    Ok(SimilarityDecomposition { total, cross_terms, size, norm_product: ns * nq })
}

fn bin_index(v: f64, lo: f64, width: f64, bins: usize) -> usize {
    (math::floor((v - lo) / width) as usize).min(bins - 1)
}

/// Mutual information between channel `c` of `a` and channel `c` of `b`,
/// averaged over channels and divided by `ln(bins)`.
///
/// Each channel is cut into `bins` equal-width bins between its own min and
/// max. A constant channel has zero entropy and contributes 0.
pub fn mutual_information(a: &Tensor, b: &Tensor, bins: usize) -> Result<f64> {
    let (x, y) = (Mat64::from_tensor(a)?, Mat64::from_tensor(b)?);
    mutual_information_mat(&x, &y, bins)
}

pub fn mutual_information_mat(a: &Mat64, b: &Mat64, bins: usize) -> Result<f64> {
    if a.rows != b.rows || a.cols != b.cols {
        return Err(Error::shape("mutual_information", format!("{}×{} vs {}×{}", a.rows, a.cols, b.rows, b.cols)));
    }
    if bins < 2 {
        return Err(Error::contract("mutual_information needs at least two bins"));
    }
    if a.rows < bins {
        return Err(Error::contract(format!("mutual_information: {} samples for {bins} bins", a.rows)));
    }
    let m = a.rows;
    let binned = |mat: &Mat64, c: usize| -> Option<Vec<usize>> {
        let col = (0..m).map(|r| mat.at(r, c));
        let lo = col.clone().fold(f64::INFINITY, f64::min);
        let hi = col.clone().fold(f64::NEG_INFINITY, f64::max);
        if hi <= lo {
            return None;
        }
        let width = (hi - lo) / bins as f64;
        Some(col.map(|v| bin_index(v, lo, width, bins)).collect())
    };
    let mut total = 0.0;
    for c in 0..a.cols {
        let (Some(ba), Some(bb)) = (binned(a, c), binned(b, c)) else { continue };
        let mut joint = vec![0usize; bins * bins];
        let mut pa = vec![0usize; bins];
        let mut pb = vec![0usize; bins];
        for (&i, &j) in ba.iter().zip(&bb) {
            joint[i * bins + j] += 1;
            pa[i] += 1;
            pb[j] += 1;
        }
        let mf = m as f64;
        let mut mi = 0.0;
        for i in 0..bins {
            for j in 0..bins {
                let n = joint[i * bins + j];
                if n > 0 {
                    let pxy = n as f64 / mf;
                    mi += pxy * math::ln(pxy * mf * mf / (pa[i] as f64 * pb[j] as f64));
                }
            }
        }
        total += mi;
    }
    Ok(total / a.cols as f64 / math::ln(bins as f64))
}

/// Average of [`mutual_information`] over all unordered pairs of distinct
/// components. Each component is an `m×d` matrix (one row per sample).
pub fn mean_pairwise_mi(components: &[Mat64], bins: usize) -> Result<f64> {
    if components.len() < 2 {
        return Err(Error::contract("mean_pairwise_mi needs at least two components"));
    }
    let mut total = 0.0;
    let mut pairs = 0;
    for i in 0..components.len() {
        for j in i + 1..components.len() {
            total += mutual_information_mat(&components[i], &components[j], bins)?;
            pairs += 1;
        }
    }
    Ok(total / pairs as f64)
}
