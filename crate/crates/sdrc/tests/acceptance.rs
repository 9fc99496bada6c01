//! Acceptance criteria, one PASS/FAIL line each.
//!
//! Runs without the libtest harness so the report is always printed. The
//! process fails when a criterion outside `KNOWN_FAILURES` fails, or when a
//! known failure starts passing (so the list cannot go stale).

use std::collections::BTreeMap;
use std::panic::{self, AssertUnwindSafe};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use sdrc::config::{parse_config, ExperimentConfig};
use sdrc::{checkpoint, epds, FormatError};
use sdrc_core::analysis::{self, Mat64};
use sdrc_core::autodiff::grad_check;
use sdrc_core::cpc::{self, Metric, PrototypeSet};
use sdrc_core::episodes::{self, Dataset, DomainSpec};
use sdrc_core::fusion::{self, FusionWeights};
use sdrc_core::osd;
use sdrc_core::pipeline::{self, Model, ModelConfig, Modules};
use sdrc_core::rng::SplitMix64;
use sdrc_core::trainer::{self, Checkpoint};
use sdrc_core::vit::{self, Granularity, NormMode, VitConfig, VitParams};
use sdrc_core::Tensor;

/// Criteria that fail at desk scale with the shipped configuration. The
/// numbers are printed on every run.
const KNOWN_FAILURES: &[u32] = &[8, 9, 10];

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)*) => {
        if !$cond {
            return Err(format!($($msg)*));
        }
    };
}

fn within(elapsed: Duration, limit_s: u64) -> Outcome {
    ensure!(elapsed.as_secs_f64() < limit_s as f64, "took {:.1}s, limit {limit_s}s", elapsed.as_secs_f64());
    Ok(format!("{:.2}s", elapsed.as_secs_f64()))
}

fn random(dims: &[usize], rng: &mut SplitMix64, scale: f64) -> Tensor {
    Tensor::from_fn(dims.to_vec(), |_| rng.uniform(-scale, scale) as f32)
}

// ---------------------------------------------------------------- oracles

type Mat = Vec<Vec<f64>>;

fn to_mat(t: &Tensor) -> Mat {
    let (r, c) = (t.dims()[0], t.dims()[1]);
    (0..r).map(|i| (0..c).map(|j| t.at(&[i, j]) as f64).collect()).collect()
}

fn mm(a: &Mat, b: &Mat) -> Mat {
    let (m, k, p) = (a.len(), b.len(), b[0].len());
    (0..m).map(|i| (0..p).map(|j| (0..k).map(|t| a[i][t] * b[t][j]).sum()).collect()).collect()
}

fn madd(a: &Mat, b: &Mat) -> Mat {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect()
}

fn transpose(a: &Mat) -> Mat {
    (0..a[0].len()).map(|j| a.iter().map(|r| r[j]).collect()).collect()
}

/// Norm-free forward in f64 with no bookkeeping.
fn plain_forward(z0: &Tensor, params: &VitParams, config: &VitConfig) -> Mat {
    let gelu = |x: f64| 0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x * x * x)).tanh());
    let mut z = to_mat(z0);
    let n = config.tokens();
    let dh = config.dim / config.heads;
    for b in &params.blocks {
        let (q, k, v) = (mm(&to_mat(&b.wq), &z), mm(&to_mat(&b.wk), &z), mm(&to_mat(&b.wv), &z));
        let mut merged = vec![vec![0.0; n]; config.dim];
        for h in 0..config.heads {
            let rows = h * dh..(h + 1) * dh;
            for i in 0..n {
                let s: Vec<f64> =
                    (0..n).map(|j| rows.clone().map(|c| q[c][i] * k[c][j]).sum::<f64>() / (dh as f64).sqrt()).collect();
                let max = s.iter().cloned().fold(f64::MIN, f64::max);
                let e: Vec<f64> = s.iter().map(|x| (x - max).exp()).collect();
                let total: f64 = e.iter().sum();
                for c in rows.clone() {
                    merged[c][i] = (0..n).map(|j| v[c][j] * e[j] / total).sum();
                }
            }
        }
        let z_hat = madd(&z, &mm(&to_mat(&b.wo), &merged));
        let mut hidden = mm(&to_mat(&b.w1), &z_hat);
        for (r, row) in hidden.iter_mut().enumerate() {
            row.iter_mut().for_each(|x| *x = gelu(*x + b.b1.data()[r] as f64));
        }
        let mut out = mm(&to_mat(&b.w2), &hidden);
        for (r, row) in out.iter_mut().enumerate() {
            row.iter_mut().for_each(|x| *x += b.b2.data()[r] as f64);
        }
        z = madd(&z_hat, &out);
    }
    z
}

fn random_vit(rng: &mut SplitMix64) -> (VitConfig, VitParams) {
    let config = VitConfig {
        layers: 1 + (rng.next_u64() % 4) as usize,
        dim: [8, 16, 32][(rng.next_u64() % 3) as usize],
        grid: 2 + (rng.next_u64() % 3) as usize,
        heads: 1 + (rng.next_u64() % 2) as usize,
        granularity: if rng.next_u64() % 2 == 0 { Granularity::PerBlock } else { Granularity::PerSublayer },
        norm_mode: NormMode::NormFree,
        ..VitConfig::default()
    };
    let mut params = VitParams::init(&config, rng.next_u64()).unwrap();
    for b in &mut params.blocks {
        b.b1 = random(b.b1.dims(), rng, 0.3);
        b.b2 = random(b.b2.dims(), rng, 0.3);
    }
    (config, params)
}

fn dense(m: &Mat64) -> Mat {
    (0..m.rows).map(|i| m.data[i * m.cols..(i + 1) * m.cols].to_vec()).collect()
}

fn naive_hsic(k: &Mat, l: &Mat) -> f64 {
    let m = k.len();
    let h: Mat = (0..m).map(|i| (0..m).map(|j| (i == j) as u8 as f64 - 1.0 / m as f64).collect()).collect();
    let p = mm(&mm(&mm(k, &h), l), &h);
    (0..m).map(|i| p[i][i]).sum::<f64>() / ((m - 1) * (m - 1)) as f64
}

fn random_mat(rows: usize, cols: usize, rng: &mut SplitMix64) -> Mat64 {
    Mat64::new(rows, cols, (0..rows * cols).map(|_| rng.normal()).collect()).unwrap()
}

/// `count` orthonormal vectors of length `n` by Gram-Schmidt.
fn orthonormal(count: usize, n: usize, rng: &mut SplitMix64) -> Mat {
    let mut rows: Mat = Vec::new();
    while rows.len() < count {
        let mut v: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
        for c in &rows {
            let d: f64 = v.iter().zip(c).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(c).for_each(|(a, b)| *a -= d * b);
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-6 {
            rows.push(v.into_iter().map(|a| a / norm).collect());
        }
    }
    rows
}

fn from_mat(m: &Mat) -> Mat64 {
    Mat64::new(m.len(), m[0].len(), m.iter().flatten().copied().collect()).unwrap()
}

// ---------------------------------------------------------------- shared experiment state

fn shipped() -> &'static ExperimentConfig {
    static C: OnceLock<ExperimentConfig> = OnceLock::new();
    C.get_or_init(|| {
        let c = ExperimentConfig::default();
        c.validate().unwrap();
        c
    })
}

fn datasets() -> &'static (Dataset, Dataset) {
    static D: OnceLock<(Dataset, Dataset)> = OnceLock::new();
    D.get_or_init(|| {
        let c = shipped();
        (
            episodes::generate_domain(&c.source, c.source_classes, c.source_samples).unwrap(),
            episodes::generate_domain(&c.target, c.target_classes, c.target_samples).unwrap(),
        )
    })
}

fn trained(modules: Modules, seed: u64) -> Checkpoint {
    static CACHE: OnceLock<std::sync::Mutex<BTreeMap<(String, u64), Checkpoint>>> = OnceLock::new();
    let cache = CACHE.get_or_init(Default::default);
    let key = (modules.label(), seed);
    if let Some(c) = cache.lock().unwrap().get(&key) {
        return c.clone();
    }
    let c = shipped();
    let model = ModelConfig { modules, ..c.model.clone() };
    let train = sdrc_core::trainer::TrainConfig { seed, ..c.train.clone() };
    let (ckpt, _) = trainer::train_source(&model, &train, &datasets().0).unwrap();
    cache.lock().unwrap().insert(key, ckpt.clone());
    ckpt
}

const CPC: Modules = Modules { cpc: true, osd: false, afw: false };
const CPC_AFW: Modules = Modules { cpc: true, osd: false, afw: true };
const CPC_OSD: Modules = Modules { cpc: true, osd: true, afw: false };

// ---------------------------------------------------------------- criteria

fn c1_exact_decomposition() -> Outcome {
    let start = Instant::now();
    let mut rng = SplitMix64::new(101);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let (config, params) = random_vit(&mut rng);
        let z0 = random(&[config.dim, config.tokens()], &mut rng, 1.0);
        let stream = vit::forward_recorded(&z0, &params, &config).map_err(|e| e.to_string())?;
        let rebuilt = vit::reconstruct(&vit::decompose(&stream)).map_err(|e| e.to_string())?;
        let oracle = plain_forward(&z0, &params, &config);
        for (r, row) in oracle.iter().enumerate() {
            for (c, &want) in row.iter().enumerate() {
                worst = worst.max((rebuilt.at(&[r, c]) as f64 - want).abs());
            }
        }
    }
    ensure!(worst < 1e-5, "max |reconstruct - plain_forward| = {worst:e}");
    Ok(format!("max error {worst:.1e} over 100 configs, {}", within(start.elapsed(), 10)?))
}

fn c2_similarity_identity() -> Outcome {
    let start = Instant::now();
    let mut rng = SplitMix64::new(202);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let (config, params) = random_vit(&mut rng);
        let a = vit::forward_recorded(&random(&[config.dim, config.tokens()], &mut rng, 1.0), &params, &config).unwrap();
        let b = vit::forward_recorded(&random(&[config.dim, config.tokens()], &mut rng, 1.0), &params, &config).unwrap();
        let s = analysis::decomposed_similarity(&a, &b).map_err(|e| e.to_string())?;
        let (x, y): (Vec<f64>, Vec<f64>) =
            a.output.data().iter().zip(b.output.data()).map(|(&p, &q)| (p as f64, q as f64)).unzip();
        let dot: f64 = x.iter().zip(&y).map(|(p, q)| p * q).sum();
        let direct = dot / (x.iter().map(|v| v * v).sum::<f64>().sqrt() * y.iter().map(|v| v * v).sum::<f64>().sqrt());
        worst = worst.max((s.recomposed() - direct).abs());
    }
    ensure!(worst < 1e-5, "max |sum(cross terms)/norms - cosine| = {worst:e}");
    Ok(format!("max error {worst:.1e} over 100 pairs, {}", within(start.elapsed(), 5)?))
}

fn c3_cka_suite() -> Outcome {
    let start = Instant::now();
    let mut rng = SplitMix64::new(303);
    let (mut self_err, mut inv_err, mut hsic_err) = (0.0f64, 0.0f64, 0.0f64);
    for m in 3..=8 {
        for _ in 0..10 {
            let d = 2 + (rng.next_u64() % 6) as usize;
            let x = random_mat(m, d, &mut rng);
            let y = random_mat(m, 3, &mut rng);
            self_err = self_err.max((analysis::cka_mat(&x, &x).unwrap() - 1.0).abs());

            let q = from_mat(&orthonormal(d, d, &mut rng));
            let xq = from_mat(&mm(&dense(&x), &transpose(&dense(&q))));
            let scaled = Mat64::new(m, d, x.data.iter().map(|v| 3.7 * v).collect()).unwrap();
            let base = analysis::cka_mat(&x, &y).unwrap();
            inv_err = inv_err.max((analysis::cka_mat(&xq, &y).unwrap() - base).abs());
            inv_err = inv_err.max((analysis::cka_mat(&scaled, &y).unwrap() - base).abs());

            let (k, l) = (x.gram(), y.gram());
            let want = naive_hsic(&dense(&k), &dense(&l));
            hsic_err = hsic_err.max((analysis::hsic(&k, &l).unwrap() - want).abs());
        }
    }
    ensure!(self_err <= 1e-9, "|cka(X,X) - 1| = {self_err:e}");
    ensure!(inv_err <= 1e-7, "invariance error {inv_err:e}");
    ensure!(hsic_err <= 1e-8, "hsic vs oracle {hsic_err:e}");
    Ok(format!(
        "self {self_err:.0e}, invariance {inv_err:.0e}, hsic {hsic_err:.0e}, {}",
        within(start.elapsed(), 5)?
    ))
}

fn c4_orthogonality() -> Outcome {
    let mut rng = SplitMix64::new(404);
    let ones = osd::orth_loss(&Tensor::ones([2, 1, 2])).unwrap();
    ensure!(ones == 10.0, "all-ones 2x2 gives {ones}");
    let mut worst_pos = 0.0f64;
    let mut best_neg = f64::INFINITY;
    for (r, h, w) in [(1, 2, 2), (2, 2, 2), (3, 2, 3), (4, 4, 4), (8, 4, 4)] {
        let rows = orthonormal(r, h * w, &mut rng);
        let t = Tensor::new([r, h, w], rows.iter().flatten().map(|&v| v as f32).collect()).unwrap();
        worst_pos = worst_pos.max(osd::orth_loss(&t).unwrap());
        // negatives: stretched row, tilted pair, and a random matrix
        let mut stretched = t.clone();
        stretched.data_mut()[..h * w].iter_mut().for_each(|v| *v *= 1.05);
        best_neg = best_neg.min(osd::orth_loss(&stretched).unwrap());
        if r >= 2 {
            let mut tilted = t.clone();
            let first: Vec<f32> = tilted.data()[..h * w].to_vec();
            tilted.data_mut()[h * w..2 * h * w].iter_mut().zip(first).for_each(|(v, f)| *v += 0.1 * f);
            best_neg = best_neg.min(osd::orth_loss(&tilted).unwrap());
        }
        best_neg = best_neg.min(osd::orth_loss(&random(&[r, h, w], &mut rng, 1.0)).unwrap());
    }
    ensure!(worst_pos < 1e-6, "orthonormal rows give {worst_pos:e}");
    ensure!(best_neg > 1e-3, "a non-orthonormal input gives only {best_neg:e}");
    let m = random(&[3, 5], &mut rng, 1.0);
    let err = grad_check(|tape, x| osd::orth_loss_on(tape, x), &m, 1e-5).unwrap();
    ensure!(err < 1e-4, "gradient relative error {err:e}");
    Ok(format!("ones=10, positives <= {worst_pos:.0e}, negatives >= {best_neg:.2e}, grad err {err:.0e}"))
}

fn c5_fusion_reduction() -> Outcome {
    let mut rng = SplitMix64::new(505);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let l = 1 + (rng.next_u64() % 5) as usize;
        let (d, n) = (2 + (rng.next_u64() % 6) as usize, 2 + (rng.next_u64() % 4) as usize);
        let query: Vec<Tensor> = (0..l).map(|_| random(&[d, n, n], &mut rng, 1.0)).collect();
        let protos = PrototypeSet { fg: random(&[l, d], &mut rng, 1.0), bg: random(&[l, d], &mut rng, 1.0) };
        for metric in [Metric::Cosine, Metric::Euclidean, Metric::Dot] {
            let stack = cpc::cross_compare(&query, &protos, metric).unwrap();
            let a = fusion::fuse_afw(&stack, &FusionWeights::ones(l)).unwrap();
            let b = fusion::fuse_source(&stack).unwrap();
            worst = worst.max(a.max_abs_diff(&b).unwrap());
        }
    }
    ensure!(worst <= 1e-7, "fuse_afw(ones) differs from fuse_source by {worst:e}");
    let vit12 = VitConfig { layers: 12, ..VitConfig::default() };
    let count = FusionWeights::ones(vit12.components()).parameter_count();
    ensure!(count == 288, "L=12 gives {count} weights");
    let model = Model::init(ModelConfig { vit: VitConfig { layers: 3, ..VitConfig::default() }, ..ModelConfig::default() }, 0).unwrap();
    let mut ckpt = Checkpoint { model, train: shipped().train.clone(), step: 0 };
    ckpt.model.afw = None;
    let sample = datasets().1.samples[0].clone();
    let tuned = trainer::finetune_target(&ckpt, &[sample], 0, 0.01).unwrap();
    let n = tuned.model.afw.map(|a| a.parameter_count()).unwrap_or(0);
    ensure!(n == 2 * 9, "L=3 model installs {n} weights");
    Ok(format!("max diff {worst:.0e}; 2L^2 = 18 at L=3, 288 at L=12"))
}

fn c6_gradient_integrity() -> Outcome {
    let start = Instant::now();
    let config = ModelConfig {
        vit: VitConfig { layers: 2, dim: 8, grid: 4, heads: 2, ..VitConfig::default() },
        rank: 4,
        ..ModelConfig::default()
    };
    let spec = DomainSpec { height: 16, width: 16, ..DomainSpec::source() };
    let data = episodes::generate_domain(&spec, 3, 3).unwrap();
    let episode = episodes::sample_episode(&data, 1, 7).unwrap();
    let mut model = Model::init(config, 3).unwrap();
    let lambda = 0.1;
    let (_, grads) = trainer::source_gradients(&model, &episode, lambda).map_err(|e| e.to_string())?;
    let names: Vec<String> = model.named().into_iter().map(|(n, _)| n).filter(|n| !n.starts_with("afw")).collect();
    ensure!(grads.len() == names.len(), "{} gradients for {} tensors", grads.len(), names.len());

    let loss = |m: &Model| trainer::source_gradients(m, &episode, lambda).unwrap().0;
    let mut worst = (0.0f64, String::new());
    let mut checked = 0;
    for (t, name) in names.iter().enumerate() {
        let len = grads[t].len();
        for i in 0..len {
            let original = slot(&mut model, t).data()[i];
            let step = 2e-5f32.max(original.abs() * 2e-5);
            let (up, down) = (original + step, original - step);
            slot(&mut model, t).data_mut()[i] = up;
            let lp = loss(&model);
            slot(&mut model, t).data_mut()[i] = down;
            let lm = loss(&model);
            slot(&mut model, t).data_mut()[i] = original;
            let fd = (lp - lm) / (up as f64 - down as f64);
            let g = grads[t][i];
            let rel = (g - fd).abs() / g.abs().max(fd.abs()).max(1e-6);
            if rel > worst.0 {
                worst = (rel, format!("{name}[{i}]: tape {g:e}, fd {fd:e}"));
            }
            checked += 1;
        }
    }
    ensure!(worst.0 < 1e-4, "relative error {:e} at {}", worst.0, worst.1);
    Ok(format!("{checked} entries, max relative error {:.1e}, {}", worst.0, within(start.elapsed(), 60)?))
}

/// Trainable tensor `t` in `named` order.
fn slot(model: &mut Model, t: usize) -> &mut Tensor {
    let mut all = model.vit.tensors_mut();
    if let Some(o) = &mut model.osd {
        all.extend([&mut o.w_in, &mut o.w_orth, &mut o.w_out]);
    }
    all.swap_remove(t)
}

fn c7_freeze_contracts() -> Outcome {
    let c = shipped();
    let config = ModelConfig { vit: VitConfig { layers: 2, dim: 16, ..c.model.vit.clone() }, ..c.model.clone() };
    let train = sdrc_core::trainer::TrainConfig { episodes: 20, ..c.train.clone() };
    let (ckpt, _) = trainer::train_source(&config, &train, &datasets().0).unwrap();
    ensure!(ckpt.model.afw.is_none(), "source training created fusion weights");
    let initial = Model::init(config.clone(), train.seed).unwrap();
    for ((name, before), (_, after)) in initial.named().iter().zip(ckpt.model.named()) {
        ensure!(*before != after, "source training left {name} untouched");
    }

    let mut with_afw = ckpt.clone();
    with_afw.model.afw = Some(FusionWeights::ones(config.components()));
    let ep = episodes::sample_episode(&datasets().1, 1, 5).unwrap();
    let tuned = trainer::finetune_target(&with_afw, &ep.supports, 30, 1e-2).unwrap();
    let mut changed = Vec::new();
    for ((name, before), (_, after)) in with_afw.model.named().iter().zip(tuned.model.named()) {
        let same = before.data().iter().zip(after.data()).all(|(a, b)| a.to_bits() == b.to_bits());
        if !same {
            changed.push(name.clone());
        }
    }
    ensure!(changed == ["osd.w_orth", "afw.w"], "finetuning changed {changed:?}");
    Ok("source: AFW absent, all encoder/OSD tensors move; finetune: only osd.w_orth and afw.w move".into())
}

fn c8_ablation() -> Outcome {
    let start = Instant::now();
    let c = shipped();
    let eps = episodes::sample_episodes(&datasets().1, c.train.shots, c.eval_seed, c.eval_episodes).unwrap();
    let mut rows = Vec::new();
    for m in [Modules::BASELINE, CPC, CPC_AFW, CPC_OSD, Modules::FULL] {
        let ckpt = trained(m, c.seed);
        let rep = trainer::evaluate(&ckpt, &eps, &c.eval_options()).unwrap();
        rows.push((m.label(), 100.0 * rep.mean_iou));
    }
    let table = rows.iter().map(|(l, v)| format!("{l} {v:.2}")).collect::<Vec<_>>().join(", ");
    let base = rows[0].1;
    let full = rows[4].1;
    ensure!(start.elapsed() < Duration::from_secs(600), "took {:?}; {table}", start.elapsed());
    ensure!(full >= base + 3.0, "full {full:.2} < baseline {base:.2} + 3; {table}");
    for (l, v) in &rows[1..4] {
        ensure!(*v >= base, "{l} {v:.2} < baseline {base:.2}; {table}");
    }
    Ok(table)
}

/// Source images and the same geometry rendered with the target style.
fn geometry_pairs() -> (Dataset, Dataset) {
    let c = shipped();
    let styled = DomainSpec {
        background: c.target.background,
        texture_freq_offset: c.target.texture_freq_offset,
        palette_rotation: c.target.palette_rotation,
        clutter_density: c.target.clutter_density,
        style_jitter: c.target.style_jitter,
        ..c.source.clone()
    };
    (
        episodes::generate_domain(&c.source, c.source_classes, 4).unwrap(),
        episodes::generate_domain(&styled, c.source_classes, 4).unwrap(),
    )
}

fn c9_entanglement() -> Outcome {
    let (src, tgt) = geometry_pairs();
    let mut lines = Vec::new();
    let mut ok = true;
    for seed in 0..3 {
        let ckpt = trained(Modules::BASELINE, seed);
        let streams = |d: &Dataset| -> Vec<vit::ResidualStream> {
            d.samples.iter().map(|s| vit::encode(&s.image, &ckpt.model.vit, &ckpt.model.config.vit).unwrap()).collect()
        };
        let grid = analysis::layer_pair_cka(&streams(&src), &streams(&tgt)).unwrap();
        let (diag, mean) = (grid.diagonal_mean(), grid.mean());
        ok &= diag > mean;
        lines.push(format!("seed {seed}: diag {diag:.4} vs grid {mean:.4}"));
    }
    let msg = lines.join("; ");
    if ok {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn component_mi(ckpt: &Checkpoint, images: &[&Tensor], bins: usize) -> f64 {
    let per_image: Vec<Vec<Tensor>> =
        images.iter().map(|im| pipeline::compared_components(&ckpt.model, im).unwrap()).collect();
    let l = per_image[0].len();
    // rows are token positions pooled over all images
    let comps: Vec<Mat64> = (0..l)
        .map(|c| {
            let d = per_image[0][c].dims()[0];
            let mut data = Vec::new();
            let mut rows = 0;
            for comps in &per_image {
                let t = &comps[c];
                let m = t.len() / d;
                for j in 0..m {
                    data.extend((0..d).map(|r| t.data()[r * m + j] as f64));
                }
                rows += m;
            }
            Mat64::new(rows, d, data).unwrap()
        })
        .collect();
    analysis::mean_pairwise_mi(&comps, bins).unwrap()
}

fn c10_mutual_information() -> Outcome {
    let c = shipped();
    let target = &datasets().1;
    let images: Vec<&Tensor> = target.samples.iter().map(|s| &s.image).collect();
    let (mut without, mut with) = (0.0, 0.0);
    for seed in 0..3 {
        without += component_mi(&trained(CPC, seed), &images, c.mi_bins) / 3.0;
        with += component_mi(&trained(CPC_OSD, seed), &images, c.mi_bins) / 3.0;
    }
    let msg = format!(
        "normalized MI over {} target images: without OSD {without:.4}, with OSD (lambda {}) {with:.4}",
        images.len(),
        c.train.lambda
    );
    ensure!(with < without, "{msg}");
    Ok(msg)
}

fn c11_formats() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let data = &datasets().1;
    let path = dir.path().join("t.epds");
    epds::write(data, &path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    ensure!(&epds::read(&path).unwrap() == data, "EPDS read(write(x)) != x");
    ensure!(epds::encode(&epds::read(&path).unwrap()).unwrap() == bytes, "EPDS bytes changed");

    let ckpt = trained(Modules::FULL, 0);
    let mut ckpt = trainer::finetune_target(&ckpt, &data.samples[..1], 3, 1e-2).unwrap();
    ckpt.step = 1234;
    let cpath = dir.path().join("m.sdrc");
    checkpoint::write(&ckpt, &cpath).unwrap();
    let cbytes = std::fs::read(&cpath).unwrap();
    let back = checkpoint::read(&cpath).unwrap();
    ensure!(back.model.named() == ckpt.model.named(), "SDRC tensors differ");
    ensure!(back.model.config == ckpt.model.config && back.train == ckpt.train && back.step == 1234, "SDRC metadata differs");
    ensure!(checkpoint::encode(&back).unwrap() == cbytes, "SDRC bytes changed");

    let mut golden = b"EPDS\x01\0\0\0\x01\0\0\0\x07\0\0\0\x01\0\x02\0\x01".to_vec();
    golden.extend(1.0f32.to_le_bytes());
    golden.extend((-2.5f32).to_le_bytes());
    golden.extend([0, 1]);
    let g = epds::decode(&golden).unwrap();
    ensure!(
        g.samples.len() == 1
            && g.samples[0].class_id == 7
            && g.samples[0].image.data() == [1.0, -2.5]
            && g.samples[0].mask.data() == [0.0, 1.0],
        "golden EPDS decoded to {g:?}"
    );
    let fixture = parse_config(include_str!("fixtures/experiment.conf")).unwrap().config;
    ensure!(
        fixture.seed == 5 && fixture.model.vit.layers == 2 && fixture.model.metric == Metric::Euclidean && fixture.train.lambda == 0.25,
        "golden config parsed to unexpected values"
    );

    let mut bad = bytes.clone();
    bad[0] = b'Z';
    ensure!(matches!(epds::decode(&bad), Err(FormatError::BadMagic { .. })), "EPDS bad magic not reported");
    let mut bad = cbytes.clone();
    bad[3] = b'Z';
    ensure!(matches!(checkpoint::decode(&bad), Err(FormatError::BadMagic { .. })), "SDRC bad magic not reported");
    for cut in [5, 13, bytes.len() - 1] {
        ensure!(matches!(epds::decode(&bytes[..cut]), Err(FormatError::Truncated { .. })), "EPDS cut at {cut}");
    }
    for cut in [5, 13, cbytes.len() - 1] {
        ensure!(matches!(checkpoint::decode(&cbytes[..cut]), Err(FormatError::Truncated { .. })), "SDRC cut at {cut}");
    }
    Ok(format!("EPDS {} bytes and SDRC {} bytes round trip bitwise", bytes.len(), cbytes.len()))
}

fn main() {
    let criteria: [(u32, &str, fn() -> Outcome); 11] = [
        (1, "exact residual decomposition", c1_exact_decomposition),
        (2, "similarity decomposition identity", c2_similarity_identity),
        (3, "CKA suite", c3_cka_suite),
        (4, "orthogonality loss", c4_orthogonality),
        (5, "fusion reduction and weight count", c5_fusion_reduction),
        (6, "end-to-end gradient integrity", c6_gradient_integrity),
        (7, "freeze contracts", c7_freeze_contracts),
        (8, "cross-domain ablation", c8_ablation),
        (9, "entanglement diagnostic", c9_entanglement),
        (10, "mutual information diagnostic", c10_mutual_information),
        (11, "format round trips", c11_formats),
    ];
    let only: Option<Vec<u32>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    panic::set_hook(Box::new(|_| {}));
    let mut unexpected = Vec::new();
    for (id, name, run) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let outcome = panic::catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let known = KNOWN_FAILURES.contains(&id);
        match &outcome {
            Ok(detail) => println!("PASS criterion {id:>2} ({name}): {detail}"),
            Err(detail) => {
                let tag = if known { " [known failure]" } else { "" };
                println!("FAIL criterion {id:>2} ({name}){tag}: {detail}");
            }
        }
        if outcome.is_ok() == known {
            unexpected.push(id);
        }
    }
    if !unexpected.is_empty() {
        println!("unexpected outcome for criteria {unexpected:?}");
        std::process::exit(1);
    }
}
