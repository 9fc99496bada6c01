//! Command-line driver.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use sdrc_core::analysis::{self, CkaMatrix};
use sdrc_core::episodes::{self, Dataset};
use sdrc_core::pipeline;
use sdrc_core::rng::derive_seed;
use sdrc_core::trainer::{self, Checkpoint};
use sdrc_core::vit;
use sdrc_core::Tensor;

use crate::config::{self, ExperimentConfig};
use crate::error::{ConfigError, Result, SdrcError};
use crate::{checkpoint, epds, report};

#[derive(Debug, Parser)]
#[command(name = "sdrc", version, about = "Residual-stream decomposition experiments for cross-domain few-shot segmentation")]
#[command(arg_required_else_help = true)]
struct Cli {
    /// Configuration file: key=value lines, or a results JSON from an earlier run.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Override one configuration key (repeatable).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,

    /// Top-level seed; overrides the config.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,

    /// Directory for every artifact; relative config paths resolve here.
    #[arg(long, global = true, value_name = "DIR", default_value = "out")]
    out: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Domain {
    Source,
    Target,
    Both,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render the synthetic source and/or target domain to EPDS files.
    GenData {
        #[arg(long, value_enum, default_value_t = Domain::Both)]
        domain: Domain,
    },
    /// Episodic source training; writes a checkpoint and the loss log.
    Train {
        /// Source dataset (default: source_data from the config).
        #[arg(long, value_name = "PATH")]
        data: Option<PathBuf>,
    },
    /// Per-episode target finetuning and query mIoU.
    FinetuneEval {
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        /// Target dataset (default: target_data from the config).
        #[arg(long, value_name = "PATH")]
        data: Option<PathBuf>,
    },
    /// Layer-pair CKA between two datasets paired by sample order.
    AnalyzeCka {
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_name = "PATH")]
        source: Option<PathBuf>,
        #[arg(long, value_name = "PATH")]
        target: Option<PathBuf>,
    },
    /// Per-component contribution norms for one image.
    Decompose {
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_name = "PATH")]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        index: usize,
    },
    /// Score maps, fusion weights and prediction for one target episode.
    ExportHeatmap {
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_name = "PATH")]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        episode: usize,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenData { .. } => "gen-data",
            Command::Train { .. } => "train",
            Command::FinetuneEval { .. } => "finetune-eval",
            Command::AnalyzeCka { .. } => "analyze-cka",
            Command::Decompose { .. } => "decompose",
            Command::ExportHeatmap { .. } => "export-heatmap",
        }
    }
}

/// Runs the CLI on `args` (including the program name) and returns the exit
/// code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = e.print();
                    0
                }
                _ => {
                    eprint!("{}", e.render());
                    1
                }
            };
        }
    };
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Defaults, then the config file, then `--set`, then `--seed`.
fn effective_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::default();
    if let Some(path) = &cli.config {
        let text = std::fs::read_to_string(path).map_err(|e| SdrcError::io(path, e))?;
        cfg = if text.trim_start().starts_with('{') {
            from_results_json(cfg, &text)?
        } else {
            config::parse_onto(cfg, &text)?.config
        };
    }
    for (i, s) in cli.set.iter().enumerate() {
        // flags have no line; number them after the file
        cfg.apply(s, i + 1).map_err(|e| match e {
            ConfigError::UnknownKey { key, .. } => SdrcError::Usage(format!("--set: unknown key '{key}'")),
            ConfigError::BadValue { key, detail, .. } => SdrcError::Usage(format!("--set {key}: {detail}")),
            other => SdrcError::Usage(format!("--set: {other}")),
        })?;
    }
    if let Some(seed) = cli.seed {
        cfg.set("seed", &seed.to_string()).expect("seed is a known key");
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Reads the `config` object of a results JSON written by an earlier run.
fn from_results_json(mut cfg: ExperimentConfig, text: &str) -> Result<ExperimentConfig> {
    let value: Value = serde_json::from_str(text)?;
    let Some(map) = value.get("config").and_then(Value::as_object) else {
        return Err(SdrcError::Usage("JSON config has no \"config\" object".into()));
    };
    for (i, (k, v)) in map.iter().enumerate() {
        let v = v.as_str().map(str::to_string).unwrap_or_else(|| v.to_string());
        cfg.apply(&format!("{k}={v}"), i + 1)?;
    }
    Ok(cfg)
}

fn resolve(out: &Path, explicit: &Option<PathBuf>, configured: &str) -> PathBuf {
    match explicit {
        Some(p) => p.clone(),
        None => {
            let p = Path::new(configured);
            if p.is_absolute() {
                p.to_path_buf()
            } else {
                out.join(p)
            }
        }
    }
}

fn dispatch(cli: &Cli) -> Result<()> {
    let cfg = effective_config(cli)?;
    std::fs::create_dir_all(&cli.out).map_err(|e| SdrcError::io(&cli.out, e))?;
    let out = cli.out.as_path();
    let name = cli.command.name();
    match &cli.command {
        Command::GenData { domain } => gen_data(&cfg, out, *domain),
        Command::Train { data } => train(&cfg, out, &resolve(out, data, &cfg.source_data)),
        Command::FinetuneEval { checkpoint, data } => finetune_eval(
            &cfg,
            out,
            &resolve(out, checkpoint, &cfg.checkpoint),
            &resolve(out, data, &cfg.target_data),
        ),
        Command::AnalyzeCka { checkpoint, source, target } => analyze_cka(
            &cfg,
            out,
            &resolve(out, checkpoint, &cfg.checkpoint),
            &resolve(out, source, &cfg.source_data),
            &resolve(out, target, &cfg.target_data),
        ),
        Command::Decompose { checkpoint, data, index } => decompose(
            &cfg,
            out,
            &resolve(out, checkpoint, &cfg.checkpoint),
            &resolve(out, data, &cfg.source_data),
            *index,
        ),
        Command::ExportHeatmap { checkpoint, data, episode } => export_heatmap(
            &cfg,
            out,
            &resolve(out, checkpoint, &cfg.checkpoint),
            &resolve(out, data, &cfg.target_data),
            *episode,
        ),
    }
    .map(|()| log::info!("{name} finished; artifacts in {}", out.display()))
}

fn gen_data(cfg: &ExperimentConfig, out: &Path, domain: Domain) -> Result<()> {
    let mut results = report::envelope("gen-data", cfg);
    let jobs = [
        (Domain::Source, &cfg.source, cfg.source_classes, cfg.source_samples, &cfg.source_data),
        (Domain::Target, &cfg.target, cfg.target_classes, cfg.target_samples, &cfg.target_data),
    ];
    let mut written = Vec::new();
    for (which, spec, classes, spc, path) in jobs {
        if domain != Domain::Both && domain != which {
            continue;
        }
        let data = episodes::generate_domain(spec, classes, spc)?;
        let path = resolve(out, &None, path);
        epds::write(&data, &path)?;
        written.push(json!({
            "domain": if which == Domain::Source { "source" } else { "target" },
            "path": path.file_name().map(|f| f.to_string_lossy().into_owned()),
            "records": data.samples.len(),
            "class_ids": data.class_ids(),
        }));
    }
    results.insert("datasets".into(), Value::Array(written));
    report::write_json(&out.join("gen-data.json"), &results)
}

fn train(cfg: &ExperimentConfig, out: &Path, data_path: &Path) -> Result<()> {
    let data = epds::read(data_path)?;
    let (ckpt, log) = trainer::train_source(&cfg.model, &cfg.train, &data)?;
    checkpoint::write(&ckpt, &resolve(out, &None, &cfg.checkpoint))?;
    let rows = log.losses.iter().zip(&log.bce).enumerate().map(|(i, (l, b))| {
        let orth = l - b;
        vec![i.to_string(), l.to_string(), b.to_string(), orth.to_string()]
    });
    report::write_csv(&out.join("train_log.csv"), &["step", "loss", "bce", "weighted_orth"], rows)?;
    let mut results = report::envelope("train", cfg);
    results.insert("steps".into(), json!(ckpt.step));
    results.insert("skipped_episodes".into(), json!(log.skipped));
    let tail = |v: &[f64]| {
        let n = v.len().min(10);
        if n == 0 {
            f64::NAN
        } else {
            v[v.len() - n..].iter().sum::<f64>() / n as f64
        }
    };
    results.insert("final_bce".into(), report::number(tail(&log.bce)));
    results.insert("final_loss".into(), report::number(tail(&log.losses)));
    report::write_json(&out.join("train.json"), &results)
}

/// Loads a checkpoint and applies the experiment's finetuning switches.
fn load_checkpoint(cfg: &ExperimentConfig, path: &Path) -> Result<Checkpoint> {
    let mut ckpt = checkpoint::read(path)?;
    ckpt.train.leave_one_out = cfg.train.leave_one_out;
    Ok(ckpt)
}

fn check_images(ckpt: &Checkpoint, data: &Dataset, path: &Path) -> Result<()> {
    let v = &ckpt.model.config.vit;
    let want = [v.channels, v.image_side(), v.image_side()];
    if let Some(s) = data.samples.iter().find(|s| s.image.dims() != want) {
        return Err(SdrcError::Data(format!(
            "{}: image {:?} does not fit the checkpoint's encoder ({want:?})",
            path.display(),
            s.image.dims()
        )));
    }
    Ok(())
}

fn finetune_eval(cfg: &ExperimentConfig, out: &Path, ckpt_path: &Path, data_path: &Path) -> Result<()> {
    let ckpt = load_checkpoint(cfg, ckpt_path)?;
    let data = epds::read(data_path)?;
    check_images(&ckpt, &data, data_path)?;
    let eps = episodes::sample_episodes(&data, cfg.train.shots, cfg.eval_seed, cfg.eval_episodes)?;
    let rep = trainer::evaluate(&ckpt, &eps, &cfg.eval_options())?;
    report::write_csv(&out.join("eval.csv"), report::EVAL_HEADER, report::eval_rows(&rep))?;
    let mut results = report::envelope("finetune-eval", cfg);
    results.insert("modules".into(), json!(ckpt.model.config.modules.label()));
    report::eval_fields(&mut results, &rep);
    report::write_json(&out.join("eval.json"), &results)
}

/// `count` indices spread evenly over `0..len`.
fn spread(len: usize, count: usize) -> Vec<usize> {
    let count = count.min(len);
    (0..count).map(|i| i * len / count).collect()
}

fn analyze_cka(cfg: &ExperimentConfig, out: &Path, ckpt_path: &Path, src_path: &Path, tgt_path: &Path) -> Result<()> {
    let ckpt = load_checkpoint(cfg, ckpt_path)?;
    let (src, tgt) = (epds::read(src_path)?, epds::read(tgt_path)?);
    check_images(&ckpt, &src, src_path)?;
    check_images(&ckpt, &tgt, tgt_path)?;
    let n = cfg.cka_images.min(src.samples.len()).min(tgt.samples.len());
    let streams = |d: &Dataset| -> Result<Vec<vit::ResidualStream>> {
        spread(d.samples.len(), n)
            .into_iter()
            .map(|i| Ok(vit::encode(&d.samples[i].image, &ckpt.model.vit, &ckpt.model.config.vit)?))
            .collect()
    };
    let (s, t) = (streams(&src)?, streams(&tgt)?);
    let grid: CkaMatrix = analysis::layer_pair_cka(&s, &t)?;
    let final_cka = analysis::output_cka(&s, &t)?;
    let k = cfg.cka_topk.min(grid.values.len());
    let agg = analysis::cka_aggregates(&grid, final_cka, k)?;

    let mut header = vec!["source_layer".to_string()];
    header.extend((0..grid.size).map(|j| format!("target_{j}")));
    let rows = (0..grid.size).map(|i| {
        let mut row = vec![i.to_string()];
        row.extend((0..grid.size).map(|j| grid.get(i, j).to_string()));
        row
    });
    report::write_csv(&out.join("cka_matrix.csv"), &header, rows)?;
    let summary = [
        ("final_output", agg.final_output),
        ("layerwise_avg", agg.layerwise_avg),
        ("topk_avg", agg.topk_avg),
        ("bottomk_avg", agg.bottomk_avg),
        ("grid_mean", grid.mean()),
    ];
    report::write_csv(
        &out.join("cka_summary.csv"),
        &["metric", "value"],
        summary.iter().map(|(m, v)| vec![m.to_string(), v.to_string()]),
    )?;
    let mut results = report::envelope("analyze-cka", cfg);
    results.insert("images".into(), json!(n));
    results.insert("k".into(), json!(k));
    results.insert("dims".into(), json!([grid.size, grid.size]));
    let values: Vec<Value> = (0..grid.size)
        .map(|i| Value::Array((0..grid.size).map(|j| report::number(grid.get(i, j))).collect()))
        .collect();
    results.insert("values".into(), Value::Array(values));
    let aggregates: serde_json::Map<String, Value> =
        summary.iter().map(|(m, v)| (m.to_string(), report::number(*v))).collect();
    results.insert("aggregates".into(), Value::Object(aggregates));
    report::write_json(&out.join("cka.json"), &results)
}

fn decompose(cfg: &ExperimentConfig, out: &Path, ckpt_path: &Path, data_path: &Path, index: usize) -> Result<()> {
    let ckpt = load_checkpoint(cfg, ckpt_path)?;
    let data = epds::read(data_path)?;
    check_images(&ckpt, &data, data_path)?;
    let sample = data.samples.get(index).ok_or_else(|| {
        SdrcError::Data(format!("{}: no sample {index} (have {})", data_path.display(), data.samples.len()))
    })?;
    let stream = vit::encode(&sample.image, &ckpt.model.vit, &ckpt.model.config.vit)?;
    let parts = vit::decompose(&stream);
    let out_sq = stream.output.dot(&stream.output)?;
    let tokens = stream.output.dims()[1];
    let mut rows = Vec::with_capacity(parts.len());
    for (c, part) in parts.iter().enumerate() {
        let mean_token_norm = (0..tokens)
            .map(|j| {
                let col: f64 = (0..part.dims()[0]).map(|r| (part.at(&[r, j]) as f64).powi(2)).sum();
                col.sqrt()
            })
            .sum::<f64>()
            / tokens as f64;
        let share = if out_sq > 0.0 { part.dot(&stream.output)? / out_sq } else { f64::NAN };
        let label = if c == 0 { "embedding".to_string() } else { format!("component{}", c - 1) };
        rows.push(vec![c.to_string(), label, part.norm().to_string(), mean_token_norm.to_string(), share.to_string()]);
    }
    report::write_csv(
        &out.join("decompose.csv"),
        &["index", "component", "frobenius_norm", "mean_token_norm", "output_share"],
        rows,
    )?;
    let residual = vit::reconstruct(&parts)?.max_abs_diff(&stream.output)?;
    let mut results = report::envelope("decompose", cfg);
    results.insert("sample".into(), json!(index));
    results.insert("class_id".into(), json!(sample.class_id));
    results.insert("components".into(), json!(parts.len()));
    results.insert("reconstruction_max_abs_error".into(), report::number(residual));
    report::write_json(&out.join("decompose.json"), &results)
}

fn export_heatmap(cfg: &ExperimentConfig, out: &Path, ckpt_path: &Path, data_path: &Path, index: usize) -> Result<()> {
    let ckpt = load_checkpoint(cfg, ckpt_path)?;
    let data = epds::read(data_path)?;
    check_images(&ckpt, &data, data_path)?;
    // the same episode finetune-eval scores at this index
    let episode = episodes::sample_episode(&data, cfg.train.shots, derive_seed(cfg.eval_seed, index as u64))?;
    let adapted = trainer::finetune_target(&ckpt, &episode.supports, cfg.train.finetune_steps, cfg.train.finetune_lr)?;
    let supports: Vec<(&Tensor, &Tensor)> = episode.supports.iter().map(|s| (&s.image, &s.mask)).collect();
    let pred = pipeline::predict_episode(&adapted.model, &supports, &episode.query.image)?;
    let stack = &pred.scores;
    let (gh, gw) = stack.grid();

    // one grid block per (pair, class): gh rows of gw cells
    let mut rows = Vec::new();
    for i in 0..stack.components {
        for j in 0..stack.components {
            let map = stack.pair_map(i, j);
            for ch in 0..2 {
                for y in 0..gh {
                    let mut row = vec![
                        i.to_string(),
                        j.to_string(),
                        if ch == 0 { "background" } else { "foreground" }.to_string(),
                        y.to_string(),
                    ];
                    row.extend((0..gw).map(|x| map.at(&[ch, y, x]).to_string()));
                    rows.push(row);
                }
            }
        }
    }
    let mut header: Vec<String> = ["query_component", "prototype_component", "class", "y"].map(String::from).into();
    header.extend((0..gw).map(|x| format!("x{x}")));
    report::write_csv(&out.join("scores.csv"), &header, rows)?;
    if let Some(afw) = &adapted.model.afw {
        let l = stack.components;
        let mut header = vec!["class".to_string()];
        header.extend((0..afw.pairs()).map(|p| format!("q{}_p{}", p / l, p % l)));
        let rows = (0..2).map(|ch| {
            let mut row = vec![if ch == 0 { "background" } else { "foreground" }.to_string()];
            row.extend((0..afw.pairs()).map(|p| afw.w.at(&[p, ch]).to_string()));
            row
        });
        report::write_csv(&out.join("afw.csv"), &header, rows)?;
    }
    let (h, w) = (episode.query.mask.dims()[0], episode.query.mask.dims()[1]);
    let probs = &pred.prediction.probs;
    let rows = (0..h * w).map(|p| {
        let (y, x) = (p / w, p % w);
        vec![
            y.to_string(),
            x.to_string(),
            probs.at(&[1, y, x]).to_string(),
            pred.prediction.labels.at(&[y, x]).to_string(),
            episode.query.mask.at(&[y, x]).to_string(),
        ]
    });
    report::write_csv(&out.join("prediction.csv"), &["y", "x", "p_foreground", "label", "ground_truth"], rows)?;

    let miou = sdrc_core::fusion::miou(&pred.prediction.labels, &episode.query.mask)?;
    let mut results = report::envelope("export-heatmap", cfg);
    results.insert("episode".into(), json!(index));
    results.insert("class_id".into(), json!(episode.class_id));
    results.insert("dataset_indices".into(), json!(episode.indices));
    results.insert("afw".into(), json!(adapted.model.afw.is_some()));
    results.insert("miou".into(), report::number(miou.mean));
    report::write_json(&out.join("heatmap.json"), &results)
}
