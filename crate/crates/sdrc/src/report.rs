//! JSON and CSV outputs.

use std::path::Path;

use serde_json::{json, Map, Value};

use sdrc_core::trainer::EvalReport;

use crate::config::ExperimentConfig;
use crate::error::{Result, SdrcError};
use crate::{checkpoint, epds};

/// The fields every results JSON carries: command, seed, format versions and
/// the full effective configuration.
pub fn envelope(command: &str, config: &ExperimentConfig) -> Map<String, Value> {
    let mut m = Map::new();
    m.insert("command".into(), json!(command));
    m.insert("seed".into(), json!(config.seed));
    m.insert(
        "versions".into(),
        json!({
            "sdrc": env!("CARGO_PKG_VERSION"),
            "epds": epds::VERSION,
            "checkpoint": checkpoint::VERSION,
        }),
    );
    let cfg: Map<String, Value> = config.entries().into_iter().map(|(k, v)| (k, Value::String(v))).collect();
    m.insert("config".into(), Value::Object(cfg));
    m
}

/// `mean_iou` and `per_episode` entries for an evaluation.
pub fn eval_fields(m: &mut Map<String, Value>, report: &EvalReport) {
    m.insert("mean_iou".into(), number(report.mean_iou));
    m.insert("scored".into(), json!(report.scored()));
    let per: Vec<Value> = report
        .per_episode
        .iter()
        .map(|e| {
            json!({
                "index": e.index,
                "class_id": e.class_id,
                "miou": e.miou.map(|x| x.mean),
                "iou_fg": e.miou.map(|x| x.iou_fg),
                "iou_bg": e.miou.map(|x| x.iou_bg),
                "skipped": e.skipped,
            })
        })
        .collect();
    m.insert("per_episode".into(), Value::Array(per));
}

/// Non-finite numbers become `null`.
pub fn number(x: f64) -> Value {
    serde_json::Number::from_f64(x).map(Value::Number).unwrap_or(Value::Null)
}

pub fn write_json(path: &Path, value: &Map<String, Value>) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| SdrcError::io(path, e))
}

pub fn write_csv<H, R, I>(path: &Path, header: &[H], rows: R) -> Result<()>
where
    H: AsRef<[u8]>,
    R: IntoIterator<Item = I>,
    I: IntoIterator,
    I::Item: AsRef<[u8]>,
{
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for row in rows {
        w.write_record(row)?;
    }
    w.flush().map_err(|e| SdrcError::io(path, e))
}

pub fn eval_rows(report: &EvalReport) -> Vec<Vec<String>> {
    let fmt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
    report
        .per_episode
        .iter()
        .map(|e| {
            vec![
                e.index.to_string(),
                e.class_id.to_string(),
                fmt(e.miou.map(|m| m.mean)),
                fmt(e.miou.map(|m| m.iou_fg)),
                fmt(e.miou.map(|m| m.iou_bg)),
                e.skipped.clone().unwrap_or_default(),
            ]
        })
        .collect()
}

pub const EVAL_HEADER: &[&str] = &["episode", "class_id", "miou", "iou_fg", "iou_bg", "skipped"];
