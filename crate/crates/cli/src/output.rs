//! Plain-text tables. Values are printed in their JSON form so the text
//! output restates stored values exactly.

use memscope_core::analysis::AnalysisError;
use memscope_core::{epoch_breakdown, run_summary, Registry, RunRecord, Store};
use serde::Serialize;
use serde_json::Value;

pub fn cell(v: &Value) -> String {
    match v {
        Value::Null => "-".into(),
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// Left-aligned columns separated by two spaces.
pub fn table(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for row in rows {
        for (w, c) in widths.iter_mut().zip(row) {
            *w = (*w).max(c.chars().count());
        }
    }
    let mut out = String::new();
    let mut line = |cells: &mut dyn Iterator<Item = &str>| {
        let mut parts: Vec<String> = cells.zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
        if let Some(last) = parts.last_mut() {
            *last = last.trim_end().to_owned();
        }
        out.push_str(&parts.join("  "));
        out.push('\n');
    };
    line(&mut header.iter().copied());
    for row in rows {
        line(&mut row.iter().map(String::as_str));
    }
    out
}

fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("serializable")
}

/// `key  value` lines for the listed fields of `v`.
fn fields(v: &Value, keys: &[&str]) -> String {
    let rows: Vec<Vec<String>> = keys.iter().map(|k| vec![k.to_string(), cell(&v[*k])]).collect();
    let mut t = table(&["field", "value"], &rows);
    t.replace_range(..t.find('\n').unwrap() + 1, "");
    t
}

pub fn runs_table(runs: &[RunRecord]) -> String {
    let rows: Vec<Vec<String>> = runs
        .iter()
        .map(|r| {
            let hp = &r.hyperparameters;
            vec![
                r.run_id.clone(),
                r.status.as_str().into(),
                hp.model_name.clone(),
                hp.num_layers.to_string(),
                hp.nodes_per_layer.to_string(),
                hp.epochs.to_string(),
                hp.dataset.clone(),
                r.created_at.to_string(),
            ]
        })
        .collect();
    table(
        &[
            "run_id",
            "status",
            "model_name",
            "num_layers",
            "nodes_per_layer",
            "epochs",
            "dataset",
            "created_at",
        ],
        &rows,
    )
}

const SUMMARY_FIELDS: [&str; 8] = [
    "sample_count",
    "duration_ms",
    "baseline_used_bytes",
    "peak_used_bytes",
    "mean_used_bytes",
    "delta_peak_bytes",
    "peak_rss_bytes",
    "growth_slope_bytes_per_s",
];

const EPOCH_FIELDS: [&str; 6] = [
    "epoch",
    "start_ms",
    "end_ms",
    "sample_count",
    "peak_used_bytes",
    "mean_used_bytes",
];

/// Everything `report` shows, as JSON.
pub fn report_json(registry: &Registry, store: &Store, run_id: &str) -> anyhow::Result<Value> {
    let run = registry.get(run_id)?;
    let samples = store.read_all(run_id)?;
    let markers = registry.markers(run_id)?;
    let summary = match run_summary(&samples) {
        Ok(s) => to_value(&s),
        Err(AnalysisError::EmptyInput) => Value::Null,
        Err(e) => return Err(e.into()),
    };
    let (epochs, epoch_error) = match epoch_breakdown(&samples, &markers) {
        Ok(stats) => (to_value(&stats), Value::Null),
        Err(AnalysisError::EmptyInput) => (Value::Array(Vec::new()), Value::Null),
        Err(e) => (Value::Array(Vec::new()), Value::from(e.to_string())),
    };
    Ok(serde_json::json!({
        "run": to_value(&run),
        "summary": summary,
        "epochs": epochs,
        "epoch_error": epoch_error,
    }))
}

pub fn report_text(report: &Value) -> String {
    let run = &report["run"];
    let mut out = fields(run, &["run_id", "status", "created_at", "closed_at"]);
    out.push('\n');
    let hp = &run["hyperparameters"];
    let mut hp_rows: Vec<Vec<String>> = [
        "model_name",
        "num_layers",
        "nodes_per_layer",
        "epochs",
        "dataset",
        "input_quality",
    ]
    .iter()
    .map(|k| vec![k.to_string(), cell(&hp[*k])])
    .collect();
    if let Some(extra) = hp["extra"].as_object() {
        hp_rows.extend(extra.iter().map(|(k, v)| vec![format!("extra.{k}"), cell(v)]));
    }
    out.push_str(&table(&["hyperparameter", "value"], &hp_rows));
    out.push('\n');
    match &report["summary"] {
        Value::Null => out.push_str("no samples recorded\n"),
        summary => out.push_str(&fields(summary, &SUMMARY_FIELDS)),
    }
    if let Some(stats) = report["epochs"].as_array().filter(|s| !s.is_empty()) {
        out.push('\n');
        let rows: Vec<Vec<String>> = stats
            .iter()
            .map(|s| EPOCH_FIELDS.iter().map(|k| cell(&s[*k])).collect())
            .collect();
        out.push_str(&table(&EPOCH_FIELDS, &rows));
    }
    if let Value::String(e) = &report["epoch_error"] {
        out.push_str(&format!("\nepoch breakdown unavailable: {e}\n"));
    }
    out
}

pub fn print_report(registry: &Registry, store: &Store, run_id: &str) -> anyhow::Result<()> {
    print!("{}", report_text(&report_json(registry, store, run_id)?));
    Ok(())
}
