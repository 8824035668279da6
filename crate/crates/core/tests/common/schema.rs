//! Shape checks for API response bodies.

use serde_json::Value;

#[derive(Clone, Copy)]
pub enum Kind {
    Int,
    Uint,
    Num,
    Str,
    Obj,
    OptInt,
    OptUint,
    OptNum,
    OptStr,
}

fn kind_ok(kind: Kind, v: &Value) -> bool {
    match kind {
        Kind::Int => v.is_i64(),
        Kind::Uint => v.is_u64(),
        Kind::Num => v.is_number(),
        Kind::Str => v.is_string(),
        Kind::Obj => v.is_object(),
        Kind::OptInt => v.is_null() || v.is_i64(),
        Kind::OptUint => v.is_null() || v.is_u64(),
        Kind::OptNum => v.is_null() || v.is_number(),
        Kind::OptStr => v.is_null() || v.is_string(),
    }
}

/// `v` must be an object with exactly these keys, each of the given kind.
pub fn object(v: &Value, fields: &[(&str, Kind)]) -> Result<(), String> {
    let map = v.as_object().ok_or_else(|| format!("not an object: {v}"))?;
    if map.len() != fields.len() {
        let keys: Vec<_> = map.keys().collect();
        return Err(format!("expected {} keys, got {keys:?}", fields.len()));
    }
    for &(name, kind) in fields {
        let field = map.get(name).ok_or_else(|| format!("missing {name} in {v}"))?;
        if !kind_ok(kind, field) {
            return Err(format!("{name} has the wrong type: {field}"));
        }
    }
    Ok(())
}

pub fn array_of(v: &Value, item: fn(&Value) -> Result<(), String>) -> Result<(), String> {
    v.as_array()
        .ok_or_else(|| format!("not an array: {v}"))?
        .iter()
        .try_for_each(item)
}

const SYSTEM: [(&str, Kind); 9] = [
    ("ts_unix_ms", Kind::Int),
    ("total_bytes", Kind::Uint),
    ("available_bytes", Kind::Uint),
    ("used_bytes", Kind::Uint),
    ("used_percent", Kind::Num),
    ("active_bytes", Kind::Uint),
    ("free_bytes", Kind::Uint),
    ("swap_total_bytes", Kind::Uint),
    ("swap_used_bytes", Kind::Uint),
];

pub fn snapshot(v: &Value) -> Result<(), String> {
    object(v, &SYSTEM)?;
    let n = |k: &str| v[k].as_u64().unwrap();
    if n("used_bytes") != n("total_bytes") - n("available_bytes") {
        return Err(format!("used != total - available in {v}"));
    }
    Ok(())
}

pub fn sample_line(v: &Value) -> Result<(), String> {
    let mut fields = vec![("run_id", Kind::OptStr)];
    fields.extend(SYSTEM);
    fields.extend([
        ("pid", Kind::OptUint),
        ("rss_bytes", Kind::OptUint),
        ("vms_bytes", Kind::OptUint),
    ]);
    object(v, &fields)
}

pub fn hyperparameters(v: &Value) -> Result<(), String> {
    object(
        v,
        &[
            ("model_name", Kind::Str),
            ("num_layers", Kind::Uint),
            ("nodes_per_layer", Kind::Uint),
            ("epochs", Kind::Uint),
            ("dataset", Kind::Str),
            ("input_quality", Kind::OptStr),
            ("extra", Kind::Obj),
        ],
    )
}

pub fn run_record(v: &Value) -> Result<(), String> {
    object(
        v,
        &[
            ("run_id", Kind::Str),
            ("created_at", Kind::Int),
            ("closed_at", Kind::OptInt),
            ("hyperparameters", Kind::Obj),
            ("status", Kind::Str),
        ],
    )?;
    hyperparameters(&v["hyperparameters"])?;
    let status = v["status"].as_str().unwrap();
    if !["recording", "closed", "aborted"].contains(&status) {
        return Err(format!("bad status {status}"));
    }
    if (status == "recording") != v["closed_at"].is_null() {
        return Err(format!("status {status} inconsistent with closed_at"));
    }
    Ok(())
}

pub fn marker(v: &Value) -> Result<(), String> {
    object(
        v,
        &[
            ("run_id", Kind::Str),
            ("ts_unix_ms", Kind::Int),
            ("label", Kind::Str),
            ("epoch", Kind::OptUint),
            ("note", Kind::OptStr),
        ],
    )
}

pub fn bucket(v: &Value) -> Result<(), String> {
    object(
        v,
        &[
            ("start_ms", Kind::Int),
            ("end_ms", Kind::Int),
            ("count", Kind::Uint),
            ("mean_used_bytes", Kind::Num),
            ("max_used_bytes", Kind::Uint),
            ("min_used_bytes", Kind::Uint),
        ],
    )
}

pub fn summary(v: &Value) -> Result<(), String> {
    object(
        v,
        &[
            ("run_id", Kind::Str),
            ("duration_ms", Kind::Int),
            ("sample_count", Kind::Uint),
            ("baseline_used_bytes", Kind::Uint),
            ("peak_used_bytes", Kind::Uint),
            ("mean_used_bytes", Kind::Num),
            ("delta_peak_bytes", Kind::Uint),
            ("peak_rss_bytes", Kind::OptUint),
            ("growth_slope_bytes_per_s", Kind::Num),
        ],
    )
}

pub fn epoch_stat(v: &Value) -> Result<(), String> {
    object(
        v,
        &[
            ("epoch", Kind::Uint),
            ("start_ms", Kind::Int),
            ("end_ms", Kind::Int),
            ("peak_used_bytes", Kind::OptUint),
            ("mean_used_bytes", Kind::OptNum),
            ("sample_count", Kind::Uint),
        ],
    )
}

pub fn compare(v: &Value) -> Result<(), String> {
    object(
        v,
        &[
            ("run_a", Kind::Str),
            ("run_b", Kind::Str),
            ("hyperparameter_diffs", Kind::Obj),
            ("peak_delta_bytes", Kind::Int),
            ("mean_delta_bytes", Kind::Num),
            ("slope_delta", Kind::Num),
        ],
    )?;
    for (k, pair) in v["hyperparameter_diffs"].as_object().unwrap() {
        if pair.as_array().map(Vec::len) != Some(2) {
            return Err(format!("diff {k} is not a pair: {pair}"));
        }
    }
    Ok(())
}

pub fn error(v: &Value) -> Result<(), String> {
    object(v, &[("error", Kind::Obj)])?;
    object(
        &v["error"],
        &[("code", Kind::Str), ("message", Kind::Str), ("field", Kind::OptStr)],
    )
}
