//! JSON model files. The format is documented in `docs/model-schema.md`.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::Deserialize;
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::model::PoSsRealization;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawModel {
    n: usize,
    n_s: usize,
    n_w: usize,
    #[serde(default)]
    time_invariant: bool,
    #[serde(rename = "A")]
    a: Value,
    #[serde(rename = "B")]
    b: Value,
    #[serde(rename = "C")]
    c: Value,
    #[serde(rename = "N")]
    feedthrough: Value,
    #[serde(rename = "K_W")]
    k_w: Value,
    #[serde(rename = "mu_S1", default)]
    mu_s1: Option<Vec<f64>>,
    #[serde(rename = "K_S1")]
    k_s1: Value,
}

fn schema_err(field: &str, msg: impl std::fmt::Display) -> Error {
    Error::Schema(format!("field `{field}`: {msg}"))
}

fn parse_matrix(v: &Value, field: &str, rows: usize, cols: usize) -> Result<DMatrix<f64>> {
    let outer = v
        .as_array()
        .ok_or_else(|| schema_err(field, "expected a 2-D array of numbers"))?;
    if outer.len() != rows {
        return Err(schema_err(
            field,
            format!("expected {rows} rows, got {}", outer.len()),
        ));
    }
    let mut m = DMatrix::<f64>::zeros(rows, cols);
    for (i, row) in outer.iter().enumerate() {
        let row = row
            .as_array()
            .ok_or_else(|| schema_err(field, format!("row {} is not an array", i + 1)))?;
        if row.len() != cols {
            return Err(schema_err(
                field,
                format!("row {} has {} entries, expected {cols}", i + 1, row.len()),
            ));
        }
        for (j, x) in row.iter().enumerate() {
            m[(i, j)] = x.as_f64().ok_or_else(|| {
                schema_err(
                    field,
                    format!("entry ({}, {}) is not a number", i + 1, j + 1),
                )
            })?;
        }
    }
    Ok(m)
}

fn parse_sequence(
    v: &Value,
    field: &str,
    time_invariant: bool,
    len: usize,
    rows: usize,
    cols: usize,
) -> Result<Vec<DMatrix<f64>>> {
    if time_invariant {
        let m = parse_matrix(v, field, rows, cols)?;
        return Ok(vec![m; len]);
    }
    let items = v
        .as_array()
        .ok_or_else(|| schema_err(field, "expected an array of matrices"))?;
    if items.len() != len {
        return Err(schema_err(
            field,
            format!("expected {len} matrices, got {}", items.len()),
        ));
    }
    items
        .iter()
        .enumerate()
        .map(|(t, m)| parse_matrix(m, &format!("{field}[{}]", t + 1), rows, cols))
        .collect()
}

/// Parses and validates a model document.
pub fn parse_model(text: &str) -> Result<PoSsRealization> {
    let raw: RawModel = serde_json::from_str(text)
        .map_err(|e| Error::Schema(format!("line {}, column {}: {e}", e.line(), e.column())))?;
    let (n, ns, nw, ti) = (raw.n, raw.n_s, raw.n_w, raw.time_invariant);
    if n == 0 {
        return Err(schema_err("n", "must be >= 1"));
    }
    if ns == 0 || nw == 0 {
        return Err(schema_err(
            if ns == 0 { "n_s" } else { "n_w" },
            "must be >= 1",
        ));
    }
    let steps = n - 1;
    let initial_mean = match raw.mu_s1 {
        Some(mu) if mu.len() != ns => {
            return Err(schema_err(
                "mu_S1",
                format!("expected length {ns}, got {}", mu.len()),
            ));
        }
        Some(mu) => DVector::from_vec(mu),
        None => DVector::zeros(ns),
    };
    let r = PoSsRealization {
        horizon: n,
        state_dim: ns,
        driver_dim: nw,
        transition: parse_sequence(&raw.a, "A", ti, steps, ns, ns)?,
        state_gain: parse_sequence(&raw.b, "B", ti, steps, ns, nw)?,
        observation: parse_sequence(&raw.c, "C", ti, n, 1, ns)?,
        feedthrough: parse_sequence(&raw.feedthrough, "N", ti, n, 1, nw)?,
        driver_cov: parse_sequence(&raw.k_w, "K_W", ti, n, nw, nw)?,
        initial_mean,
        initial_cov: parse_matrix(&raw.k_s1, "K_S1", ns, ns)?,
        unstable_init: false,
    };
    r.ensure_valid()?;
    Ok(r)
}

/// Reads a model file, distinguishing a missing file from a malformed one.
pub fn load_model(path: &Path) -> Result<PoSsRealization> {
    let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::ModelNotFound(path.display().to_string()),
        _ => Error::Io(e),
    })?;
    parse_model(&text)
}

fn matrix_json(m: &DMatrix<f64>) -> Value {
    Value::Array(
        m.row_iter()
            .map(|row| Value::Array(row.iter().map(|&x| json!(x)).collect()))
            .collect(),
    )
}

/// Serializes `r`, using the compact time-invariant form when possible.
pub fn model_to_json(r: &PoSsRealization) -> Value {
    let seq = |v: &[DMatrix<f64>]| Value::Array(v.iter().map(matrix_json).collect());
    let mut doc = json!({
        "n": r.horizon,
        "n_s": r.state_dim,
        "n_w": r.driver_dim,
        "mu_S1": r.initial_mean.iter().collect::<Vec<_>>(),
        "K_S1": matrix_json(&r.initial_cov),
    });
    let obj = doc.as_object_mut().expect("object literal");
    match r.as_time_invariant() {
        Some(ti) => {
            obj.insert("time_invariant".into(), json!(true));
            obj.insert("A".into(), matrix_json(&ti.transition));
            obj.insert("B".into(), matrix_json(&ti.state_gain));
            obj.insert("C".into(), matrix_json(&ti.observation));
            obj.insert("N".into(), matrix_json(&ti.feedthrough));
            obj.insert("K_W".into(), matrix_json(&ti.driver_cov));
        }
        None => {
            obj.insert("time_invariant".into(), json!(false));
            obj.insert("A".into(), seq(&r.transition));
            obj.insert("B".into(), seq(&r.state_gain));
            obj.insert("C".into(), seq(&r.observation));
            obj.insert("N".into(), seq(&r.feedthrough));
            obj.insert("K_W".into(), seq(&r.driver_cov));
        }
    }
    doc
}
