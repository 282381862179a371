//! wasm-bindgen entry points behind `www/index.html`.
//!
//! Each function takes plain strings and numbers and returns JSON, so the
//! same code paths are testable natively.

use serde_json::{json, Value};
use stacklab::lang::{sample, SampleSpec, Task};
use stacklab::nn::StackState;
use stacklab::stability::{growth_fit, FitOptions, LossCurve};
use wasm_bindgen::prelude::*;

fn nums(line: &str) -> Result<Vec<f64>, String> {
    line.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<f64>().map_err(|_| format!("not a number: {s}")))
        .collect()
}

fn err(msg: String) -> String {
    json!({ "error": msg }).to_string()
}

/// Runs a superposition stack over a script of lines
/// `push pop noop v1 .. vd`, returning every intermediate stack top-down.
pub fn stack_trace(script: &str) -> Result<Value, String> {
    let mut state: Option<StackState> = None;
    let mut steps = Vec::new();
    for (i, line) in script.lines().map(str::trim).filter(|l| !l.is_empty()).enumerate() {
        let v = nums(line).map_err(|e| format!("line {}: {e}", i + 1))?;
        if v.len() < 4 {
            return Err(format!("line {}: need three action weights and a value", i + 1));
        }
        let actions = [v[0], v[1], v[2]];
        if actions.iter().any(|a| *a < 0.0) || (actions.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
            return Err(format!("line {}: action weights must be nonnegative and sum to 1", i + 1));
        }
        let s = state.get_or_insert_with(|| StackState::empty(v.len() - 3));
        if v.len() - 3 != s.cell_dim() {
            return Err(format!("line {}: value width {} but stack width {}", i + 1, v.len() - 3, s.cell_dim()));
        }
        *s = s.update(actions, &v[3..]);
        let cells: Vec<Vec<f64>> = (0..s.depth()).map(|k| s.cell(k)).collect();
        steps.push(json!({ "actions": actions, "cells": cells }));
    }
    Ok(json!({ "steps": steps }))
}

/// Samples strings of a task and checks each against its membership oracle.
pub fn sample_task(task: &str, min: usize, max: usize, count: usize, seed: u64) -> Result<Value, String> {
    let task = Task::parse(task).map_err(|e| e.to_string())?;
    let strings = sample(task, &SampleSpec::new(min, max, count.min(200), seed)).map_err(|e| e.to_string())?;
    let rows: Vec<Value> = strings
        .iter()
        .map(|s| json!({ "text": task.render(s), "len": s.len(), "member": task.membership(s) }))
        .collect();
    Ok(json!({ "task": task.id(), "strings": rows }))
}

/// Fits `a * T^b + c` to `length,loss` lines.
pub fn fit_curve(text: &str) -> Result<Value, String> {
    let mut pairs = Vec::new();
    for (i, line) in text.lines().map(str::trim).filter(|l| !l.is_empty()).enumerate() {
        let v = nums(line).map_err(|e| format!("line {}: {e}", i + 1))?;
        if v.len() != 2 {
            return Err(format!("line {}: expected `length,loss`", i + 1));
        }
        pairs.push((v[0], v[1]));
    }
    let curve = LossCurve::from_pairs(&pairs).map_err(|e| e.to_string())?;
    let opts = FitOptions {
        bootstrap: 50,
        ..FitOptions::default()
    };
    let fit = growth_fit(&curve, &opts).map_err(|e| e.to_string())?;
    serde_json::to_value(fit).map_err(|e| e.to_string())
}

#[wasm_bindgen(js_name = stackTrace)]
pub fn stack_trace_js(script: &str) -> String {
    stack_trace(script).map_or_else(err, |v| v.to_string())
}

#[wasm_bindgen(js_name = sampleTask)]
pub fn sample_task_js(task: &str, min: usize, max: usize, count: usize, seed: u32) -> String {
    sample_task(task, min, max, count, seed as u64).map_or_else(err, |v| v.to_string())
}

#[wasm_bindgen(js_name = fitCurve)]
pub fn fit_curve_js(text: &str) -> String {
    fit_curve(text).map_or_else(err, |v| v.to_string())
}
