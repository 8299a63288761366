//! Turn-level metrics and task-level aggregation.
//!
//! The official Function Score, BLEURT and CPDC Score are not available
//! offline. They are replaced by surrogates: exact-match F1 over tool calls,
//! and sentence-level chrF for both learned text metrics. Only the way the
//! task scores are assembled from them is kept as-is.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::codec::ToolCall;

pub const CHRF_CHAR_ORDER: usize = 6;
pub const CHRF_BETA: f64 = 2.0;

/// Canonical text of a call: trimmed name, keys sorted recursively, numbers
/// normalized (`1 == 1.0`), string values trimmed but case-preserved.
pub fn canonical_call(call: &ToolCall) -> String {
    let params = Value::Object(call.parameters.clone());
    format!("{}({})", call.name.trim(), canonical_value(&params))
}

fn canonical_value(value: &Value) -> String {
    match value {
        Value::Null => "null".into(),
        Value::Bool(b) => b.to_string(),
        Value::Number(n) => canonical_number(n),
        Value::String(s) => serde_json::to_string(s.trim()).expect("strings serialize"),
        Value::Array(items) => {
            let inner: Vec<String> = items.iter().map(canonical_value).collect();
            format!("[{}]", inner.join(","))
        }
        Value::Object(map) => {
            let sorted: BTreeMap<&String, &Value> = map.iter().collect();
            let inner: Vec<String> = sorted
                .into_iter()
                .map(|(k, v)| format!("{}:{}", serde_json::to_string(k).expect("keys serialize"), canonical_value(v)))
                .collect();
            format!("{{{}}}", inner.join(","))
        }
    }
}

fn canonical_number(n: &serde_json::Number) -> String {
    if let Some(i) = n.as_i64() {
        return i.to_string();
    }
    if let Some(u) = n.as_u64() {
        return u.to_string();
    }
    let f = n.as_f64().unwrap_or(f64::NAN);
    if f.fract() == 0.0 && f.abs() < 9.007_199_254_740_992e15 {
        format!("{}", f as i64)
    } else {
        format!("{f:?}")
    }
}

fn multiset(calls: &[ToolCall]) -> HashMap<String, usize> {
    let mut counts = HashMap::new();
    for call in calls {
        *counts.entry(canonical_call(call)).or_insert(0) += 1;
    }
    counts
}

/// Multiset F1 over exact (name, canonical parameters) matches.
/// Both empty scores 1.0; exactly one empty scores 0.0.
pub fn function_score(pred: &[ToolCall], gold: &[ToolCall]) -> f64 {
    match (pred.is_empty(), gold.is_empty()) {
        (true, true) => return 1.0,
        (true, false) | (false, true) => return 0.0,
        _ => {}
    }
    let pred_counts = multiset(pred);
    let gold_counts = multiset(gold);
    let matched: usize = pred_counts
        .iter()
        .map(|(key, &n)| n.min(gold_counts.get(key).copied().unwrap_or(0)))
        .sum();
    if matched == 0 {
        return 0.0;
    }
    let precision = matched as f64 / pred.len() as f64;
    let recall = matched as f64 / gold.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

fn char_ngram_counts(chars: &[char], n: usize) -> HashMap<&[char], usize> {
    let mut counts = HashMap::new();
    if chars.len() >= n {
        for window in chars.windows(n) {
            *counts.entry(window).or_insert(0) += 1;
        }
    }
    counts
}

/// Sentence-level chrF (character n-grams 1..=6, β = 2, whitespace removed),
/// scaled to [0, 1].
///
/// Precision and recall are averaged over the orders where both sides have
/// n-grams and then combined into one F-score. Texts that are identical
/// once whitespace is removed score 1.0, including two empty texts.
pub fn text_similarity(pred: &str, reference: &str) -> f64 {
    let hyp: Vec<char> = pred.chars().filter(|c| !c.is_whitespace()).collect();
    let refr: Vec<char> = reference.chars().filter(|c| !c.is_whitespace()).collect();
    if hyp == refr {
        return 1.0;
    }
    let (mut precision, mut recall, mut orders) = (0.0, 0.0, 0usize);
    for n in 1..=CHRF_CHAR_ORDER {
        let hyp_total = hyp.len().saturating_sub(n - 1);
        let ref_total = refr.len().saturating_sub(n - 1);
        if hyp.len() < n || refr.len() < n {
            continue;
        }
        let hyp_counts = char_ngram_counts(&hyp, n);
        let ref_counts = char_ngram_counts(&refr, n);
        let matched: usize = hyp_counts
            .iter()
            .map(|(gram, &count)| count.min(ref_counts.get(gram).copied().unwrap_or(0)))
            .sum();
        precision += matched as f64 / hyp_total as f64;
        recall += matched as f64 / ref_total as f64;
        orders += 1;
    }
    if orders == 0 {
        return 0.0;
    }
    precision /= orders as f64;
    recall /= orders as f64;
    if precision + recall == 0.0 {
        return 0.0;
    }
    let factor = CHRF_BETA * CHRF_BETA;
    (1.0 + factor) * precision * recall / (factor * precision + recall)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TurnScore {
    pub function_score: f64,
    pub text_score: f64,
}

impl TurnScore {
    pub fn compute(pred_calls: &[ToolCall], pred_text: &str, gold_calls: &[ToolCall], gold_text: &str) -> Self {
        Self {
            function_score: function_score(pred_calls, gold_calls),
            text_score: text_similarity(pred_text, gold_text),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskScore {
    pub task1: Option<f64>,
    pub task2: Option<f64>,
    pub task3: Option<f64>,
}

impl TaskScore {
    pub fn new(task1: Option<f64>, task2: Option<f64>) -> Result<Self, ScoreError> {
        let task3 = match (task1, task2) {
            (Some(a), Some(b)) => Some(score_task3(a, b)?),
            _ => None,
        };
        Ok(Self { task1, task2, task3 })
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ScoreError {
    #[error("no turns to score")]
    Empty,
    #[error("score {0} is outside [0, 1]")]
    OutOfRange(f64),
}

fn mean(values: impl ExactSizeIterator<Item = f64>) -> f64 {
    let n = values.len();
    values.sum::<f64>() / n as f64
}

/// Task 1: average of the Function Score aggregate and the text aggregate.
pub fn score_task1(turns: &[TurnScore]) -> Result<f64, ScoreError> {
    if turns.is_empty() {
        return Err(ScoreError::Empty);
    }
    let function = mean(turns.iter().map(|t| t.function_score));
    let text = mean(turns.iter().map(|t| t.text_score));
    Ok((function + text) / 2.0)
}

/// Task 2: average of the CPDC Score and BLEURT aggregates; the chrF
/// surrogate fills both slots.
pub fn score_task2(turns: &[TurnScore]) -> Result<f64, ScoreError> {
    if turns.is_empty() {
        return Err(ScoreError::Empty);
    }
    let cpdc_surrogate = mean(turns.iter().map(|t| t.text_score));
    let bleurt_surrogate = mean(turns.iter().map(|t| t.text_score));
    Ok((cpdc_surrogate + bleurt_surrogate) / 2.0)
}

/// Task 3: the mean of the Task 1 and Task 2 scores.
pub fn score_task3(task1: f64, task2: f64) -> Result<f64, ScoreError> {
    for score in [task1, task2] {
        if !(0.0..=1.0).contains(&score) {
            return Err(ScoreError::OutOfRange(score));
        }
    }
    Ok((task1 + task2) / 2.0)
}

/// Whether published scores rounded to `decimals` places can come from
/// exact values satisfying `task3 = (task1 + task2) / 2`.
///
/// With half-unit rounding error on each input, the mean of the rounded
/// inputs may differ from the rounded `task3` by at most one unit in the
/// last place. Works in integer units to keep the boundary exact.
pub fn rounding_consistent(task1: f64, task2: f64, task3: f64, decimals: u32) -> bool {
    let scale = 10f64.powi(decimals as i32);
    let units = |x: f64| (x * scale).round() as i64;
    (2 * units(task3) - (units(task1) + units(task2))).abs() <= 2
}
