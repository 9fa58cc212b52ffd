//! Browser bindings for three interactive pieces of the benchmark:
//! scoring a ranking, tracing how a raw completion is parsed, and the
//! random-ranker baseline curve.
//!
//! Each export takes plain strings/numbers and returns a JSON string; the
//! page in `www/` renders the result.

use serde::Serialize;
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

use cdrbench::evaluation::{hit_at_k, MetricVector};
use cdrbench::parse::{self, MatchMode, ParseRules, Trace};
use cdrbench::rng::substream;
use cdrbench::taskgen::bootstrap_shuffle;

/// `"3, 1 7"` -> `[2, 0, 6]` (1-based input, 0-based output).
fn parse_positions(text: &str, m: usize) -> Result<Vec<usize>, String> {
    text.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .map(|s| {
            let n: usize = s.parse().map_err(|_| format!("{s:?} is not a number"))?;
            if n == 0 || n > m {
                Err(format!("{n} is outside 1..={m}"))
            } else {
                Ok(n - 1)
            }
        })
        .collect()
}

fn metrics_json(ranked: &[usize], gt: &[usize]) -> Value {
    let v = MetricVector::compute(ranked, gt);
    let labels = MetricVector::labels();
    Value::Object(
        labels
            .iter()
            .zip(v.0)
            .map(|(l, x)| (l.clone(), json!(x)))
            .collect(),
    )
}

pub fn score_ranking_impl(ranking: &str, ground_truth: &str, m: usize) -> Result<Value, String> {
    let ranked = parse_positions(ranking, m)?;
    let gt = parse_positions(ground_truth, m)?;
    if gt.is_empty() {
        return Err("ground truth is empty".into());
    }
    let mut seen = vec![false; m];
    for &r in &ranked {
        if std::mem::replace(&mut seen[r], true) {
            return Err(format!("candidate {} is ranked twice", r + 1));
        }
    }
    Ok(metrics_json(&ranked, &gt))
}

#[derive(Serialize)]
struct ParseView {
    status: String,
    ranked: Vec<String>,
    missing: Vec<String>,
    n_hallucinated: usize,
    n_format_fixes: usize,
    trace: String,
    metrics: Option<Value>,
}

pub fn parse_trace_impl(
    completion: &str,
    candidates: &str,
    ground_truth: &str,
    fuzzy_threshold: Option<f64>,
) -> Result<Value, String> {
    let titles: Vec<&str> = candidates.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
    if titles.is_empty() {
        return Err("candidate list is empty".into());
    }
    let mut rules = ParseRules::default();
    if let Some(t) = fuzzy_threshold {
        rules.match_mode = MatchMode::Fuzzy;
        rules.fuzzy_threshold = t;
    }
    rules.validate().map_err(|e| e.to_string())?;
    let gt = parse_positions(ground_truth, titles.len())?;
    let (parsed, decisions) = parse::parse_completion(completion, &titles, &rules);
    let trace = Trace {
        parsed: &parsed,
        decisions: &decisions,
        candidate_titles: &titles,
    }
    .to_string();
    let ranked_set: std::collections::BTreeSet<usize> = parsed.ranked.iter().copied().collect();
    let view = ParseView {
        status: format!("{:?}", parsed.status),
        ranked: parsed.ranked.iter().map(|&i| titles[i].to_string()).collect(),
        missing: (0..titles.len())
            .filter(|i| !ranked_set.contains(i))
            .map(|i| titles[i].to_string())
            .collect(),
        n_hallucinated: parsed.n_hallucinated,
        n_format_fixes: parsed.n_format_fixes,
        trace,
        metrics: (parsed.is_ok() && !gt.is_empty()).then(|| metrics_json(&parsed.ranked, &gt)),
    };
    serde_json::to_value(view).map_err(|e| e.to_string())
}

/// Exact P(HIT@k) of a uniform random ranking: 1 - C(m-g, k) / C(m, k).
pub fn exact_hit_curve(m: usize, n_gt: usize) -> Vec<f64> {
    (1..=m)
        .map(|k| {
            let miss: f64 = (0..k)
                .map(|i| if i + n_gt >= m { 0.0 } else { (m - n_gt - i) as f64 / (m - i) as f64 })
                .product();
            1.0 - miss
        })
        .collect()
}

pub fn simulated_hit_curve(m: usize, n_gt: usize, trials: usize, seed: u64) -> Vec<f64> {
    let mut rng = substream(seed, &["demo-random"]);
    let gt: Vec<usize> = (0..n_gt).collect();
    let mut hits = vec![0usize; m];
    for perm in bootstrap_shuffle(m, trials, &mut rng) {
        for (k, h) in hits.iter_mut().enumerate() {
            *h += hit_at_k(&perm, &gt, k + 1) as usize;
        }
    }
    hits.into_iter().map(|h| h as f64 / trials as f64).collect()
}

pub fn random_baseline_impl(m: usize, n_gt: usize, trials: usize, seed: u64) -> Result<Value, String> {
    if m == 0 || n_gt == 0 || n_gt >= m {
        return Err("need 1 <= ground truth < candidates".into());
    }
    if trials == 0 || trials > 200_000 {
        return Err("trials must be in 1..=200000".into());
    }
    Ok(json!({
        "k": (1..=m).collect::<Vec<_>>(),
        "exact": exact_hit_curve(m, n_gt),
        "simulated": simulated_hit_curve(m, n_gt, trials, seed),
    }))
}

fn to_js(result: Result<Value, String>) -> Result<String, JsValue> {
    result.map(|v| v.to_string()).map_err(|e| JsValue::from_str(&e))
}

/// Metrics of a ranking given as 1-based candidate numbers.
#[wasm_bindgen]
pub fn score_ranking(ranking: &str, ground_truth: &str, m: usize) -> Result<String, JsValue> {
    to_js(score_ranking_impl(ranking, ground_truth, m))
}

/// Parse a raw completion against newline-separated candidate titles.
/// A negative `fuzzy_threshold` keeps exact matching.
#[wasm_bindgen]
pub fn parse_trace(
    completion: &str,
    candidates: &str,
    ground_truth: &str,
    fuzzy_threshold: f64,
) -> Result<String, JsValue> {
    let fuzzy = (fuzzy_threshold >= 0.0).then_some(fuzzy_threshold);
    to_js(parse_trace_impl(completion, candidates, ground_truth, fuzzy))
}

/// Exact and simulated HIT@k curves of a random ranker.
#[wasm_bindgen]
pub fn random_baseline(m: usize, n_gt: usize, trials: usize, seed: u32) -> Result<String, JsValue> {
    to_js(random_baseline_impl(m, n_gt, trials, seed as u64))
}
