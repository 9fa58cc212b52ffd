//! Ranking metrics (HIT, MAP, NDCG at 1/5/10) and their aggregation.
//!
//! Rankings are candidate indices in predicted order; ground truth is a set
//! of candidate indices. Relevance is binary. Candidates missing from a
//! partial ranking simply never appear, so they contribute zero gain while
//! the normalizers (`min(K, |gt|)` for AP, the ideal DCG for NDCG) stay the
//! same as for a complete ranking.

use std::fmt::Write as _;
use std::io::Write;

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("no valid (non-skipped) user outcomes to aggregate")]
    NoValidUsers,
    #[error("relative gain undefined for baseline value {0}")]
    NonPositiveBaseline(f64),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub const CUTOFFS: [usize; 3] = [1, 5, 10];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Metric {
    Hit,
    Map,
    Ndcg,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::Hit, Metric::Map, Metric::Ndcg];

    pub fn short(self) -> &'static str {
        match self {
            Metric::Hit => "H",
            Metric::Map => "P",
            Metric::Ndcg => "N",
        }
    }
}

fn relevant<'a>(ranked: &'a [usize], gt: &'a [usize], k: usize) -> impl Iterator<Item = (usize, bool)> + 'a {
    ranked
        .iter()
        .take(k)
        .enumerate()
        .map(move |(pos, c)| (pos + 1, gt.contains(c)))
}

/// 1 if any ground-truth item is in the top `k`.
pub fn hit_at_k(ranked: &[usize], gt: &[usize], k: usize) -> f64 {
    if ranked.iter().take(k).any(|c| gt.contains(c)) {
        1.0
    } else {
        0.0
    }
}

/// Average precision at `k`, normalized by `min(k, |gt|)`.
pub fn ap_at_k(ranked: &[usize], gt: &[usize], k: usize) -> f64 {
    let denom = k.min(gt.len());
    if denom == 0 {
        return 0.0;
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, rel) in relevant(ranked, gt, k) {
        if rel {
            hits += 1;
            sum += hits as f64 / rank as f64;
        }
    }
    sum / denom as f64
}

/// Unnormalized discounted cumulative gain at `k`.
pub fn dcg_at_k(ranked: &[usize], gt: &[usize], k: usize) -> f64 {
    relevant(ranked, gt, k)
        .filter(|&(_, rel)| rel)
        .map(|(rank, _)| 1.0 / ((rank + 1) as f64).log2())
        .sum()
}

pub fn ndcg_at_k(ranked: &[usize], gt: &[usize], k: usize) -> f64 {
    let ideal: f64 = (1..=k.min(gt.len()))
        .map(|rank| 1.0 / ((rank + 1) as f64).log2())
        .sum();
    if ideal == 0.0 {
        return 0.0;
    }
    dcg_at_k(ranked, gt, k) / ideal
}

/// The nine metric cells, ordered H@1, H@5, H@10, P@1, ..., N@10.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricVector(pub [f64; 9]);

impl MetricVector {
    pub fn index(metric: Metric, k_pos: usize) -> usize {
        let m = match metric {
            Metric::Hit => 0,
            Metric::Map => 1,
            Metric::Ndcg => 2,
        };
        m * 3 + k_pos
    }

    pub fn labels() -> [String; 9] {
        std::array::from_fn(|i| format!("{}@{}", Metric::ALL[i / 3].short(), CUTOFFS[i % 3]))
    }

    pub fn get(&self, metric: Metric, k: usize) -> Option<f64> {
        let pos = CUTOFFS.iter().position(|&c| c == k)?;
        Some(self.0[Self::index(metric, pos)])
    }

    pub fn compute(ranked: &[usize], gt: &[usize]) -> Self {
        let mut v = [0.0; 9];
        for (pos, &k) in CUTOFFS.iter().enumerate() {
            v[Self::index(Metric::Hit, pos)] = hit_at_k(ranked, gt, k);
            v[Self::index(Metric::Map, pos)] = ap_at_k(ranked, gt, k);
            v[Self::index(Metric::Ndcg, pos)] = ndcg_at_k(ranked, gt, k);
        }
        Self(v)
    }
}

/// Percentage change from `baseline` to `treatment`.
pub fn relative_gain(baseline: f64, treatment: f64) -> Result<f64, EvalError> {
    if baseline <= 0.0 || !baseline.is_finite() {
        return Err(EvalError::NonPositiveBaseline(baseline));
    }
    Ok(100.0 * (treatment - baseline) / baseline)
}

/// Share (in percent) of the nine cells where treatment strictly beats baseline.
pub fn pct_improved(baseline: &MetricVector, treatment: &MetricVector) -> f64 {
    let improved = baseline
        .0
        .iter()
        .zip(&treatment.0)
        .filter(|(b, t)| t > b)
        .count();
    100.0 * improved as f64 / 9.0
}

/// Per-repeat metric vectors for one user; `None` marks a skipped completion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserOutcome {
    pub user_id: String,
    pub per_repeat: Vec<Option<MetricVector>>,
}

/// Parser mismatch accounting accumulated over a run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MismatchStats {
    pub completions: usize,
    pub refusals: usize,
    pub empty: usize,
    /// Candidates missing from parsed outputs / candidates presented.
    pub missing_rate: f64,
    /// Unmatched output lines / content lines.
    pub hallucination_rate: f64,
    pub format_fixes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub label: String,
    pub mean: MetricVector,
    /// Sample standard deviation over repeat means (0 with one repeat).
    pub std: MetricVector,
    pub repeat_means: Vec<MetricVector>,
    pub n_users: usize,
    pub n_skipped: usize,
    pub mismatch: MismatchStats,
    pub gain: Option<[Option<f64>; 9]>,
    pub pct_improved: Option<f64>,
}

impl MetricReport {
    /// Attach gains and %imp relative to `baseline`.
    pub fn compare_to(&mut self, baseline: &MetricReport) {
        self.gain = Some(std::array::from_fn(|i| {
            relative_gain(baseline.mean.0[i], self.mean.0[i]).ok()
        }));
        self.pct_improved = Some(pct_improved(&baseline.mean, &self.mean));
    }
}

/// Mean over users per repeat, then mean and sample std over repeats.
/// Skipped completions are left out of their repeat's mean; a repeat with
/// no valid completion at all is left out of the report.
pub fn aggregate(label: &str, outcomes: &[UserOutcome]) -> Result<MetricReport, EvalError> {
    let n_repeats = outcomes.iter().map(|o| o.per_repeat.len()).max().unwrap_or(0);
    let mut repeat_means = Vec::new();
    for r in 0..n_repeats {
        let valid: Vec<&MetricVector> = outcomes
            .iter()
            .filter_map(|o| o.per_repeat.get(r).and_then(Option::as_ref))
            .collect();
        if valid.is_empty() {
            continue;
        }
        let mut sum = [0.0; 9];
        for v in &valid {
            for (s, x) in sum.iter_mut().zip(v.0) {
                *s += x;
            }
        }
        repeat_means.push(MetricVector(sum.map(|s| s / valid.len() as f64)));
    }
    if repeat_means.is_empty() {
        return Err(EvalError::NoValidUsers);
    }
    let n = repeat_means.len() as f64;
    let mean: [f64; 9] = std::array::from_fn(|i| repeat_means.iter().map(|v| v.0[i]).sum::<f64>() / n);
    let std: [f64; 9] = std::array::from_fn(|i| {
        if repeat_means.len() < 2 {
            0.0
        } else {
            let ss: f64 = repeat_means.iter().map(|v| (v.0[i] - mean[i]).powi(2)).sum();
            (ss / (n - 1.0)).sqrt()
        }
    });
    let n_users = outcomes
        .iter()
        .filter(|o| o.per_repeat.iter().any(Option::is_some))
        .count();
    let n_skipped = outcomes
        .iter()
        .map(|o| o.per_repeat.iter().filter(|r| r.is_none()).count())
        .sum();
    Ok(MetricReport {
        label: label.to_string(),
        mean: MetricVector(mean),
        std: MetricVector(std),
        repeat_means,
        n_users,
        n_skipped,
        mismatch: MismatchStats::default(),
        gain: None,
        pct_improved: None,
    })
}

fn fmt4(x: f64) -> String {
    format!("{x:.4}")
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(|v| format!("{v:.2}")).unwrap_or_default()
}

/// One row per report: counts, nine means, nine stds, nine gains, %imp,
/// mismatch rates. Numbers use fixed precision so reruns are byte-identical.
pub fn write_reports_csv<W: Write>(reports: &[MetricReport], out: W) -> Result<(), EvalError> {
    let labels = MetricVector::labels();
    let mut csv = csv::Writer::from_writer(out);
    let mut header = vec!["variant".to_string(), "n_users".into(), "n_skipped".into()];
    header.extend(labels.iter().cloned());
    header.extend(labels.iter().map(|l| format!("{l}_std")));
    header.extend(labels.iter().map(|l| format!("{l}_gain_pct")));
    header.extend(["pct_improved", "missing_rate", "hallucination_rate", "refusals"].map(String::from));
    csv.write_record(&header)?;
    for r in reports {
        let mut row = vec![r.label.clone(), r.n_users.to_string(), r.n_skipped.to_string()];
        row.extend(r.mean.0.iter().map(|&x| format!("{x:.6}")));
        row.extend(r.std.0.iter().map(|&x| format!("{x:.6}")));
        match &r.gain {
            Some(g) => row.extend(g.iter().map(|&x| fmt_opt(x))),
            None => row.extend(std::iter::repeat_n(String::new(), 9)),
        }
        row.push(fmt_opt(r.pct_improved));
        row.push(format!("{:.6}", r.mismatch.missing_rate));
        row.push(format!("{:.6}", r.mismatch.hallucination_rate));
        row.push(r.mismatch.refusals.to_string());
        csv.write_record(&row)?;
    }
    csv.flush()?;
    Ok(())
}

/// Markdown table in the usual "variant | H@1 ... N@10 | %imp" layout, with
/// a second table of relative gains when any report carries them.
pub fn reports_markdown(title: &str, reports: &[MetricReport]) -> String {
    let labels = MetricVector::labels();
    let mut md = String::new();
    let _ = writeln!(md, "## {title}\n");
    let _ = writeln!(md, "| Variant | Users | {} | %imp |", labels.join(" | "));
    let _ = writeln!(md, "|---|---:|{}---:|", "---:|".repeat(9));
    for r in reports {
        let cells: Vec<String> = r
            .mean
            .0
            .iter()
            .zip(&r.std.0)
            .map(|(m, s)| format!("{} ± {}", fmt4(*m), fmt4(*s)))
            .collect();
        let imp = r.pct_improved.map(|p| format!("{p:.2}%")).unwrap_or_default();
        let _ = writeln!(md, "| {} | {} | {} | {} |", r.label, r.n_users, cells.join(" | "), imp);
    }
    if reports.iter().any(|r| r.gain.is_some()) {
        let _ = writeln!(md, "\n### Relative gain vs. baseline (%)\n");
        let _ = writeln!(md, "| Variant | {} |", labels.join(" | "));
        let _ = writeln!(md, "|---|{}", "---:|".repeat(9));
        for r in reports {
            if let Some(g) = &r.gain {
                let cells: Vec<String> = g
                    .iter()
                    .map(|x| x.map(|v| format!("{v:+.2}")).unwrap_or_else(|| "n/a".into()))
                    .collect();
                let _ = writeln!(md, "| {} | {} |", r.label, cells.join(" | "));
            }
        }
    }
    md
}
