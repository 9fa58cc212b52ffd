//! Recover a ranking over the candidate list from free-text model output.
//!
//! Two kinds of mismatch are handled. Format mismatch (numbering, bullets,
//! indentation, quotes, blank lines) is normalized away line by line.
//! Content mismatch (refusals, invented titles, dropped candidates) is
//! detected and counted: refusals skip the completion, unknown lines are
//! dropped as hallucinations, and candidates never mentioned are left out
//! of the ranking.

use std::fmt;
use std::path::Path;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

pub const DEFAULT_REFUSALS: &str = include_str!("../templates/refusals.txt");

#[derive(Debug, thiserror::Error)]
pub enum ParseError {
    #[error("cannot read rules file {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid parse rules: {0}")]
    InvalidRules(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchMode {
    #[default]
    ExactNormalized,
    Fuzzy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParseRules {
    pub refusal_phrases: Vec<String>,
    pub match_mode: MatchMode,
    pub fuzzy_threshold: f64,
}

impl Default for ParseRules {
    fn default() -> Self {
        Self {
            refusal_phrases: phrases_from_text(DEFAULT_REFUSALS),
            match_mode: MatchMode::ExactNormalized,
            fuzzy_threshold: 0.9,
        }
    }
}

fn phrases_from_text(text: &str) -> Vec<String> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_string)
        .collect()
}

impl ParseRules {
    /// Load refusal phrases from a UTF-8 file, one phrase per line.
    pub fn with_refusals_file(mut self, path: &Path) -> Result<Self, ParseError> {
        let text = std::fs::read_to_string(path).map_err(|source| ParseError::Io {
            path: path.display().to_string(),
            source,
        })?;
        self.refusal_phrases = phrases_from_text(&text);
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<(), ParseError> {
        if self.refusal_phrases.is_empty() {
            return Err(ParseError::InvalidRules("refusal list is empty".into()));
        }
        if !(0.0..=1.0).contains(&self.fuzzy_threshold) {
            return Err(ParseError::InvalidRules(format!(
                "fuzzy threshold {} outside [0, 1]",
                self.fuzzy_threshold
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParseStatus {
    Ok,
    SkippedRefusal,
    SkippedEmpty,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParsedRanking {
    pub status: ParseStatus,
    /// Candidate indices (into the presented list) in output order.
    pub ranked: Vec<usize>,
    pub n_hallucinated: usize,
    pub n_missing: usize,
    pub n_format_fixes: usize,
    pub n_candidates: usize,
}

impl ParsedRanking {
    pub fn is_ok(&self) -> bool {
        self.status == ParseStatus::Ok
    }
}

/// One output line after format normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedLine {
    /// 1-based line number in the raw text.
    pub line_no: usize,
    pub raw: String,
    /// Cleaned title as written by the model.
    pub display: String,
    /// Lowercased matching key.
    pub key: String,
    /// Key computed without stripping a leading enumeration token, for
    /// titles that genuinely start with one ("1. Spring", "- Zero -").
    pub unstripped_key: String,
    pub fixes: usize,
}

fn enumeration() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^(?:\d+[.)]|[-*])\s+").expect("static regex"))
}

const QUOTES: &[char] = &['"', '\'', '`', '\u{201c}', '\u{201d}', '\u{2018}', '\u{2019}'];

fn strip_quotes(s: &str, fixes: &mut usize) -> String {
    let mut s = s.trim();
    loop {
        let mut chars = s.chars();
        match (chars.next(), chars.next_back()) {
            (Some(a), Some(b)) if QUOTES.contains(&a) && QUOTES.contains(&b) => {
                s = s[a.len_utf8()..s.len() - b.len_utf8()].trim();
                *fixes += 1;
            }
            _ => return s.to_string(),
        }
    }
}

fn collapse(s: &str, fixes: &mut usize) -> String {
    let out = s.split_whitespace().collect::<Vec<_>>().join(" ");
    if out != s {
        *fixes += 1;
    }
    out
}

/// Matching key for a candidate title: quotes stripped, whitespace
/// collapsed, lowercased.
pub fn candidate_key(title: &str) -> String {
    let mut fixes = 0;
    collapse(&strip_quotes(title, &mut fixes), &mut fixes).to_lowercase()
}

/// Format normalization. Returns the surviving content lines and the total
/// number of fixes applied (blank lines dropped count as one fix each).
pub fn normalize_output(raw: &str) -> (Vec<NormalizedLine>, usize) {
    let mut lines = Vec::new();
    let mut total_fixes = 0;
    for (idx, raw_line) in raw.lines().enumerate() {
        let mut fixes = 0;
        let trimmed = raw_line.trim();
        if trimmed.len() != raw_line.len() {
            fixes += 1;
        }
        if trimmed.is_empty() {
            total_fixes += 1;
            continue;
        }
        let stripped = match enumeration().find(trimmed) {
            Some(m) => {
                fixes += 1;
                &trimmed[m.end()..]
            }
            None => trimmed,
        };
        let display = collapse(&strip_quotes(stripped, &mut fixes), &mut fixes);
        if display.is_empty() {
            total_fixes += fixes + 1;
            continue;
        }
        let unstripped_key = candidate_key(trimmed);
        total_fixes += fixes;
        lines.push(NormalizedLine {
            line_no: idx + 1,
            raw: raw_line.to_string(),
            key: display.to_lowercase(),
            display,
            unstripped_key,
            fixes,
        });
    }
    (lines, total_fixes)
}

/// Case-insensitive substring search over the refusal phrases.
pub fn detect_refusal(raw: &str, rules: &ParseRules) -> bool {
    let lower = raw.to_lowercase();
    rules
        .refusal_phrases
        .iter()
        .any(|p| !p.is_empty() && lower.contains(&p.to_lowercase()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LineOutcome {
    Matched { candidate: usize },
    Fuzzy { candidate: usize, similarity: f64 },
    Duplicate { candidate: usize },
    Hallucinated,
}

/// Per-line decision record, for auditing a parse.
#[derive(Debug, Clone, PartialEq)]
pub struct LineDecision {
    pub line: NormalizedLine,
    pub outcome: LineOutcome,
}

/// Map normalized lines onto candidates.
pub fn match_candidates(
    lines: &[NormalizedLine],
    candidate_titles: &[&str],
    rules: &ParseRules,
) -> (ParsedRanking, Vec<LineDecision>) {
    let keys: Vec<String> = candidate_titles.iter().map(|t| candidate_key(t)).collect();
    let mut taken = vec![false; keys.len()];
    let mut ranked = Vec::new();
    let mut trace = Vec::with_capacity(lines.len());
    let mut n_hallucinated = 0;

    for line in lines {
        let exact = keys
            .iter()
            .position(|k| *k == line.key)
            .or_else(|| keys.iter().position(|k| *k == line.unstripped_key));
        let outcome = match exact {
            Some(c) if !taken[c] => LineOutcome::Matched { candidate: c },
            Some(c) => LineOutcome::Duplicate { candidate: c },
            None if rules.match_mode == MatchMode::Fuzzy => {
                best_fuzzy(&line.key, &keys, &taken, rules.fuzzy_threshold)
                    .map(|(candidate, similarity)| LineOutcome::Fuzzy {
                        candidate,
                        similarity,
                    })
                    .unwrap_or(LineOutcome::Hallucinated)
            }
            None => LineOutcome::Hallucinated,
        };
        match outcome {
            LineOutcome::Matched { candidate } | LineOutcome::Fuzzy { candidate, .. } => {
                taken[candidate] = true;
                ranked.push(candidate);
            }
            LineOutcome::Duplicate { .. } | LineOutcome::Hallucinated => n_hallucinated += 1,
        }
        trace.push(LineDecision {
            line: line.clone(),
            outcome,
        });
    }

    let status = if ranked.is_empty() {
        ParseStatus::SkippedEmpty
    } else {
        ParseStatus::Ok
    };
    let parsed = ParsedRanking {
        status,
        n_missing: keys.len() - ranked.len(),
        ranked,
        n_hallucinated,
        n_format_fixes: lines.iter().map(|l| l.fixes).sum(),
        n_candidates: keys.len(),
    };
    (parsed, trace)
}

fn best_fuzzy(key: &str, keys: &[String], taken: &[bool], threshold: f64) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (c, k) in keys.iter().enumerate() {
        if taken[c] {
            continue;
        }
        let sim = strsim::normalized_levenshtein(key, k);
        if sim >= threshold && best.is_none_or(|(_, s)| sim > s) {
            best = Some((c, sim));
        }
    }
    best
}

/// Full parse of one completion against the presented candidate titles.
pub fn parse_completion(
    raw: &str,
    candidate_titles: &[&str],
    rules: &ParseRules,
) -> (ParsedRanking, Vec<LineDecision>) {
    if detect_refusal(raw, rules) {
        let (lines, fixes) = normalize_output(raw);
        if !lines.is_empty() && lines.len() >= candidate_titles.len() {
            log::info!("refusal phrase inside an otherwise complete list; skipping conservatively");
        }
        let parsed = ParsedRanking {
            status: ParseStatus::SkippedRefusal,
            ranked: Vec::new(),
            n_hallucinated: 0,
            n_missing: candidate_titles.len(),
            n_format_fixes: fixes,
            n_candidates: candidate_titles.len(),
        };
        let trace = lines
            .into_iter()
            .map(|line| LineDecision {
                line,
                outcome: LineOutcome::Hallucinated,
            })
            .collect();
        return (parsed, trace);
    }
    let (lines, fixes) = normalize_output(raw);
    let (mut parsed, trace) = match_candidates(&lines, candidate_titles, rules);
    parsed.n_format_fixes = fixes;
    (parsed, trace)
}

/// Human-readable trace, one line per decision.
pub struct Trace<'a> {
    pub parsed: &'a ParsedRanking,
    pub decisions: &'a [LineDecision],
    pub candidate_titles: &'a [&'a str],
}

impl fmt::Display for Trace<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for d in self.decisions {
            write!(f, "L{:<3} {:?} -> {:?}: ", d.line.line_no, d.line.raw, d.line.display)?;
            match d.outcome {
                LineOutcome::Matched { candidate } => {
                    writeln!(f, "matched #{} {:?}", candidate + 1, self.candidate_titles[candidate])?
                }
                LineOutcome::Fuzzy {
                    candidate,
                    similarity,
                } => writeln!(
                    f,
                    "fuzzy #{} {:?} (similarity {similarity:.3})",
                    candidate + 1,
                    self.candidate_titles[candidate]
                )?,
                LineOutcome::Duplicate { candidate } => {
                    writeln!(f, "duplicate of #{}, dropped", candidate + 1)?
                }
                LineOutcome::Hallucinated => {
                    if self.parsed.status == ParseStatus::SkippedRefusal {
                        writeln!(f, "ignored (refusal)")?
                    } else {
                        writeln!(f, "no candidate, dropped")?
                    }
                }
            }
        }
        let ranked: std::collections::BTreeSet<usize> = self.parsed.ranked.iter().copied().collect();
        for (c, title) in self.candidate_titles.iter().enumerate() {
            if !ranked.contains(&c) && self.parsed.status != ParseStatus::SkippedRefusal {
                writeln!(f, "missing #{} {title:?}", c + 1)?;
            }
        }
        writeln!(
            f,
            "status={:?} ranked={} hallucinated={} missing={} format_fixes={}",
            self.parsed.status,
            self.parsed.ranked.len(),
            self.parsed.n_hallucinated,
            self.parsed.n_missing,
            self.parsed.n_format_fixes
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn displays(raw: &str) -> Vec<String> {
        normalize_output(raw).0.into_iter().map(|l| l.display).collect()
    }

    #[test]
    fn numbered_lines() {
        assert_eq!(displays("1. Saw II\n2. Hostel"), ["Saw II", "Hostel"]);
    }

    #[test]
    fn bullet_quote_and_blank() {
        assert_eq!(displays("  - 'Spider-Man 3'\n\n"), ["Spider-Man 3"]);
    }

    #[test]
    fn other_enumeration_styles() {
        assert_eq!(
            displays("3) A\n* B\n\t- \"C  D\"\n10.   E"),
            ["A", "B", "C D", "E"]
        );
        // no whitespace after the token: not an enumeration
        assert_eq!(displays("1.5 Liters"), ["1.5 Liters"]);
    }

    #[test]
    fn title_starting_with_a_number_still_matches() {
        let cands = ["1. Spring", "Winter"];
        let (p, _) = parse_completion("1. Spring\nWinter", &cands, &ParseRules::default());
        assert_eq!(p.ranked, [0, 1]);
        let (p, _) = parse_completion("1. 1. Spring\n2. Winter", &cands, &ParseRules::default());
        assert_eq!(p.ranked, [0, 1]);
    }

    fn titles(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("Movie Number {i}")).collect()
    }

    #[test]
    fn exact_permutation() {
        let t = titles(20);
        let refs: Vec<&str> = t.iter().map(String::as_str).collect();
        let order: Vec<usize> = (0..20).rev().collect();
        let raw: String = order.iter().map(|&i| format!("{}\n", t[i])).collect();
        let (p, _) = parse_completion(&raw, &refs, &ParseRules::default());
        assert_eq!(p.ranked, order);
        assert_eq!((p.n_hallucinated, p.n_missing), (0, 0));
        assert!(p.is_ok());
    }

    #[test]
    fn one_invented_title() {
        let t = titles(20);
        let refs: Vec<&str> = t.iter().map(String::as_str).collect();
        let mut lines: Vec<String> = t[..19].to_vec();
        lines.insert(4, "The Invented Sequel".into());
        let (p, _) = parse_completion(&lines.join("\n"), &refs, &ParseRules::default());
        assert_eq!(p.ranked.len(), 19);
        assert_eq!(p.n_hallucinated, 1);
        assert_eq!(p.n_missing, 1);
    }

    #[test]
    fn duplicate_lines_first_wins() {
        let refs = ["A", "B", "C"];
        let (p, trace) = parse_completion("B\nA\nB\nC", &refs, &ParseRules::default());
        assert_eq!(p.ranked, [1, 0, 2]);
        assert_eq!(p.n_hallucinated, 1);
        assert_eq!(trace[2].outcome, LineOutcome::Duplicate { candidate: 1 });
    }

    #[test]
    fn refusal_detection() {
        let rules = ParseRules::default();
        assert!(detect_refusal(
            "Sorry, but I cannot fulfill this request as it goes against OpenAI's use case policy.",
            &rules
        ));
        assert!(detect_refusal("GOES AGAINST OPENAI'S USE CASE POLICY", &rules));
        assert!(!detect_refusal("1. Saw II\n2. Hostel", &rules));
    }

    #[test]
    fn refusal_inside_a_title_is_conservative() {
        let mut t = titles(5);
        t[2] = "Goes Against OpenAI's Use Case Policy: The Movie".into();
        let refs: Vec<&str> = t.iter().map(String::as_str).collect();
        let raw = t.join("\n");
        let (p, _) = parse_completion(&raw, &refs, &ParseRules::default());
        assert_eq!(p.status, ParseStatus::SkippedRefusal);
        assert!(p.ranked.is_empty());
    }

    #[test]
    fn no_match_is_skipped_empty() {
        let (p, _) = parse_completion("nothing useful here", &["A", "B"], &ParseRules::default());
        assert_eq!(p.status, ParseStatus::SkippedEmpty);
        assert_eq!(p.n_missing, 2);
        let (p, _) = parse_completion("", &["A", "B"], &ParseRules::default());
        assert_eq!(p.status, ParseStatus::SkippedEmpty);
    }

    #[test]
    fn fuzzy_mode_is_opt_in() {
        let refs = ["Spider-Man 3", "The Dark Knight"];
        let raw = "The Dark Knigt\nSpider-Man 3";
        let (p, _) = parse_completion(raw, &refs, &ParseRules::default());
        assert_eq!(p.ranked, [0]);
        let rules = ParseRules {
            match_mode: MatchMode::Fuzzy,
            fuzzy_threshold: 0.9,
            ..ParseRules::default()
        };
        let (p, trace) = parse_completion(raw, &refs, &rules);
        assert_eq!(p.ranked, [1, 0]);
        assert!(matches!(trace[0].outcome, LineOutcome::Fuzzy { candidate: 1, .. }));
    }

    #[test]
    fn fuzzy_does_not_steal_taken_sequels() {
        let refs = ["Spider-Man 2", "Spider-Man 3"];
        let rules = ParseRules {
            match_mode: MatchMode::Fuzzy,
            fuzzy_threshold: 0.8,
            ..ParseRules::default()
        };
        let (p, _) = parse_completion("Spider-Man 3\nSpider-Man 3", &refs, &rules);
        assert_eq!(p.ranked, [1]);
        assert_eq!(p.n_hallucinated, 1);
    }

    #[test]
    fn rules_validation() {
        let rules = ParseRules {
            refusal_phrases: vec![],
            ..ParseRules::default()
        };
        assert!(rules.validate().is_err());
        let rules = ParseRules {
            fuzzy_threshold: 1.5,
            ..ParseRules::default()
        };
        assert!(rules.validate().is_err());
        ParseRules::default().validate().unwrap();
    }

    #[test]
    fn trace_renders() {
        let refs = ["A", "B", "C"];
        let (p, d) = parse_completion("1. B\nZ\n", &refs, &ParseRules::default());
        let text = Trace {
            parsed: &p,
            decisions: &d,
            candidate_titles: &refs,
        }
        .to_string();
        assert!(text.contains("matched #2 \"B\""));
        assert!(text.contains("no candidate, dropped"));
        assert!(text.contains("missing #1 \"A\""));
        assert!(text.contains("status=Ok ranked=1 hallucinated=1 missing=2"));
    }

    proptest! {
        #[test]
        fn render_then_parse_round_trips(perm in (1usize..=30).prop_flat_map(|m| Just((0..m).collect::<Vec<_>>()).prop_shuffle())) {
            let t = titles(perm.len());
            let refs: Vec<&str> = t.iter().map(String::as_str).collect();
            let raw: String = perm.iter().map(|&i| format!("{}\n", t[i])).collect();
            let (p, _) = parse_completion(&raw, &refs, &ParseRules::default());
            prop_assert_eq!(p.ranked, perm);
        }

        #[test]
        fn line_accounting(lines in proptest::collection::vec("[ a-d0-9.)*-]{0,8}", 0..25)) {
            let refs = ["a", "b", "c", "d 1", "1"];
            let raw = lines.join("\n");
            let (normalized, _) = normalize_output(&raw);
            let (p, _) = match_candidates(&normalized, &refs, &ParseRules::default());
            prop_assert_eq!(p.n_hallucinated + p.ranked.len(), normalized.len());
            prop_assert_eq!(p.n_missing, refs.len() - p.ranked.len());
            let mut sorted = p.ranked.clone();
            sorted.sort_unstable();
            sorted.dedup();
            prop_assert_eq!(sorted.len(), p.ranked.len());
        }
    }
}
