//! Guidance generation and four-section prompt assembly.
//!
//! A prompt is the concatenation, in this order, of the task domain
//! adaptation, the conditional information (purchase history), the
//! recommendation guidance and the task description. The two middle
//! sections can be switched off for ablations; when off they are empty and
//! leave no trace in the rendered text.
//!
//! Wording lives in plain-text templates (see `templates/`) with the
//! placeholders `{SOURCE}`, `{TARGET}`, `{HISTORY}`, `{GUIDANCE}`,
//! `{CANDIDATES}` and `{COUNT}`.

use std::collections::HashMap;
use std::path::Path;
use std::sync::RwLock;

use serde::{Deserialize, Serialize};

use crate::llm::{CompletionRequest, Gateway};
use crate::taskgen::CdrTask;

#[derive(Debug, thiserror::Error)]
pub enum PromptError {
    #[error("cannot read template {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("template {name} is missing placeholder {placeholder}")]
    MissingPlaceholder { name: &'static str, placeholder: &'static str },
    #[error("repeat {repeat} out of range: task has {available} shuffles")]
    RepeatOutOfRange { repeat: usize, available: usize },
    #[error("guidance requested but none supplied")]
    MissingGuidance,
    #[error("prompt is {len} characters, over the {cap}-character budget")]
    OverBudget { len: usize, cap: usize },
}

/// Section templates. Defaults are compiled in; any file present in a
/// template directory overrides its default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptTemplates {
    pub adaptation: String,
    pub conditional: String,
    pub guidance: String,
    pub task: String,
    pub meta_guidance: String,
}

impl Default for PromptTemplates {
    fn default() -> Self {
        Self {
            adaptation: include_str!("../templates/adaptation.txt").into(),
            conditional: include_str!("../templates/conditional.txt").into(),
            guidance: include_str!("../templates/guidance.txt").into(),
            task: include_str!("../templates/task.txt").into(),
            meta_guidance: include_str!("../templates/meta_guidance.txt").into(),
        }
    }
}

impl PromptTemplates {
    /// Load `adaptation.txt`, `conditional.txt`, `guidance.txt`, `task.txt`
    /// and `meta_guidance.txt` from `dir`, keeping defaults for absent files.
    pub fn from_dir(dir: &Path) -> Result<Self, PromptError> {
        let mut t = Self::default();
        for (name, slot) in [
            ("adaptation.txt", &mut t.adaptation),
            ("conditional.txt", &mut t.conditional),
            ("guidance.txt", &mut t.guidance),
            ("task.txt", &mut t.task),
            ("meta_guidance.txt", &mut t.meta_guidance),
        ] {
            let path = dir.join(name);
            if path.exists() {
                *slot = std::fs::read_to_string(&path).map_err(|source| PromptError::Io {
                    path: path.display().to_string(),
                    source,
                })?;
            }
        }
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<(), PromptError> {
        let required: [(&'static str, &str, &[&'static str]); 4] = [
            ("conditional", &self.conditional, &["{HISTORY}"]),
            ("guidance", &self.guidance, &["{GUIDANCE}"]),
            ("task", &self.task, &["{CANDIDATES}"]),
            ("meta_guidance", &self.meta_guidance, &["{SOURCE}", "{TARGET}"]),
        ];
        for (name, text, placeholders) in required {
            for &placeholder in placeholders {
                if !text.contains(placeholder) {
                    return Err(PromptError::MissingPlaceholder { name, placeholder });
                }
            }
        }
        Ok(())
    }
}

/// Single-pass placeholder substitution; substituted text is never
/// rescanned, so titles containing braces are safe.
pub fn fill(template: &str, values: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len() * 2);
    let mut rest = template;
    while let Some(start) = rest.find('{') {
        out.push_str(&rest[..start]);
        let after = &rest[start..];
        let replaced = after.find('}').and_then(|end| {
            let name = &after[1..end];
            values
                .iter()
                .find(|(k, _)| *k == name)
                .map(|(_, v)| (v, end + 1))
        });
        match replaced {
            Some((value, len)) => {
                out.push_str(value);
                rest = &after[len..];
            }
            None => {
                out.push('{');
                rest = &after[1..];
            }
        }
    }
    out.push_str(rest);
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptFlags {
    pub include_history: bool,
    pub include_guidance: bool,
}

impl PromptFlags {
    pub const BASELINE: PromptFlags = PromptFlags {
        include_history: false,
        include_guidance: false,
    };
    pub const FULL: PromptFlags = PromptFlags {
        include_history: true,
        include_guidance: true,
    };
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub task_domain_adaptation: String,
    pub conditional_information: String,
    pub recommendation_guidance: String,
    pub task_description: String,
    pub include_history: bool,
    pub include_guidance: bool,
    /// Numbered title list, in the repeat's shuffled order.
    pub candidate_rendering: String,
}

impl PromptBundle {
    /// Nonempty sections joined by blank lines.
    pub fn render(&self) -> String {
        [
            &self.task_domain_adaptation,
            &self.conditional_information,
            &self.recommendation_guidance,
            &self.task_description,
        ]
        .into_iter()
        .filter(|s| !s.is_empty())
        .map(String::as_str)
        .collect::<Vec<_>>()
        .join("\n\n")
    }
}

/// `'A', 'B', 'C'`
pub fn render_history(titles: &[String]) -> String {
    titles.iter().map(|t| format!("'{t}'")).collect::<Vec<_>>().join(", ")
}

/// `1. A\n2. B\n...`
pub fn render_candidates(titles: &[&str]) -> String {
    titles
        .iter()
        .enumerate()
        .map(|(i, t)| format!("{}. {t}", i + 1))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Assemble the prompt for one task and repeat. `guidance` is the full
/// guidance sentence (see [`make_guidance`]).
pub fn build_prompt(
    task: &CdrTask,
    repeat: usize,
    guidance: Option<&str>,
    flags: PromptFlags,
    templates: &PromptTemplates,
    max_chars: usize,
) -> Result<PromptBundle, PromptError> {
    if repeat >= task.shuffles.len() {
        return Err(PromptError::RepeatOutOfRange {
            repeat,
            available: task.shuffles.len(),
        });
    }
    let source = task.source_domain_id.as_str();
    let target = task.target_domain_id.as_str();
    let presented = task.presented_titles(repeat);
    let candidates = render_candidates(&presented);
    let count = presented.len().to_string();
    let history = render_history(&task.history);
    let vars = [
        ("SOURCE", source),
        ("TARGET", target),
        ("HISTORY", history.as_str()),
        ("CANDIDATES", candidates.as_str()),
        ("COUNT", count.as_str()),
    ];
    let section = |template: &str| fill(template, &vars).trim().to_string();

    let recommendation_guidance = if flags.include_guidance {
        guidance.ok_or(PromptError::MissingGuidance)?.trim().to_string()
    } else {
        String::new()
    };
    let bundle = PromptBundle {
        task_domain_adaptation: section(&templates.adaptation),
        conditional_information: if flags.include_history {
            section(&templates.conditional)
        } else {
            String::new()
        },
        recommendation_guidance,
        task_description: section(&templates.task),
        include_history: flags.include_history,
        include_guidance: flags.include_guidance,
        candidate_rendering: candidates,
    };
    let len = bundle.render().chars().count();
    if len > max_chars {
        return Err(PromptError::OverBudget { len, cap: max_chars });
    }
    Ok(bundle)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceRequest {
    pub source_domain_id: String,
    pub target_domain_id: String,
    pub meta_prompt_template: String,
}

impl GuidanceRequest {
    pub fn new(source: &str, target: &str, templates: &PromptTemplates) -> Self {
        Self {
            source_domain_id: source.into(),
            target_domain_id: target.into(),
            meta_prompt_template: templates.meta_guidance.clone(),
        }
    }

    pub fn meta_prompt(&self) -> Result<String, PromptError> {
        for placeholder in ["{SOURCE}", "{TARGET}"] {
            if !self.meta_prompt_template.contains(placeholder) {
                return Err(PromptError::MissingPlaceholder {
                    name: "meta_guidance",
                    placeholder,
                });
            }
        }
        Ok(fill(
            &self.meta_prompt_template,
            &[("SOURCE", &self.source_domain_id), ("TARGET", &self.target_domain_id)],
        )
        .trim()
        .to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Guidance {
    pub text: String,
    pub features: String,
    /// True when the provider failed and the static fallback was used.
    pub fallback: bool,
}

pub const FALLBACK_FEATURES: &str = "genre, themes, popular franchises";

/// Guidance per (source, target, model), generated once.
#[derive(Default)]
pub struct GuidanceCache {
    entries: RwLock<HashMap<(String, String, String), Guidance>>,
}

impl GuidanceCache {
    pub fn len(&self) -> usize {
        self.entries.read().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn clean_features(raw: &str) -> Option<String> {
    let first = raw.split("\n\n").map(str::trim).find(|p| !p.is_empty())?;
    let flat = first.split_whitespace().collect::<Vec<_>>().join(" ");
    let flat = flat.trim_end_matches('.').trim();
    (!flat.is_empty()).then(|| flat.to_string())
}

/// Ask the model for the common features of a domain pair and wrap them in
/// the guidance template. Provider failures fall back to a static feature
/// list, flagged in the result.
pub fn make_guidance(
    request: &GuidanceRequest,
    gateway: &Gateway,
    cache: &GuidanceCache,
    templates: &PromptTemplates,
) -> Result<Guidance, PromptError> {
    let key = (
        request.source_domain_id.clone(),
        request.target_domain_id.clone(),
        gateway.model().to_string(),
    );
    if let Some(hit) = cache.entries.read().unwrap().get(&key) {
        return Ok(hit.clone());
    }
    let prompt = request.meta_prompt()?;
    let generated = match gateway.complete(&CompletionRequest::plain(&prompt)) {
        Ok(c) => clean_features(&c.raw_text),
        Err(e) => {
            log::warn!("guidance generation failed ({e}); using the fallback");
            None
        }
    };
    let (features, fallback) = match generated {
        Some(f) => (f, false),
        None => (FALLBACK_FEATURES.to_string(), true),
    };
    let guidance = Guidance {
        text: fill(&templates.guidance, &[("GUIDANCE", &features)]).trim().to_string(),
        features,
        fallback,
    };
    cache
        .entries
        .write()
        .unwrap()
        .entry(key)
        .or_insert_with(|| guidance.clone());
    Ok(guidance)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::{LlmError, OracleProvider, Provider};
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Arc;

    pub(crate) fn task() -> CdrTask {
        let titles: Vec<String> = (0..20).map(|i| format!("Game {i}")).collect();
        CdrTask {
            user_id: "u1".into(),
            source_domain_id: "Movies & TV".into(),
            target_domain_id: "Video Games".into(),
            history: vec!["Final Destination 2".into(), "Hostel".into(), "Spider-Man 3".into()],
            history_items: vec!["m1".into(), "m2".into(), "m3".into()],
            ground_truth: vec!["g0".into(), "g1".into(), "g2".into()],
            cutoff: 10,
            candidates: (0..20).map(|i| format!("g{i}")).collect(),
            candidate_titles: titles,
            shuffles: vec![(0..20).rev().collect(), (0..20).collect()],
            rng_seed: 0,
        }
    }

    const GUIDE: &str = "You can consider factors such as genre.";

    #[test]
    fn baseline_has_only_adaptation_and_task() {
        let t = PromptTemplates::default();
        let b = build_prompt(&task(), 0, None, PromptFlags::BASELINE, &t, 100_000).unwrap();
        assert!(b.conditional_information.is_empty());
        assert!(b.recommendation_guidance.is_empty());
        assert_eq!(
            b.render(),
            format!("{}\n\n{}", b.task_domain_adaptation, b.task_description)
        );
        assert!(!b.render().contains("Hostel"));
    }

    #[test]
    fn history_newest_first_quoted() {
        let t = PromptTemplates::default();
        let flags = PromptFlags {
            include_history: true,
            include_guidance: false,
        };
        let b = build_prompt(&task(), 0, None, flags, &t, 100_000).unwrap();
        assert!(b
            .conditional_information
            .contains("'Final Destination 2', 'Hostel', 'Spider-Man 3'"));
    }

    #[test]
    fn candidates_follow_the_shuffle() {
        let t = PromptTemplates::default();
        let b = build_prompt(&task(), 0, None, PromptFlags::BASELINE, &t, 100_000).unwrap();
        assert!(b.candidate_rendering.starts_with("1. Game 19\n2. Game 18\n"));
        assert!(b.task_description.contains("1. Game 19"));
        assert!(b.task_description.contains("all 20 candidate items"));
        let b1 = build_prompt(&task(), 1, None, PromptFlags::BASELINE, &t, 100_000).unwrap();
        assert!(b1.candidate_rendering.starts_with("1. Game 0\n"));
    }

    #[test]
    fn ground_truth_is_rendered_like_negatives() {
        let t = PromptTemplates::default();
        let b = build_prompt(&task(), 1, None, PromptFlags::BASELINE, &t, 100_000).unwrap();
        for line in b.candidate_rendering.lines() {
            let (num, title) = line.split_once(". ").unwrap();
            assert!(num.parse::<usize>().is_ok());
            assert!(title.starts_with("Game "));
        }
    }

    #[test]
    fn rendering_is_deterministic() {
        let t = PromptTemplates::default();
        let a = build_prompt(&task(), 1, Some(GUIDE), PromptFlags::FULL, &t, 100_000).unwrap();
        let b = build_prompt(&task(), 1, Some(GUIDE), PromptFlags::FULL, &t, 100_000).unwrap();
        assert_eq!(a.render(), b.render());
    }

    #[test]
    fn four_variants_differ_only_in_their_sections() {
        let t = PromptTemplates::default();
        let mut rendered = Vec::new();
        for h in [false, true] {
            for g in [false, true] {
                let flags = PromptFlags {
                    include_history: h,
                    include_guidance: g,
                };
                let b = build_prompt(&task(), 0, Some(GUIDE), flags, &t, 100_000).unwrap();
                assert_eq!(b.conditional_information.is_empty(), !h);
                assert_eq!(b.recommendation_guidance.is_empty(), !g);
                let full = build_prompt(&task(), 0, Some(GUIDE), PromptFlags::FULL, &t, 100_000).unwrap();
                assert_eq!(b.task_domain_adaptation, full.task_domain_adaptation);
                assert_eq!(b.task_description, full.task_description);
                rendered.push(b.render());
            }
        }
        rendered.sort();
        rendered.dedup();
        assert_eq!(rendered.len(), 4);
    }

    #[test]
    fn section_order_is_fixed() {
        let t = PromptTemplates::default();
        let b = build_prompt(&task(), 0, Some(GUIDE), PromptFlags::FULL, &t, 100_000).unwrap();
        let text = b.render();
        let pos = |s: &str| text.find(s).unwrap();
        assert!(pos(&b.task_domain_adaptation) < pos(&b.conditional_information));
        assert!(pos(&b.conditional_information) < pos(GUIDE));
        assert!(pos(GUIDE) < pos(&b.task_description));
    }

    #[test]
    fn over_budget_is_an_error() {
        let t = PromptTemplates::default();
        let err = build_prompt(&task(), 0, None, PromptFlags::BASELINE, &t, 50).unwrap_err();
        assert!(matches!(err, PromptError::OverBudget { cap: 50, .. }));
        assert!(matches!(
            build_prompt(&task(), 2, None, PromptFlags::BASELINE, &t, 100_000),
            Err(PromptError::RepeatOutOfRange { .. })
        ));
        assert!(matches!(
            build_prompt(&task(), 0, None, PromptFlags::FULL, &t, 100_000),
            Err(PromptError::MissingGuidance)
        ));
    }

    #[test]
    fn fill_is_single_pass() {
        assert_eq!(
            fill("{A} and {B} {C}", &[("A", "{B}"), ("B", "x")]),
            "{B} and x {C}"
        );
        assert_eq!(fill("{unclosed", &[("A", "1")]), "{unclosed");
    }

    struct Scripted {
        reply: Result<String, LlmError>,
        calls: AtomicUsize,
    }

    impl Provider for Scripted {
        fn complete(&self, _: &CompletionRequest<'_>) -> Result<String, LlmError> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            self.reply.clone()
        }
    }

    #[test]
    fn guidance_embeds_model_features() {
        let t = PromptTemplates::default();
        let p = Arc::new(Scripted {
            reply: Ok("genre, themes, and popular franchises.".into()),
            calls: AtomicUsize::new(0),
        });
        let g = Gateway::new(p.clone(), "m", 0.0);
        let cache = GuidanceCache::default();
        let req = GuidanceRequest::new("Movies & TV", "Video Games", &t);
        let out = make_guidance(&req, &g, &cache, &t).unwrap();
        assert!(!out.fallback);
        assert_eq!(
            out.text,
            "You can consider factors such as genre, themes, and popular franchises, or other feature connections and similarities between domains as information augmentation."
        );
        make_guidance(&req, &g, &cache, &t).unwrap();
        assert_eq!(p.calls.load(Ordering::SeqCst), 1);
        assert_eq!(cache.len(), 1);
    }

    #[test]
    fn guidance_falls_back_when_provider_is_down() {
        let t = PromptTemplates::default();
        let p = Arc::new(Scripted {
            reply: Err(LlmError::Http {
                status: 401,
                body: "denied".into(),
            }),
            calls: AtomicUsize::new(0),
        });
        let g = Gateway::new(p, "m", 0.0);
        let req = GuidanceRequest::new("Movies & TV", "Video Games", &t);
        let out = make_guidance(&req, &g, &GuidanceCache::default(), &t).unwrap();
        assert!(out.fallback);
        assert_eq!(
            out.text,
            "You can consider factors such as genre, themes, popular franchises, or other feature connections and similarities between domains as information augmentation."
        );
    }

    #[test]
    fn meta_prompt_names_both_domains() {
        let t = PromptTemplates::default();
        let req = GuidanceRequest::new("CD & Vinyl", "Movies & TV", &t);
        let p = req.meta_prompt().unwrap();
        assert!(p.contains("CD & Vinyl") && p.contains("Movies & TV"));
        let bad = GuidanceRequest {
            meta_prompt_template: "only {SOURCE}".into(),
            ..req
        };
        assert!(bad.meta_prompt().is_err());
        let g = Gateway::new(Arc::new(OracleProvider), "oracle", 0.0);
        assert!(make_guidance(&bad, &g, &GuidanceCache::default(), &t).is_err());
    }

    #[test]
    fn template_dir_overrides() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("adaptation.txt"), "Custom {TARGET} intro").unwrap();
        let t = PromptTemplates::from_dir(dir.path()).unwrap();
        assert_eq!(t.adaptation, "Custom {TARGET} intro");
        assert_eq!(t.task, PromptTemplates::default().task);
        std::fs::write(dir.path().join("task.txt"), "no candidates here").unwrap();
        assert!(PromptTemplates::from_dir(dir.path()).is_err());
    }
}
