//! Per-user evaluation tasks: history, ground truth, negatives, shuffles.

use std::cmp::Reverse;
use std::collections::BTreeSet;
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::DomainDataset;
use crate::filtering::{CohortUser, CrossDomainCohort};
use crate::rng::{user_stream, StreamRng};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TaskGenError {
    #[error("invalid taskgen config: {0}")]
    InvalidConfig(String),
    #[error("user {user} has {found} distinct target purchases, need {needed}")]
    TooFewTargetPurchases { user: String, found: usize, needed: usize },
    #[error("user {user} has {found} source purchases before the cutoff, need {needed}")]
    ShortHistory { user: String, found: usize, needed: usize },
    #[error("user {user}: negative pool has {pool} items, need {needed}")]
    InsufficientPool { user: String, pool: usize, needed: usize },
    #[error("item {0} has no title")]
    MissingTitle(String),
    #[error("ground-truth title {0:?} leaked into the history")]
    Leakage(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TaskGenConfig {
    pub history_len: usize,
    pub candidate_size: usize,
    pub n_ground_truth: usize,
    pub n_repeats: usize,
    pub rng_seed: u64,
}

impl Default for TaskGenConfig {
    fn default() -> Self {
        Self {
            history_len: 30,
            candidate_size: 20,
            n_ground_truth: 3,
            n_repeats: 3,
            rng_seed: 0,
        }
    }
}

impl TaskGenConfig {
    pub fn validate(&self) -> Result<(), TaskGenError> {
        let fail = |m: String| Err(TaskGenError::InvalidConfig(m));
        if self.n_ground_truth == 0 {
            return fail("n_ground_truth must be >= 1".into());
        }
        if self.candidate_size <= self.n_ground_truth {
            return fail(format!(
                "candidate_size {} must exceed n_ground_truth {}",
                self.candidate_size, self.n_ground_truth
            ));
        }
        if self.n_repeats == 0 {
            return fail("n_repeats must be >= 1".into());
        }
        if self.history_len == 0 {
            return fail("history_len must be >= 1".into());
        }
        Ok(())
    }
}

/// A single evaluation unit.
///
/// `candidates` lists the ground truth first, then the negatives in sampled
/// order. Prompts never use this order directly: repeat `r` presents
/// `candidates[shuffles[r][0]], candidates[shuffles[r][1]], ...`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CdrTask {
    pub user_id: String,
    pub source_domain_id: String,
    pub target_domain_id: String,
    /// Source titles, most recent first.
    pub history: Vec<String>,
    pub history_items: Vec<String>,
    pub ground_truth: Vec<String>,
    pub cutoff: i64,
    pub candidates: Vec<String>,
    pub candidate_titles: Vec<String>,
    pub shuffles: Vec<Vec<usize>>,
    pub rng_seed: u64,
}

impl CdrTask {
    pub fn m(&self) -> usize {
        self.candidates.len()
    }

    /// Candidate indices (into `candidates`) that are ground truth.
    pub fn ground_truth_indices(&self) -> Vec<usize> {
        (0..self.ground_truth.len()).collect()
    }

    /// Titles in the order repeat `repeat` presents them.
    pub fn presented_titles(&self, repeat: usize) -> Vec<&str> {
        self.shuffles[repeat]
            .iter()
            .map(|&i| self.candidate_titles[i].as_str())
            .collect()
    }

    /// Ground-truth positions within repeat `repeat`'s presented order.
    pub fn presented_ground_truth(&self, repeat: usize) -> Vec<usize> {
        let n_gt = self.ground_truth.len();
        self.shuffles[repeat]
            .iter()
            .enumerate()
            .filter(|&(_, &c)| c < n_gt)
            .map(|(pos, _)| pos)
            .collect()
    }

    /// Structural invariants every generated task satisfies.
    pub fn check(&self, config: &TaskGenConfig) -> Result<(), String> {
        let m = self.candidates.len();
        if self.ground_truth.len() != config.n_ground_truth {
            return Err("wrong ground-truth count".into());
        }
        if m != config.candidate_size || self.candidate_titles.len() != m {
            return Err("wrong candidate count".into());
        }
        if self.candidates[..self.ground_truth.len()] != self.ground_truth[..] {
            return Err("ground truth must lead the candidate list".into());
        }
        let ids: BTreeSet<_> = self.candidates.iter().collect();
        if ids.len() != m {
            return Err("duplicate candidates".into());
        }
        if self.history.len() != config.history_len {
            return Err("wrong history length".into());
        }
        if self.shuffles.len() != config.n_repeats {
            return Err("wrong shuffle count".into());
        }
        for perm in &self.shuffles {
            let mut seen = vec![false; m];
            for &p in perm {
                if p >= m || std::mem::replace(&mut seen[p], true) {
                    return Err("shuffle is not a permutation".into());
                }
            }
            if perm.len() != m {
                return Err("shuffle is not a permutation".into());
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub items: Vec<String>,
    pub cutoff: i64,
}

/// The user's `n` most recent distinct target purchases.
///
/// Order is timestamp descending, ties broken by ascending item id. The
/// cutoff is the earliest timestamp among the selected purchases.
pub fn select_ground_truth(user: &CohortUser, n: usize) -> Result<GroundTruth, TaskGenError> {
    let mut events: Vec<_> = user.target.iter().collect();
    events.sort_by_key(|i| (Reverse(i.timestamp), i.item_id.as_str()));
    let mut items = Vec::with_capacity(n);
    let mut cutoff = i64::MAX;
    for event in events {
        if items.len() == n {
            break;
        }
        if items.contains(&event.item_id) {
            continue;
        }
        items.push(event.item_id.clone());
        cutoff = cutoff.min(event.timestamp);
    }
    if items.len() < n {
        return Err(TaskGenError::TooFewTargetPurchases {
            user: user.user_id.clone(),
            found: items.len(),
            needed: n,
        });
    }
    Ok(GroundTruth { items, cutoff })
}

/// Source item ids purchased strictly before `cutoff`, newest first,
/// truncated to `history_len`.
pub fn build_history(
    user: &CohortUser,
    cutoff: i64,
    history_len: usize,
) -> Result<Vec<String>, TaskGenError> {
    let mut before: Vec<_> = user.source.iter().filter(|i| i.timestamp < cutoff).collect();
    if before.len() < history_len {
        return Err(TaskGenError::ShortHistory {
            user: user.user_id.clone(),
            found: before.len(),
            needed: history_len,
        });
    }
    before.sort_by_key(|i| (Reverse(i.timestamp), i.item_id.as_str()));
    Ok(before
        .into_iter()
        .take(history_len)
        .map(|i| i.item_id.clone())
        .collect())
}

fn title_key(title: &str) -> String {
    title.to_lowercase()
}

/// Draw `count` negatives uniformly without replacement from the target
/// catalog, excluding everything the user bought there.
///
/// Items whose title collides (case-insensitively) with a ground-truth title
/// or an already drawn negative are passed over, so every candidate list is
/// unambiguous when matched back by title.
pub fn sample_negatives(
    target: &DomainDataset,
    user: &CohortUser,
    ground_truth: &[String],
    count: usize,
    rng: &mut StreamRng,
) -> Result<Vec<String>, TaskGenError> {
    let bought: BTreeSet<&str> = user.target.iter().map(|i| i.item_id.as_str()).collect();
    let mut pool: Vec<&str> = target
        .catalog
        .keys()
        .map(String::as_str)
        .filter(|id| !bought.contains(id))
        .collect();
    if pool.len() < count {
        return Err(TaskGenError::InsufficientPool {
            user: user.user_id.clone(),
            pool: pool.len(),
            needed: count,
        });
    }
    let mut taken_titles: BTreeSet<String> = ground_truth
        .iter()
        .filter_map(|id| target.title(id))
        .map(title_key)
        .collect();
    let mut out = Vec::with_capacity(count);
    // lazy Fisher-Yates: position k receives a uniform draw from the rest
    for k in 0..pool.len() {
        if out.len() == count {
            break;
        }
        let j = rng.random_range(k..pool.len());
        pool.swap(k, j);
        let id = pool[k];
        let key = title_key(target.title(id).unwrap_or(id));
        if taken_titles.insert(key) {
            out.push(id.to_string());
        }
    }
    if out.len() < count {
        return Err(TaskGenError::InsufficientPool {
            user: user.user_id.clone(),
            pool: out.len(),
            needed: count,
        });
    }
    Ok(out)
}

/// `n_repeats` independent uniform permutations of `0..m`.
pub fn bootstrap_shuffle(m: usize, n_repeats: usize, rng: &mut StreamRng) -> Vec<Vec<usize>> {
    (0..n_repeats)
        .map(|_| {
            let mut perm: Vec<usize> = (0..m).collect();
            perm.shuffle(rng);
            perm
        })
        .collect()
}

/// Build the task for one cohort user.
pub fn build_task(
    cohort: &CrossDomainCohort,
    user: &CohortUser,
    config: &TaskGenConfig,
) -> Result<CdrTask, TaskGenError> {
    let gt = select_ground_truth(user, config.n_ground_truth)?;
    let history_items = build_history(user, gt.cutoff, config.history_len)?;
    let title = |ds: &DomainDataset, id: &str| {
        ds.title(id)
            .map(str::to_string)
            .ok_or_else(|| TaskGenError::MissingTitle(id.to_string()))
    };
    let history = history_items
        .iter()
        .map(|id| title(&cohort.source, id))
        .collect::<Result<Vec<_>, _>>()?;

    let mut rng = user_stream(config.rng_seed, &user.user_id);
    let negatives = sample_negatives(
        &cohort.target,
        user,
        &gt.items,
        config.candidate_size - config.n_ground_truth,
        &mut rng,
    )?;
    let candidates: Vec<String> = gt.items.iter().cloned().chain(negatives).collect();
    let candidate_titles = candidates
        .iter()
        .map(|id| title(&cohort.target, id))
        .collect::<Result<Vec<_>, _>>()?;

    let gt_titles: BTreeSet<String> = candidate_titles[..config.n_ground_truth]
        .iter()
        .map(|t| title_key(t))
        .collect();
    if let Some(leak) = history.iter().find(|t| gt_titles.contains(&title_key(t))) {
        return Err(TaskGenError::Leakage(leak.clone()));
    }

    let shuffles = bootstrap_shuffle(candidates.len(), config.n_repeats, &mut rng);
    Ok(CdrTask {
        user_id: user.user_id.clone(),
        source_domain_id: cohort.source.domain_id.clone(),
        target_domain_id: cohort.target.domain_id.clone(),
        history,
        history_items,
        ground_truth: gt.items,
        cutoff: gt.cutoff,
        candidates,
        candidate_titles,
        shuffles,
        rng_seed: config.rng_seed,
    })
}

/// A user for whom no task could be built.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedUser {
    pub user_id: String,
    pub reason: String,
}

/// Build tasks for `users` (a subset of the cohort, in the given order).
/// Work is parallel per user; the output order follows `users`.
pub fn generate_tasks(
    cohort: &CrossDomainCohort,
    users: &[&CohortUser],
    config: &TaskGenConfig,
) -> Result<(Vec<CdrTask>, Vec<SkippedUser>), TaskGenError> {
    config.validate()?;
    let results: Vec<_> = users
        .par_iter()
        .map(|u| (u.user_id.clone(), build_task(cohort, u, config)))
        .collect();
    let mut tasks = Vec::new();
    let mut skipped = Vec::new();
    for (user_id, result) in results {
        match result {
            Ok(task) => tasks.push(task),
            Err(e) => {
                log::warn!("skipping {user_id}: {e}");
                skipped.push(SkippedUser {
                    user_id,
                    reason: e.to_string(),
                })
            }
        }
    }
    Ok((tasks, skipped))
}

/// One task per line.
pub fn write_tasks_jsonl<W: Write>(tasks: &[CdrTask], mut out: W) -> std::io::Result<()> {
    for task in tasks {
        serde_json::to_writer(&mut out, task)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

pub fn read_tasks_jsonl<R: BufRead>(input: R) -> std::io::Result<Vec<CdrTask>> {
    let mut tasks = Vec::new();
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        tasks.push(serde_json::from_str(&line)?);
    }
    Ok(tasks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Interaction;
    use crate::rng::substream;

    fn user(source: &[(&str, i64)], target: &[(&str, i64)]) -> CohortUser {
        let mk = |rows: &[(&str, i64)]| {
            let mut v: Vec<_> = rows
                .iter()
                .map(|&(i, t)| Interaction::new("u", i, 5.0, t).unwrap())
                .collect();
            v.sort_by(|a, b| a.order_key().cmp(&b.order_key()));
            v
        };
        CohortUser {
            user_id: "u".into(),
            source: mk(source),
            target: mk(target),
        }
    }

    #[test]
    fn exactly_three_target_purchases() {
        let u = user(&[], &[("a", 4), ("b", 9), ("c", 7)]);
        let gt = select_ground_truth(&u, 3).unwrap();
        assert_eq!(gt.items, ["b", "c", "a"]);
        assert_eq!(gt.cutoff, 4);
    }

    #[test]
    fn most_recent_three_of_five() {
        let u = user(&[], &[("t1", 1), ("t2", 2), ("t3", 3), ("t4", 4), ("t5", 5)]);
        let gt = select_ground_truth(&u, 3).unwrap();
        assert_eq!(gt.items, ["t5", "t4", "t3"]);
        assert_eq!(gt.cutoff, 3);
    }

    #[test]
    fn tie_at_third_position_prefers_smaller_id() {
        let u = user(&[], &[("a", 9), ("b", 8), ("z", 5), ("m", 5), ("q", 1)]);
        let gt = select_ground_truth(&u, 3).unwrap();
        assert_eq!(gt.items, ["a", "b", "m"]);
    }

    #[test]
    fn fewer_than_three_target_purchases() {
        let u = user(&[], &[("a", 1), ("b", 2), ("a", 3)]);
        assert!(matches!(
            select_ground_truth(&u, 3),
            Err(TaskGenError::TooFewTargetPurchases { found: 2, .. })
        ));
    }

    #[test]
    fn history_newest_first_and_truncated() {
        let src: Vec<(String, i64)> = (0..45).map(|t| (format!("s{t:02}"), t)).collect();
        let rows: Vec<(&str, i64)> = src.iter().map(|(i, t)| (i.as_str(), *t)).collect();
        let u = user(&rows, &[]);
        let h = build_history(&u, 100, 30).unwrap();
        let expected: Vec<String> = (15..45).rev().map(|t| format!("s{t:02}")).collect();
        assert_eq!(h, expected);

        let h = build_history(&u, 30, 30).unwrap();
        assert_eq!(h.first().unwrap(), "s29");
        assert_eq!(h.last().unwrap(), "s00");
    }

    #[test]
    fn history_excludes_at_and_after_cutoff() {
        let u = user(&[("a", 1), ("b", 2), ("c", 3), ("d", 4)], &[]);
        let h = build_history(&u, 3, 2).unwrap();
        assert_eq!(h, ["b", "a"]);
        assert!(matches!(
            build_history(&u, 3, 3),
            Err(TaskGenError::ShortHistory { found: 2, .. })
        ));
    }

    fn target_catalog(n: usize) -> DomainDataset {
        let mut d = DomainDataset::new("t", "g");
        for k in 0..n {
            d.catalog.insert(format!("i{k:02}"), format!("Title {k}"));
        }
        d
    }

    #[test]
    fn exact_pool_returned_in_full() {
        let d = target_catalog(8);
        let u = user(&[], &[("i00", 1), ("i01", 2), ("i02", 3)]);
        let gt: Vec<String> = vec!["i00".into(), "i01".into(), "i02".into()];
        let mut rng = substream(1, &["t"]);
        let mut neg = sample_negatives(&d, &u, &gt, 5, &mut rng).unwrap();
        neg.sort();
        assert_eq!(neg, ["i03", "i04", "i05", "i06", "i07"]);
        assert!(matches!(
            sample_negatives(&d, &u, &gt, 6, &mut rng),
            Err(TaskGenError::InsufficientPool { pool: 5, .. })
        ));
    }

    #[test]
    fn negatives_exclude_every_target_purchase() {
        let d = target_catalog(30);
        let u = user(&[], &[("i00", 1), ("i05", 2), ("i01", 3), ("i02", 4)]);
        let gt: Vec<String> = vec!["i02".into(), "i01".into(), "i05".into()];
        for seed in 0..50 {
            let mut rng = substream(seed, &["t"]);
            let neg = sample_negatives(&d, &u, &gt, 17, &mut rng).unwrap();
            assert!(!neg.iter().any(|n| ["i00", "i01", "i02", "i05"].contains(&n.as_str())));
            assert_eq!(neg.iter().collect::<BTreeSet<_>>().len(), 17);
        }
    }

    #[test]
    fn negatives_deterministic_per_seed() {
        let d = target_catalog(40);
        let u = user(&[], &[("i00", 1)]);
        let a = sample_negatives(&d, &u, &[], 10, &mut substream(3, &["x"])).unwrap();
        let b = sample_negatives(&d, &u, &[], 10, &mut substream(3, &["x"])).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn negatives_skip_title_collisions() {
        let mut d = target_catalog(6);
        d.catalog.insert("dup".into(), "title 1".into());
        let u = user(&[], &[("i01", 1)]);
        for seed in 0..30 {
            let neg =
                sample_negatives(&d, &u, &["i01".to_string()], 5, &mut substream(seed, &["c"])).unwrap();
            assert!(!neg.contains(&"dup".to_string()));
        }
    }

    #[test]
    fn negative_sampling_is_uniform() {
        // 10-item pool, draw 3 per trial, 10k trials: each item expected
        // 3000 times, sd sqrt(10000 * 0.3 * 0.7) ~= 45.8.
        let d = target_catalog(10);
        let u = user(&[], &[]);
        let mut rng = substream(99, &["uniform"]);
        let mut counts = [0usize; 10];
        for _ in 0..10_000 {
            for id in sample_negatives(&d, &u, &[], 3, &mut rng).unwrap() {
                counts[id[1..].parse::<usize>().unwrap()] += 1;
            }
        }
        let expected = 3000.0;
        let sd = (10_000.0f64 * 0.3 * 0.7).sqrt();
        let mut chi2 = 0.0;
        for &c in &counts {
            assert!((c as f64 - expected).abs() < 3.0 * sd, "count {c}");
            chi2 += (c as f64 - expected).powi(2) / expected;
        }
        // 9 dof, p = 0.001 critical value 27.88
        assert!(chi2 < 27.88, "chi2 {chi2}");
    }

    #[test]
    fn shuffles_are_permutations_and_reproducible() {
        let a = bootstrap_shuffle(20, 3, &mut substream(5, &["s"]));
        let b = bootstrap_shuffle(20, 3, &mut substream(5, &["s"]));
        assert_eq!(a, b);
        for p in &a {
            let mut s = p.clone();
            s.sort_unstable();
            assert_eq!(s, (0..20).collect::<Vec<_>>());
        }
        let one = bootstrap_shuffle(20, 1, &mut substream(5, &["s"]));
        assert_eq!(one[0], a[0]);
    }

    #[test]
    fn shuffles_have_no_positional_bias() {
        let mut rng = substream(2024, &["bias"]);
        let mut pos_sum = [0usize; 20];
        let perms = bootstrap_shuffle(20, 6000, &mut rng);
        for perm in &perms {
            for (pos, &item) in perm.iter().enumerate() {
                pos_sum[item] += pos;
            }
        }
        for s in pos_sum {
            let mean = s as f64 / 6000.0;
            assert!((mean - 9.5).abs() < 0.3, "mean position {mean}");
        }
    }

    #[test]
    fn config_validation() {
        let bad = TaskGenConfig {
            candidate_size: 3,
            ..TaskGenConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TaskGenConfig {
            n_repeats: 0,
            ..TaskGenConfig::default()
        };
        assert!(bad.validate().is_err());
        TaskGenConfig::default().validate().unwrap();
    }
}
