//! The four-stage filter that turns two domain datasets into a cohort of
//! users active in both.
//!
//! Stage order is fixed: rating → active users/items → common users →
//! history length. [`run_pipeline`] applies all four and records survivor
//! counts after each stage.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::corpus::{DomainDataset, Interaction};
use crate::taskgen::select_ground_truth;

#[derive(Debug, thiserror::Error)]
pub enum FilterError {
    #[error("invalid filter config: {0}")]
    InvalidConfig(String),
    #[error("csv export failed: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterConfig {
    pub rating_floor: f64,
    /// Users need strictly more purchases than this.
    pub min_user_purchases: usize,
    /// Items need strictly more distinct buyers than this.
    pub min_item_buyers: usize,
    /// Minimum number of source purchases before the ground-truth cutoff.
    pub history_len_threshold: usize,
    pub n_ground_truth: usize,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            rating_floor: 5.0,
            min_user_purchases: 20,
            min_item_buyers: 10,
            history_len_threshold: 30,
            n_ground_truth: 3,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<(), FilterError> {
        if !(1.0..=5.0).contains(&self.rating_floor) {
            return Err(FilterError::InvalidConfig(format!(
                "rating_floor {} outside [1, 5]",
                self.rating_floor
            )));
        }
        if self.min_user_purchases == 0
            || self.min_item_buyers == 0
            || self.history_len_threshold == 0
            || self.n_ground_truth == 0
        {
            return Err(FilterError::InvalidConfig("thresholds must be >= 1".into()));
        }
        Ok(())
    }
}

/// One common user's interactions in both domains, each sorted ascending by
/// `(timestamp, item_id)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortUser {
    pub user_id: String,
    pub source: Vec<Interaction>,
    pub target: Vec<Interaction>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossDomainCohort {
    pub source: DomainDataset,
    pub target: DomainDataset,
    /// Sorted by user id.
    pub users: Vec<CohortUser>,
}

impl CrossDomainCohort {
    pub fn user_ids(&self) -> Vec<&str> {
        self.users.iter().map(|u| u.user_id.as_str()).collect()
    }

    pub fn is_empty(&self) -> bool {
        self.users.is_empty()
    }

    /// Audit export: `user_id,domain,item_id,timestamp`, one row per
    /// interaction, source rows before target rows for each user.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), FilterError> {
        let mut csv = csv::Writer::from_writer(writer);
        csv.write_record(["user_id", "domain", "item_id", "timestamp"])?;
        for user in &self.users {
            for (domain, seq) in [(&self.source.domain_id, &user.source), (&self.target.domain_id, &user.target)] {
                for i in seq {
                    csv.write_record([&user.user_id, domain, &i.item_id, &i.timestamp.to_string()])?;
                }
            }
        }
        csv.flush()?;
        Ok(())
    }
}

/// Keep interactions rated at or above the floor.
pub fn filter_rating(dataset: &DomainDataset, config: &FilterConfig) -> DomainDataset {
    dataset.with_interactions(
        dataset
            .interactions
            .iter()
            .filter(|i| i.rating >= config.rating_floor)
            .cloned()
            .collect(),
    )
}

/// Single-pass activity filter.
///
/// User purchase counts and item buyer counts are both measured on the
/// input; an interaction survives when its user and its item both clear
/// their (strict) thresholds. This is not iterated to a fixed point, so the
/// output may contain users or items that would fail a second pass.
pub fn filter_active(dataset: &DomainDataset, config: &FilterConfig) -> DomainDataset {
    let mut user_counts: BTreeMap<&str, usize> = BTreeMap::new();
    let mut buyers: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
    for i in &dataset.interactions {
        *user_counts.entry(&i.user_id).or_default() += 1;
        buyers.entry(&i.item_id).or_default().insert(&i.user_id);
    }
    let users: BTreeSet<&str> = user_counts
        .into_iter()
        .filter(|&(_, n)| n > config.min_user_purchases)
        .map(|(u, _)| u)
        .collect();
    let items: BTreeSet<&str> = buyers
        .into_iter()
        .filter(|(_, b)| b.len() > config.min_item_buyers)
        .map(|(i, _)| i)
        .collect();
    let mut out = dataset.with_interactions(
        dataset
            .interactions
            .iter()
            .filter(|i| users.contains(i.user_id.as_str()) && items.contains(i.item_id.as_str()))
            .cloned()
            .collect(),
    );
    out.catalog.retain(|id, _| items.contains(id.as_str()));
    out
}

fn sorted_by_user(interactions: &[Interaction]) -> BTreeMap<String, Vec<Interaction>> {
    let mut map: BTreeMap<String, Vec<Interaction>> = BTreeMap::new();
    for i in interactions {
        map.entry(i.user_id.clone()).or_default().push(i.clone());
    }
    for seq in map.values_mut() {
        seq.sort_by(|a, b| a.order_key().cmp(&b.order_key()));
    }
    map
}

/// Restrict both domains to users present in both.
pub fn filter_common_users(source: &DomainDataset, target: &DomainDataset) -> CrossDomainCohort {
    let common: BTreeSet<String> = source
        .users()
        .intersection(&target.users())
        .map(|u| u.to_string())
        .collect();
    if common.is_empty() {
        log::warn!(
            "no common users between {} and {}",
            source.domain_id,
            target.domain_id
        );
    }
    let keep = |ds: &DomainDataset| {
        ds.with_interactions(
            ds.interactions
                .iter()
                .filter(|i| common.contains(&i.user_id))
                .cloned()
                .collect(),
        )
    };
    let source = keep(source);
    let target = keep(target);
    let mut src_by_user = sorted_by_user(&source.interactions);
    let mut tgt_by_user = sorted_by_user(&target.interactions);
    let users = common
        .into_iter()
        .map(|user_id| CohortUser {
            source: src_by_user.remove(&user_id).unwrap_or_default(),
            target: tgt_by_user.remove(&user_id).unwrap_or_default(),
            user_id,
        })
        .collect();
    CrossDomainCohort { source, target, users }
}

/// Number of source purchases strictly before the user's ground-truth cutoff,
/// or `None` when the user has too few target purchases for ground truth.
pub fn pre_cutoff_history(user: &CohortUser, n_ground_truth: usize) -> Option<usize> {
    let gt = select_ground_truth(user, n_ground_truth).ok()?;
    Some(user.source.iter().filter(|i| i.timestamp < gt.cutoff).count())
}

/// Keep users whose pre-cutoff source history reaches the threshold.
/// Users lacking enough target purchases for ground truth are dropped too.
pub fn filter_history_length(cohort: &CrossDomainCohort, config: &FilterConfig) -> CrossDomainCohort {
    let users: Vec<CohortUser> = cohort
        .users
        .iter()
        .filter(|u| {
            pre_cutoff_history(u, config.n_ground_truth)
                .is_some_and(|n| n >= config.history_len_threshold)
        })
        .cloned()
        .collect();
    let kept: BTreeSet<&str> = users.iter().map(|u| u.user_id.as_str()).collect();
    let restrict = |ds: &DomainDataset| {
        ds.with_interactions(
            ds.interactions
                .iter()
                .filter(|i| kept.contains(i.user_id.as_str()))
                .cloned()
                .collect(),
        )
    };
    CrossDomainCohort {
        source: restrict(&cohort.source),
        target: restrict(&cohort.target),
        users,
    }
}

/// Survivor counts after one stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageCounts {
    pub stage: String,
    pub source_users: usize,
    pub source_items: usize,
    pub source_interactions: usize,
    pub target_users: usize,
    pub target_items: usize,
    pub target_interactions: usize,
    /// Mean per-user interaction count in the source domain at this stage.
    pub source_avg_len: f64,
    pub target_avg_len: f64,
}

impl StageCounts {
    fn of(stage: &str, source: &DomainDataset, target: &DomainDataset) -> Self {
        Self {
            stage: stage.to_string(),
            source_users: source.users().len(),
            source_items: source.items().len(),
            source_interactions: source.interactions.len(),
            target_users: target.users().len(),
            target_items: target.items().len(),
            target_interactions: target.interactions.len(),
            source_avg_len: source.avg_user_len(),
            target_avg_len: target.avg_user_len(),
        }
    }
}

impl std::fmt::Display for StageCounts {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{:<15} source {} users / {} items / {} interactions, target {} users / {} items / {} interactions",
            self.stage,
            self.source_users,
            self.source_items,
            self.source_interactions,
            self.target_users,
            self.target_items,
            self.target_interactions
        )
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FilterLog {
    pub stages: Vec<StageCounts>,
}

/// Run all four stages on a (source, target) pair.
pub fn run_pipeline(
    source: &DomainDataset,
    target: &DomainDataset,
    config: &FilterConfig,
) -> Result<(CrossDomainCohort, FilterLog), FilterError> {
    config.validate()?;
    let mut log = FilterLog::default();
    log.stages.push(StageCounts::of("input", source, target));

    let (src, tgt) = (filter_rating(source, config), filter_rating(target, config));
    log.stages.push(StageCounts::of("rating", &src, &tgt));

    let (src, tgt) = (filter_active(&src, config), filter_active(&tgt, config));
    log.stages.push(StageCounts::of("active", &src, &tgt));

    let cohort = filter_common_users(&src, &tgt);
    log.stages.push(StageCounts::of("common-user", &cohort.source, &cohort.target));

    let cohort = filter_history_length(&cohort, config);
    log.stages.push(StageCounts::of("history-length", &cohort.source, &cohort.target));

    for stage in &log.stages {
        log::info!("{stage}");
    }
    Ok((cohort, log))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ds(domain: &str, rows: &[(&str, &str, f64, i64)]) -> DomainDataset {
        let mut d = DomainDataset::new(domain, "g");
        for &(u, i, r, t) in rows {
            d.interactions.push(Interaction::new(u, i, r, t).unwrap());
            d.catalog.insert(i.to_string(), format!("Title {i}"));
        }
        d
    }

    #[test]
    fn rating_filter_keeps_only_fives_by_default() {
        let cfg = FilterConfig::default();
        let d = ds("d", &[("u", "a", 5.0, 1), ("u", "b", 4.0, 2), ("u", "c", 5.0, 3)]);
        assert_eq!(filter_rating(&d, &cfg).interactions.len(), 2);
        let all_five = ds("d", &[("u", "a", 5.0, 1), ("v", "b", 5.0, 2)]);
        assert_eq!(filter_rating(&all_five, &cfg), all_five);
    }

    #[test]
    fn active_filter_boundary_is_strict() {
        let cfg = FilterConfig {
            min_item_buyers: 0,
            ..FilterConfig::default()
        };
        let rows: Vec<_> = (0..20).map(|t| ("u", "a", 5.0, t)).collect();
        let d = ds("d", &rows);
        assert!(filter_active(&d, &cfg).interactions.is_empty());
        let rows: Vec<_> = (0..21).map(|t| ("u", "a", 5.0, t)).collect();
        assert_eq!(filter_active(&ds("d", &rows), &cfg).interactions.len(), 21);
    }

    #[test]
    fn active_filter_on_empty_dataset() {
        let d = DomainDataset::new("d", "g");
        assert!(filter_active(&d, &FilterConfig::default()).interactions.is_empty());
    }

    /// Three users with 25, 21 and 5 purchases. Item "rare" is bought by
    /// exactly 10 distinct users (u1, u2, u3 and seven one-off buyers);
    /// every other item has 11+ buyers thanks to the filler users.
    fn active_fixture() -> DomainDataset {
        let mut rows: Vec<(String, String, i64)> = Vec::new();
        let mut t = 0;
        let mut push = |u: &str, i: &str, rows: &mut Vec<(String, String, i64)>| {
            t += 1;
            rows.push((u.to_string(), i.to_string(), t));
        };
        for k in 0..24 {
            push("u1", &format!("pop{}", k % 8), &mut rows);
        }
        push("u1", "rare", &mut rows);
        for k in 0..20 {
            push("u2", &format!("pop{}", k % 8), &mut rows);
        }
        push("u2", "rare", &mut rows);
        for k in 0..4 {
            push("u3", &format!("pop{k}"), &mut rows);
        }
        push("u3", "rare", &mut rows);
        for f in 0..7 {
            push(&format!("f{f}"), "rare", &mut rows);
        }
        // filler users push every pop item over the buyer threshold
        for f in 0..12 {
            for k in 0..8 {
                push(&format!("g{f}"), &format!("pop{k}"), &mut rows);
            }
        }
        let mut d = DomainDataset::new("d", "g");
        for (u, i, t) in rows {
            d.catalog.insert(i.clone(), format!("T {i}"));
            d.interactions.push(Interaction::new(u, i, 5.0, t).unwrap());
        }
        d
    }

    #[test]
    fn active_filter_matches_brute_force_on_fixture() {
        let d = active_fixture();
        let cfg = FilterConfig::default();
        let out = filter_active(&d, &cfg);
        let users = out.users();
        assert_eq!(users.into_iter().collect::<Vec<_>>(), ["u1", "u2"]);
        assert!(!out.catalog.contains_key("rare"));
        assert_eq!(out.catalog.len(), 8);
        // u1: 24 pop rows, u2: 20 pop rows
        assert_eq!(out.interactions.len(), 44);

        // brute force: recount from scratch on the input
        let buyers = |item: &str| {
            d.interactions
                .iter()
                .filter(|i| i.item_id == item)
                .map(|i| i.user_id.as_str())
                .collect::<BTreeSet<_>>()
                .len()
        };
        let count = |user: &str| d.interactions.iter().filter(|i| i.user_id == user).count();
        assert_eq!(buyers("rare"), 10);
        assert_eq!((count("u1"), count("u2"), count("u3")), (25, 21, 5));
        let expected: Vec<_> = d
            .interactions
            .iter()
            .filter(|i| count(&i.user_id) > 20 && buyers(&i.item_id) > 10)
            .cloned()
            .collect();
        assert_eq!(out.interactions, expected);
    }

    #[test]
    fn common_users_intersection() {
        let s = ds("s", &[("u1", "a", 5.0, 1), ("u2", "a", 5.0, 2), ("u3", "b", 5.0, 3)]);
        let t = ds("t", &[("u2", "x", 5.0, 1), ("u3", "x", 5.0, 2), ("u4", "y", 5.0, 3)]);
        let c = filter_common_users(&s, &t);
        assert_eq!(c.user_ids(), ["u2", "u3"]);
        assert!(c.source.interactions.iter().all(|i| i.user_id != "u1"));
        assert!(c.target.interactions.iter().all(|i| i.user_id != "u4"));

        let disjoint = ds("t", &[("z", "x", 5.0, 1)]);
        assert!(filter_common_users(&s, &disjoint).is_empty());

        let same = filter_common_users(&s, &s);
        assert_eq!(same.user_ids(), ["u1", "u2", "u3"]);
    }

    #[test]
    fn cohort_sequences_sorted_with_item_tiebreak() {
        let s = ds("s", &[("u", "b", 5.0, 5), ("u", "a", 5.0, 5), ("u", "c", 5.0, 1)]);
        let c = filter_common_users(&s, &s);
        let order: Vec<_> = c.users[0].source.iter().map(|i| i.item_id.as_str()).collect();
        assert_eq!(order, ["c", "a", "b"]);
    }

    fn history_cohort(pre_cutoff: i64) -> CrossDomainCohort {
        let mut s_rows = Vec::new();
        for t in 0..pre_cutoff {
            s_rows.push(("u", "s", 5.0, t));
        }
        // after the cutoff: never counted
        s_rows.push(("u", "late", 5.0, 1000));
        let t_rows = [("u", "x", 5.0, 500), ("u", "y", 5.0, 600), ("u", "z", 5.0, 700)];
        let items: Vec<String> = (0..s_rows.len()).map(|k| format!("s{k}")).collect();
        let s_rows: Vec<_> = s_rows
            .iter()
            .zip(&items)
            .map(|(&(u, _, r, t), i)| (u, i.as_str(), r, t))
            .collect();
        filter_common_users(&ds("s", &s_rows), &ds("t", &t_rows))
    }

    #[test]
    fn history_filter_boundary() {
        let cfg = FilterConfig {
            history_len_threshold: 20,
            ..FilterConfig::default()
        };
        assert!(filter_history_length(&history_cohort(19), &cfg).is_empty());
        assert_eq!(filter_history_length(&history_cohort(20), &cfg).users.len(), 1);
    }

    #[test]
    fn csv_export_has_header_and_rows() {
        let s = ds("s", &[("u1", "a", 5.0, 1)]);
        let t = ds("t", &[("u1", "x", 5.0, 2)]);
        let mut buf = Vec::new();
        filter_common_users(&s, &t).write_csv(&mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "user_id,domain,item_id,timestamp\nu1,s,a,1\nu1,t,x,2\n"
        );
    }

    #[test]
    fn invalid_config_rejected() {
        let cfg = FilterConfig {
            rating_floor: 6.0,
            ..FilterConfig::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = FilterConfig {
            min_item_buyers: 0,
            ..FilterConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
