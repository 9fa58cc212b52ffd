//! Review and metadata ingestion, plus a seeded synthetic corpus.
//!
//! Raw inputs use the field names of the public Amazon review dumps:
//! `reviewerID`, `asin`, `overall`, `unixReviewTime` for reviews and
//! `asin`, `title` for metadata. Files may be gzip-compressed.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, Read};
use std::path::{Path, PathBuf};

use flate2::read::MultiGzDecoder;
use rand::seq::index;
use rand::Rng;
use rand_distr_like::standard_normal;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::rng::substream;

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: no valid lines ({total} read, all skipped)")]
    NoValidLines { path: PathBuf, total: usize },
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error("invalid interaction: {0}")]
    InvalidInteraction(String),
}

pub type Result<T, E = CorpusError> = std::result::Result<T, E>;

/// One purchase/review event inside one domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Interaction {
    pub user_id: String,
    pub item_id: String,
    pub rating: f64,
    pub timestamp: i64,
}

impl Interaction {
    pub fn new(
        user_id: impl Into<String>,
        item_id: impl Into<String>,
        rating: f64,
        timestamp: i64,
    ) -> Result<Self> {
        let interaction = Self {
            user_id: user_id.into(),
            item_id: item_id.into(),
            rating,
            timestamp,
        };
        interaction.check()?;
        Ok(interaction)
    }

    fn check(&self) -> Result<()> {
        if self.user_id.is_empty() || self.item_id.is_empty() {
            return Err(CorpusError::InvalidInteraction("empty user or item id".into()));
        }
        if !(1.0..=5.0).contains(&self.rating) {
            return Err(CorpusError::InvalidInteraction(format!(
                "rating {} outside [1, 5]",
                self.rating
            )));
        }
        if self.timestamp < 0 {
            return Err(CorpusError::InvalidInteraction(format!(
                "negative timestamp {}",
                self.timestamp
            )));
        }
        Ok(())
    }

    /// Sort key used everywhere a per-user sequence is ordered.
    pub fn order_key(&self) -> (i64, &str) {
        (self.timestamp, self.item_id.as_str())
    }
}

/// All interactions and item titles of one domain.
///
/// Immutable once built; every transformation returns a new dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainDataset {
    pub domain_id: String,
    pub group_id: String,
    pub interactions: Vec<Interaction>,
    pub catalog: BTreeMap<String, String>,
}

impl DomainDataset {
    pub fn new(domain_id: impl Into<String>, group_id: impl Into<String>) -> Self {
        Self {
            domain_id: domain_id.into(),
            group_id: group_id.into(),
            interactions: Vec::new(),
            catalog: BTreeMap::new(),
        }
    }

    /// Copy of the dataset metadata with a different interaction list.
    pub fn with_interactions(&self, interactions: Vec<Interaction>) -> Self {
        Self {
            domain_id: self.domain_id.clone(),
            group_id: self.group_id.clone(),
            interactions,
            catalog: self.catalog.clone(),
        }
    }

    pub fn users(&self) -> BTreeSet<&str> {
        self.interactions.iter().map(|i| i.user_id.as_str()).collect()
    }

    pub fn items(&self) -> BTreeSet<&str> {
        self.interactions.iter().map(|i| i.item_id.as_str()).collect()
    }

    pub fn title(&self, item_id: &str) -> Option<&str> {
        self.catalog.get(item_id).map(String::as_str)
    }

    /// Mean number of interactions per distinct user (0 for an empty dataset).
    pub fn avg_user_len(&self) -> f64 {
        let users = self.users().len();
        if users == 0 {
            0.0
        } else {
            self.interactions.len() as f64 / users as f64
        }
    }

    /// Check the catalog invariants: every interaction has a nonempty title.
    pub fn validate(&self) -> Result<()> {
        for interaction in &self.interactions {
            interaction.check()?;
            match self.catalog.get(&interaction.item_id) {
                Some(title) if !title.trim().is_empty() => {}
                _ => {
                    return Err(CorpusError::InvalidInteraction(format!(
                        "item {} has no title in {}",
                        interaction.item_id, self.domain_id
                    )))
                }
            }
        }
        Ok(())
    }
}

/// Line accounting for one ingested file.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadStats {
    pub total_lines: usize,
    pub skipped_lines: usize,
    pub emitted: usize,
    /// Reviews sharing (user, item, timestamp) with an earlier line; kept.
    pub duplicate_events: usize,
}

/// Outcome of joining titles onto a dataset.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetadataStats {
    pub total_lines: usize,
    pub skipped_lines: usize,
    pub titles: usize,
    pub duplicate_asins: usize,
    pub dropped_interactions: usize,
}

/// Trim and collapse internal whitespace runs to one space.
pub fn normalize_title(raw: &str) -> String {
    raw.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn open_lines(path: &Path) -> Result<Box<dyn BufRead>> {
    let io_err = |source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut file = File::open(path).map_err(io_err)?;
    let mut magic = [0u8; 2];
    let n = file.read(&mut magic).map_err(io_err)?;
    let file = File::open(path).map_err(io_err)?;
    if n == 2 && magic == [0x1f, 0x8b] {
        Ok(Box::new(BufReader::new(MultiGzDecoder::new(file))))
    } else {
        Ok(Box::new(BufReader::new(file)))
    }
}

fn parse_review(line: &str) -> Option<Interaction> {
    let value: Value = serde_json::from_str(line).ok()?;
    let user_id = value.get("reviewerID")?.as_str()?;
    let item_id = value.get("asin")?.as_str()?;
    let rating = value.get("overall")?.as_f64()?;
    let timestamp = value.get("unixReviewTime")?.as_i64()?;
    Interaction::new(user_id, item_id, rating, timestamp).ok()
}

/// Read a review dump. Malformed lines are skipped and counted; the
/// returned dataset has an empty catalog until [`load_metadata`] runs.
pub fn load_reviews(path: &Path, domain_id: &str) -> Result<(DomainDataset, LoadStats)> {
    let reader = open_lines(path)?;
    let mut stats = LoadStats::default();
    let mut dataset = DomainDataset::new(domain_id, "");
    let mut seen = BTreeSet::new();
    for line in reader.lines() {
        let line = line.map_err(|source| CorpusError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        stats.total_lines += 1;
        match parse_review(&line) {
            Some(interaction) => {
                let key = (
                    interaction.user_id.clone(),
                    interaction.item_id.clone(),
                    interaction.timestamp,
                );
                if !seen.insert(key) {
                    stats.duplicate_events += 1;
                }
                dataset.interactions.push(interaction);
                stats.emitted += 1;
            }
            None => stats.skipped_lines += 1,
        }
    }
    if stats.emitted == 0 {
        return Err(CorpusError::NoValidLines {
            path: path.to_path_buf(),
            total: stats.total_lines,
        });
    }
    if stats.skipped_lines > 0 {
        log::warn!(
            "{}: skipped {} of {} lines",
            path.display(),
            stats.skipped_lines,
            stats.total_lines
        );
    }
    Ok((dataset, stats))
}

/// Join item titles onto `dataset`. Interactions whose item has no usable
/// title are dropped; for repeated asins the last title wins.
pub fn load_metadata(path: &Path, dataset: &DomainDataset) -> Result<(DomainDataset, MetadataStats)> {
    let reader = open_lines(path)?;
    let mut stats = MetadataStats::default();
    let mut catalog = dataset.catalog.clone();
    let mut seen = BTreeSet::new();
    for line in reader.lines() {
        let line = line.map_err(|source| CorpusError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        stats.total_lines += 1;
        let parsed = serde_json::from_str::<Value>(&line).ok().and_then(|v| {
            let asin = v.get("asin")?.as_str()?.to_string();
            let title = normalize_title(v.get("title")?.as_str()?);
            (!asin.is_empty() && !title.is_empty()).then_some((asin, title))
        });
        let Some((asin, title)) = parsed else {
            stats.skipped_lines += 1;
            continue;
        };
        if !seen.insert(asin.clone()) {
            stats.duplicate_asins += 1;
        }
        catalog.insert(asin, title);
    }
    stats.titles = catalog.len();
    let interactions: Vec<Interaction> = dataset
        .interactions
        .iter()
        .filter(|i| catalog.contains_key(&i.item_id))
        .cloned()
        .collect();
    stats.dropped_interactions = dataset.interactions.len() - interactions.len();
    let mut out = dataset.with_interactions(interactions);
    out.catalog = catalog;
    Ok((out, stats))
}

/// Parameters of the synthetic corpus generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_users: usize,
    pub n_items_per_domain: usize,
    pub n_domains: usize,
    pub preference_dim: usize,
    pub rating_noise: f64,
    pub rng_seed: u64,
    /// Inclusive range of interactions drawn per user per domain.
    #[serde(default = "default_interactions")]
    pub interactions_per_user: (usize, usize),
}

fn default_interactions() -> (usize, usize) {
    (25, 60)
}

impl SyntheticSpec {
    pub fn new(n_users: usize, n_items_per_domain: usize, n_domains: usize, rng_seed: u64) -> Self {
        Self {
            n_users,
            n_items_per_domain,
            n_domains,
            preference_dim: 8,
            rating_noise: 0.5,
            rng_seed,
            interactions_per_user: default_interactions(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: &str| Err(CorpusError::InvalidSpec(msg.to_string()));
        if self.n_users == 0 || self.n_items_per_domain == 0 || self.n_domains == 0 {
            return fail("n_users, n_items_per_domain and n_domains must be >= 1");
        }
        if self.preference_dim == 0 {
            return fail("preference_dim must be >= 1");
        }
        if !(self.rating_noise.is_finite() && self.rating_noise >= 0.0) {
            return fail("rating_noise must be a finite non-negative number");
        }
        let (lo, hi) = self.interactions_per_user;
        if lo == 0 || lo > hi {
            return fail("interactions_per_user must satisfy 1 <= min <= max");
        }
        Ok(())
    }
}

const TITLE_WORDS: &[&str] = &[
    "Amber", "Beacon", "Cobalt", "Drift", "Echo", "Falcon", "Granite", "Harbor", "Ivory", "Juniper",
    "Kestrel", "Lantern", "Meridian", "Nomad", "Orchid", "Pioneer", "Quartz", "Raven", "Summit",
    "Tundra", "Umbra", "Velvet", "Willow", "Zenith",
];

fn synthetic_title(domain: usize, item: usize) -> String {
    let n = TITLE_WORDS.len();
    format!(
        "{} {} {}-{}",
        TITLE_WORDS[(item * 7 + domain * 3) % n],
        TITLE_WORDS[(item / n + domain * 5) % n],
        ["Saga", "Sessions", "Quest", "Collection", "Chronicles", "Files"][domain % 6],
        item + 1
    )
}

/// Box-Muller over the crate RNG; kept local to avoid another dependency.
mod rand_distr_like {
    use rand::Rng;

    pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
        let u1: f64 = 1.0 - rng.random::<f64>();
        let u2: f64 = rng.random::<f64>();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }
}

/// Generate `n_domains` datasets over a shared user population.
///
/// Each user has one latent preference vector used in every domain, each
/// item its own vector. A user picks items with probability increasing in
/// affinity; the rating is 5.0 when noisy affinity clears zero and falls
/// towards 1.0 below it. Per-user timestamps are strictly increasing across
/// all domains, so domains interleave in time.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Vec<DomainDataset>> {
    spec.validate()?;
    let dim = spec.preference_dim;
    let scale = 1.0 / (dim as f64).sqrt();
    let mut rng = substream(spec.rng_seed, &["synthetic"]);

    let users: Vec<Vec<f64>> = (0..spec.n_users)
        .map(|_| (0..dim).map(|_| standard_normal(&mut rng)).collect())
        .collect();
    let items: Vec<Vec<Vec<f64>>> = (0..spec.n_domains)
        .map(|_| {
            (0..spec.n_items_per_domain)
                .map(|_| (0..dim).map(|_| standard_normal(&mut rng) * scale).collect())
                .collect()
        })
        .collect();

    let mut datasets: Vec<DomainDataset> = (0..spec.n_domains)
        .map(|d| {
            let mut ds = DomainDataset::new(format!("synth-{d}"), "synthetic");
            ds.catalog = (0..spec.n_items_per_domain)
                .map(|i| (item_id(d, i), synthetic_title(d, i)))
                .collect();
            ds
        })
        .collect();

    let (lo, hi) = spec.interactions_per_user;
    for (u, pref) in users.iter().enumerate() {
        let mut events: Vec<(usize, usize, f64)> = Vec::new();
        for (d, domain_items) in items.iter().enumerate() {
            let count = rng.random_range(lo..=hi).min(spec.n_items_per_domain);
            let affinity: Vec<f64> = domain_items.iter().map(|v| dot(pref, v)).collect();
            let picked = index::sample_weighted(
                &mut rng,
                spec.n_items_per_domain,
                |i| affinity[i].exp(),
                count,
            )
            .expect("weights are finite and positive");
            for i in picked.iter() {
                let noisy = affinity[i] + spec.rating_noise * standard_normal(&mut rng);
                events.push((d, i, rating_for(noisy)));
            }
        }
        // Fisher-Yates over the user's events interleaves the domains in time.
        for k in (1..events.len()).rev() {
            let j = rng.random_range(0..=k);
            events.swap(k, j);
        }
        let mut t: i64 = 1_000_000_000 + rng.random_range(0..86_400);
        for (d, i, rating) in events {
            t += rng.random_range(1..=86_400 * 7);
            datasets[d].interactions.push(Interaction {
                user_id: format!("U{u:05}"),
                item_id: item_id(d, i),
                rating,
                timestamp: t,
            });
        }
    }
    Ok(datasets)
}

fn item_id(domain: usize, item: usize) -> String {
    format!("D{domain}I{item:05}")
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn rating_for(noisy_affinity: f64) -> f64 {
    if noisy_affinity > 0.0 {
        5.0
    } else if noisy_affinity > -0.5 {
        4.0
    } else if noisy_affinity > -1.0 {
        3.0
    } else if noisy_affinity > -1.5 {
        2.0
    } else {
        1.0
    }
}
