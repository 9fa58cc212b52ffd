//! Completion providers and the caching, retrying, rate-limited gateway in
//! front of them.
//!
//! Mock providers never read the prompt to find the answer. The harness
//! passes the presented candidate titles (and the ground truth, for the
//! oracle) through an [`AnswerKey`] side channel, so mocks keep working when
//! the prompt templates change.

use std::collections::{HashMap, VecDeque};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::rng::{sha256_hex, substream};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LlmError {
    #[error("http status {status}: {body}")]
    Http { status: u16, body: String },
    #[error("transport error: {0}")]
    Transport(String),
    #[error("malformed provider response: {0}")]
    Malformed(String),
    #[error("gave up after {attempts} attempts: {last}")]
    Exhausted { attempts: usize, last: Box<LlmError> },
    #[error("replay miss: no stored completion for prompt hash {0}")]
    ReplayMiss(String),
    #[error("{0} provider needs an answer key")]
    MissingAnswerKey(&'static str),
    #[error("provider config: {0}")]
    Config(String),
}

impl LlmError {
    /// Worth retrying: transport failures, rate limiting and server errors.
    pub fn is_transient(&self) -> bool {
        match self {
            LlmError::Transport(_) => true,
            LlmError::Http { status, .. } => *status == 429 || *status >= 500,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderKind {
    Http,
    #[default]
    Oracle,
    Random,
    Replay,
    Adversarial,
}

impl ProviderKind {
    pub fn name(self) -> &'static str {
        match self {
            ProviderKind::Http => "http",
            ProviderKind::Oracle => "oracle",
            ProviderKind::Random => "random",
            ProviderKind::Replay => "replay",
            ProviderKind::Adversarial => "adversarial",
        }
    }
}

impl std::str::FromStr for ProviderKind {
    type Err = LlmError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "http" => ProviderKind::Http,
            "oracle" => ProviderKind::Oracle,
            "random" => ProviderKind::Random,
            "replay" => ProviderKind::Replay,
            "adversarial" => ProviderKind::Adversarial,
            other => return Err(LlmError::Config(format!("unknown provider kind {other:?}"))),
        })
    }
}

/// Per-line and per-output noise injected by the adversarial provider.
/// Format classes never change which titles appear; content classes do.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseConfig {
    /// Chance the whole output gets an enumeration style ("1.", "1)", "-").
    pub numbering_prob: f64,
    pub indent_prob: f64,
    pub blank_line_prob: f64,
    pub quote_prob: f64,
    pub paraphrase_prob: f64,
    pub drop_prob: f64,
    pub hallucinate_prob: f64,
    pub refusal_prob: f64,
}

impl NoiseConfig {
    /// Every format class on, every content class off.
    pub fn format_only() -> Self {
        Self {
            numbering_prob: 0.7,
            indent_prob: 0.3,
            blank_line_prob: 0.2,
            quote_prob: 0.3,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<(), LlmError> {
        let all = [
            self.numbering_prob,
            self.indent_prob,
            self.blank_line_prob,
            self.quote_prob,
            self.paraphrase_prob,
            self.drop_prob,
            self.hallucinate_prob,
            self.refusal_prob,
        ];
        if all.iter().all(|p| (0.0..=1.0).contains(p)) {
            Ok(())
        } else {
            Err(LlmError::Config("noise probabilities must lie in [0, 1]".into()))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProviderConfig {
    pub kind: ProviderKind,
    /// Base URL of an OpenAI-compatible API, or the full chat-completions URL.
    pub endpoint: Option<String>,
    /// Model name sent to the API; also part of every cache key. Defaults
    /// to the provider kind for mocks.
    pub model: Option<String>,
    pub temperature: f64,
    pub max_retries: usize,
    pub requests_per_minute: Option<usize>,
    pub cache_dir: Option<PathBuf>,
    pub api_key_env: String,
    pub timeout_secs: u64,
    pub seed: u64,
    /// Fixture directory for the replay provider.
    pub replay_dir: Option<PathBuf>,
    pub noise: NoiseConfig,
    /// Wrapped provider for `adversarial` (defaults to oracle).
    pub inner: Option<Box<ProviderConfig>>,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        Self {
            kind: ProviderKind::Oracle,
            endpoint: None,
            model: None,
            temperature: 0.0,
            max_retries: 3,
            requests_per_minute: None,
            cache_dir: None,
            api_key_env: "OPENAI_API_KEY".into(),
            timeout_secs: 120,
            seed: 0,
            replay_dir: None,
            noise: NoiseConfig::default(),
            inner: None,
        }
    }
}

impl ProviderConfig {
    pub fn of_kind(kind: ProviderKind) -> Self {
        Self {
            kind,
            ..Self::default()
        }
    }

    pub fn model_name(&self) -> String {
        match (&self.model, self.kind) {
            (Some(m), _) => m.clone(),
            (None, ProviderKind::Adversarial) => {
                let inner = self.inner.as_deref().map_or("oracle".into(), |c| c.model_name());
                format!("adversarial({inner})")
            }
            (None, kind) => kind.name().to_string(),
        }
    }

    pub fn validate(&self) -> Result<(), LlmError> {
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(LlmError::Config("temperature must be >= 0".into()));
        }
        if self.kind == ProviderKind::Http && (self.endpoint.is_none() || self.model.is_none()) {
            return Err(LlmError::Config("http provider requires endpoint and model".into()));
        }
        if self.requests_per_minute == Some(0) {
            return Err(LlmError::Config("requests_per_minute must be >= 1".into()));
        }
        self.noise.validate()
    }
}

/// Side-channel truth for mock providers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerKey {
    pub task_id: String,
    /// Candidate titles in the order the prompt presents them.
    pub presented_titles: Vec<String>,
    pub ground_truth_titles: Vec<String>,
}

#[derive(Debug, Clone, Copy)]
pub struct CompletionRequest<'a> {
    pub prompt: &'a str,
    pub answer_key: Option<&'a AnswerKey>,
}

impl<'a> CompletionRequest<'a> {
    pub fn plain(prompt: &'a str) -> Self {
        Self {
            prompt,
            answer_key: None,
        }
    }
}

pub trait Provider: Send + Sync {
    fn complete(&self, request: &CompletionRequest<'_>) -> Result<String, LlmError>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Completion {
    pub raw_text: String,
    pub model: String,
    pub latency_ms: u64,
    pub cached: bool,
    pub attempts: usize,
}

/// Mocks answer non-task requests (guidance generation) with this.
pub const MOCK_GUIDANCE_FEATURES: &str = "genre, themes, and popular franchises";

/// Ranks the ground truth first, then the other candidates as presented.
pub struct OracleProvider;

impl Provider for OracleProvider {
    fn complete(&self, request: &CompletionRequest<'_>) -> Result<String, LlmError> {
        let Some(key) = request.answer_key else {
            return Ok(MOCK_GUIDANCE_FEATURES.to_string());
        };
        let mut lines: Vec<&str> = key.ground_truth_titles.iter().map(String::as_str).collect();
        lines.extend(
            key.presented_titles
                .iter()
                .filter(|t| !key.ground_truth_titles.contains(t))
                .map(String::as_str),
        );
        Ok(lines.join("\n"))
    }
}

/// Uniform random ranking, seeded by (seed, prompt).
pub struct RandomProvider {
    pub seed: u64,
}

impl Provider for RandomProvider {
    fn complete(&self, request: &CompletionRequest<'_>) -> Result<String, LlmError> {
        let Some(key) = request.answer_key else {
            return Ok(MOCK_GUIDANCE_FEATURES.to_string());
        };
        let mut rng = substream(self.seed, &["random", &sha256_hex(request.prompt.as_bytes())]);
        let mut titles: Vec<&str> = key.presented_titles.iter().map(String::as_str).collect();
        titles.shuffle(&mut rng);
        Ok(titles.join("\n"))
    }
}

/// Serves completions stored in a cache-layout directory.
pub struct ReplayProvider {
    store: DiskCache,
    model: String,
    temperature: f64,
}

impl ReplayProvider {
    pub fn new(dir: impl Into<PathBuf>, model: impl Into<String>, temperature: f64) -> Self {
        Self {
            store: DiskCache::new(dir),
            model: model.into(),
            temperature,
        }
    }
}

impl Provider for ReplayProvider {
    fn complete(&self, request: &CompletionRequest<'_>) -> Result<String, LlmError> {
        let key = cache_key(&self.model, self.temperature, request.prompt);
        self.store.get(&key).ok_or(LlmError::ReplayMiss(key))
    }
}

pub const REFUSAL_TEXT: &str =
    "Sorry, but I cannot fulfill this request as it goes against OpenAI's use case policy.";

/// Wraps another provider and corrupts its task completions.
pub struct AdversarialProvider {
    pub inner: Arc<dyn Provider>,
    pub noise: NoiseConfig,
    pub seed: u64,
}

const PARAPHRASE_SUFFIXES: &[&str] = &[" (Deluxe Edition)", " - Special Edition", ": Remastered", " [Import]"];
const FAKE_WORDS: &[&str] = &["Phantom", "Neon", "Crimson", "Silent", "Iron", "Lunar", "Hidden", "Broken"];
const FAKE_NOUNS: &[&str] = &["Protocol", "Horizon", "Legacy", "Empire", "Odyssey", "Signal", "Frontier"];

impl Provider for AdversarialProvider {
    fn complete(&self, request: &CompletionRequest<'_>) -> Result<String, LlmError> {
        let clean = self.inner.complete(request)?;
        let Some(key) = request.answer_key else {
            return Ok(clean);
        };
        let mut rng = substream(self.seed, &["adversarial", &sha256_hex(request.prompt.as_bytes())]);
        Ok(corrupt(&clean, &key.presented_titles, &self.noise, &mut rng))
    }
}

/// Apply `noise` to a one-title-per-line output.
pub fn corrupt<R: Rng>(clean: &str, known_titles: &[String], noise: &NoiseConfig, rng: &mut R) -> String {
    if rng.random_bool(noise.refusal_prob) {
        return REFUSAL_TEXT.to_string();
    }
    let style = if rng.random_bool(noise.numbering_prob) {
        Some(rng.random_range(0..3))
    } else {
        None
    };
    let mut titles: Vec<String> = Vec::new();
    for line in clean.lines().filter(|l| !l.trim().is_empty()) {
        if rng.random_bool(noise.drop_prob) {
            continue;
        }
        if rng.random_bool(noise.paraphrase_prob) {
            titles.push(format!("{line}{}", PARAPHRASE_SUFFIXES.choose(rng).unwrap()));
        } else {
            titles.push(line.to_string());
        }
        if rng.random_bool(noise.hallucinate_prob) {
            loop {
                let fake = format!(
                    "{} {} {}",
                    FAKE_WORDS.choose(rng).unwrap(),
                    FAKE_NOUNS.choose(rng).unwrap(),
                    rng.random_range(2..10)
                );
                if !known_titles.iter().any(|t| t.eq_ignore_ascii_case(&fake)) {
                    titles.push(fake);
                    break;
                }
            }
        }
    }
    let mut out = String::new();
    for (i, title) in titles.iter().enumerate() {
        if rng.random_bool(noise.indent_prob) {
            out.push_str(["  ", "    ", "\t", " "][rng.random_range(0..4)]);
        }
        match style {
            Some(0) => out.push_str(&format!("{}. ", i + 1)),
            Some(1) => out.push_str(&format!("{}) ", i + 1)),
            Some(_) => out.push_str("- "),
            None => {}
        }
        if rng.random_bool(noise.quote_prob) {
            let q = if rng.random_bool(0.5) { '\'' } else { '"' };
            out.push(q);
            out.push_str(title);
            out.push(q);
        } else {
            out.push_str(title);
        }
        if rng.random_bool(noise.indent_prob) {
            out.push_str("  ");
        }
        out.push('\n');
        if rng.random_bool(noise.blank_line_prob) {
            out.push('\n');
        }
    }
    out
}

/// Cache key: hex SHA-256 over (model, temperature, prompt).
pub fn cache_key(model: &str, temperature: f64, prompt: &str) -> String {
    let mut bytes = Vec::with_capacity(prompt.len() + model.len() + 16);
    bytes.extend_from_slice(model.as_bytes());
    bytes.push(0);
    bytes.extend_from_slice(&temperature.to_bits().to_le_bytes());
    bytes.push(0);
    bytes.extend_from_slice(prompt.as_bytes());
    sha256_hex(&bytes)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub prompt_hash: String,
    pub model: String,
    pub raw_text: String,
    pub timestamp: u64,
}

/// One JSON file per completion, named `<prompt_hash>.json`.
#[derive(Debug, Clone)]
pub struct DiskCache {
    dir: PathBuf,
}

impl DiskCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path_for(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.json"))
    }

    /// Corrupt or mismatched files count as misses.
    pub fn get(&self, key: &str) -> Option<String> {
        let path = self.path_for(key);
        let bytes = std::fs::read(&path).ok()?;
        match serde_json::from_slice::<CacheEntry>(&bytes) {
            Ok(entry) if entry.prompt_hash == key => Some(entry.raw_text),
            Ok(_) | Err(_) => {
                log::warn!("ignoring corrupt cache file {}", path.display());
                None
            }
        }
    }

    pub fn put(&self, key: &str, model: &str, raw_text: &str) -> std::io::Result<()> {
        std::fs::create_dir_all(&self.dir)?;
        let entry = CacheEntry {
            prompt_hash: key.to_string(),
            model: model.to_string(),
            raw_text: raw_text.to_string(),
            timestamp: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map_or(0, |d| d.as_secs()),
        };
        // write-then-rename so an interrupted run never leaves half a file
        let tmp = self.dir.join(format!(".{key}.tmp"));
        std::fs::write(&tmp, serde_json::to_vec_pretty(&entry)?)?;
        std::fs::rename(tmp, self.path_for(key))
    }
}

/// Time source for backoff and rate limiting.
pub trait Clock: Send + Sync {
    fn now(&self) -> Duration;
    fn sleep(&self, d: Duration);
}

pub struct SystemClock {
    start: Instant,
}

impl Default for SystemClock {
    fn default() -> Self {
        Self {
            start: Instant::now(),
        }
    }
}

impl Clock for SystemClock {
    fn now(&self) -> Duration {
        self.start.elapsed()
    }

    fn sleep(&self, d: Duration) {
        std::thread::sleep(d)
    }
}

/// Clock that only moves when slept on.
#[derive(Default)]
pub struct VirtualClock {
    now: Mutex<Duration>,
}

impl VirtualClock {
    pub fn advance(&self, d: Duration) {
        *self.now.lock().unwrap() += d;
    }
}

impl Clock for VirtualClock {
    fn now(&self) -> Duration {
        *self.now.lock().unwrap()
    }

    fn sleep(&self, d: Duration) {
        self.advance(d)
    }
}

/// Sliding-window limiter: at most `cap` acquisitions in any `window`.
pub struct RateLimiter {
    cap: usize,
    window: Duration,
    history: Mutex<VecDeque<Duration>>,
}

impl RateLimiter {
    pub fn per_minute(cap: usize) -> Self {
        Self::new(cap, Duration::from_secs(60))
    }

    pub fn new(cap: usize, window: Duration) -> Self {
        assert!(cap > 0, "rate limit cap must be positive");
        Self {
            cap,
            window,
            history: Mutex::new(VecDeque::new()),
        }
    }

    /// Block (on `clock`) until a slot is free, then take it.
    pub fn acquire(&self, clock: &dyn Clock) {
        loop {
            let wait = {
                let mut history = self.history.lock().unwrap();
                let now = clock.now();
                while history.front().is_some_and(|&t| now >= t + self.window) {
                    history.pop_front();
                }
                if history.len() < self.cap {
                    history.push_back(now);
                    return;
                }
                history[0] + self.window - now
            };
            clock.sleep(wait);
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct RetryPolicy {
    pub max_retries: usize,
    pub base_delay: Duration,
    pub max_delay: Duration,
}

impl RetryPolicy {
    pub fn delay(&self, attempt: usize) -> Duration {
        let factor = 1u32 << attempt.min(16);
        (self.base_delay * factor).min(self.max_delay)
    }
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 3,
            base_delay: Duration::from_millis(500),
            max_delay: Duration::from_secs(30),
        }
    }
}

/// Caching, retrying, rate-limited front of a [`Provider`].
///
/// Safe to share across threads. Two concurrent calls with the same key
/// serialize on a per-key lock, so the second one is served from cache.
pub struct Gateway {
    provider: Arc<dyn Provider>,
    model: String,
    temperature: f64,
    disk: Option<DiskCache>,
    memory: Mutex<HashMap<String, String>>,
    inflight: Mutex<HashMap<String, Arc<Mutex<()>>>>,
    limiter: Option<RateLimiter>,
    retry: RetryPolicy,
    clock: Arc<dyn Clock>,
    provider_calls: AtomicUsize,
}

impl Gateway {
    pub fn new(provider: Arc<dyn Provider>, model: impl Into<String>, temperature: f64) -> Self {
        Self {
            provider,
            model: model.into(),
            temperature,
            disk: None,
            memory: Mutex::new(HashMap::new()),
            inflight: Mutex::new(HashMap::new()),
            limiter: None,
            retry: RetryPolicy::default(),
            clock: Arc::new(SystemClock::default()),
            provider_calls: AtomicUsize::new(0),
        }
    }

    pub fn with_disk_cache(mut self, dir: impl Into<PathBuf>) -> Self {
        self.disk = Some(DiskCache::new(dir));
        self
    }

    pub fn with_rate_limit(mut self, limiter: RateLimiter) -> Self {
        self.limiter = Some(limiter);
        self
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_clock(mut self, clock: Arc<dyn Clock>) -> Self {
        self.clock = clock;
        self
    }

    pub fn model(&self) -> &str {
        &self.model
    }

    /// Number of times the wrapped provider was actually invoked.
    pub fn provider_calls(&self) -> usize {
        self.provider_calls.load(Ordering::SeqCst)
    }

    pub fn key_for(&self, prompt: &str) -> String {
        cache_key(&self.model, self.temperature, prompt)
    }

    fn lookup(&self, key: &str) -> Option<String> {
        if let Some(hit) = self.memory.lock().unwrap().get(key) {
            return Some(hit.clone());
        }
        let hit = self.disk.as_ref()?.get(key)?;
        self.memory.lock().unwrap().insert(key.to_string(), hit.clone());
        Some(hit)
    }

    pub fn complete(&self, request: &CompletionRequest<'_>) -> Result<Completion, LlmError> {
        let started = Instant::now();
        let key = self.key_for(request.prompt);
        let done = |raw_text: String, cached: bool, attempts: usize| Completion {
            raw_text,
            model: self.model.clone(),
            latency_ms: started.elapsed().as_millis() as u64,
            cached,
            attempts,
        };
        if let Some(hit) = self.lookup(&key) {
            return Ok(done(hit, true, 0));
        }
        let slot = self
            .inflight
            .lock()
            .unwrap()
            .entry(key.clone())
            .or_default()
            .clone();
        let _guard = slot.lock().unwrap();
        if let Some(hit) = self.lookup(&key) {
            return Ok(done(hit, true, 0));
        }

        let mut attempts = 0;
        let raw = loop {
            if let Some(limiter) = &self.limiter {
                limiter.acquire(self.clock.as_ref());
            }
            attempts += 1;
            self.provider_calls.fetch_add(1, Ordering::SeqCst);
            match self.provider.complete(request) {
                Ok(raw) => break raw,
                Err(e) if e.is_transient() && attempts <= self.retry.max_retries => {
                    let delay = self.retry.delay(attempts - 1);
                    log::warn!("transient provider error ({e}); retrying in {delay:?}");
                    self.clock.sleep(delay);
                }
                Err(e) if e.is_transient() => {
                    return Err(LlmError::Exhausted {
                        attempts,
                        last: Box::new(e),
                    })
                }
                Err(e) => return Err(e),
            }
        };
        if let Some(disk) = &self.disk {
            if let Err(e) = disk.put(&key, &self.model, &raw) {
                log::warn!("cache write failed for {key}: {e}");
            }
        }
        self.memory.lock().unwrap().insert(key.clone(), raw.clone());
        self.inflight.lock().unwrap().remove(&key);
        Ok(done(raw, false, attempts))
    }
}

#[cfg(feature = "http")]
pub use http::HttpProvider;

#[cfg(feature = "http")]
mod http {
    use std::time::Duration;

    use serde_json::{json, Value};

    use super::{CompletionRequest, LlmError, Provider};

    /// OpenAI-compatible chat-completions client.
    pub struct HttpProvider {
        client: reqwest::blocking::Client,
        url: String,
        model: String,
        temperature: f64,
        api_key: Option<String>,
    }

    impl HttpProvider {
        pub fn new(
            endpoint: &str,
            model: &str,
            temperature: f64,
            api_key: Option<String>,
            timeout: Duration,
        ) -> Result<Self, LlmError> {
            let client = reqwest::blocking::Client::builder()
                .timeout(timeout)
                .build()
                .map_err(|e| LlmError::Config(e.to_string()))?;
            let trimmed = endpoint.trim_end_matches('/');
            let url = if trimmed.ends_with("/chat/completions") {
                trimmed.to_string()
            } else {
                format!("{trimmed}/chat/completions")
            };
            Ok(Self {
                client,
                url,
                model: model.to_string(),
                temperature,
                api_key,
            })
        }

        pub fn request_body(&self, prompt: &str) -> Value {
            json!({
                "model": self.model,
                "messages": [{"role": "user", "content": prompt}],
                "temperature": self.temperature,
            })
        }
    }

    impl Provider for HttpProvider {
        fn complete(&self, request: &CompletionRequest<'_>) -> Result<String, LlmError> {
            let mut builder = self.client.post(&self.url).json(&self.request_body(request.prompt));
            if let Some(key) = &self.api_key {
                builder = builder.bearer_auth(key);
            }
            let response = builder.send().map_err(|e| LlmError::Transport(e.to_string()))?;
            let status = response.status().as_u16();
            let body = response.text().map_err(|e| LlmError::Transport(e.to_string()))?;
            if !(200..300).contains(&status) {
                return Err(LlmError::Http { status, body });
            }
            let value: Value = serde_json::from_str(&body).map_err(|e| LlmError::Malformed(e.to_string()))?;
            value
                .pointer("/choices/0/message/content")
                .and_then(Value::as_str)
                .map(str::to_string)
                .ok_or_else(|| LlmError::Malformed("missing choices[0].message.content".into()))
        }
    }
}

/// Instantiate the provider described by `config` (without the gateway).
pub fn build_provider(config: &ProviderConfig) -> Result<Arc<dyn Provider>, LlmError> {
    config.validate()?;
    Ok(match config.kind {
        ProviderKind::Oracle => Arc::new(OracleProvider),
        ProviderKind::Random => Arc::new(RandomProvider { seed: config.seed }),
        ProviderKind::Replay => {
            let dir = config
                .replay_dir
                .clone()
                .or_else(|| config.cache_dir.clone())
                .ok_or_else(|| LlmError::Config("replay provider needs replay_dir or cache_dir".into()))?;
            Arc::new(ReplayProvider::new(dir, config.model_name(), config.temperature))
        }
        ProviderKind::Adversarial => {
            let inner = config
                .inner
                .as_deref()
                .cloned()
                .unwrap_or_else(|| ProviderConfig::of_kind(ProviderKind::Oracle));
            Arc::new(AdversarialProvider {
                inner: build_provider(&inner)?,
                noise: config.noise,
                seed: config.seed,
            })
        }
        #[cfg(feature = "http")]
        ProviderKind::Http => {
            let api_key = std::env::var(&config.api_key_env).ok();
            if api_key.is_none() {
                log::warn!("{} is not set; sending requests without a key", config.api_key_env);
            }
            Arc::new(HttpProvider::new(
                config.endpoint.as_deref().unwrap_or_default(),
                config.model.as_deref().unwrap_or_default(),
                config.temperature,
                api_key,
                Duration::from_secs(config.timeout_secs),
            )?)
        }
        #[cfg(not(feature = "http"))]
        ProviderKind::Http => {
            return Err(LlmError::Config("built without the `http` feature".into()))
        }
    })
}

/// Provider plus cache, retry and rate limiting as configured.
pub fn build_gateway(config: &ProviderConfig) -> Result<Gateway, LlmError> {
    let provider = build_provider(config)?;
    let mut gateway = Gateway::new(provider, config.model_name(), config.temperature).with_retry(RetryPolicy {
        max_retries: config.max_retries,
        ..RetryPolicy::default()
    });
    if let Some(dir) = &config.cache_dir {
        gateway = gateway.with_disk_cache(dir);
    }
    if let Some(cap) = config.requests_per_minute {
        gateway = gateway.with_rate_limit(RateLimiter::per_minute(cap));
    }
    Ok(gateway)
}
