//! Chat-completion backends behind one interface: a live OpenAI-compatible
//! HTTP client, a deterministic scripted replay, a gold-label oracle for
//! end-to-end tests, plus a content-addressed response cache.
//!
//! The cache, not the provider seed, is the reproducibility mechanism:
//! identical requests hash to identical keys in any process, so a warm cache
//! replays a run without touching the backend.

use std::collections::{HashMap, VecDeque};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::taxonomy::{FineRole, MainRole};

/// Name of the environment variable holding the API key.
pub const API_KEY_ENV: &str = "FRAMECRAFT_API_KEY";

/// Model, temperature and seed shared by every request of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub model: String,
    pub temperature: f64,
    pub seed: u64,
}

impl Default for ModelParams {
    fn default() -> Self {
        ModelParams {
            model: "gpt-4o-2024-08-06".into(),
            temperature: 0.0,
            seed: 42,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatRequest {
    pub system: String,
    pub user: String,
    pub model: String,
    pub temperature: f64,
    pub seed: u64,
}

impl ChatRequest {
    pub fn new(system: String, user: String, params: &ModelParams) -> Self {
        ChatRequest {
            system,
            user,
            model: params.model.clone(),
            temperature: params.temperature,
            seed: params.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChatResponse {
    /// Assistant message content, verbatim.
    pub text: String,
    pub from_cache: bool,
}

#[derive(Debug, thiserror::Error)]
pub enum LlmError {
    #[error("{API_KEY_ENV} is not set")]
    MissingApiKey,
    #[error("chat endpoint returned status {status}: {detail}")]
    HttpStatus { status: u16, detail: String },
    #[error("retries exhausted after {attempts} attempts (last status {last_status})")]
    RetriesExhausted { attempts: u32, last_status: u16 },
    #[error("malformed chat completion envelope: {0}")]
    MalformedEnvelope(String),
    #[error("transport error: {0}")]
    Transport(String),
    #[error("no scripted response for prompt digest {digest}")]
    UnscriptedPrompt { digest: String },
    #[error("oracle backend has no gold entry for entity {entity:?}")]
    UnknownOracleEntity { entity: String },
    #[error("cache I/O at {path}: {source}")]
    CacheIo {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot read scripted fixture {path}: {detail}")]
    BadFixture { path: String, detail: String },
}

/// A chat-completion provider. Implementations must tolerate concurrent calls.
pub trait ChatBackend: Send + Sync {
    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, LlmError>;
}

/// Stable content hash over (model, temperature, seed, system, user).
/// Identical requests yield identical keys in any process or run.
pub fn cache_key(request: &ChatRequest) -> String {
    let mut hasher = Sha256::new();
    let parts: [&[u8]; 5] = [
        request.model.as_bytes(),
        &request.temperature.to_bits().to_be_bytes(),
        &request.seed.to_be_bytes(),
        request.system.as_bytes(),
        request.user.as_bytes(),
    ];
    for part in parts {
        hasher.update((part.len() as u64).to_be_bytes());
        hasher.update(part);
    }
    hex::encode(hasher.finalize())
}

#[derive(Debug, Serialize, Deserialize)]
struct CacheEntry {
    request_digest: String,
    text: String,
    timestamp: u64,
}

static TMP_COUNTER: AtomicUsize = AtomicUsize::new(0);

/// Serve `request` from the content-addressed file cache, calling the backend
/// only on a miss. Corrupt cache files are treated as misses with a warning.
pub fn cached_chat(
    request: &ChatRequest,
    backend: &dyn ChatBackend,
    cache_dir: &Path,
) -> Result<ChatResponse, LlmError> {
    let key = cache_key(request);
    let path = cache_dir.join(format!("{key}.json"));
    if path.exists() {
        match read_entry(&path, &key) {
            Ok(text) => {
                return Ok(ChatResponse {
                    text,
                    from_cache: true,
                })
            }
            Err(detail) => {
                log::warn!("ignoring corrupt cache file {}: {detail}", path.display());
            }
        }
    }
    let response = backend.chat(request)?;
    let entry = CacheEntry {
        request_digest: key.clone(),
        text: response.text.clone(),
        timestamp: std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
    };
    fs::create_dir_all(cache_dir).map_err(|source| LlmError::CacheIo {
        path: cache_dir.display().to_string(),
        source,
    })?;
    // Write-then-rename so concurrent writers of one key stay last-writer-wins.
    let tmp = cache_dir.join(format!(
        ".{key}.{}.{}.tmp",
        std::process::id(),
        TMP_COUNTER.fetch_add(1, Ordering::Relaxed)
    ));
    let body = serde_json::to_vec_pretty(&entry).expect("cache entry serializes");
    fs::write(&tmp, body).map_err(|source| LlmError::CacheIo {
        path: tmp.display().to_string(),
        source,
    })?;
    fs::rename(&tmp, &path).map_err(|source| LlmError::CacheIo {
        path: path.display().to_string(),
        source,
    })?;
    Ok(response)
}

fn read_entry(path: &Path, expected_digest: &str) -> Result<String, String> {
    let bytes = fs::read(path).map_err(|e| e.to_string())?;
    let entry: CacheEntry = serde_json::from_slice(&bytes).map_err(|e| e.to_string())?;
    if entry.request_digest != expected_digest {
        return Err(format!(
            "digest mismatch: file says {}, key is {expected_digest}",
            entry.request_digest
        ));
    }
    Ok(entry.text)
}

/// Backend wrapper that adds the file cache in front of an inner backend.
pub struct CachedBackend {
    inner: Arc<dyn ChatBackend>,
    cache_dir: PathBuf,
}

impl CachedBackend {
    pub fn new(inner: Arc<dyn ChatBackend>, cache_dir: impl Into<PathBuf>) -> Self {
        CachedBackend {
            inner,
            cache_dir: cache_dir.into(),
        }
    }
}

impl ChatBackend for CachedBackend {
    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, LlmError> {
        cached_chat(request, self.inner.as_ref(), &self.cache_dir)
    }
}

/// Call-count probe around any backend.
pub struct CountingBackend {
    inner: Arc<dyn ChatBackend>,
    calls: AtomicUsize,
}

impl CountingBackend {
    pub fn new(inner: Arc<dyn ChatBackend>) -> Self {
        CountingBackend {
            inner,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl ChatBackend for CountingBackend {
    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, LlmError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.chat(request)
    }
}

/// Deterministic replay backend for tests and offline reruns.
///
/// Responses come from a digest-keyed table, then from an ordered sequence,
/// then from an optional constant default. Unknown prompts are an error.
#[derive(Default)]
pub struct ScriptedBackend {
    table: HashMap<String, String>,
    sequence: Mutex<VecDeque<String>>,
    default: Option<String>,
    requests_seen: Mutex<Vec<String>>,
}

impl ScriptedBackend {
    pub fn from_table(table: HashMap<String, String>) -> Self {
        ScriptedBackend {
            table,
            ..Default::default()
        }
    }

    pub fn from_sequence(responses: Vec<String>) -> Self {
        ScriptedBackend {
            sequence: Mutex::new(responses.into()),
            ..Default::default()
        }
    }

    /// Replies with `text` to every prompt.
    pub fn constant(text: &str) -> Self {
        ScriptedBackend {
            default: Some(text.to_string()),
            ..Default::default()
        }
    }

    /// Load fixtures from JSON: an object maps request digests to response
    /// texts, an array is an ordered response sequence.
    pub fn from_fixture_file(path: &Path) -> Result<Self, LlmError> {
        let display = path.display().to_string();
        let bytes = fs::read(path).map_err(|e| LlmError::BadFixture {
            path: display.clone(),
            detail: e.to_string(),
        })?;
        let value: serde_json::Value =
            serde_json::from_slice(&bytes).map_err(|e| LlmError::BadFixture {
                path: display.clone(),
                detail: e.to_string(),
            })?;
        match value {
            serde_json::Value::Object(map) => {
                let mut table = HashMap::new();
                for (k, v) in map {
                    let text = v.as_str().ok_or_else(|| LlmError::BadFixture {
                        path: display.clone(),
                        detail: format!("value for {k} is not a string"),
                    })?;
                    table.insert(k, text.to_string());
                }
                Ok(Self::from_table(table))
            }
            serde_json::Value::Array(items) => {
                let mut seq = Vec::new();
                for (i, v) in items.into_iter().enumerate() {
                    let text = v.as_str().ok_or_else(|| LlmError::BadFixture {
                        path: display.clone(),
                        detail: format!("element {i} is not a string"),
                    })?;
                    seq.push(text.to_string());
                }
                Ok(Self::from_sequence(seq))
            }
            _ => Err(LlmError::BadFixture {
                path: display,
                detail: "expected a JSON object or array".into(),
            }),
        }
    }

    /// Script a response for exactly this request.
    pub fn insert(&mut self, request: &ChatRequest, text: &str) {
        self.table.insert(cache_key(request), text.to_string());
    }

    /// Digests of every request seen, in call order.
    pub fn seen(&self) -> Vec<String> {
        self.requests_seen.lock().unwrap().clone()
    }
}

impl ChatBackend for ScriptedBackend {
    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, LlmError> {
        let digest = cache_key(request);
        self.requests_seen.lock().unwrap().push(digest.clone());
        if let Some(text) = self.table.get(&digest) {
            return Ok(ChatResponse {
                text: text.clone(),
                from_cache: false,
            });
        }
        if let Some(text) = self.sequence.lock().unwrap().pop_front() {
            return Ok(ChatResponse {
                text,
                from_cache: false,
            });
        }
        if let Some(text) = &self.default {
            return Ok(ChatResponse {
                text: text.clone(),
                from_cache: false,
            });
        }
        Err(LlmError::UnscriptedPrompt { digest })
    }
}

const ORACLE_TASK_MARKER: &str = "classify the narrative framing of the ";
const ORACLE_TASK_MARKER_END: &str = " in the document";

/// Emits well-formed answers derived from gold labels, keyed by entity
/// surface form. Summary-style requests get a fixed placeholder text, so
/// oracle runs work under every context strategy.
pub struct OracleBackend {
    gold: HashMap<String, (MainRole, Vec<FineRole>)>,
}

impl OracleBackend {
    pub fn new(gold: HashMap<String, (MainRole, Vec<FineRole>)>) -> Self {
        OracleBackend { gold }
    }

    pub fn from_gold<'a, I>(pairs: I) -> Self
    where
        I: IntoIterator<Item = (&'a str, MainRole, &'a [FineRole])>,
    {
        let gold = pairs
            .into_iter()
            .map(|(entity, main, fine)| (entity.to_string(), (main, fine.to_vec())))
            .collect();
        OracleBackend { gold }
    }

    fn entity_of(system: &str) -> Option<&str> {
        let rest = &system[system.find(ORACLE_TASK_MARKER)? + ORACLE_TASK_MARKER.len()..];
        let end = rest.find(ORACLE_TASK_MARKER_END)?;
        Some(&rest[..end])
    }
}

impl ChatBackend for OracleBackend {
    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, LlmError> {
        let Some(entity) = Self::entity_of(&request.system) else {
            // Not a classification prompt, so it must be a summary request.
            return Ok(ChatResponse {
                text: "A concise account of the article, centered on the entity in question."
                    .into(),
                from_cache: false,
            });
        };
        let (main, fine) = self
            .gold
            .get(entity)
            .ok_or_else(|| LlmError::UnknownOracleEntity {
                entity: entity.to_string(),
            })?;
        let wants_main = request.system.contains("\"main_role\"");
        let wants_fine = request.system.contains("\"fine_grained_roles\"");
        let fine_names: Vec<&str> = fine.iter().map(|r| r.name()).collect();
        let payload = match (wants_main, wants_fine) {
            (true, true) => serde_json::json!({
                "main_role": main.name(),
                "fine_grained_roles": fine_names,
            }),
            (true, false) => serde_json::json!({ "main_role": main.name() }),
            _ => serde_json::json!({ "fine_grained_roles": fine_names }),
        };
        Ok(ChatResponse {
            text: payload.to_string(),
            from_cache: false,
        })
    }
}

/// Live OpenAI-compatible chat client with exponential backoff on 429/5xx
/// and an optional minimum interval between request starts.
pub struct HttpBackend {
    endpoint: String,
    api_key: ApiKey,
    client: reqwest::blocking::Client,
    max_attempts: u32,
    base_delay: Duration,
    min_interval: Duration,
    last_start: Mutex<Option<std::time::Instant>>,
}

/// API key wrapper that never exposes the secret through `Debug`.
#[derive(Clone)]
pub struct ApiKey(String);

impl std::fmt::Debug for ApiKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("ApiKey(redacted)")
    }
}

impl HttpBackend {
    pub fn new(endpoint: &str, api_key: &str) -> Self {
        HttpBackend {
            endpoint: endpoint.trim_end_matches('/').to_string(),
            api_key: ApiKey(api_key.to_string()),
            client: reqwest::blocking::Client::new(),
            max_attempts: 5,
            base_delay: Duration::from_millis(500),
            min_interval: Duration::ZERO,
            last_start: Mutex::new(None),
        }
    }

    /// Read the key from `FRAMECRAFT_API_KEY`.
    pub fn from_env(endpoint: &str) -> Result<Self, LlmError> {
        let key = std::env::var(API_KEY_ENV).map_err(|_| LlmError::MissingApiKey)?;
        if key.is_empty() {
            return Err(LlmError::MissingApiKey);
        }
        Ok(Self::new(endpoint, &key))
    }

    pub fn with_retry(mut self, max_attempts: u32, base_delay: Duration) -> Self {
        self.max_attempts = max_attempts.max(1);
        self.base_delay = base_delay;
        self
    }

    /// Enforce a minimum spacing between request starts, across threads.
    pub fn with_min_interval(mut self, min_interval: Duration) -> Self {
        self.min_interval = min_interval;
        self
    }

    fn pace(&self) {
        if self.min_interval.is_zero() {
            return;
        }
        let wait = {
            let mut last = self.last_start.lock().unwrap();
            let now = std::time::Instant::now();
            let wait = match *last {
                Some(previous) => self.min_interval.saturating_sub(now - previous),
                None => Duration::ZERO,
            };
            *last = Some(now + wait);
            wait
        };
        if !wait.is_zero() {
            std::thread::sleep(wait);
        }
    }
}

#[derive(Deserialize)]
struct Envelope {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    message: Message,
}

#[derive(Deserialize)]
struct Message {
    content: String,
}

impl ChatBackend for HttpBackend {
    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, LlmError> {
        let url = format!("{}/chat/completions", self.endpoint);
        let body = serde_json::json!({
            "model": request.model,
            "temperature": request.temperature,
            "seed": request.seed,
            "messages": [
                { "role": "system", "content": request.system },
                { "role": "user", "content": request.user },
            ],
        });
        let mut attempt = 0;
        loop {
            attempt += 1;
            self.pace();
            let sent = self
                .client
                .post(&url)
                .bearer_auth(&self.api_key.0)
                .json(&body)
                .send()
                .map_err(|e| LlmError::Transport(e.to_string()))?;
            let status = sent.status().as_u16();
            if sent.status().is_success() {
                let envelope: Envelope = sent
                    .json()
                    .map_err(|e| LlmError::MalformedEnvelope(e.to_string()))?;
                let text = envelope
                    .choices
                    .first()
                    .map(|c| c.message.content.clone())
                    .ok_or_else(|| LlmError::MalformedEnvelope("choices is empty".into()))?;
                return Ok(ChatResponse {
                    text,
                    from_cache: false,
                });
            }
            let retryable = status == 429 || (500..600).contains(&status);
            if !retryable {
                let detail = sent.text().unwrap_or_default();
                return Err(LlmError::HttpStatus {
                    status,
                    detail: detail.chars().take(200).collect(),
                });
            }
            if attempt >= self.max_attempts {
                return Err(LlmError::RetriesExhausted {
                    attempts: attempt,
                    last_status: status,
                });
            }
            std::thread::sleep(self.base_delay * 2u32.pow(attempt - 1));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn req(user: &str) -> ChatRequest {
        ChatRequest::new("sys".into(), user.into(), &ModelParams::default())
    }

    #[test]
    fn identical_requests_share_a_key() {
        assert_eq!(cache_key(&req("hello")), cache_key(&req("hello")));
    }

    #[test]
    fn any_field_change_changes_the_key() {
        let base = req("hello");
        let mut temp = base.clone();
        temp.temperature = 0.5;
        let mut seed = base.clone();
        seed.seed = 7;
        let mut model = base.clone();
        model.model = "other".into();
        for other in [req("hello!"), temp, seed, model] {
            assert_ne!(cache_key(&base), cache_key(&other));
        }
    }

    #[test]
    fn single_byte_perturbations_do_not_collide() {
        // Collision sanity over systematic one-byte user edits.
        let base = req(&"x".repeat(64));
        let base_key = cache_key(&base);
        let mut keys = std::collections::HashSet::new();
        for i in 0..64 {
            let mut user: Vec<u8> = base.user.clone().into_bytes();
            user[i] = b'y';
            let r = req(std::str::from_utf8(&user).unwrap());
            let k = cache_key(&r);
            assert_ne!(k, base_key);
            assert!(keys.insert(k), "two perturbations collided");
        }
    }

    #[test]
    fn field_boundaries_do_not_collide() {
        // Moving a byte across the system/user boundary must change the key.
        let a = ChatRequest::new("ab".into(), "c".into(), &ModelParams::default());
        let b = ChatRequest::new("a".into(), "bc".into(), &ModelParams::default());
        assert_ne!(cache_key(&a), cache_key(&b));
    }

    #[test]
    fn cache_hit_skips_the_backend() {
        let dir = tempfile::tempdir().unwrap();
        let backend = ScriptedBackend::constant("ok");
        let counting = CountingBackend::new(Arc::new(backend));
        let r = req("hello");
        let first = cached_chat(&r, &counting, dir.path()).unwrap();
        assert!(!first.from_cache);
        let second = cached_chat(&r, &counting, dir.path()).unwrap();
        assert!(second.from_cache);
        assert_eq!(second.text, "ok");
        assert_eq!(counting.calls(), 1);
    }

    #[test]
    fn corrupt_cache_file_falls_back_to_backend() {
        let dir = tempfile::tempdir().unwrap();
        let r = req("hello");
        let key = cache_key(&r);
        fs::write(dir.path().join(format!("{key}.json")), "{ truncated").unwrap();
        let backend = ScriptedBackend::constant("fresh");
        let resp = cached_chat(&r, &backend, dir.path()).unwrap();
        assert!(!resp.from_cache);
        assert_eq!(resp.text, "fresh");
        // The miss repaired the entry.
        let resp2 = cached_chat(&r, &backend, dir.path()).unwrap();
        assert!(resp2.from_cache);
    }

    #[test]
    fn scripted_lookup_and_unknown_prompt() {
        let r = req("p");
        let mut backend = ScriptedBackend::default();
        backend.insert(&r, "ok");
        assert_eq!(backend.chat(&r).unwrap().text, "ok");
        let unknown = req("other");
        match backend.chat(&unknown) {
            Err(LlmError::UnscriptedPrompt { digest }) => {
                assert_eq!(digest, cache_key(&unknown));
            }
            other => panic!("expected UnscriptedPrompt, got {other:?}"),
        }
    }

    #[test]
    fn fixture_file_keyed_by_digest() {
        let r = req("scripted prompt");
        let digest = cache_key(&r);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fixtures.json");
        fs::write(
            &path,
            serde_json::json!({ &digest: "scripted reply" }).to_string(),
        )
        .unwrap();
        let backend = ScriptedBackend::from_fixture_file(&path).unwrap();
        assert_eq!(backend.chat(&r).unwrap().text, "scripted reply");
        assert!(backend.chat(&req("unknown")).is_err());
    }

    #[test]
    fn oracle_answers_each_stage_from_gold() {
        let backend = OracleBackend::from_gold([(
            "Kremlin",
            MainRole::Antagonist,
            &[FineRole::Deceiver][..],
        )]);
        let single = ChatRequest::new(
            "Your task is to classify the narrative framing of the Kremlin in the document based on the taxonomy. { \"main_role\": .. \"fine_grained_roles\": .. }".into(),
            "DOCUMENT:...".into(),
            &ModelParams::default(),
        );
        let parsed: serde_json::Value =
            serde_json::from_str(&backend.chat(&single).unwrap().text).unwrap();
        assert_eq!(parsed["main_role"], "Antagonist");
        assert_eq!(parsed["fine_grained_roles"][0], "Deceiver");

        let main_only = ChatRequest::new(
            "classify the narrative framing of the Kremlin in the document as either .. { \"main_role\": }".into(),
            "DOCUMENT:...".into(),
            &ModelParams::default(),
        );
        let parsed: serde_json::Value =
            serde_json::from_str(&backend.chat(&main_only).unwrap().text).unwrap();
        assert_eq!(parsed["main_role"], "Antagonist");
        assert!(parsed.get("fine_grained_roles").is_none());
    }

    #[test]
    fn oracle_serves_summary_requests_with_placeholder_text() {
        let backend = OracleBackend::from_gold([]);
        let r = ChatRequest::new(
            String::new(),
            "Summarize ...".into(),
            &ModelParams::default(),
        );
        assert!(!backend.chat(&r).unwrap().text.is_empty());
    }

    #[test]
    fn api_key_debug_is_redacted() {
        let key = ApiKey("sk-secret-value".into());
        let shown = format!("{key:?}");
        assert!(!shown.contains("secret"));
    }

    #[test]
    fn missing_api_key_is_reported() {
        std::env::remove_var(API_KEY_ENV);
        assert!(matches!(
            HttpBackend::from_env("http://x"),
            Err(LlmError::MissingApiKey)
        ));
    }
}
