//! Uniform prediction interface over chat backends: request digests, answer
//! extraction, a persistent response cache, retries, and ordered batch
//! prediction.
//!
//! The cache is an append-only JSONL file keyed by a stable digest of the
//! full request. Concurrent calls with distinct keys may interleave freely;
//! concurrent calls with equal keys produce at most one backend invocation
//! and identical outcomes.

use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex, OnceLock};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::serializer::{build_prediction_prompt, AnswerLabels, PromptBundle};
use crate::util::{normalize_text, to_hex};

/// One chat call: prompt text, decoding settings, and the label vocabulary
/// used to interpret the reply.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub user_text: String,
    pub assistant_prefix: String,
    pub max_tokens: u32,
    pub temperature: f64,
    pub candidate_labels: AnswerLabels,
}

impl ChatRequest {
    pub fn from_bundle(bundle: &PromptBundle, max_tokens: u32, temperature: f64) -> Self {
        let (user_text, assistant_prefix) = build_prediction_prompt(bundle);
        Self {
            user_text,
            assistant_prefix,
            max_tokens,
            temperature,
            candidate_labels: bundle.answer_labels.clone(),
        }
    }

    /// Stable hash of all request fields; equal requests yield equal digests.
    pub fn digest(&self) -> String {
        let canonical = serde_json::to_string(self).expect("request serializes");
        to_hex(&Sha256::digest(canonical.as_bytes()))
    }
}

/// How a prediction was produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Generated,
    Likelihood,
    Simulated,
}

/// One model decision for one record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionOutcome {
    pub label: u8,
    /// Positive-class confidence, present whenever the backend exposes one.
    pub score: Option<f64>,
    pub raw_text: String,
    pub source: Source,
}

/// Raw backend reply, cached verbatim.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum BackendResponse {
    Generated { text: String },
    Likelihood { positive: f64 },
}

/// A chat completion provider. Implementations must be callable from
/// multiple worker threads.
pub trait ChatBackend: Send + Sync {
    fn id(&self) -> &str;
    fn complete(&self, request: &ChatRequest) -> Result<BackendResponse>;
    fn source_tag(&self) -> Source;
    /// True for backends that perform network operations.
    fn is_remote(&self) -> bool {
        false
    }
}

/// Decide the label from generated text.
///
/// The first bracketed span equal (case-insensitively, with whitespace
/// normalized) to a candidate label decides. If no bracketed span matches,
/// the reply decides only when exactly one label occurs in it; occurrences of
/// one label inside an occurrence of the other (e.g. "covered" within
/// "not covered") do not count.
pub fn extract_bracketed_answer(text: &str, labels: &AnswerLabels) -> Result<u8> {
    let positive = normalize_text(&labels.positive);
    let negative = normalize_text(&labels.negative);
    let mut rest = text;
    while let Some(start) = rest.find('[') {
        let after = &rest[start + 1..];
        let Some(end) = after.find(']') else { break };
        let content = normalize_text(&after[..end]);
        if content == positive {
            return Ok(1);
        }
        if content == negative {
            return Ok(0);
        }
        rest = &after[end + 1..];
    }
    let haystack = normalize_text(text);
    let positive_hits = standalone_occurrences(&haystack, &positive, &negative);
    let negative_hits = standalone_occurrences(&haystack, &negative, &positive);
    match (positive_hits > 0, negative_hits > 0) {
        (true, false) => Ok(1),
        (false, true) => Ok(0),
        (true, true) => Err(Error::Extraction {
            reason: "both labels present without a matching bracket".to_string(),
            raw: text.to_string(),
        }),
        (false, false) => Err(Error::Extraction {
            reason: "neither label found".to_string(),
            raw: text.to_string(),
        }),
    }
}

/// Occurrences of `needle` not fully contained in an occurrence of `other`.
fn standalone_occurrences(haystack: &str, needle: &str, other: &str) -> usize {
    if needle.is_empty() {
        return 0;
    }
    let other_spans: Vec<(usize, usize)> = if other.len() > needle.len() {
        match_spans(haystack, other)
    } else {
        Vec::new()
    };
    match_spans(haystack, needle)
        .into_iter()
        .filter(|&(start, end)| !other_spans.iter().any(|&(s, e)| s <= start && end <= e))
        .count()
}

fn match_spans(haystack: &str, needle: &str) -> Vec<(usize, usize)> {
    let mut spans = Vec::new();
    let mut offset = 0;
    while let Some(pos) = haystack[offset..].find(needle) {
        let start = offset + pos;
        spans.push((start, start + needle.len()));
        offset = start + 1;
    }
    spans
}

#[derive(Serialize, Deserialize)]
struct CacheLine {
    key: String,
    request: ChatRequest,
    response: BackendResponse,
    timestamp: u64,
}

/// Append-only JSONL response cache with an in-memory index.
struct ResponseCache {
    entries: Mutex<HashMap<String, BackendResponse>>,
    file: Option<Mutex<std::fs::File>>,
    path: Option<PathBuf>,
}

impl ResponseCache {
    fn in_memory() -> Self {
        Self {
            entries: Mutex::new(HashMap::new()),
            file: None,
            path: None,
        }
    }

    fn open(path: &Path) -> Result<Self> {
        let mut entries = HashMap::new();
        if path.exists() {
            let reader = std::io::BufReader::new(std::fs::File::open(path)?);
            for line in reader.lines() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let parsed: CacheLine = serde_json::from_str(&line)?;
                entries.insert(parsed.key, parsed.response);
            }
        }
        let file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)?;
        Ok(Self {
            entries: Mutex::new(entries),
            file: Some(Mutex::new(file)),
            path: Some(path.to_path_buf()),
        })
    }

    fn get(&self, key: &str) -> Option<BackendResponse> {
        self.entries.lock().unwrap().get(key).cloned()
    }

    fn put(&self, key: &str, request: &ChatRequest, response: &BackendResponse) -> Result<()> {
        self.entries
            .lock()
            .unwrap()
            .insert(key.to_string(), response.clone());
        if let Some(file) = &self.file {
            let line = CacheLine {
                key: key.to_string(),
                request: request.clone(),
                response: response.clone(),
                timestamp: std::time::SystemTime::now()
                    .duration_since(std::time::UNIX_EPOCH)
                    .map(|d| d.as_secs())
                    .unwrap_or(0),
            };
            let mut file = file.lock().unwrap();
            writeln!(file, "{}", serde_json::to_string(&line)?)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            attempts: 3,
            base_delay: Duration::from_millis(250),
        }
    }
}

/// Counters accumulated by a [`Predictor`].
#[derive(Debug, Default)]
pub struct PredictorStats {
    pub cache_hits: AtomicU64,
    pub backend_calls: AtomicU64,
    pub network_calls: AtomicU64,
}

impl PredictorStats {
    pub fn snapshot(&self) -> (u64, u64, u64) {
        (
            self.cache_hits.load(Ordering::Relaxed),
            self.backend_calls.load(Ordering::Relaxed),
            self.network_calls.load(Ordering::Relaxed),
        )
    }
}

/// Prediction layer: cache lookup, per-key dedup, retries, outcome parsing.
pub struct Predictor {
    backend: Arc<dyn ChatBackend>,
    cache: ResponseCache,
    inflight: Mutex<HashMap<String, Arc<Mutex<()>>>>,
    pub stats: PredictorStats,
    retry: RetryPolicy,
}

impl Predictor {
    pub fn new(backend: Arc<dyn ChatBackend>) -> Self {
        Self {
            backend,
            cache: ResponseCache::in_memory(),
            inflight: Mutex::new(HashMap::new()),
            stats: PredictorStats::default(),
            retry: RetryPolicy::default(),
        }
    }

    /// Attach a persistent JSONL cache file (loaded if it exists).
    pub fn with_cache_file(mut self, path: &Path) -> Result<Self> {
        self.cache = ResponseCache::open(path)?;
        Ok(self)
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn backend_id(&self) -> &str {
        self.backend.id()
    }

    pub fn cache_path(&self) -> Option<&Path> {
        self.cache.path.as_deref()
    }

    fn cache_key(&self, request: &ChatRequest) -> String {
        format!("{}:{}", self.backend.id(), request.digest())
    }

    /// Raw backend reply for a request, serving from the cache when possible.
    /// Equal keys see at most one backend invocation even under concurrency.
    pub fn complete_raw(&self, request: &ChatRequest) -> Result<BackendResponse> {
        let key = self.cache_key(request);
        if let Some(response) = self.cache.get(&key) {
            self.stats.cache_hits.fetch_add(1, Ordering::Relaxed);
            return Ok(response);
        }
        let gate = {
            let mut inflight = self.inflight.lock().unwrap();
            inflight.entry(key.clone()).or_default().clone()
        };
        let _guard = gate.lock().unwrap();
        // Another worker may have filled the cache while we waited.
        if let Some(response) = self.cache.get(&key) {
            self.stats.cache_hits.fetch_add(1, Ordering::Relaxed);
            return Ok(response);
        }
        let response = self.call_with_retry(request)?;
        self.cache.put(&key, request, &response)?;
        Ok(response)
    }

    /// Predict once, serving from the cache when possible.
    pub fn predict(&self, request: &ChatRequest) -> Result<PredictionOutcome> {
        let response = self.complete_raw(request)?;
        self.outcome_from(&response, request)
    }

    fn call_with_retry(&self, request: &ChatRequest) -> Result<BackendResponse> {
        let mut attempt = 0;
        loop {
            self.stats.backend_calls.fetch_add(1, Ordering::Relaxed);
            if self.backend.is_remote() {
                self.stats.network_calls.fetch_add(1, Ordering::Relaxed);
            }
            match self.backend.complete(request) {
                Ok(response) => return Ok(response),
                Err(Error::Transport(message)) => {
                    attempt += 1;
                    if attempt >= self.retry.attempts {
                        return Err(Error::Transport(message));
                    }
                    log::warn!(
                        "transport failure (attempt {attempt}/{}): {message}",
                        self.retry.attempts
                    );
                    std::thread::sleep(self.retry.base_delay * 2u32.pow(attempt - 1));
                }
                Err(other) => return Err(other),
            }
        }
    }

    fn outcome_from(
        &self,
        response: &BackendResponse,
        request: &ChatRequest,
    ) -> Result<PredictionOutcome> {
        match response {
            BackendResponse::Generated { text } => {
                let label = extract_bracketed_answer(text, &request.candidate_labels)?;
                Ok(PredictionOutcome {
                    label,
                    score: None,
                    raw_text: text.clone(),
                    source: self.backend.source_tag(),
                })
            }
            BackendResponse::Likelihood { positive } => {
                if !(0.0..=1.0).contains(positive) {
                    return Err(Error::Backend(format!(
                        "likelihood {positive} outside [0, 1]"
                    )));
                }
                let label = u8::from(*positive >= 0.5);
                Ok(PredictionOutcome {
                    label,
                    score: Some(*positive),
                    raw_text: format!("[{}]", request.candidate_labels.text_for(label)),
                    source: self.backend.source_tag(),
                })
            }
        }
    }

    /// Predict a batch with up to `parallelism` workers. Outcomes are in
    /// request order regardless of completion order; per-item failures do not
    /// abort the batch.
    pub fn batch_predict(
        &self,
        requests: &[ChatRequest],
        parallelism: usize,
    ) -> Vec<Result<PredictionOutcome>> {
        let workers = parallelism.max(1).min(requests.len().max(1));
        if workers <= 1 {
            return requests.iter().map(|r| self.predict(r)).collect();
        }
        let slots: Vec<OnceLock<Result<PredictionOutcome>>> =
            (0..requests.len()).map(|_| OnceLock::new()).collect();
        let next = AtomicUsize::new(0);
        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    if i >= requests.len() {
                        break;
                    }
                    let result = self.predict(&requests[i]);
                    slots[i].set(result).expect("each slot written once");
                });
            }
        });
        slots
            .into_iter()
            .map(|slot| slot.into_inner().expect("all slots filled"))
            .collect()
    }
}

pub const ENV_API_URL: &str = "FAIRTAB_API_URL";
pub const ENV_API_KEY: &str = "FAIRTAB_API_KEY";

/// OpenAI-style chat-completion backend. Generation only: answers are parsed
/// from the reply text with [`extract_bracketed_answer`].
pub struct HttpBackend {
    client: reqwest::blocking::Client,
    base_url: String,
    api_key: Option<String>,
    model: String,
    id: String,
}

impl HttpBackend {
    /// Endpoint URL from `FAIRTAB_API_URL`, key from `FAIRTAB_API_KEY`.
    pub fn from_env(model: &str) -> Result<Self> {
        let base_url = std::env::var(ENV_API_URL)
            .map_err(|_| Error::Config(format!("{ENV_API_URL} is not set")))?;
        let api_key = std::env::var(ENV_API_KEY).ok();
        Ok(Self::new(&base_url, api_key, model))
    }

    pub fn new(base_url: &str, api_key: Option<String>, model: &str) -> Self {
        Self {
            client: reqwest::blocking::Client::new(),
            base_url: base_url.trim_end_matches('/').to_string(),
            api_key,
            model: model.to_string(),
            id: format!("http:{model}"),
        }
    }

    /// Chat-completion JSON body; the assistant prefix rides along as a
    /// partial assistant turn.
    pub fn request_body(&self, request: &ChatRequest) -> serde_json::Value {
        serde_json::json!({
            "model": self.model,
            "messages": [
                {"role": "user", "content": request.user_text},
                {"role": "assistant", "content": request.assistant_prefix},
            ],
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        })
    }
}

impl ChatBackend for HttpBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn complete(&self, request: &ChatRequest) -> Result<BackendResponse> {
        let url = format!("{}/chat/completions", self.base_url);
        let mut builder = self.client.post(&url).json(&self.request_body(request));
        if let Some(key) = &self.api_key {
            builder = builder.bearer_auth(key);
        }
        let response = builder
            .send()
            .map_err(|e| Error::Transport(e.to_string()))?;
        let status = response.status();
        if status.is_server_error() || status.as_u16() == 429 {
            return Err(Error::Transport(format!("status {status}")));
        }
        if !status.is_success() {
            let body = response.text().unwrap_or_default();
            return Err(Error::Backend(format!("status {status}: {body}")));
        }
        let body: serde_json::Value = response
            .json()
            .map_err(|e| Error::Backend(format!("invalid JSON reply: {e}")))?;
        let text = body["choices"][0]["message"]["content"]
            .as_str()
            .ok_or_else(|| Error::Backend(format!("missing message content in {body}")))?;
        Ok(BackendResponse::Generated {
            text: text.to_string(),
        })
    }

    fn source_tag(&self) -> Source {
        Source::Generated
    }

    fn is_remote(&self) -> bool {
        true
    }
}

/// Summary of a cache file for the `cache-stats` CLI verb.
#[derive(Debug, Serialize)]
pub struct CacheStats {
    pub lines: usize,
    pub distinct_keys: usize,
    pub backends: std::collections::BTreeMap<String, usize>,
}

pub fn cache_stats(path: &Path) -> Result<CacheStats> {
    let reader = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut keys = std::collections::HashSet::new();
    let mut backends = std::collections::BTreeMap::new();
    let mut lines = 0;
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: CacheLine = serde_json::from_str(&line)?;
        lines += 1;
        let backend = parsed
            .key
            .rsplit_once(':')
            .map(|(b, _)| b.to_string())
            .unwrap_or_default();
        *backends.entry(backend).or_insert(0) += 1;
        keys.insert(parsed.key);
    }
    Ok(CacheStats {
        lines,
        distinct_keys: keys.len(),
        backends,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels() -> AnswerLabels {
        AnswerLabels {
            positive: "greater than 50K".to_string(),
            negative: "less than or equal to 50K".to_string(),
        }
    }

    fn request(text: &str) -> ChatRequest {
        ChatRequest {
            user_text: text.to_string(),
            assistant_prefix: "Based on the information provided the answer is".to_string(),
            max_tokens: 64,
            temperature: 0.0,
            candidate_labels: labels(),
        }
    }

    struct StubBackend {
        response: BackendResponse,
        calls: AtomicU64,
        transport_failures: AtomicU64,
        fail_text: Option<String>,
    }

    impl StubBackend {
        fn likelihood(p: f64) -> Self {
            Self {
                response: BackendResponse::Likelihood { positive: p },
                calls: AtomicU64::new(0),
                transport_failures: AtomicU64::new(0),
                fail_text: None,
            }
        }

        fn generated(text: &str) -> Self {
            Self {
                response: BackendResponse::Generated {
                    text: text.to_string(),
                },
                calls: AtomicU64::new(0),
                transport_failures: AtomicU64::new(0),
                fail_text: None,
            }
        }
    }

    impl ChatBackend for StubBackend {
        fn id(&self) -> &str {
            "stub"
        }

        fn complete(&self, request: &ChatRequest) -> Result<BackendResponse> {
            self.calls.fetch_add(1, Ordering::Relaxed);
            if self.transport_failures.load(Ordering::Relaxed) > 0 {
                self.transport_failures.fetch_sub(1, Ordering::Relaxed);
                return Err(Error::Transport("stubbed outage".to_string()));
            }
            if let Some(fail_text) = &self.fail_text {
                if request.user_text.contains(fail_text.as_str()) {
                    return Err(Error::Backend("stubbed failure".to_string()));
                }
            }
            Ok(self.response.clone())
        }

        fn source_tag(&self) -> Source {
            Source::Likelihood
        }
    }

    #[test]
    fn likelihood_above_half_is_positive() {
        let predictor = Predictor::new(Arc::new(StubBackend::likelihood(0.7)));
        let outcome = predictor.predict(&request("r1")).unwrap();
        assert_eq!(outcome.label, 1);
        assert_eq!(outcome.score, Some(0.7));
        assert_eq!(outcome.raw_text, "[greater than 50K]");
    }

    #[test]
    fn generated_text_is_extracted() {
        let predictor = Predictor::new(Arc::new(StubBackend::generated(
            "[greater than 50K] given the education level and long hours",
        )));
        let outcome = predictor.predict(&request("r1")).unwrap();
        assert_eq!(outcome.label, 1);
        assert_eq!(outcome.score, None);
    }

    #[test]
    fn extract_examples() {
        let income = labels();
        assert_eq!(
            extract_bracketed_answer("[greater than 50K] given the education level", &income)
                .unwrap(),
            1
        );
        let credit = AnswerLabels {
            positive: "good".to_string(),
            negative: "bad".to_string(),
        };
        assert_eq!(extract_bracketed_answer("[ GOOD ]", &credit).unwrap(), 1);
        assert!(matches!(
            extract_bracketed_answer("income is high", &income),
            Err(Error::Extraction { .. })
        ));
        // Unbracketed fallback: exactly one label present.
        assert_eq!(
            extract_bracketed_answer("the answer is good because thrift", &credit).unwrap(),
            1
        );
        // Both labels without brackets: ambiguous.
        assert!(extract_bracketed_answer("good or bad, hard to say", &credit).is_err());
        // Non-label bracket is skipped, later matching bracket decides.
        assert_eq!(
            extract_bracketed_answer("[hmm] thinking... [bad] risk", &credit).unwrap(),
            0
        );
    }

    #[test]
    fn extract_handles_label_containment() {
        let coverage = AnswerLabels {
            positive: "covered".to_string(),
            negative: "not covered".to_string(),
        };
        // "covered" only occurs inside "not covered": negative decides.
        assert_eq!(
            extract_bracketed_answer("this person is not covered by insurance", &coverage).unwrap(),
            0
        );
        assert_eq!(
            extract_bracketed_answer("clearly covered by medicaid", &coverage).unwrap(),
            1
        );
    }

    #[test]
    fn cache_serves_second_identical_request() {
        let backend = Arc::new(StubBackend::likelihood(0.3));
        let predictor = Predictor::new(backend.clone());
        let req = request("same");
        let first = predictor.predict(&req).unwrap();
        let second = predictor.predict(&req).unwrap();
        assert_eq!(first, second);
        assert_eq!(first.label, 0);
        assert_eq!(backend.calls.load(Ordering::Relaxed), 1);
        assert_eq!(predictor.stats.cache_hits.load(Ordering::Relaxed), 1);
    }

    #[test]
    fn cache_file_survives_reopen() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.jsonl");
        let backend = Arc::new(StubBackend::likelihood(0.9));
        {
            let predictor = Predictor::new(backend.clone())
                .with_cache_file(&path)
                .unwrap();
            predictor.predict(&request("persisted")).unwrap();
        }
        let predictor = Predictor::new(backend.clone())
            .with_cache_file(&path)
            .unwrap();
        let outcome = predictor.predict(&request("persisted")).unwrap();
        assert_eq!(outcome.label, 1);
        assert_eq!(backend.calls.load(Ordering::Relaxed), 1);
        let stats = cache_stats(&path).unwrap();
        assert_eq!(stats.lines, 1);
        assert_eq!(stats.distinct_keys, 1);
    }

    #[test]
    fn retries_transport_failures() {
        let backend = Arc::new(StubBackend::likelihood(0.8));
        backend.transport_failures.store(2, Ordering::Relaxed);
        let predictor = Predictor::new(backend.clone()).with_retry(RetryPolicy {
            attempts: 3,
            base_delay: Duration::from_millis(1),
        });
        let outcome = predictor.predict(&request("flaky")).unwrap();
        assert_eq!(outcome.label, 1);
        assert_eq!(backend.calls.load(Ordering::Relaxed), 3);
    }

    #[test]
    fn retries_exhaust_and_surface() {
        let backend = Arc::new(StubBackend::likelihood(0.8));
        backend.transport_failures.store(10, Ordering::Relaxed);
        let predictor = Predictor::new(backend.clone()).with_retry(RetryPolicy {
            attempts: 3,
            base_delay: Duration::from_millis(1),
        });
        assert!(matches!(
            predictor.predict(&request("down")),
            Err(Error::Transport(_))
        ));
        assert_eq!(backend.calls.load(Ordering::Relaxed), 3);
    }

    #[test]
    fn batch_preserves_order() {
        let predictor = Predictor::new(Arc::new(StubBackend::likelihood(0.6)));
        let requests: Vec<ChatRequest> = (0..3).map(|i| request(&format!("r{i}"))).collect();
        let outcomes = predictor.batch_predict(&requests, 2);
        assert_eq!(outcomes.len(), 3);
        assert!(outcomes.iter().all(|o| o.as_ref().unwrap().label == 1));
    }

    #[test]
    fn batch_isolates_per_item_failures() {
        let backend = StubBackend {
            fail_text: Some("r2".to_string()),
            ..StubBackend::likelihood(0.6)
        };
        let predictor = Predictor::new(Arc::new(backend));
        let requests: Vec<ChatRequest> = (0..5).map(|i| request(&format!("r{i}"))).collect();
        let outcomes = predictor.batch_predict(&requests, 3);
        for (i, outcome) in outcomes.iter().enumerate() {
            if i == 2 {
                assert!(outcome.is_err());
            } else {
                assert!(outcome.is_ok(), "index {i} failed: {outcome:?}");
            }
        }
    }

    #[test]
    fn concurrent_equal_keys_invoke_backend_once() {
        let backend = Arc::new(StubBackend::likelihood(0.7));
        let predictor = Predictor::new(backend.clone());
        let requests: Vec<ChatRequest> = (0..32).map(|_| request("same key")).collect();
        let outcomes = predictor.batch_predict(&requests, 8);
        assert!(outcomes.iter().all(Result::is_ok));
        assert_eq!(backend.calls.load(Ordering::Relaxed), 1);
        let first = outcomes[0].as_ref().unwrap();
        assert!(outcomes.iter().all(|o| o.as_ref().unwrap() == first));
    }

    #[test]
    fn fully_cached_batch_makes_no_backend_calls() {
        let backend = Arc::new(StubBackend::likelihood(0.6));
        let predictor = Predictor::new(backend.clone());
        let requests: Vec<ChatRequest> = (0..100).map(|i| request(&format!("r{i}"))).collect();
        predictor.batch_predict(&requests, 4);
        let calls_after_warmup = backend.calls.load(Ordering::Relaxed);
        assert_eq!(calls_after_warmup, 100);
        let outcomes = predictor.batch_predict(&requests, 4);
        assert_eq!(backend.calls.load(Ordering::Relaxed), calls_after_warmup);
        assert!(outcomes.iter().all(Result::is_ok));
    }

    #[test]
    fn equal_requests_have_equal_digests() {
        let a = request("same text");
        let b = request("same text");
        assert_eq!(a.digest(), b.digest());
        let c = request("different text");
        assert_ne!(a.digest(), c.digest());
        let mut d = request("same text");
        d.temperature = 0.7;
        assert_ne!(a.digest(), d.digest());
    }

    #[test]
    fn http_request_body_shape() {
        let backend = HttpBackend::new("http://localhost:9/v1", None, "test-model");
        let body = backend.request_body(&request("hello"));
        assert_eq!(body["model"], "test-model");
        assert_eq!(body["messages"][0]["role"], "user");
        assert_eq!(body["messages"][1]["role"], "assistant");
        assert_eq!(body["max_tokens"], 64);
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn extraction_deterministic_and_total(text in ".{0,120}") {
                let l = labels();
                let a = extract_bracketed_answer(&text, &l);
                let b = extract_bracketed_answer(&text, &l);
                match (a, b) {
                    (Ok(x), Ok(y)) => prop_assert_eq!(x, y),
                    (Err(_), Err(_)) => {}
                    _ => prop_assert!(false, "nondeterministic extraction"),
                }
            }

            #[test]
            fn likelihood_label_threshold(p in 0.0f64..=1.0) {
                let predictor = Predictor::new(Arc::new(StubBackend::likelihood(p)));
                let outcome = predictor.predict(&request(&format!("p={p}"))).unwrap();
                prop_assert_eq!(outcome.label == 1, p >= 0.5);
                let score = outcome.score.unwrap();
                prop_assert!((0.0..=1.0).contains(&score));
            }
        }
    }
}
