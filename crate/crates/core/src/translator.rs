//! Machine-translation client: pluggable backends, batching with bounded
//! parallelism, retry with exponential backoff, and a persistent cache keyed
//! by case id.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Lang;

/// Environment variable naming the remote translation endpoint.
pub const ENDPOINT_ENV: &str = "LEXJUDGE_MT_ENDPOINT";

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("transport: {0}")]
    Transport(String),
    #[error("unsupported language pair {0}->{1}")]
    UnsupportedPair(Lang, Lang),
}

#[derive(Debug, Error)]
pub enum CacheError {
    #[error("cache io at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt cache file {path} (line {line}): {message}")]
    Corrupt {
        path: String,
        line: usize,
        message: String,
    },
}

#[derive(Debug, Error)]
pub enum TranslateError {
    #[error("translation failed after {attempts} attempts: {message}")]
    Transport { attempts: u32, message: String },
    #[error("unsupported language pair {0}->{1}")]
    UnsupportedPair(Lang, Lang),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("backend returned {got} translations for {expected} texts")]
    LengthMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Cache(#[from] CacheError),
}

/// A translation engine. Implementations must return one output per input,
/// in order.
pub trait TranslationBackend: Send + Sync {
    fn model_tag(&self) -> &str;
    fn translate_batch(
        &self,
        texts: &[String],
        source: Lang,
        target: Lang,
    ) -> Result<Vec<String>, BackendError>;
}

/// Deterministic stand-in: prefixes `⟦tgt⟧ ` and keeps the text unchanged.
#[derive(Debug, Default)]
pub struct MockBackend {
    calls: AtomicUsize,
    texts: AtomicUsize,
}

impl MockBackend {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn translate_text(text: &str, target: Lang) -> String {
        format!("⟦{target}⟧ {text}")
    }

    /// Number of `translate_batch` calls served so far.
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn texts_translated(&self) -> usize {
        self.texts.load(Ordering::SeqCst)
    }
}

impl TranslationBackend for MockBackend {
    fn model_tag(&self) -> &str {
        "mock-v1"
    }

    fn translate_batch(
        &self,
        texts: &[String],
        source: Lang,
        target: Lang,
    ) -> Result<Vec<String>, BackendError> {
        if source == target || target == Lang::En {
            return Err(BackendError::UnsupportedPair(source, target));
        }
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.texts.fetch_add(texts.len(), Ordering::SeqCst);
        Ok(texts
            .iter()
            .map(|t| Self::translate_text(t, target))
            .collect())
    }
}

#[derive(Serialize)]
struct HttpRequest<'a> {
    texts: &'a [String],
    source: Lang,
    target: Lang,
}

#[derive(Deserialize)]
struct HttpResponse {
    translations: Vec<String>,
}

/// JSON-over-POST backend: `{texts, source, target}` in,
/// `{translations}` out.
pub struct HttpBackend {
    endpoint: String,
    tag: String,
    agent: ureq::Agent,
}

impl HttpBackend {
    pub fn new(endpoint: impl Into<String>) -> Self {
        let endpoint = endpoint.into();
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(300)))
            .build()
            .into();
        HttpBackend {
            tag: format!("http:{endpoint}"),
            endpoint,
            agent,
        }
    }

    pub fn from_env() -> Option<Self> {
        std::env::var(ENDPOINT_ENV)
            .ok()
            .filter(|s| !s.is_empty())
            .map(Self::new)
    }
}

impl TranslationBackend for HttpBackend {
    fn model_tag(&self) -> &str {
        &self.tag
    }

    fn translate_batch(
        &self,
        texts: &[String],
        source: Lang,
        target: Lang,
    ) -> Result<Vec<String>, BackendError> {
        let mut response = self
            .agent
            .post(&self.endpoint)
            .send_json(HttpRequest {
                texts,
                source,
                target,
            })
            .map_err(|e| match e {
                ureq::Error::StatusCode(422) => BackendError::UnsupportedPair(source, target),
                other => BackendError::Transport(other.to_string()),
            })?;
        let body: HttpResponse = response
            .body_mut()
            .read_json()
            .map_err(|e| BackendError::Transport(format!("bad response body: {e}")))?;
        Ok(body.translations)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CacheKey {
    pub id: String,
    pub source: Lang,
    pub target: Lang,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheEntry {
    #[serde(flatten)]
    pub key: CacheKey,
    pub translated_text: String,
    pub model_tag: String,
}

struct CacheState {
    entries: HashMap<CacheKey, CacheEntry>,
    files: HashMap<(Lang, Lang), File>,
}

/// Translation cache. With a directory, entries persist as one append-only
/// line-delimited file per language pair; without one it lives in memory.
pub struct TranslationCache {
    dir: Option<PathBuf>,
    state: Mutex<CacheState>,
}

fn pair_file(dir: &Path, source: Lang, target: Lang) -> PathBuf {
    dir.join(format!("{source}-{target}.jsonl"))
}

impl TranslationCache {
    pub fn in_memory() -> Self {
        TranslationCache {
            dir: None,
            state: Mutex::new(CacheState {
                entries: HashMap::new(),
                files: HashMap::new(),
            }),
        }
    }

    /// Opens (creating if needed) a cache directory. A trailing partial line
    /// left by an interrupted write is dropped; any other unparsable line is a
    /// hard error.
    pub fn open(dir: &Path) -> Result<Self, CacheError> {
        let io = |path: &Path| {
            let path = path.display().to_string();
            move |source| CacheError::Io { path, source }
        };
        fs::create_dir_all(dir).map_err(io(dir))?;
        let mut entries = HashMap::new();
        let mut paths: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(io(dir))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "jsonl"))
            .collect();
        paths.sort();
        for path in paths {
            let mut file = OpenOptions::new()
                .read(true)
                .write(true)
                .open(&path)
                .map_err(io(&path))?;
            let mut bytes = Vec::new();
            file.read_to_end(&mut bytes).map_err(io(&path))?;
            let complete = bytes.iter().rposition(|b| *b == b'\n').map_or(0, |i| i + 1);
            if complete < bytes.len() {
                log::warn!(
                    "dropping {} bytes of interrupted write at end of {}",
                    bytes.len() - complete,
                    path.display()
                );
                file.set_len(complete as u64).map_err(io(&path))?;
                file.seek(SeekFrom::End(0)).map_err(io(&path))?;
            }
            let corrupt = |line: usize, message: String| CacheError::Corrupt {
                path: path.display().to_string(),
                line,
                message,
            };
            let text = std::str::from_utf8(&bytes[..complete])
                .map_err(|e| corrupt(0, format!("invalid UTF-8: {e}")))?;
            let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("");
            for (i, line) in text.lines().enumerate() {
                let entry: CacheEntry =
                    serde_json::from_str(line).map_err(|e| corrupt(i + 1, e.to_string()))?;
                if stem != format!("{}-{}", entry.key.source, entry.key.target) {
                    return Err(corrupt(i + 1, "entry language pair does not match file".into()));
                }
                entries.insert(entry.key.clone(), entry);
            }
        }
        Ok(TranslationCache {
            dir: Some(dir.to_path_buf()),
            state: Mutex::new(CacheState {
                entries,
                files: HashMap::new(),
            }),
        })
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    pub fn len(&self) -> usize {
        self.state.lock().unwrap().entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, key: &CacheKey) -> Option<CacheEntry> {
        self.state.lock().unwrap().entries.get(key).cloned()
    }

    /// Entry for `key` only if it was produced by `model_tag`.
    pub fn get_fresh(&self, key: &CacheKey, model_tag: &str) -> Option<CacheEntry> {
        self.get(key).filter(|e| e.model_tag == model_tag)
    }

    /// Records an entry; the line is appended with a single write so readers
    /// never observe half an entry.
    pub fn put(&self, entry: CacheEntry) -> Result<(), CacheError> {
        let mut state = self.state.lock().unwrap();
        if state.entries.get(&entry.key) == Some(&entry) {
            return Ok(());
        }
        if let Some(dir) = &self.dir {
            let pair = (entry.key.source, entry.key.target);
            let path = pair_file(dir, pair.0, pair.1);
            let io = |source| CacheError::Io {
                path: path.display().to_string(),
                source,
            };
            if let std::collections::hash_map::Entry::Vacant(e) = state.files.entry(pair) {
                let file = OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(&path)
                    .map_err(io)?;
                e.insert(file);
            }
            let mut line = serde_json::to_string(&entry).expect("entry serializes");
            line.push('\n');
            let file = state.files.get_mut(&pair).unwrap();
            file.write_all(line.as_bytes()).map_err(io)?;
            file.flush().map_err(io)?;
        }
        state.entries.insert(entry.key.clone(), entry);
        Ok(())
    }

    /// Flushes all open pair files to stable storage.
    pub fn sync(&self) -> Result<(), CacheError> {
        let state = self.state.lock().unwrap();
        for file in state.files.values() {
            file.sync_data().map_err(|source| CacheError::Io {
                path: self.dir.as_ref().unwrap().display().to_string(),
                source,
            })?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub id: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranslationRequest {
    pub segments: Vec<Segment>,
    pub source_language: Lang,
    pub target_language: Lang,
}

impl TranslationRequest {
    pub fn validate(&self) -> Result<(), TranslateError> {
        if self.segments.is_empty() {
            return Err(TranslateError::InvalidRequest("no texts".into()));
        }
        if self.source_language == self.target_language {
            return Err(TranslateError::InvalidRequest(format!(
                "source and target are both {}",
                self.source_language
            )));
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
        RetryPolicy {
            attempts: 3,
            base_delay: Duration::from_secs(1),
        }
    }
}

/// Cached, batched, retrying front end over a backend.
pub struct Translator {
    backend: Arc<dyn TranslationBackend>,
    cache: TranslationCache,
    pub batch_size: usize,
    pub max_in_flight: usize,
    pub retry: RetryPolicy,
}

impl Translator {
    pub fn new(backend: Arc<dyn TranslationBackend>, cache: TranslationCache) -> Self {
        Translator {
            backend,
            cache,
            batch_size: 16,
            max_in_flight: 4,
            retry: RetryPolicy::default(),
        }
    }

    pub fn cache(&self) -> &TranslationCache {
        &self.cache
    }

    pub fn model_tag(&self) -> &str {
        self.backend.model_tag()
    }

    fn call_with_retry(
        &self,
        texts: &[String],
        source: Lang,
        target: Lang,
    ) -> Result<Vec<String>, TranslateError> {
        let mut delay = self.retry.base_delay;
        let mut attempt = 0;
        loop {
            attempt += 1;
            match self.backend.translate_batch(texts, source, target) {
                Ok(out) if out.len() == texts.len() => return Ok(out),
                Ok(out) => {
                    return Err(TranslateError::LengthMismatch {
                        expected: texts.len(),
                        got: out.len(),
                    })
                }
                Err(BackendError::UnsupportedPair(s, t)) => {
                    return Err(TranslateError::UnsupportedPair(s, t))
                }
                Err(BackendError::Transport(message)) => {
                    if attempt >= self.retry.attempts {
                        return Err(TranslateError::Transport {
                            attempts: attempt,
                            message,
                        });
                    }
                    log::warn!("translation attempt {attempt} failed: {message}; retrying");
                    thread::sleep(delay);
                    delay *= 2;
                }
            }
        }
    }

    /// Translates every segment, serving cached ids without a backend call.
    /// Output order matches input order.
    pub fn translate(&self, request: &TranslationRequest) -> Result<Vec<String>, TranslateError> {
        request.validate()?;
        let (source, target) = (request.source_language, request.target_language);
        let tag = self.backend.model_tag().to_string();
        let key = |seg: &Segment| CacheKey {
            id: seg.id.clone(),
            source,
            target,
        };
        let mut missing: Vec<&Segment> = Vec::new();
        let mut seen = std::collections::HashSet::new();
        for seg in &request.segments {
            if self.cache.get_fresh(&key(seg), &tag).is_none() && seen.insert(&seg.id) {
                missing.push(seg);
            }
        }
        let batches: Vec<&[&Segment]> = missing.chunks(self.batch_size.max(1)).collect();
        let next = AtomicUsize::new(0);
        let failure: Mutex<Option<TranslateError>> = Mutex::new(None);
        let workers = self.max_in_flight.max(1).min(batches.len());
        thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    if failure.lock().unwrap().is_some() {
                        return;
                    }
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    let Some(batch) = batches.get(i) else { return };
                    let texts: Vec<String> = batch.iter().map(|s| s.text.clone()).collect();
                    let result = self.call_with_retry(&texts, source, target).and_then(|out| {
                        for (seg, text) in batch.iter().zip(out) {
                            self.cache.put(CacheEntry {
                                key: key(seg),
                                translated_text: text,
                                model_tag: tag.clone(),
                            })?;
                        }
                        Ok(())
                    });
                    if let Err(e) = result {
                        failure.lock().unwrap().get_or_insert(e);
                        return;
                    }
                });
            }
        });
        if let Some(e) = failure.into_inner().unwrap() {
            return Err(e);
        }
        request
            .segments
            .iter()
            .map(|seg| {
                self.cache
                    .get_fresh(&key(seg), &tag)
                    .map(|e| e.translated_text)
                    .ok_or_else(|| TranslateError::InvalidRequest(format!("no translation for {}", seg.id)))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn request(texts: &[&str], source: Lang, target: Lang) -> TranslationRequest {
        TranslationRequest {
            segments: texts
                .iter()
                .enumerate()
                .map(|(i, t)| Segment {
                    id: format!("c{i}"),
                    text: t.to_string(),
                })
                .collect(),
            source_language: source,
            target_language: target,
        }
    }

    fn quick(translator: &mut Translator) {
        translator.retry.base_delay = Duration::ZERO;
    }

    #[test]
    fn mock_prefixes_target_tag() {
        let t = Translator::new(Arc::new(MockBackend::new()), TranslationCache::in_memory());
        let out = t.translate(&request(&["a b c"], Lang::De, Lang::Fr)).unwrap();
        assert_eq!(out, vec!["⟦fr⟧ a b c".to_string()]);
    }

    #[test]
    fn order_and_length_preserved() {
        let mut t = Translator::new(Arc::new(MockBackend::new()), TranslationCache::in_memory());
        t.batch_size = 2;
        let out = t
            .translate(&request(&["x", "y", "z"], Lang::It, Lang::De))
            .unwrap();
        assert_eq!(out, ["⟦de⟧ x", "⟦de⟧ y", "⟦de⟧ z"]);
    }

    #[test]
    fn repeated_request_hits_cache() {
        let backend = Arc::new(MockBackend::new());
        let t = Translator::new(backend.clone(), TranslationCache::in_memory());
        let req = request(&["same text"], Lang::Fr, Lang::It);
        let a = t.translate(&req).unwrap();
        let b = t.translate(&req).unwrap();
        assert_eq!(a, b);
        assert_eq!(backend.calls(), 1);
    }

    #[test]
    fn invalid_requests() {
        let t = Translator::new(Arc::new(MockBackend::new()), TranslationCache::in_memory());
        assert!(matches!(
            t.translate(&request(&[], Lang::De, Lang::Fr)),
            Err(TranslateError::InvalidRequest(_))
        ));
        assert!(matches!(
            t.translate(&request(&["a"], Lang::De, Lang::De)),
            Err(TranslateError::InvalidRequest(_))
        ));
        assert!(matches!(
            t.translate(&request(&["a"], Lang::De, Lang::En)),
            Err(TranslateError::UnsupportedPair(Lang::De, Lang::En))
        ));
    }

    struct Flaky {
        failures: usize,
        calls: AtomicUsize,
    }

    impl TranslationBackend for Flaky {
        fn model_tag(&self) -> &str {
            "flaky"
        }
        fn translate_batch(
            &self,
            texts: &[String],
            _source: Lang,
            target: Lang,
        ) -> Result<Vec<String>, BackendError> {
            let n = self.calls.fetch_add(1, Ordering::SeqCst);
            if n < self.failures {
                Err(BackendError::Transport("connection reset".into()))
            } else {
                Ok(texts.iter().map(|t| MockBackend::translate_text(t, target)).collect())
            }
        }
    }

    #[test]
    fn retries_transient_failures() {
        let backend = Arc::new(Flaky {
            failures: 2,
            calls: AtomicUsize::new(0),
        });
        let mut t = Translator::new(backend.clone(), TranslationCache::in_memory());
        quick(&mut t);
        let out = t.translate(&request(&["a"], Lang::De, Lang::It)).unwrap();
        assert_eq!(out, ["⟦it⟧ a"]);
        assert_eq!(backend.calls.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn gives_up_after_bounded_attempts() {
        let backend = Arc::new(Flaky {
            failures: usize::MAX,
            calls: AtomicUsize::new(0),
        });
        let mut t = Translator::new(backend.clone(), TranslationCache::in_memory());
        quick(&mut t);
        match t.translate(&request(&["a"], Lang::De, Lang::It)) {
            Err(TranslateError::Transport { attempts, .. }) => assert_eq!(attempts, 3),
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(backend.calls.load(Ordering::SeqCst), 3);
    }

    fn entry(id: &str, text: &str) -> CacheEntry {
        CacheEntry {
            key: CacheKey {
                id: id.into(),
                source: Lang::De,
                target: Lang::Fr,
            },
            translated_text: text.into(),
            model_tag: "mock-v1".into(),
        }
    }

    #[test]
    fn cache_round_trip_and_persistence() {
        let dir = tempfile::tempdir().unwrap();
        let cache = TranslationCache::open(dir.path()).unwrap();
        assert!(cache.get(&entry("a", "").key).is_none());
        let e = entry("a", "⟦fr⟧ hallo");
        cache.put(e.clone()).unwrap();
        assert_eq!(cache.get(&e.key), Some(e.clone()));
        drop(cache);
        let reopened = TranslationCache::open(dir.path()).unwrap();
        assert_eq!(reopened.get(&e.key), Some(e));
    }

    #[test]
    fn concurrent_puts_both_retrievable() {
        let dir = tempfile::tempdir().unwrap();
        let cache = TranslationCache::open(dir.path()).unwrap();
        thread::scope(|s| {
            for w in 0..2 {
                let cache = &cache;
                s.spawn(move || {
                    for i in 0..200 {
                        cache.put(entry(&format!("w{w}-{i}"), "t")).unwrap();
                    }
                });
            }
        });
        drop(cache);
        let reopened = TranslationCache::open(dir.path()).unwrap();
        assert_eq!(reopened.len(), 400);
        assert!(reopened.get(&entry("w0-199", "").key).is_some());
        assert!(reopened.get(&entry("w1-0", "").key).is_some());
    }

    #[test]
    fn torn_tail_is_dropped_not_reused() {
        let dir = tempfile::tempdir().unwrap();
        let cache = TranslationCache::open(dir.path()).unwrap();
        cache.put(entry("a", "ok")).unwrap();
        drop(cache);
        let path = pair_file(dir.path(), Lang::De, Lang::Fr);
        let mut f = OpenOptions::new().append(true).open(&path).unwrap();
        f.write_all(br#"{"id":"b","source":"de","tar"#).unwrap();
        drop(f);
        let cache = TranslationCache::open(dir.path()).unwrap();
        assert_eq!(cache.len(), 1);
        cache.put(entry("c", "fine")).unwrap();
        drop(cache);
        let cache = TranslationCache::open(dir.path()).unwrap();
        assert_eq!(cache.len(), 2);
    }

    #[test]
    fn corrupt_line_is_error_naming_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = pair_file(dir.path(), Lang::De, Lang::Fr);
        fs::write(&path, "not json\n").unwrap();
        match TranslationCache::open(dir.path()) {
            Err(CacheError::Corrupt { path: p, line, .. }) => {
                assert!(p.ends_with("de-fr.jsonl"));
                assert_eq!(line, 1);
            }
            other => panic!("unexpected {:?}", other.err()),
        }
    }

    #[test]
    fn stale_model_tag_is_retranslated() {
        let cache = TranslationCache::in_memory();
        let mut stale = entry("c0", "old");
        stale.model_tag = "other-model".into();
        cache.put(stale).unwrap();
        let backend = Arc::new(MockBackend::new());
        let t = Translator::new(backend.clone(), cache);
        let out = t.translate(&request(&["neu"], Lang::De, Lang::Fr)).unwrap();
        assert_eq!(out, ["⟦fr⟧ neu"]);
        assert_eq!(backend.calls(), 1);
    }
}
