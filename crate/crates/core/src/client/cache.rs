use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use super::{
    cache_key, prompt_hash, ClientError, CompletionClient, CompletionRecord, GenerationParams,
    Source,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CacheMode {
    /// Serve hits from the cache, forward misses to the inner client and
    /// append their results.
    Record,
    /// Serve hits only; a miss is an error.
    ReplayOnly,
}

/// Append-only JSONL completion cache, one [`CompletionRecord`] per line.
pub struct RecordReplayClient {
    path: PathBuf,
    mode: CacheMode,
    inner: Option<Box<dyn CompletionClient>>,
    entries: Mutex<HashMap<String, CompletionRecord>>,
    writer: Mutex<Option<File>>,
}

impl std::fmt::Debug for RecordReplayClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RecordReplayClient")
            .field("path", &self.path)
            .field("mode", &self.mode)
            .finish_non_exhaustive()
    }
}

impl RecordReplayClient {
    pub fn record(path: &Path, inner: Box<dyn CompletionClient>) -> Result<Self, ClientError> {
        let entries = load_entries(path)?;
        let writer = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| ClientError::Cache(format!("{}: {e}", path.display())))?;
        Ok(Self {
            path: path.to_path_buf(),
            mode: CacheMode::Record,
            inner: Some(inner),
            entries: Mutex::new(entries),
            writer: Mutex::new(Some(writer)),
        })
    }

    pub fn replay_only(path: &Path) -> Result<Self, ClientError> {
        Ok(Self {
            path: path.to_path_buf(),
            mode: CacheMode::ReplayOnly,
            inner: None,
            entries: Mutex::new(load_entries(path)?),
            writer: Mutex::new(None),
        })
    }

    pub fn mode(&self) -> CacheMode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.entries.lock().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn load_entries(path: &Path) -> Result<HashMap<String, CompletionRecord>, ClientError> {
    let mut entries = HashMap::new();
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(entries),
        Err(e) => return Err(ClientError::Cache(format!("{}: {e}", path.display()))),
    };
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| ClientError::Cache(format!("{}: {e}", path.display())))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: CompletionRecord = serde_json::from_str(&line).map_err(|e| {
            ClientError::Cache(format!("{}:{}: {e}", path.display(), n + 1))
        })?;
        // First occurrence wins so appended duplicates cannot change replays.
        entries.entry(record.cache_key()).or_insert(record);
    }
    Ok(entries)
}

impl CompletionClient for RecordReplayClient {
    fn complete(
        &self,
        prompt: &str,
        params: &GenerationParams,
        attempt_index: u32,
    ) -> Result<CompletionRecord, ClientError> {
        let hash = prompt_hash(prompt);
        let key = cache_key(&hash, params, attempt_index);
        if let Some(hit) = self.entries.lock().expect("cache lock").get(&key) {
            return Ok(CompletionRecord {
                source: Source::Replay,
                ..hit.clone()
            });
        }
        let Some(inner) = &self.inner else {
            return Err(ClientError::CacheMiss {
                prompt_hash: hash,
                attempt_index,
            });
        };
        let record = inner.complete(prompt, params, attempt_index)?;
        let mut line = serde_json::to_string(&record).expect("record serializes");
        line.push('\n');
        {
            let mut writer = self.writer.lock().expect("cache writer lock");
            if let Some(file) = writer.as_mut() {
                file.write_all(line.as_bytes())
                    .and_then(|_| file.flush())
                    .map_err(|e| ClientError::Cache(format!("{}: {e}", self.path.display())))?;
            }
        }
        self.entries
            .lock()
            .expect("cache lock")
            .entry(key)
            .or_insert_with(|| record.clone());
        Ok(record)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::client::{ContinuationClient, StubBackend, StubScript};
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Arc;

    struct Counting {
        calls: Arc<AtomicUsize>,
        inner: ContinuationClient<StubBackend>,
    }

    impl CompletionClient for Counting {
        fn complete(
            &self,
            prompt: &str,
            params: &GenerationParams,
            attempt_index: u32,
        ) -> Result<CompletionRecord, ClientError> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            self.inner.complete(prompt, params, attempt_index)
        }
    }

    fn counting(text: &str) -> (Box<dyn CompletionClient>, Arc<AtomicUsize>) {
        let calls = Arc::new(AtomicUsize::new(0));
        let client = Counting {
            calls: Arc::clone(&calls),
            inner: ContinuationClient::new(StubBackend::new(StubScript::with_default(text))),
        };
        (Box::new(client), calls)
    }

    #[test]
    fn record_then_serve_from_cache() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.jsonl");
        let (inner, calls) = counting("return 1");
        let client = RecordReplayClient::record(&path, inner).unwrap();
        let params = GenerationParams::default();
        let first = client.complete("p", &params, 1).unwrap();
        let second = client.complete("p", &params, 1).unwrap();
        assert_eq!(calls.load(Ordering::SeqCst), 1);
        assert_eq!(first.source, Source::Stub);
        assert_eq!(second.source, Source::Replay);
        assert_eq!(first.completion_text, second.completion_text);

        // a different attempt or temperature is a different entry
        client.complete("p", &params, 2).unwrap();
        client.complete("p", &params.with_temperature(0.4), 1).unwrap();
        assert_eq!(calls.load(Ordering::SeqCst), 3);
        assert_eq!(std::fs::read_to_string(&path).unwrap().lines().count(), 3);
    }

    #[test]
    fn warm_replay_is_stable() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.jsonl");
        let (inner, _) = counting("x y z");
        RecordReplayClient::record(&path, inner)
            .unwrap()
            .complete("p", &Default::default(), 1)
            .unwrap();
        let before = std::fs::read(&path).unwrap();
        let replay = RecordReplayClient::replay_only(&path).unwrap();
        let a = replay.complete("p", &Default::default(), 1).unwrap();
        let b = replay.complete("p", &Default::default(), 1).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.completion_text, "x y z");
        assert_eq!(std::fs::read(&path).unwrap(), before);
    }

    #[test]
    fn cold_replay_misses() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.jsonl");
        std::fs::write(&path, "").unwrap();
        let replay = RecordReplayClient::replay_only(&path).unwrap();
        let err = replay.complete("p", &Default::default(), 1).unwrap_err();
        assert_eq!(
            err,
            ClientError::CacheMiss {
                prompt_hash: prompt_hash("p"),
                attempt_index: 1
            }
        );
    }

    #[test]
    fn corrupt_cache_line_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.jsonl");
        std::fs::write(&path, "{not json}\n").unwrap();
        assert!(matches!(
            RecordReplayClient::replay_only(&path),
            Err(ClientError::Cache(msg)) if msg.contains(":1:")
        ));
    }
}
