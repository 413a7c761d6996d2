//! Persistent, content-addressed cache of score responses.
//!
//! Entries live in one append-only log, `scores.log`, one record per line:
//! a 16-hex-digit checksum, a space, and a JSON body. Floats are stored as
//! their IEEE-754 bit patterns so a hit is bit-identical to the response
//! that was stored. The in-memory index maps a key to the byte range of its
//! newest record and is only updated after the record is fully written, so
//! readers never observe a torn entry. Records that fail their checksum are
//! treated as misses and copied to `quarantine.log`.

use std::collections::{HashMap, HashSet};
use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{BackendError, SamplingParams, ScoreRequest, ScoreResponse, ScoringBackend, TokenScore};

pub const CACHE_DIR_ENV: &str = "CCB_CACHE_DIR";
const LOG_FILE: &str = "scores.log";
const QUARANTINE_FILE: &str = "quarantine.log";

/// Digest of everything that determines a score response.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct CacheKey(String);

impl CacheKey {
    pub fn new(backend_id: &str, fingerprint: &str, request: &ScoreRequest) -> Self {
        let mut h = Sha256::new();
        let mut field = |bytes: &[u8]| {
            h.update((bytes.len() as u64).to_le_bytes());
            h.update(bytes);
        };
        field(b"ccb-score-v1");
        field(backend_id.as_bytes());
        field(fingerprint.as_bytes());
        field(request.context.as_bytes());
        field(request.continuation.as_bytes());
        let needs: Vec<&str> = request.needs.iter().map(|s| s.as_str()).collect();
        field(needs.join(",").as_bytes());
        match request.entropy_top_p {
            Some(p) => field(&p.to_bits().to_le_bytes()),
            None => field(b"full"),
        }
        CacheKey(hex::encode(h.finalize()))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

#[derive(Serialize, Deserialize)]
struct Record {
    key: String,
    backend_id: String,
    fingerprint: String,
    vocab_size: usize,
    /// `(token_text, realized_logprob, entropy, mean_vocab_logprob)`, floats
    /// as hex bit patterns.
    tokens: Vec<(String, String, String, String)>,
}

fn bits(x: f64) -> String {
    format!("{:016x}", x.to_bits())
}

fn unbits(s: &str) -> Option<f64> {
    u64::from_str_radix(s, 16).ok().filter(|_| s.len() == 16).map(f64::from_bits)
}

impl Record {
    fn response(&self) -> Option<ScoreResponse> {
        let tokens = self
            .tokens
            .iter()
            .map(|(text, lp, h, mv)| {
                Some(TokenScore {
                    token_text: text.clone(),
                    realized_logprob: unbits(lp)?,
                    entropy: unbits(h)?,
                    mean_vocab_logprob: unbits(mv)?,
                })
            })
            .collect::<Option<Vec<_>>>()?;
        Some(ScoreResponse::from_tokens(tokens, self.vocab_size))
    }
}

fn checksum(body: &[u8]) -> String {
    hex::encode(Sha256::digest(body))[..16].to_owned()
}

fn encode_line(record: &Record) -> Vec<u8> {
    let body = serde_json::to_string(record).expect("cache record serialisation cannot fail");
    let mut line = format!("{} ", checksum(body.as_bytes())).into_bytes();
    line.extend_from_slice(body.as_bytes());
    line.push(b'\n');
    line
}

/// Parse one line (without its newline).
fn decode_line(line: &[u8]) -> Option<Record> {
    if line.len() < 18 || line[16] != b' ' {
        return None;
    }
    let (sum, body) = (&line[..16], &line[17..]);
    if sum != checksum(body).as_bytes() {
        return None;
    }
    serde_json::from_slice(body).ok()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Slot {
    offset: u64,
    len: usize,
}

struct State {
    reader: File,
    index: HashMap<String, (Slot, String)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct CacheStats {
    pub entries: usize,
    pub bytes: u64,
    pub quarantined: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct VerifyReport {
    pub checked: usize,
    pub quarantined: usize,
}

pub struct ScoreCache {
    dir: PathBuf,
    state: RwLock<State>,
    writer: Mutex<File>,
}

impl std::fmt::Debug for ScoreCache {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ScoreCache").field("dir", &self.dir).finish()
    }
}

#[cfg(unix)]
fn read_at(file: &File, buf: &mut [u8], offset: u64) -> io::Result<()> {
    use std::os::unix::fs::FileExt;
    file.read_exact_at(buf, offset)
}

#[cfg(windows)]
fn read_at(file: &File, buf: &mut [u8], offset: u64) -> io::Result<()> {
    use std::os::windows::fs::FileExt;
    let mut done = 0;
    while done < buf.len() {
        let n = file.seek_read(&mut buf[done..], offset + done as u64)?;
        if n == 0 {
            return Err(io::ErrorKind::UnexpectedEof.into());
        }
        done += n;
    }
    Ok(())
}

/// Complete lines of a log with their offsets, and whether the file ended
/// in an unterminated fragment.
fn split_log(content: &[u8]) -> (Vec<(u64, &[u8])>, bool) {
    let mut lines = Vec::new();
    let mut start = 0;
    for (i, b) in content.iter().enumerate() {
        if *b == b'\n' {
            lines.push((start as u64, &content[start..i]));
            start = i + 1;
        }
    }
    (lines, start < content.len())
}

fn build_index(content: &[u8]) -> (HashMap<String, (Slot, String)>, usize) {
    let (lines, _) = split_log(content);
    let mut index = HashMap::new();
    let mut corrupt = 0;
    for (offset, line) in lines {
        match decode_line(line) {
            Some(r) => {
                index.insert(r.key, (Slot { offset, len: line.len() }, r.fingerprint));
            }
            None => corrupt += 1,
        }
    }
    (index, corrupt)
}

impl ScoreCache {
    pub fn open(dir: impl AsRef<Path>) -> io::Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(&dir)?;
        let log = dir.join(LOG_FILE);
        let mut writer = OpenOptions::new().create(true).append(true).open(&log)?;
        let content = fs::read(&log)?;
        let (_, torn) = split_log(&content);
        if torn {
            tracing::warn!(path = %log.display(), "score cache log ends in a torn record; ignoring it");
            writer.write_all(b"\n")?;
        }
        let (index, corrupt) = build_index(&content);
        if corrupt > 0 {
            tracing::warn!(path = %log.display(), corrupt, "score cache has corrupt records; run `cache verify`");
        }
        let reader = File::open(&log)?;
        Ok(ScoreCache { dir, state: RwLock::new(State { reader, index }), writer: Mutex::new(writer) })
    }

    /// Open the cache named by `CCB_CACHE_DIR`, if set.
    pub fn from_env() -> io::Result<Option<Self>> {
        match std::env::var_os(CACHE_DIR_ENV) {
            Some(dir) if !dir.is_empty() => Self::open(PathBuf::from(dir)).map(Some),
            _ => Ok(None),
        }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn lookup(&self, key: &CacheKey) -> Option<ScoreResponse> {
        let (slot, bytes) = {
            let state = self.state.read().unwrap();
            let slot = state.index.get(key.as_str())?.0;
            let mut buf = vec![0u8; slot.len];
            if let Err(e) = read_at(&state.reader, &mut buf, slot.offset) {
                tracing::warn!(error = %e, "score cache read failed");
                return None;
            }
            (slot, buf)
        };
        match decode_line(&bytes).filter(|r| r.key == key.as_str()).and_then(|r| r.response()) {
            Some(response) => Some(response),
            None => {
                self.quarantine(key, slot, &bytes);
                None
            }
        }
    }

    fn quarantine(&self, key: &CacheKey, slot: Slot, bytes: &[u8]) {
        tracing::warn!(key = key.as_str(), offset = slot.offset, "corrupt score cache entry quarantined");
        if let Err(e) = self.append_quarantine(&[bytes]) {
            tracing::warn!(error = %e, "could not write score cache quarantine");
        }
        let mut state = self.state.write().unwrap();
        if state.index.get(key.as_str()).map(|(s, _)| *s) == Some(slot) {
            state.index.remove(key.as_str());
        }
    }

    fn append_quarantine(&self, lines: &[&[u8]]) -> io::Result<()> {
        let mut q = OpenOptions::new().create(true).append(true).open(self.dir.join(QUARANTINE_FILE))?;
        let mut buf = Vec::new();
        for line in lines {
            buf.extend_from_slice(line);
            buf.push(b'\n');
        }
        q.write_all(&buf)
    }

    pub fn store(
        &self,
        key: &CacheKey,
        backend_id: &str,
        fingerprint: &str,
        response: &ScoreResponse,
    ) -> io::Result<()> {
        let record = Record {
            key: key.as_str().to_owned(),
            backend_id: backend_id.to_owned(),
            fingerprint: fingerprint.to_owned(),
            vocab_size: response.vocab_size,
            tokens: response
                .tokens
                .iter()
                .map(|t| {
                    (t.token_text.clone(), bits(t.realized_logprob), bits(t.entropy), bits(t.mean_vocab_logprob))
                })
                .collect(),
        };
        let line = encode_line(&record);
        let mut writer = self.writer.lock().unwrap();
        let offset = writer.metadata()?.len();
        writer.write_all(&line)?;
        let slot = Slot { offset, len: line.len() - 1 };
        self.state.write().unwrap().index.insert(record.key, (slot, record.fingerprint));
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.state.read().unwrap().index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn stats(&self) -> io::Result<CacheStats> {
        let entries = self.len();
        let bytes = fs::metadata(self.dir.join(LOG_FILE))?.len();
        let quarantined = match fs::read(self.dir.join(QUARANTINE_FILE)) {
            Ok(q) => q.iter().filter(|b| **b == b'\n').count(),
            Err(e) if e.kind() == io::ErrorKind::NotFound => 0,
            Err(e) => return Err(e),
        };
        Ok(CacheStats { entries, bytes, quarantined })
    }

    /// Checksum every record; move corrupt ones to the quarantine file and
    /// compact the log.
    pub fn verify(&self) -> io::Result<VerifyReport> {
        let mut writer = self.writer.lock().unwrap();
        let content = fs::read(self.dir.join(LOG_FILE))?;
        let (lines, _) = split_log(&content);
        let (good, bad): (Vec<&[u8]>, Vec<&[u8]>) =
            lines.iter().map(|(_, l)| *l).partition(|l| decode_line(l).is_some());
        // Blank lines are left by torn-write repair; they are not entries.
        let bad: Vec<&[u8]> = bad.into_iter().filter(|l| !l.is_empty()).collect();
        let report = VerifyReport { checked: good.len() + bad.len(), quarantined: bad.len() };
        if !bad.is_empty() {
            self.append_quarantine(&bad)?;
        }
        if good.len() != lines.len() {
            self.rewrite(&mut writer, &good)?;
        }
        Ok(report)
    }

    /// Drop records whose backend fingerprint is not in `known`. Returns the
    /// number of records removed.
    pub fn gc(&self, known: &HashSet<String>) -> io::Result<usize> {
        let mut writer = self.writer.lock().unwrap();
        let content = fs::read(self.dir.join(LOG_FILE))?;
        let (lines, _) = split_log(&content);
        let mut removed = 0;
        let keep: Vec<&[u8]> = lines
            .iter()
            .map(|(_, l)| *l)
            .filter(|l| match decode_line(l) {
                Some(r) if !known.contains(&r.fingerprint) => {
                    removed += 1;
                    false
                }
                _ => true,
            })
            .collect();
        if removed > 0 {
            self.rewrite(&mut writer, &keep)?;
        }
        Ok(removed)
    }

    fn rewrite(&self, writer: &mut File, lines: &[&[u8]]) -> io::Result<()> {
        let log = self.dir.join(LOG_FILE);
        let tmp = self.dir.join(format!("{LOG_FILE}.tmp"));
        let mut content = Vec::new();
        for line in lines {
            content.extend_from_slice(line);
            content.push(b'\n');
        }
        {
            let mut f = File::create(&tmp)?;
            f.write_all(&content)?;
            f.sync_all()?;
        }
        let mut state = self.state.write().unwrap();
        fs::rename(&tmp, &log)?;
        *writer = OpenOptions::new().append(true).open(&log)?;
        state.reader = File::open(&log)?;
        state.index = build_index(&content).0;
        Ok(())
    }
}

/// A backend whose score calls go through a [`ScoreCache`].
pub struct CachedBackend {
    inner: Arc<dyn ScoringBackend>,
    cache: Arc<ScoreCache>,
}

impl CachedBackend {
    pub fn new(inner: Arc<dyn ScoringBackend>, cache: Arc<ScoreCache>) -> Self {
        Self { inner, cache }
    }
}

impl ScoringBackend for CachedBackend {
    fn id(&self) -> &str {
        self.inner.id()
    }

    fn fingerprint(&self) -> &str {
        self.inner.fingerprint()
    }

    fn vocab_size(&self) -> usize {
        self.inner.vocab_size()
    }

    fn score(&self, request: &ScoreRequest) -> Result<ScoreResponse, BackendError> {
        let key = CacheKey::new(self.inner.id(), self.inner.fingerprint(), request);
        if let Some(hit) = self.cache.lookup(&key) {
            return Ok(hit);
        }
        let response = self.inner.score(request)?;
        if let Err(e) = self.cache.store(&key, self.inner.id(), self.inner.fingerprint(), &response) {
            tracing::warn!(error = %e, "could not store score in cache");
        }
        Ok(response)
    }

    fn sample(&self, context: &str, params: &SamplingParams, seed: u64) -> Result<String, BackendError> {
        self.inner.sample(context, params, seed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::Statistic;

    fn response(seed: f64) -> ScoreResponse {
        ScoreResponse::from_tokens(
            vec![
                TokenScore {
                    token_text: "a".into(),
                    realized_logprob: -seed,
                    entropy: seed / 3.0,
                    mean_vocab_logprob: f64::NEG_INFINITY,
                },
                TokenScore {
                    token_text: " b".into(),
                    realized_logprob: -0.1 * seed,
                    entropy: 0.0,
                    mean_vocab_logprob: -1.0 / 3.0,
                },
            ],
            4,
        )
    }

    fn key(cont: &str, needs: &[Statistic]) -> CacheKey {
        CacheKey::new("t", "fp", &ScoreRequest::new("t", "ctx", cont, needs.iter().copied()).unwrap())
    }

    #[test]
    fn store_then_lookup_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let cache = ScoreCache::open(dir.path()).unwrap();
        let k = key("a b", &Statistic::ALL);
        assert!(cache.lookup(&k).is_none());
        let r = response(std::f64::consts::PI);
        cache.store(&k, "t", "fp", &r).unwrap();
        let hit = cache.lookup(&k).unwrap();
        for (a, b) in hit.tokens.iter().zip(&r.tokens) {
            assert_eq!(a.realized_logprob.to_bits(), b.realized_logprob.to_bits());
            assert_eq!(a.mean_vocab_logprob.to_bits(), b.mean_vocab_logprob.to_bits());
        }
        assert_eq!(hit, r);

        let reopened = ScoreCache::open(dir.path()).unwrap();
        assert_eq!(reopened.lookup(&k).unwrap(), r);
    }

    #[test]
    fn needs_are_part_of_the_key() {
        let dir = tempfile::tempdir().unwrap();
        let cache = ScoreCache::open(dir.path()).unwrap();
        cache.store(&key("a b", &Statistic::ALL), "t", "fp", &response(1.0)).unwrap();
        assert!(cache.lookup(&key("a b", &[Statistic::Entropy])).is_none());
    }

    #[test]
    fn empty_cache_stats_are_zero() {
        let dir = tempfile::tempdir().unwrap();
        let cache = ScoreCache::open(dir.path()).unwrap();
        assert_eq!(cache.stats().unwrap(), CacheStats::default());
    }

    #[test]
    fn torn_tail_is_ignored_and_later_appends_survive() {
        let dir = tempfile::tempdir().unwrap();
        {
            let cache = ScoreCache::open(dir.path()).unwrap();
            cache.store(&key("x", &Statistic::ALL), "t", "fp", &response(1.0)).unwrap();
        }
        let log = dir.path().join(LOG_FILE);
        let mut f = OpenOptions::new().append(true).open(&log).unwrap();
        f.write_all(b"0123456789abcdef {\"key\":\"trunc").unwrap();
        drop(f);
        let cache = ScoreCache::open(dir.path()).unwrap();
        assert_eq!(cache.len(), 1);
        cache.store(&key("y", &Statistic::ALL), "t", "fp", &response(2.0)).unwrap();
        let cache = ScoreCache::open(dir.path()).unwrap();
        assert_eq!(cache.lookup(&key("y", &Statistic::ALL)).unwrap(), response(2.0));
        assert_eq!(cache.verify().unwrap().quarantined, 1);
    }

    #[test]
    fn gc_without_stale_fingerprints_deletes_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let cache = ScoreCache::open(dir.path()).unwrap();
        cache.store(&key("x", &Statistic::ALL), "t", "fp", &response(1.0)).unwrap();
        cache.store(&key("y", &Statistic::ALL), "t", "old", &response(1.0)).unwrap();
        let known: HashSet<String> = ["fp".to_owned(), "old".to_owned()].into();
        assert_eq!(cache.gc(&known).unwrap(), 0);
        let known: HashSet<String> = ["fp".to_owned()].into();
        assert_eq!(cache.gc(&known).unwrap(), 1);
        assert_eq!(cache.len(), 1);
        assert!(cache.lookup(&key("x", &Statistic::ALL)).is_some());
    }
}
