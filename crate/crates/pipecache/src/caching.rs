//! Explicit cache components: key-value, scorer, dense scorer, retriever
//! and indexer caches, plus lazy construction, temporary mode and local
//! pack/unpack archives.
//!
//! Every cache is a transformer wrapper with get-or-compute semantics: key
//! columns address stored value columns; misses are delegated to the
//! wrapped transformer and the computed values are persisted. A miss with
//! no inner transformer is an error. Output is bit-identical to running
//! the inner transformer directly, cold or warm.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use tempfile::TempDir;
use thiserror::Error;

use crate::frame::{self, Frame, FrameError, Kind, Value};
use crate::pipeline::{Param, PipelineError, Transformer};
use crate::retrieval::fresh_instance_id;
use crate::storage::{
    canonical_encode_row, decode_frame, digest_hex, encode_frame, key_digest, KvLog, StorageError,
};

pub const CACHE_FORMAT_VERSION: &str = "1";

#[derive(Debug, Error)]
pub enum CacheError {
    #[error("cache miss for key {key} and no inner transformer is configured")]
    MissWithoutInner { key: String },
    #[error("cache label mismatch: stored `{stored}`, expected `{expected}`")]
    LabelMismatch { stored: String, expected: String },
    #[error("cache meta invalid: {0}")]
    BadMeta(String),
    #[error("inner transformer output is missing key {0} for a computed row")]
    InnerMissingRow(String),
    #[error("docno `{0}` is not in the dense cache's ordinal map")]
    UnknownDocno(String),
    #[error("computed score is NaN; NaN is the dense-cache missing sentinel")]
    NanScore,
    #[error("indexer cache at {0} is not empty; appends are not supported")]
    NotEmpty(PathBuf),
    #[error("cache is open for writing; close it before packing")]
    OpenForWrite,
    #[error("archive error: {0}")]
    Archive(String),
    #[error(transparent)]
    Storage(#[from] StorageError),
    #[error(transparent)]
    Frame(#[from] FrameError),
    #[error("pipeline error inside cache: {0}")]
    Pipeline(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl From<PipelineError> for CacheError {
    fn from(e: PipelineError) -> CacheError {
        CacheError::Pipeline(e.to_string())
    }
}

impl From<CacheError> for PipelineError {
    fn from(e: CacheError) -> PipelineError {
        PipelineError::Leaf {
            leaf: "cache".into(),
            message: e.to_string(),
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CacheError + '_ {
    move |source| CacheError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Cache directory root: persistent path or a temporary directory removed
/// when the cache is dropped.
pub enum CacheDir {
    Persistent(PathBuf),
    Temporary(TempDir),
}

impl CacheDir {
    fn resolve(path: Option<PathBuf>) -> Result<CacheDir, CacheError> {
        match path {
            Some(p) => {
                fs::create_dir_all(&p).map_err(io_err(&p))?;
                Ok(CacheDir::Persistent(p))
            }
            None => {
                let tmp = TempDir::new().map_err(|e| CacheError::Io {
                    path: std::env::temp_dir(),
                    source: e,
                })?;
                Ok(CacheDir::Temporary(tmp))
            }
        }
    }

    pub fn path(&self) -> &Path {
        match self {
            CacheDir::Persistent(p) => p,
            CacheDir::Temporary(t) => t.path(),
        }
    }
}

/// UTF-8 `key=value` meta file inside each cache directory. The label is a
/// caller-supplied configuration tag checked on open; a mismatch is the
/// cache telling you it was built for a different setup.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CacheMeta {
    pub kind: String,
    pub key_columns: Vec<String>,
    pub value_columns: Vec<String>,
    pub label: String,
}

impl CacheMeta {
    fn write(&self, dir: &Path) -> Result<(), CacheError> {
        let path = dir.join("meta");
        let text = format!(
            "version={}\nkind={}\nkey_columns={}\nvalue_columns={}\nlabel={}\n",
            CACHE_FORMAT_VERSION,
            self.kind,
            self.key_columns.join(","),
            self.value_columns.join(","),
            self.label,
        );
        fs::write(&path, text).map_err(io_err(&path))
    }

    fn read(dir: &Path) -> Result<CacheMeta, CacheError> {
        let path = dir.join("meta");
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        let mut fields: HashMap<&str, &str> = HashMap::new();
        for line in text.lines() {
            if let Some((k, v)) = line.split_once('=') {
                fields.insert(k, v);
            }
        }
        let get = |k: &str| -> Result<String, CacheError> {
            fields
                .get(k)
                .map(|s| s.to_string())
                .ok_or_else(|| CacheError::BadMeta(format!("missing field `{k}`")))
        };
        if get("version")? != CACHE_FORMAT_VERSION {
            return Err(CacheError::BadMeta("unsupported format version".into()));
        }
        let split = |s: String| -> Vec<String> {
            if s.is_empty() {
                Vec::new()
            } else {
                s.split(',').map(str::to_string).collect()
            }
        };
        Ok(CacheMeta {
            kind: get("kind")?,
            key_columns: split(get("key_columns")?),
            value_columns: split(get("value_columns")?),
            label: get("label")?,
        })
    }

    /// Write meta if absent, otherwise check the stored one matches.
    fn init(&self, dir: &Path) -> Result<(), CacheError> {
        if dir.join("meta").exists() {
            let stored = CacheMeta::read(dir)?;
            if stored.label != self.label {
                return Err(CacheError::LabelMismatch {
                    stored: stored.label,
                    expected: self.label.clone(),
                });
            }
            if stored.kind != self.kind
                || stored.key_columns != self.key_columns
                || stored.value_columns != self.value_columns
            {
                return Err(CacheError::BadMeta(format!(
                    "stored configuration {stored:?} does not match {self:?}"
                )));
            }
            Ok(())
        } else {
            self.write(dir)
        }
    }
}

fn describe_key(frame: &Frame, row: usize, key_columns: &[String]) -> String {
    let mut names: Vec<&String> = key_columns.iter().collect();
    names.sort_unstable();
    names
        .iter()
        .map(|name| {
            let v = frame
                .value(row, name)
                .map(|v| match v {
                    Value::Text(s) => s.clone(),
                    Value::Real(x) => format!("{x:?}"),
                    Value::Int(x) => x.to_string(),
                    Value::RealList(_) => "<list>".into(),
                })
                .unwrap_or_else(|| "<missing>".into());
            format!("{name}={v}")
        })
        .collect::<Vec<_>>()
        .join(", ")
}

/// Shared get-or-compute over a KvLog: one stored value frame row per key.
/// Misses are batched into a single inner call preserving relative order;
/// computed rows are matched back by key digest.
struct RowCacheCore {
    log: Mutex<KvLog>,
    key_columns: Vec<String>,
    value_columns: Vec<String>,
}

impl RowCacheCore {
    fn apply(&self, inner: Option<&Transformer>, input: &Frame) -> Result<Frame, CacheError> {
        let mut digests = Vec::with_capacity(input.len());
        let mut cached: Vec<Option<Frame>> = Vec::with_capacity(input.len());
        let mut miss_rows: Vec<usize> = Vec::new();
        {
            let mut log = self.log.lock().unwrap();
            for i in 0..input.len() {
                let digest = key_digest(&canonical_encode_row(input, i, &self.key_columns)?);
                match log.get(&digest)? {
                    Some(bytes) => cached.push(Some(decode_frame(&bytes)?)),
                    None => {
                        cached.push(None);
                        miss_rows.push(i);
                    }
                }
                digests.push(digest);
            }
        }
        let mut computed: HashMap<[u8; 32], Frame> = HashMap::new();
        if !miss_rows.is_empty() {
            let inner = inner.ok_or_else(|| CacheError::MissWithoutInner {
                key: describe_key(input, miss_rows[0], &self.key_columns),
            })?;
            let miss_frame = input.select_rows(&miss_rows);
            let out = inner.apply(&miss_frame)?;
            let value_refs: Vec<&str> = self.value_columns.iter().map(String::as_str).collect();
            let mut log = self.log.lock().unwrap();
            for j in 0..out.len() {
                let digest = key_digest(&canonical_encode_row(&out, j, &self.key_columns)?);
                let values = out.project(&value_refs)?.select_rows(&[j]);
                log.put(digest, &encode_frame(&values))?;
                computed.insert(digest, values);
            }
        }
        // merge: value columns added/overwritten, row order = input order
        let mut out = input.clone();
        for name in &self.value_columns {
            let mut column = Vec::with_capacity(input.len());
            let mut kind = None;
            for i in 0..input.len() {
                let values = match &cached[i] {
                    Some(f) => f,
                    None => computed.get(&digests[i]).ok_or_else(|| {
                        CacheError::InnerMissingRow(describe_key(input, i, &self.key_columns))
                    })?,
                };
                let v = values
                    .value(0, name)
                    .ok_or_else(|| CacheError::BadMeta(format!("stored value lacks `{name}`")))?
                    .clone();
                kind.get_or_insert(v.kind());
                column.push(v);
            }
            if let Some(kind) = kind {
                out = out.with_column(name, kind, column)?;
            }
        }
        Ok(out)
    }
}

/// Row-by-row key-value cache mapping key columns to value columns.
pub struct KeyValueCache {
    dir: CacheDir,
    core: RowCacheCore,
    inner: Option<Transformer>,
}

impl KeyValueCache {
    pub fn new(
        path: Option<PathBuf>,
        inner: Option<Transformer>,
        key_columns: Vec<String>,
        value_columns: Vec<String>,
        label: &str,
    ) -> Result<KeyValueCache, CacheError> {
        Self::with_kind("key-value", path, inner, key_columns, value_columns, label)
    }

    fn with_kind(
        kind: &str,
        path: Option<PathBuf>,
        inner: Option<Transformer>,
        key_columns: Vec<String>,
        value_columns: Vec<String>,
        label: &str,
    ) -> Result<KeyValueCache, CacheError> {
        let dir = CacheDir::resolve(path)?;
        CacheMeta {
            kind: kind.into(),
            key_columns: key_columns.clone(),
            value_columns: value_columns.clone(),
            label: label.into(),
        }
        .init(dir.path())?;
        let log = KvLog::open(dir.path())?;
        Ok(KeyValueCache {
            dir,
            core: RowCacheCore {
                log: Mutex::new(log),
                key_columns,
                value_columns,
            },
            inner,
        })
    }

    pub fn path(&self) -> &Path {
        self.dir.path()
    }

    pub fn entries(&self) -> usize {
        self.core.log.lock().unwrap().len()
    }

    pub fn apply(&self, input: &Frame) -> Result<Frame, CacheError> {
        self.core.apply(self.inner.as_ref(), input)
    }

    /// Wrap as a pipeline leaf.
    pub fn into_transformer(self) -> Transformer {
        let cache = Arc::new(self);
        Transformer::leaf(
            "kv_cache",
            vec![("id".into(), Param::Int(fresh_instance_id()))],
            Arc::new(move |f: &Frame| Ok(cache.apply(f)?)),
        )
    }
}

/// Key-value cache specialised to scorers: key defaults to (query, docno),
/// value is the score, and ranks are reassigned after merging.
pub struct ScorerCache {
    kv: KeyValueCache,
}

impl ScorerCache {
    pub fn new(
        path: Option<PathBuf>,
        inner: Option<Transformer>,
        label: &str,
    ) -> Result<ScorerCache, CacheError> {
        Self::with_key_columns(
            path,
            inner,
            vec!["query".into(), "docno".into()],
            label,
        )
    }

    pub fn with_key_columns(
        path: Option<PathBuf>,
        inner: Option<Transformer>,
        key_columns: Vec<String>,
        label: &str,
    ) -> Result<ScorerCache, CacheError> {
        Ok(ScorerCache {
            kv: KeyValueCache::with_kind(
                "scorer",
                path,
                inner,
                key_columns,
                vec!["score".into()],
                label,
            )?,
        })
    }

    pub fn path(&self) -> &Path {
        self.kv.path()
    }

    pub fn entries(&self) -> usize {
        self.kv.entries()
    }

    pub fn apply(&self, input: &Frame) -> Result<Frame, CacheError> {
        let merged = self.kv.apply(input)?;
        Ok(frame::assign_ranks(&merged)?)
    }

    pub fn into_transformer(self) -> Transformer {
        let cache = Arc::new(self);
        Transformer::leaf(
            "scorer_cache",
            vec![("id".into(), Param::Int(fresh_instance_id()))],
            Arc::new(move |f: &Frame| Ok(cache.apply(f)?)),
        )
    }
}

const NAN_SENTINEL: u64 = 0x7ff8_0000_0000_0000;

/// Dense scorer cache: a fixed corpus snapshot (`docnos` ordinal map) and
/// one fixed-width f64 score file per query, named by the hex digest of the
/// query. NaN slots mean missing; stored scores are never NaN.
pub struct DenseScorerCache {
    dir: CacheDir,
    inner: Option<Transformer>,
    ordinals: HashMap<String, usize>,
    corpus_size: usize,
    files: Mutex<()>,
}

impl DenseScorerCache {
    pub fn new(
        path: Option<PathBuf>,
        inner: Option<Transformer>,
        docnos: &[String],
        label: &str,
    ) -> Result<DenseScorerCache, CacheError> {
        let dir = CacheDir::resolve(path)?;
        CacheMeta {
            kind: "dense-scorer".into(),
            key_columns: vec!["query".into(), "docno".into()],
            value_columns: vec!["score".into()],
            label: label.into(),
        }
        .init(dir.path())?;
        let docnos_path = dir.path().join("docnos");
        if docnos_path.exists() {
            let stored = fs::read_to_string(&docnos_path).map_err(io_err(&docnos_path))?;
            let stored: Vec<&str> = if stored.is_empty() {
                Vec::new()
            } else {
                stored.split('\n').collect()
            };
            if stored.len() != docnos.len()
                || stored.iter().zip(docnos).any(|(a, b)| *a != b.as_str())
            {
                return Err(CacheError::BadMeta(
                    "dense cache docno snapshot does not match the given corpus".into(),
                ));
            }
        } else {
            fs::write(&docnos_path, docnos.join("\n")).map_err(io_err(&docnos_path))?;
        }
        let ordinals = docnos
            .iter()
            .enumerate()
            .map(|(i, d)| (d.clone(), i))
            .collect();
        Ok(DenseScorerCache {
            dir,
            inner,
            ordinals,
            corpus_size: docnos.len(),
            files: Mutex::new(()),
        })
    }

    pub fn path(&self) -> &Path {
        self.dir.path()
    }

    fn query_file(&self, query: &str) -> Result<PathBuf, CacheError> {
        let mut probe = Frame::new(vec![("query".into(), Kind::Text)]).unwrap();
        probe.push_row(vec![Value::Text(query.into())]).unwrap();
        let digest = key_digest(&canonical_encode_row(&probe, 0, &["query".into()])?);
        Ok(self.dir.path().join(format!("{}.f64", digest_hex(&digest))))
    }

    fn read_scores(&self, path: &Path) -> Result<Option<Vec<f64>>, CacheError> {
        if !path.exists() {
            return Ok(None);
        }
        let bytes = fs::read(path).map_err(io_err(path))?;
        if bytes.len() != self.corpus_size * 8 {
            return Err(CacheError::BadMeta(format!(
                "dense score file {} has wrong size",
                path.display()
            )));
        }
        Ok(Some(
            bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ))
    }

    pub fn apply(&self, input: &Frame) -> Result<Frame, CacheError> {
        let _guard = self.files.lock().unwrap();
        let mut per_query: HashMap<String, Vec<f64>> = HashMap::new();
        let mut scores: Vec<Option<f64>> = Vec::with_capacity(input.len());
        let mut miss_rows = Vec::new();
        for i in 0..input.len() {
            let query = input
                .text(i, "query")
                .ok_or_else(|| CacheError::Frame(FrameError::UnknownColumn("query".into())))?
                .to_string();
            let docno = input
                .text(i, "docno")
                .ok_or_else(|| CacheError::Frame(FrameError::UnknownColumn("docno".into())))?;
            let &ordinal = self
                .ordinals
                .get(docno)
                .ok_or_else(|| CacheError::UnknownDocno(docno.to_string()))?;
            if !per_query.contains_key(&query) {
                let path = self.query_file(&query)?;
                let slots = self
                    .read_scores(&path)?
                    .unwrap_or_else(|| vec![f64::from_bits(NAN_SENTINEL); self.corpus_size]);
                per_query.insert(query.clone(), slots);
            }
            let s = per_query[&query][ordinal];
            if s.is_nan() {
                scores.push(None);
                miss_rows.push(i);
            } else {
                scores.push(Some(s));
            }
        }
        if !miss_rows.is_empty() {
            let inner = self.inner.as_ref().ok_or_else(|| {
                CacheError::MissWithoutInner {
                    key: describe_key(
                        input,
                        miss_rows[0],
                        &["query".into(), "docno".into()],
                    ),
                }
            })?;
            let miss_frame = input.select_rows(&miss_rows);
            let out = inner.apply(&miss_frame)?;
            let mut computed: HashMap<(String, String), f64> = HashMap::new();
            for j in 0..out.len() {
                let query = out.text(j, "query").unwrap_or_default().to_string();
                let docno = out.text(j, "docno").unwrap_or_default().to_string();
                let score = out
                    .real(j, "score")
                    .ok_or_else(|| CacheError::Frame(FrameError::UnknownColumn("score".into())))?;
                if score.is_nan() {
                    return Err(CacheError::NanScore);
                }
                computed.insert((query, docno), score);
            }
            for &i in &miss_rows {
                let query = input.text(i, "query").unwrap().to_string();
                let docno = input.text(i, "docno").unwrap().to_string();
                let score = *computed.get(&(query.clone(), docno.clone())).ok_or_else(|| {
                    CacheError::InnerMissingRow(format!("query={query}, docno={docno}"))
                })?;
                let ordinal = self.ordinals[&docno];
                per_query.get_mut(&query).unwrap()[ordinal] = score;
                scores[i] = Some(score);
                let path = self.query_file(&query)?;
                if !path.exists() {
                    let blank = vec![f64::from_bits(NAN_SENTINEL).to_le_bytes(); self.corpus_size]
                        .concat();
                    fs::write(&path, blank).map_err(io_err(&path))?;
                }
                let mut file = OpenOptions::new()
                    .write(true)
                    .open(&path)
                    .map_err(io_err(&path))?;
                file.seek(SeekFrom::Start(ordinal as u64 * 8))
                    .map_err(io_err(&path))?;
                file.write_all(&score.to_le_bytes()).map_err(io_err(&path))?;
            }
        }
        let score_col: Vec<Value> = scores
            .into_iter()
            .map(|s| Value::Real(s.unwrap()))
            .collect();
        let merged = input.with_column("score", Kind::Real, score_col)?;
        Ok(frame::assign_ranks(&merged)?)
    }

    pub fn into_transformer(self) -> Transformer {
        let cache = Arc::new(self);
        Transformer::leaf(
            "dense_scorer_cache",
            vec![("id".into(), Param::Int(fresh_instance_id()))],
            Arc::new(move |f: &Frame| Ok(cache.apply(f)?)),
        )
    }
}

/// Cache for transformers that map one input row to a whole result frame,
/// most notably retrievers. Default key: all input columns, sorted by name.
pub struct RetrieverCache {
    dir: CacheDir,
    log: Mutex<KvLog>,
    inner: Option<Transformer>,
    key_columns: Option<Vec<String>>,
    label: String,
}

impl RetrieverCache {
    pub fn new(
        path: Option<PathBuf>,
        inner: Option<Transformer>,
        key_columns: Option<Vec<String>>,
        label: &str,
    ) -> Result<RetrieverCache, CacheError> {
        let dir = CacheDir::resolve(path)?;
        CacheMeta {
            kind: "retriever".into(),
            key_columns: key_columns.clone().unwrap_or_default(),
            value_columns: Vec::new(),
            label: label.into(),
        }
        .init(dir.path())?;
        let log = KvLog::open(dir.path())?;
        Ok(RetrieverCache {
            dir,
            log: Mutex::new(log),
            inner,
            key_columns,
            label: label.into(),
        })
    }

    pub fn path(&self) -> &Path {
        self.dir.path()
    }

    pub fn entries(&self) -> usize {
        self.log.lock().unwrap().len()
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn apply(&self, input: &Frame) -> Result<Frame, CacheError> {
        let key_columns: Vec<String> = match &self.key_columns {
            Some(cols) => cols.clone(),
            None => {
                let mut names: Vec<String> =
                    input.columns().iter().map(|(n, _)| n.clone()).collect();
                names.sort_unstable();
                names
            }
        };
        let mut outputs: Vec<Frame> = Vec::with_capacity(input.len());
        for i in 0..input.len() {
            let digest = key_digest(&canonical_encode_row(input, i, &key_columns)?);
            let hit = self.log.lock().unwrap().get(&digest)?;
            let result = match hit {
                Some(bytes) => decode_frame(&bytes)?,
                None => {
                    let inner = self.inner.as_ref().ok_or_else(|| {
                        CacheError::MissWithoutInner {
                            key: describe_key(input, i, &key_columns),
                        }
                    })?;
                    let single = input.select_rows(&[i]);
                    let out = inner.apply(&single)?;
                    self.log.lock().unwrap().put(digest, &encode_frame(&out))?;
                    out
                }
            };
            outputs.push(result);
        }
        let mut iter = outputs.into_iter();
        let Some(mut acc) = iter.next() else {
            return Ok(input.clone());
        };
        for f in iter {
            acc = frame::concat_rows(&acc, &f)?;
        }
        Ok(acc)
    }

    pub fn into_transformer(self) -> Transformer {
        let cache = Arc::new(self);
        Transformer::leaf(
            "retriever_cache",
            vec![("id".into(), Param::Int(fresh_instance_id()))],
            Arc::new(move |f: &Frame| Ok(cache.apply(f)?)),
        )
    }
}

/// Terminal cache for indexing streams: stores a whole sequence of rows in
/// arrival order, with an optional docno sidecar for forward-index lookups.
pub struct IndexerCache {
    dir: CacheDir,
}

impl IndexerCache {
    pub fn create(path: Option<PathBuf>, label: &str) -> Result<IndexerCache, CacheError> {
        let dir = CacheDir::resolve(path)?;
        let records = dir.path().join("records");
        if records.exists() {
            return Err(CacheError::NotEmpty(dir.path().to_path_buf()));
        }
        CacheMeta {
            kind: "indexer".into(),
            key_columns: Vec::new(),
            value_columns: Vec::new(),
            label: label.into(),
        }
        .init(dir.path())?;
        Ok(IndexerCache { dir })
    }

    pub fn open(path: PathBuf, label: &str) -> Result<IndexerCache, CacheError> {
        let meta = CacheMeta::read(&path)?;
        if meta.label != label {
            return Err(CacheError::LabelMismatch {
                stored: meta.label,
                expected: label.into(),
            });
        }
        Ok(IndexerCache {
            dir: CacheDir::Persistent(path),
        })
    }

    pub fn path(&self) -> &Path {
        self.dir.path()
    }

    /// Persist all rows of the corpus frame, in order. The cache must be
    /// empty; this is a terminal indexing operation.
    pub fn index_frame(&self, corpus: &Frame) -> Result<u64, CacheError> {
        let records_path = self.dir.path().join("records");
        if records_path.exists() {
            return Err(CacheError::NotEmpty(self.dir.path().to_path_buf()));
        }
        let mut records = File::create(&records_path).map_err(io_err(&records_path))?;
        let has_docno = corpus.col_index("docno").is_some();
        let mut docnos = Vec::new();
        for i in 0..corpus.len() {
            let row = encode_frame(&corpus.select_rows(&[i]));
            records
                .write_all(&(row.len() as u32).to_le_bytes())
                .map_err(io_err(&records_path))?;
            records.write_all(&row).map_err(io_err(&records_path))?;
            if has_docno {
                docnos.push(corpus.text(i, "docno").unwrap().to_string());
            }
        }
        records.flush().map_err(io_err(&records_path))?;
        if has_docno {
            let docnos_path = self.dir.path().join("docnos");
            fs::write(&docnos_path, docnos.join("\n")).map_err(io_err(&docnos_path))?;
        }
        Ok(corpus.len() as u64)
    }

    /// All stored rows, in exactly the stored order.
    pub fn read_all(&self) -> Result<Frame, CacheError> {
        let records_path = self.dir.path().join("records");
        if !records_path.exists() {
            return Err(CacheError::BadMeta("indexer cache has no records".into()));
        }
        let bytes = fs::read(&records_path).map_err(io_err(&records_path))?;
        let mut rows = Vec::new();
        let mut pos = 0usize;
        while pos < bytes.len() {
            if pos + 4 > bytes.len() {
                return Err(CacheError::BadMeta("records file truncated".into()));
            }
            let len = u32::from_le_bytes(bytes[pos..pos + 4].try_into().unwrap()) as usize;
            pos += 4;
            if pos + len > bytes.len() {
                return Err(CacheError::BadMeta("records file truncated".into()));
            }
            rows.push(decode_frame(&bytes[pos..pos + len])?);
            pos += len;
        }
        let mut iter = rows.into_iter();
        let Some(mut acc) = iter.next() else {
            return Err(CacheError::BadMeta("indexer cache is empty".into()));
        };
        for f in iter {
            acc = frame::concat_rows(&acc, &f)?;
        }
        Ok(acc)
    }

    pub fn record_count(&self) -> Result<u64, CacheError> {
        let records_path = self.dir.path().join("records");
        if !records_path.exists() {
            return Ok(0);
        }
        let bytes = fs::read(&records_path).map_err(io_err(&records_path))?;
        let mut count = 0u64;
        let mut pos = 0usize;
        while pos + 4 <= bytes.len() {
            let len = u32::from_le_bytes(bytes[pos..pos + 4].try_into().unwrap()) as usize;
            pos += 4 + len;
            count += 1;
        }
        Ok(count)
    }

    /// Forward-index lookup: rows returned in request order. Only the
    /// requested records are decoded.
    pub fn lookup(&self, docnos: &[&str]) -> Result<Frame, CacheError> {
        let docnos_path = self.dir.path().join("docnos");
        let stored = fs::read_to_string(&docnos_path).map_err(io_err(&docnos_path))?;
        let ordinals: HashMap<&str, usize> = stored
            .split('\n')
            .enumerate()
            .map(|(i, d)| (d, i))
            .collect();
        let records_path = self.dir.path().join("records");
        let bytes = fs::read(&records_path).map_err(io_err(&records_path))?;
        let mut spans = Vec::new();
        let mut pos = 0usize;
        while pos < bytes.len() {
            if pos + 4 > bytes.len() {
                return Err(CacheError::BadMeta("records file truncated".into()));
            }
            let len = u32::from_le_bytes(bytes[pos..pos + 4].try_into().unwrap()) as usize;
            pos += 4;
            if pos + len > bytes.len() {
                return Err(CacheError::BadMeta("records file truncated".into()));
            }
            spans.push((pos, len));
            pos += len;
        }
        let record = |i: usize| -> Result<Frame, CacheError> {
            let (start, len) = *spans
                .get(i)
                .ok_or_else(|| CacheError::BadMeta("docnos/records mismatch".into()))?;
            Ok(decode_frame(&bytes[start..start + len])?)
        };
        if docnos.is_empty() {
            return Ok(record(0)?.select_rows(&[]));
        }
        let mut acc: Option<Frame> = None;
        for d in docnos {
            let &i = ordinals
                .get(d)
                .ok_or_else(|| CacheError::UnknownDocno(d.to_string()))?;
            let row = record(i)?;
            acc = Some(match acc {
                None => row,
                Some(prev) => frame::concat_rows(&prev, &row)?,
            });
        }
        Ok(acc.unwrap())
    }
}

/// Defer transformer construction to first use. The factory runs at most
/// once; failures surface on every apply and are not cached.
pub fn lazy<F>(factory: F) -> Transformer
where
    F: Fn() -> Result<Transformer, PipelineError> + Send + Sync + 'static,
{
    let slot: Mutex<Option<Transformer>> = Mutex::new(None);
    Transformer::leaf(
        "lazy",
        vec![("id".into(), Param::Int(fresh_instance_id()))],
        Arc::new(move |f: &Frame| {
            let mut guard = slot.lock().unwrap();
            if guard.is_none() {
                *guard = Some(factory()?);
            }
            guard.as_ref().unwrap().apply(f)
        }),
    )
}

/// Pack a closed cache directory into a single ustar archive.
pub fn pack(cache_dir: &Path, archive_path: &Path) -> Result<(), CacheError> {
    if cache_dir.join("LOCK").exists() {
        return Err(CacheError::OpenForWrite);
    }
    let file = File::create(archive_path).map_err(io_err(archive_path))?;
    let mut builder = tar::Builder::new(file);
    let mut names: Vec<PathBuf> = fs::read_dir(cache_dir)
        .map_err(io_err(cache_dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    names.sort();
    for path in names {
        let name = path.file_name().unwrap().to_string_lossy().to_string();
        builder
            .append_path_with_name(&path, name)
            .map_err(|e| CacheError::Archive(e.to_string()))?;
    }
    builder
        .finish()
        .map_err(|e| CacheError::Archive(e.to_string()))?;
    Ok(())
}

/// Unpack an archive produced by [`pack`] into `dest`, reproducing the
/// cache directory byte for byte.
pub fn unpack(archive_path: &Path, dest: &Path) -> Result<(), CacheError> {
    let file = File::open(archive_path).map_err(io_err(archive_path))?;
    let mut archive = tar::Archive::new(file);
    fs::create_dir_all(dest).map_err(io_err(dest))?;
    archive
        .unpack(dest)
        .map_err(|e| CacheError::Archive(e.to_string()))?;
    // a corrupt archive may unpack nothing useful; require at least a meta
    let mut found = false;
    if let Ok(entries) = fs::read_dir(dest) {
        found = entries.count() > 0;
    }
    if !found {
        return Err(CacheError::Archive("archive contained no entries".into()));
    }
    Ok(())
}

/// Read entry count and total byte size for `cmd cache stats`.
pub fn cache_stats(dir: &Path) -> Result<(CacheMeta, u64, u64), CacheError> {
    let meta = CacheMeta::read(dir)?;
    let mut bytes = 0u64;
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let entry = entry.map_err(io_err(dir))?;
        bytes += entry.metadata().map_err(io_err(dir))?.len();
    }
    let entries = match meta.kind.as_str() {
        "indexer" => IndexerCache {
            dir: CacheDir::Persistent(dir.to_path_buf()),
        }
        .record_count()?,
        "dense-scorer" => fs::read_dir(dir)
            .map_err(io_err(dir))?
            .filter_map(|e| e.ok())
            .filter(|e| e.path().extension().is_some_and(|x| x == "f64"))
            .count() as u64,
        _ => {
            if dir.join("log").exists() {
                KvLog::open_read_only(dir)?.len() as u64
            } else {
                0
            }
        }
    };
    Ok((meta, entries, bytes))
}
