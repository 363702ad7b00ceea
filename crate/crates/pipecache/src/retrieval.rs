//! Deterministic toy retrieval stack: synthetic corpora, an inverted index
//! with BM25 scoring, a text store, and stand-in rerankers.
//!
//! The `overlap` scorer is pointwise (row-independent, hence cacheable);
//! the `pairwise` reranker is listwise: each score depends on the other
//! candidates in the pool, so it is deliberately not cacheable.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::{self, File};
use std::io::Read;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use thiserror::Error;

use crate::frame::{self, Frame, Kind, RelationKind, Value};
use crate::pipeline::{Param, PipelineError, Transformer};

const BM25_K1: f64 = 1.2;
const BM25_B: f64 = 0.75;

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("duplicate docno `{0}` in corpus")]
    DuplicateDocno(String),
    #[error("unknown docno `{0}`")]
    UnknownDocno(String),
    #[error("invalid corpus spec: {0}")]
    BadSpec(String),
    #[error("index file corrupt: {0}")]
    Corrupt(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RetrievalError + '_ {
    move |source| RetrievalError::Io {
        path: path.to_path_buf(),
        source,
    }
}

impl From<RetrievalError> for PipelineError {
    fn from(e: RetrievalError) -> PipelineError {
        PipelineError::Leaf {
            leaf: "retrieval".into(),
            message: e.to_string(),
        }
    }
}

/// Lowercase, split on any non-alphanumeric, drop empties.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

/// Inverted index over a document corpus. Postings are sorted by document
/// ordinal; terms iterate in byte order for deterministic serialization.
pub struct InvertedIndex {
    postings: BTreeMap<String, Vec<(u32, u32)>>,
    docnos: Vec<String>,
    doc_lengths: Vec<u32>,
    avgdl: f64,
}

impl InvertedIndex {
    pub fn num_docs(&self) -> u32 {
        self.docnos.len() as u32
    }

    pub fn avgdl(&self) -> f64 {
        self.avgdl
    }

    pub fn doc_length(&self, ordinal: usize) -> u32 {
        self.doc_lengths[ordinal]
    }

    pub fn df(&self, term: &str) -> u32 {
        self.postings.get(term).map_or(0, |p| p.len() as u32)
    }
}

/// docno -> text lookup, persisted beside the index. Covers exactly the
/// indexed docnos.
pub struct TextStore {
    docnos: Vec<String>,
    texts: Vec<String>,
    by_docno: HashMap<String, usize>,
}

impl TextStore {
    pub fn get(&self, docno: &str) -> Option<&str> {
        self.by_docno.get(docno).map(|&i| self.texts[i].as_str())
    }

    pub fn len(&self) -> usize {
        self.docnos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docnos.is_empty()
    }

    pub fn docnos(&self) -> &[String] {
        &self.docnos
    }
}

/// Build index and text store from a D-frame with `docno` and `text`.
pub fn build_index(corpus: &Frame) -> Result<(InvertedIndex, TextStore), RetrievalError> {
    let mut postings: BTreeMap<String, Vec<(u32, u32)>> = BTreeMap::new();
    let mut docnos = Vec::new();
    let mut texts = Vec::new();
    let mut by_docno = HashMap::new();
    let mut doc_lengths = Vec::new();
    let mut total_len = 0u64;
    for i in 0..corpus.len() {
        let docno = corpus
            .text(i, "docno")
            .ok_or_else(|| RetrievalError::Corrupt("corpus missing docno column".into()))?
            .to_string();
        let text = corpus.text(i, "text").unwrap_or_default().to_string();
        if by_docno.insert(docno.clone(), docnos.len()).is_some() {
            return Err(RetrievalError::DuplicateDocno(docno));
        }
        let ordinal = docnos.len() as u32;
        let terms = tokenize(&text);
        let mut tf: BTreeMap<&str, u32> = BTreeMap::new();
        for t in &terms {
            *tf.entry(t).or_insert(0) += 1;
        }
        for (term, count) in tf {
            postings.entry(term.to_string()).or_default().push((ordinal, count));
        }
        doc_lengths.push(terms.len() as u32);
        total_len += terms.len() as u64;
        docnos.push(docno);
        texts.push(text);
    }
    let n = docnos.len();
    let avgdl = if n == 0 { 0.0 } else { total_len as f64 / n as f64 };
    Ok((
        InvertedIndex {
            postings,
            docnos: docnos.clone(),
            doc_lengths,
            avgdl,
        },
        TextStore {
            docnos,
            texts,
            by_docno,
        },
    ))
}

/// Robertson BM25 with k1=1.2, b=0.75 and +1-smoothed idf. Only documents
/// with positive score are returned; ties break by docno ascending.
pub fn bm25_retrieve(
    index: &InvertedIndex,
    queries: &Frame,
    num_results: u64,
) -> Result<Frame, PipelineError> {
    frame::require(queries, RelationKind::Queries)?;
    let n = index.num_docs() as f64;
    let mut out = Frame::new(vec![
        ("qid".into(), Kind::Text),
        ("query".into(), Kind::Text),
        ("docno".into(), Kind::Text),
        ("score".into(), Kind::Real),
        ("rank".into(), Kind::Int),
    ])
    .unwrap();
    for qi in 0..queries.len() {
        let qid = queries.text(qi, "qid").unwrap();
        let query = queries.text(qi, "query").unwrap();
        let mut scores: HashMap<u32, f64> = HashMap::new();
        for term in tokenize(query) {
            let Some(postings) = index.postings.get(&term) else {
                continue;
            };
            let df = postings.len() as f64;
            let idf = ((n - df + 0.5) / (df + 0.5) + 1.0).ln();
            for &(ordinal, tf) in postings {
                let dl = index.doc_lengths[ordinal as usize] as f64;
                let tf = tf as f64;
                let denom = tf + BM25_K1 * (1.0 - BM25_B + BM25_B * dl / index.avgdl);
                *scores.entry(ordinal).or_insert(0.0) += idf * tf * (BM25_K1 + 1.0) / denom;
            }
        }
        let mut hits: Vec<(u32, f64)> = scores.into_iter().filter(|&(_, s)| s > 0.0).collect();
        hits.sort_by(|a, b| {
            b.1.total_cmp(&a.1).then_with(|| {
                index.docnos[a.0 as usize]
                    .as_bytes()
                    .cmp(index.docnos[b.0 as usize].as_bytes())
            })
        });
        hits.truncate(num_results as usize);
        for (rank, (ordinal, score)) in hits.into_iter().enumerate() {
            out.push_row(vec![
                Value::Text(qid.to_string()),
                Value::Text(query.to_string()),
                Value::Text(index.docnos[ordinal as usize].clone()),
                Value::Real(score),
                Value::Int(rank as i64),
            ])
            .map_err(PipelineError::Frame)?;
        }
    }
    Ok(out)
}

/// Append a `text` column by docno lookup. Rows are otherwise untouched.
pub fn load_text(store: &TextStore, results: &Frame) -> Result<Frame, PipelineError> {
    let mut texts = Vec::with_capacity(results.len());
    for i in 0..results.len() {
        let docno = results
            .text(i, "docno")
            .ok_or_else(|| PipelineError::Frame(frame::FrameError::UnknownColumn("docno".into())))?;
        let text = store
            .get(docno)
            .ok_or_else(|| RetrievalError::UnknownDocno(docno.to_string()))?;
        texts.push(Value::Text(text.to_string()));
    }
    Ok(results.with_column("text", Kind::Text, texts)?)
}

fn distinct_terms(text: &str) -> HashSet<String> {
    tokenize(text).into_iter().collect()
}

/// Pointwise stand-in scorer: fraction of distinct query terms present in
/// the document text. Row-local, hence cacheable. Ranks reassigned.
pub fn overlap_score(results: &Frame) -> Result<Frame, PipelineError> {
    let mut scores = Vec::with_capacity(results.len());
    for i in 0..results.len() {
        let query = results
            .text(i, "query")
            .ok_or_else(|| PipelineError::Frame(frame::FrameError::UnknownColumn("query".into())))?;
        let text = results
            .text(i, "text")
            .ok_or_else(|| PipelineError::Frame(frame::FrameError::UnknownColumn("text".into())))?;
        let q = distinct_terms(query);
        let score = if q.is_empty() {
            0.0
        } else {
            let d = distinct_terms(text);
            q.intersection(&d).count() as f64 / q.len() as f64
        };
        scores.push(Value::Real(score));
    }
    let scored = results.with_column("score", Kind::Real, scores)?;
    Ok(frame::assign_ranks(&scored)?)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Listwise stand-in reranker: each candidate's new score is the sum of
/// sigmoid margins of its overlap score against every other candidate for
/// the same qid. Removing a candidate changes the remaining scores.
pub fn pairwise_rerank(results: &Frame) -> Result<Frame, PipelineError> {
    // base overlap values, row-aligned with the input
    let mut base = Vec::with_capacity(results.len());
    for i in 0..results.len() {
        let query = results
            .text(i, "query")
            .ok_or_else(|| PipelineError::Frame(frame::FrameError::UnknownColumn("query".into())))?;
        let text = results
            .text(i, "text")
            .ok_or_else(|| PipelineError::Frame(frame::FrameError::UnknownColumn("text".into())))?;
        let q = distinct_terms(query);
        base.push(if q.is_empty() {
            0.0
        } else {
            let d = distinct_terms(text);
            q.intersection(&d).count() as f64 / q.len() as f64
        });
    }
    let mut groups: HashMap<&str, Vec<usize>> = HashMap::new();
    for i in 0..results.len() {
        groups
            .entry(results.text(i, "qid").unwrap_or_default())
            .or_default()
            .push(i);
    }
    let mut scores = vec![Value::Real(0.0); results.len()];
    for members in groups.values() {
        for &i in members {
            let mut s = 0.0;
            for &j in members {
                if i != j {
                    s += sigmoid(base[i] - base[j]);
                }
            }
            scores[i] = Value::Real(s);
        }
    }
    let scored = results.with_column("score", Kind::Real, scores)?;
    Ok(frame::assign_ranks(&scored)?)
}

/// Deterministic toy query expansion: append the first token of the query.
pub fn synonym_rewrite(queries: &Frame) -> Result<Frame, PipelineError> {
    frame::require(queries, RelationKind::Queries)?;
    let mut rewritten = Vec::with_capacity(queries.len());
    for i in 0..queries.len() {
        let query = queries.text(i, "query").unwrap();
        let toks = tokenize(query);
        let new = match toks.first() {
            Some(first) => format!("{query} {first}"),
            None => query.to_string(),
        };
        rewritten.push(Value::Text(new));
    }
    Ok(queries.with_column("query", Kind::Text, rewritten)?)
}

/// splitmix64: the only RNG used for synthetic data.
pub struct SplitMix64(u64);

impl SplitMix64 {
    pub fn new(seed: u64) -> SplitMix64 {
        SplitMix64(seed)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0 = self.0.wrapping_add(0x9e3779b97f4a7c15);
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
        z ^ (z >> 31)
    }

    pub fn below(&mut self, n: u64) -> u64 {
        self.next_u64() % n
    }
}

#[derive(Clone, Copy, Debug)]
pub struct SyntheticCorpusSpec {
    pub seed: u64,
    pub num_docs: u64,
    pub vocab_size: u64,
    pub doc_len_min: u64,
    pub doc_len_max: u64,
    pub num_queries: u64,
    pub query_len: u64,
}

/// Generate a corpus, topics and qrels deterministically from the spec.
/// A document is relevant (label 1) to a query iff it shares at least
/// ceil(query_len/2) of the query's distinct terms.
pub fn synth_corpus(
    spec: &SyntheticCorpusSpec,
) -> Result<(Frame, Frame, Frame), RetrievalError> {
    if spec.query_len < 1 || spec.vocab_size < spec.query_len {
        return Err(RetrievalError::BadSpec(
            "need vocab_size >= query_len >= 1".into(),
        ));
    }
    if spec.doc_len_min > spec.doc_len_max {
        return Err(RetrievalError::BadSpec("doc_len_min > doc_len_max".into()));
    }
    let mut rng = SplitMix64::new(spec.seed);
    let mut corpus = Frame::new(vec![("docno".into(), Kind::Text), ("text".into(), Kind::Text)])
        .unwrap();
    let mut doc_terms: Vec<HashSet<u64>> = Vec::with_capacity(spec.num_docs as usize);
    for i in 0..spec.num_docs {
        let len = spec.doc_len_min + rng.below(spec.doc_len_max - spec.doc_len_min + 1);
        let mut words = Vec::with_capacity(len as usize);
        let mut terms = HashSet::new();
        for _ in 0..len {
            let w = rng.below(spec.vocab_size);
            terms.insert(w);
            words.push(format!("w{w}"));
        }
        corpus
            .push_row(vec![
                Value::Text(format!("d{i}")),
                Value::Text(words.join(" ")),
            ])
            .unwrap();
        doc_terms.push(terms);
    }
    let mut topics = Frame::new(vec![("qid".into(), Kind::Text), ("query".into(), Kind::Text)])
        .unwrap();
    let mut qrels = Frame::new(vec![
        ("qid".into(), Kind::Text),
        ("docno".into(), Kind::Text),
        ("label".into(), Kind::Int),
    ])
    .unwrap();
    let threshold = spec.query_len.div_ceil(2);
    for qi in 0..spec.num_queries {
        let mut picked: Vec<u64> = Vec::with_capacity(spec.query_len as usize);
        while picked.len() < spec.query_len as usize {
            let w = rng.below(spec.vocab_size);
            if !picked.contains(&w) {
                picked.push(w);
            }
        }
        let qid = format!("q{qi}");
        topics
            .push_row(vec![
                Value::Text(qid.clone()),
                Value::Text(
                    picked
                        .iter()
                        .map(|w| format!("w{w}"))
                        .collect::<Vec<_>>()
                        .join(" "),
                ),
            ])
            .unwrap();
        for (di, terms) in doc_terms.iter().enumerate() {
            let shared = picked.iter().filter(|w| terms.contains(w)).count() as u64;
            if shared >= threshold {
                qrels
                    .push_row(vec![
                        Value::Text(qid.clone()),
                        Value::Text(format!("d{di}")),
                        Value::Int(1),
                    ])
                    .unwrap();
            }
        }
    }
    Ok((corpus, topics, qrels))
}

// ---- transformer leaves -------------------------------------------------

static NEXT_INSTANCE_ID: AtomicU64 = AtomicU64::new(1);

pub fn fresh_instance_id() -> i64 {
    NEXT_INSTANCE_ID.fetch_add(1, Ordering::Relaxed) as i64
}

/// BM25 retriever leaf. Identity is (index label, num_results).
pub fn bm25_leaf(index: Arc<InvertedIndex>, label: &str, num_results: u64) -> Transformer {
    Transformer::leaf(
        "bm25",
        vec![
            ("index".into(), Param::Text(label.to_string())),
            ("num_results".into(), Param::Int(num_results as i64)),
        ],
        Arc::new(move |f: &Frame| bm25_retrieve(&index, f, num_results)),
    )
}

pub fn text_loader_leaf(store: Arc<TextStore>, label: &str) -> Transformer {
    Transformer::leaf(
        "text_loader",
        vec![("store".into(), Param::Text(label.to_string()))],
        Arc::new(move |f: &Frame| load_text(&store, f)),
    )
}

/// Drop a column the leaf loaded only for internal use, so the output
/// schema does not depend on whether the caller pre-loaded text.
fn drop_column(f: &Frame, name: &str) -> Result<Frame, PipelineError> {
    let keep: Vec<&str> = f
        .columns()
        .iter()
        .map(|(n, _)| n.as_str())
        .filter(|n| *n != name)
        .collect();
    Ok(f.project(&keep)?)
}

/// Pointwise overlap scorer. Loads text from the store when the frame has
/// no `text` column; an internally loaded text column is not emitted.
pub fn overlap_leaf(store: Arc<TextStore>, label: &str) -> Transformer {
    Transformer::leaf(
        "overlap",
        vec![("store".into(), Param::Text(label.to_string()))],
        Arc::new(move |f: &Frame| {
            if f.col_index("text").is_some() {
                overlap_score(f)
            } else {
                drop_column(&overlap_score(&load_text(&store, f)?)?, "text")
            }
        }),
    )
}

/// Listwise pairwise reranker. Not cacheable.
pub fn pairwise_leaf(store: Arc<TextStore>, label: &str) -> Transformer {
    Transformer::leaf(
        "pairwise",
        vec![("store".into(), Param::Text(label.to_string()))],
        Arc::new(move |f: &Frame| {
            if f.col_index("text").is_some() {
                pairwise_rerank(f)
            } else {
                drop_column(&pairwise_rerank(&load_text(&store, f)?)?, "text")
            }
        }),
    )
}

pub fn synonym_leaf() -> Transformer {
    Transformer::leaf(
        "synonym",
        vec![],
        Arc::new(|f: &Frame| synonym_rewrite(f)),
    )
}

/// Readable invocation counters for a wrapped transformer.
#[derive(Default)]
pub struct Counters {
    pub invocations: AtomicU64,
    pub rows_in: AtomicU64,
    pub rows_out: AtomicU64,
}

impl Counters {
    pub fn invocations(&self) -> u64 {
        self.invocations.load(Ordering::Relaxed)
    }

    pub fn rows_in(&self) -> u64 {
        self.rows_in.load(Ordering::Relaxed)
    }

    pub fn rows_out(&self) -> u64 {
        self.rows_out.load(Ordering::Relaxed)
    }

    pub fn reset(&self) {
        self.invocations.store(0, Ordering::Relaxed);
        self.rows_in.store(0, Ordering::Relaxed);
        self.rows_out.store(0, Ordering::Relaxed);
    }
}

/// Transparent wrapper counting invocations and row traffic. Output is
/// bit-identical to the inner transformer. Clones share the counters and
/// compare equal, so counter-wrapped stages still participate in prefix
/// detection.
pub fn with_counter(inner: Transformer) -> (Transformer, Arc<Counters>) {
    let counters = Arc::new(Counters::default());
    let c = counters.clone();
    let t = Transformer::leaf(
        "counter",
        vec![("id".into(), Param::Int(fresh_instance_id()))],
        Arc::new(move |f: &Frame| {
            c.invocations.fetch_add(1, Ordering::Relaxed);
            c.rows_in.fetch_add(f.len() as u64, Ordering::Relaxed);
            let out = inner.apply(f)?;
            c.rows_out.fetch_add(out.len() as u64, Ordering::Relaxed);
            Ok(out)
        }),
    );
    (t, counters)
}

/// Transparent wrapper injecting `per_call_ms + output_rows * per_row_ms`
/// of sleep around delegation. Charging per produced row makes retriever
/// cost scale with result-set size and scorer cost with candidates scored,
/// standing in for model cost at desk scale.
pub fn with_latency(inner: Transformer, per_call_ms: f64, per_row_ms: f64) -> Transformer {
    Transformer::leaf(
        "latency",
        vec![
            ("id".into(), Param::Int(fresh_instance_id())),
            ("per_call_ms".into(), Param::Real(per_call_ms)),
            ("per_row_ms".into(), Param::Real(per_row_ms)),
        ],
        Arc::new(move |f: &Frame| {
            let out = inner.apply(f)?;
            let ms = per_call_ms + out.len() as f64 * per_row_ms;
            if ms > 0.0 {
                std::thread::sleep(Duration::from_secs_f64(ms / 1000.0));
            }
            Ok(out)
        }),
    )
}

// ---- index persistence --------------------------------------------------

/// Persist index + text store as a directory: `meta`, `docnos`, `postings`,
/// `lengths`, `texts`. All layouts are bit-exact and golden-tested.
pub fn save_index(
    index: &InvertedIndex,
    store: &TextStore,
    dir: &Path,
) -> Result<(), RetrievalError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let meta = format!(
        "n={}\navgdl={:?}\nk1={:?}\nb={:?}\n",
        index.num_docs(),
        index.avgdl,
        BM25_K1,
        BM25_B
    );
    fs::write(dir.join("meta"), meta).map_err(io_err(&dir.join("meta")))?;
    fs::write(dir.join("docnos"), index.docnos.join("\n"))
        .map_err(io_err(&dir.join("docnos")))?;
    let mut postings = Vec::new();
    for (term, plist) in &index.postings {
        postings.extend_from_slice(&(term.len() as u32).to_le_bytes());
        postings.extend_from_slice(term.as_bytes());
        postings.extend_from_slice(&(plist.len() as u32).to_le_bytes());
        for &(ordinal, tf) in plist {
            postings.extend_from_slice(&ordinal.to_le_bytes());
            postings.extend_from_slice(&tf.to_le_bytes());
        }
    }
    fs::write(dir.join("postings"), postings).map_err(io_err(&dir.join("postings")))?;
    let mut lengths = Vec::with_capacity(index.doc_lengths.len() * 4);
    for &l in &index.doc_lengths {
        lengths.extend_from_slice(&l.to_le_bytes());
    }
    fs::write(dir.join("lengths"), lengths).map_err(io_err(&dir.join("lengths")))?;
    let mut texts = Vec::new();
    for t in &store.texts {
        texts.extend_from_slice(&(t.len() as u32).to_le_bytes());
        texts.extend_from_slice(t.as_bytes());
    }
    fs::write(dir.join("texts"), texts).map_err(io_err(&dir.join("texts")))?;
    Ok(())
}

pub fn load_index(dir: &Path) -> Result<(InvertedIndex, TextStore), RetrievalError> {
    let meta_path = dir.join("meta");
    let meta = fs::read_to_string(&meta_path).map_err(io_err(&meta_path))?;
    let mut fields: HashMap<&str, &str> = HashMap::new();
    for line in meta.lines() {
        if let Some((k, v)) = line.split_once('=') {
            fields.insert(k, v);
        }
    }
    let avgdl: f64 = fields
        .get("avgdl")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| RetrievalError::Corrupt("meta missing avgdl".into()))?;
    let docnos_raw =
        fs::read_to_string(dir.join("docnos")).map_err(io_err(&dir.join("docnos")))?;
    let docnos: Vec<String> = if docnos_raw.is_empty() {
        Vec::new()
    } else {
        docnos_raw.split('\n').map(str::to_string).collect()
    };
    let lengths_raw = fs::read(dir.join("lengths")).map_err(io_err(&dir.join("lengths")))?;
    if lengths_raw.len() != docnos.len() * 4 {
        return Err(RetrievalError::Corrupt("lengths size mismatch".into()));
    }
    let doc_lengths: Vec<u32> = lengths_raw
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let postings_path = dir.join("postings");
    let mut file = File::open(&postings_path).map_err(io_err(&postings_path))?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes).map_err(io_err(&postings_path))?;
    let mut postings = BTreeMap::new();
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8], RetrievalError> {
        if *pos + n > bytes.len() {
            return Err(RetrievalError::Corrupt("postings truncated".into()));
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    while pos < bytes.len() {
        let tlen = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let term = String::from_utf8(take(&mut pos, tlen)?.to_vec())
            .map_err(|_| RetrievalError::Corrupt("postings term not UTF-8".into()))?;
        let count = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let mut plist = Vec::with_capacity(count);
        for _ in 0..count {
            let ordinal = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
            let tf = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
            if ordinal as usize >= docnos.len() {
                return Err(RetrievalError::Corrupt("posting ordinal out of range".into()));
            }
            plist.push((ordinal, tf));
        }
        postings.insert(term, plist);
    }
    let texts_path = dir.join("texts");
    let text_bytes = fs::read(&texts_path).map_err(io_err(&texts_path))?;
    let mut texts = Vec::with_capacity(docnos.len());
    let mut pos = 0usize;
    while pos < text_bytes.len() {
        if pos + 4 > text_bytes.len() {
            return Err(RetrievalError::Corrupt("texts truncated".into()));
        }
        let len = u32::from_le_bytes(text_bytes[pos..pos + 4].try_into().unwrap()) as usize;
        pos += 4;
        if pos + len > text_bytes.len() {
            return Err(RetrievalError::Corrupt("texts truncated".into()));
        }
        texts.push(
            String::from_utf8(text_bytes[pos..pos + len].to_vec())
                .map_err(|_| RetrievalError::Corrupt("text not UTF-8".into()))?,
        );
        pos += len;
    }
    if texts.len() != docnos.len() {
        return Err(RetrievalError::Corrupt("texts count mismatch".into()));
    }
    let by_docno = docnos
        .iter()
        .enumerate()
        .map(|(i, d)| (d.clone(), i))
        .collect();
    Ok((
        InvertedIndex {
            postings,
            docnos: docnos.clone(),
            doc_lengths,
            avgdl,
        },
        TextStore {
            docnos,
            texts,
            by_docno,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    pub(crate) fn tiny_corpus() -> Frame {
        let mut f = Frame::new(vec![("docno".into(), Kind::Text), ("text".into(), Kind::Text)])
            .unwrap();
        for (d, t) in [("d1", "a b"), ("d2", "a a"), ("d3", "c")] {
            f.push_row(vec![Value::Text(d.into()), Value::Text(t.into())])
                .unwrap();
        }
        f
    }

    fn queries(rows: &[(&str, &str)]) -> Frame {
        let mut f = Frame::new(vec![("qid".into(), Kind::Text), ("query".into(), Kind::Text)])
            .unwrap();
        for (qid, q) in rows {
            f.push_row(vec![Value::Text(qid.to_string()), Value::Text(q.to_string())])
                .unwrap();
        }
        f
    }

    #[test]
    fn tokenize_rules() {
        assert_eq!(tokenize("Hello, World"), ["hello", "world"]);
        assert!(tokenize("").is_empty());
        assert_eq!(tokenize("a-b_c1"), ["a", "b", "c1"]);
    }

    #[test]
    fn build_index_statistics() {
        let (index, _) = build_index(&tiny_corpus()).unwrap();
        assert_eq!(index.num_docs(), 3);
        assert_eq!(index.df("a"), 2);
        assert!((index.avgdl() - 5.0 / 3.0).abs() < 1e-12);
        // sum of postings tf per doc = doc length
        let mut per_doc = vec![0u32; 3];
        for plist in index.postings.values() {
            for &(o, tf) in plist {
                per_doc[o as usize] += tf;
            }
        }
        assert_eq!(per_doc, [2, 2, 1]);
    }

    #[test]
    fn build_index_rejects_duplicate_docno() {
        let mut f = tiny_corpus();
        f.push_row(vec![Value::Text("d1".into()), Value::Text("x".into())])
            .unwrap();
        assert!(matches!(
            build_index(&f),
            Err(RetrievalError::DuplicateDocno(_))
        ));
    }

    #[test]
    fn empty_corpus_index() {
        let f = tiny_corpus().empty_like();
        let (index, _) = build_index(&f).unwrap();
        assert_eq!(index.num_docs(), 0);
        let out = bm25_retrieve(&index, &queries(&[("q1", "a")]), 1000).unwrap();
        assert!(out.is_empty());
    }

    #[test]
    fn bm25_hand_computed_scores() {
        let (index, _) = build_index(&tiny_corpus()).unwrap();
        let out = bm25_retrieve(&index, &queries(&[("q1", "a")]), 1000).unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!(out.text(0, "docno"), Some("d2"));
        assert_eq!(out.text(1, "docno"), Some("d1"));
        // score(d1) = idf * tf*(k1+1)/(tf + k1*(1-b+b*dl/avgdl))
        let idf = ((3.0 - 2.0 + 0.5) / (2.0 + 0.5) + 1.0f64).ln();
        let expected = idf * (1.0 * 2.2) / (1.0 + 1.2 * (0.25 + 0.75 * 2.0 / (5.0 / 3.0)));
        assert!((out.real(1, "score").unwrap() - expected).abs() < 1e-12);
        assert!((out.real(1, "score").unwrap() - 0.4345).abs() < 1e-4);
    }

    #[test]
    fn bm25_oov_and_num_results() {
        let (index, _) = build_index(&tiny_corpus()).unwrap();
        let out = bm25_retrieve(&index, &queries(&[("q1", "zzz qqq")]), 1000).unwrap();
        assert!(out.is_empty());
        let out = bm25_retrieve(&index, &queries(&[("q1", "a")]), 1).unwrap();
        assert_eq!(out.len(), 1);
    }

    #[test]
    fn bm25_nesting_property() {
        let spec = SyntheticCorpusSpec {
            seed: 11,
            num_docs: 200,
            vocab_size: 50,
            doc_len_min: 5,
            doc_len_max: 20,
            num_queries: 5,
            query_len: 3,
        };
        let (corpus, topics, _) = synth_corpus(&spec).unwrap();
        let (index, _) = build_index(&corpus).unwrap();
        let small = bm25_retrieve(&index, &topics, 10).unwrap();
        let large = bm25_retrieve(&index, &topics, 30).unwrap();
        // shared prefix is bit-exact in order
        let key = |f: &Frame, i: usize| {
            (
                f.text(i, "qid").unwrap().to_string(),
                f.text(i, "docno").unwrap().to_string(),
                f.int(i, "rank").unwrap(),
            )
        };
        let large_keys: HashSet<_> = (0..large.len()).map(|i| key(&large, i)).collect();
        for i in 0..small.len() {
            assert!(large_keys.contains(&key(&small, i)));
        }
    }

    #[test]
    fn load_text_round_trip_and_unknown() {
        let (index, store) = build_index(&tiny_corpus()).unwrap();
        let out = bm25_retrieve(&index, &queries(&[("q1", "a")]), 10).unwrap();
        let with_text = load_text(&store, &out).unwrap();
        assert_eq!(with_text.text(0, "text"), Some("a a"));
        let empty = load_text(&store, &out.empty_like()).unwrap();
        assert!(empty.col_index("text").is_some());
        let mut bad = out.clone();
        bad.push_row(vec![
            Value::Text("q1".into()),
            Value::Text("q1 a".into()),
            Value::Text("nope".into()),
            Value::Real(0.0),
            Value::Int(2),
        ])
        .unwrap();
        let err = load_text(&store, &bad).unwrap_err();
        assert!(err.to_string().contains("nope"));
    }

    fn scored_frame(rows: &[(&str, &str, &str, &str)]) -> Frame {
        let mut f = Frame::new(vec![
            ("qid".into(), Kind::Text),
            ("query".into(), Kind::Text),
            ("docno".into(), Kind::Text),
            ("text".into(), Kind::Text),
            ("score".into(), Kind::Real),
        ])
        .unwrap();
        for (qid, query, docno, text) in rows {
            f.push_row(vec![
                Value::Text(qid.to_string()),
                Value::Text(query.to_string()),
                Value::Text(docno.to_string()),
                Value::Text(text.to_string()),
                Value::Real(0.0),
            ])
            .unwrap();
        }
        f
    }

    #[test]
    fn overlap_score_values() {
        let f = scored_frame(&[
            ("q1", "a b", "d1", "b c"),
            ("q1", "a b", "d2", "a b"),
            ("q1", "a b", "d3", "x y"),
        ]);
        let out = overlap_score(&f).unwrap();
        let by_docno = |d: &str| {
            (0..out.len())
                .find(|&i| out.text(i, "docno") == Some(d))
                .map(|i| out.real(i, "score").unwrap())
                .unwrap()
        };
        assert_eq!(by_docno("d1"), 0.5);
        assert_eq!(by_docno("d2"), 1.0);
        assert_eq!(by_docno("d3"), 0.0);
    }

    #[test]
    fn overlap_empty_query_scores_zero() {
        let f = scored_frame(&[("q1", "", "d1", "a b")]);
        let out = overlap_score(&f).unwrap();
        assert_eq!(out.real(0, "score"), Some(0.0));
    }

    #[test]
    fn pairwise_two_candidates() {
        let f = scored_frame(&[("q1", "a", "d1", "a"), ("q1", "a", "d2", "x")]);
        let out = pairwise_rerank(&f).unwrap();
        let by_docno = |d: &str| {
            (0..out.len())
                .find(|&i| out.text(i, "docno") == Some(d))
                .map(|i| out.real(i, "score").unwrap())
                .unwrap()
        };
        assert!((by_docno("d1") - sigmoid(1.0)).abs() < 1e-12);
        assert!((by_docno("d2") - sigmoid(-1.0)).abs() < 1e-12);
    }

    #[test]
    fn pairwise_single_candidate_scores_zero() {
        let f = scored_frame(&[("q1", "a", "d1", "a")]);
        let out = pairwise_rerank(&f).unwrap();
        assert_eq!(out.real(0, "score"), Some(0.0));
    }

    #[test]
    fn pairwise_depends_on_pool() {
        let full = scored_frame(&[
            ("q1", "a b", "d1", "a b"),
            ("q1", "a b", "d2", "a"),
            ("q1", "a b", "d3", "x"),
        ]);
        let reduced = scored_frame(&[("q1", "a b", "d1", "a b"), ("q1", "a b", "d2", "a")]);
        let sf = pairwise_rerank(&full).unwrap();
        let sr = pairwise_rerank(&reduced).unwrap();
        let score_of = |f: &Frame, d: &str| {
            (0..f.len())
                .find(|&i| f.text(i, "docno") == Some(d))
                .map(|i| f.real(i, "score").unwrap())
                .unwrap()
        };
        assert_ne!(score_of(&sf, "d1"), score_of(&sr, "d1"));
    }

    #[test]
    fn synonym_rewrite_rules() {
        let q = queries(&[("q1", "a b"), ("q2", "")]);
        let out = synonym_rewrite(&q).unwrap();
        assert_eq!(out.text(0, "query"), Some("a b a"));
        assert_eq!(out.text(1, "query"), Some(""));
    }

    #[test]
    fn counter_wrapper() {
        let (index, _) = build_index(&tiny_corpus()).unwrap();
        let bm25 = bm25_leaf(Arc::new(index), "tiny", 1000);
        let (wrapped, counters) = with_counter(bm25.clone());
        let q = queries(&[("q1", "a"), ("q2", "c")]);
        let out1 = wrapped.apply(&q).unwrap();
        assert_eq!(counters.invocations(), 1);
        assert_eq!(counters.rows_in(), 2);
        assert_eq!(counters.rows_out(), out1.len() as u64);
        let out2 = wrapped.apply(&q).unwrap();
        assert_eq!(counters.invocations(), 2);
        assert_eq!(out1, bm25.apply(&q).unwrap());
        assert_eq!(out1, out2);
    }

    #[test]
    fn latency_wrapper_transparent_and_slow() {
        let (index, _) = build_index(&tiny_corpus()).unwrap();
        let bm25 = bm25_leaf(Arc::new(index), "tiny", 1000);
        let q = queries(&[("q1", "a")]);
        let zero = with_latency(bm25.clone(), 0.0, 0.0);
        assert_eq!(zero.apply(&q).unwrap(), bm25.apply(&q).unwrap());
        let slow = with_latency(bm25.clone(), 0.0, 10.0);
        let start = std::time::Instant::now();
        let out = slow.apply(&q).unwrap();
        assert!(start.elapsed() >= Duration::from_millis(10));
        assert_eq!(out, bm25.apply(&q).unwrap());
    }

    #[test]
    fn synth_corpus_deterministic() {
        let spec = SyntheticCorpusSpec {
            seed: 7,
            num_docs: 100,
            vocab_size: 50,
            doc_len_min: 5,
            doc_len_max: 15,
            num_queries: 5,
            query_len: 3,
        };
        let (c1, t1, r1) = synth_corpus(&spec).unwrap();
        let (c2, t2, r2) = synth_corpus(&spec).unwrap();
        assert_eq!(c1, c2);
        assert_eq!(t1, t2);
        assert_eq!(r1, r2);
        assert!(!r1.is_empty());
    }

    #[test]
    fn synth_corpus_edge_cases() {
        let mut spec = SyntheticCorpusSpec {
            seed: 1,
            num_docs: 0,
            vocab_size: 10,
            doc_len_min: 1,
            doc_len_max: 2,
            num_queries: 0,
            query_len: 2,
        };
        let (c, _, _) = synth_corpus(&spec).unwrap();
        assert!(c.is_empty());
        spec.query_len = 100;
        assert!(synth_corpus(&spec).is_err());
    }

    #[test]
    fn index_persistence_round_trip() {
        let (index, store) = build_index(&tiny_corpus()).unwrap();
        let dir = tempdir().unwrap();
        save_index(&index, &store, dir.path()).unwrap();
        let (loaded, loaded_store) = load_index(dir.path()).unwrap();
        let q = queries(&[("q1", "a b c")]);
        assert_eq!(
            bm25_retrieve(&index, &q, 100).unwrap(),
            bm25_retrieve(&loaded, &q, 100).unwrap()
        );
        assert_eq!(loaded_store.get("d3"), Some("c"));
        // deterministic bytes
        let dir2 = tempdir().unwrap();
        save_index(&index, &store, dir2.path()).unwrap();
        for name in ["meta", "docnos", "postings", "lengths", "texts"] {
            assert_eq!(
                fs::read(dir.path().join(name)).unwrap(),
                fs::read(dir2.path().join(name)).unwrap(),
                "file {name} differs"
            );
        }
    }
}
