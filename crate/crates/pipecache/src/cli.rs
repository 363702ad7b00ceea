//! Command-line entry point: indexing, experiment runs driven by a TOML
//! config, and cache management (stats, clear, pack, unpack).
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error, 4 runtime
//! error. The `PIPECACHE_HOME` environment variable sets the default root
//! for cache directories declared without a path.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde::Deserialize;

use crate::caching::{self, CacheError, KeyValueCache, RetrieverCache, ScorerCache};
use crate::dsl::{self, Registry};
use crate::experiment::{self, ExperimentSpec, MeasureSpec};
use crate::frame::{self, Frame};
use crate::pipeline::{Param, Transformer};
use crate::retrieval::{self, Counters, SyntheticCorpusSpec};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_RUNTIME: i32 = 4;

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Data(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Data(_) => EXIT_DATA,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Data(m) | CliError::Runtime(m) => m,
        }
    }
}

fn config_err(e: impl ToString) -> CliError {
    CliError::Config(e.to_string())
}

fn data_err(e: impl ToString) -> CliError {
    CliError::Data(e.to_string())
}

fn runtime_err(e: impl ToString) -> CliError {
    CliError::Runtime(e.to_string())
}

// ---------------------------------------------------------------- config

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub corpus: CorpusConfig,
    pub index: IndexConfig,
    pub experiment: ExperimentConfig,
    #[serde(default, rename = "system")]
    pub systems: Vec<SystemConfig>,
    #[serde(default, rename = "cache")]
    pub caches: Vec<CacheConfig>,
    #[serde(default, rename = "setting")]
    pub settings: Vec<SettingConfig>,
}

/// Either a TSV corpus on disk (with topics/qrels paths) or a synthetic
/// spec generated deterministically from the seed.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    pub path: Option<PathBuf>,
    pub topics: Option<PathBuf>,
    pub qrels: Option<PathBuf>,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_num_docs")]
    pub num_docs: u64,
    #[serde(default = "default_vocab")]
    pub vocab_size: u64,
    #[serde(default = "default_doc_len_min")]
    pub doc_len_min: u64,
    #[serde(default = "default_doc_len_max")]
    pub doc_len_max: u64,
    #[serde(default = "default_num_queries")]
    pub num_queries: u64,
    #[serde(default = "default_query_len")]
    pub query_len: u64,
}

fn default_seed() -> u64 {
    7
}
fn default_num_docs() -> u64 {
    1000
}
fn default_vocab() -> u64 {
    200
}
fn default_doc_len_min() -> u64 {
    10
}
fn default_doc_len_max() -> u64 {
    30
}
fn default_num_queries() -> u64 {
    20
}
fn default_query_len() -> u64 {
    3
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IndexConfig {
    pub path: PathBuf,
    #[serde(default = "default_num_results")]
    pub num_results: u64,
}

fn default_num_results() -> u64 {
    1000
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub measures: Vec<String>,
    #[serde(default)]
    pub precompute: bool,
    pub baseline: Option<String>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemConfig {
    pub name: String,
    pub pipeline: String,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CacheConfig {
    pub name: String,
    /// "scorer", "key-value", or "retriever"
    pub kind: String,
    pub path: Option<PathBuf>,
    /// leaf name the cache wraps; when a setting enables caches, this
    /// name resolves to the cached version
    pub wraps: String,
    pub key: Option<Vec<String>>,
    pub values: Option<Vec<String>>,
    pub label: Option<String>,
}

/// One row of the settings table: a named way of running the same systems.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SettingConfig {
    pub name: String,
    pub precompute: Option<bool>,
    #[serde(default)]
    pub caches: bool,
    /// clear declared cache directories before this setting runs
    #[serde(default)]
    pub reset: bool,
}

pub fn load_config(path: &Path) -> Result<(Config, PathBuf), CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
    let config: Config = toml::from_str(&text).map_err(config_err)?;
    let base = path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    validate_config(&config)?;
    Ok((config, base))
}

fn validate_config(config: &Config) -> Result<(), CliError> {
    if config.systems.is_empty() {
        return Err(CliError::Config("config declares no [[system]]".into()));
    }
    let mut seen = HashSet::new();
    for s in &config.systems {
        if !seen.insert(&s.name) {
            return Err(CliError::Config(format!(
                "duplicate system name `{}`",
                s.name
            )));
        }
    }
    for m in &config.experiment.measures {
        if MeasureSpec::parse(m).is_none() {
            return Err(CliError::Config(format!(
                "unknown measure `{m}` (expected nDCG@k, AP, or P@k)"
            )));
        }
    }
    if let Some(b) = &config.experiment.baseline {
        if !config.systems.iter().any(|s| &s.name == b) {
            return Err(CliError::Config(format!(
                "baseline `{b}` is not a declared system name"
            )));
        }
    }
    for c in &config.caches {
        if !matches!(c.kind.as_str(), "scorer" | "key-value" | "retriever") {
            return Err(CliError::Config(format!(
                "cache `{}` has unknown kind `{}`",
                c.name, c.kind
            )));
        }
        if c.kind == "key-value" && c.values.is_none() {
            return Err(CliError::Config(format!(
                "key-value cache `{}` needs `values`",
                c.name
            )));
        }
    }
    let mut seen = HashSet::new();
    for s in &config.settings {
        if !seen.insert(&s.name) {
            return Err(CliError::Config(format!(
                "duplicate setting name `{}`",
                s.name
            )));
        }
    }
    Ok(())
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Default root for caches declared without a path.
pub fn cache_root(base: &Path) -> PathBuf {
    match std::env::var_os("PIPECACHE_HOME") {
        Some(home) => PathBuf::from(home),
        None => base.join("caches"),
    }
}

fn cache_dir(config_cache: &CacheConfig, base: &Path) -> PathBuf {
    match &config_cache.path {
        Some(p) => resolve(base, p),
        None => cache_root(base).join(&config_cache.name),
    }
}

fn corpus_spec(corpus: &CorpusConfig, seed_override: Option<u64>) -> SyntheticCorpusSpec {
    SyntheticCorpusSpec {
        seed: seed_override.unwrap_or(corpus.seed),
        num_docs: corpus.num_docs,
        vocab_size: corpus.vocab_size,
        doc_len_min: corpus.doc_len_min,
        doc_len_max: corpus.doc_len_max,
        num_queries: corpus.num_queries,
        query_len: corpus.query_len,
    }
}

fn load_corpus(
    config: &Config,
    base: &Path,
    seed_override: Option<u64>,
) -> Result<(Frame, Frame, Frame), CliError> {
    match &config.corpus.path {
        Some(path) => {
            let corpus = frame::load_tsv(&resolve(base, path)).map_err(data_err)?;
            let topics_path = config.corpus.topics.as_ref().ok_or_else(|| {
                CliError::Config("a corpus path needs a topics path too".into())
            })?;
            let qrels_path = config.corpus.qrels.as_ref().ok_or_else(|| {
                CliError::Config("a corpus path needs a qrels path too".into())
            })?;
            let topics = frame::load_tsv(&resolve(base, topics_path)).map_err(data_err)?;
            let qrels = frame::load_tsv(&resolve(base, qrels_path)).map_err(data_err)?;
            Ok((corpus, topics, qrels))
        }
        None => retrieval::synth_corpus(&corpus_spec(&config.corpus, seed_override))
            .map_err(data_err),
    }
}

// ----------------------------------------------------------------- index

pub fn cmd_index(
    config_path: &Path,
    force: bool,
    seed: Option<u64>,
    out: &mut String,
) -> Result<(), CliError> {
    let (config, base) = load_config(config_path)?;
    let index_dir = resolve(&base, &config.index.path);
    if index_dir.join("meta").exists() && !force {
        return Err(CliError::Data(format!(
            "index already exists at {} (use --force to overwrite)",
            index_dir.display()
        )));
    }
    let (corpus, _, _) = load_corpus(&config, &base, seed)?;
    let (index, store) = retrieval::build_index(&corpus).map_err(data_err)?;
    fs::create_dir_all(&index_dir).map_err(data_err)?;
    retrieval::save_index(&index, &store, &index_dir).map_err(runtime_err)?;
    writeln!(
        out,
        "indexed {} documents into {}",
        corpus.len(),
        index_dir.display()
    )
    .unwrap();
    Ok(())
}

// ------------------------------------------------------------------- run

/// Everything built for one setting: the parsed systems plus the counters
/// to report. Caches hold directory locks, so this is per-setting state.
struct SettingRuntime {
    systems: Vec<Transformer>,
    bm25_counters: Vec<Arc<Counters>>,
    scorer_counters: Vec<Arc<Counters>>,
}

/// Counters created lazily by the bm25 factory (one per distinct depth);
/// `build_setting` reads the sink after parsing has instantiated leaves.
type CounterSink = Arc<Mutex<Vec<Arc<Counters>>>>;

fn build_registry(
    config: &Config,
    base: &Path,
    index: Arc<retrieval::InvertedIndex>,
    store: Arc<retrieval::TextStore>,
    use_caches: bool,
) -> Result<(Registry, CounterSink, Vec<Arc<Counters>>), CliError> {
    let mut registry = Registry::new();
    let mut scorer_counters = Vec::new();

    // one counted instance per distinct bm25 depth, shared across systems
    // so identical stages stay structurally equal for prefix detection
    let default_k = config.index.num_results;
    let bm25_memo: Mutex<HashMap<u64, Transformer>> = Mutex::new(HashMap::new());
    let bm25_counter_sink: CounterSink = Arc::new(Mutex::new(Vec::new()));
    {
        let index = index.clone();
        let sink = bm25_counter_sink.clone();
        registry.register("bm25", move |params| {
            let k = match params {
                [] => default_k,
                [(name, Param::Int(k))] if name == "k" && *k >= 1 => *k as u64,
                _ => return Err("bm25 takes at most one parameter: k=<positive int>".into()),
            };
            let mut memo = bm25_memo.lock().unwrap();
            if let Some(t) = memo.get(&k) {
                return Ok(t.clone());
            }
            let (t, counters) = retrieval::with_counter(retrieval::bm25_leaf(
                index.clone(),
                "main",
                k,
            ));
            sink.lock().unwrap().push(counters);
            memo.insert(k, t.clone());
            Ok(t)
        });
    }

    registry.register("cut", |params| match params {
        [(name, Param::Int(k))] if name == "k" && *k >= 1 => {
            crate::pipeline::rank_cutoff_leaf(*k as u64).map_err(|e| e.to_string())
        }
        _ => Err("cut takes exactly one parameter: k=<positive int>".into()),
    });

    let (mono_base, mono_counters) =
        retrieval::with_counter(retrieval::overlap_leaf(store.clone(), "main"));
    scorer_counters.push(mono_counters);
    registry.register_fixed("mono", mono_base.clone());
    registry.register_fixed("duo", retrieval::pairwise_leaf(store.clone(), "main"));
    registry.register_fixed("synonym", retrieval::synonym_leaf());
    registry.register_fixed("text_loader", retrieval::text_loader_leaf(store.clone(), "main"));

    if use_caches {
        for c in &config.caches {
            let dir = cache_dir(c, base);
            let inner = registry_lookup(&registry, &c.wraps)?;
            let label = c.label.clone().unwrap_or_else(|| c.name.clone());
            let cached = match c.kind.as_str() {
                "scorer" => match &c.key {
                    Some(key) => ScorerCache::with_key_columns(
                        Some(dir),
                        Some(inner),
                        key.clone(),
                        &label,
                    ),
                    None => ScorerCache::new(Some(dir), Some(inner), &label),
                }
                .map(ScorerCache::into_transformer),
                "key-value" => KeyValueCache::new(
                    Some(dir),
                    Some(inner),
                    c.key.clone().unwrap_or_else(|| vec!["query".into(), "docno".into()]),
                    c.values.clone().unwrap(),
                    &label,
                )
                .map(KeyValueCache::into_transformer),
                "retriever" => {
                    RetrieverCache::new(Some(dir), Some(inner), c.key.clone(), &label)
                        .map(RetrieverCache::into_transformer)
                }
                _ => unreachable!("validated"),
            }
            .map_err(runtime_err)?;
            // the cache answers both to its own name and to the leaf it
            // wraps, so pipeline text stays identical across settings
            registry.register_fixed(&c.name, cached.clone());
            registry.register_fixed(&c.wraps, cached);
        }
    } else {
        for c in &config.caches {
            let inner = registry_lookup(&registry, &c.wraps)?;
            registry.register_fixed(&c.name, inner);
        }
    }

    Ok((registry, bm25_counter_sink, scorer_counters))
}

fn registry_lookup(registry: &Registry, name: &str) -> Result<Transformer, CliError> {
    dsl::parse(name, registry)
        .map_err(|e| CliError::Config(format!("cache wraps unknown leaf `{name}`: {e}")))
}

fn build_setting(
    config: &Config,
    base: &Path,
    index: Arc<retrieval::InvertedIndex>,
    store: Arc<retrieval::TextStore>,
    use_caches: bool,
) -> Result<SettingRuntime, CliError> {
    let (registry, bm25_sink, scorer_counters) =
        build_registry(config, base, index, store, use_caches)?;
    let mut systems = Vec::with_capacity(config.systems.len());
    for s in &config.systems {
        let t = dsl::parse(&s.pipeline, &registry).map_err(|e| {
            CliError::Config(format!("system `{}`: {e}", s.name))
        })?;
        systems.push(t);
    }
    // bm25 counters exist only once parsing has instantiated the leaves
    let bm25_counters = bm25_sink.lock().unwrap().clone();
    Ok(SettingRuntime {
        systems,
        bm25_counters,
        scorer_counters,
    })
}

fn sum_counters(counters: &[Arc<Counters>]) -> (u64, u64) {
    counters
        .iter()
        .fold((0, 0), |(i, r), c| (i + c.invocations(), r + c.rows_in()))
}

pub struct RunOptions {
    pub precompute_override: Option<bool>,
    pub timings: bool,
    pub tsv: bool,
    pub seed: Option<u64>,
}

pub fn cmd_run(config_path: &Path, opts: &RunOptions, out: &mut String) -> Result<(), CliError> {
    let (config, base) = load_config(config_path)?;
    let index_dir = resolve(&base, &config.index.path);
    if !index_dir.join("meta").exists() {
        return Err(CliError::Data(format!(
            "no index at {} (run `pipecache index` first)",
            index_dir.display()
        )));
    }
    let (index, store) = retrieval::load_index(&index_dir).map_err(data_err)?;
    let (index, store) = (Arc::new(index), Arc::new(store));
    let (_, topics, qrels) = load_corpus(&config, &base, opts.seed)?;

    let measures: Vec<MeasureSpec> = config
        .experiment
        .measures
        .iter()
        .map(|m| MeasureSpec::parse(m).unwrap())
        .collect();
    let baseline = config
        .experiment
        .baseline
        .as_ref()
        .map(|b| config.systems.iter().position(|s| &s.name == b).unwrap());
    let names: Vec<String> = config.systems.iter().map(|s| s.name.clone()).collect();

    // implicit single setting when none declared
    let default_settings;
    let settings: &[SettingConfig] = if config.settings.is_empty() {
        default_settings = vec![SettingConfig {
            name: "default".into(),
            precompute: None,
            caches: !config.caches.is_empty(),
            reset: false,
        }];
        &default_settings
    } else {
        &config.settings
    };

    let mut tsv_body = String::new();
    let mut first_elapsed: Option<f64> = None;
    for setting in settings {
        if setting.reset {
            for c in &config.caches {
                let dir = cache_dir(c, &base);
                if dir.exists() {
                    fs::remove_dir_all(&dir).map_err(runtime_err)?;
                }
            }
        }
        let runtime = build_setting(
            &config,
            &base,
            index.clone(),
            store.clone(),
            setting.caches,
        )?;
        let precompute = opts
            .precompute_override
            .or(setting.precompute)
            .unwrap_or(config.experiment.precompute);
        let spec = ExperimentSpec {
            systems: runtime.systems,
            names: Some(names.clone()),
            topics: topics.clone(),
            qrels: qrels.clone(),
            measures: measures.clone(),
            precompute_prefix: precompute,
            baseline,
        };
        let start = Instant::now();
        let result = experiment::run(&spec).map_err(runtime_err)?;
        let elapsed_ms = start.elapsed().as_secs_f64() * 1e3;

        if opts.tsv {
            if tsv_body.is_empty() {
                let header = result.to_tsv();
                let header_line = header.lines().next().unwrap();
                writeln!(tsv_body, "setting\t{header_line}").unwrap();
            }
            for line in result.to_tsv().lines().skip(1) {
                writeln!(tsv_body, "{}\t{line}", setting.name).unwrap();
            }
        } else {
            writeln!(out, "== setting: {} ==", setting.name).unwrap();
            out.push_str(&result.to_tsv());
            out.push_str(&result.prefix_report());
            if !out.ends_with('\n') {
                out.push('\n');
            }
            let (retr_inv, retr_rows) = sum_counters(&runtime.bm25_counters);
            let (_, scored_rows) = sum_counters(&runtime.scorer_counters);
            writeln!(
                out,
                "counters: retriever invocations={retr_inv} rows={retr_rows}; scorer rows={scored_rows}"
            )
            .unwrap();
            write!(out, "time: {elapsed_ms:.1} ms").unwrap();
            if opts.timings {
                match first_elapsed {
                    None => out.push_str(" (reference)"),
                    Some(first) => {
                        let delta = (elapsed_ms - first) / first * 100.0;
                        write!(out, " ({delta:+.1}% vs first)").unwrap();
                    }
                }
            }
            out.push('\n');
        }
        first_elapsed.get_or_insert(elapsed_ms);
    }
    if opts.tsv {
        out.push_str(&tsv_body);
    }
    Ok(())
}

// ----------------------------------------------------------------- cache

pub fn cmd_cache_stats(path: &Path, out: &mut String) -> Result<(), CliError> {
    let (meta, entries, bytes) = caching::cache_stats(path).map_err(|e| match e {
        CacheError::BadMeta(_) | CacheError::Io { .. } => data_err(e),
        other => runtime_err(other),
    })?;
    writeln!(
        out,
        "kind={} label={} entries={entries} bytes={bytes}",
        meta.kind, meta.label
    )
    .unwrap();
    Ok(())
}

pub fn cmd_cache_clear(path: &Path, yes: bool, out: &mut String) -> Result<(), CliError> {
    if !yes {
        return Err(CliError::Config(
            "refusing to clear the cache without --yes".into(),
        ));
    }
    // insist the target looks like one of our caches before deleting
    caching::cache_stats(path).map_err(data_err)?;
    fs::remove_dir_all(path).map_err(runtime_err)?;
    writeln!(out, "cleared {}", path.display()).unwrap();
    Ok(())
}

pub fn cmd_cache_pack(path: &Path, archive: &Path, out: &mut String) -> Result<(), CliError> {
    caching::pack(path, archive).map_err(runtime_err)?;
    writeln!(out, "packed {} into {}", path.display(), archive.display()).unwrap();
    Ok(())
}

pub fn cmd_cache_unpack(archive: &Path, path: &Path, out: &mut String) -> Result<(), CliError> {
    caching::unpack(archive, path).map_err(runtime_err)?;
    writeln!(out, "unpacked {} into {}", archive.display(), path.display()).unwrap();
    Ok(())
}

// ------------------------------------------------------------ clap shell

#[derive(Parser)]
#[command(name = "pipecache", version, about = "Retrieval pipeline experiments with prefix precomputation and explicit caches")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the index declared in the config
    Index {
        #[arg(long)]
        config: PathBuf,
        /// overwrite an existing index
        #[arg(long)]
        force: bool,
        /// override the corpus seed
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the experiment settings declared in the config
    Run {
        #[arg(long)]
        config: PathBuf,
        /// force prefix precomputation on
        #[arg(long, conflicts_with = "no_precompute")]
        precompute: bool,
        /// force prefix precomputation off
        #[arg(long)]
        no_precompute: bool,
        /// report per-setting deltas against the first setting
        #[arg(long)]
        timings: bool,
        /// machine-readable TSV output only
        #[arg(long)]
        tsv: bool,
        /// override the corpus seed
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Inspect or manage cache directories
    Cache {
        #[command(subcommand)]
        command: CacheCommand,
    },
}

#[derive(Subcommand)]
enum CacheCommand {
    /// Entry count and byte size of a cache directory
    Stats { path: PathBuf },
    /// Delete a cache directory (requires --yes)
    Clear {
        path: PathBuf,
        #[arg(long)]
        yes: bool,
    },
    /// Pack a cache directory into a tar archive
    Pack { path: PathBuf, archive: PathBuf },
    /// Unpack a cache archive into a directory
    Unpack { archive: PathBuf, path: PathBuf },
}

/// Run the CLI on the given arguments, writing stdout text to `out`.
/// Returns the process exit code.
pub fn run_cli<I, S>(args: I, out: &mut String) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            // clap handles --help/--version as "errors" with success intent
            let rendered = e.render().to_string();
            out.push_str(&rendered);
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    let result = match cli.command {
        Command::Index {
            config,
            force,
            seed,
        } => cmd_index(&config, force, seed, out),
        Command::Run {
            config,
            precompute,
            no_precompute,
            timings,
            tsv,
            seed,
        } => {
            let precompute_override = if precompute {
                Some(true)
            } else if no_precompute {
                Some(false)
            } else {
                None
            };
            cmd_run(
                &config,
                &RunOptions {
                    precompute_override,
                    timings,
                    tsv,
                    seed,
                },
                out,
            )
        }
        Command::Cache { command } => match command {
            CacheCommand::Stats { path } => cmd_cache_stats(&path, out),
            CacheCommand::Clear { path, yes } => cmd_cache_clear(&path, yes, out),
            CacheCommand::Pack { path, archive } => cmd_cache_pack(&path, &archive, out),
            CacheCommand::Unpack { archive, path } => cmd_cache_unpack(&archive, &path, out),
        },
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            writeln!(out, "error: {}", e.message()).unwrap();
            e.exit_code()
        }
    }
}
