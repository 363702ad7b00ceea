//! End-to-end tests of the `pipecache` binary: exit codes, config
//! validation, the golden TSV output of the demo experiment, and cache
//! management subcommands.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::tempdir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_pipecache"))
}

fn run_in(dir: &Path, args: &[&str]) -> Output {
    bin()
        .args(args)
        .current_dir(dir)
        .env_remove("PIPECACHE_HOME")
        .output()
        .expect("binary runs")
}

fn assert_exit(out: &Output, code: i32) {
    assert_eq!(
        out.status.code(),
        Some(code),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn small_config(extra: &str) -> String {
    format!(
        r#"
[corpus]
seed = 11
num_docs = 120
vocab_size = 60
doc_len_min = 6
doc_len_max = 12
num_queries = 6
query_len = 3

[index]
path = "index"
num_results = 100

[experiment]
measures = ["nDCG@10", "AP"]

[[system]]
name = "bm25"
pipeline = "bm25"

[[system]]
name = "reranked"
pipeline = "bm25 >> cut(k=20) >> mono"
{extra}
"#
    )
}

#[test]
fn demo_config_reproduces_golden_tsv() {
    let dir = tempdir().unwrap();
    let repo = Path::new(env!("CARGO_MANIFEST_DIR"));
    let config_src = repo.join("../../configs/demo.toml");
    fs::copy(&config_src, dir.path().join("demo.toml")).unwrap();

    let out = run_in(dir.path(), &["index", "--config", "demo.toml"]);
    assert_exit(&out, 0);
    let out = run_in(dir.path(), &["run", "--config", "demo.toml", "--tsv"]);
    assert_exit(&out, 0);
    let golden = fs::read_to_string(repo.join("tests/golden/demo_run.tsv")).unwrap();
    assert_eq!(String::from_utf8(out.stdout).unwrap(), golden);
}

#[test]
fn run_without_index_is_a_data_error() {
    let dir = tempdir().unwrap();
    fs::write(dir.path().join("c.toml"), small_config("")).unwrap();
    let out = run_in(dir.path(), &["run", "--config", "c.toml"]);
    assert_exit(&out, 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains("no index"));
}

#[test]
fn index_refuses_overwrite_without_force() {
    let dir = tempdir().unwrap();
    fs::write(dir.path().join("c.toml"), small_config("")).unwrap();
    assert_exit(&run_in(dir.path(), &["index", "--config", "c.toml"]), 0);
    let out = run_in(dir.path(), &["index", "--config", "c.toml"]);
    assert_exit(&out, 3);
    assert_exit(
        &run_in(dir.path(), &["index", "--config", "c.toml", "--force"]),
        0,
    );
}

#[test]
fn empty_corpus_indexes_cleanly() {
    let dir = tempdir().unwrap();
    // TSV corpus with a kinds header and column names but no rows
    fs::write(
        dir.path().join("corpus.tsv"),
        "#kinds:text\ttext\ndocno\ttext\n",
    )
    .unwrap();
    fs::write(
        dir.path().join("topics.tsv"),
        "#kinds:text\ttext\nqid\tquery\nq1\thello\n",
    )
    .unwrap();
    fs::write(
        dir.path().join("qrels.tsv"),
        "#kinds:text\ttext\tinteger\nqid\tdocno\tlabel\n",
    )
    .unwrap();
    let config = r#"
[corpus]
path = "corpus.tsv"
topics = "topics.tsv"
qrels = "qrels.tsv"

[index]
path = "index"

[experiment]
measures = ["AP"]

[[system]]
name = "bm25"
pipeline = "bm25"
"#;
    fs::write(dir.path().join("c.toml"), config).unwrap();
    let out = run_in(dir.path(), &["index", "--config", "c.toml"]);
    assert_exit(&out, 0);
    assert!(String::from_utf8_lossy(&out.stdout).contains("indexed 0 documents"));
    // the empty index loads and the run scores the topic 0 everywhere
    let out = run_in(dir.path(), &["run", "--config", "c.toml", "--tsv"]);
    assert_exit(&out, 0);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.lines().nth(1).unwrap().contains("0.0"));
}

#[test]
fn config_errors_exit_2() {
    let dir = tempdir().unwrap();
    // unknown measure
    let bad = small_config("").replace("\"AP\"", "\"MRR\"");
    fs::write(dir.path().join("c.toml"), bad).unwrap();
    assert_exit(&run_in(dir.path(), &["run", "--config", "c.toml"]), 2);
    // duplicate system name
    let bad = small_config("").replace("name = \"reranked\"", "name = \"bm25\"");
    fs::write(dir.path().join("c.toml"), bad).unwrap();
    assert_exit(&run_in(dir.path(), &["run", "--config", "c.toml"]), 2);
    // baseline not a system
    let bad = small_config("").replace(
        "[experiment]",
        "[experiment]\nbaseline = \"missing\"",
    );
    fs::write(dir.path().join("c.toml"), bad).unwrap();
    assert_exit(&run_in(dir.path(), &["run", "--config", "c.toml"]), 2);
    // malformed TOML
    fs::write(dir.path().join("c.toml"), "not toml [").unwrap();
    assert_exit(&run_in(dir.path(), &["run", "--config", "c.toml"]), 2);
    // missing config file
    assert_exit(&run_in(dir.path(), &["run", "--config", "nope.toml"]), 2);
}

#[test]
fn dsl_errors_carry_position_and_exit_2() {
    let dir = tempdir().unwrap();
    let bad = small_config("").replace(
        "pipeline = \"bm25 >> cut(k=20) >> mono\"",
        "pipeline = \"bm25 >> \"",
    );
    fs::write(dir.path().join("c.toml"), bad).unwrap();
    assert_exit(&run_in(dir.path(), &["index", "--config", "c.toml"]), 0);
    let out = run_in(dir.path(), &["run", "--config", "c.toml"]);
    assert_exit(&out, 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("byte"));
}

#[test]
fn precompute_flag_overrides_config() {
    let dir = tempdir().unwrap();
    fs::write(dir.path().join("c.toml"), small_config("")).unwrap();
    assert_exit(&run_in(dir.path(), &["index", "--config", "c.toml"]), 0);
    let on = run_in(dir.path(), &["run", "--config", "c.toml", "--precompute"]);
    assert_exit(&on, 0);
    let stdout = String::from_utf8(on.stdout).unwrap();
    assert!(stdout.contains("shared prefix of 1 stage(s)"));
    assert!(stdout.contains("retriever invocations=1"));
    let off = run_in(
        dir.path(),
        &["run", "--config", "c.toml", "--no-precompute"],
    );
    assert_exit(&off, 0);
    let stdout_off = String::from_utf8(off.stdout).unwrap();
    assert!(stdout_off.contains("precompute: off"));
    assert!(stdout_off.contains("retriever invocations=2"));
    // measures agree between the two runs
    let table = |s: &str| {
        s.lines()
            .filter(|l| l.starts_with("bm25") || l.starts_with("reranked"))
            .collect::<Vec<_>>()
            .join("\n")
    };
    assert_eq!(table(&stdout), table(&stdout_off));
}

fn cache_config() -> String {
    small_config(
        r#"
[[cache]]
name = "mono_cache"
kind = "scorer"
path = "caches/mono"
wraps = "mono"
label = "mono-v1"

[[setting]]
name = "cold"
caches = true
reset = true

[[setting]]
name = "hot"
caches = true
"#,
    )
}

#[test]
fn cache_lifecycle_stats_pack_unpack_clear() {
    let dir = tempdir().unwrap();
    fs::write(dir.path().join("c.toml"), cache_config()).unwrap();
    assert_exit(&run_in(dir.path(), &["index", "--config", "c.toml"]), 0);
    assert_exit(&run_in(dir.path(), &["run", "--config", "c.toml"]), 0);

    let stats = run_in(dir.path(), &["cache", "stats", "caches/mono"]);
    assert_exit(&stats, 0);
    let stats_text = String::from_utf8(stats.stdout).unwrap();
    assert!(stats_text.contains("kind=scorer"));
    assert!(stats_text.contains("label=mono-v1"));
    assert!(!stats_text.contains("entries=0"));

    // pack, unpack elsewhere, stats agree
    assert_exit(
        &run_in(dir.path(), &["cache", "pack", "caches/mono", "mono.tar"]),
        0,
    );
    assert_exit(
        &run_in(dir.path(), &["cache", "unpack", "mono.tar", "unpacked"]),
        0,
    );
    let stats2 = run_in(dir.path(), &["cache", "stats", "unpacked"]);
    assert_exit(&stats2, 0);
    assert_eq!(stats_text, String::from_utf8(stats2.stdout).unwrap());

    // clear refuses without --yes, succeeds with it
    let refused = run_in(dir.path(), &["cache", "clear", "caches/mono"]);
    assert_exit(&refused, 2);
    assert!(dir.path().join("caches/mono").exists());
    assert_exit(
        &run_in(dir.path(), &["cache", "clear", "caches/mono", "--yes"]),
        0,
    );
    assert!(!dir.path().join("caches/mono").exists());

    // stats on a missing directory is a data error
    assert_exit(&run_in(dir.path(), &["cache", "stats", "caches/mono"]), 3);
}

#[test]
fn fresh_cache_stats_show_zero_entries() {
    let dir = tempdir().unwrap();
    // create an empty scorer cache by declaring it and running nothing:
    // simplest is a run whose pipelines never touch the cache name
    fs::write(
        dir.path().join("c.toml"),
        cache_config().replace("pipeline = \"bm25 >> cut(k=20) >> mono\"", "pipeline = \"bm25\""),
    )
    .unwrap();
    assert_exit(&run_in(dir.path(), &["index", "--config", "c.toml"]), 0);
    assert_exit(&run_in(dir.path(), &["run", "--config", "c.toml"]), 0);
    let stats = run_in(dir.path(), &["cache", "stats", "caches/mono"]);
    assert_exit(&stats, 0);
    assert!(String::from_utf8_lossy(&stats.stdout).contains("entries=0"));
}

#[test]
fn hot_setting_reports_zero_scored_rows() {
    let dir = tempdir().unwrap();
    fs::write(dir.path().join("c.toml"), cache_config()).unwrap();
    assert_exit(&run_in(dir.path(), &["index", "--config", "c.toml"]), 0);
    let out = run_in(dir.path(), &["run", "--config", "c.toml", "--timings"]);
    assert_exit(&out, 0);
    let text = String::from_utf8(out.stdout).unwrap();
    let counters: Vec<&str> = text
        .lines()
        .filter(|l| l.starts_with("counters:"))
        .collect();
    assert_eq!(counters.len(), 2);
    assert!(!counters[0].contains("scorer rows=0"), "{}", counters[0]);
    assert!(counters[1].contains("scorer rows=0"), "{}", counters[1]);
    assert!(text.contains("(reference)"));
    assert!(text.contains("% vs first"));
}

#[test]
fn pipecache_home_sets_default_cache_root() {
    let dir = tempdir().unwrap();
    let home = dir.path().join("home");
    let config = cache_config().replace("path = \"caches/mono\"\n", "");
    fs::write(dir.path().join("c.toml"), config).unwrap();
    assert_exit(&run_in(dir.path(), &["index", "--config", "c.toml"]), 0);
    let out = bin()
        .args(["run", "--config", "c.toml"])
        .current_dir(dir.path())
        .env("PIPECACHE_HOME", &home)
        .output()
        .unwrap();
    assert_exit(&out, 0);
    assert!(home.join("mono_cache").join("meta").exists());
}
