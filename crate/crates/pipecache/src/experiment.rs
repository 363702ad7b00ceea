//! Declarative experiment runner: evaluates a set of pipelines over the
//! same topics, with optional precomputation of the longest common prefix
//! (LCP) shared by all pipelines, per-query effectiveness measures, paired
//! significance tests against a baseline and Holm multiple-testing
//! correction.
//!
//! Precomputation is purely an efficiency device: with it on, the shared
//! prefix runs once and each pipeline's remainder is applied to the interim
//! result. Output is bit-identical either way.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;

use statrs::function::beta::beta_reg;
use thiserror::Error;

use crate::frame::{self, Frame, FrameError, RelationKind};
use crate::pipeline::{struct_eq, Node, PipelineError, Transformer};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("experiment needs at least one system")]
    NoSystems,
    #[error("experiment needs at least one measure")]
    NoMeasures,
    #[error("{got} names given for {systems} systems")]
    NameCount { got: usize, systems: usize },
    #[error("measure cutoff k must be at least 1")]
    ZeroK,
    #[error("baseline index {0} is out of range")]
    BadBaseline(usize),
    #[error("paired test needs two same-length samples of at least 2 values")]
    BadSamples,
    #[error("the given prefix is not a structural prefix of pipeline {0}")]
    NotAPrefix(usize),
    #[error(transparent)]
    Frame(#[from] FrameError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
}

/// An effectiveness measure, evaluated per query and averaged over topics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MeasureSpec {
    NdcgAtK(u64),
    AveragePrecision,
    PrecisionAtK(u64),
}

impl MeasureSpec {
    pub fn validate(self) -> Result<(), ExperimentError> {
        match self {
            MeasureSpec::NdcgAtK(k) | MeasureSpec::PrecisionAtK(k) if k == 0 => {
                Err(ExperimentError::ZeroK)
            }
            _ => Ok(()),
        }
    }

    pub fn name(self) -> String {
        match self {
            MeasureSpec::NdcgAtK(k) => format!("nDCG@{k}"),
            MeasureSpec::AveragePrecision => "AP".into(),
            MeasureSpec::PrecisionAtK(k) => format!("P@{k}"),
        }
    }

    /// Parse names of the form produced by [`MeasureSpec::name`].
    pub fn parse(text: &str) -> Option<MeasureSpec> {
        if text == "AP" {
            return Some(MeasureSpec::AveragePrecision);
        }
        if let Some(k) = text.strip_prefix("nDCG@") {
            return k.parse().ok().map(MeasureSpec::NdcgAtK);
        }
        if let Some(k) = text.strip_prefix("P@") {
            return k.parse().ok().map(MeasureSpec::PrecisionAtK);
        }
        None
    }
}

/// Everything `run` needs: the systems under comparison, their topics and
/// judgments, the measures to report, and the precompute/baseline options.
pub struct ExperimentSpec {
    pub systems: Vec<Transformer>,
    pub names: Option<Vec<String>>,
    pub topics: Frame,
    pub qrels: Frame,
    pub measures: Vec<MeasureSpec>,
    pub precompute_prefix: bool,
    pub baseline: Option<usize>,
}

/// Per-system evaluation output.
#[derive(Clone, Debug)]
pub struct SystemResult {
    pub name: String,
    /// `per_query[m][q]`: measure m evaluated on topic q, in topic order.
    pub per_query: Vec<Vec<f64>>,
    pub means: Vec<f64>,
    pub p_value: Option<f64>,
    pub p_corrected: Option<f64>,
}

/// What the precompute pass did: how many stages were shared and what
/// they were.
#[derive(Clone, Debug, Default)]
pub struct PrefixReport {
    pub precompute_requested: bool,
    pub precompute_applied: bool,
    pub lcp_len: usize,
    pub stage_descriptions: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct ExperimentResult {
    pub measures: Vec<MeasureSpec>,
    pub systems: Vec<SystemResult>,
    pub prefix: PrefixReport,
}

/// Stage list of a pipeline: the flattened `Then` chain (a non-`Then`
/// transformer is its own single stage).
pub fn stages(t: &Transformer) -> Vec<Transformer> {
    t.flatten()
}

/// Longest common prefix of the given stage lists under structural
/// equality. For a single pipeline this is the whole pipeline; callers
/// gate precomputation on having at least two.
pub fn lcp(pipelines: &[Vec<Transformer>]) -> Vec<Transformer> {
    let Some(first) = pipelines.first() else {
        return Vec::new();
    };
    let mut len = first.len();
    for p in &pipelines[1..] {
        len = len.min(p.len());
        for j in 0..len {
            if !struct_eq(&first[j], &p[j]) {
                len = j;
                break;
            }
        }
    }
    first[..len].to_vec()
}

/// Each pipeline with the common prefix removed; an empty remainder
/// becomes `Identity`.
pub fn remainders(
    pipelines: &[Vec<Transformer>],
    cp: &[Transformer],
) -> Result<Vec<Transformer>, ExperimentError> {
    let mut out = Vec::with_capacity(pipelines.len());
    for (i, p) in pipelines.iter().enumerate() {
        if p.len() < cp.len() || cp.iter().zip(p).any(|(a, b)| !struct_eq(a, b)) {
            return Err(ExperimentError::NotAPrefix(i));
        }
        let rest = &p[cp.len()..];
        out.push(match rest.len() {
            0 => Transformer::identity(),
            1 => rest[0].clone(),
            _ => Transformer::from_stages(rest.to_vec())?,
        });
    }
    Ok(out)
}

fn describe_stage(t: &Transformer) -> String {
    match t.node() {
        Node::Identity => "identity".into(),
        Node::Leaf(leaf) => {
            if leaf.params.is_empty() {
                leaf.kind.clone()
            } else {
                let params: Vec<String> = leaf
                    .params
                    .iter()
                    .map(|(k, v)| format!("{k}={v}"))
                    .collect();
                format!("{}({})", leaf.kind, params.join(", "))
            }
        }
        Node::Then(stages) => format!("chain of {} stages", stages.len()),
        Node::Cutoff(inner, k) => format!("{} % {k}", describe_stage(inner)),
        Node::LinearCombine(a, b) => {
            format!("({} + {})", describe_stage(a), describe_stage(b))
        }
        Node::ScalarProduct(a, c) => format!("({} * {c:?})", describe_stage(a)),
        Node::FeatureUnion(a, b) => {
            format!("({} ** {})", describe_stage(a), describe_stage(b))
        }
        Node::SetUnion(a, b) => format!("({} | {})", describe_stage(a), describe_stage(b)),
        Node::SetIntersect(a, b) => {
            format!("({} & {})", describe_stage(a), describe_stage(b))
        }
        Node::Concat(a, b) => format!("({} ^ {})", describe_stage(a), describe_stage(b)),
    }
}

/// Judgments for one qid: docno → label.
type QrelMap = HashMap<String, HashMap<String, i64>>;

fn qrel_map(qrels: &Frame) -> Result<QrelMap, ExperimentError> {
    frame::require(qrels, RelationKind::Assessments)?;
    let mut map: QrelMap = HashMap::new();
    for i in 0..qrels.len() {
        let qid = qrels.text(i, "qid").unwrap().to_string();
        let docno = qrels.text(i, "docno").unwrap().to_string();
        let label = qrels.int(i, "label").unwrap();
        map.entry(qid).or_default().insert(docno, label);
    }
    Ok(map)
}

/// Rank-ordered docnos per qid from an R-frame.
fn rankings(results: &Frame) -> Result<HashMap<String, Vec<String>>, ExperimentError> {
    frame::require(results, RelationKind::Results)?;
    let mut by_qid: HashMap<String, Vec<(i64, String)>> = HashMap::new();
    for i in 0..results.len() {
        let qid = results.text(i, "qid").unwrap().to_string();
        let rank = results.int(i, "rank").unwrap();
        let docno = results.text(i, "docno").unwrap().to_string();
        by_qid.entry(qid).or_default().push((rank, docno));
    }
    Ok(by_qid
        .into_iter()
        .map(|(qid, mut rows)| {
            rows.sort();
            (qid, rows.into_iter().map(|(_, d)| d).collect())
        })
        .collect())
}

fn gain(label: i64) -> f64 {
    (label as f64).exp2() - 1.0
}

fn discount(rank_from_zero: usize) -> f64 {
    (rank_from_zero as f64 + 2.0).log2()
}

/// nDCG@k with exponential gain 2^label − 1 and log2(rank + 2) discount
/// over 0-based ranks. The ideal ranking draws on every judged document
/// for the query; 0 when nothing relevant is judged.
pub fn ndcg_at_k(ranking: &[String], labels: &HashMap<String, i64>, k: u64) -> f64 {
    let k = k as usize;
    let dcg: f64 = ranking
        .iter()
        .take(k)
        .enumerate()
        .map(|(i, d)| gain(labels.get(d).copied().unwrap_or(0)) / discount(i))
        .sum();
    let mut ideal: Vec<f64> = labels.values().map(|&l| gain(l)).filter(|&g| g > 0.0).collect();
    ideal.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let idcg: f64 = ideal
        .iter()
        .take(k)
        .enumerate()
        .map(|(i, g)| g / discount(i))
        .sum();
    if idcg == 0.0 {
        0.0
    } else {
        dcg / idcg
    }
}

/// Average precision over the full ranking; label > 0 counts as relevant,
/// denominator is the number of judged-relevant documents.
pub fn average_precision(ranking: &[String], labels: &HashMap<String, i64>) -> f64 {
    let total_relevant = labels.values().filter(|&&l| l > 0).count();
    if total_relevant == 0 {
        return 0.0;
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, d) in ranking.iter().enumerate() {
        if labels.get(d).copied().unwrap_or(0) > 0 {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    sum / total_relevant as f64
}

/// Fraction of the top k that is judged relevant (label > 0).
pub fn precision_at_k(ranking: &[String], labels: &HashMap<String, i64>, k: u64) -> f64 {
    let relevant = ranking
        .iter()
        .take(k as usize)
        .filter(|d| labels.get(*d).copied().unwrap_or(0) > 0)
        .count();
    relevant as f64 / k as f64
}

fn eval_measure(
    measure: MeasureSpec,
    ranking: &[String],
    labels: &HashMap<String, i64>,
) -> f64 {
    match measure {
        MeasureSpec::NdcgAtK(k) => ndcg_at_k(ranking, labels, k),
        MeasureSpec::AveragePrecision => average_precision(ranking, labels),
        MeasureSpec::PrecisionAtK(k) => precision_at_k(ranking, labels, k),
    }
}

/// Two-sided paired Student t-test result. `degenerate` flags the case of
/// identical samples, where t is undefined and p is reported as 1.
#[derive(Clone, Copy, Debug)]
pub struct PairedTTest {
    pub t: f64,
    pub p: f64,
    pub degenerate: bool,
}

/// Two-sided paired Student t-test. p-values come from the regularized
/// incomplete beta function with n − 1 degrees of freedom. All-zero
/// differences are degenerate (p = 1); zero variance with a non-zero mean
/// difference gives an infinite t and p = 0.
pub fn paired_t_test(x: &[f64], y: &[f64]) -> Result<PairedTTest, ExperimentError> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(ExperimentError::BadSamples);
    }
    let n = x.len() as f64;
    let diffs: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).collect();
    let mean = diffs.iter().sum::<f64>() / n;
    let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0);
    if var == 0.0 {
        if mean == 0.0 {
            return Ok(PairedTTest {
                t: 0.0,
                p: 1.0,
                degenerate: true,
            });
        }
        return Ok(PairedTTest {
            t: if mean > 0.0 { f64::INFINITY } else { f64::NEG_INFINITY },
            p: 0.0,
            degenerate: false,
        });
    }
    let t = mean / (var / n).sqrt();
    let df = n - 1.0;
    let p = beta_reg(df / 2.0, 0.5, df / (df + t * t));
    Ok(PairedTTest {
        t,
        p,
        degenerate: false,
    })
}

/// Holm step-down adjusted p-values, in the input order, clipped to 1 and
/// monotone over the sorted order.
pub fn holm_correction(p_values: &[f64]) -> Vec<f64> {
    let m = p_values.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| p_values[a].partial_cmp(&p_values[b]).unwrap());
    let mut adjusted = vec![0.0; m];
    let mut running = 0.0f64;
    for (i, &idx) in order.iter().enumerate() {
        let scaled = ((m - i) as f64) * p_values[idx];
        running = running.max(scaled).min(1.0);
        adjusted[idx] = running;
    }
    adjusted
}

/// Evaluate the experiment. With `precompute_prefix` and at least two
/// systems sharing a non-empty LCP, the prefix runs once and remainders
/// consume the interim frame; results are bit-identical to running each
/// system in full.
pub fn run(spec: &ExperimentSpec) -> Result<ExperimentResult, ExperimentError> {
    if spec.systems.is_empty() {
        return Err(ExperimentError::NoSystems);
    }
    if spec.measures.is_empty() {
        return Err(ExperimentError::NoMeasures);
    }
    for m in &spec.measures {
        m.validate()?;
    }
    if let Some(names) = &spec.names {
        if names.len() != spec.systems.len() {
            return Err(ExperimentError::NameCount {
                got: names.len(),
                systems: spec.systems.len(),
            });
        }
    }
    if let Some(b) = spec.baseline {
        if b >= spec.systems.len() {
            return Err(ExperimentError::BadBaseline(b));
        }
    }
    frame::require(&spec.topics, RelationKind::Queries)?;
    let qrels = qrel_map(&spec.qrels)?;

    let stage_lists: Vec<Vec<Transformer>> = spec.systems.iter().map(stages).collect();
    let cp = lcp(&stage_lists);
    let apply_prefix = spec.precompute_prefix && spec.systems.len() >= 2 && !cp.is_empty();
    let mut prefix = PrefixReport {
        precompute_requested: spec.precompute_prefix,
        precompute_applied: apply_prefix,
        lcp_len: if apply_prefix { cp.len() } else { 0 },
        stage_descriptions: Vec::new(),
    };

    let result_frames: Vec<Frame> = if apply_prefix {
        prefix.stage_descriptions = cp.iter().map(describe_stage).collect();
        let prefix_t = match cp.len() {
            1 => cp[0].clone(),
            _ => Transformer::from_stages(cp.clone())?,
        };
        let interim = prefix_t.apply(&spec.topics)?;
        let rest = remainders(&stage_lists, &cp)?;
        rest.iter()
            .map(|r| r.apply(&interim))
            .collect::<Result<_, _>>()?
    } else {
        spec.systems
            .iter()
            .map(|s| s.apply(&spec.topics))
            .collect::<Result<_, _>>()?
    };

    // topic order defines per-query vector order; duplicate qids collapse
    let mut topic_qids: Vec<String> = Vec::new();
    let mut seen = HashSet::new();
    for i in 0..spec.topics.len() {
        let qid = spec.topics.text(i, "qid").unwrap().to_string();
        if seen.insert(qid.clone()) {
            topic_qids.push(qid);
        }
    }
    let empty_labels = HashMap::new();
    let empty_ranking: Vec<String> = Vec::new();

    let mut systems: Vec<SystemResult> = Vec::with_capacity(spec.systems.len());
    for (i, frame) in result_frames.iter().enumerate() {
        let ranked = rankings(frame)?;
        let mut per_query: Vec<Vec<f64>> = vec![Vec::with_capacity(topic_qids.len()); spec.measures.len()];
        for qid in &topic_qids {
            let ranking = ranked.get(qid).unwrap_or(&empty_ranking);
            let labels = qrels.get(qid).unwrap_or(&empty_labels);
            for (m, &measure) in spec.measures.iter().enumerate() {
                per_query[m].push(eval_measure(measure, ranking, labels));
            }
        }
        let means = per_query
            .iter()
            .map(|vals| {
                if vals.is_empty() {
                    0.0
                } else {
                    vals.iter().sum::<f64>() / vals.len() as f64
                }
            })
            .collect();
        let name = spec
            .names
            .as_ref()
            .map(|n| n[i].clone())
            .unwrap_or_else(|| format!("system_{i}"));
        systems.push(SystemResult {
            name,
            per_query,
            means,
            p_value: None,
            p_corrected: None,
        });
    }

    if let Some(b) = spec.baseline {
        if topic_qids.len() >= 2 {
            // significance on the first measure, against the baseline system
            let baseline_vals = systems[b].per_query[0].clone();
            let mut raw: Vec<(usize, f64)> = Vec::new();
            for (i, sys) in systems.iter().enumerate() {
                if i == b {
                    continue;
                }
                let test = paired_t_test(&sys.per_query[0], &baseline_vals)?;
                raw.push((i, test.p));
            }
            let corrected = holm_correction(&raw.iter().map(|(_, p)| *p).collect::<Vec<_>>());
            for ((i, p), c) in raw.into_iter().zip(corrected) {
                systems[i].p_value = Some(p);
                systems[i].p_corrected = Some(c);
            }
        }
    }

    Ok(ExperimentResult {
        measures: spec.measures.clone(),
        systems,
        prefix,
    })
}

impl ExperimentResult {
    /// Tab-separated table: one row per system, one column per measure,
    /// plus p / corrected-p columns when a baseline was tested.
    pub fn to_tsv(&self) -> String {
        let has_p = self.systems.iter().any(|s| s.p_value.is_some());
        let mut out = String::from("name");
        for m in &self.measures {
            write!(out, "\t{}", m.name()).unwrap();
        }
        if has_p {
            out.push_str("\tp\tp_corrected");
        }
        out.push('\n');
        for s in &self.systems {
            out.push_str(&s.name);
            for mean in &s.means {
                write!(out, "\t{mean:?}").unwrap();
            }
            if has_p {
                match (s.p_value, s.p_corrected) {
                    (Some(p), Some(c)) => write!(out, "\t{p:?}\t{c:?}").unwrap(),
                    _ => out.push_str("\t-\t-"),
                }
            }
            out.push('\n');
        }
        out
    }

    /// Human-readable account of what the prefix pass shared.
    pub fn prefix_report(&self) -> String {
        if !self.prefix.precompute_requested {
            return "precompute: off".into();
        }
        if !self.prefix.precompute_applied {
            return "precompute: requested but not applicable (needs >=2 systems with a shared prefix)".into();
        }
        let mut out = format!(
            "precompute: shared prefix of {} stage(s) ran once\n",
            self.prefix.lcp_len
        );
        for (i, d) in self.prefix.stage_descriptions.iter().enumerate() {
            writeln!(out, "  stage {i}: {d}").unwrap();
        }
        out
    }
}
