//! Transformer abstraction and the operator algebra for combining them.
//!
//! A transformer is an immutable pipeline node evaluated against a frame.
//! `a >> b` composes ("then"), `%` truncates ranked lists, `+` sums scores,
//! `*` scales them, `**` combines two result lists as features, `|`/`&` are
//! document set union/intersection, and `^` concatenates one result list
//! below another. Structural equality over these trees is what prefix
//! detection relies on.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::sync::Arc;

use thiserror::Error;

use crate::frame::{self, Frame, FrameError, Kind, RelationKind, Value};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("cutoff k must be positive")]
    ZeroCutoff,
    #[error("a then-chain needs at least two stages")]
    ShortChain,
    #[error("{0}")]
    Frame(#[from] FrameError),
    #[error("leaf `{leaf}` failed: {message}")]
    Leaf { leaf: String, message: String },
}

/// Leaf parameter value. Reals compare bit-wise.
#[derive(Clone, Debug)]
pub enum Param {
    Text(String),
    Real(f64),
    Int(i64),
}

impl PartialEq for Param {
    fn eq(&self, other: &Param) -> bool {
        match (self, other) {
            (Param::Text(a), Param::Text(b)) => a == b,
            (Param::Real(a), Param::Real(b)) => a.to_bits() == b.to_bits(),
            (Param::Int(a), Param::Int(b)) => a == b,
            _ => false,
        }
    }
}

impl Eq for Param {}

impl fmt::Display for Param {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Param::Text(s) => write!(f, "'{s}'"),
            Param::Real(x) => write!(f, "{x:?}"),
            Param::Int(x) => write!(f, "{x}"),
        }
    }
}

/// Behavior of a leaf transformer.
pub trait LeafOp: Send + Sync {
    fn apply(&self, input: &Frame) -> Result<Frame, PipelineError>;
}

impl<F> LeafOp for F
where
    F: Fn(&Frame) -> Result<Frame, PipelineError> + Send + Sync,
{
    fn apply(&self, input: &Frame) -> Result<Frame, PipelineError> {
        self(input)
    }
}

/// A leaf node. Identity is (kind, params); the op is behavior only and
/// never takes part in equality.
#[derive(Clone)]
pub struct Leaf {
    pub kind: String,
    pub params: Vec<(String, Param)>,
    pub op: Arc<dyn LeafOp>,
}

impl PartialEq for Leaf {
    fn eq(&self, other: &Leaf) -> bool {
        self.kind == other.kind && self.params == other.params
    }
}

impl Eq for Leaf {}

impl fmt::Debug for Leaf {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Leaf")
            .field("kind", &self.kind)
            .field("params", &self.params)
            .finish()
    }
}

#[derive(Clone, Debug)]
pub enum Node {
    Identity,
    Leaf(Leaf),
    Then(Vec<Transformer>),
    Cutoff(Box<Transformer>, u64),
    LinearCombine(Box<Transformer>, Box<Transformer>),
    ScalarProduct(Box<Transformer>, f64),
    FeatureUnion(Box<Transformer>, Box<Transformer>),
    SetUnion(Box<Transformer>, Box<Transformer>),
    SetIntersect(Box<Transformer>, Box<Transformer>),
    Concat(Box<Transformer>, Box<Transformer>),
}

impl PartialEq for Node {
    fn eq(&self, other: &Node) -> bool {
        match (self, other) {
            (Node::Identity, Node::Identity) => true,
            (Node::Leaf(a), Node::Leaf(b)) => a == b,
            (Node::Then(a), Node::Then(b)) => a == b,
            (Node::Cutoff(a, ka), Node::Cutoff(b, kb)) => ka == kb && a == b,
            (Node::LinearCombine(a1, a2), Node::LinearCombine(b1, b2))
            | (Node::FeatureUnion(a1, a2), Node::FeatureUnion(b1, b2))
            | (Node::SetUnion(a1, a2), Node::SetUnion(b1, b2))
            | (Node::SetIntersect(a1, a2), Node::SetIntersect(b1, b2))
            | (Node::Concat(a1, a2), Node::Concat(b1, b2)) => a1 == b1 && a2 == b2,
            (Node::ScalarProduct(a, ca), Node::ScalarProduct(b, cb)) => {
                // reals compare bit-wise
                ca.to_bits() == cb.to_bits() && a == b
            }
            _ => false,
        }
    }
}

impl Eq for Node {}

/// Immutable pipeline node, leaf or operator-combinator.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Transformer {
    node: Node,
}

impl Transformer {
    pub fn node(&self) -> &Node {
        &self.node
    }

    pub fn identity() -> Transformer {
        Transformer {
            node: Node::Identity,
        }
    }

    pub fn leaf(
        kind: impl Into<String>,
        params: Vec<(String, Param)>,
        op: Arc<dyn LeafOp>,
    ) -> Transformer {
        Transformer {
            node: Node::Leaf(Leaf {
                kind: kind.into(),
                params,
                op,
            }),
        }
    }

    /// `self >> next`. Then-chains are flattened on construction, so nested
    /// composition never produces nested Then nodes.
    pub fn then(&self, next: &Transformer) -> Transformer {
        let mut stages = Vec::new();
        match &self.node {
            Node::Then(s) => stages.extend(s.iter().cloned()),
            _ => stages.push(self.clone()),
        }
        match &next.node {
            Node::Then(s) => stages.extend(s.iter().cloned()),
            _ => stages.push(next.clone()),
        }
        Transformer {
            node: Node::Then(stages),
        }
    }

    /// Rebuild a pipeline from a stage list.
    pub fn from_stages(stages: Vec<Transformer>) -> Result<Transformer, PipelineError> {
        match stages.len() {
            0 => Err(PipelineError::ShortChain),
            1 => Ok(stages.into_iter().next().unwrap()),
            _ => {
                let mut flat = Vec::new();
                for s in stages {
                    match s.node {
                        Node::Then(inner) => flat.extend(inner),
                        _ => flat.push(s),
                    }
                }
                Ok(Transformer {
                    node: Node::Then(flat),
                })
            }
        }
    }

    /// `self % k`.
    pub fn cutoff(&self, k: u64) -> Result<Transformer, PipelineError> {
        if k == 0 {
            return Err(PipelineError::ZeroCutoff);
        }
        Ok(Transformer {
            node: Node::Cutoff(Box::new(self.clone()), k),
        })
    }

    /// `self + other`.
    pub fn linear_combine(&self, other: &Transformer) -> Transformer {
        Transformer {
            node: Node::LinearCombine(Box::new(self.clone()), Box::new(other.clone())),
        }
    }

    /// `self * c`.
    pub fn scalar_product(&self, c: f64) -> Transformer {
        Transformer {
            node: Node::ScalarProduct(Box::new(self.clone()), c),
        }
    }

    /// `self ** other`.
    pub fn feature_union(&self, other: &Transformer) -> Transformer {
        Transformer {
            node: Node::FeatureUnion(Box::new(self.clone()), Box::new(other.clone())),
        }
    }

    /// `self | other`.
    pub fn set_union(&self, other: &Transformer) -> Transformer {
        Transformer {
            node: Node::SetUnion(Box::new(self.clone()), Box::new(other.clone())),
        }
    }

    /// `self & other`.
    pub fn set_intersect(&self, other: &Transformer) -> Transformer {
        Transformer {
            node: Node::SetIntersect(Box::new(self.clone()), Box::new(other.clone())),
        }
    }

    /// `self ^ other`.
    pub fn concat(&self, other: &Transformer) -> Transformer {
        Transformer {
            node: Node::Concat(Box::new(self.clone()), Box::new(other.clone())),
        }
    }

    /// Evaluate against a frame.
    pub fn apply(&self, input: &Frame) -> Result<Frame, PipelineError> {
        match &self.node {
            Node::Identity => Ok(input.clone()),
            Node::Leaf(leaf) => leaf.op.apply(input),
            Node::Then(stages) => {
                let mut current = input.clone();
                for stage in stages {
                    current = stage.apply(&current)?;
                }
                Ok(current)
            }
            Node::Cutoff(inner, k) => eval_cutoff(&inner.apply(input)?, *k),
            Node::LinearCombine(a, b) => {
                eval_linear_combine(&a.apply(input)?, &b.apply(input)?)
            }
            Node::ScalarProduct(inner, c) => eval_scalar_product(&inner.apply(input)?, *c),
            Node::FeatureUnion(a, b) => eval_feature_union(&a.apply(input)?, &b.apply(input)?),
            Node::SetUnion(a, b) => eval_set_op(&a.apply(input)?, &b.apply(input)?, SetOp::Union),
            Node::SetIntersect(a, b) => {
                eval_set_op(&a.apply(input)?, &b.apply(input)?, SetOp::Intersect)
            }
            Node::Concat(a, b) => eval_concat(&a.apply(input)?, &b.apply(input)?),
        }
    }

    /// Top-level stage list. Compound operator nodes are single stages and
    /// are not descended into.
    pub fn flatten(&self) -> Vec<Transformer> {
        match &self.node {
            Node::Then(stages) => stages.clone(),
            _ => vec![self.clone()],
        }
    }
}

/// Structural equality, spelled out as a free function to mirror the
/// equality property that prefix detection assumes.
pub fn struct_eq(a: &Transformer, b: &Transformer) -> bool {
    a == b
}

#[derive(Clone, Copy, PartialEq, Eq)]
pub enum SetOp {
    Union,
    Intersect,
}

/// Per qid, keep the rows ranked below `k` (after rank normalization).
pub fn eval_cutoff(results: &Frame, k: u64) -> Result<Frame, PipelineError> {
    if k == 0 {
        return Err(PipelineError::ZeroCutoff);
    }
    frame::require(results, RelationKind::Results)?;
    let ranked = frame::assign_ranks(results)?;
    let keep: Vec<usize> = (0..ranked.len())
        .filter(|&i| ranked.int(i, "rank").unwrap() < k as i64)
        .collect();
    Ok(ranked.select_rows(&keep))
}

/// A rank cutoff as a standalone leaf stage. Unlike the `%` operator,
/// which wraps its operand in a compound node, this leaf is its own stage
/// in a `>>` chain, so chains that differ only in a later cutoff depth
/// still share their retriever as a common prefix. Two instances with the
/// same k are structurally equal.
pub fn rank_cutoff_leaf(k: u64) -> Result<Transformer, PipelineError> {
    if k == 0 {
        return Err(PipelineError::ZeroCutoff);
    }
    Ok(Transformer::leaf(
        "cut",
        vec![("k".into(), Param::Int(k as i64))],
        Arc::new(move |f: &Frame| eval_cutoff(f, k)),
    ))
}

fn group_join(
    a: &Frame,
    b: &Frame,
) -> (Vec<(String, String)>, HashMap<(String, String), (Option<usize>, Option<usize>)>) {
    // full outer join keys on (qid, docno): order = first appearance scanning a then b
    let mut order: Vec<(String, String)> = Vec::new();
    let mut map: HashMap<(String, String), (Option<usize>, Option<usize>)> = HashMap::new();
    for (i, _) in a.rows().iter().enumerate() {
        let key = (
            a.text(i, "qid").unwrap_or_default().to_string(),
            a.text(i, "docno").unwrap_or_default().to_string(),
        );
        let entry = map.entry(key.clone()).or_insert_with(|| {
            order.push(key);
            (None, None)
        });
        entry.0.get_or_insert(i);
    }
    for (i, _) in b.rows().iter().enumerate() {
        let key = (
            b.text(i, "qid").unwrap_or_default().to_string(),
            b.text(i, "docno").unwrap_or_default().to_string(),
        );
        let entry = map.entry(key.clone()).or_insert_with(|| {
            order.push(key);
            (None, None)
        });
        entry.1.get_or_insert(i);
    }
    (order, map)
}

fn results_schema() -> Frame {
    Frame::new(vec![
        ("qid".into(), Kind::Text),
        ("docno".into(), Kind::Text),
        ("score".into(), Kind::Real),
    ])
    .unwrap()
}

/// Sum scores over a full outer join on (qid, docno); a missing side
/// contributes 0. Output carries qid, docno, score and reassigned ranks.
pub fn eval_linear_combine(a: &Frame, b: &Frame) -> Result<Frame, PipelineError> {
    frame::require(a, RelationKind::Results)?;
    frame::require(b, RelationKind::Results)?;
    let (order, map) = group_join(a, b);
    let mut out = results_schema();
    for key in order {
        let (ia, ib) = map[&key];
        let sa = ia.map(|i| a.real(i, "score").unwrap()).unwrap_or(0.0);
        let sb = ib.map(|i| b.real(i, "score").unwrap()).unwrap_or(0.0);
        out.push_row(vec![
            Value::Text(key.0),
            Value::Text(key.1),
            Value::Real(sa + sb),
        ])?;
    }
    Ok(frame::assign_ranks(&out)?)
}

/// Multiply every score by `c` and reassign ranks.
pub fn eval_scalar_product(a: &Frame, c: f64) -> Result<Frame, PipelineError> {
    frame::require(a, RelationKind::Results)?;
    let scores: Vec<Value> = a
        .rows()
        .iter()
        .enumerate()
        .map(|(i, _)| Value::Real(a.real(i, "score").unwrap() * c))
        .collect();
    let scaled = a.with_column("score", Kind::Real, scores)?;
    Ok(frame::assign_ranks(&scaled)?)
}

/// Outer join producing a `features` real-list column `[score_a, score_b]`
/// with 0 for a missing side. The left branch's score is retained, so the
/// ranking follows the left ordering.
pub fn eval_feature_union(a: &Frame, b: &Frame) -> Result<Frame, PipelineError> {
    frame::require(a, RelationKind::Results)?;
    frame::require(b, RelationKind::Results)?;
    let (order, map) = group_join(a, b);
    let mut out = Frame::new(vec![
        ("qid".into(), Kind::Text),
        ("docno".into(), Kind::Text),
        ("score".into(), Kind::Real),
        ("features".into(), Kind::RealList),
    ])
    .unwrap();
    for key in order {
        let (ia, ib) = map[&key];
        let sa = ia.map(|i| a.real(i, "score").unwrap()).unwrap_or(0.0);
        let sb = ib.map(|i| b.real(i, "score").unwrap()).unwrap_or(0.0);
        out.push_row(vec![
            Value::Text(key.0),
            Value::Text(key.1),
            Value::Real(sa),
            Value::RealList(vec![sa, sb]),
        ])?;
    }
    Ok(frame::assign_ranks(&out)?)
}

/// Per-qid set union or intersection of docnos. Scores and ranks are
/// dropped; output is sorted by (qid first appearance, docno ascending).
pub fn eval_set_op(a: &Frame, b: &Frame, op: SetOp) -> Result<Frame, PipelineError> {
    frame::require(a, RelationKind::Results)?;
    frame::require(b, RelationKind::Results)?;
    let collect = |f: &Frame, qids: &mut Vec<String>, map: &mut HashMap<String, HashSet<String>>| {
        for i in 0..f.len() {
            let qid = f.text(i, "qid").unwrap().to_string();
            let docno = f.text(i, "docno").unwrap().to_string();
            map.entry(qid.clone()).or_insert_with(|| {
                qids.push(qid.clone());
                HashSet::new()
            });
            map.get_mut(&qid).unwrap().insert(docno);
        }
    };
    let mut qids = Vec::new();
    let mut da: HashMap<String, HashSet<String>> = HashMap::new();
    collect(a, &mut qids, &mut da);
    let mut qids_b = Vec::new();
    let mut db: HashMap<String, HashSet<String>> = HashMap::new();
    collect(b, &mut qids_b, &mut db);
    if op == SetOp::Union {
        for q in qids_b {
            if !da.contains_key(&q) {
                qids.push(q);
            }
        }
    }
    let empty = HashSet::new();
    let mut out = Frame::new(vec![("qid".into(), Kind::Text), ("docno".into(), Kind::Text)])
        .unwrap();
    for qid in qids {
        let sa = da.get(&qid).unwrap_or(&empty);
        let sb = db.get(&qid).unwrap_or(&empty);
        let mut docnos: Vec<&String> = match op {
            SetOp::Union => sa.union(sb).collect(),
            SetOp::Intersect => sa.intersection(sb).collect(),
        };
        docnos.sort_unstable_by(|x, y| x.as_bytes().cmp(y.as_bytes()));
        for d in docnos {
            out.push_row(vec![Value::Text(qid.clone()), Value::Text(d.clone())])?;
        }
    }
    Ok(out)
}

/// Per qid: all rows of `a`, then rows of `b` whose docno is not already in
/// `a`, with appended scores shifted below `a`'s minimum. Ranks reassigned.
pub fn eval_concat(a: &Frame, b: &Frame) -> Result<Frame, PipelineError> {
    frame::require(a, RelationKind::Results)?;
    frame::require(b, RelationKind::Results)?;
    let mut qids: Vec<String> = Vec::new();
    let mut a_groups: HashMap<String, Vec<usize>> = HashMap::new();
    let mut b_groups: HashMap<String, Vec<usize>> = HashMap::new();
    for i in 0..a.len() {
        let qid = a.text(i, "qid").unwrap().to_string();
        a_groups.entry(qid.clone()).or_insert_with(|| {
            qids.push(qid.clone());
            Vec::new()
        });
        a_groups.get_mut(&qid).unwrap().push(i);
    }
    for i in 0..b.len() {
        let qid = b.text(i, "qid").unwrap().to_string();
        if !a_groups.contains_key(&qid) && !b_groups.contains_key(&qid) {
            qids.push(qid.clone());
        }
        b_groups.entry(qid).or_default().push(i);
    }
    let mut out = results_schema();
    for qid in qids {
        let a_rows = a_groups.get(&qid).cloned().unwrap_or_default();
        let seen: HashSet<&str> = a_rows
            .iter()
            .map(|&i| a.text(i, "docno").unwrap())
            .collect();
        let appended: Vec<usize> = b_groups
            .get(&qid)
            .map(|rows| {
                rows.iter()
                    .copied()
                    .filter(|&i| !seen.contains(b.text(i, "docno").unwrap()))
                    .collect()
            })
            .unwrap_or_default();
        let shift = if a_rows.is_empty() || appended.is_empty() {
            0.0
        } else {
            let min_a = a_rows
                .iter()
                .map(|&i| a.real(i, "score").unwrap())
                .fold(f64::INFINITY, f64::min);
            let max_b = appended
                .iter()
                .map(|&i| b.real(i, "score").unwrap())
                .fold(f64::NEG_INFINITY, f64::max);
            min_a - max_b - 1.0
        };
        for &i in &a_rows {
            out.push_row(vec![
                Value::Text(qid.clone()),
                Value::Text(a.text(i, "docno").unwrap().to_string()),
                Value::Real(a.real(i, "score").unwrap()),
            ])?;
        }
        for &i in &appended {
            out.push_row(vec![
                Value::Text(qid.clone()),
                Value::Text(b.text(i, "docno").unwrap().to_string()),
                Value::Real(b.real(i, "score").unwrap() + shift),
            ])?;
        }
    }
    Ok(frame::assign_ranks(&out)?)
}
