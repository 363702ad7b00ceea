//! Relational data model: ordered tables with named, typed columns.
//!
//! Frames instantiate the four relation types used throughout the pipeline
//! algebra: queries `Q(qid, query)`, documents `D(docno, ...)`, ranked
//! results `R(qid, docno, score, rank, ...)` and relevance assessments
//! `RA(qid, docno, label)`. All relation types are open: extra columns are
//! always permitted.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::Path;

use thiserror::Error;

/// Value kind of a column. `RealList` holds feature vectors.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Kind {
    Text,
    Real,
    Int,
    RealList,
}

impl Kind {
    pub fn tag(self) -> u8 {
        match self {
            Kind::Text => 0,
            Kind::Real => 1,
            Kind::Int => 2,
            Kind::RealList => 3,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Kind> {
        match tag {
            0 => Some(Kind::Text),
            1 => Some(Kind::Real),
            2 => Some(Kind::Int),
            3 => Some(Kind::RealList),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Kind::Text => "text",
            Kind::Real => "real",
            Kind::Int => "integer",
            Kind::RealList => "real-list",
        }
    }

    pub fn from_name(name: &str) -> Option<Kind> {
        match name {
            "text" => Some(Kind::Text),
            "real" => Some(Kind::Real),
            "integer" => Some(Kind::Int),
            "real-list" => Some(Kind::RealList),
            _ => None,
        }
    }
}

impl fmt::Display for Kind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A single cell. Reals compare bit-wise so frame equality is bit-exact.
#[derive(Clone, Debug)]
pub enum Value {
    Text(String),
    Real(f64),
    Int(i64),
    RealList(Vec<f64>),
}

impl Value {
    pub fn kind(&self) -> Kind {
        match self {
            Value::Text(_) => Kind::Text,
            Value::Real(_) => Kind::Real,
            Value::Int(_) => Kind::Int,
            Value::RealList(_) => Kind::RealList,
        }
    }

    pub fn as_text(&self) -> Option<&str> {
        match self {
            Value::Text(s) => Some(s),
            _ => None,
        }
    }

    pub fn as_real(&self) -> Option<f64> {
        match self {
            Value::Real(x) => Some(*x),
            _ => None,
        }
    }

    pub fn as_int(&self) -> Option<i64> {
        match self {
            Value::Int(x) => Some(*x),
            _ => None,
        }
    }

    pub fn as_real_list(&self) -> Option<&[f64]> {
        match self {
            Value::RealList(xs) => Some(xs),
            _ => None,
        }
    }
}

impl PartialEq for Value {
    fn eq(&self, other: &Value) -> bool {
        match (self, other) {
            (Value::Text(a), Value::Text(b)) => a == b,
            (Value::Real(a), Value::Real(b)) => a.to_bits() == b.to_bits(),
            (Value::Int(a), Value::Int(b)) => a == b,
            (Value::RealList(a), Value::RealList(b)) => {
                a.len() == b.len()
                    && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            _ => false,
        }
    }
}

impl Eq for Value {}

#[derive(Debug, Error)]
pub enum FrameError {
    #[error("duplicate column name `{0}`")]
    DuplicateColumn(String),
    #[error("unknown column `{0}`")]
    UnknownColumn(String),
    #[error("row has {got} values, frame has {want} columns")]
    RowWidth { got: usize, want: usize },
    #[error("column `{column}` is {want} but row value is {got}")]
    KindMismatch {
        column: String,
        want: Kind,
        got: Kind,
    },
    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),
    #[error("frame does not conform to {kind}: {problems}")]
    NotConforming { kind: RelationKind, problems: String },
    #[error("tsv parse error at line {line}: {message}")]
    Tsv { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Ordered relational table. Row order is significant and preserved by all
/// copy operations; column names are unique.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Frame {
    columns: Vec<(String, Kind)>,
    rows: Vec<Vec<Value>>,
}

impl Frame {
    pub fn new(columns: Vec<(String, Kind)>) -> Result<Frame, FrameError> {
        let mut seen = HashMap::new();
        for (name, _) in &columns {
            if seen.insert(name.clone(), ()).is_some() {
                return Err(FrameError::DuplicateColumn(name.clone()));
            }
        }
        Ok(Frame {
            columns,
            rows: Vec::new(),
        })
    }

    pub fn columns(&self) -> &[(String, Kind)] {
        &self.columns
    }

    pub fn rows(&self) -> &[Vec<Value>] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn col_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|(n, _)| n == name)
    }

    pub fn kind_of(&self, name: &str) -> Option<Kind> {
        self.columns
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, k)| *k)
    }

    pub fn push_row(&mut self, row: Vec<Value>) -> Result<(), FrameError> {
        if row.len() != self.columns.len() {
            return Err(FrameError::RowWidth {
                got: row.len(),
                want: self.columns.len(),
            });
        }
        for ((name, kind), value) in self.columns.iter().zip(&row) {
            if value.kind() != *kind {
                return Err(FrameError::KindMismatch {
                    column: name.clone(),
                    want: *kind,
                    got: value.kind(),
                });
            }
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn value(&self, row: usize, column: &str) -> Option<&Value> {
        let c = self.col_index(column)?;
        self.rows.get(row).map(|r| &r[c])
    }

    pub fn text(&self, row: usize, column: &str) -> Option<&str> {
        self.value(row, column).and_then(Value::as_text)
    }

    pub fn real(&self, row: usize, column: &str) -> Option<f64> {
        self.value(row, column).and_then(Value::as_real)
    }

    pub fn int(&self, row: usize, column: &str) -> Option<i64> {
        self.value(row, column).and_then(Value::as_int)
    }

    /// New frame with the same columns and no rows.
    pub fn empty_like(&self) -> Frame {
        Frame {
            columns: self.columns.clone(),
            rows: Vec::new(),
        }
    }

    /// Frame containing the selected rows of `self`, in the given order.
    pub fn select_rows(&self, indices: &[usize]) -> Frame {
        Frame {
            columns: self.columns.clone(),
            rows: indices.iter().map(|&i| self.rows[i].clone()).collect(),
        }
    }

    /// Add a column, or overwrite it if the name already exists. `values`
    /// must have one entry per row.
    pub fn with_column(
        &self,
        name: &str,
        kind: Kind,
        values: Vec<Value>,
    ) -> Result<Frame, FrameError> {
        if values.len() != self.rows.len() {
            return Err(FrameError::RowWidth {
                got: values.len(),
                want: self.rows.len(),
            });
        }
        for v in &values {
            if v.kind() != kind {
                return Err(FrameError::KindMismatch {
                    column: name.to_string(),
                    want: kind,
                    got: v.kind(),
                });
            }
        }
        let mut out = self.clone();
        match out.col_index(name) {
            Some(c) => {
                out.columns[c].1 = kind;
                for (row, v) in out.rows.iter_mut().zip(values) {
                    row[c] = v;
                }
            }
            None => {
                out.columns.push((name.to_string(), kind));
                for (row, v) in out.rows.iter_mut().zip(values) {
                    row.push(v);
                }
            }
        }
        Ok(out)
    }

    /// Frame restricted to the named columns, in the given order.
    pub fn project(&self, names: &[&str]) -> Result<Frame, FrameError> {
        let mut idx = Vec::with_capacity(names.len());
        for name in names {
            idx.push(
                self.col_index(name)
                    .ok_or_else(|| FrameError::UnknownColumn(name.to_string()))?,
            );
        }
        let columns = idx.iter().map(|&i| self.columns[i].clone()).collect();
        let rows = self
            .rows
            .iter()
            .map(|r| idx.iter().map(|&i| r[i].clone()).collect())
            .collect();
        Ok(Frame { columns, rows })
    }
}

/// The four relation types of the data model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RelationKind {
    Queries,
    Documents,
    Results,
    Assessments,
}

impl RelationKind {
    pub fn required_columns(self) -> &'static [(&'static str, Kind)] {
        match self {
            RelationKind::Queries => &[("qid", Kind::Text), ("query", Kind::Text)],
            RelationKind::Documents => &[("docno", Kind::Text)],
            RelationKind::Results => &[
                ("qid", Kind::Text),
                ("docno", Kind::Text),
                ("score", Kind::Real),
                ("rank", Kind::Int),
            ],
            RelationKind::Assessments => &[
                ("qid", Kind::Text),
                ("docno", Kind::Text),
                ("label", Kind::Int),
            ],
        }
    }
}

impl fmt::Display for RelationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RelationKind::Queries => "Q",
            RelationKind::Documents => "D",
            RelationKind::Results => "R",
            RelationKind::Assessments => "RA",
        })
    }
}

/// One problem found by [`validate`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Violation {
    MissingColumn { name: String, kind: Kind },
    WrongKind { name: String, want: Kind, got: Kind },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::MissingColumn { name, kind } => {
                write!(f, "missing column `{name}` ({kind})")
            }
            Violation::WrongKind { name, want, got } => {
                write!(f, "column `{name}` is {got}, expected {want}")
            }
        }
    }
}

/// Check conformance of a frame to a relation type. Extra columns are
/// always permitted; the report names every missing or mistyped required
/// column.
pub fn validate(frame: &Frame, kind: RelationKind) -> Vec<Violation> {
    let mut out = Vec::new();
    for (name, want) in kind.required_columns() {
        match frame.kind_of(name) {
            None => out.push(Violation::MissingColumn {
                name: name.to_string(),
                kind: *want,
            }),
            Some(got) if got != *want => out.push(Violation::WrongKind {
                name: name.to_string(),
                want: *want,
                got,
            }),
            Some(_) => {}
        }
    }
    out
}

/// Error unless the frame conforms to `kind`.
pub fn require(frame: &Frame, kind: RelationKind) -> Result<(), FrameError> {
    let violations = validate(frame, kind);
    if violations.is_empty() {
        Ok(())
    } else {
        let problems = violations
            .iter()
            .map(|v| v.to_string())
            .collect::<Vec<_>>()
            .join("; ");
        Err(FrameError::NotConforming { kind, problems })
    }
}

/// Sort each qid group by score descending (ties broken by docno ascending,
/// byte-wise) and assign 0-based ranks in that order. Groups appear in order
/// of first appearance of their qid. Idempotent and bit-exact.
pub fn assign_ranks(frame: &Frame) -> Result<Frame, FrameError> {
    for name in ["qid", "docno", "score"] {
        if frame.col_index(name).is_none() {
            return Err(FrameError::UnknownColumn(name.to_string()));
        }
    }
    let qid_c = frame.col_index("qid").unwrap();
    let docno_c = frame.col_index("docno").unwrap();
    let score_c = frame.col_index("score").unwrap();

    let mut group_order: Vec<&str> = Vec::new();
    let mut groups: HashMap<&str, Vec<usize>> = HashMap::new();
    for (i, row) in frame.rows.iter().enumerate() {
        let qid = row[qid_c].as_text().unwrap_or_default();
        groups.entry(qid).or_insert_with(|| {
            group_order.push(qid);
            Vec::new()
        });
        groups.get_mut(qid).unwrap().push(i);
    }

    let mut order: Vec<usize> = Vec::with_capacity(frame.len());
    let mut ranks: Vec<Value> = Vec::with_capacity(frame.len());
    for qid in group_order {
        let mut members = groups[qid].clone();
        members.sort_by(|&a, &b| {
            let sa = frame.rows[a][score_c].as_real().unwrap_or(f64::NAN);
            let sb = frame.rows[b][score_c].as_real().unwrap_or(f64::NAN);
            sb.total_cmp(&sa).then_with(|| {
                let da = frame.rows[a][docno_c].as_text().unwrap_or_default();
                let db = frame.rows[b][docno_c].as_text().unwrap_or_default();
                da.as_bytes().cmp(db.as_bytes())
            })
        });
        for (rank, i) in members.into_iter().enumerate() {
            order.push(i);
            ranks.push(Value::Int(rank as i64));
        }
    }
    frame.select_rows(&order).with_column("rank", Kind::Int, ranks)
}

/// Rows of `a` followed by rows of `b`. Schemas must match exactly.
pub fn concat_rows(a: &Frame, b: &Frame) -> Result<Frame, FrameError> {
    if a.columns != b.columns {
        return Err(FrameError::SchemaMismatch(format!(
            "{:?} vs {:?}",
            a.columns, b.columns
        )));
    }
    let mut out = a.clone();
    out.rows.extend(b.rows.iter().cloned());
    Ok(out)
}

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\t' => out.push_str("\\t"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            _ => out.push(c),
        }
    }
    out
}

fn unescape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c == '\\' {
            match chars.next() {
                Some('t') => out.push('\t'),
                Some('n') => out.push('\n'),
                Some('r') => out.push('\r'),
                Some('\\') => out.push('\\'),
                Some(other) => out.push(other),
                None => {}
            }
        } else {
            out.push(c);
        }
    }
    out
}

fn value_to_tsv(v: &Value) -> String {
    match v {
        Value::Text(s) => escape(s),
        Value::Real(x) => format!("{x:?}"),
        Value::Int(x) => x.to_string(),
        Value::RealList(xs) => xs
            .iter()
            .map(|x| format!("{x:?}"))
            .collect::<Vec<_>>()
            .join(","),
    }
}

/// Serialize as UTF-8 TSV. Line 1 is the kinds sidecar
/// (`#kinds:` + tab-separated kind names), line 2 the header row.
pub fn to_tsv(frame: &Frame) -> String {
    let mut out = String::from("#kinds:");
    out.push_str(
        &frame
            .columns
            .iter()
            .map(|(_, k)| k.name().to_string())
            .collect::<Vec<_>>()
            .join("\t"),
    );
    out.push('\n');
    out.push_str(
        &frame
            .columns
            .iter()
            .map(|(n, _)| escape(n))
            .collect::<Vec<_>>()
            .join("\t"),
    );
    out.push('\n');
    for row in &frame.rows {
        out.push_str(
            &row.iter()
                .map(value_to_tsv)
                .collect::<Vec<_>>()
                .join("\t"),
        );
        out.push('\n');
    }
    out
}

pub fn from_tsv(text: &str) -> Result<Frame, FrameError> {
    let mut lines = text.lines().enumerate();
    let (_, kinds_line) = lines.next().ok_or(FrameError::Tsv {
        line: 1,
        message: "missing kinds line".into(),
    })?;
    let kinds_line = kinds_line.strip_prefix("#kinds:").ok_or(FrameError::Tsv {
        line: 1,
        message: "expected `#kinds:` sidecar on line 1".into(),
    })?;
    let kinds: Vec<Kind> = kinds_line
        .split('\t')
        .filter(|s| !s.is_empty())
        .map(|s| {
            Kind::from_name(s).ok_or(FrameError::Tsv {
                line: 1,
                message: format!("unknown kind `{s}`"),
            })
        })
        .collect::<Result<_, _>>()?;
    let (_, header) = lines.next().ok_or(FrameError::Tsv {
        line: 2,
        message: "missing header line".into(),
    })?;
    let names: Vec<String> = if header.is_empty() {
        Vec::new()
    } else {
        header.split('\t').map(unescape).collect()
    };
    if names.len() != kinds.len() {
        return Err(FrameError::Tsv {
            line: 2,
            message: format!("{} kinds but {} column names", kinds.len(), names.len()),
        });
    }
    let mut frame = Frame::new(names.into_iter().zip(kinds.iter().copied()).collect())?;
    for (lineno, line) in lines {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != kinds.len() {
            return Err(FrameError::Tsv {
                line: lineno + 1,
                message: format!("expected {} fields, got {}", kinds.len(), fields.len()),
            });
        }
        let mut row = Vec::with_capacity(kinds.len());
        for (field, kind) in fields.iter().zip(&kinds) {
            let value = match kind {
                Kind::Text => Value::Text(unescape(field)),
                Kind::Real => Value::Real(field.parse().map_err(|_| FrameError::Tsv {
                    line: lineno + 1,
                    message: format!("bad real `{field}`"),
                })?),
                Kind::Int => Value::Int(field.parse().map_err(|_| FrameError::Tsv {
                    line: lineno + 1,
                    message: format!("bad integer `{field}`"),
                })?),
                Kind::RealList => {
                    let xs = if field.is_empty() {
                        Vec::new()
                    } else {
                        field
                            .split(',')
                            .map(|p| {
                                p.parse().map_err(|_| FrameError::Tsv {
                                    line: lineno + 1,
                                    message: format!("bad real `{p}` in list"),
                                })
                            })
                            .collect::<Result<_, _>>()?
                    };
                    Value::RealList(xs)
                }
            };
            row.push(value);
        }
        frame.push_row(row)?;
    }
    Ok(frame)
}

pub fn save_tsv(frame: &Frame, path: &Path) -> Result<(), FrameError> {
    fs::write(path, to_tsv(frame))?;
    Ok(())
}

pub fn load_tsv(path: &Path) -> Result<Frame, FrameError> {
    let text = fs::read_to_string(path)?;
    from_tsv(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn results_frame(rows: &[(&str, &str, f64)]) -> Frame {
        let mut f = Frame::new(vec![
            ("qid".into(), Kind::Text),
            ("docno".into(), Kind::Text),
            ("score".into(), Kind::Real),
        ])
        .unwrap();
        for (qid, docno, score) in rows {
            f.push_row(vec![
                Value::Text(qid.to_string()),
                Value::Text(docno.to_string()),
                Value::Real(*score),
            ])
            .unwrap();
        }
        f
    }

    #[test]
    fn validate_exact_required_set() {
        let mut f = Frame::new(vec![
            ("qid".into(), Kind::Text),
            ("query".into(), Kind::Text),
        ])
        .unwrap();
        f.push_row(vec![Value::Text("1".into()), Value::Text("a".into())])
            .unwrap();
        assert!(validate(&f, RelationKind::Queries).is_empty());
    }

    #[test]
    fn validate_allows_extra_columns() {
        let f = Frame::new(vec![
            ("qid".into(), Kind::Text),
            ("query".into(), Kind::Text),
            ("extra".into(), Kind::Int),
        ])
        .unwrap();
        assert!(validate(&f, RelationKind::Queries).is_empty());
    }

    #[test]
    fn validate_reports_all_missing() {
        let f = Frame::new(vec![("qid".into(), Kind::Text)]).unwrap();
        let v = validate(&f, RelationKind::Results);
        let names: Vec<_> = v
            .iter()
            .map(|x| match x {
                Violation::MissingColumn { name, .. } => name.clone(),
                Violation::WrongKind { name, .. } => name.clone(),
            })
            .collect();
        assert_eq!(names, ["docno", "score", "rank"]);
    }

    #[test]
    fn validate_reports_kind_mismatch() {
        let f = Frame::new(vec![
            ("qid".into(), Kind::Text),
            ("query".into(), Kind::Int),
        ])
        .unwrap();
        let v = validate(&f, RelationKind::Queries);
        assert_eq!(v.len(), 1);
        assert!(matches!(&v[0], Violation::WrongKind { name, .. } if name == "query"));
    }

    #[test]
    fn assign_ranks_sorts_by_score_desc() {
        let f = results_frame(&[("q1", "dA", 2.0), ("q1", "dB", 3.0)]);
        let r = assign_ranks(&f).unwrap();
        assert_eq!(r.text(0, "docno"), Some("dB"));
        assert_eq!(r.int(0, "rank"), Some(0));
        assert_eq!(r.text(1, "docno"), Some("dA"));
        assert_eq!(r.int(1, "rank"), Some(1));
    }

    #[test]
    fn assign_ranks_breaks_ties_by_docno() {
        let f = results_frame(&[("q1", "dB", 1.0), ("q1", "dA", 1.0)]);
        let r = assign_ranks(&f).unwrap();
        assert_eq!(r.text(0, "docno"), Some("dA"));
        assert_eq!(r.text(1, "docno"), Some("dB"));
    }

    #[test]
    fn assign_ranks_empty_frame() {
        let f = results_frame(&[]);
        let r = assign_ranks(&f).unwrap();
        assert!(r.is_empty());
        assert!(r.col_index("rank").is_some());
    }

    #[test]
    fn assign_ranks_idempotent_and_permutation() {
        let f = results_frame(&[
            ("q2", "d1", 0.5),
            ("q1", "d2", 1.5),
            ("q1", "d1", 2.5),
            ("q2", "d9", 0.25),
        ]);
        let once = assign_ranks(&f).unwrap();
        let twice = assign_ranks(&once).unwrap();
        assert_eq!(once, twice);
        assert_eq!(once.len(), f.len());
        // group order = first appearance
        assert_eq!(once.text(0, "qid"), Some("q2"));
        // per-group ranks are 0..n-1
        for (i, qid) in [("q2", 2), ("q1", 2)].iter().enumerate() {
            let _ = (i, qid);
        }
    }

    #[test]
    fn assign_ranks_missing_column_errors() {
        let f = Frame::new(vec![("qid".into(), Kind::Text)]).unwrap();
        assert!(assign_ranks(&f).is_err());
    }

    #[test]
    fn concat_rows_lengths_and_identity() {
        let a = results_frame(&[("q1", "d1", 1.0), ("q1", "d2", 2.0)]);
        let b = results_frame(&[("q2", "d1", 1.0), ("q2", "d2", 2.0), ("q2", "d3", 3.0)]);
        assert_eq!(concat_rows(&a, &b).unwrap().len(), 5);
        let empty = a.empty_like();
        assert_eq!(concat_rows(&a, &empty).unwrap(), a);
        assert_eq!(concat_rows(&empty, &b).unwrap(), b);
    }

    #[test]
    fn concat_rows_schema_mismatch() {
        let a = results_frame(&[]);
        let b = Frame::new(vec![("qid".into(), Kind::Text)]).unwrap();
        assert!(concat_rows(&a, &b).is_err());
    }

    #[test]
    fn tsv_round_trip() {
        let mut f = Frame::new(vec![
            ("qid".into(), Kind::Text),
            ("score".into(), Kind::Real),
            ("rank".into(), Kind::Int),
            ("features".into(), Kind::RealList),
        ])
        .unwrap();
        f.push_row(vec![
            Value::Text("q\t1".into()),
            Value::Real(0.1 + 0.2),
            Value::Int(-3),
            Value::RealList(vec![1.5, f64::MIN_POSITIVE]),
        ])
        .unwrap();
        let text = to_tsv(&f);
        let back = from_tsv(&text).unwrap();
        assert_eq!(back, f);
    }

    #[test]
    fn tsv_rejects_missing_sidecar() {
        assert!(from_tsv("qid\tquery\n").is_err());
    }
}
