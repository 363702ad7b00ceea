//! Textual pipeline expressions, the syntax used by config files.
//!
//! Grammar, lowest to highest precedence, all binary operators
//! left-associative:
//!
//! ```text
//! chain    := combine ( (">>" | "^") combine )*
//! combine  := feature ( ("+" | "|" | "&") feature )*
//! feature  := postfix ( "**" postfix )*
//! postfix  := atom ( "%" INTEGER | "*" NUMBER )*
//! atom     := "(" chain ")" | "identity" | IDENT [ "(" args ")" ]
//! args     := [ IDENT "=" literal ( "," IDENT "=" literal )* ]
//! literal  := NUMBER | STRING
//! ```
//!
//! Numbers are decimal; a literal containing `.` or an exponent is a real,
//! otherwise an integer. Strings are single-quoted. `%` takes only integer
//! literals and `*` only number literals. Every syntax error carries the
//! byte offset where it occurred and the set of tokens expected there.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::sync::Arc;

use thiserror::Error;

use crate::pipeline::{Node, Param, PipelineError, Transformer};

#[derive(Debug, Error)]
pub enum DslError {
    #[error("syntax error at byte {offset}: found {found}, expected {}", expected.join(" or "))]
    Syntax {
        offset: usize,
        found: String,
        expected: Vec<&'static str>,
    },
    #[error("unknown identifier `{name}` at byte {offset}")]
    UnknownIdentifier { offset: usize, name: String },
    #[error("malformed literal at byte {offset}: {message}")]
    BadLiteral { offset: usize, message: String },
    #[error("leaf kind `{0}` is not registered; it cannot be rendered")]
    UnregisteredKind(String),
    #[error("text parameter contains a quote and cannot be rendered")]
    UnprintableText,
    #[error("non-finite scalar cannot be rendered")]
    NonFiniteScalar,
    #[error("leaf construction failed at byte {offset}: {message}")]
    Factory { offset: usize, message: String },
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
}

/// Maps leaf names to factories. Parsing resolves every identifier here;
/// rendering checks leaf kinds against it.
#[derive(Clone, Default)]
pub struct Registry {
    factories: HashMap<String, Arc<dyn Fn(&[(String, Param)]) -> Result<Transformer, String> + Send + Sync>>,
}

impl Registry {
    pub fn new() -> Registry {
        Registry::default()
    }

    pub fn register<F>(&mut self, name: &str, factory: F)
    where
        F: Fn(&[(String, Param)]) -> Result<Transformer, String> + Send + Sync + 'static,
    {
        self.factories.insert(name.to_string(), Arc::new(factory));
    }

    /// Register a transformer under a fixed name; parameters are refused.
    pub fn register_fixed(&mut self, name: &str, t: Transformer) {
        self.register(name, move |params| {
            if params.is_empty() {
                Ok(t.clone())
            } else {
                Err("this leaf takes no parameters".into())
            }
        });
    }

    pub fn contains(&self, name: &str) -> bool {
        self.factories.contains_key(name)
    }

    fn build(
        &self,
        name: &str,
        params: &[(String, Param)],
        offset: usize,
    ) -> Result<Transformer, DslError> {
        let factory = self
            .factories
            .get(name)
            .ok_or_else(|| DslError::UnknownIdentifier {
                offset,
                name: name.to_string(),
            })?;
        factory(params).map_err(|message| DslError::Factory { offset, message })
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Tok {
    Ident(String),
    Int(i64),
    Real(f64),
    Str(String),
    Then,     // >>
    Caret,    // ^
    Plus,     // +
    Pipe,     // |
    Amp,      // &
    StarStar, // **
    Star,     // *
    Percent,  // %
    LParen,
    RParen,
    Comma,
    Equals,
    End,
}

impl Tok {
    fn describe(&self) -> String {
        match self {
            Tok::Ident(s) => format!("identifier `{s}`"),
            Tok::Int(v) => format!("integer `{v}`"),
            Tok::Real(v) => format!("real `{v:?}`"),
            Tok::Str(s) => format!("string `'{s}'`"),
            Tok::Then => "`>>`".into(),
            Tok::Caret => "`^`".into(),
            Tok::Plus => "`+`".into(),
            Tok::Pipe => "`|`".into(),
            Tok::Amp => "`&`".into(),
            Tok::StarStar => "`**`".into(),
            Tok::Star => "`*`".into(),
            Tok::Percent => "`%`".into(),
            Tok::LParen => "`(`".into(),
            Tok::RParen => "`)`".into(),
            Tok::Comma => "`,`".into(),
            Tok::Equals => "`=`".into(),
            Tok::End => "end of input".into(),
        }
    }
}

fn lex(text: &str) -> Result<Vec<(usize, Tok)>, DslError> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut i = 0usize;
    while i < bytes.len() {
        let b = bytes[i];
        match b {
            b' ' | b'\t' | b'\n' | b'\r' => i += 1,
            b'(' => {
                out.push((i, Tok::LParen));
                i += 1;
            }
            b')' => {
                out.push((i, Tok::RParen));
                i += 1;
            }
            b',' => {
                out.push((i, Tok::Comma));
                i += 1;
            }
            b'=' => {
                out.push((i, Tok::Equals));
                i += 1;
            }
            b'^' => {
                out.push((i, Tok::Caret));
                i += 1;
            }
            b'+' => {
                out.push((i, Tok::Plus));
                i += 1;
            }
            b'|' => {
                out.push((i, Tok::Pipe));
                i += 1;
            }
            b'&' => {
                out.push((i, Tok::Amp));
                i += 1;
            }
            b'%' => {
                out.push((i, Tok::Percent));
                i += 1;
            }
            b'*' => {
                if bytes.get(i + 1) == Some(&b'*') {
                    out.push((i, Tok::StarStar));
                    i += 2;
                } else {
                    out.push((i, Tok::Star));
                    i += 1;
                }
            }
            b'>' => {
                if bytes.get(i + 1) == Some(&b'>') {
                    out.push((i, Tok::Then));
                    i += 2;
                } else {
                    return Err(DslError::Syntax {
                        offset: i,
                        found: "`>`".into(),
                        expected: vec!["`>>`"],
                    });
                }
            }
            b'\'' => {
                let start = i;
                i += 1;
                let mut s = String::new();
                loop {
                    match bytes.get(i) {
                        None => {
                            return Err(DslError::BadLiteral {
                                offset: start,
                                message: "unterminated string".into(),
                            })
                        }
                        Some(b'\'') => {
                            i += 1;
                            break;
                        }
                        Some(&c) => {
                            s.push(c as char);
                            i += 1;
                        }
                    }
                }
                out.push((start, Tok::Str(s)));
            }
            b'0'..=b'9' | b'-' => {
                let start = i;
                if b == b'-' && !bytes.get(i + 1).is_some_and(|c| c.is_ascii_digit()) {
                    return Err(DslError::Syntax {
                        offset: i,
                        found: "`-`".into(),
                        expected: vec!["a number"],
                    });
                }
                i += 1;
                let mut is_real = false;
                while let Some(&c) = bytes.get(i) {
                    match c {
                        b'0'..=b'9' => i += 1,
                        b'.' => {
                            is_real = true;
                            i += 1;
                        }
                        b'e' | b'E' => {
                            is_real = true;
                            i += 1;
                            if matches!(bytes.get(i), Some(b'+') | Some(b'-')) {
                                i += 1;
                            }
                        }
                        _ => break,
                    }
                }
                let lit = &text[start..i];
                let tok = if is_real {
                    Tok::Real(lit.parse().map_err(|_| DslError::BadLiteral {
                        offset: start,
                        message: format!("invalid real `{lit}`"),
                    })?)
                } else {
                    Tok::Int(lit.parse().map_err(|_| DslError::BadLiteral {
                        offset: start,
                        message: format!("invalid integer `{lit}`"),
                    })?)
                };
                out.push((start, tok));
            }
            b'a'..=b'z' | b'A'..=b'Z' | b'_' => {
                let start = i;
                while bytes
                    .get(i)
                    .is_some_and(|c| c.is_ascii_alphanumeric() || *c == b'_')
                {
                    i += 1;
                }
                out.push((start, Tok::Ident(text[start..i].to_string())));
            }
            _ => {
                return Err(DslError::Syntax {
                    offset: i,
                    found: format!("`{}`", &text[i..].chars().next().unwrap()),
                    expected: vec!["an operator, identifier, number, or string"],
                })
            }
        }
    }
    out.push((text.len(), Tok::End));
    Ok(out)
}

struct Parser<'a> {
    tokens: Vec<(usize, Tok)>,
    pos: usize,
    registry: &'a Registry,
}

impl<'a> Parser<'a> {
    fn peek(&self) -> &Tok {
        &self.tokens[self.pos].1
    }

    fn offset(&self) -> usize {
        self.tokens[self.pos].0
    }

    fn bump(&mut self) -> Tok {
        let t = self.tokens[self.pos].1.clone();
        if self.pos + 1 < self.tokens.len() {
            self.pos += 1;
        }
        t
    }

    fn err(&self, expected: Vec<&'static str>) -> DslError {
        DslError::Syntax {
            offset: self.offset(),
            found: self.peek().describe(),
            expected,
        }
    }

    fn expect(&mut self, want: Tok, expected: &'static str) -> Result<(), DslError> {
        if *self.peek() == want {
            self.bump();
            Ok(())
        } else {
            Err(self.err(vec![expected]))
        }
    }

    fn parse_chain(&mut self) -> Result<Transformer, DslError> {
        let mut acc = self.parse_combine()?;
        loop {
            match self.peek() {
                Tok::Then => {
                    self.bump();
                    let rhs = self.parse_combine()?;
                    acc = acc.then(&rhs);
                }
                Tok::Caret => {
                    self.bump();
                    let rhs = self.parse_combine()?;
                    acc = acc.concat(&rhs);
                }
                _ => return Ok(acc),
            }
        }
    }

    fn parse_combine(&mut self) -> Result<Transformer, DslError> {
        let mut acc = self.parse_feature()?;
        loop {
            match self.peek() {
                Tok::Plus => {
                    self.bump();
                    let rhs = self.parse_feature()?;
                    acc = acc.linear_combine(&rhs);
                }
                Tok::Pipe => {
                    self.bump();
                    let rhs = self.parse_feature()?;
                    acc = acc.set_union(&rhs);
                }
                Tok::Amp => {
                    self.bump();
                    let rhs = self.parse_feature()?;
                    acc = acc.set_intersect(&rhs);
                }
                _ => return Ok(acc),
            }
        }
    }

    fn parse_feature(&mut self) -> Result<Transformer, DslError> {
        let mut acc = self.parse_postfix()?;
        while *self.peek() == Tok::StarStar {
            self.bump();
            let rhs = self.parse_postfix()?;
            acc = acc.feature_union(&rhs);
        }
        Ok(acc)
    }

    fn parse_postfix(&mut self) -> Result<Transformer, DslError> {
        let mut acc = self.parse_atom()?;
        loop {
            match self.peek() {
                Tok::Percent => {
                    self.bump();
                    let offset = self.offset();
                    match self.bump() {
                        Tok::Int(k) if k >= 1 => {
                            acc = acc.cutoff(k as u64).map_err(|e| DslError::Factory {
                                offset,
                                message: e.to_string(),
                            })?;
                        }
                        found => {
                            return Err(DslError::Syntax {
                                offset,
                                found: found.describe(),
                                expected: vec!["a positive integer literal"],
                            })
                        }
                    }
                }
                Tok::Star => {
                    self.bump();
                    let offset = self.offset();
                    match self.bump() {
                        Tok::Int(v) => acc = acc.scalar_product(v as f64),
                        Tok::Real(v) => acc = acc.scalar_product(v),
                        found => {
                            return Err(DslError::Syntax {
                                offset,
                                found: found.describe(),
                                expected: vec!["a number literal"],
                            })
                        }
                    }
                }
                _ => return Ok(acc),
            }
        }
    }

    fn parse_atom(&mut self) -> Result<Transformer, DslError> {
        match self.peek().clone() {
            Tok::LParen => {
                self.bump();
                let inner = self.parse_chain()?;
                self.expect(Tok::RParen, "`)`")?;
                Ok(inner)
            }
            Tok::Ident(name) => {
                let offset = self.offset();
                self.bump();
                if name == "identity" {
                    return Ok(Transformer::identity());
                }
                let mut params = Vec::new();
                if *self.peek() == Tok::LParen {
                    self.bump();
                    if *self.peek() != Tok::RParen {
                        loop {
                            let key = match self.bump() {
                                Tok::Ident(k) => k,
                                found => {
                                    return Err(DslError::Syntax {
                                        offset: self.tokens[self.pos - 1].0,
                                        found: found.describe(),
                                        expected: vec!["a parameter name"],
                                    })
                                }
                            };
                            self.expect(Tok::Equals, "`=`")?;
                            let value = match self.bump() {
                                Tok::Int(v) => Param::Int(v),
                                Tok::Real(v) => Param::Real(v),
                                Tok::Str(s) => Param::Text(s),
                                found => {
                                    return Err(DslError::Syntax {
                                        offset: self.tokens[self.pos - 1].0,
                                        found: found.describe(),
                                        expected: vec!["a number literal", "a string literal"],
                                    })
                                }
                            };
                            params.push((key, value));
                            match self.peek() {
                                Tok::Comma => {
                                    self.bump();
                                }
                                Tok::RParen => break,
                                _ => return Err(self.err(vec!["`,`", "`)`"])),
                            }
                        }
                    }
                    self.expect(Tok::RParen, "`)`")?;
                }
                self.registry.build(&name, &params, offset)
            }
            _ => Err(self.err(vec!["`(`", "an identifier"])),
        }
    }
}

/// Parse a pipeline expression against a leaf registry.
pub fn parse(text: &str, registry: &Registry) -> Result<Transformer, DslError> {
    let tokens = lex(text)?;
    let mut parser = Parser {
        tokens,
        pos: 0,
        registry,
    };
    let t = parser.parse_chain()?;
    if *parser.peek() != Tok::End {
        return Err(parser.err(vec!["an operator", "end of input"]));
    }
    Ok(t)
}

/// Precedence level of a node for minimal-parentheses rendering; higher
/// binds tighter.
fn prec(node: &Node) -> u8 {
    match node {
        Node::Then(_) | Node::Concat(..) => 1,
        Node::LinearCombine(..) | Node::SetUnion(..) | Node::SetIntersect(..) => 2,
        Node::FeatureUnion(..) => 3,
        Node::Cutoff(..) | Node::ScalarProduct(..) => 4,
        Node::Identity | Node::Leaf(_) => 5,
    }
}

fn render(t: &Transformer, registry: &Registry, out: &mut String) -> Result<(), DslError> {
    let node = t.node();
    let level = prec(node);
    // operand of a left-associative operator: parenthesize a left child
    // binding looser than the operator, or a right child binding no tighter
    let left = |child: &Transformer, out: &mut String| -> Result<(), DslError> {
        let wrap = prec(child.node()) < level;
        if wrap {
            out.push('(');
        }
        render(child, registry, out)?;
        if wrap {
            out.push(')');
        }
        Ok(())
    };
    match node {
        Node::Identity => out.push_str("identity"),
        Node::Leaf(leaf) => {
            if !registry.contains(&leaf.kind) {
                return Err(DslError::UnregisteredKind(leaf.kind.clone()));
            }
            out.push_str(&leaf.kind);
            if !leaf.params.is_empty() {
                out.push('(');
                for (i, (k, v)) in leaf.params.iter().enumerate() {
                    if i > 0 {
                        out.push_str(", ");
                    }
                    match v {
                        Param::Text(s) if s.contains('\'') => {
                            return Err(DslError::UnprintableText)
                        }
                        Param::Real(x) if !x.is_finite() => {
                            return Err(DslError::NonFiniteScalar)
                        }
                        _ => {}
                    }
                    write!(out, "{k}={v}").unwrap();
                }
                out.push(')');
            }
        }
        Node::Then(stages) => {
            for (i, s) in stages.iter().enumerate() {
                if i > 0 {
                    out.push_str(" >> ");
                }
                if i == 0 {
                    left(s, out)?;
                } else {
                    binary_right(s, level, registry, out)?;
                }
            }
        }
        Node::Concat(a, b) => {
            left(a, out)?;
            out.push_str(" ^ ");
            binary_right(b, level, registry, out)?;
        }
        Node::LinearCombine(a, b) => {
            left(a, out)?;
            out.push_str(" + ");
            binary_right(b, level, registry, out)?;
        }
        Node::SetUnion(a, b) => {
            left(a, out)?;
            out.push_str(" | ");
            binary_right(b, level, registry, out)?;
        }
        Node::SetIntersect(a, b) => {
            left(a, out)?;
            out.push_str(" & ");
            binary_right(b, level, registry, out)?;
        }
        Node::FeatureUnion(a, b) => {
            left(a, out)?;
            out.push_str(" ** ");
            binary_right(b, level, registry, out)?;
        }
        Node::Cutoff(inner, k) => {
            left(inner, out)?;
            write!(out, " % {k}").unwrap();
        }
        Node::ScalarProduct(inner, c) => {
            if !c.is_finite() {
                return Err(DslError::NonFiniteScalar);
            }
            left(inner, out)?;
            write!(out, " * {c:?}").unwrap();
        }
    }
    Ok(())
}

fn binary_right(
    child: &Transformer,
    level: u8,
    registry: &Registry,
    out: &mut String,
) -> Result<(), DslError> {
    let wrap = prec(child.node()) <= level;
    if wrap {
        out.push('(');
    }
    render(child, registry, out)?;
    if wrap {
        out.push(')');
    }
    Ok(())
}

/// Render a transformer with minimal parentheses so that
/// `parse(to_text(t))` is structurally equal to `t`.
pub fn to_text(t: &Transformer, registry: &Registry) -> Result<String, DslError> {
    let mut out = String::new();
    render(t, registry, &mut out)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frame::Frame;
    use crate::pipeline::struct_eq;
    use crate::retrieval::SplitMix64;

    fn echo(kind: &str, params: &[(String, Param)]) -> Transformer {
        Transformer::leaf(
            kind,
            params.to_vec(),
            Arc::new(|f: &Frame| Ok(f.clone())),
        )
    }

    fn registry() -> Registry {
        let mut r = Registry::new();
        for name in ["a", "b", "c", "bm25", "mono", "duo", "leaf"] {
            let name_owned = name.to_string();
            r.register(name, move |params| Ok(echo(&name_owned, params)));
        }
        r
    }

    #[test]
    fn parses_cascade_with_cutoffs() {
        let r = registry();
        let got = parse("bm25 % 20 >> mono % 10 >> duo", &r).unwrap();
        let want = echo("bm25", &[])
            .cutoff(20)
            .unwrap()
            .then(&echo("mono", &[]).cutoff(10).unwrap())
            .then(&echo("duo", &[]));
        assert!(struct_eq(&got, &want));
        let stages = got.flatten();
        assert_eq!(stages.len(), 3);
        assert!(matches!(stages[0].node(), Node::Cutoff(_, 20)));
        assert!(matches!(stages[1].node(), Node::Cutoff(_, 10)));
    }

    #[test]
    fn chain_binds_loosest() {
        let r = registry();
        let got = parse("a + b >> c", &r).unwrap();
        let want = echo("a", &[])
            .linear_combine(&echo("b", &[]))
            .then(&echo("c", &[]));
        assert!(struct_eq(&got, &want));
    }

    #[test]
    fn parens_and_postfix() {
        let r = registry();
        let got = parse("a >> (b + c) % 5", &r).unwrap();
        let want = echo("a", &[]).then(
            &echo("b", &[])
                .linear_combine(&echo("c", &[]))
                .cutoff(5)
                .unwrap(),
        );
        assert!(struct_eq(&got, &want));
    }

    #[test]
    fn left_associativity_within_levels() {
        let r = registry();
        // a >> b ^ c associates left: concat of (a >> b) with c
        let got = parse("a >> b ^ c", &r).unwrap();
        let want = echo("a", &[]).then(&echo("b", &[])).concat(&echo("c", &[]));
        assert!(struct_eq(&got, &want));
        // a + b | c associates left too
        let got = parse("a + b | c", &r).unwrap();
        let want = echo("a", &[])
            .linear_combine(&echo("b", &[]))
            .set_union(&echo("c", &[]));
        assert!(struct_eq(&got, &want));
    }

    #[test]
    fn leaf_params_and_literal_kinds() {
        let r = registry();
        let got = parse("leaf(k1=1.2, b=7, tag='x y')", &r).unwrap();
        match got.node() {
            Node::Leaf(l) => {
                assert_eq!(l.params[0], ("k1".into(), Param::Real(1.2)));
                assert_eq!(l.params[1], ("b".into(), Param::Int(7)));
                assert_eq!(l.params[2], ("tag".into(), Param::Text("x y".into())));
            }
            _ => panic!("expected a leaf"),
        }
        // exponent notation lexes as a real
        let got = parse("leaf(x=1e3)", &r).unwrap();
        match got.node() {
            Node::Leaf(l) => assert_eq!(l.params[0].1, Param::Real(1000.0)),
            _ => panic!("expected a leaf"),
        }
    }

    #[test]
    fn identity_keyword() {
        let r = registry();
        assert!(struct_eq(
            &parse("identity", &r).unwrap(),
            &Transformer::identity()
        ));
        assert_eq!(to_text(&Transformer::identity(), &r).unwrap(), "identity");
    }

    #[test]
    fn scalar_product_and_star_star() {
        let r = registry();
        let got = parse("a * 2.5 ** b", &r).unwrap();
        // * binds tighter than **
        let want = echo("a", &[])
            .scalar_product(2.5)
            .feature_union(&echo("b", &[]));
        assert!(struct_eq(&got, &want));
    }

    #[test]
    fn syntax_errors_are_positioned() {
        let r = registry();
        match parse("a >> ", &r).unwrap_err() {
            DslError::Syntax { offset, expected, .. } => {
                assert_eq!(offset, 5);
                assert!(!expected.is_empty());
            }
            other => panic!("unexpected: {other}"),
        }
        match parse("a >> (b + c", &r).unwrap_err() {
            DslError::Syntax { offset, .. } => assert_eq!(offset, 11),
            other => panic!("unexpected: {other}"),
        }
        match parse("nope", &r).unwrap_err() {
            DslError::UnknownIdentifier { offset, name } => {
                assert_eq!(offset, 0);
                assert_eq!(name, "nope");
            }
            other => panic!("unexpected: {other}"),
        }
        match parse("a % b", &r).unwrap_err() {
            DslError::Syntax { offset, .. } => assert_eq!(offset, 4),
            other => panic!("unexpected: {other}"),
        }
        match parse("a % 0", &r).unwrap_err() {
            DslError::Syntax { .. } => {}
            other => panic!("unexpected: {other}"),
        }
        assert!(matches!(
            parse("a $ b", &r),
            Err(DslError::Syntax { offset: 2, .. })
        ));
        assert!(matches!(
            parse("leaf(x='oops", &r),
            Err(DslError::BadLiteral { .. })
        ));
    }

    #[test]
    fn round_trip_of_fixed_examples() {
        let r = registry();
        for text in [
            "bm25 % 20 >> mono % 10 >> duo",
            "a + b >> c",
            "a >> (b + c) % 5",
            "a ^ b >> c",
            "a >> (b ^ c)",
            "a ** b ** c",
            "(a + b) ** c",
            "a * 0.5 + b * 2.0",
            "a & b | c",
            "leaf(k1=1.2, tag='t')",
        ] {
            let t = parse(text, &r).unwrap();
            let rendered = to_text(&t, &r).unwrap();
            let back = parse(&rendered, &r).unwrap();
            assert!(struct_eq(&t, &back), "{text} -> {rendered}");
        }
    }

    #[test]
    fn to_text_unregistered_kind_errors() {
        let r = registry();
        let t = echo("mystery", &[]);
        assert!(matches!(
            to_text(&t, &r),
            Err(DslError::UnregisteredKind(_))
        ));
    }

    fn random_tree(rng: &mut SplitMix64, depth: u32) -> Transformer {
        let leaves = ["a", "b", "c"];
        if depth == 0 || rng.next_u64() % 4 == 0 {
            let name = leaves[(rng.next_u64() % 3) as usize];
            return match rng.next_u64() % 3 {
                0 => echo(name, &[]),
                1 => echo(name, &[("k".into(), Param::Int((rng.next_u64() % 100) as i64))]),
                _ => echo(
                    name,
                    &[("x".into(), Param::Real((rng.next_u64() % 1000) as f64 / 8.0))],
                ),
            };
        }
        let a = random_tree(rng, depth - 1);
        let b = random_tree(rng, depth - 1);
        match rng.next_u64() % 8 {
            0 => a.then(&b),
            1 => a.concat(&b),
            2 => a.linear_combine(&b),
            3 => a.set_union(&b),
            4 => a.set_intersect(&b),
            5 => a.feature_union(&b),
            6 => a.cutoff(1 + rng.next_u64() % 50).unwrap(),
            _ => a.scalar_product(((rng.next_u64() % 1000) as f64 - 500.0) / 16.0),
        }
    }

    #[test]
    fn round_trip_of_random_trees() {
        let r = registry();
        let mut rng = SplitMix64::new(0xD51);
        for _ in 0..300 {
            let depth = 1 + (rng.next_u64() % 8) as u32;
            let t = random_tree(&mut rng, depth);
            let rendered = to_text(&t, &r).unwrap();
            let back = parse(&rendered, &r)
                .unwrap_or_else(|e| panic!("{rendered}: {e}"));
            assert!(struct_eq(&t, &back), "{rendered}");
            // rendering is a fixed point
            assert_eq!(to_text(&back, &r).unwrap(), rendered);
        }
    }
}
