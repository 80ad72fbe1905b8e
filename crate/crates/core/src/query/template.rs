//! Parser for the restricted query-template language.
//!
//! ```text
//! [INDEX name [VIA mirror_name] AS]
//! SELECT (* | alias.* | alias.field, ...)
//! FROM table [alias]
//! [JOIN table [alias] ON a.field = b.field]...
//! WHERE a.field = <param> [AND a.field = <param>]...
//! [ORDER BY a.field]
//! [LIMIT n]
//! ```
//!
//! Joins must follow a relationship declared in the schema, and every query
//! binds at least one parameter. Keywords are case-insensitive; `--` starts a
//! comment.

use thiserror::Error;

use super::schema::{Cardinality, Schema, Table};
use crate::storage::key::FieldKind;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChainTable {
    pub table: String,
    pub alias: String,
}

/// A field of the table at a chain position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct FieldRef {
    pub pos: usize,
    pub field: usize,
}

/// Joins the table at `right.pos` to an earlier position.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JoinEdge {
    pub left: FieldRef,
    pub right: FieldRef,
    pub relationship: String,
    pub bound: Cardinality,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Param {
    pub name: String,
    pub kind: FieldKind,
    /// Every field compared to this parameter.
    pub predicates: Vec<FieldRef>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Selection {
    Row(usize),
    Fields(Vec<FieldRef>),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QueryTemplate {
    pub name: String,
    pub via: Option<String>,
    pub chain: Vec<ChainTable>,
    pub joins: Vec<JoinEdge>,
    pub params: Vec<Param>,
    pub order_by: Option<FieldRef>,
    pub limit: Option<u32>,
    pub selection: Selection,
}

impl QueryTemplate {
    pub fn base_table(&self) -> &str {
        &self.chain[0].table
    }

    /// Chain position whose row the index entries reference.
    pub fn target(&self) -> usize {
        match &self.selection {
            Selection::Row(p) => *p,
            Selection::Fields(fs) => fs.first().map_or(0, |f| f.pos),
        }
    }

    pub fn param(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    /// Tables appearing at more than one chain position.
    pub fn repeated_tables(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for (i, c) in self.chain.iter().enumerate() {
            if self.chain[..i].iter().any(|o| o.table == c.table) && !out.contains(&c.table.as_str()) {
                out.push(&c.table);
            }
        }
        out
    }

    /// Edges touching `pos`, with the far end first.
    pub fn neighbours(&self, pos: usize) -> impl Iterator<Item = (FieldRef, FieldRef, &JoinEdge)> {
        self.joins.iter().filter_map(move |e| {
            if e.left.pos == pos {
                Some((e.left, e.right, e))
            } else if e.right.pos == pos {
                Some((e.right, e.left, e))
            } else {
                None
            }
        })
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TemplateError {
    #[error("syntax error at offset {offset}: {message}")]
    Syntax { offset: usize, message: String },
    #[error("unknown table `{0}`")]
    UnknownTable(String),
    #[error("unknown field `{0}`")]
    UnknownField(String),
    #[error("unbound parameter: {0}")]
    UnboundParameter(String),
    #[error("join `{0}` does not follow a declared relationship")]
    UndeclaredJoin(String),
    #[error("ambiguous reference `{0}`")]
    Ambiguous(String),
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Word(String),
    Number(u64),
    Param(String),
    Star,
    Comma,
    Dot,
    Eq,
    Semi,
}

fn lex(text: &str) -> Result<Vec<(usize, Tok)>, TemplateError> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    let err = |offset, message: &str| TemplateError::Syntax {
        offset,
        message: message.to_string(),
    };
    while i < bytes.len() {
        let c = bytes[i];
        if c.is_ascii_whitespace() {
            i += 1;
        } else if c == b'-' && bytes.get(i + 1) == Some(&b'-') {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
        } else if c.is_ascii_alphabetic() || c == b'_' {
            let start = i;
            while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                i += 1;
            }
            out.push((start, Tok::Word(text[start..i].to_string())));
        } else if c.is_ascii_digit() {
            let start = i;
            while i < bytes.len() && bytes[i].is_ascii_digit() {
                i += 1;
            }
            let n = text[start..i]
                .parse()
                .map_err(|_| err(start, "number out of range"))?;
            out.push((start, Tok::Number(n)));
        } else if c == b'<' {
            let start = i;
            let end = text[i..]
                .find('>')
                .ok_or_else(|| err(start, "unterminated parameter"))?;
            let name = text[i + 1..i + end].trim();
            if name.is_empty() || !name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
                return Err(err(start, "invalid parameter name"));
            }
            out.push((start, Tok::Param(name.to_string())));
            i += end + 1;
        } else {
            let tok = match c {
                b'*' => Tok::Star,
                b',' => Tok::Comma,
                b'.' => Tok::Dot,
                b'=' => Tok::Eq,
                b';' => Tok::Semi,
                _ => return Err(err(i, &format!("unexpected character `{}`", c as char))),
            };
            out.push((i, tok));
            i += 1;
        }
    }
    Ok(out)
}

const KEYWORDS: [&str; 14] = [
    "select", "from", "join", "on", "where", "and", "order", "by", "limit", "index", "via", "as", "asc", "or",
];

#[derive(Debug)]
struct RawRef {
    offset: usize,
    qualifier: Option<String>,
    field: String,
}

#[derive(Debug)]
enum RawSel {
    All,
    Row(String),
    Field(RawRef),
}

struct Parser {
    toks: Vec<(usize, Tok)>,
    pos: usize,
    end: usize,
}

impl Parser {
    fn offset(&self) -> usize {
        self.toks.get(self.pos).map_or(self.end, |t| t.0)
    }

    fn err<T>(&self, message: impl Into<String>) -> Result<T, TemplateError> {
        Err(TemplateError::Syntax {
            offset: self.offset(),
            message: message.into(),
        })
    }

    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos).map(|t| &t.1)
    }

    fn peek_kw(&self, kw: &str) -> bool {
        matches!(self.peek(), Some(Tok::Word(w)) if w.eq_ignore_ascii_case(kw))
    }

    fn eat_kw(&mut self, kw: &str) -> bool {
        let hit = self.peek_kw(kw);
        if hit {
            self.pos += 1;
        }
        hit
    }

    fn expect_kw(&mut self, kw: &str) -> Result<(), TemplateError> {
        if self.eat_kw(kw) {
            Ok(())
        } else {
            self.err(format!("expected {}", kw.to_ascii_uppercase()))
        }
    }

    fn eat(&mut self, tok: &Tok) -> bool {
        let hit = self.peek() == Some(tok);
        if hit {
            self.pos += 1;
        }
        hit
    }

    fn ident(&mut self) -> Result<String, TemplateError> {
        match self.peek() {
            Some(Tok::Word(w)) if !KEYWORDS.contains(&w.to_ascii_lowercase().as_str()) => {
                let w = w.clone();
                self.pos += 1;
                Ok(w)
            }
            _ => self.err("expected identifier"),
        }
    }

    fn opt_alias(&mut self) -> Option<String> {
        match self.peek() {
            Some(Tok::Word(w)) if !KEYWORDS.contains(&w.to_ascii_lowercase().as_str()) => {
                let w = w.clone();
                self.pos += 1;
                Some(w)
            }
            _ => None,
        }
    }

    fn field_ref(&mut self) -> Result<RawRef, TemplateError> {
        let offset = self.offset();
        let first = self.ident()?;
        if self.eat(&Tok::Dot) {
            let field = self.ident()?;
            Ok(RawRef {
                offset,
                qualifier: Some(first),
                field,
            })
        } else {
            Ok(RawRef {
                offset,
                qualifier: None,
                field: first,
            })
        }
    }

    fn selection_item(&mut self) -> Result<RawSel, TemplateError> {
        if self.eat(&Tok::Star) {
            return Ok(RawSel::All);
        }
        let offset = self.offset();
        let first = self.ident()?;
        if self.eat(&Tok::Dot) {
            if self.eat(&Tok::Star) {
                return Ok(RawSel::Row(first));
            }
            let field = self.ident()?;
            return Ok(RawSel::Field(RawRef {
                offset,
                qualifier: Some(first),
                field,
            }));
        }
        Ok(RawSel::Field(RawRef {
            offset,
            qualifier: None,
            field: first,
        }))
    }
}

struct Resolver<'a> {
    schema: &'a Schema,
    chain: Vec<(ChainTable, &'a Table)>,
}

impl Resolver<'_> {
    fn position_of(&self, qualifier: &str) -> Result<usize, TemplateError> {
        if let Some(p) = self.chain.iter().position(|(c, _)| c.alias == qualifier) {
            return Ok(p);
        }
        let by_table: Vec<usize> = self
            .chain
            .iter()
            .enumerate()
            .filter(|(_, (c, _))| c.table == qualifier)
            .map(|(i, _)| i)
            .collect();
        match by_table.as_slice() {
            [p] => Ok(*p),
            [] => {
                if self.schema.table(qualifier).is_some() {
                    Err(TemplateError::UnknownTable(format!("{qualifier} (not in FROM/JOIN)")))
                } else {
                    Err(TemplateError::UnknownTable(qualifier.to_string()))
                }
            }
            _ => Err(TemplateError::Ambiguous(qualifier.to_string())),
        }
    }

    fn resolve(&self, r: &RawRef) -> Result<FieldRef, TemplateError> {
        match &r.qualifier {
            Some(q) => {
                let pos = self.position_of(q)?;
                let field = self.chain[pos]
                    .1
                    .field_index(&r.field)
                    .ok_or_else(|| TemplateError::UnknownField(format!("{q}.{}", r.field)))?;
                Ok(FieldRef { pos, field })
            }
            None => {
                let hits: Vec<FieldRef> = self
                    .chain
                    .iter()
                    .enumerate()
                    .filter_map(|(pos, (_, t))| t.field_index(&r.field).map(|field| FieldRef { pos, field }))
                    .collect();
                match hits.as_slice() {
                    [one] => Ok(*one),
                    [] => Err(TemplateError::UnknownField(r.field.clone())),
                    _ => Err(TemplateError::Ambiguous(r.field.clone())),
                }
            }
        }
    }

    fn kind(&self, f: FieldRef) -> FieldKind {
        self.chain[f.pos].1.fields[f.field].kind
    }
}

/// Parses `text` and resolves all names against `schema`.
pub fn parse_template(text: &str, schema: &Schema) -> Result<QueryTemplate, TemplateError> {
    let toks = lex(text)?;
    let mut p = Parser {
        toks,
        pos: 0,
        end: text.len(),
    };

    let mut name = None;
    let mut via = None;
    if p.eat_kw("index") {
        name = Some(p.ident()?);
        if p.eat_kw("via") {
            via = Some(p.ident()?);
        }
        p.expect_kw("as")?;
    }

    p.expect_kw("select")?;
    let mut sels = vec![p.selection_item()?];
    while p.eat(&Tok::Comma) {
        sels.push(p.selection_item()?);
    }

    p.expect_kw("from")?;
    let mut raw_chain = vec![(p.offset(), p.ident()?, p.opt_alias())];
    let mut raw_joins = Vec::new();
    while p.eat_kw("join") {
        let offset = p.offset();
        let table = p.ident()?;
        let alias = p.opt_alias();
        p.expect_kw("on")?;
        let a = p.field_ref()?;
        if !p.eat(&Tok::Eq) {
            return p.err("expected `=` in join condition");
        }
        let b = p.field_ref()?;
        raw_chain.push((offset, table, alias));
        raw_joins.push((a, b));
    }

    let mut raw_preds = Vec::new();
    if p.eat_kw("where") {
        loop {
            let (field, param) = match p.peek().cloned() {
                Some(Tok::Param(name)) => {
                    p.pos += 1;
                    if !p.eat(&Tok::Eq) {
                        return p.err("expected `=`");
                    }
                    (p.field_ref()?, name)
                }
                _ => {
                    let f = p.field_ref()?;
                    if !p.eat(&Tok::Eq) {
                        return p.err("expected `=`");
                    }
                    match p.peek().cloned() {
                        Some(Tok::Param(name)) => {
                            p.pos += 1;
                            (f, name)
                        }
                        _ => return p.err("predicates must compare a field with a <parameter>"),
                    }
                }
            };
            raw_preds.push((field, param));
            if p.peek_kw("or") {
                return p.err("disjunctive predicates are not supported");
            }
            if !p.eat_kw("and") {
                break;
            }
        }
    }

    let mut raw_order = None;
    if p.eat_kw("order") {
        p.expect_kw("by")?;
        raw_order = Some(p.field_ref()?);
        p.eat_kw("asc");
        if p.eat(&Tok::Comma) {
            return p.err("only a single ORDER BY field is supported");
        }
    }

    let mut limit = None;
    if p.eat_kw("limit") {
        match p.peek().cloned() {
            Some(Tok::Number(n)) if n > 0 && n <= u32::MAX as u64 => {
                p.pos += 1;
                limit = Some(n as u32);
            }
            Some(Tok::Param(name)) => {
                return Err(TemplateError::UnboundParameter(format!(
                    "<{name}> may only appear in an equality predicate"
                )))
            }
            _ => return p.err("LIMIT expects a positive integer"),
        }
    }
    p.eat(&Tok::Semi);
    if p.peek().is_some() {
        return p.err("unexpected trailing input");
    }

    // Resolve names.
    let mut resolver = Resolver {
        schema,
        chain: Vec::new(),
    };
    for (offset, table, alias) in &raw_chain {
        let t = schema
            .table(table)
            .ok_or_else(|| TemplateError::UnknownTable(table.clone()))?;
        let alias = alias.clone().unwrap_or_else(|| table.clone());
        if resolver.chain.iter().any(|(c, _)| c.alias == alias) {
            return Err(TemplateError::Syntax {
                offset: *offset,
                message: format!("duplicate alias `{alias}`"),
            });
        }
        resolver.chain.push((
            ChainTable {
                table: table.clone(),
                alias,
            },
            t,
        ));
    }

    let mut joins = Vec::new();
    for (i, (a, b)) in raw_joins.iter().enumerate() {
        let new_pos = i + 1;
        let fa = resolver.resolve(a)?;
        let fb = resolver.resolve(b)?;
        let (left, right) = match (fa.pos == new_pos, fb.pos == new_pos) {
            (false, true) if fa.pos < new_pos => (fa, fb),
            (true, false) if fb.pos < new_pos => (fb, fa),
            _ => {
                return Err(TemplateError::Syntax {
                    offset: a.offset,
                    message: "join condition must link the joined table to an earlier one".into(),
                })
            }
        };
        let (lt, rt) = (resolver.chain[left.pos].1, resolver.chain[right.pos].1);
        let (lf, rf) = (&lt.fields[left.field].name, &rt.fields[right.field].name);
        let rel = schema
            .relationships
            .iter()
            .find(|r| r.links(&lt.name, lf, &rt.name, rf))
            .ok_or_else(|| {
                TemplateError::UndeclaredJoin(format!("{}.{lf} = {}.{rf}", lt.name, rt.name))
            })?;
        joins.push(JoinEdge {
            left,
            right,
            relationship: rel.name.clone(),
            bound: rel.bound,
        });
    }

    let mut params: Vec<Param> = Vec::new();
    for (raw, name) in &raw_preds {
        let f = resolver.resolve(raw)?;
        let kind = resolver.kind(f);
        match params.iter_mut().find(|p| &p.name == name) {
            Some(p) if p.kind != kind => {
                return Err(TemplateError::Syntax {
                    offset: raw.offset,
                    message: format!("<{name}> compared with fields of different kinds"),
                })
            }
            Some(p) => p.predicates.push(f),
            None => params.push(Param {
                name: name.clone(),
                kind,
                predicates: vec![f],
            }),
        }
    }
    if params.is_empty() {
        return Err(TemplateError::UnboundParameter(
            "query binds no parameter, so it is not a keyed lookup".into(),
        ));
    }

    let order_by = raw_order.as_ref().map(|r| resolver.resolve(r)).transpose()?;

    let selection = if sels.len() == 1 && matches!(sels[0], RawSel::All | RawSel::Row(..)) {
        match &sels[0] {
            RawSel::All => Selection::Row(resolver.chain.len() - 1),
            RawSel::Row(q) => Selection::Row(resolver.position_of(q)?),
            RawSel::Field(_) => unreachable!(),
        }
    } else {
        let mut fields = Vec::new();
        for s in &sels {
            match s {
                RawSel::Field(r) => fields.push(resolver.resolve(r)?),
                RawSel::All | RawSel::Row(..) => {
                    return Err(TemplateError::Syntax {
                        offset: 0,
                        message: "`*` cannot be combined with other select items".into(),
                    })
                }
            }
        }
        if fields.iter().any(|f| f.pos != fields[0].pos) {
            return Err(TemplateError::Syntax {
                offset: 0,
                message: "selected fields must come from one table".into(),
            });
        }
        Selection::Fields(fields)
    };

    let chain: Vec<ChainTable> = resolver.chain.into_iter().map(|(c, _)| c).collect();
    let name = name.unwrap_or_else(|| {
        let names: Vec<&str> = params.iter().map(|p| p.name.as_str()).collect();
        format!("{}_by_{}", chain[0].table, names.join("_"))
    });
    Ok(QueryTemplate {
        name,
        via,
        chain,
        joins,
        params,
        order_by,
        limit,
        selection,
    })
}
