//! Schema declarations with cardinality-bounded relationships.
//!
//! ```text
//! # comment
//! table profiles (id string key, name string, birthday date)
//! table friendships (f1 string key, f2 string key)
//! relationship friend_profile friendships.f2 -> profiles.id bound 4
//! relationship followed_by followers.followee -> profiles.id unbounded
//! ```
//!
//! A relationship bound `K` promises that for any join-key value at most `K`
//! rows on either side carry that value.

use std::fmt;

use thiserror::Error;

use crate::storage::key::FieldKind;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Field {
    pub name: String,
    pub kind: FieldKind,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Table {
    pub name: String,
    pub fields: Vec<Field>,
    /// Indices into `fields`, in declaration order.
    pub primary_key: Vec<usize>,
}

impl Table {
    pub fn field_index(&self, name: &str) -> Option<usize> {
        self.fields.iter().position(|f| f.name == name)
    }

    pub fn kinds(&self) -> Vec<FieldKind> {
        self.fields.iter().map(|f| f.kind).collect()
    }

    pub fn pk_kinds(&self) -> Vec<FieldKind> {
        self.primary_key.iter().map(|&i| self.fields[i].kind).collect()
    }

    pub fn is_pk_field(&self, idx: usize) -> bool {
        self.primary_key.contains(&idx)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Cardinality {
    Bounded(u64),
    Unbounded,
}

impl fmt::Display for Cardinality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Cardinality::Bounded(k) => write!(f, "bound {k}"),
            Cardinality::Unbounded => f.write_str("unbounded"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Relationship {
    pub name: String,
    pub from_table: String,
    pub from_field: String,
    pub to_table: String,
    pub to_field: String,
    pub bound: Cardinality,
}

impl Relationship {
    /// True if this relationship links `(ta.fa)` and `(tb.fb)` in either direction.
    pub fn links(&self, ta: &str, fa: &str, tb: &str, fb: &str) -> bool {
        (self.from_table == ta && self.from_field == fa && self.to_table == tb && self.to_field == fb)
            || (self.from_table == tb
                && self.from_field == fb
                && self.to_table == ta
                && self.to_field == fa)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Schema {
    pub tables: Vec<Table>,
    pub relationships: Vec<Relationship>,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SchemaError {
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("unknown table `{0}`")]
    UnknownTable(String),
    #[error("unknown field `{table}.{field}`")]
    UnknownField { table: String, field: String },
    #[error("invalid schema: {0}")]
    Invalid(String),
}

impl Schema {
    pub fn table(&self, name: &str) -> Option<&Table> {
        self.tables.iter().find(|t| t.name == name)
    }

    pub fn relationship(&self, name: &str) -> Option<&Relationship> {
        self.relationships.iter().find(|r| r.name == name)
    }

    /// Parses the line-oriented schema format and validates it.
    pub fn parse(text: &str) -> Result<Schema, SchemaError> {
        let mut schema = Schema::default();
        for (no, raw) in text.lines().enumerate() {
            let line = no + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let syntax = |message: &str| SchemaError::Syntax {
                line,
                message: message.to_string(),
            };
            let (head, rest) = content.split_once(char::is_whitespace).unwrap_or((content, ""));
            match head {
                "table" => schema.tables.push(parse_table(rest.trim()).map_err(|m| syntax(&m))?),
                "relationship" => schema
                    .relationships
                    .push(parse_relationship(rest.trim()).map_err(|m| syntax(&m))?),
                other => return Err(syntax(&format!("expected `table` or `relationship`, found `{other}`"))),
            }
        }
        schema.validate()?;
        Ok(schema)
    }

    pub fn validate(&self) -> Result<(), SchemaError> {
        for (i, t) in self.tables.iter().enumerate() {
            if self.tables[..i].iter().any(|o| o.name == t.name) {
                return Err(SchemaError::Invalid(format!("duplicate table `{}`", t.name)));
            }
            if t.primary_key.is_empty() {
                return Err(SchemaError::Invalid(format!("table `{}` has no key field", t.name)));
            }
            for (j, f) in t.fields.iter().enumerate() {
                if t.fields[..j].iter().any(|o| o.name == f.name) {
                    return Err(SchemaError::Invalid(format!("duplicate field `{}.{}`", t.name, f.name)));
                }
            }
        }
        for (i, r) in self.relationships.iter().enumerate() {
            if self.relationships[..i].iter().any(|o| o.name == r.name) {
                return Err(SchemaError::Invalid(format!("duplicate relationship `{}`", r.name)));
            }
            let mut kinds = Vec::new();
            for (table, field) in [(&r.from_table, &r.from_field), (&r.to_table, &r.to_field)] {
                let t = self
                    .table(table)
                    .ok_or_else(|| SchemaError::UnknownTable(table.clone()))?;
                let idx = t.field_index(field).ok_or_else(|| SchemaError::UnknownField {
                    table: table.clone(),
                    field: field.clone(),
                })?;
                kinds.push(t.fields[idx].kind);
            }
            if kinds[0] != kinds[1] {
                return Err(SchemaError::Invalid(format!(
                    "relationship `{}` joins fields of different kinds",
                    r.name
                )));
            }
            if r.bound == Cardinality::Bounded(0) {
                return Err(SchemaError::Invalid(format!("relationship `{}` has bound 0", r.name)));
            }
        }
        Ok(())
    }
}

fn is_ident(s: &str) -> bool {
    let mut chars = s.chars();
    chars.next().is_some_and(|c| c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

fn parse_table(rest: &str) -> Result<Table, String> {
    let (name, body) = rest
        .split_once('(')
        .ok_or("expected `(` after table name")?;
    let name = name.trim();
    if !is_ident(name) {
        return Err(format!("invalid table name `{name}`"));
    }
    let body = body
        .trim_end()
        .strip_suffix(')')
        .ok_or("expected `)` closing field list")?;
    let mut fields = Vec::new();
    let mut primary_key = Vec::new();
    for decl in body.split(',') {
        let words: Vec<&str> = decl.split_whitespace().collect();
        let (fname, kind, key) = match words.as_slice() {
            [f, k] => (*f, *k, false),
            [f, k, "key"] => (*f, *k, true),
            _ => return Err(format!("bad field declaration `{}`", decl.trim())),
        };
        if !is_ident(fname) {
            return Err(format!("invalid field name `{fname}`"));
        }
        let kind = FieldKind::parse(kind).ok_or_else(|| format!("unknown field kind `{kind}`"))?;
        if key {
            primary_key.push(fields.len());
        }
        fields.push(Field {
            name: fname.to_string(),
            kind,
        });
    }
    Ok(Table {
        name: name.to_string(),
        fields,
        primary_key,
    })
}

fn split_qualified(s: &str) -> Result<(String, String), String> {
    let (t, f) = s
        .split_once('.')
        .ok_or_else(|| format!("expected table.field, found `{s}`"))?;
    if !is_ident(t) || !is_ident(f) {
        return Err(format!("expected table.field, found `{s}`"));
    }
    Ok((t.to_string(), f.to_string()))
}

fn parse_relationship(rest: &str) -> Result<Relationship, String> {
    let words: Vec<&str> = rest.split_whitespace().collect();
    let (name, words) = match words.first() {
        Some(w) if !w.contains('.') => (Some(w.to_string()), &words[1..]),
        _ => (None, &words[..]),
    };
    let (from, to, bound) = match words {
        [from, "->", to, "bound", k] => (
            *from,
            *to,
            Cardinality::Bounded(k.parse().map_err(|_| format!("bad bound `{k}`"))?),
        ),
        [from, "->", to, "unbounded"] => (*from, *to, Cardinality::Unbounded),
        _ => return Err("expected `[name] table.field -> table.field (bound K | unbounded)`".into()),
    };
    let (from_table, from_field) = split_qualified(from)?;
    let (to_table, to_field) = split_qualified(to)?;
    let name = name.unwrap_or_else(|| format!("{from_table}.{from_field}->{to_table}.{to_field}"));
    Ok(Relationship {
        name,
        from_table,
        from_field,
        to_table,
        to_field,
        bound,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const SOCIAL: &str = "
        # social network
        table profiles (id string key, name string, birthday date)
        table friendships (f1 string key, f2 string key)
        relationship friend_profile friendships.f2 -> profiles.id bound 4
        relationship friendships.f2 -> friendships.f1 bound 4
    ";

    #[test]
    fn parses_social_schema() {
        let s = Schema::parse(SOCIAL).unwrap();
        assert_eq!(s.tables.len(), 2);
        let f = s.table("friendships").unwrap();
        assert_eq!(f.primary_key, vec![0, 1]);
        assert_eq!(s.relationships[1].name, "friendships.f2->friendships.f1");
        assert_eq!(s.relationship("friend_profile").unwrap().bound, Cardinality::Bounded(4));
    }

    #[test]
    fn relationship_to_missing_table() {
        let err = Schema::parse("table a (x int key)\nrelationship a.x -> b.y bound 2").unwrap_err();
        assert_eq!(err, SchemaError::UnknownTable("b".into()));
    }

    #[test]
    fn missing_key_rejected() {
        assert!(matches!(Schema::parse("table a (x int)"), Err(SchemaError::Invalid(_))));
    }

    #[test]
    fn syntax_error_has_line() {
        let err = Schema::parse("table a (x int key)\n\nindex foo").unwrap_err();
        assert!(matches!(err, SchemaError::Syntax { line: 3, .. }));
    }

    #[test]
    fn kind_mismatch_rejected() {
        let err = Schema::parse("table a (x int key)\ntable b (y string key)\nrelationship a.x -> b.y bound 1");
        assert!(matches!(err, Err(SchemaError::Invalid(_))));
    }
}
