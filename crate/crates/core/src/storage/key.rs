//! Order-preserving composite key encoding.
//!
//! Integers (and dates, as days since 1970-01-01) are written big-endian with
//! the sign bit flipped. Strings are UTF-8 with `0x00` escaped as `0x00 0xFF`
//! and terminated by `0x00 0x01`, so a string always sorts before any of its
//! extensions regardless of what follows it in the tuple.

use std::cmp::Ordering;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FieldKind {
    String,
    Int,
    Date,
}

impl FieldKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "string" | "text" => Some(FieldKind::String),
            "int" | "integer" => Some(FieldKind::Int),
            "date" => Some(FieldKind::Date),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            FieldKind::String => "string",
            FieldKind::Int => "int",
            FieldKind::Date => "date",
        }
    }

    pub fn min_value(self) -> Value {
        match self {
            FieldKind::String => Value::Str(String::new()),
            FieldKind::Int => Value::Int(i64::MIN),
            FieldKind::Date => Value::Date(i64::MIN),
        }
    }
}

/// A typed field value.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Value {
    Str(String),
    Int(i64),
    /// Days since 1970-01-01.
    Date(i64),
}

impl Value {
    pub fn kind(&self) -> FieldKind {
        match self {
            Value::Str(_) => FieldKind::String,
            Value::Int(_) => FieldKind::Int,
            Value::Date(_) => FieldKind::Date,
        }
    }

    pub fn str(s: impl Into<String>) -> Self {
        Value::Str(s.into())
    }

    /// Parses `YYYY-MM-DD`.
    pub fn date(s: &str) -> Option<Self> {
        parse_date(s).map(Value::Date)
    }

    /// Parses a literal of the given kind.
    pub fn parse_as(kind: FieldKind, s: &str) -> Option<Self> {
        match kind {
            FieldKind::String => Some(Value::Str(s.to_string())),
            FieldKind::Int => s.parse().ok().map(Value::Int),
            FieldKind::Date => Value::date(s),
        }
    }
}

impl PartialOrd for Value {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Value {
    fn cmp(&self, other: &Self) -> Ordering {
        match (self, other) {
            (Value::Str(a), Value::Str(b)) => a.as_bytes().cmp(b.as_bytes()),
            (Value::Int(a), Value::Int(b)) | (Value::Date(a), Value::Date(b)) => a.cmp(b),
            _ => self.kind().cmp(&other.kind()),
        }
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Str(s) => write!(f, "{s}"),
            Value::Int(i) => write!(f, "{i}"),
            Value::Date(d) => {
                let (y, m, day) = civil_from_days(*d);
                write!(f, "{y:04}-{m:02}-{day:02}")
            }
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum KeyError {
    #[error("type mismatch at field {index}: expected {expected}, got {actual}")]
    TypeMismatch {
        index: usize,
        expected: &'static str,
        actual: &'static str,
    },
    #[error("tuple has {actual} fields, expected {expected}")]
    Arity { expected: usize, actual: usize },
    #[error("malformed key bytes at offset {0}")]
    Malformed(usize),
}

/// Byte string whose lexicographic order matches the tuple order it encodes.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
pub struct CompositeKey(Vec<u8>);

impl CompositeKey {
    pub fn from_bytes(bytes: Vec<u8>) -> Self {
        CompositeKey(bytes)
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.0
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn starts_with(&self, prefix: &CompositeKey) -> bool {
        self.0.starts_with(&prefix.0)
    }

    /// Smallest key greater than every key having `self` as a prefix, or
    /// `None` when no such key exists (all bytes `0xFF`).
    pub fn prefix_successor(&self) -> Option<CompositeKey> {
        let mut bytes = self.0.clone();
        while let Some(last) = bytes.pop() {
            if last < 0xFF {
                bytes.push(last + 1);
                return Some(CompositeKey(bytes));
            }
        }
        None
    }

    pub fn to_hex(&self) -> String {
        self.0.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Appends the encodings of `values` to this key.
    pub fn extend(&mut self, values: &[Value]) {
        for v in values {
            encode_value_into(v, &mut self.0);
        }
    }
}

impl fmt::Debug for CompositeKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "CompositeKey({})", self.to_hex())
    }
}

pub fn encode_i64(v: i64) -> [u8; 8] {
    ((v as u64) ^ (1u64 << 63)).to_be_bytes()
}

pub fn decode_i64(b: [u8; 8]) -> i64 {
    (u64::from_be_bytes(b) ^ (1u64 << 63)) as i64
}

fn encode_value_into(v: &Value, out: &mut Vec<u8>) {
    match v {
        Value::Int(i) | Value::Date(i) => out.extend_from_slice(&encode_i64(*i)),
        Value::Str(s) => {
            for &b in s.as_bytes() {
                if b == 0 {
                    out.extend_from_slice(&[0x00, 0xFF]);
                } else {
                    out.push(b);
                }
            }
            out.extend_from_slice(&[0x00, 0x01]);
        }
    }
}

/// Encodes values without a declared layout.
pub fn encode_values(values: &[Value]) -> CompositeKey {
    let mut out = Vec::new();
    for v in values {
        encode_value_into(v, &mut out);
    }
    CompositeKey(out)
}

/// Encodes `tuple` checking each field against the declared `kinds`.
pub fn encode_key(tuple: &[Value], kinds: &[FieldKind]) -> Result<CompositeKey, KeyError> {
    if tuple.len() != kinds.len() {
        return Err(KeyError::Arity {
            expected: kinds.len(),
            actual: tuple.len(),
        });
    }
    for (index, (v, k)) in tuple.iter().zip(kinds).enumerate() {
        if v.kind() != *k {
            return Err(KeyError::TypeMismatch {
                index,
                expected: k.name(),
                actual: v.kind().name(),
            });
        }
    }
    Ok(encode_values(tuple))
}

/// Decodes a key produced by [`encode_key`] with the same `kinds`.
pub fn decode_key(key: &[u8], kinds: &[FieldKind]) -> Result<Vec<Value>, KeyError> {
    let mut out = Vec::with_capacity(kinds.len());
    let mut pos = 0;
    for kind in kinds {
        match kind {
            FieldKind::Int | FieldKind::Date => {
                let bytes: [u8; 8] = key
                    .get(pos..pos + 8)
                    .ok_or(KeyError::Malformed(pos))?
                    .try_into()
                    .map_err(|_| KeyError::Malformed(pos))?;
                let v = decode_i64(bytes);
                out.push(if *kind == FieldKind::Int {
                    Value::Int(v)
                } else {
                    Value::Date(v)
                });
                pos += 8;
            }
            FieldKind::String => {
                let mut s = Vec::new();
                loop {
                    let b = *key.get(pos).ok_or(KeyError::Malformed(pos))?;
                    if b != 0 {
                        s.push(b);
                        pos += 1;
                        continue;
                    }
                    match key.get(pos + 1) {
                        Some(0xFF) => s.push(0),
                        Some(0x01) => {
                            pos += 2;
                            break;
                        }
                        _ => return Err(KeyError::Malformed(pos)),
                    }
                    pos += 2;
                }
                out.push(Value::Str(
                    String::from_utf8(s).map_err(|_| KeyError::Malformed(pos))?,
                ));
            }
        }
    }
    if pos != key.len() {
        return Err(KeyError::Malformed(pos));
    }
    Ok(out)
}

// Proleptic Gregorian conversions (H. Hinnant's algorithms).
pub fn days_from_civil(y: i64, m: u32, d: u32) -> i64 {
    let y = if m <= 2 { y - 1 } else { y };
    let era = if y >= 0 { y } else { y - 399 } / 400;
    let yoe = y - era * 400;
    let m = m as i64;
    let doy = (153 * (if m > 2 { m - 3 } else { m + 9 }) + 2) / 5 + d as i64 - 1;
    let doe = yoe * 365 + yoe / 4 - yoe / 100 + doy;
    era * 146097 + doe - 719468
}

pub fn civil_from_days(z: i64) -> (i64, u32, u32) {
    let z = z + 719468;
    let era = if z >= 0 { z } else { z - 146096 } / 146097;
    let doe = z - era * 146097;
    let yoe = (doe - doe / 1460 + doe / 36524 - doe / 146096) / 365;
    let y = yoe + era * 400;
    let doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
    let mp = (5 * doy + 2) / 153;
    let d = (doy - (153 * mp + 2) / 5 + 1) as u32;
    let m = if mp < 10 { mp + 3 } else { mp - 9 } as u32;
    (if m <= 2 { y + 1 } else { y }, m, d)
}

fn parse_date(s: &str) -> Option<i64> {
    let mut parts = s.splitn(3, '-');
    let y: i64 = parts.next()?.parse().ok()?;
    let m: u32 = parts.next()?.parse().ok()?;
    let d: u32 = parts.next()?.parse().ok()?;
    if !(1..=12).contains(&m) || !(1..=31).contains(&d) {
        return None;
    }
    let days = days_from_civil(y, m, d);
    // reject e.g. 2001-02-30
    (civil_from_days(days) == (y, m, d)).then_some(days)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const KINDS: [FieldKind; 2] = [FieldKind::String, FieldKind::Date];

    #[test]
    fn date_order_within_user() {
        let a = encode_key(&[Value::str("u1"), Value::date("1980-05-12").unwrap()], &KINDS).unwrap();
        let b = encode_key(&[Value::str("u1"), Value::date("1981-01-01").unwrap()], &KINDS).unwrap();
        assert!(a < b);
    }

    #[test]
    fn equal_tuples_encode_identically() {
        let t = [Value::str("u1"), Value::date("1980-05-12").unwrap()];
        assert_eq!(encode_key(&t, &KINDS).unwrap(), encode_key(&t, &KINDS).unwrap());
    }

    #[test]
    fn type_mismatch_rejected() {
        let err = encode_key(&[Value::Int(1), Value::Date(0)], &KINDS).unwrap_err();
        assert!(matches!(err, KeyError::TypeMismatch { index: 0, .. }));
    }

    #[test]
    fn string_prefix_sorts_first_even_before_large_ints() {
        let k = [FieldKind::String, FieldKind::Int];
        let a = encode_key(&[Value::str("a"), Value::Int(i64::MAX)], &k).unwrap();
        let b = encode_key(&[Value::str("a\0"), Value::Int(i64::MIN)], &k).unwrap();
        assert!(a < b);
    }

    #[test]
    fn dates_round_trip() {
        for s in ["1970-01-01", "1969-12-31", "2000-02-29", "1600-03-01"] {
            assert_eq!(Value::date(s).unwrap().to_string(), s);
        }
        assert_eq!(Value::date("1970-01-02"), Some(Value::Date(1)));
        assert!(Value::date("2001-02-29").is_none());
    }

    #[test]
    fn prefix_successor_bounds_extensions() {
        let p = encode_values(&[Value::str("u1")]);
        let hi = p.prefix_successor().unwrap();
        let ext = encode_values(&[Value::str("u1"), Value::Int(i64::MAX)]);
        assert!(p < ext && ext < hi);
        let other = encode_values(&[Value::str("u10")]);
        assert!(other > hi || !other.starts_with(&p));
        assert!(CompositeKey::from_bytes(vec![0xFF, 0xFF]).prefix_successor().is_none());
    }

    fn value_strategy(kind: FieldKind) -> BoxedStrategy<Value> {
        match kind {
            FieldKind::String => proptest::collection::vec(
                prop_oneof![Just(0u8), Just(1u8), Just(0xFFu8), any::<u8>().prop_map(|b| b % 128)],
                0..6,
            )
            .prop_map(|b| Value::Str(String::from_utf8(b).unwrap_or_default()))
            .boxed(),
            FieldKind::Int => any::<i64>().prop_map(Value::Int).boxed(),
            FieldKind::Date => (-100_000i64..100_000).prop_map(Value::Date).boxed(),
        }
    }

    fn tuple_strategy() -> impl Strategy<Value = Vec<Value>> {
        (
            value_strategy(FieldKind::String),
            value_strategy(FieldKind::Int),
            value_strategy(FieldKind::Date),
            value_strategy(FieldKind::String),
        )
            .prop_map(|(a, b, c, d)| vec![a, b, c, d])
    }

    const TUPLE: [FieldKind; 4] = [FieldKind::String, FieldKind::Int, FieldKind::Date, FieldKind::String];

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(2000))]

        #[test]
        fn encoding_order_matches_tuple_order(a in tuple_strategy(), b in tuple_strategy()) {
            let ea = encode_key(&a, &TUPLE).unwrap();
            let eb = encode_key(&b, &TUPLE).unwrap();
            prop_assert_eq!(ea.cmp(&eb), a.cmp(&b));
        }

        #[test]
        fn decode_inverts_encode(a in tuple_strategy()) {
            let e = encode_key(&a, &TUPLE).unwrap();
            prop_assert_eq!(decode_key(e.as_bytes(), &TUPLE).unwrap(), a);
        }
    }
}
