//! Immutable knowledge base of typed triples with forward indexes.
//!
//! A KB is a set of `(subject, property, object)` assertions. Subjects are
//! entities; objects may be entities, numbers, or dates. The two indexes
//! (`subject -> property -> objects` and `subject -> outgoing properties`)
//! back the interpreter's `Hop` traversal and its semantic code assistance.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use ordered_float::OrderedFloat;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Calendar date, compared lexicographically by (year, month, day).
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Date {
    pub year: i32,
    pub month: u8,
    pub day: u8,
}

impl fmt::Display for Date {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:04}-{:02}-{:02}", self.year, self.month, self.day)
    }
}

impl FromStr for Date {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut parts = s.split('-');
        let year = parts.next().and_then(|p| p.parse().ok());
        let month = parts.next().and_then(|p| p.parse().ok());
        let day = parts.next().and_then(|p| p.parse().ok());
        match (year, month, day, parts.next()) {
            (Some(y), Some(m @ 1..=12), Some(d @ 1..=31), None) => Ok(Date {
                year: y,
                month: m,
                day: d,
            }),
            _ => Err(format!("invalid date `{s}`")),
        }
    }
}

/// A KB value: an entity id, a number, or a date.
///
/// The derived `Ord` is a total order (by tag, then payload) used only for
/// deterministic set iteration; semantic ordering for ArgMax/ArgMin is
/// [`Value::cmp_comparable`], which is defined only between two numbers or
/// two dates.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Value {
    Entity(String),
    Number(OrderedFloat<f64>),
    Date(Date),
}

impl Value {
    pub fn entity(id: impl Into<String>) -> Self {
        Value::Entity(id.into())
    }

    pub fn number(x: f64) -> Self {
        Value::Number(OrderedFloat(x))
    }

    pub fn as_entity(&self) -> Option<&str> {
        match self {
            Value::Entity(id) => Some(id),
            _ => None,
        }
    }

    /// Ordering for comparisons: defined on number/number and date/date only.
    pub fn cmp_comparable(&self, other: &Value) -> Option<Ordering> {
        match (self, other) {
            (Value::Number(a), Value::Number(b)) => Some(a.cmp(b)),
            (Value::Date(a), Value::Date(b)) => Some(a.cmp(b)),
            _ => None,
        }
    }

    pub fn is_comparable(&self) -> bool {
        matches!(self, Value::Number(_) | Value::Date(_))
    }
}

impl fmt::Display for Value {
    /// Text form matches the triple-file object encoding: `n:` for numbers,
    /// `d:` for dates, bare id for entities.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Entity(id) => write!(f, "{id}"),
            Value::Number(x) => write!(f, "n:{}", x.0),
            Value::Date(d) => write!(f, "d:{d}"),
        }
    }
}

impl FromStr for Value {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if let Some(num) = s.strip_prefix("n:") {
            let x: f64 = num
                .parse()
                .map_err(|_| format!("invalid number `{num}`"))?;
            if !x.is_finite() {
                return Err(format!("non-finite number `{num}`"));
            }
            Ok(Value::number(x))
        } else if let Some(date) = s.strip_prefix("d:") {
            Ok(Value::Date(date.parse()?))
        } else if s.is_empty() {
            Err("empty value".to_string())
        } else {
            Ok(Value::Entity(s.to_string()))
        }
    }
}

impl Serialize for Value {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Value {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// A set of KB values; program denotations are always of this shape.
pub type ValueSet = BTreeSet<Value>;

#[derive(Debug, Error)]
pub enum LoadError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {msg}")]
    Malformed { line: usize, msg: String },
}

/// Immutable triple store with forward indexes.
#[derive(Debug, Default)]
pub struct KnowledgeBase {
    entities: BTreeSet<String>,
    properties: BTreeSet<String>,
    triples: BTreeSet<(String, String, Value)>,
    fwd: BTreeMap<String, BTreeMap<String, Arc<ValueSet>>>,
    props_of: BTreeMap<String, BTreeSet<String>>,
}

impl KnowledgeBase {
    pub fn from_triples(triples: impl IntoIterator<Item = (String, String, Value)>) -> Self {
        let triples: BTreeSet<_> = triples.into_iter().collect();
        let mut entities = BTreeSet::new();
        let mut properties = BTreeSet::new();
        let mut fwd: BTreeMap<String, BTreeMap<String, ValueSet>> = BTreeMap::new();
        let mut props_of: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
        for (s, p, o) in &triples {
            entities.insert(s.clone());
            if let Value::Entity(e) = o {
                entities.insert(e.clone());
            }
            properties.insert(p.clone());
            fwd.entry(s.clone())
                .or_default()
                .entry(p.clone())
                .or_default()
                .insert(o.clone());
            props_of.entry(s.clone()).or_default().insert(p.clone());
        }
        let fwd = fwd
            .into_iter()
            .map(|(s, by_prop)| {
                let by_prop = by_prop
                    .into_iter()
                    .map(|(p, objs)| (p, Arc::new(objs)))
                    .collect();
                (s, by_prop)
            })
            .collect();
        KnowledgeBase {
            entities,
            properties,
            triples,
            fwd,
            props_of,
        }
    }

    /// Loads a tab-separated triple file: `subject<TAB>property<TAB>object`,
    /// UTF-8, `#`-prefixed comment lines and blank lines ignored, duplicate
    /// rows deduplicated. Objects use the [`Value`] text encoding.
    pub fn load_triples(path: impl AsRef<Path>) -> Result<Self, LoadError> {
        let text = std::fs::read_to_string(path)?;
        let mut triples = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 {
                return Err(LoadError::Malformed {
                    line: line_no,
                    msg: format!("expected 3 tab-separated fields, got {}", fields.len()),
                });
            }
            if fields[0].is_empty() || fields[1].is_empty() {
                return Err(LoadError::Malformed {
                    line: line_no,
                    msg: "empty subject or property".to_string(),
                });
            }
            let object: Value = fields[2].parse().map_err(|msg| LoadError::Malformed {
                line: line_no,
                msg,
            })?;
            triples.push((fields[0].to_string(), fields[1].to_string(), object));
        }
        Ok(Self::from_triples(triples))
    }

    pub fn entities(&self) -> &BTreeSet<String> {
        &self.entities
    }

    pub fn properties(&self) -> &BTreeSet<String> {
        &self.properties
    }

    pub fn triples(&self) -> &BTreeSet<(String, String, Value)> {
        &self.triples
    }

    pub fn num_triples(&self) -> usize {
        self.triples.len()
    }

    /// Objects of `(subject, p, ·)`, or `None` when the subject has no such
    /// outgoing edge.
    pub fn objects(&self, subject: &str, p: &str) -> Option<&Arc<ValueSet>> {
        self.fwd.get(subject)?.get(p)
    }

    /// `Hop`: `{e2 | e1 in source, (e1, p, e2) in KB}`. Non-entity members of
    /// `source` contribute nothing; unknown properties yield the empty set.
    pub fn forward(&self, source: &ValueSet, p: &str) -> ValueSet {
        let mut out = ValueSet::new();
        for v in source {
            if let Value::Entity(e) = v {
                if let Some(objs) = self.objects(e, p) {
                    out.extend(objs.iter().cloned());
                }
            }
        }
        out
    }

    /// Properties with at least one edge out of some entity in `source`.
    pub fn reachable_properties(&self, source: &ValueSet) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        for v in source {
            if let Value::Entity(e) = v {
                if let Some(props) = self.props_of.get(e) {
                    out.extend(props.iter().cloned());
                }
            }
        }
        out
    }

    /// Outgoing properties of a single entity.
    pub fn properties_of(&self, entity: &str) -> Option<&BTreeSet<String>> {
        self.props_of.get(entity)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn kb0() -> KnowledgeBase {
        KnowledgeBase::from_triples([
            ("USA".into(), "city".into(), Value::entity("NYC")),
            ("USA".into(), "city".into(), Value::entity("SF")),
            ("NYC".into(), "pop".into(), Value::number(8.6)),
            ("SF".into(), "pop".into(), Value::number(0.9)),
            ("USA".into(), "capital".into(), Value::entity("DC")),
        ])
    }

    fn set(vals: &[Value]) -> ValueSet {
        vals.iter().cloned().collect()
    }

    #[test]
    fn load_from_file() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "# comment").unwrap();
        writeln!(f, "USA\tcity\tNYC").unwrap();
        writeln!(f, "USA\tcity\tSF").unwrap();
        writeln!(f, "USA\tcity\tNYC").unwrap();
        writeln!(f, "NYC\tpop\tn:8.6").unwrap();
        let kb = KnowledgeBase::load_triples(f.path()).unwrap();
        assert_eq!(kb.num_triples(), 3);
        assert_eq!(
            kb.properties_of("USA").unwrap().iter().collect::<Vec<_>>(),
            ["city"]
        );
        assert_eq!(
            kb.properties_of("NYC").unwrap().iter().collect::<Vec<_>>(),
            ["pop"]
        );
    }

    #[test]
    fn load_empty_file() {
        let f = tempfile::NamedTempFile::new().unwrap();
        let kb = KnowledgeBase::load_triples(f.path()).unwrap();
        assert_eq!(kb.num_triples(), 0);
        assert!(kb.entities().is_empty());
    }

    #[test]
    fn load_error_names_line() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "USA\tcity\tNYC").unwrap();
        writeln!(f, "NYC\tpop\tn:abc").unwrap();
        let err = KnowledgeBase::load_triples(f.path()).unwrap_err();
        match err {
            LoadError::Malformed { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn load_error_field_count() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "USA\tcity").unwrap();
        assert!(matches!(
            KnowledgeBase::load_triples(f.path()),
            Err(LoadError::Malformed { line: 1, .. })
        ));
    }

    #[test]
    fn forward_matches_definition() {
        let kb = kb0();
        assert_eq!(
            kb.forward(&set(&[Value::entity("USA")]), "city"),
            set(&[Value::entity("NYC"), Value::entity("SF")])
        );
        assert_eq!(kb.forward(&ValueSet::new(), "city"), ValueSet::new());
        assert_eq!(
            kb.forward(&set(&[Value::entity("NYC"), Value::entity("SF")]), "pop"),
            set(&[Value::number(8.6), Value::number(0.9)])
        );
        // unknown property: empty, not an error
        assert_eq!(kb.forward(&set(&[Value::entity("USA")]), "nope"), ValueSet::new());
    }

    #[test]
    fn reachable_properties_matches_definition() {
        let kb = kb0();
        let props = |vals: &[Value]| {
            kb.reachable_properties(&set(vals))
                .into_iter()
                .collect::<Vec<_>>()
        };
        assert_eq!(props(&[Value::entity("USA")]), ["capital", "city"]);
        assert_eq!(
            props(&[Value::entity("NYC"), Value::entity("USA")]),
            ["capital", "city", "pop"]
        );
        assert_eq!(props(&[Value::number(8.6)]), Vec::<String>::new());
    }

    #[test]
    fn value_text_round_trip() {
        for text in ["NYC", "n:8.6", "n:1.33", "d:1999-01-01"] {
            let v: Value = text.parse().unwrap();
            assert_eq!(v.to_string(), text);
        }
        assert!("n:abc".parse::<Value>().is_err());
        assert!("d:1999-13-01".parse::<Value>().is_err());
    }

    #[test]
    fn ordering_only_within_type() {
        let n = Value::number(1.0);
        let d = Value::Date("2000-01-02".parse().unwrap());
        let e = Value::entity("X");
        assert!(n.cmp_comparable(&Value::number(2.0)).is_some());
        assert!(d.cmp_comparable(&Value::Date("2000-01-03".parse().unwrap())).is_some());
        assert!(n.cmp_comparable(&d).is_none());
        assert!(e.cmp_comparable(&e).is_none());
    }
}
