//! Field paths, record schemas and the JSON data documents carried by
//! process instances.
//!
//! A document is an instance of a root record. Records are JSON objects whose
//! keys are declared fields; absent keys mean "not set", which is distinct
//! from an empty object or list.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::{Map, Value};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DataError {
    #[error("invalid field path `{0}`: {1}")]
    InvalidPath(String, &'static str),
    #[error("invalid type `{0}`")]
    InvalidType(String),
    #[error("unknown record `{0}`")]
    UnknownRecord(String),
    #[error("duplicate record `{0}`")]
    DuplicateRecord(String),
    #[error("record `{record}` declares field `{field}` twice")]
    DuplicateField { record: String, field: String },
    #[error("`{0}` is not a field of the schema")]
    UnknownField(String),
    #[error("value at `{path}` is not a valid {expected}")]
    TypeMismatch { path: String, expected: String },
    #[error("required field `{0}` is missing")]
    MissingRequired(String),
}

/// Dotted path into a data document, e.g. `company.commercialRegisterNo`.
///
/// Segments that are not plain identifiers (map keys such as plugin ids) are
/// written in bracket form: `decision.checkResults["check.manual"]`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct FieldPath(Vec<String>);

fn is_plain_segment(s: &str) -> bool {
    !s.is_empty()
        && s
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
}

impl FieldPath {
    pub fn parse(text: &str) -> Result<Self, DataError> {
        let err = |why| DataError::InvalidPath(text.to_string(), why);
        let mut segments = Vec::new();
        let mut rest = text;
        let mut expect_segment = true;
        while !rest.is_empty() {
            if let Some(after) = rest.strip_prefix("[\"") {
                let end = after.find("\"]").ok_or_else(|| err("unterminated bracket"))?;
                let seg = &after[..end];
                if seg.is_empty() || seg.contains('"') {
                    return Err(err("empty or quoted bracket segment"));
                }
                segments.push(seg.to_string());
                rest = &after[end + 2..];
                expect_segment = false;
            } else if let Some(after) = rest.strip_prefix('.') {
                if expect_segment {
                    return Err(err("empty segment"));
                }
                rest = after;
                expect_segment = true;
                if rest.is_empty() {
                    return Err(err("trailing dot"));
                }
            } else {
                if !expect_segment {
                    return Err(err("missing separator"));
                }
                let end = rest
                    .find(['.', '['])
                    .unwrap_or(rest.len());
                let seg = &rest[..end];
                if !is_plain_segment(seg) {
                    return Err(err("segment must be alphanumeric"));
                }
                segments.push(seg.to_string());
                rest = &rest[end..];
                expect_segment = false;
            }
        }
        if segments.is_empty() {
            return Err(err("empty path"));
        }
        Ok(Self(segments))
    }

    pub fn from_segments<I, S>(segments: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let segments: Vec<String> = segments.into_iter().map(Into::into).collect();
        assert!(!segments.is_empty(), "field path needs at least one segment");
        Self(segments)
    }

    pub fn segments(&self) -> &[String] {
        &self.0
    }

    pub fn child(&self, segment: impl Into<String>) -> Self {
        let mut next = self.0.clone();
        next.push(segment.into());
        Self(next)
    }

    pub fn starts_with(&self, prefix: &FieldPath) -> bool {
        self.0.starts_with(&prefix.0)
    }

    /// All non-empty prefixes, shortest first, ending with the path itself.
    pub fn prefixes(&self) -> impl Iterator<Item = FieldPath> + '_ {
        (1..=self.0.len()).map(move |n| FieldPath(self.0[..n].to_vec()))
    }
}

impl fmt::Display for FieldPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, seg) in self.0.iter().enumerate() {
            if is_plain_segment(seg) {
                if i > 0 {
                    f.write_str(".")?;
                }
                f.write_str(seg)?;
            } else {
                write!(f, "[\"{seg}\"]")?;
            }
        }
        Ok(())
    }
}

impl FromStr for FieldPath {
    type Err = DataError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::parse(s)
    }
}

impl Serialize for FieldPath {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for FieldPath {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let text = String::deserialize(d)?;
        Self::parse(&text).map_err(serde::de::Error::custom)
    }
}

/// Type of a record field.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TypeRef {
    String,
    Integer,
    Number,
    Boolean,
    Record(String),
    List(Box<TypeRef>),
    Map(Box<TypeRef>),
}

impl TypeRef {
    pub fn parse(text: &str) -> Result<Self, DataError> {
        let text = text.trim();
        let inner = |prefix: &str| {
            text.strip_prefix(prefix)
                .and_then(|r| r.strip_suffix('>'))
                .map(TypeRef::parse)
        };
        if let Some(t) = inner("list<") {
            return Ok(TypeRef::List(Box::new(t?)));
        }
        if let Some(t) = inner("map<") {
            return Ok(TypeRef::Map(Box::new(t?)));
        }
        Ok(match text {
            "string" => TypeRef::String,
            "integer" => TypeRef::Integer,
            "number" => TypeRef::Number,
            "boolean" => TypeRef::Boolean,
            name if is_plain_segment(name) && name.starts_with(|c: char| c.is_ascii_uppercase()) => {
                TypeRef::Record(name.to_string())
            }
            _ => return Err(DataError::InvalidType(text.to_string())),
        })
    }

    fn describe(&self) -> String {
        match self {
            TypeRef::String => "string".into(),
            TypeRef::Integer => "integer".into(),
            TypeRef::Number => "number".into(),
            TypeRef::Boolean => "boolean".into(),
            TypeRef::Record(r) => format!("{r} record"),
            TypeRef::List(t) => format!("list<{}>", t.describe()),
            TypeRef::Map(t) => format!("map<{}>", t.describe()),
        }
    }
}

fn is_false(b: &bool) -> bool {
    !*b
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldDef {
    pub name: String,
    #[serde(rename = "type")]
    pub type_name: String,
    /// Must be present in every complete document (checked at instance start).
    #[serde(default, skip_serializing_if = "is_false")]
    pub required: bool,
}

impl FieldDef {
    pub fn new(name: &str, type_name: &str) -> Self {
        Self {
            name: name.to_string(),
            type_name: type_name.to_string(),
            required: false,
        }
    }

    pub fn required(mut self) -> Self {
        self.required = true;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecordDef {
    pub record: String,
    pub fields: Vec<FieldDef>,
}

impl RecordDef {
    pub fn field(&self, name: &str) -> Option<&FieldDef> {
        self.fields.iter().find(|f| f.name == name)
    }
}

/// A closed set of record definitions.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Schema {
    records: BTreeMap<String, (RecordDef, BTreeMap<String, (TypeRef, bool)>)>,
}

impl Schema {
    pub fn from_records(records: &[RecordDef]) -> Result<Self, DataError> {
        let mut out = BTreeMap::new();
        for rec in records {
            let mut fields = BTreeMap::new();
            for f in &rec.fields {
                let ty = TypeRef::parse(&f.type_name)?;
                if fields.insert(f.name.clone(), (ty, f.required)).is_some() {
                    return Err(DataError::DuplicateField {
                        record: rec.record.clone(),
                        field: f.name.clone(),
                    });
                }
            }
            if out.insert(rec.record.clone(), (rec.clone(), fields)).is_some() {
                return Err(DataError::DuplicateRecord(rec.record.clone()));
            }
        }
        let schema = Self { records: out };
        for (_, fields) in schema.records.values() {
            for (ty, _) in fields.values() {
                schema.check_type_resolves(ty)?;
            }
        }
        Ok(schema)
    }

    fn check_type_resolves(&self, ty: &TypeRef) -> Result<(), DataError> {
        match ty {
            TypeRef::Record(r) if !self.records.contains_key(r) => {
                Err(DataError::UnknownRecord(r.clone()))
            }
            TypeRef::List(t) | TypeRef::Map(t) => self.check_type_resolves(t),
            _ => Ok(()),
        }
    }

    pub fn has_record(&self, name: &str) -> bool {
        self.records.contains_key(name)
    }

    pub fn record(&self, name: &str) -> Option<&RecordDef> {
        self.records.get(name).map(|(r, _)| r)
    }

    /// Resolve the declared type of `path` starting at record `root`.
    pub fn field_type(&self, root: &str, path: &FieldPath) -> Result<TypeRef, DataError> {
        let mut ty = TypeRef::Record(root.to_string());
        for seg in path.segments() {
            ty = match ty {
                TypeRef::Record(r) => {
                    let (_, fields) = self
                        .records
                        .get(&r)
                        .ok_or_else(|| DataError::UnknownRecord(r.clone()))?;
                    fields
                        .get(seg)
                        .map(|(t, _)| t.clone())
                        .ok_or_else(|| DataError::UnknownField(path.to_string()))?
                }
                TypeRef::Map(inner) => *inner,
                _ => return Err(DataError::UnknownField(path.to_string())),
            };
        }
        Ok(ty)
    }

    /// Check a complete document against `root`, including required fields.
    pub fn validate_document(&self, root: &str, doc: &Value) -> Result<(), DataError> {
        self.check(&TypeRef::Record(root.to_string()), doc, "", true)
    }

    /// Check a value written at `path`; required fields of nested records are
    /// not enforced because partial subtrees are legal writes.
    pub fn validate_write(&self, root: &str, path: &FieldPath, value: &Value) -> Result<(), DataError> {
        let ty = self.field_type(root, path)?;
        self.check(&ty, value, &path.to_string(), false)
    }

    fn check(&self, ty: &TypeRef, value: &Value, at: &str, required: bool) -> Result<(), DataError> {
        let mismatch = || DataError::TypeMismatch {
            path: if at.is_empty() { "<root>".into() } else { at.to_string() },
            expected: ty.describe(),
        };
        let join = |key: &str| {
            if at.is_empty() {
                key.to_string()
            } else if is_plain_segment(key) {
                format!("{at}.{key}")
            } else {
                format!("{at}[\"{key}\"]")
            }
        };
        match ty {
            TypeRef::String => value.is_string().then_some(()).ok_or_else(mismatch),
            TypeRef::Boolean => value.is_boolean().then_some(()).ok_or_else(mismatch),
            TypeRef::Number => value.is_number().then_some(()).ok_or_else(mismatch),
            TypeRef::Integer => (value.is_i64() || value.is_u64()).then_some(()).ok_or_else(mismatch),
            TypeRef::List(inner) => {
                let items = value.as_array().ok_or_else(mismatch)?;
                for (i, item) in items.iter().enumerate() {
                    self.check(inner, item, &format!("{at}[{i}]"), required)?;
                }
                Ok(())
            }
            TypeRef::Map(inner) => {
                let obj = value.as_object().ok_or_else(mismatch)?;
                for (k, v) in obj {
                    self.check(inner, v, &join(k), required)?;
                }
                Ok(())
            }
            TypeRef::Record(r) => {
                let obj = value.as_object().ok_or_else(mismatch)?;
                let (_, fields) = self
                    .records
                    .get(r)
                    .ok_or_else(|| DataError::UnknownRecord(r.clone()))?;
                for (k, v) in obj {
                    let (fty, _) = fields
                        .get(k)
                        .ok_or_else(|| DataError::UnknownField(join(k)))?;
                    self.check(fty, v, &join(k), required)?;
                }
                if required {
                    if let Some((name, _)) = fields
                        .iter()
                        .find(|(name, (_, req))| *req && !obj.contains_key(*name))
                    {
                        return Err(DataError::MissingRequired(join(name)));
                    }
                }
                Ok(())
            }
        }
    }
}

pub fn get<'a>(doc: &'a Value, path: &FieldPath) -> Option<&'a Value> {
    path.segments()
        .iter()
        .try_fold(doc, |cur, seg| cur.as_object()?.get(seg))
}

/// Set `path` to `value`, creating intermediate objects as needed.
pub fn set(doc: &mut Value, path: &FieldPath, value: Value) {
    let (last, parents) = path.segments().split_last().expect("non-empty path");
    let mut cur = doc;
    for seg in parents {
        if !cur.is_object() {
            *cur = Value::Object(Map::new());
        }
        cur = cur
            .as_object_mut()
            .expect("object")
            .entry(seg.clone())
            .or_insert_with(|| Value::Object(Map::new()));
    }
    if !cur.is_object() {
        *cur = Value::Object(Map::new());
    }
    cur.as_object_mut().expect("object").insert(last.clone(), value);
}
