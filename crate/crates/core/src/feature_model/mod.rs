//! Three-layer process feature models.
//!
//! A model has a process root, a layer of activities, and a layer of leaves
//! (activity implementations and aggregation codes). Leaves are organised in
//! cardinality groups and linked by cross-tree constraints. Optional parts of
//! the process data structure are selectable items too, and implementations
//! declare read/write access to them.

mod enumerate;
mod rules;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::canonical;
use crate::data::FieldPath;

pub use enumerate::{enumerate_configurations, sample_pairwise, EnumerateError};
pub use rules::{required_data_fields, validate_configuration, RuleId, ValidationReport, Violation};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ModelError {
    #[error("syntax error at line {line}, column {column}: {message}")]
    Syntax {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("unknown identifier `{id}` at {at}")]
    UnknownIdentifier { id: String, at: String },
    #[error("layer structure violation at {at}: {message}")]
    Structure { at: String, message: String },
}

impl ModelError {
    fn structure(at: impl Into<String>, message: impl Into<String>) -> Self {
        ModelError::Structure {
            at: at.into(),
            message: message.into(),
        }
    }

    fn unknown(id: impl Into<String>, at: impl Into<String>) -> Self {
        ModelError::UnknownIdentifier {
            id: id.into(),
            at: at.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optionality {
    Mandatory,
    Optional,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    Process,
    Activity,
    Implementation,
    AggregationCode,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeatureNode {
    pub id: String,
    pub kind: NodeKind,
    pub optionality: Optionality,
    pub children: Vec<FeatureNode>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupRole {
    ImplementationGroup,
    AggregationGroup,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Cardinality {
    pub min: usize,
    pub max: usize,
}

impl Cardinality {
    pub fn contains(&self, n: usize) -> bool {
        self.min <= n && n <= self.max
    }
}

impl fmt::Display for Cardinality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "<{}-{}>", self.min, self.max)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureGroup {
    pub id: String,
    #[serde(default, skip_serializing)]
    pub owner_activity: String,
    pub role: GroupRole,
    pub members: Vec<String>,
    pub cardinality: Cardinality,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CountOp {
    #[serde(rename = ">")]
    Gt,
    #[serde(rename = ">=")]
    Ge,
    #[serde(rename = "=")]
    Eq,
    #[serde(rename = "<=")]
    Le,
    #[serde(rename = "<")]
    Lt,
}

impl CountOp {
    pub fn holds(self, lhs: usize, rhs: usize) -> bool {
        match self {
            CountOp::Gt => lhs > rhs,
            CountOp::Ge => lhs >= rhs,
            CountOp::Eq => lhs == rhs,
            CountOp::Le => lhs <= rhs,
            CountOp::Lt => lhs < rhs,
        }
    }

    fn symbol(self) -> &'static str {
        match self {
            CountOp::Gt => ">",
            CountOp::Ge => ">=",
            CountOp::Eq => "=",
            CountOp::Le => "<=",
            CountOp::Lt => "<",
        }
    }
}

/// One side of a cross-tree constraint: a feature or a group-count predicate.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Term {
    Feature(String),
    Count {
        group: String,
        op: CountOp,
        value: usize,
    },
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Term::Feature(id) => f.write_str(id),
            Term::Count { group, op, value } => write!(f, "#{group} {} {value}", op.symbol()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstraintKind {
    Requires,
    Excludes,
    ConditionalGroupRequires,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CrossTreeConstraint {
    pub kind: ConstraintKind,
    pub lhs: Term,
    pub rhs: Term,
}

impl fmt::Display for CrossTreeConstraint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            ConstraintKind::Requires => write!(f, "{} requires {}", self.lhs, self.rhs),
            ConstraintKind::Excludes => write!(f, "{} excludes {}", self.lhs, self.rhs),
            ConstraintKind::ConditionalGroupRequires => {
                write!(f, "{} ? requires {}", self.lhs, self.rhs)
            }
        }
    }
}

/// Constraint as written in a model document: either explicit `lhs`/`rhs`
/// or a `label` such as `#check.I > 1 ? requires #check.A = 1`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstraintDoc {
    pub kind: ConstraintKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lhs: Option<Term>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rhs: Option<Term>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldDecl {
    pub name: String,
    #[serde(rename = "type")]
    pub type_name: String,
    pub optionality: Optionality,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecordDecl {
    pub name: String,
    #[serde(default)]
    pub fields: Vec<FieldDecl>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AssociationDecl {
    pub owner: String,
    pub member: String,
    /// Path segment; defaults to the member record name in lower camel case.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub optionality: Optionality,
}

impl AssociationDecl {
    pub fn segment(&self) -> String {
        self.name.clone().unwrap_or_else(|| lower_camel(&self.member))
    }
}

fn lower_camel(s: &str) -> String {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) => c.to_ascii_lowercase().to_string() + chars.as_str(),
        None => String::new(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSchemaDecl {
    #[serde(default)]
    pub root: String,
    #[serde(default)]
    pub records: Vec<RecordDecl>,
    #[serde(default)]
    pub associations: Vec<AssociationDecl>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AccessMode {
    Read,
    Write,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataAccessEdge {
    pub implementation: String,
    pub field: FieldPath,
    pub mode: AccessMode,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActivityDoc {
    pub id: String,
    pub optionality: Optionality,
    /// Runtime variation point the activity's implementations register with.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variation_point: Option<String>,
    pub implementations: Vec<String>,
    #[serde(default)]
    pub aggregation_codes: Vec<String>,
    #[serde(default)]
    pub groups: Vec<FeatureGroup>,
}

/// On-disk form of a feature model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureModelDoc {
    pub process: String,
    pub activities: Vec<ActivityDoc>,
    /// Control-flow precedence between activities. When absent the
    /// activities run in declaration order.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flow: Option<Vec<(String, String)>>,
    #[serde(default)]
    pub constraints: Vec<ConstraintDoc>,
    #[serde(default)]
    pub data_schema: DataSchemaDecl,
    #[serde(default)]
    pub access_edges: Vec<DataAccessEdge>,
}

/// A feature selection: implementation and aggregation-code leaves plus
/// optional data field paths.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Configuration {
    pub selected: BTreeSet<String>,
}

impl Configuration {
    pub fn new<I, S>(items: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self {
            selected: items.into_iter().map(Into::into).collect(),
        }
    }

    pub fn contains(&self, id: &str) -> bool {
        self.selected.contains(id)
    }

    pub fn parse(text: &str) -> Result<Self, ModelError> {
        serde_json::from_str(text).map_err(syntax_error)
    }

    pub fn to_json(&self) -> String {
        canonical::to_string(self).expect("configuration serializes")
    }
}

impl fmt::Display for Configuration {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let items: Vec<&str> = self.selected.iter().map(String::as_str).collect();
        write!(f, "{{{}}}", items.join(", "))
    }
}

fn syntax_error(e: serde_json::Error) -> ModelError {
    ModelError::Syntax {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Index {
    activity_pos: BTreeMap<String, usize>,
    leaf_activity: BTreeMap<String, usize>,
    leaf_kind: BTreeMap<String, NodeKind>,
    group_pos: BTreeMap<String, usize>,
    data_items: Vec<FieldPath>,
    /// precedes[a][b]: activity a strictly precedes activity b.
    precedes: Vec<Vec<bool>>,
    /// Optional data items touched by each access edge.
    edge_items: Vec<Vec<FieldPath>>,
}

/// A validated process feature model.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeatureModel {
    doc: FeatureModelDoc,
    root: FeatureNode,
    groups: Vec<FeatureGroup>,
    constraints: Vec<CrossTreeConstraint>,
    index: Index,
}

fn check_identifier(id: &str, at: &str) -> Result<(), ModelError> {
    if id.is_empty() || id.chars().any(|c| c.is_whitespace() || c == '#' || c == '"') {
        return Err(ModelError::structure(at, format!("invalid identifier `{id}`")));
    }
    Ok(())
}

impl FeatureModel {
    pub fn parse(text: &str) -> Result<Self, ModelError> {
        let doc: FeatureModelDoc = serde_json::from_str(text).map_err(syntax_error)?;
        Self::from_doc(doc)
    }

    pub fn from_doc(mut doc: FeatureModelDoc) -> Result<Self, ModelError> {
        check_identifier(&doc.process, "/process")?;
        if doc.activities.is_empty() {
            return Err(ModelError::structure(
                "/activities",
                "a process needs at least one activity",
            ));
        }

        let mut seen: BTreeSet<String> = BTreeSet::from([doc.process.clone()]);
        let mut claim = |id: &str, at: &str| -> Result<(), ModelError> {
            check_identifier(id, at)?;
            if !seen.insert(id.to_string()) {
                return Err(ModelError::structure(at, format!("identifier `{id}` declared twice")));
            }
            Ok(())
        };

        let mut activity_pos = BTreeMap::new();
        let mut leaf_activity = BTreeMap::new();
        let mut leaf_kind = BTreeMap::new();
        let mut group_pos = BTreeMap::new();
        let mut groups = Vec::new();
        let mut activities = Vec::new();

        for (ai, act) in doc.activities.iter_mut().enumerate() {
            let at = format!("/activities/{ai}");
            claim(&act.id, &format!("{at}/id"))?;
            activity_pos.insert(act.id.clone(), ai);
            if act.implementations.is_empty() {
                return Err(ModelError::structure(
                    format!("{at}/implementations"),
                    format!("activity `{}` has no implementation leaves", act.id),
                ));
            }
            if let Some(vp) = &act.variation_point {
                check_identifier(vp, &format!("{at}/variation_point"))?;
            }
            let mut children = Vec::new();
            for (li, leaf) in act.implementations.iter().enumerate() {
                claim(leaf, &format!("{at}/implementations/{li}"))?;
                leaf_activity.insert(leaf.clone(), ai);
                leaf_kind.insert(leaf.clone(), NodeKind::Implementation);
                children.push(FeatureNode {
                    id: leaf.clone(),
                    kind: NodeKind::Implementation,
                    optionality: Optionality::Optional,
                    children: Vec::new(),
                });
            }
            for (li, leaf) in act.aggregation_codes.iter().enumerate() {
                claim(leaf, &format!("{at}/aggregation_codes/{li}"))?;
                leaf_activity.insert(leaf.clone(), ai);
                leaf_kind.insert(leaf.clone(), NodeKind::AggregationCode);
                children.push(FeatureNode {
                    id: leaf.clone(),
                    kind: NodeKind::AggregationCode,
                    optionality: Optionality::Optional,
                    children: Vec::new(),
                });
            }
            let mut grouped = BTreeSet::new();
            for (gi, group) in act.groups.iter_mut().enumerate() {
                let gat = format!("{at}/groups/{gi}");
                claim(&group.id, &format!("{gat}/id"))?;
                group.owner_activity = act.id.clone();
                if group.members.is_empty() {
                    return Err(ModelError::structure(&gat, "group has no members"));
                }
                let want = match group.role {
                    GroupRole::ImplementationGroup => NodeKind::Implementation,
                    GroupRole::AggregationGroup => NodeKind::AggregationCode,
                };
                for (mi, m) in group.members.iter().enumerate() {
                    let mat = format!("{gat}/members/{mi}");
                    match leaf_kind.get(m) {
                        None => return Err(ModelError::unknown(m, mat)),
                        Some(_) if leaf_activity[m] != ai => {
                            return Err(ModelError::structure(
                                mat,
                                format!("`{m}` belongs to another activity"),
                            ))
                        }
                        Some(k) if *k != want => {
                            return Err(ModelError::structure(
                                mat,
                                format!("`{m}` does not match the group role"),
                            ))
                        }
                        Some(_) => {}
                    }
                    if !grouped.insert(m.clone()) {
                        return Err(ModelError::structure(
                            mat,
                            format!("`{m}` belongs to more than one group"),
                        ));
                    }
                }
                let c = group.cardinality;
                if c.min > c.max || c.max > group.members.len() {
                    return Err(ModelError::structure(
                        format!("{gat}/cardinality"),
                        format!("cardinality {c} invalid for {} members", group.members.len()),
                    ));
                }
                group_pos.insert(group.id.clone(), groups.len());
                groups.push(group.clone());
            }
            activities.push(FeatureNode {
                id: act.id.clone(),
                kind: NodeKind::Activity,
                optionality: act.optionality,
                children,
            });
        }

        let root = FeatureNode {
            id: doc.process.clone(),
            kind: NodeKind::Process,
            optionality: Optionality::Mandatory,
            children: activities,
        };

        // Data schema: fill association names, collect optional items.
        for a in doc.data_schema.associations.iter_mut() {
            if a.name.is_none() {
                a.name = Some(lower_camel(&a.member));
            }
        }
        let data = SchemaWalk::new(&doc.data_schema)?;
        let data_items = data.optional_items.clone();
        let data_item_set: BTreeSet<String> = data_items.iter().map(ToString::to_string).collect();

        let mut constraints = Vec::new();
        let mut normalized = Vec::new();
        for (ci, c) in doc.constraints.iter().enumerate() {
            let at = format!("/constraints/{ci}");
            let (lhs, rhs) = match (&c.lhs, &c.rhs, &c.label) {
                (Some(l), Some(r), None) => (l.clone(), r.clone()),
                (None, None, Some(label)) => parse_label(label)
                    .map_err(|m| ModelError::structure(format!("{at}/label"), m))?,
                _ => {
                    return Err(ModelError::structure(
                        &at,
                        "constraint needs either lhs and rhs, or a label",
                    ))
                }
            };
            for (side, term) in [("lhs", &lhs), ("rhs", &rhs)] {
                let tat = format!("{at}/{side}");
                match term {
                    Term::Feature(id) => {
                        if c.kind == ConstraintKind::ConditionalGroupRequires {
                            return Err(ModelError::structure(
                                tat,
                                "conditional group constraint needs count predicates",
                            ));
                        }
                        if !seen.contains(id) && !data_item_set.contains(id) {
                            return Err(ModelError::unknown(id, tat));
                        }
                    }
                    Term::Count { group, .. } => {
                        if !group_pos.contains_key(group) {
                            return Err(ModelError::unknown(group, tat));
                        }
                    }
                }
            }
            normalized.push(ConstraintDoc {
                kind: c.kind,
                lhs: Some(lhs.clone()),
                rhs: Some(rhs.clone()),
                label: None,
            });
            constraints.push(CrossTreeConstraint {
                kind: c.kind,
                lhs,
                rhs,
            });
        }
        doc.constraints = normalized;

        let mut edge_items = Vec::new();
        for (ei, e) in doc.access_edges.iter().enumerate() {
            let at = format!("/access_edges/{ei}");
            match leaf_kind.get(&e.implementation) {
                None => return Err(ModelError::unknown(&e.implementation, format!("{at}/implementation"))),
                Some(NodeKind::Implementation) => {}
                Some(_) => {
                    return Err(ModelError::structure(
                        format!("{at}/implementation"),
                        format!("`{}` is not an implementation leaf", e.implementation),
                    ))
                }
            }
            let items = data
                .resolve(&e.field)
                .ok_or_else(|| ModelError::unknown(e.field.to_string(), format!("{at}/field")))?;
            edge_items.push(items);
        }

        let n = doc.activities.len();
        let mut direct = vec![vec![false; n]; n];
        match &doc.flow {
            Some(flow) => {
                for (fi, (a, b)) in flow.iter().enumerate() {
                    let pos = |id: &String, side: usize| {
                        activity_pos
                            .get(id)
                            .copied()
                            .ok_or_else(|| ModelError::unknown(id, format!("/flow/{fi}/{side}")))
                    };
                    direct[pos(a, 0)?][pos(b, 1)?] = true;
                }
            }
            None => {
                for i in 1..n {
                    direct[i - 1][i] = true;
                }
            }
        }
        let precedes = transitive_closure(direct);

        let index = Index {
            activity_pos,
            leaf_activity,
            leaf_kind,
            group_pos,
            data_items,
            precedes,
            edge_items,
        };
        Ok(Self {
            doc,
            root,
            groups,
            constraints,
            index,
        })
    }

    pub fn to_doc(&self) -> FeatureModelDoc {
        self.doc.clone()
    }

    /// Canonical JSON text of the model.
    pub fn emit(&self) -> String {
        canonical::to_string(&self.doc).expect("model serializes")
    }

    pub fn process_name(&self) -> &str {
        &self.root.id
    }

    pub fn root(&self) -> &FeatureNode {
        &self.root
    }

    pub fn activities(&self) -> &[FeatureNode] {
        &self.root.children
    }

    pub fn activity(&self, id: &str) -> Option<&FeatureNode> {
        self.index.activity_pos.get(id).map(|&i| &self.root.children[i])
    }

    pub fn variation_point_of(&self, activity: &str) -> Option<&str> {
        let i = *self.index.activity_pos.get(activity)?;
        self.doc.activities[i].variation_point.as_deref()
    }

    pub fn groups(&self) -> &[FeatureGroup] {
        &self.groups
    }

    pub fn group(&self, id: &str) -> Option<&FeatureGroup> {
        self.index.group_pos.get(id).map(|&i| &self.groups[i])
    }

    pub fn constraints(&self) -> &[CrossTreeConstraint] {
        &self.constraints
    }

    pub fn data_schema(&self) -> &DataSchemaDecl {
        &self.doc.data_schema
    }

    pub fn access_edges(&self) -> &[DataAccessEdge] {
        &self.doc.access_edges
    }

    /// Optional data items reached by an access edge.
    pub(crate) fn edge_items(&self, edge: usize) -> &[FieldPath] {
        &self.index.edge_items[edge]
    }

    /// Selectable optional data item paths, sorted.
    pub fn data_items(&self) -> &[FieldPath] {
        &self.index.data_items
    }

    pub fn is_data_item(&self, id: &str) -> bool {
        self.index.data_items.iter().any(|p| p.to_string() == id)
    }

    pub fn leaves(&self) -> impl Iterator<Item = &FeatureNode> {
        self.root.children.iter().flat_map(|a| a.children.iter())
    }

    pub fn leaf_kind(&self, id: &str) -> Option<NodeKind> {
        self.index.leaf_kind.get(id).copied()
    }

    pub fn activity_of(&self, leaf: &str) -> Option<&FeatureNode> {
        self.index
            .leaf_activity
            .get(leaf)
            .map(|&i| &self.root.children[i])
    }

    /// All selectable identifiers: leaves and optional data items, sorted.
    pub fn items(&self) -> Vec<String> {
        let mut out: Vec<String> = self.index.leaf_kind.keys().cloned().collect();
        out.extend(self.index.data_items.iter().map(ToString::to_string));
        out.sort();
        out
    }

    /// True when activity `a` strictly precedes activity `b` in the control flow.
    pub fn precedes(&self, a: &str, b: &str) -> bool {
        match (self.index.activity_pos.get(a), self.index.activity_pos.get(b)) {
            (Some(&i), Some(&j)) => self.index.precedes[i][j],
            _ => false,
        }
    }

    pub fn is_known(&self, id: &str) -> bool {
        id == self.root.id
            || self.index.activity_pos.contains_key(id)
            || self.index.leaf_kind.contains_key(id)
            || self.is_data_item(id)
    }
}

fn transitive_closure(mut m: Vec<Vec<bool>>) -> Vec<Vec<bool>> {
    let n = m.len();
    for k in 0..n {
        for i in 0..n {
            if m[i][k] {
                for j in 0..n {
                    if m[k][j] {
                        m[i][j] = true;
                    }
                }
            }
        }
    }
    m
}

/// Resolves data paths against a `DataSchemaDecl`.
struct SchemaWalk<'a> {
    decl: &'a DataSchemaDecl,
    optional_items: Vec<FieldPath>,
}

enum Step<'a> {
    Field(&'a FieldDecl),
    Association(&'a AssociationDecl),
}

impl<'a> SchemaWalk<'a> {
    fn new(decl: &'a DataSchemaDecl) -> Result<Self, ModelError> {
        let mut names = BTreeSet::new();
        for (ri, r) in decl.records.iter().enumerate() {
            check_identifier(&r.name, &format!("/data_schema/records/{ri}/name"))?;
            if !names.insert(r.name.as_str()) {
                return Err(ModelError::structure(
                    format!("/data_schema/records/{ri}/name"),
                    format!("record `{}` declared twice", r.name),
                ));
            }
            let mut fields = BTreeSet::new();
            for (fi, f) in r.fields.iter().enumerate() {
                if !fields.insert(f.name.as_str()) {
                    return Err(ModelError::structure(
                        format!("/data_schema/records/{ri}/fields/{fi}"),
                        format!("field `{}` declared twice", f.name),
                    ));
                }
            }
        }
        for (ai, a) in decl.associations.iter().enumerate() {
            let at = format!("/data_schema/associations/{ai}");
            for (side, rec) in [("owner", &a.owner), ("member", &a.member)] {
                if !names.contains(rec.as_str()) {
                    return Err(ModelError::unknown(rec, format!("{at}/{side}")));
                }
            }
            let seg = a.segment();
            let owner = decl.records.iter().find(|r| r.name == a.owner).expect("checked");
            let clash = owner.fields.iter().any(|f| f.name == seg)
                || decl
                    .associations
                    .iter()
                    .take(ai)
                    .any(|b| b.owner == a.owner && b.segment() == seg);
            if clash {
                return Err(ModelError::structure(
                    at,
                    format!("`{}.{seg}` declared twice", a.owner),
                ));
            }
        }
        if decl.records.is_empty() {
            if !decl.root.is_empty() {
                return Err(ModelError::unknown(&decl.root, "/data_schema/root"));
            }
            return Ok(Self {
                decl,
                optional_items: Vec::new(),
            });
        }
        if !names.contains(decl.root.as_str()) {
            return Err(ModelError::unknown(&decl.root, "/data_schema/root"));
        }
        let mut walk = Self {
            decl,
            optional_items: Vec::new(),
        };
        let mut items = Vec::new();
        walk.collect(&decl.root, None, &mut vec![decl.root.clone()], &mut items)?;
        items.sort();
        walk.optional_items = items;
        Ok(walk)
    }

    fn steps(&self, record: &str) -> Vec<(String, Step<'a>)> {
        let mut out = Vec::new();
        if let Some(r) = self.decl.records.iter().find(|r| r.name == record) {
            out.extend(r.fields.iter().map(|f| (f.name.clone(), Step::Field(f))));
        }
        out.extend(
            self.decl
                .associations
                .iter()
                .filter(|a| a.owner == record)
                .map(|a| (a.segment(), Step::Association(a))),
        );
        out
    }

    fn collect(
        &self,
        record: &str,
        prefix: Option<&FieldPath>,
        stack: &mut Vec<String>,
        out: &mut Vec<FieldPath>,
    ) -> Result<(), ModelError> {
        for (seg, step) in self.steps(record) {
            let path = match prefix {
                Some(p) => p.child(seg),
                None => FieldPath::from_segments([seg]),
            };
            match step {
                Step::Field(f) => {
                    if f.optionality == Optionality::Optional {
                        out.push(path);
                    }
                }
                Step::Association(a) => {
                    if stack.contains(&a.member) {
                        return Err(ModelError::structure(
                            "/data_schema/associations",
                            format!("cyclic association through `{}`", a.member),
                        ));
                    }
                    if a.optionality == Optionality::Optional {
                        out.push(path.clone());
                    }
                    stack.push(a.member.clone());
                    self.collect(&a.member, Some(&path), stack, out)?;
                    stack.pop();
                }
            }
        }
        Ok(())
    }

    /// Optional items along `path`, or `None` if it does not resolve.
    fn resolve(&self, path: &FieldPath) -> Option<Vec<FieldPath>> {
        let mut record = self.decl.root.clone();
        let mut items = Vec::new();
        let segs = path.segments();
        for (i, seg) in segs.iter().enumerate() {
            let prefix = FieldPath::from_segments(segs[..=i].iter().cloned());
            let (_, step) = self.steps(&record).into_iter().find(|(s, _)| s == seg)?;
            match step {
                Step::Field(f) => {
                    if i + 1 != segs.len() {
                        return None;
                    }
                    if f.optionality == Optionality::Optional {
                        items.push(prefix);
                    }
                }
                Step::Association(a) => {
                    if a.optionality == Optionality::Optional {
                        items.push(prefix);
                    }
                    record = a.member.clone();
                }
            }
        }
        Some(items)
    }
}

/// Parses `#G1 op n ? requires #G2 op m`.
fn parse_label(label: &str) -> Result<(Term, Term), String> {
    let (lhs, rhs) = label
        .split_once("requires")
        .ok_or_else(|| format!("label `{label}` lacks `requires`"))?;
    let lhs = lhs.trim().trim_end_matches('?').trim();
    Ok((parse_count(lhs)?, parse_count(rhs.trim())?))
}

fn parse_count(text: &str) -> Result<Term, String> {
    let body = text
        .strip_prefix('#')
        .ok_or_else(|| format!("`{text}` is not a group count predicate"))?;
    let op_at = body
        .find(['<', '>', '='])
        .ok_or_else(|| format!("`{text}` lacks a comparison"))?;
    let group = body[..op_at].trim().to_string();
    let rest = &body[op_at..];
    let (op, rest) = [
        (">=", CountOp::Ge),
        ("<=", CountOp::Le),
        ("==", CountOp::Eq),
        (">", CountOp::Gt),
        ("<", CountOp::Lt),
        ("=", CountOp::Eq),
    ]
    .into_iter()
    .find_map(|(sym, op)| rest.strip_prefix(sym).map(|r| (op, r)))
    .expect("found comparison char");
    let value = rest
        .trim()
        .parse::<usize>()
        .map_err(|_| format!("`{text}` needs a non-negative integer bound"))?;
    if group.is_empty() {
        return Err(format!("`{text}` names no group"));
    }
    Ok(Term::Count { group, op, value })
}
