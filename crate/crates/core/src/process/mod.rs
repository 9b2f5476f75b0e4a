//! Executable process definitions in the native `*.process.json` format.
//! A small BPMN 2.0 XML subset can be imported into the same structure.

mod bpmn;
pub mod guard;

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::canonical;
use crate::data::FieldPath;

pub use bpmn::import_bpmn_subset;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProcessError {
    #[error("syntax error at line {line}, column {column}: {message}")]
    Syntax {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("process `{process}`: {message}")]
    Structure { process: String, message: String },
    #[error("unsupported BPMN element `{0}`")]
    UnsupportedElement(String),
    #[error("malformed XML: {0}")]
    MalformedXml(String),
}

/// Variable mapping from a variation point's children to the parent.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Mapper {
    /// Field read from each completed child document.
    pub input: FieldPath,
    /// Map in the parent document collecting child values keyed by plugin id.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub results: Option<FieldPath>,
    /// Parent field receiving the aggregated value.
    pub output: FieldPath,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Node {
    StartEvent {
        id: String,
    },
    EndEvent {
        id: String,
    },
    ExclusiveGateway {
        id: String,
    },
    UserTask {
        id: String,
        form: String,
        #[serde(default)]
        outputs: Vec<FieldPath>,
    },
    AutomatedTask {
        id: String,
        handler: String,
        #[serde(default)]
        outputs: Vec<FieldPath>,
    },
    /// Multi-instance call of every plugin resolved for `registry_ref`.
    VariationPoint {
        id: String,
        registry_ref: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        aggregation_policy_ref: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        selection_variable_ref: Option<FieldPath>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        mapper: Option<Mapper>,
    },
}

impl Node {
    pub fn id(&self) -> &str {
        match self {
            Node::StartEvent { id }
            | Node::EndEvent { id }
            | Node::ExclusiveGateway { id }
            | Node::UserTask { id, .. }
            | Node::AutomatedTask { id, .. }
            | Node::VariationPoint { id, .. } => id,
        }
    }

    pub fn type_name(&self) -> &'static str {
        match self {
            Node::StartEvent { .. } => "start_event",
            Node::EndEvent { .. } => "end_event",
            Node::ExclusiveGateway { .. } => "exclusive_gateway",
            Node::UserTask { .. } => "user_task",
            Node::AutomatedTask { .. } => "automated_task",
            Node::VariationPoint { .. } => "variation_point",
        }
    }

    fn is_activity(&self) -> bool {
        matches!(self, Node::UserTask { .. } | Node::AutomatedTask { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Edge {
    pub from: String,
    pub to: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub guard: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProcessDefinition {
    pub id: String,
    /// Record the instance document is an instance of.
    pub data_root: String,
    pub nodes: Vec<Node>,
    pub edges: Vec<Edge>,
}

impl ProcessDefinition {
    /// Parse and structurally validate a native process document.
    pub fn parse(text: &str) -> Result<Self, ProcessError> {
        let def: ProcessDefinition = serde_json::from_str(text).map_err(|e| ProcessError::Syntax {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        def.validate()?;
        Ok(def)
    }

    pub fn to_json(&self) -> String {
        canonical::to_string(self).expect("process serializes")
    }

    /// Same definition with nodes sorted by id and edges sorted.
    pub fn canonical(&self) -> Self {
        let mut out = self.clone();
        out.nodes.sort_by(|a, b| a.id().cmp(b.id()));
        out.edges.sort();
        out
    }

    pub fn node(&self, id: &str) -> Option<&Node> {
        self.nodes.iter().find(|n| n.id() == id)
    }

    pub fn start(&self) -> &Node {
        self.nodes
            .iter()
            .find(|n| matches!(n, Node::StartEvent { .. }))
            .expect("validated definition has a start event")
    }

    pub fn outgoing<'a>(&'a self, node: &'a str) -> impl Iterator<Item = &'a Edge> + 'a {
        self.edges.iter().filter(move |e| e.from == node)
    }

    pub fn variation_points(&self) -> impl Iterator<Item = &Node> {
        self.nodes
            .iter()
            .filter(|n| matches!(n, Node::VariationPoint { .. }))
    }

    /// The single activity of an implementation process model
    /// (start, one user or automated task, end).
    pub fn implementation_activity(&self) -> Option<&Node> {
        if self.nodes.len() != 3 || self.edges.len() != 2 {
            return None;
        }
        let activity = self.nodes.iter().find(|n| n.is_activity())?;
        let start = self.start();
        let end = self.nodes.iter().find(|n| matches!(n, Node::EndEvent { .. }))?;
        let chain = self.edges.iter().any(|e| e.from == start.id() && e.to == activity.id())
            && self.edges.iter().any(|e| e.from == activity.id() && e.to == end.id());
        chain.then_some(activity)
    }

    fn err(&self, message: impl Into<String>) -> ProcessError {
        ProcessError::Structure {
            process: self.id.clone(),
            message: message.into(),
        }
    }

    pub fn validate(&self) -> Result<(), ProcessError> {
        if self.id.is_empty() {
            return Err(self.err("process id is empty"));
        }
        let mut ids = BTreeSet::new();
        for n in &self.nodes {
            if n.id().is_empty() || !ids.insert(n.id()) {
                return Err(self.err(format!("node id `{}` empty or duplicated", n.id())));
            }
        }
        let starts = self
            .nodes
            .iter()
            .filter(|n| matches!(n, Node::StartEvent { .. }))
            .count();
        if starts != 1 {
            return Err(self.err(format!("expected exactly one start event, found {starts}")));
        }
        let mut out_edges: BTreeMap<&str, Vec<&Edge>> = BTreeMap::new();
        let mut in_count: BTreeMap<&str, usize> = BTreeMap::new();
        for e in &self.edges {
            for end in [&e.from, &e.to] {
                if !ids.contains(end.as_str()) {
                    return Err(self.err(format!("edge references unknown node `{end}`")));
                }
            }
            out_edges.entry(&e.from).or_default().push(e);
            *in_count.entry(&e.to).or_default() += 1;
        }
        for n in &self.nodes {
            let outs = out_edges.get(n.id()).map(Vec::as_slice).unwrap_or(&[]);
            match n {
                Node::StartEvent { id } => {
                    if in_count.get(id.as_str()).copied().unwrap_or(0) != 0 {
                        return Err(self.err(format!("start event `{id}` has incoming flows")));
                    }
                    self.expect_single(id, outs)?;
                }
                Node::EndEvent { id } => {
                    if !outs.is_empty() {
                        return Err(self.err(format!("end event `{id}` has outgoing flows")));
                    }
                }
                Node::ExclusiveGateway { id } => self.check_gateway(id, outs)?,
                Node::UserTask { id, outputs, .. } | Node::AutomatedTask { id, outputs, .. } => {
                    let unique: BTreeSet<_> = outputs.iter().collect();
                    if unique.len() != outputs.len() {
                        return Err(self.err(format!("`{id}` declares an output twice")));
                    }
                    self.expect_single(id, outs)?
                }
                Node::VariationPoint { id, mapper, .. } => {
                    if let Some(m) = mapper {
                        if let Some(r) = &m.results {
                            if m.output.starts_with(r) {
                                return Err(self.err(format!(
                                    "`{id}` writes its output inside the results map"
                                )));
                            }
                        }
                    }
                    self.expect_single(id, outs)?
                }
            }
        }
        // reachability from start
        let start = self.start().id();
        let mut seen: BTreeSet<&str> = BTreeSet::from([start]);
        let mut queue = VecDeque::from([start]);
        while let Some(cur) = queue.pop_front() {
            for e in out_edges.get(cur).into_iter().flatten() {
                if seen.insert(&e.to) {
                    queue.push_back(&e.to);
                }
            }
        }
        if let Some(n) = self.nodes.iter().find(|n| !seen.contains(n.id())) {
            return Err(self.err(format!("node `{}` is unreachable from the start event", n.id())));
        }
        Ok(())
    }

    fn expect_single(&self, id: &str, outs: &[&Edge]) -> Result<(), ProcessError> {
        match outs {
            [e] if e.guard.is_none() => Ok(()),
            [_] => Err(self.err(format!("only gateway flows may carry guards (`{id}`)"))),
            _ => Err(self.err(format!(
                "`{id}` needs exactly one outgoing flow, found {}",
                outs.len()
            ))),
        }
    }

    fn check_gateway(&self, id: &str, outs: &[&Edge]) -> Result<(), ProcessError> {
        if outs.is_empty() {
            return Err(self.err(format!("gateway `{id}` has no outgoing flow")));
        }
        let defaults = outs.iter().filter(|e| e.guard.is_none()).count();
        if defaults > 1 {
            return Err(self.err(format!("gateway `{id}` has more than one default flow")));
        }
        let mut exprs = Vec::new();
        for e in outs.iter().filter_map(|e| e.guard.as_ref().map(|g| (e, g))) {
            let expr = guard::parse(e.1).map_err(|err| {
                self.err(format!("guard on `{}` -> `{}`: {err}", e.0.from, e.0.to))
            })?;
            exprs.push(expr);
        }
        let refs: Vec<&guard::Expr> = exprs.iter().collect();
        if refs.is_empty() {
            return Ok(());
        }
        guard::check_exclusive(&refs, defaults == 1)
            .map_err(|why| self.err(format!("gateway `{id}` guards are not exclusive: {why}")))
    }
}
