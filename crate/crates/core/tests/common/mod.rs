//! Generators and brute-force oracles shared by the integration tests.
#![allow(dead_code)]

pub mod criteria;
pub mod products;

use std::collections::BTreeSet;
use std::path::PathBuf;

use pailine::feature_model::{Configuration, FeatureModel, RuleId};
use rand::seq::SliceRandom;
use rand::Rng;
use serde_json::{json, Value};

pub fn pack_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/parking-permit")
}

#[derive(Debug, Clone)]
pub struct Group {
    pub id: String,
    pub aggregation: bool,
    pub members: Vec<String>,
    pub min: usize,
    pub max: usize,
}

#[derive(Debug, Clone)]
pub struct Activity {
    pub id: String,
    pub optional: bool,
    pub impls: Vec<String>,
    pub aggs: Vec<String>,
    pub groups: Vec<Group>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Op {
    Gt,
    Ge,
    Eq,
    Le,
    Lt,
}

impl Op {
    const ALL: [Op; 5] = [Op::Gt, Op::Ge, Op::Eq, Op::Le, Op::Lt];

    fn symbol(self) -> &'static str {
        match self {
            Op::Gt => ">",
            Op::Ge => ">=",
            Op::Eq => "=",
            Op::Le => "<=",
            Op::Lt => "<",
        }
    }

    fn holds(self, a: usize, b: usize) -> bool {
        match self {
            Op::Gt => a > b,
            Op::Ge => a >= b,
            Op::Eq => a == b,
            Op::Le => a <= b,
            Op::Lt => a < b,
        }
    }
}

#[derive(Debug, Clone)]
pub enum TermSpec {
    Leaf(String),
    Activity(usize),
    Count { group: String, op: Op, value: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Kind {
    Requires,
    Excludes,
    Conditional,
}

#[derive(Debug, Clone)]
pub struct Constraint {
    pub kind: Kind,
    pub lhs: TermSpec,
    pub rhs: TermSpec,
}

#[derive(Debug, Clone)]
pub struct Edge {
    pub implementation: String,
    pub path: &'static str,
    pub write: bool,
}

/// Data shape used by every random model: a root with optional string fields
/// `f0`, `f1` and an optional `extra` association whose record has a
/// mandatory `x` and an optional `y`.
#[derive(Debug, Clone)]
pub struct DataShape {
    pub root_fields: usize,
    pub extra: bool,
}

impl DataShape {
    pub fn items(&self) -> Vec<String> {
        let mut v: Vec<String> = (0..self.root_fields).map(|i| format!("f{i}")).collect();
        if self.extra {
            v.push("extra".into());
            v.push("extra.y".into());
        }
        v
    }

    fn paths(&self) -> Vec<&'static str> {
        let mut v = vec!["f0", "f1"][..self.root_fields].to_vec();
        if self.extra {
            v.extend(["extra.x", "extra.y"]);
        }
        v
    }

    /// Optional items an access to `path` touches.
    pub fn items_of(path: &str) -> Vec<String> {
        match path {
            "extra.x" => vec!["extra".into()],
            "extra.y" => vec!["extra".into(), "extra.y".into()],
            p => vec![p.to_string()],
        }
    }

    fn doc(&self) -> Value {
        let root_fields: Vec<Value> = (0..self.root_fields)
            .map(|i| json!({"name": format!("f{i}"), "type": "string", "optionality": "optional"}))
            .collect();
        let mut records = vec![json!({"name": "Root", "fields": root_fields})];
        let mut associations = vec![];
        if self.extra {
            records.push(json!({"name": "Extra", "fields": [
                {"name": "x", "type": "string", "optionality": "mandatory"},
                {"name": "y", "type": "string", "optionality": "optional"}]}));
            associations.push(json!({"owner": "Root", "member": "Extra", "optionality": "optional"}));
        }
        json!({"root": "Root", "records": records, "associations": associations})
    }
}

#[derive(Debug, Clone)]
pub struct RandomModel {
    pub activities: Vec<Activity>,
    pub constraints: Vec<Constraint>,
    pub flow: Option<Vec<(usize, usize)>>,
    pub data: DataShape,
    pub edges: Vec<Edge>,
}

fn term_json(t: &TermSpec, acts: &[Activity]) -> Value {
    match t {
        TermSpec::Leaf(id) => json!(id),
        TermSpec::Activity(i) => json!(acts[*i].id),
        TermSpec::Count { group, op, value } => json!({"group": group, "op": op.symbol(), "value": value}),
    }
}

impl RandomModel {
    /// At most `max_selectable` leaves plus data items.
    pub fn generate(rng: &mut impl Rng, max_selectable: usize) -> Self {
        let data = DataShape {
            root_fields: rng.gen_range(0..=2),
            extra: rng.gen_bool(0.4),
        };
        let mut budget = max_selectable - data.items().len();
        let n_acts = rng.gen_range(1..=4usize).min(budget);
        let mut activities = Vec::new();
        for a in 0..n_acts {
            let left_for_rest = n_acts - a - 1;
            let room = budget - left_for_rest;
            let n_impl = rng.gen_range(1..=3usize).min(room);
            let n_agg = if rng.gen_bool(0.3) { rng.gen_range(0..=2usize).min(room - n_impl) } else { 0 };
            budget -= n_impl + n_agg;
            let impls: Vec<String> = (0..n_impl).map(|i| format!("a{a}i{i}")).collect();
            let aggs: Vec<String> = (0..n_agg).map(|i| format!("a{a}g{i}")).collect();
            let mut groups = Vec::new();
            if rng.gen_bool(0.7) {
                let mut members = impls.clone();
                members.shuffle(rng);
                members.truncate(rng.gen_range(1..=impls.len()));
                members.sort();
                let min = rng.gen_range(0..=members.len());
                let max = rng.gen_range(min..=members.len());
                groups.push(Group { id: format!("G{a}I"), aggregation: false, members, min, max });
            }
            if !aggs.is_empty() && rng.gen_bool(0.7) {
                let min = rng.gen_range(0..=1);
                let max = rng.gen_range(min.max(1)..=aggs.len());
                groups.push(Group { id: format!("G{a}A"), aggregation: true, members: aggs.clone(), min, max });
            }
            activities.push(Activity { id: format!("A{a}"), optional: rng.gen_bool(0.4), impls, aggs, groups });
        }

        let leaves: Vec<String> = activities.iter().flat_map(|a| a.impls.iter().chain(&a.aggs)).cloned().collect();
        let groups: Vec<&Group> = activities.iter().flat_map(|a| &a.groups).collect();
        let mut constraints = Vec::new();
        for _ in 0..rng.gen_range(0..=3) {
            let feature = |rng: &mut dyn rand::RngCore| -> TermSpec {
                if rng.gen_bool(0.15) {
                    TermSpec::Activity(rng.gen_range(0..activities.len()))
                } else {
                    TermSpec::Leaf(leaves.choose(rng).unwrap().clone())
                }
            };
            let c = match rng.gen_range(0..3) {
                0 => Constraint { kind: Kind::Requires, lhs: feature(rng), rhs: feature(rng) },
                1 => Constraint { kind: Kind::Excludes, lhs: feature(rng), rhs: feature(rng) },
                _ if !groups.is_empty() => {
                    let count = |rng: &mut dyn rand::RngCore| TermSpec::Count {
                        group: groups.choose(rng).unwrap().id.clone(),
                        op: *Op::ALL.choose(rng).unwrap(),
                        value: rng.gen_range(0..=2),
                    };
                    Constraint { kind: Kind::Conditional, lhs: count(rng), rhs: count(rng) }
                }
                _ => continue,
            };
            constraints.push(c);
        }

        let flow = if rng.gen_bool(0.5) {
            None
        } else {
            // acyclic, but not necessarily in declaration order
            let mut order: Vec<usize> = (0..activities.len()).collect();
            order.shuffle(rng);
            let mut f = Vec::new();
            for x in 0..order.len() {
                for y in x + 1..order.len() {
                    if rng.gen_bool(0.4) {
                        f.push((order[x], order[y]));
                    }
                }
            }
            Some(f)
        };

        let paths = data.paths();
        let impls: Vec<&String> = activities.iter().flat_map(|a| &a.impls).collect();
        let mut edges = Vec::new();
        if !paths.is_empty() {
            for _ in 0..rng.gen_range(0..=5) {
                edges.push(Edge {
                    implementation: (*impls.choose(rng).unwrap()).clone(),
                    path: paths.choose(rng).unwrap(),
                    write: rng.gen_bool(0.5),
                });
            }
        }
        Self { activities, constraints, flow, data, edges }
    }

    pub fn doc(&self) -> Value {
        let acts = &self.activities;
        let activities: Vec<Value> = acts
            .iter()
            .enumerate()
            .map(|(i, a)| {
                let groups: Vec<Value> = a
                    .groups
                    .iter()
                    .map(|g| {
                        json!({"id": g.id,
                               "role": if g.aggregation { "aggregation_group" } else { "implementation_group" },
                               "members": g.members,
                               "cardinality": {"min": g.min, "max": g.max}})
                    })
                    .collect();
                json!({"id": a.id, "optionality": if a.optional { "optional" } else { "mandatory" },
                       "variation_point": format!("v{i}"), "implementations": a.impls,
                       "aggregation_codes": a.aggs, "groups": groups})
            })
            .collect();
        let constraints: Vec<Value> = self
            .constraints
            .iter()
            .map(|c| {
                let kind = match c.kind {
                    Kind::Requires => "requires",
                    Kind::Excludes => "excludes",
                    Kind::Conditional => "conditional_group_requires",
                };
                json!({"kind": kind, "lhs": term_json(&c.lhs, acts), "rhs": term_json(&c.rhs, acts)})
            })
            .collect();
        let edges: Vec<Value> = self
            .edges
            .iter()
            .map(|e| json!({"implementation": e.implementation, "field": e.path, "mode": if e.write { "write" } else { "read" }}))
            .collect();
        let mut doc = json!({"process": "P", "activities": activities, "constraints": constraints,
                             "data_schema": self.data.doc(), "access_edges": edges});
        if let Some(flow) = &self.flow {
            doc["flow"] = json!(flow.iter().map(|(a, b)| [&acts[*a].id, &acts[*b].id]).collect::<Vec<_>>());
        }
        doc
    }

    pub fn model(&self) -> FeatureModel {
        FeatureModel::parse(&self.doc().to_string()).unwrap_or_else(|e| panic!("generated model rejected: {e}\n{}", self.doc()))
    }

    /// Every selectable identifier: leaves then data items.
    pub fn selectable(&self) -> Vec<String> {
        let mut v: Vec<String> = self.activities.iter().flat_map(|a| a.impls.iter().chain(&a.aggs)).cloned().collect();
        v.extend(self.data.items());
        v
    }

    fn precedes(&self) -> Vec<Vec<bool>> {
        let n = self.activities.len();
        let mut p = vec![vec![false; n]; n];
        match &self.flow {
            None => {
                for i in 0..n {
                    for j in i + 1..n {
                        p[i][j] = true;
                    }
                }
            }
            Some(f) => {
                for &(a, b) in f {
                    p[a][b] = true;
                }
                for k in 0..n {
                    for i in 0..n {
                        for j in 0..n {
                            if p[i][k] && p[k][j] {
                                p[i][j] = true;
                            }
                        }
                    }
                }
            }
        }
        p
    }

    fn activity_of(&self, leaf: &str) -> usize {
        self.activities
            .iter()
            .position(|a| a.impls.iter().chain(&a.aggs).any(|l| l == leaf))
            .unwrap()
    }

    /// Violated rules, computed straight from the definitions.
    pub fn oracle(&self, sel: &BTreeSet<String>) -> BTreeSet<RuleId> {
        let mut out = BTreeSet::new();
        let active = |a: &Activity| !a.optional || a.impls.iter().chain(&a.aggs).any(|l| sel.contains(l));
        let count = |g: &str| -> usize {
            let g = self.activities.iter().flat_map(|a| &a.groups).find(|x| x.id == g).unwrap();
            g.members.iter().filter(|m| sel.contains(*m)).count()
        };
        let term = |t: &TermSpec| -> bool {
            match t {
                TermSpec::Leaf(id) => sel.contains(id),
                TermSpec::Activity(i) => active(&self.activities[*i]),
                TermSpec::Count { group, op, value } => op.holds(count(group), *value),
            }
        };
        for a in &self.activities {
            if !a.optional && !a.impls.iter().any(|l| sel.contains(l)) {
                out.insert(RuleId::MandatoryActivity);
            }
            if active(a) {
                for g in &a.groups {
                    let n = count(&g.id);
                    if n < g.min || n > g.max {
                        out.insert(RuleId::GroupCardinality);
                    }
                }
            }
        }
        for c in &self.constraints {
            let (l, r) = (term(&c.lhs), term(&c.rhs));
            match c.kind {
                Kind::Requires if l && !r => out.insert(RuleId::Requires),
                Kind::Excludes if l && r => out.insert(RuleId::Excludes),
                Kind::Conditional if l && !r => out.insert(RuleId::ConditionalGroup),
                _ => false,
            };
        }
        for e in &self.edges {
            if sel.contains(&e.implementation) && DataShape::items_of(e.path).iter().any(|i| !sel.contains(i)) {
                out.insert(RuleId::DataClosure);
            }
        }
        let prec = self.precedes();
        for item in self.data.items() {
            if !sel.contains(&item) {
                continue;
            }
            let who = |write: bool| -> Vec<usize> {
                self.edges
                    .iter()
                    .filter(|e| e.write == write && sel.contains(&e.implementation))
                    .filter(|e| DataShape::items_of(e.path).contains(&item))
                    .map(|e| self.activity_of(&e.implementation))
                    .collect()
            };
            let (w, r) = (who(true), who(false));
            if !w.iter().any(|&a| r.iter().any(|&b| prec[a][b])) {
                out.insert(RuleId::WriteBeforeRead);
            }
        }
        out
    }

    /// All subsets of the selectable identifiers the oracle accepts.
    pub fn oracle_valid(&self) -> Vec<BTreeSet<String>> {
        let ids = self.selectable();
        subsets(&ids).filter(|s| self.oracle(s).is_empty()).collect()
    }
}

pub fn subsets(ids: &[String]) -> impl Iterator<Item = BTreeSet<String>> + '_ {
    (0u64..1 << ids.len()).map(move |mask| {
        ids.iter()
            .enumerate()
            .filter(|(i, _)| mask & (1 << i) != 0)
            .map(|(_, s)| s.clone())
            .collect()
    })
}

pub fn config_of(sel: &BTreeSet<String>) -> Configuration {
    Configuration::new(sel.iter().cloned())
}

/// (i, j, selected_i, selected_j) for i < j.
pub fn pairs(ids: &[String], sel: &BTreeSet<String>) -> Vec<(usize, usize, bool, bool)> {
    let mut out = Vec::new();
    for i in 0..ids.len() {
        for j in i + 1..ids.len() {
            out.push((i, j, sel.contains(&ids[i]), sel.contains(&ids[j])));
        }
    }
    out
}
