use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::{
    AccessMode, ConstraintKind, Configuration, FeatureModel, NodeKind, Optionality, Term,
};
use crate::data::FieldPath;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RuleId {
    UnknownIdentifier,
    MandatoryActivity,
    GroupCardinality,
    Requires,
    Excludes,
    ConditionalGroup,
    DataClosure,
    WriteBeforeRead,
}

impl fmt::Display for RuleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).expect("rule id serializes");
        f.write_str(s.as_str().expect("string"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub rule: RuleId,
    pub identifiers: Vec<String>,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub valid: bool,
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn violates(&self, rule: RuleId) -> bool {
        self.violations.iter().any(|v| v.rule == rule)
    }
}

struct Eval<'a> {
    model: &'a FeatureModel,
    cfg: &'a Configuration,
}

impl Eval<'_> {
    fn selected(&self, id: &str) -> bool {
        self.cfg.contains(id)
    }

    fn activity_active(&self, activity: &str) -> bool {
        let Some(node) = self.model.activity(activity) else {
            return false;
        };
        node.optionality == Optionality::Mandatory
            || node.children.iter().any(|leaf| self.selected(&leaf.id))
    }

    fn group_count(&self, group: &str) -> usize {
        self.model
            .group(group)
            .map(|g| g.members.iter().filter(|m| self.selected(m)).count())
            .unwrap_or(0)
    }

    fn term(&self, t: &Term) -> bool {
        match t {
            Term::Feature(id) if id == self.model.process_name() => true,
            Term::Feature(id) if self.model.activity(id).is_some() => self.activity_active(id),
            Term::Feature(id) => self.selected(id),
            Term::Count { group, op, value } => op.holds(self.group_count(group), *value),
        }
    }
}

/// Check `cfg` against every configuration rule of `model`.
///
/// Rules: mandatory activities have an implementation; group counts lie
/// within their cardinality when the owning activity is active; cross-tree
/// constraints hold; selected implementations have their optional data
/// selected; and every selected data item is written before it is read.
pub fn validate_configuration(model: &FeatureModel, cfg: &Configuration) -> ValidationReport {
    let ev = Eval { model, cfg };
    let mut violations = Vec::new();

    let unknown: Vec<String> = cfg
        .selected
        .iter()
        .filter(|id| model.leaf_kind(id).is_none() && !model.is_data_item(id))
        .cloned()
        .collect();
    if !unknown.is_empty() {
        violations.push(Violation {
            rule: RuleId::UnknownIdentifier,
            message: format!("not selectable in this model: {}", unknown.join(", ")),
            identifiers: unknown,
        });
    }

    for act in model.activities() {
        if act.optionality == Optionality::Mandatory
            && !act
                .children
                .iter()
                .any(|l| l.kind == NodeKind::Implementation && ev.selected(&l.id))
        {
            violations.push(Violation {
                rule: RuleId::MandatoryActivity,
                identifiers: vec![act.id.clone()],
                message: format!("mandatory activity `{}` has no selected implementation", act.id),
            });
        }
    }

    for g in model.groups() {
        if !ev.activity_active(&g.owner_activity) {
            continue;
        }
        let n = ev.group_count(&g.id);
        if !g.cardinality.contains(n) {
            violations.push(Violation {
                rule: RuleId::GroupCardinality,
                identifiers: vec![g.id.clone()],
                message: format!(
                    "group `{}` has {n} selected members, cardinality {}",
                    g.id, g.cardinality
                ),
            });
        }
    }

    for c in model.constraints() {
        let lhs = ev.term(&c.lhs);
        let rhs = ev.term(&c.rhs);
        let (ok, rule) = match c.kind {
            ConstraintKind::Requires => (!lhs || rhs, RuleId::Requires),
            ConstraintKind::Excludes => (!(lhs && rhs), RuleId::Excludes),
            ConstraintKind::ConditionalGroupRequires => (!lhs || rhs, RuleId::ConditionalGroup),
        };
        if !ok {
            violations.push(Violation {
                rule,
                identifiers: vec![c.lhs.to_string(), c.rhs.to_string()],
                message: format!("constraint `{c}` violated"),
            });
        }
    }

    let mut leaves: Vec<&str> = model
        .leaves()
        .filter(|l| l.kind == NodeKind::Implementation && ev.selected(&l.id))
        .map(|l| l.id.as_str())
        .collect();
    leaves.sort();
    for leaf in leaves {
        let missing: BTreeSet<String> = model
            .access_edges()
            .iter()
            .enumerate()
            .filter(|(_, e)| e.implementation == leaf)
            .flat_map(|(i, _)| model.edge_items(i))
            .map(ToString::to_string)
            .filter(|item| !ev.selected(item))
            .collect();
        if !missing.is_empty() {
            let mut ids = vec![leaf.to_string()];
            ids.extend(missing.iter().cloned());
            violations.push(Violation {
                rule: RuleId::DataClosure,
                message: format!(
                    "`{leaf}` accesses unselected data: {}",
                    missing.iter().cloned().collect::<Vec<_>>().join(", ")
                ),
                identifiers: ids,
            });
        }
    }

    for item in model.data_items() {
        let name = item.to_string();
        if !ev.selected(&name) {
            continue;
        }
        let accessors = |mode: AccessMode| -> Vec<&str> {
            let mut v: Vec<&str> = model
                .access_edges()
                .iter()
                .enumerate()
                .filter(|(i, e)| {
                    e.mode == mode
                        && ev.selected(&e.implementation)
                        && model.edge_items(*i).contains(item)
                })
                .map(|(_, e)| e.implementation.as_str())
                .collect();
            v.sort();
            v.dedup();
            v
        };
        let writers = accessors(AccessMode::Write);
        let readers = accessors(AccessMode::Read);
        let problem = if writers.is_empty() {
            Some("is never written by a selected implementation")
        } else if readers.is_empty() {
            Some("is never read by a selected implementation")
        } else if !writers.iter().any(|w| {
            let wa = &model.activity_of(w).expect("leaf").id;
            readers.iter().any(|r| model.precedes(wa, &model.activity_of(r).expect("leaf").id))
        }) {
            Some("is never written before it is read")
        } else {
            None
        };
        if let Some(problem) = problem {
            let mut ids = vec![name.clone()];
            ids.extend(writers.iter().chain(readers.iter()).map(|s| s.to_string()));
            violations.push(Violation {
                rule: RuleId::WriteBeforeRead,
                identifiers: ids,
                message: format!("data item `{name}` {problem}"),
            });
        }
    }

    ValidationReport {
        valid: violations.is_empty(),
        violations,
    }
}

/// Optional data items accessed by the selected implementations.
pub fn required_data_fields(model: &FeatureModel, cfg: &Configuration) -> BTreeSet<FieldPath> {
    model
        .access_edges()
        .iter()
        .enumerate()
        .filter(|(_, e)| cfg.contains(&e.implementation))
        .flat_map(|(i, _)| model.edge_items(i).iter().cloned())
        .collect()
}
