//! Aggregation code: consolidates the results of several implementations of
//! one variation point into a single parent value.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AggregationPolicyId {
    /// Pass the only child's value through.
    Single,
    /// True iff every child result is true.
    Unanimous,
    /// False as soon as one child result is false.
    Veto,
    /// True iff strictly more than half of the child results are true.
    Majority,
}

impl AggregationPolicyId {
    pub const ALL: [AggregationPolicyId; 4] = [
        AggregationPolicyId::Single,
        AggregationPolicyId::Unanimous,
        AggregationPolicyId::Veto,
        AggregationPolicyId::Majority,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AggregationPolicyId::Single => "single",
            AggregationPolicyId::Unanimous => "unanimous",
            AggregationPolicyId::Veto => "veto",
            AggregationPolicyId::Majority => "majority",
        }
    }
}

impl fmt::Display for AggregationPolicyId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AggregationPolicyId {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| format!("unknown aggregation policy `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AggregateError {
    #[error("policy `{policy}` cannot aggregate {count} results")]
    Arity {
        policy: AggregationPolicyId,
        count: usize,
    },
}

/// Outcome of an aggregation, including which inputs vetoed it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Verdict {
    pub value: bool,
    /// Indices of false inputs (the vetoing children for `veto`).
    pub dissenting: Vec<usize>,
}

pub fn aggregate(policy: AggregationPolicyId, results: &[bool]) -> Result<bool, AggregateError> {
    verdict(policy, results).map(|v| v.value)
}

pub fn verdict(policy: AggregationPolicyId, results: &[bool]) -> Result<Verdict, AggregateError> {
    let arity = AggregateError::Arity {
        policy,
        count: results.len(),
    };
    if results.is_empty() {
        return Err(arity);
    }
    let dissenting: Vec<usize> = results
        .iter()
        .enumerate()
        .filter(|(_, r)| !**r)
        .map(|(i, _)| i)
        .collect();
    let value = match policy {
        AggregationPolicyId::Single if results.len() != 1 => return Err(arity),
        AggregationPolicyId::Single => results[0],
        AggregationPolicyId::Unanimous => results.iter().all(|r| *r),
        AggregationPolicyId::Veto => dissenting.is_empty(),
        AggregationPolicyId::Majority => {
            let yes = results.len() - dissenting.len();
            2 * yes > results.len()
        }
    };
    Ok(Verdict { value, dissenting })
}
