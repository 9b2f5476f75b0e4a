use std::collections::BTreeSet;

use thiserror::Error;

use super::{validate_configuration, Configuration, FeatureModel, NodeKind, Optionality};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EnumerateError {
    #[error("limit must be at least 1")]
    ZeroLimit,
    #[error("the model has no valid configuration")]
    NoValidConfiguration,
}

/// Leaf subsets of one activity that satisfy the activity-local rules.
fn activity_choices(model: &FeatureModel, activity: usize) -> Vec<Vec<String>> {
    let act = &model.activities()[activity];
    let leaves: Vec<&str> = act.children.iter().map(|l| l.id.as_str()).collect();
    let groups: Vec<_> = model
        .groups()
        .iter()
        .filter(|g| g.owner_activity == act.id)
        .collect();
    let mut out = Vec::new();
    for mask in 0u64..(1u64 << leaves.len()) {
        let chosen: BTreeSet<&str> = leaves
            .iter()
            .enumerate()
            .filter(|(i, _)| mask & (1 << i) != 0)
            .map(|(_, l)| *l)
            .collect();
        let has_impl = act
            .children
            .iter()
            .any(|l| l.kind == NodeKind::Implementation && chosen.contains(l.id.as_str()));
        if act.optionality == Optionality::Mandatory && !has_impl {
            continue;
        }
        let active = act.optionality == Optionality::Mandatory || !chosen.is_empty();
        let groups_ok = !active
            || groups.iter().all(|g| {
                let n = g.members.iter().filter(|m| chosen.contains(m.as_str())).count();
                g.cardinality.contains(n)
            });
        if groups_ok {
            out.push(chosen.into_iter().map(str::to_string).collect());
        }
    }
    out
}

/// All valid configurations in lexicographic order of their sorted
/// identifier lists, truncated at `limit`.
pub fn enumerate_configurations(
    model: &FeatureModel,
    limit: usize,
) -> Result<Vec<Configuration>, EnumerateError> {
    if limit == 0 {
        return Err(EnumerateError::ZeroLimit);
    }
    let per_activity: Vec<Vec<Vec<String>>> = (0..model.activities().len())
        .map(|i| activity_choices(model, i))
        .collect();
    let items: Vec<String> = model.data_items().iter().map(ToString::to_string).collect();

    let mut found: Vec<Vec<String>> = Vec::new();
    let mut stack: Vec<&[String]> = Vec::new();
    fn product<'a>(
        per: &'a [Vec<Vec<String>>],
        depth: usize,
        stack: &mut Vec<&'a [String]>,
        visit: &mut dyn FnMut(&[&'a [String]]),
    ) {
        if depth == per.len() {
            visit(stack);
            return;
        }
        for choice in &per[depth] {
            stack.push(choice);
            product(per, depth + 1, stack, visit);
            stack.pop();
        }
    }
    product(&per_activity, 0, &mut stack, &mut |choices| {
        let leaves: Vec<&String> = choices.iter().flat_map(|c| c.iter()).collect();
        for mask in 0u64..(1u64 << items.len()) {
            let cfg = Configuration::new(
                leaves.iter().map(|s| s.to_string()).chain(
                    items
                        .iter()
                        .enumerate()
                        .filter(|(i, _)| mask & (1 << i) != 0)
                        .map(|(_, s)| s.clone()),
                ),
            );
            if validate_configuration(model, &cfg).valid {
                found.push(cfg.selected.into_iter().collect());
            }
        }
    });
    found.sort();
    found.truncate(limit);
    Ok(found.into_iter().map(Configuration::new).collect())
}

/// Greedy pairwise sample.
///
/// A pair is an assignment (selected or not) to two distinct selectable
/// items; it is achievable when some valid configuration realises it. Each
/// round picks the valid configuration covering the most uncovered pairs,
/// breaking ties by enumeration order, until every achievable pair is
/// covered.
pub fn sample_pairwise(model: &FeatureModel) -> Result<Vec<Configuration>, EnumerateError> {
    let all = enumerate_configurations(model, usize::MAX)?;
    if all.is_empty() {
        return Err(EnumerateError::NoValidConfiguration);
    }
    let items = model.items();
    let n = items.len();
    let bits: Vec<Vec<bool>> = all
        .iter()
        .map(|c| items.iter().map(|i| c.contains(i)).collect())
        .collect();
    let pairs_of = |b: &[bool]| -> Vec<usize> {
        let mut out = Vec::with_capacity(n * n.saturating_sub(1) / 2);
        for i in 0..n {
            for j in i + 1..n {
                out.push(((i * n + j) << 2) | ((b[i] as usize) << 1) | b[j] as usize);
            }
        }
        out
    };
    let covers: Vec<Vec<usize>> = bits.iter().map(|b| pairs_of(b)).collect();
    let mut uncovered: BTreeSet<usize> = covers.iter().flatten().copied().collect();

    let mut picked = Vec::new();
    let mut used = vec![false; all.len()];
    loop {
        let best = covers
            .iter()
            .enumerate()
            .filter(|(i, _)| !used[*i])
            .map(|(i, c)| (i, c.iter().filter(|p| uncovered.contains(p)).count()))
            .fold(None::<(usize, usize)>, |acc, (i, gain)| match acc {
                Some((_, g)) if g >= gain => acc,
                _ => Some((i, gain)),
            });
        match best {
            Some((i, gain)) if gain > 0 || picked.is_empty() => {
                used[i] = true;
                for p in &covers[i] {
                    uncovered.remove(p);
                }
                picked.push(all[i].clone());
            }
            _ => break,
        }
        if uncovered.is_empty() {
            break;
        }
    }
    Ok(picked)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model(text: &str) -> FeatureModel {
        FeatureModel::parse(text).unwrap()
    }

    #[test]
    fn single_optional_gives_two() {
        let m = model(
            r#"{"process": "P", "activities": [
                {"id": "A", "optionality": "optional", "implementations": ["a"]}]}"#,
        );
        let all = enumerate_configurations(&m, 10).unwrap();
        assert_eq!(all, vec![Configuration::default(), Configuration::new(["a"])]);
    }

    #[test]
    fn binomial_group() {
        let m = model(
            r#"{"process": "P", "activities": [
                {"id": "A", "optionality": "mandatory", "implementations": ["a", "b", "c", "d"],
                 "groups": [{"id": "g", "role": "implementation_group", "members": ["a", "b", "c", "d"],
                             "cardinality": {"min": 2, "max": 3}}]}]}"#,
        );
        // C(4,2) + C(4,3)
        assert_eq!(enumerate_configurations(&m, 1000).unwrap().len(), 6 + 4);
        assert_eq!(enumerate_configurations(&m, 3).unwrap().len(), 3);
        assert_eq!(enumerate_configurations(&m, 0), Err(EnumerateError::ZeroLimit));
    }

    #[test]
    fn order_is_lexicographic() {
        let m = model(
            r#"{"process": "P", "activities": [
                {"id": "A", "optionality": "optional", "implementations": ["a", "b"]}]}"#,
        );
        let all: Vec<Vec<String>> = enumerate_configurations(&m, 10)
            .unwrap()
            .into_iter()
            .map(|c| c.selected.into_iter().collect())
            .collect();
        let mut sorted = all.clone();
        sorted.sort();
        assert_eq!(all, sorted);
        assert_eq!(all.len(), 4);
    }

    #[test]
    fn pairwise_independent_pair_needs_all_four() {
        let m = model(
            r#"{"process": "P", "activities": [
                {"id": "A", "optionality": "optional", "implementations": ["a"]},
                {"id": "B", "optionality": "optional", "implementations": ["b"]}]}"#,
        );
        let sample = sample_pairwise(&m).unwrap();
        assert_eq!(sample.len(), 4);
    }

    #[test]
    fn pairwise_respects_excludes() {
        let m = model(
            r#"{"process": "P", "activities": [
                {"id": "A", "optionality": "optional", "implementations": ["a"]},
                {"id": "B", "optionality": "optional", "implementations": ["b"]}],
               "constraints": [{"kind": "excludes", "lhs": "a", "rhs": "b"}]}"#,
        );
        let sample = sample_pairwise(&m).unwrap();
        assert!(sample.iter().all(|c| !(c.contains("a") && c.contains("b"))));
        assert_eq!(sample.len(), 3);
    }

    #[test]
    fn pairwise_unsatisfiable_model() {
        let m = model(
            r#"{"process": "P", "activities": [
                {"id": "A", "optionality": "mandatory", "implementations": ["a"]}],
               "constraints": [{"kind": "excludes", "lhs": "a", "rhs": "A"}]}"#,
        );
        assert_eq!(sample_pairwise(&m), Err(EnumerateError::NoValidConfiguration));
    }
}
