//! The acceptance criteria, each a self-contained check returning a short
//! summary on success and the first counterexample on failure.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;
use std::thread;

use pailine::canonical;
use pailine::composer::{
    build_artifact_tree, compose_product, compose_product_in_order, emit_product, included_features, superimpose,
    Content,
};
use pailine::engine::{
    aggregate, replay_journal, AggregationPolicyId, ChildExecution, EngineError, IncidentAction, InstanceState,
    Resolution, TaskState,
};
use pailine::feature_model::{enumerate_configurations, sample_pairwise, validate_configuration, Configuration, RuleId};
use pailine::scenario::{self, Pack, RunOptions, Script};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use super::products::{self, path, Generated, ProductSpec, VpSpec};
use super::{config_of, pack_dir, pairs, RandomModel};

pub type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn pack() -> Pack {
    Pack::open(pack_dir())
}

fn e<E: std::fmt::Display>(err: E) -> String {
    err.to_string()
}

pub fn constraint_semantics() -> Outcome {
    let model = pack().model().map_err(e)?;
    let text = fs::read_to_string(pack_dir().join("invalid/both-checks-no-aggregation.json")).map_err(e)?;
    let mut cfg = Configuration::parse(&text).map_err(e)?;
    ensure!(cfg.contains("ManualCheckForm") && cfg.contains("AutomaticCheck"), "fixture selects both checks");
    let report = validate_configuration(&model, &cfg);
    let rules: BTreeSet<RuleId> = report.violations.iter().map(|v| v.rule).collect();
    ensure!(
        rules == BTreeSet::from([RuleId::ConditionalGroup]),
        "expected only the conditional rule, got {rules:?}"
    );
    let cited = &report.violations[0].identifiers;
    ensure!(cited.iter().any(|i| i.contains("#I")), "violation does not cite #I: {cited:?}");
    cfg.selected.insert("UnanimousAgg".into());
    let fixed = validate_configuration(&model, &cfg);
    ensure!(fixed.valid, "adding UnanimousAgg leaves {:?}", fixed.violations);
    Ok("rejected citing `#I > 1 ? requires #A = 1`; valid with UnanimousAgg".into())
}

pub fn oracle_equivalence(models: usize, seed: u64) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut subsets_checked = 0usize;
    for m in 0..models {
        let rm = RandomModel::generate(&mut rng, 12);
        let model = rm.model();
        let ids = rm.selectable();
        let items: BTreeSet<String> = model.data_items().iter().map(ToString::to_string).collect();
        let want: BTreeSet<String> = rm.data.items().into_iter().collect();
        ensure!(items == want, "model {m}: data items {items:?} differ from {want:?}");
        for sel in super::subsets(&ids) {
            let expected = rm.oracle(&sel);
            let report = validate_configuration(&model, &config_of(&sel));
            let got: BTreeSet<RuleId> = report.violations.iter().map(|v| v.rule).collect();
            ensure!(
                got == expected && report.valid == expected.is_empty(),
                "model {m} {}\nselection {sel:?}: validator {got:?}, oracle {expected:?}",
                rm.doc()
            );
            subsets_checked += 1;
        }
    }
    Ok(format!("{models} models, {subsets_checked} subsets agree"))
}

fn permutations(items: &[String]) -> Vec<Vec<String>> {
    if items.len() <= 1 {
        return vec![items.to_vec()];
    }
    let mut out = Vec::new();
    for i in 0..items.len() {
        let mut rest = items.to_vec();
        let head = rest.remove(i);
        for mut tail in permutations(&rest) {
            tail.insert(0, head.clone());
            out.push(tail);
        }
    }
    out
}

pub fn composition() -> Outcome {
    let features = pack().features_dir();
    let base = build_artifact_tree(&features.join("base")).map_err(e)?;
    let ext = build_artifact_tree(&features.join("company.commercialRegisterNo")).map_err(e)?;
    let composed = superimpose(&base, &ext).map_err(e)?;
    let company = composed
        .leaves()
        .into_iter()
        .find(|(p, _)| p == "records/Company")
        .ok_or("no composed Company record")?
        .1
        .clone();
    let Content::Record(rec) = &company.content else {
        return Err("Company is not a record".into());
    };
    let fields: Vec<(String, String, bool)> = rec
        .def
        .fields
        .iter()
        .map(|f| (f.name.clone(), f.type_name.clone(), f.required))
        .collect();
    let expected = vec![
        ("address".to_string(), "string".to_string(), true),
        ("commercialRegisterNo".to_string(), "string".to_string(), false),
        ("name".to_string(), "string".to_string(), true),
    ];
    ensure!(fields == expected, "Company fields {fields:?}");

    let model = pack().model().map_err(e)?;
    let mut checked = 0;
    for name in pack().configuration_names().map_err(e)? {
        let cfg = pack().configuration(&name).map_err(e)?;
        let order = included_features(&model, &cfg);
        if order.len() > 5 {
            continue;
        }
        let reference = compose_product(&model, &cfg, &features).map_err(e)?;
        for perm in permutations(&order) {
            let b = compose_product_in_order(&model, &cfg, &features, &perm).map_err(e)?;
            ensure!(b == reference, "{name}: fold order {perm:?} gives a different bundle");
            checked += 1;
        }
    }
    ensure!(checked > 0, "no configuration with at most 5 features");
    Ok(format!("Company = {{address, commercialRegisterNo?, name}}; {checked} fold orders equal"))
}

/// Artefact keys a feature folder defines, read straight from its files.
fn feature_artifacts(folder: &Path) -> BTreeSet<String> {
    let mut out = BTreeSet::new();
    let mut stack = vec![folder.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
                continue;
            }
            let rel = p.strip_prefix(folder).unwrap().to_string_lossy().replace('\\', "/");
            let name = p.file_name().unwrap().to_string_lossy().into_owned();
            let parent = rel.split('/').next().unwrap_or_default().to_string();
            let v = || -> Value { serde_json::from_slice(&fs::read(&p).unwrap()).unwrap() };
            match (parent.as_str(), name.as_str()) {
                ("records", n) if n.ends_with(".record.json") => {
                    let r = v();
                    for f in r["fields"].as_array().unwrap() {
                        out.insert(format!("field:{}.{}", r["record"].as_str().unwrap(), f["name"].as_str().unwrap()));
                    }
                }
                ("processes", n) if n.ends_with(".process.json") => {
                    out.insert(format!("process:{}", v()["id"].as_str().unwrap()));
                }
                ("config", n) if n.ends_with(".conf.json") => {
                    for k in v().as_object().unwrap().keys() {
                        out.insert(format!("config:{k}"));
                    }
                }
                ("handlers", "manifest.json") => {
                    let m = v();
                    for p in m["plugins"].as_array().into_iter().flatten() {
                        out.insert(format!("plugin:{}", p["plugin_id"].as_str().unwrap()));
                    }
                    for a in m["aggregations"].as_array().into_iter().flatten() {
                        out.insert(format!("aggregation:{}", a["variation_point"].as_str().unwrap()));
                    }
                }
                _ => {
                    out.insert(format!("asset:{rel}"));
                }
            }
        }
    }
    out
}

/// Artefact keys present in an emitted product directory.
fn emitted_artifacts(dir: &Path) -> BTreeSet<String> {
    let mut out = BTreeSet::new();
    let read = |name: &str| -> Value { serde_json::from_slice(&fs::read(dir.join(name)).unwrap()).unwrap() };
    for r in read("schema.json")["records"].as_array().unwrap() {
        for f in r["fields"].as_array().unwrap() {
            out.insert(format!("field:{}.{}", r["record"].as_str().unwrap(), f["name"].as_str().unwrap()));
        }
    }
    for entry in fs::read_dir(dir.join("processes")).unwrap() {
        let v: Value = serde_json::from_slice(&fs::read(entry.unwrap().path()).unwrap()).unwrap();
        out.insert(format!("process:{}", v["id"].as_str().unwrap()));
    }
    for p in read("plugins.json")["plugins"].as_array().unwrap() {
        out.insert(format!("plugin:{}", p["plugin_id"].as_str().unwrap()));
    }
    for k in read("aggregation.json").as_object().unwrap().keys() {
        out.insert(format!("aggregation:{k}"));
    }
    for k in read("config.json").as_object().unwrap().keys() {
        out.insert(format!("config:{k}"));
    }
    let assets = dir.join("assets");
    let mut stack = vec![assets.clone()];
    while let Some(d) = stack.pop() {
        let Ok(entries) = fs::read_dir(&d) else { continue };
        for entry in entries {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(format!("asset:{}", p.strip_prefix(&assets).unwrap().to_string_lossy()));
            }
        }
    }
    out
}

pub fn exclusion_soundness() -> Outcome {
    let pack = pack();
    let model = pack.model().map_err(e)?;
    let features = pack.features_dir();
    let mut by_feature: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    for entry in fs::read_dir(&features).map_err(e)? {
        let p = entry.map_err(e)?.path();
        by_feature.insert(p.file_name().unwrap().to_string_lossy().into_owned(), feature_artifacts(&p));
    }
    let tmp = tempfile::tempdir().map_err(e)?;
    let configs = enumerate_configurations(&model, usize::MAX).map_err(e)?;
    let mut scanned = 0;
    for (n, cfg) in configs.iter().enumerate() {
        let bundle = compose_product(&model, cfg, &features).map_err(e)?;
        let out = tmp.path().join(format!("p{n}"));
        emit_product(&bundle, &out).map_err(e)?;
        let included: BTreeSet<String> = included_features(&model, cfg).into_iter().collect();
        let allowed: BTreeSet<&String> = by_feature
            .iter()
            .filter(|(f, _)| included.contains(*f))
            .flat_map(|(_, a)| a)
            .collect();
        for artefact in emitted_artifacts(&out) {
            if !allowed.contains(&artefact) {
                let from: Vec<&String> = by_feature.iter().filter(|(_, a)| a.contains(&artefact)).map(|(f, _)| f).collect();
                return Err(format!("{cfg}: `{artefact}` comes only from unselected {from:?}"));
            }
            scanned += 1;
        }
        // every unselected feature's process and plugin is absent
        for (f, arts) in &by_feature {
            if included.contains(f) {
                continue;
            }
            for a in arts.iter().filter(|a| a.starts_with("plugin:") || a.starts_with("process:")) {
                let also_included = by_feature.iter().any(|(g, b)| included.contains(g) && b.contains(a));
                ensure!(also_included || !bundle_has(&out, a), "{cfg}: `{a}` of unselected `{f}` emitted");
            }
        }
    }
    Ok(format!("{} configurations, {scanned} emitted artefacts traced to selected features", configs.len()))
}

fn bundle_has(dir: &Path, artefact: &str) -> bool {
    emitted_artifacts(dir).contains(artefact)
}

fn scenario_route_doc(target: &BTreeSet<String>, route: usize) -> Result<String, String> {
    let pack = pack();
    let all = ["notification.clerk", "notification.mail", "notification.sms"];
    let mut cfg = pack.configuration("notify-all").map_err(e)?;
    if route == 0 {
        cfg.selected.retain(|f| !f.starts_with("notification.") || target.contains(f));
    }
    let bundle = pack.compose(&cfg).map_err(e)?;
    let mut script = Script {
        config: String::new(),
        data: scenario::sample_application(&bundle.schema().map_err(e)?),
        exclusions: vec![],
        register: scenario::sample_register(),
        selections: BTreeMap::new(),
        tasks: vec![],
        register_failures: 0,
    };
    if route == 1 {
        script.exclusions = all
            .iter()
            .filter(|p| !target.contains(**p))
            .map(|p| ("notification".to_string(), p.to_string()))
            .collect();
    }
    if route == 2 {
        script.selections.insert("notification".into(), target.clone());
    }
    let run = scenario::run_script_on(bundle, &script, &RunOptions::default()).map_err(e)?;
    scenario::drive_with_defaults(&run.engine, &run.instance_id).map_err(e)?;
    let inst = run.engine.instance(&run.instance_id).ok_or("instance vanished")?;
    ensure!(inst.state == InstanceState::Completed, "route {route} ended {:?}", inst.state);
    canonical::to_string(&inst.variables).map_err(e)
}

fn generated_route_doc(g: &Generated, chosen: &[BTreeSet<usize>], route: usize) -> Result<String, String> {
    let (bundle, exclusions, selections) = match route {
        0 => (g.compose(chosen), vec![], BTreeMap::new()),
        1 => {
            let mut ex = Vec::new();
            for (j, vp) in g.spec.vps.iter().enumerate() {
                for i in (0..vp.plugins).filter(|i| !chosen[j].contains(i)) {
                    ex.push((format!("v{j}"), products::plugin(j, i)));
                }
            }
            (g.compose(&g.all()), ex, BTreeMap::new())
        }
        _ => {
            let sel = chosen
                .iter()
                .enumerate()
                .map(|(j, s)| (format!("v{j}"), s.iter().map(|&i| products::plugin(j, i)).collect()))
                .collect();
            (g.compose(&g.all()), vec![], sel)
        }
    };
    let engine = products::engine(bundle, &exclusions, ChildExecution::Threads);
    let id = engine.start_instance("Main", json!({}), &selections).map_err(e)?;
    engine.run_to_quiescence(&id).map_err(e)?;
    scenario::drive_with_defaults(&engine, &id).map_err(e)?;
    let inst = engine.instance(&id).ok_or("instance vanished")?;
    ensure!(inst.state == InstanceState::Completed, "route {route} ended {:?}", inst.state);
    canonical::to_string(&inst.variables).map_err(e)
}

pub fn binding_time_equivalence(random_cases: usize, seed: u64) -> Outcome {
    for target in [vec!["notification.sms"], vec!["notification.clerk", "notification.sms"]] {
        let s: BTreeSet<String> = target.iter().map(|t| t.to_string()).collect();
        let docs: Vec<String> = (0..3).map(|r| scenario_route_doc(&s, r)).collect::<Result<_, _>>()?;
        ensure!(docs[0] == docs[1] && docs[0] == docs[2], "scenario S={s:?} routes differ:\n{docs:#?}");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for case in 0..random_cases {
        let spec = ProductSpec {
            vps: (0..rng.gen_range(1..=3))
                .map(|_| VpSpec { plugins: rng.gen_range(2..=4), voting: false, policy: None })
                .collect(),
            review: rng.gen_bool(0.5),
        };
        let g = Generated::write(&spec);
        let chosen: Vec<BTreeSet<usize>> = spec
            .vps
            .iter()
            .map(|vp| {
                let mut idx: Vec<usize> = (0..vp.plugins).collect();
                idx.shuffle(&mut rng);
                idx.truncate(rng.gen_range(1..=vp.plugins));
                idx.into_iter().collect()
            })
            .collect();
        let docs: Vec<String> = (0..3).map(|r| generated_route_doc(&g, &chosen, r)).collect::<Result<_, _>>()?;
        ensure!(
            docs[0] == docs[1] && docs[0] == docs[2],
            "case {case} S={chosen:?} routes differ:\n{docs:#?}"
        );
    }
    Ok(format!("S in {{sms}}, {{sms, clerk}} and {random_cases} random S: three routes byte-equal"))
}

/// Run one voting instance, completing vote tasks in `order`.
fn vote_run(g: &Generated, votes: &[bool], order: &[usize], children: ChildExecution) -> Result<(Value, Value), String> {
    let bundle = g.compose(&g.all());
    let engine = products::engine(bundle, &[], children);
    let id = engine.start_instance("Main", json!({}), &BTreeMap::new()).map_err(e)?;
    engine.run_to_quiescence(&id).map_err(e)?;
    let tasks: BTreeMap<String, String> = engine
        .tasks()
        .into_iter()
        .filter(|t| t.state == TaskState::Open)
        .map(|t| {
            let plugin = engine.instance(&t.instance_id).unwrap().parent.unwrap().plugin_id;
            (plugin, t.task_id)
        })
        .collect();
    ensure!(tasks.len() == votes.len(), "{} vote tasks open", tasks.len());
    for &i in order {
        let task = &tasks[&products::plugin(0, i)];
        let outputs = BTreeMap::from([(path("ok_v0"), Value::Bool(votes[i]))]);
        engine.complete_user_task(task, &outputs).map_err(e)?;
    }
    let inst = engine.instance(&id).ok_or("instance vanished")?;
    ensure!(inst.state == InstanceState::Completed, "ended {:?}", inst.state);
    Ok((inst.variables["verdict_v0"].clone(), inst.variables["results_v0"].clone()))
}

pub fn aggregation_determinism(schedules: usize, seed: u64) -> Outcome {
    for n in 1..=10usize {
        for mask in 0u32..1 << n {
            let v: Vec<bool> = (0..n).map(|i| mask & (1 << i) != 0).collect();
            let all = v.iter().all(|b| *b);
            for p in [AggregationPolicyId::Unanimous, AggregationPolicyId::Veto] {
                ensure!(aggregate(p, &v).map_err(e)? == all, "{p} on {v:?} is not fold-AND");
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let plugins = 5;
    for policy in [AggregationPolicyId::Unanimous, AggregationPolicyId::Veto, AggregationPolicyId::Majority] {
        let g = Generated::write(&ProductSpec {
            vps: vec![VpSpec { plugins, voting: true, policy: Some(policy) }],
            review: false,
        });
        let vectors: Vec<Vec<bool>> = vec![
            vec![true; plugins],
            vec![true, false, true, true, false],
            vec![false, true, true, false, false],
            (0..plugins).map(|_| rng.gen_bool(0.5)).collect(),
        ];
        for (vi, votes) in vectors.iter().enumerate() {
            let expected = Value::Bool(aggregate(policy, votes).map_err(e)?);
            let mut first: Option<(Value, Value)> = None;
            for s in 0..schedules / vectors.len() {
                let mut order: Vec<usize> = (0..plugins).collect();
                order.shuffle(&mut rng);
                let children = if s % 2 == 0 {
                    ChildExecution::Sequential { seed: rng.gen() }
                } else {
                    ChildExecution::Threads
                };
                let got = vote_run(&g, votes, &order, children)?;
                ensure!(got.0 == expected, "{policy} votes {votes:?} order {order:?}: {} != {expected}", got.0);
                match &first {
                    None => first = Some(got),
                    Some(f) => ensure!(*f == got, "{policy} vector {vi}: schedule {s} differs"),
                }
            }
        }
    }
    Ok(format!(
        "unanimous/veto = fold-AND up to length 10; {schedules} schedules per policy agree with aggregate()"
    ))
}

pub fn optimistic_locking(trials: usize) -> Outcome {
    let g = Generated::write(&ProductSpec {
        vps: vec![VpSpec { plugins: 8, voting: false, policy: None }],
        review: true,
    });
    let bundle = g.compose(&[BTreeSet::from([0])]);
    let fields: Vec<_> = std::iter::once("note".to_string())
        .chain((1..8).map(|i| format!("trace.v0_p{i}")))
        .map(|f| path(&f))
        .collect();
    let writes_each = 5;
    let mut conflicts = 0usize;
    let tmp = tempfile::tempdir().map_err(e)?;
    for trial in 0..trials {
        let k = 2 + trial % 7;
        let jdir = tmp.path().join(trial.to_string());
        let engine = products::engine(bundle.clone(), &[], ChildExecution::Sequential { seed: 0 })
            .with_journal(&jdir)
            .map_err(e)?;
        let id = engine.start_instance("Main", json!({}), &BTreeMap::new()).map_err(e)?;
        engine.run_to_quiescence(&id).map_err(e)?;
        let v0 = engine.version_of(&id).map_err(e)?;
        let lost: usize = thread::scope(|s| {
            let handles: Vec<_> = fields[..k]
                .iter()
                .enumerate()
                .map(|(w, field)| {
                    let engine = &engine;
                    let id = &id;
                    s.spawn(move || {
                        let mut conflicts = 0;
                        for n in 0..writes_each {
                            loop {
                                let v = engine.version_of(id).unwrap();
                                thread::yield_now();
                                match engine.commit_variable_write(id, v, field, json!(format!("w{w}-{n}"))) {
                                    Ok(_) => break,
                                    Err(EngineError::VersionConflict { .. }) => conflicts += 1,
                                    Err(other) => panic!("{other}"),
                                }
                            }
                        }
                        conflicts
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().unwrap()).sum()
        });
        conflicts += lost;
        let inst = engine.instance(&id).ok_or("instance vanished")?;
        ensure!(
            inst.version == v0 + (k * writes_each) as u64,
            "trial {trial}: version {} after {} commits from {v0}",
            inst.version,
            k * writes_each
        );
        for (w, field) in fields[..k].iter().enumerate() {
            let got = pailine::data::get(&inst.variables, field);
            ensure!(
                got == Some(&json!(format!("w{w}-{}", writes_each - 1))),
                "trial {trial}: {field} = {got:?}"
            );
        }
        let live = canonical::to_string(&engine.snapshot()).map_err(e)?;
        let replayed = canonical::to_string(&replay_journal(&jdir).map_err(e)?).map_err(e)?;
        ensure!(live == replayed, "trial {trial}: replay differs from live state");
    }
    Ok(format!("{trials} trials with 2-8 writers, no lost write, replay byte-equal ({conflicts} conflicts retried)"))
}

pub fn pairwise(random_models: usize, seed: u64) -> Outcome {
    let check = |model: &pailine::feature_model::FeatureModel,
                 ids: &[String],
                 valid: &[BTreeSet<String>],
                 label: &str|
     -> Result<usize, String> {
        let sample = sample_pairwise(model).map_err(e)?;
        let achievable: BTreeSet<_> = valid.iter().flat_map(|s| pairs(ids, s)).collect();
        let valid_set: BTreeSet<&BTreeSet<String>> = valid.iter().collect();
        let mut covered = BTreeSet::new();
        for cfg in &sample {
            ensure!(valid_set.contains(&cfg.selected), "{label}: sampled {cfg} is not valid");
            covered.extend(pairs(ids, &cfg.selected));
        }
        let missing: Vec<_> = achievable.difference(&covered).collect();
        ensure!(missing.is_empty(), "{label}: {} achievable pairs uncovered, e.g. {:?}", missing.len(), missing[0]);
        Ok(sample.len())
    };

    let model = pack().model().map_err(e)?;
    let ids = model.items();
    let all = enumerate_configurations(&model, usize::MAX).map_err(e)?;
    let valid: Vec<BTreeSet<String>> = all.iter().map(|c| c.selected.clone()).collect();
    for c in &all {
        ensure!(validate_configuration(&model, c).valid, "enumerated {c} invalid");
    }
    let scenario_size = check(&model, &ids, &valid, "scenario")?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut done = 0;
    while done < random_models {
        let rm = RandomModel::generate(&mut rng, 12);
        let valid = rm.oracle_valid();
        if valid.is_empty() {
            continue;
        }
        check(&rm.model(), &rm.selectable(), &valid, &format!("random model {done}"))?;
        done += 1;
    }
    Ok(format!(
        "scenario: {scenario_size} of {} configurations cover all pairs; {random_models} random models fully covered",
        all.len()
    ))
}

pub fn retry_incident() -> Outcome {
    let pack = pack();
    let mut script = pack.script("both-approve").map_err(e)?;
    let tasks = std::mem::take(&mut script.tasks);
    script.register_failures = 3;
    let run = scenario::run_golden_flow(&pack, &script, &RunOptions::default()).map_err(e)?;
    let attempts = run.engine.config().retry_attempts;
    ensure!(run.register.calls() == attempts, "{} register calls, budget {attempts}", run.register.calls());
    ensure!(
        run.sleeper.sleeps().len() == attempts as usize - 1,
        "{} backoff sleeps",
        run.sleeper.sleeps().len()
    );
    let incidents = run.engine.incidents();
    ensure!(incidents.len() == 1, "{} incidents", incidents.len());
    ensure!(incidents[0].attempt_count == attempts, "incident counts {} attempts", incidents[0].attempt_count);
    run.engine
        .resolve_incident(&incidents[0].incident_id, IncidentAction::Resume)
        .map_err(e)?;
    for t in &tasks {
        let task = run
            .engine
            .tasks()
            .into_iter()
            .find(|x| x.state == TaskState::Open && x.form_ref == t.form)
            .ok_or_else(|| format!("`{}` never opened", t.form))?;
        let outputs = t.outputs.iter().map(|(k, v)| (path(k), v.clone())).collect();
        run.engine.complete_user_task(&task.task_id, &outputs).map_err(e)?;
    }
    let inst = run.engine.instance(&run.instance_id).ok_or("instance vanished")?;
    ensure!(inst.state == InstanceState::Completed, "run ended {:?}", inst.state);
    ensure!(run.engine.incidents().len() == 1, "more incidents after resume");
    ensure!(run.engine.incidents()[0].resolution == Resolution::Resumed, "incident not marked resumed");
    ensure!(inst.variables["decision"]["justified"] == json!(true), "decision {}", inst.variables["decision"]);
    Ok(format!("{attempts} attempts, 1 incident, resume completes"))
}
