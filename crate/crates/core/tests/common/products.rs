//! Generated product lines written to disk as feature folders, so that
//! properties run through the real composer.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use pailine::binding::{apply_startup_exclusions, register_from_bundle};
use pailine::composer::{compose_product, ProductBundle};
use pailine::data::FieldPath;
use pailine::engine::{
    AggregationPolicyId, ChildExecution, Engine, EngineConfig, HandlerContext, Handlers, VirtualSleeper,
};
use pailine::feature_model::{Configuration, FeatureModel};
use serde_json::{json, Value};
use tempfile::TempDir;

#[derive(Debug, Clone)]
pub struct VpSpec {
    pub plugins: usize,
    /// Children vote through a user task and the parent aggregates.
    pub voting: bool,
    pub policy: Option<AggregationPolicyId>,
}

#[derive(Debug, Clone)]
pub struct ProductSpec {
    pub vps: Vec<VpSpec>,
    /// A user task after all variation points.
    pub review: bool,
}

pub struct Generated {
    pub dir: TempDir,
    pub model: FeatureModel,
    pub spec: ProductSpec,
}

pub fn leaf(vp: usize, i: usize) -> String {
    format!("V{vp}P{i}")
}

pub fn plugin(vp: usize, i: usize) -> String {
    format!("v{vp}.p{i}")
}

pub fn agg_leaf(vp: usize) -> String {
    format!("V{vp}Agg")
}

fn write(path: &Path, v: &Value) {
    fs::create_dir_all(path.parent().unwrap()).unwrap();
    fs::write(path, serde_json::to_string_pretty(v).unwrap()).unwrap();
}

fn linear(id: &str, nodes: Vec<Value>) -> Value {
    let ids: Vec<String> = nodes.iter().map(|n| n["id"].as_str().unwrap().to_string()).collect();
    let edges: Vec<Value> = ids.windows(2).map(|w| json!({"from": w[0], "to": w[1]})).collect();
    json!({"id": id, "data_root": "Root", "nodes": nodes, "edges": edges})
}

impl Generated {
    pub fn write(spec: &ProductSpec) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        let mut activities = Vec::new();
        let mut constraints = Vec::new();
        let mut root_fields = vec![json!({"name": "trace", "type": "Trace"}), json!({"name": "note", "type": "string"})];
        let mut trace_fields = Vec::new();
        let mut main_nodes = vec![json!({"id": "start", "type": "start_event"})];

        for (j, vp) in spec.vps.iter().enumerate() {
            let impls: Vec<String> = (0..vp.plugins).map(|i| leaf(j, i)).collect();
            let mut act = json!({"id": format!("Act{j}"), "optionality": "mandatory", "variation_point": format!("v{j}"),
                "implementations": impls,
                "groups": [{"id": format!("G{j}I"), "role": "implementation_group", "members": impls,
                            "cardinality": {"min": 1, "max": vp.plugins}}]});
            root_fields.push(json!({"name": format!("sel_v{j}"), "type": "list<string>"}));
            let mut node = json!({"id": format!("vp{j}"), "type": "variation_point", "registry_ref": format!("v{j}"),
                                  "selection_variable_ref": format!("sel_v{j}")});
            if vp.voting {
                root_fields.push(json!({"name": format!("ok_v{j}"), "type": "boolean"}));
                root_fields.push(json!({"name": format!("verdict_v{j}"), "type": "boolean"}));
                root_fields.push(json!({"name": format!("results_v{j}"), "type": "map<boolean>"}));
                node["mapper"] = json!({"input": format!("ok_v{j}"), "output": format!("verdict_v{j}"),
                                        "results": format!("results_v{j}")});
            }
            main_nodes.push(node);
            if let Some(policy) = vp.policy {
                act["aggregation_codes"] = json!([agg_leaf(j)]);
                act["groups"].as_array_mut().unwrap().push(json!({"id": format!("G{j}A"), "role": "aggregation_group",
                    "members": [agg_leaf(j)], "cardinality": {"min": 0, "max": 1}}));
                constraints.push(json!({"kind": "conditional_group_requires",
                    "lhs": {"group": format!("G{j}I"), "op": ">", "value": 1},
                    "rhs": {"group": format!("G{j}A"), "op": "=", "value": 1}}));
                write(
                    &root.join(agg_leaf(j)).join("handlers/manifest.json"),
                    &json!({"aggregations": [{"variation_point": format!("v{j}"), "policy": policy.as_str()}]}),
                );
            }
            activities.push(act);
            for i in 0..vp.plugins {
                trace_fields.push(json!({"name": format!("v{j}_p{i}"), "type": "string"}));
                let pid = format!("Impl{}", leaf(j, i));
                let work = if vp.voting {
                    json!({"id": "work", "type": "user_task", "form": "vote", "outputs": [format!("ok_v{j}")]})
                } else {
                    json!({"id": "work", "type": "automated_task", "handler": "stamp",
                           "outputs": [format!("trace.v{j}_p{i}")]})
                };
                let process = linear(&pid, vec![
                    json!({"id": "start", "type": "start_event"}),
                    work,
                    json!({"id": "end", "type": "end_event"}),
                ]);
                let folder = root.join(leaf(j, i));
                write(&folder.join(format!("processes/{pid}.process.json")), &process);
                write(
                    &folder.join("handlers/manifest.json"),
                    &json!({"plugins": [{"plugin_id": plugin(j, i), "variation_point_id": format!("v{j}"),
                                         "implementation_process_id": pid, "display_label": format!("Plugin {i} of {j}")}]}),
                );
            }
        }
        if spec.review {
            main_nodes.push(json!({"id": "review", "type": "user_task", "form": "review", "outputs": ["note"]}));
        }
        main_nodes.push(json!({"id": "end", "type": "end_event"}));

        let base = root.join("base");
        write(&base.join("records/Root.record.json"), &json!({"record": "Root", "fields": root_fields}));
        write(&base.join("records/Trace.record.json"), &json!({"record": "Trace", "fields": trace_fields}));
        write(&base.join("processes/Main.process.json"), &linear("Main", main_nodes));

        let model_doc = json!({"process": "Main", "activities": activities, "constraints": constraints,
                               "data_schema": {"root": "Root", "records": [{"name": "Root"}]}});
        let model = FeatureModel::parse(&model_doc.to_string()).unwrap();
        Self { dir, model, spec: spec.clone() }
    }

    pub fn features(&self) -> PathBuf {
        self.dir.path().to_path_buf()
    }

    /// Configuration selecting plugin indices `chosen[vp]`, plus the
    /// aggregation code wherever more than one implementation runs.
    pub fn config(&self, chosen: &[BTreeSet<usize>]) -> Configuration {
        let mut sel = Vec::new();
        for (j, set) in chosen.iter().enumerate() {
            sel.extend(set.iter().map(|&i| leaf(j, i)));
            if set.len() > 1 && self.spec.vps[j].policy.is_some() {
                sel.push(agg_leaf(j));
            }
        }
        Configuration::new(sel)
    }

    pub fn all(&self) -> Vec<BTreeSet<usize>> {
        self.spec.vps.iter().map(|v| (0..v.plugins).collect()).collect()
    }

    pub fn compose(&self, chosen: &[BTreeSet<usize>]) -> ProductBundle {
        compose_product(&self.model, &self.config(chosen), &self.features()).unwrap()
    }
}

/// `stamp` writes the running plugin's id into its one declared output.
pub fn stamp_handlers() -> Handlers {
    let mut h = Handlers::new();
    h.register("stamp", |ctx: &HandlerContext<'_>| {
        let value = Value::String(ctx.plugin_id.unwrap_or("none").to_string());
        Ok(BTreeMap::from([(ctx.outputs[0].clone(), value)]))
    });
    h
}

pub fn engine(bundle: ProductBundle, exclusions: &[(String, String)], children: ChildExecution) -> Engine {
    let registry = apply_startup_exclusions(register_from_bundle(&bundle).unwrap(), exclusions).registry;
    let config = EngineConfig { children, ..EngineConfig::default() };
    Engine::new(bundle, registry, stamp_handlers(), config)
        .unwrap()
        .with_sleeper(Arc::new(VirtualSleeper::default()))
}

pub fn path(p: &str) -> FieldPath {
    FieldPath::parse(p).unwrap()
}
