//! Product derivation by superimposing the `base` folder and the folders of
//! the selected features.

mod tree;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::binding::PluginDescriptor;
use crate::canonical;
use crate::data::{RecordDef, Schema};
use crate::engine::AggregationPolicyId;
use crate::feature_model::{validate_configuration, Configuration, FeatureModel, NodeKind, ValidationReport};
use crate::process::{Node, ProcessDefinition};

pub use tree::{
    build_artifact_tree, superimpose, AggregationEntry, ArtifactKind, ArtifactNode, ArtifactTree, ConfigLeaf,
    Content, HandlerManifest, ManifestLeaf, Origins, RecordLeaf,
};

/// Name of the feature folder composed into every product.
pub const BASE_FEATURE: &str = "base";

#[derive(Debug, Error)]
pub enum ComposeError {
    #[error("configuration is invalid: {}", summarize(.0))]
    InvalidConfiguration(ValidationReport),
    #[error("missing feature folder `{0}`")]
    MissingFeatureFolder(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot parse {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("duplicate artefact `{name}` in {dir}")]
    DuplicateSibling { dir: PathBuf, name: String },
    #[error("field-type-conflict: {record}.{field} is `{left}` vs `{right}` (features {features:?})")]
    FieldTypeConflict {
        record: String,
        field: String,
        left: String,
        right: String,
        features: Vec<String>,
    },
    #[error("artefact `{path}` defined by more than one feature {features:?}")]
    LeafCollision { path: String, features: Vec<String> },
    #[error("artefact `{path}` has different kinds in features {features:?}")]
    KindMismatch { path: String, features: Vec<String> },
    #[error("config key `{key}` in {file} has conflicting values (features {features:?})")]
    ConfigConflict {
        file: String,
        key: String,
        features: Vec<String>,
    },
    #[error("handler manifest entry `{entry}` conflicts (features {features:?})")]
    ManifestConflict { entry: String, features: Vec<String> },
    #[error("feature `{feature}`: {message}")]
    Manifest { feature: String, message: String },
    #[error("composed schema: {0}")]
    Schema(String),
}

fn summarize(report: &ValidationReport) -> String {
    report
        .violations
        .iter()
        .map(|v| format!("[{}] {}", v.rule, v.message))
        .collect::<Vec<_>>()
        .join("; ")
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProductBundle {
    pub configuration: Configuration,
    /// Sorted by record name; fields sorted by name.
    pub data_schema: Vec<RecordDef>,
    /// Sorted by id.
    pub process_models: Vec<ProcessDefinition>,
    /// Sorted by plugin id.
    pub plugin_manifest: Vec<PluginDescriptor>,
    pub aggregation_selection: BTreeMap<String, AggregationPolicyId>,
    pub config: BTreeMap<String, Value>,
    /// Opaque files keyed by their path inside the feature folders.
    pub assets: BTreeMap<String, Vec<u8>>,
}

impl ProductBundle {
    pub fn process(&self, id: &str) -> Option<&ProcessDefinition> {
        self.process_models.iter().find(|p| p.id == id)
    }

    pub fn schema(&self) -> Result<Schema, ComposeError> {
        Schema::from_records(&self.data_schema).map_err(|e| ComposeError::Schema(e.to_string()))
    }

    /// Processes that are not the implementation of any plugin.
    pub fn core_processes(&self) -> impl Iterator<Item = &ProcessDefinition> {
        self.process_models.iter().filter(|p| {
            !self
                .plugin_manifest
                .iter()
                .any(|d| d.implementation_process_id == p.id)
        })
    }
}

/// Feature folders composed for `cfg`, `base` first. Aggregation codes are
/// dropped when their activity has at most one selected implementation.
pub fn included_features(model: &FeatureModel, cfg: &Configuration) -> Vec<String> {
    let mut out = vec![BASE_FEATURE.to_string()];
    for id in &cfg.selected {
        if model.leaf_kind(id) == Some(NodeKind::AggregationCode) {
            let activity = model.activity_of(id).expect("leaf has an activity");
            let implementations = activity
                .children
                .iter()
                .filter(|c| c.kind == NodeKind::Implementation && cfg.contains(&c.id))
                .count();
            if implementations <= 1 {
                continue;
            }
        }
        out.push(id.clone());
    }
    out
}

/// Fold superimposition over the given folders in the given order.
pub fn compose_tree(features_root: &Path, features: &[String]) -> Result<ArtifactTree, ComposeError> {
    let mut acc = ArtifactTree::empty();
    for f in features {
        let dir = features_root.join(f);
        if !dir.is_dir() {
            return Err(ComposeError::MissingFeatureFolder(f.clone()));
        }
        acc = superimpose(&acc, &build_artifact_tree(&dir)?)?;
    }
    Ok(acc)
}

pub fn compose_product(
    model: &FeatureModel,
    cfg: &Configuration,
    features_root: &Path,
) -> Result<ProductBundle, ComposeError> {
    let order = included_features(model, cfg);
    compose_product_in_order(model, cfg, features_root, &order)
}

/// Like [`compose_product`] but folds the folders in `order`, which must be a
/// permutation of [`included_features`].
pub fn compose_product_in_order(
    model: &FeatureModel,
    cfg: &Configuration,
    features_root: &Path,
    order: &[String],
) -> Result<ProductBundle, ComposeError> {
    let report = validate_configuration(model, cfg);
    if !report.valid {
        return Err(ComposeError::InvalidConfiguration(report));
    }
    let tree = compose_tree(features_root, order)?;
    bundle_from_tree(model, cfg, &tree)
}

/// Extract the bundle from a composed tree and check the manifest invariants.
pub fn bundle_from_tree(
    model: &FeatureModel,
    cfg: &Configuration,
    tree: &ArtifactTree,
) -> Result<ProductBundle, ComposeError> {
    let mut records: BTreeMap<String, RecordDef> = BTreeMap::new();
    let mut processes: BTreeMap<String, ProcessDefinition> = BTreeMap::new();
    let mut config = ConfigLeaf::default();
    let mut manifest = ManifestLeaf::default();
    let mut assets = BTreeMap::new();
    for (path, leaf) in tree.leaves() {
        let features: Vec<String> = leaf.origins.iter().cloned().collect();
        match &leaf.content {
            Content::Record(r) => {
                if records.insert(r.def.record.clone(), r.def.clone()).is_some() {
                    return Err(ComposeError::LeafCollision { path, features });
                }
            }
            Content::Process(p) => {
                if processes.insert(p.id.clone(), p.clone()).is_some() {
                    return Err(ComposeError::LeafCollision { path, features });
                }
            }
            Content::Config(c) => {
                for (k, v) in &c.values {
                    if let Some(existing) = config.values.get(k) {
                        if existing != v {
                            return Err(ComposeError::ConfigConflict {
                                file: path,
                                key: k.clone(),
                                features: c.key_origins[k].union(&config.key_origins[k]).cloned().collect(),
                            });
                        }
                    }
                    config.values.insert(k.clone(), v.clone());
                    config.key_origins.entry(k.clone()).or_default().extend(c.key_origins[k].iter().cloned());
                }
            }
            Content::Manifest(m) => {
                for (id, entry) in &m.plugins {
                    if manifest.plugins.insert(id.clone(), entry.clone()).is_some() {
                        return Err(ComposeError::ManifestConflict { entry: id.clone(), features });
                    }
                }
                for (vp, entry) in &m.aggregations {
                    if manifest.aggregations.insert(vp.clone(), entry.clone()).is_some() {
                        return Err(ComposeError::ManifestConflict {
                            entry: format!("aggregation for {vp}"),
                            features,
                        });
                    }
                }
            }
            Content::Opaque(bytes) => {
                assets.insert(path, bytes.clone());
            }
            Content::Directory(_) => unreachable!("leaves() yields no directories"),
        }
    }

    let bundle = ProductBundle {
        configuration: cfg.clone(),
        data_schema: records.into_values().collect(),
        process_models: processes.into_values().collect(),
        plugin_manifest: manifest.plugins.values().map(|(p, _)| p.clone()).collect(),
        aggregation_selection: manifest.aggregations.iter().map(|(vp, (p, _))| (vp.clone(), *p)).collect(),
        config: config.values,
        assets,
    };
    check_schema(&bundle)?;
    check_manifest(model, cfg, &manifest, &bundle)?;
    Ok(bundle)
}

fn check_schema(bundle: &ProductBundle) -> Result<(), ComposeError> {
    let schema = bundle.schema()?;
    let bad = |p: &ProcessDefinition, m: String| ComposeError::Schema(format!("process `{}`: {m}", p.id));
    for p in &bundle.process_models {
        if !schema.has_record(&p.data_root) {
            return Err(bad(p, format!("unknown data root `{}`", p.data_root)));
        }
        let mut paths = Vec::new();
        for n in &p.nodes {
            match n {
                Node::UserTask { outputs, .. } | Node::AutomatedTask { outputs, .. } => paths.extend(outputs),
                Node::VariationPoint {
                    selection_variable_ref,
                    mapper,
                    ..
                } => {
                    paths.extend(selection_variable_ref);
                    if let Some(m) = mapper {
                        paths.push(&m.input);
                        paths.push(&m.output);
                        paths.extend(&m.results);
                    }
                }
                _ => {}
            }
        }
        for path in paths {
            schema
                .field_type(&p.data_root, path)
                .map_err(|e| bad(p, e.to_string()))?;
        }
    }
    Ok(())
}

fn check_manifest(
    model: &FeatureModel,
    cfg: &Configuration,
    manifest: &ManifestLeaf,
    bundle: &ProductBundle,
) -> Result<(), ComposeError> {
    let err = |feature: &str, message: String| ComposeError::Manifest {
        feature: feature.to_string(),
        message,
    };
    for (id, (p, origins)) in &manifest.plugins {
        for o in origins {
            let is_impl = model.leaf_kind(o) == Some(NodeKind::Implementation);
            let vp = model.activity_of(o).and_then(|a| model.variation_point_of(&a.id));
            if !is_impl || vp != Some(p.variation_point_id.as_str()) {
                return Err(err(
                    o,
                    format!("declares plugin `{id}` for `{}` but is not an implementation of that variation point", p.variation_point_id),
                ));
            }
        }
    }
    for leaf in &cfg.selected {
        if model.leaf_kind(leaf) != Some(NodeKind::Implementation) {
            continue;
        }
        let activity = model.activity_of(leaf).expect("leaf has an activity");
        let own = manifest.plugins.values().filter(|(_, o)| o.contains(leaf)).count();
        let expected = usize::from(model.variation_point_of(&activity.id).is_some());
        if own != expected {
            return Err(err(leaf, format!("contributes {own} plugin(s), expected {expected}")));
        }
    }
    for (vp, (_, origins)) in &manifest.aggregations {
        for o in origins {
            let ok = model.leaf_kind(o) == Some(NodeKind::AggregationCode)
                && model.activity_of(o).and_then(|a| model.variation_point_of(&a.id)) == Some(vp.as_str());
            if !ok {
                return Err(err(o, format!("declares an aggregation for `{vp}` but is not its aggregation code")));
            }
        }
    }
    for p in bundle.core_processes() {
        for n in p.variation_points() {
            let Node::VariationPoint {
                registry_ref,
                aggregation_policy_ref,
                mapper: Some(_),
                ..
            } = n
            else {
                continue;
            };
            let count = bundle
                .plugin_manifest
                .iter()
                .filter(|d| &d.variation_point_id == registry_ref)
                .count();
            let key = aggregation_policy_ref.as_ref().unwrap_or(registry_ref);
            if count > 1 && !bundle.aggregation_selection.contains_key(key) {
                return Err(err(
                    BASE_FEATURE,
                    format!("variation point `{registry_ref}` has {count} implementations but no aggregation code"),
                ));
            }
        }
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct SchemaFile {
    records: Vec<RecordDef>,
}

#[derive(Serialize, Deserialize)]
struct PluginsFile {
    plugins: Vec<PluginDescriptor>,
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), ComposeError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|source| ComposeError::Io {
            path: parent.to_path_buf(),
            source,
        })?;
    }
    fs::write(path, bytes).map_err(|source| ComposeError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn json<T: Serialize>(value: &T) -> Vec<u8> {
    canonical::to_string(value).expect("bundle serializes").into_bytes()
}

/// Write the bundle to `out`. The layout is staged in a sibling directory and
/// renamed into place so a failed emit leaves no partial product.
pub fn emit_product(bundle: &ProductBundle, out: &Path) -> Result<(), ComposeError> {
    let name = out
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "product".into());
    let staging = out.with_file_name(format!(".{name}.staging-{}", std::process::id()));
    let result = write_layout(bundle, &staging).and_then(|()| {
        if out.exists() {
            fs::remove_dir_all(out).map_err(|source| ComposeError::Io {
                path: out.to_path_buf(),
                source,
            })?;
        }
        fs::rename(&staging, out).map_err(|source| ComposeError::Io {
            path: out.to_path_buf(),
            source,
        })
    });
    if result.is_err() {
        let _ = fs::remove_dir_all(&staging);
    }
    result
}

fn write_layout(bundle: &ProductBundle, dir: &Path) -> Result<(), ComposeError> {
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|source| ComposeError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
    }
    write(&dir.join("configuration.json"), &json(&bundle.configuration))?;
    write(
        &dir.join("schema.json"),
        &json(&SchemaFile {
            records: bundle.data_schema.clone(),
        }),
    )?;
    for p in &bundle.process_models {
        write(&dir.join("processes").join(format!("{}.process.json", p.id)), p.to_json().as_bytes())?;
    }
    write(
        &dir.join("plugins.json"),
        &json(&PluginsFile {
            plugins: bundle.plugin_manifest.clone(),
        }),
    )?;
    write(&dir.join("aggregation.json"), &json(&bundle.aggregation_selection))?;
    write(&dir.join("config.json"), &json(&bundle.config))?;
    for (path, bytes) in &bundle.assets {
        write(&dir.join("assets").join(path), bytes)?;
    }
    Ok(())
}

fn read(path: &Path) -> Result<Vec<u8>, ComposeError> {
    fs::read(path).map_err(|source| ComposeError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, ComposeError> {
    serde_json::from_slice(&read(path)?).map_err(|e| ComposeError::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

fn files_under(dir: &Path, prefix: &str, out: &mut BTreeMap<String, Vec<u8>>) -> Result<(), ComposeError> {
    let io = |source| ComposeError::Io {
        path: dir.to_path_buf(),
        source,
    };
    for entry in fs::read_dir(dir).map_err(io)? {
        let entry = entry.map_err(io)?;
        let name = entry.file_name().to_string_lossy().into_owned();
        let rel = if prefix.is_empty() { name } else { format!("{prefix}/{name}") };
        if entry.path().is_dir() {
            files_under(&entry.path(), &rel, out)?;
        } else {
            out.insert(rel, read(&entry.path())?);
        }
    }
    Ok(())
}

/// Read an emitted product back. Errors name the offending file.
pub fn load_product(dir: &Path) -> Result<ProductBundle, ComposeError> {
    let configuration: Configuration = read_json(&dir.join("configuration.json"))?;
    let SchemaFile { records } = read_json(&dir.join("schema.json"))?;
    let mut process_models = Vec::new();
    let mut files = BTreeMap::new();
    let pdir = dir.join("processes");
    if pdir.is_dir() {
        files_under(&pdir, "", &mut files)?;
    }
    for (name, bytes) in files {
        let path = pdir.join(&name);
        let text = String::from_utf8(bytes).map_err(|e| ComposeError::Parse {
            path: path.clone(),
            message: e.to_string(),
        })?;
        let def = ProcessDefinition::parse(&text).map_err(|e| ComposeError::Parse {
            path: path.clone(),
            message: e.to_string(),
        })?;
        process_models.push(def);
    }
    process_models.sort_by(|a, b| a.id.cmp(&b.id));
    let PluginsFile { plugins } = read_json(&dir.join("plugins.json"))?;
    let mut assets = BTreeMap::new();
    if dir.join("assets").is_dir() {
        files_under(&dir.join("assets"), "", &mut assets)?;
    }
    let bundle = ProductBundle {
        configuration,
        data_schema: records,
        process_models,
        plugin_manifest: plugins,
        aggregation_selection: read_json(&dir.join("aggregation.json"))?,
        config: read_json(&dir.join("config.json"))?,
        assets,
    };
    bundle.schema().map_err(|e| ComposeError::Parse {
        path: dir.join("schema.json"),
        message: e.to_string(),
    })?;
    Ok(bundle)
}
