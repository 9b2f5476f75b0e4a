//! Feature structure trees and superimposition.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::Deserialize;
use serde_json::Value;

use super::ComposeError;
use crate::binding::PluginDescriptor;
use crate::data::{FieldDef, RecordDef};
use crate::engine::AggregationPolicyId;
use crate::process::ProcessDefinition;

pub type Origins = BTreeSet<String>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArtifactKind {
    Directory,
    RecordDef,
    ProcessModel,
    ConfigFile,
    HandlerManifest,
    OpaqueFile,
}

#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AggregationEntry {
    pub variation_point: String,
    pub policy: AggregationPolicyId,
}

/// `handlers/manifest.json` as authored in a feature folder.
#[derive(Debug, Clone, Default, PartialEq, Eq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HandlerManifest {
    #[serde(default)]
    pub plugins: Vec<PluginDescriptor>,
    #[serde(default)]
    pub aggregations: Vec<AggregationEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RecordLeaf {
    /// Fields kept sorted by name.
    pub def: RecordDef,
    pub field_origins: BTreeMap<String, Origins>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ConfigLeaf {
    pub values: BTreeMap<String, Value>,
    pub key_origins: BTreeMap<String, Origins>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ManifestLeaf {
    pub plugins: BTreeMap<String, (PluginDescriptor, Origins)>,
    pub aggregations: BTreeMap<String, (AggregationPolicyId, Origins)>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Content {
    Directory(BTreeMap<String, ArtifactNode>),
    Record(RecordLeaf),
    Process(ProcessDefinition),
    Config(ConfigLeaf),
    Manifest(ManifestLeaf),
    Opaque(Vec<u8>),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArtifactNode {
    pub name: String,
    /// Features contributing this node. Empty for directories.
    pub origins: Origins,
    pub content: Content,
}

impl ArtifactNode {
    pub fn kind(&self) -> ArtifactKind {
        match self.content {
            Content::Directory(_) => ArtifactKind::Directory,
            Content::Record(_) => ArtifactKind::RecordDef,
            Content::Process(_) => ArtifactKind::ProcessModel,
            Content::Config(_) => ArtifactKind::ConfigFile,
            Content::Manifest(_) => ArtifactKind::HandlerManifest,
            Content::Opaque(_) => ArtifactKind::OpaqueFile,
        }
    }

    pub fn children(&self) -> Option<&BTreeMap<String, ArtifactNode>> {
        match &self.content {
            Content::Directory(c) => Some(c),
            _ => None,
        }
    }

    fn directory(name: &str) -> Self {
        Self {
            name: name.to_string(),
            origins: Origins::new(),
            content: Content::Directory(BTreeMap::new()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArtifactTree {
    pub root: ArtifactNode,
}

impl Default for ArtifactTree {
    fn default() -> Self {
        Self::empty()
    }
}

impl ArtifactTree {
    pub fn empty() -> Self {
        Self {
            root: ArtifactNode::directory(""),
        }
    }

    /// Depth-first walk over leaves with their slash-separated paths.
    pub fn leaves(&self) -> Vec<(String, &ArtifactNode)> {
        fn walk<'a>(node: &'a ArtifactNode, prefix: &str, out: &mut Vec<(String, &'a ArtifactNode)>) {
            for (name, child) in node.children().into_iter().flatten() {
                let path = if prefix.is_empty() {
                    name.clone()
                } else {
                    format!("{prefix}/{name}")
                };
                match child.content {
                    Content::Directory(_) => walk(child, &path, out),
                    _ => out.push((path, child)),
                }
            }
        }
        let mut out = Vec::new();
        walk(&self.root, "", &mut out);
        out
    }

    /// Every feature that contributed anything to the tree.
    pub fn contributing_features(&self) -> Origins {
        let mut out = Origins::new();
        for (_, leaf) in self.leaves() {
            out.extend(leaf.origins.iter().cloned());
            match &leaf.content {
                Content::Record(r) => r.field_origins.values().for_each(|o| out.extend(o.iter().cloned())),
                Content::Config(c) => c.key_origins.values().for_each(|o| out.extend(o.iter().cloned())),
                Content::Manifest(m) => {
                    m.plugins.values().for_each(|(_, o)| out.extend(o.iter().cloned()));
                    m.aggregations.values().for_each(|(_, o)| out.extend(o.iter().cloned()));
                }
                _ => {}
            }
        }
        out
    }
}

fn origin(feature: &str) -> Origins {
    std::iter::once(feature.to_string()).collect()
}

fn parse_err(path: &Path, message: impl ToString) -> ComposeError {
    ComposeError::Parse {
        path: path.to_path_buf(),
        message: message.to_string(),
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ComposeError + '_ {
    move |source| ComposeError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Read a feature folder. The folder name is the feature name recorded as
/// origin of every leaf.
pub fn build_artifact_tree(feature_root: &Path) -> Result<ArtifactTree, ComposeError> {
    if !feature_root.is_dir() {
        return Err(ComposeError::MissingFeatureFolder(feature_root.display().to_string()));
    }
    let feature = feature_root
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let mut root = ArtifactNode::directory("");
    read_dir(feature_root, &feature, &mut root)?;
    Ok(ArtifactTree { root })
}

fn read_dir(dir: &Path, feature: &str, node: &mut ArtifactNode) -> Result<(), ComposeError> {
    let mut entries: Vec<_> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .collect::<Result<_, _>>()
        .map_err(io_err(dir))?;
    entries.sort_by_key(|e| e.file_name());
    let parent = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let Content::Directory(children) = &mut node.content else {
        unreachable!("read_dir on a leaf")
    };
    for entry in entries {
        let path = entry.path();
        let file_name = entry.file_name().to_string_lossy().into_owned();
        let child = if path.is_dir() {
            let mut sub = ArtifactNode::directory(&file_name);
            read_dir(&path, feature, &mut sub)?;
            sub
        } else {
            classify(&path, &parent, &file_name, feature)?
        };
        let key = child.name.clone();
        if children.insert(key.clone(), child).is_some() {
            return Err(ComposeError::DuplicateSibling {
                dir: dir.to_path_buf(),
                name: key,
            });
        }
    }
    Ok(())
}

fn classify(path: &Path, parent: &str, file_name: &str, feature: &str) -> Result<ArtifactNode, ComposeError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let text = || std::str::from_utf8(&bytes).map_err(|e| parse_err(path, e));
    let (name, content) = match parent {
        "records" if file_name.ends_with(".record.json") => {
            let mut def: RecordDef = serde_json::from_str(text()?).map_err(|e| parse_err(path, e))?;
            def.fields.sort_by(|a, b| a.name.cmp(&b.name));
            if let Some(w) = def.fields.windows(2).find(|w| w[0].name == w[1].name) {
                return Err(parse_err(path, format!("field `{}` declared twice", w[0].name)));
            }
            let field_origins = def
                .fields
                .iter()
                .map(|f| (f.name.clone(), origin(feature)))
                .collect();
            (def.record.clone(), Content::Record(RecordLeaf { def, field_origins }))
        }
        "processes" if file_name.ends_with(".process.json") => {
            let def = ProcessDefinition::parse(text()?).map_err(|e| parse_err(path, e))?;
            (def.id.clone(), Content::Process(def))
        }
        "config" if file_name.ends_with(".conf.json") => {
            let values: BTreeMap<String, Value> =
                serde_json::from_str(text()?).map_err(|e| parse_err(path, e))?;
            let key_origins = values.keys().map(|k| (k.clone(), origin(feature))).collect();
            (file_name.to_string(), Content::Config(ConfigLeaf { values, key_origins }))
        }
        "handlers" if file_name == "manifest.json" => {
            let raw: HandlerManifest = serde_json::from_str(text()?).map_err(|e| parse_err(path, e))?;
            let mut leaf = ManifestLeaf::default();
            for p in raw.plugins {
                let id = p.plugin_id.clone();
                if leaf.plugins.insert(id.clone(), (p, origin(feature))).is_some() {
                    return Err(parse_err(path, format!("plugin `{id}` listed twice")));
                }
            }
            for a in raw.aggregations {
                if leaf
                    .aggregations
                    .insert(a.variation_point.clone(), (a.policy, origin(feature)))
                    .is_some()
                {
                    return Err(parse_err(path, format!("aggregation for `{}` listed twice", a.variation_point)));
                }
            }
            (file_name.to_string(), Content::Manifest(leaf))
        }
        _ => (file_name.to_string(), Content::Opaque(bytes.clone())),
    };
    Ok(ArtifactNode {
        name,
        origins: origin(feature),
        content,
    })
}

/// Merge `refinement` into `base` node by node starting at the root.
pub fn superimpose(base: &ArtifactTree, refinement: &ArtifactTree) -> Result<ArtifactTree, ComposeError> {
    Ok(ArtifactTree {
        root: merge(&base.root, &refinement.root, "")?,
    })
}

fn union(a: &Origins, b: &Origins) -> Origins {
    a.union(b).cloned().collect()
}

fn features(a: &Origins, b: &Origins) -> Vec<String> {
    union(a, b).into_iter().collect()
}

fn merge(a: &ArtifactNode, b: &ArtifactNode, path: &str) -> Result<ArtifactNode, ComposeError> {
    let content = match (&a.content, &b.content) {
        (Content::Directory(ca), Content::Directory(cb)) => {
            let mut out = ca.clone();
            for (name, child) in cb {
                let sub = if path.is_empty() {
                    name.clone()
                } else {
                    format!("{path}/{name}")
                };
                let merged = match ca.get(name) {
                    Some(existing) => merge(existing, child, &sub)?,
                    None => child.clone(),
                };
                out.insert(name.clone(), merged);
            }
            Content::Directory(out)
        }
        (Content::Record(ra), Content::Record(rb)) => Content::Record(merge_records(ra, rb)?),
        (Content::Config(ca), Content::Config(cb)) => {
            let mut out = ca.clone();
            for (k, v) in &cb.values {
                let o = &cb.key_origins[k];
                match ca.values.get(k) {
                    Some(existing) if existing != v => {
                        return Err(ComposeError::ConfigConflict {
                            file: path.to_string(),
                            key: k.clone(),
                            features: features(&ca.key_origins[k], o),
                        })
                    }
                    Some(_) => {
                        out.key_origins.insert(k.clone(), union(&ca.key_origins[k], o));
                    }
                    None => {
                        out.values.insert(k.clone(), v.clone());
                        out.key_origins.insert(k.clone(), o.clone());
                    }
                }
            }
            Content::Config(out)
        }
        (Content::Manifest(ma), Content::Manifest(mb)) => {
            let mut out = ma.clone();
            for (id, (p, o)) in &mb.plugins {
                match ma.plugins.get(id) {
                    Some((existing, eo)) if existing != p => {
                        return Err(ComposeError::ManifestConflict {
                            entry: id.clone(),
                            features: features(eo, o),
                        })
                    }
                    Some((_, eo)) => {
                        out.plugins.insert(id.clone(), (p.clone(), union(eo, o)));
                    }
                    None => {
                        out.plugins.insert(id.clone(), (p.clone(), o.clone()));
                    }
                }
            }
            for (vp, (policy, o)) in &mb.aggregations {
                match ma.aggregations.get(vp) {
                    Some((existing, eo)) if existing != policy => {
                        return Err(ComposeError::ManifestConflict {
                            entry: format!("aggregation for {vp}"),
                            features: features(eo, o),
                        })
                    }
                    Some((_, eo)) => {
                        out.aggregations.insert(vp.clone(), (*policy, union(eo, o)));
                    }
                    None => {
                        out.aggregations.insert(vp.clone(), (*policy, o.clone()));
                    }
                }
            }
            Content::Manifest(out)
        }
        (x, y) if std::mem::discriminant(x) == std::mem::discriminant(y) => {
            return Err(ComposeError::LeafCollision {
                path: path.to_string(),
                features: features(&a.origins, &b.origins),
            })
        }
        _ => {
            return Err(ComposeError::KindMismatch {
                path: path.to_string(),
                features: features(&a.origins, &b.origins),
            })
        }
    };
    Ok(ArtifactNode {
        name: a.name.clone(),
        origins: union(&a.origins, &b.origins),
        content,
    })
}

fn merge_records(a: &RecordLeaf, b: &RecordLeaf) -> Result<RecordLeaf, ComposeError> {
    let mut fields: BTreeMap<&str, &FieldDef> = a.def.fields.iter().map(|f| (f.name.as_str(), f)).collect();
    let mut field_origins = a.field_origins.clone();
    for f in &b.def.fields {
        let o = &b.field_origins[&f.name];
        match fields.get(f.name.as_str()) {
            Some(existing) if *existing != f => {
                return Err(ComposeError::FieldTypeConflict {
                    record: a.def.record.clone(),
                    field: f.name.clone(),
                    left: describe(existing),
                    right: describe(f),
                    features: features(&a.field_origins[&f.name], o),
                })
            }
            Some(_) => {
                let merged = union(&a.field_origins[&f.name], o);
                field_origins.insert(f.name.clone(), merged);
            }
            None => {
                fields.insert(&f.name, f);
                field_origins.insert(f.name.clone(), o.clone());
            }
        }
    }
    Ok(RecordLeaf {
        def: RecordDef {
            record: a.def.record.clone(),
            fields: fields.into_values().cloned().collect(),
        },
        field_origins,
    })
}

fn describe(f: &FieldDef) -> String {
    if f.required {
        format!("{} (required)", f.type_name)
    } else {
        f.type_name.clone()
    }
}
