//! Which implementations a variation point may invoke. The registry is
//! built from the product, narrowed once at startup, then narrowed again per
//! instance by runtime selection.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::composer::ProductBundle;
use crate::process::Node;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BindingError {
    #[error("invalid plugin id `{0}` (expected dotted lowercase, e.g. notification.mail)")]
    InvalidPluginId(String),
    #[error("plugin id `{0}` registered twice")]
    DuplicatePlugin(String),
    #[error("plugin `{plugin}` references missing implementation process `{process}`")]
    MissingImplementation { plugin: String, process: String },
    #[error("plugin `{plugin}` process `{process}` is not start -> activity -> end")]
    NotAnImplementation { plugin: String, process: String },
    #[error("plugin(s) {plugins:?} not available at variation point `{variation_point}`")]
    Unavailable {
        variation_point: String,
        plugins: Vec<String>,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PluginDescriptor {
    pub plugin_id: String,
    pub variation_point_id: String,
    pub implementation_process_id: String,
    pub display_label: String,
}

/// `notification.mail`, `check.automatic`, ...
pub fn is_valid_plugin_id(id: &str) -> bool {
    !id.is_empty()
        && id.split('.').all(|seg| {
            let mut chars = seg.chars();
            matches!(chars.next(), Some(c) if c.is_ascii_lowercase())
                && chars.all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_')
        })
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PluginRegistry {
    /// Per variation point, sorted by plugin id.
    pub registered: BTreeMap<String, Vec<PluginDescriptor>>,
    pub excluded: BTreeMap<String, BTreeSet<String>>,
}

/// Result of applying startup exclusions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Excluded {
    pub registry: PluginRegistry,
    pub warnings: Vec<String>,
}

impl PluginRegistry {
    pub fn variation_points(&self) -> impl Iterator<Item = &str> {
        self.registered.keys().map(String::as_str)
    }

    pub fn registered(&self, vp: &str) -> &[PluginDescriptor] {
        self.registered.get(vp).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn is_excluded(&self, vp: &str, plugin: &str) -> bool {
        self.excluded.get(vp).is_some_and(|s| s.contains(plugin))
    }

    pub fn available(&self, vp: &str) -> Vec<&PluginDescriptor> {
        self.registered(vp)
            .iter()
            .filter(|p| !self.is_excluded(vp, &p.plugin_id))
            .collect()
    }

    pub fn descriptor(&self, plugin: &str) -> Option<&PluginDescriptor> {
        self.registered.values().flatten().find(|p| p.plugin_id == plugin)
    }
}

/// Build the registry from a derived product. Every variation point of every
/// deployed process gets an entry, possibly empty.
pub fn register_from_bundle(bundle: &ProductBundle) -> Result<PluginRegistry, BindingError> {
    let mut reg = PluginRegistry::default();
    for def in &bundle.process_models {
        for vp in def.variation_points() {
            if let Node::VariationPoint { registry_ref, .. } = vp {
                reg.registered.entry(registry_ref.clone()).or_default();
            }
        }
    }
    let mut seen = BTreeSet::new();
    for p in &bundle.plugin_manifest {
        if !is_valid_plugin_id(&p.plugin_id) {
            return Err(BindingError::InvalidPluginId(p.plugin_id.clone()));
        }
        if !seen.insert(p.plugin_id.as_str()) {
            return Err(BindingError::DuplicatePlugin(p.plugin_id.clone()));
        }
        let def = bundle
            .process(&p.implementation_process_id)
            .ok_or_else(|| BindingError::MissingImplementation {
                plugin: p.plugin_id.clone(),
                process: p.implementation_process_id.clone(),
            })?;
        if def.implementation_activity().is_none() {
            return Err(BindingError::NotAnImplementation {
                plugin: p.plugin_id.clone(),
                process: def.id.clone(),
            });
        }
        reg.registered
            .entry(p.variation_point_id.clone())
            .or_default()
            .push(p.clone());
    }
    for list in reg.registered.values_mut() {
        list.sort();
    }
    Ok(reg)
}

/// Extend the excluded sets. Unknown variation points or plugin ids leave the
/// registry unchanged and produce a warning.
pub fn apply_startup_exclusions(mut reg: PluginRegistry, params: &[(String, String)]) -> Excluded {
    let mut warnings = Vec::new();
    for (vp, plugin) in params {
        if !reg.registered(vp).iter().any(|p| &p.plugin_id == plugin) {
            warnings.push(format!(
                "exclusion {vp}={plugin} ignored: plugin not registered at that variation point"
            ));
            continue;
        }
        reg.excluded.entry(vp.clone()).or_default().insert(plugin.clone());
    }
    Excluded {
        registry: reg,
        warnings,
    }
}

/// Plugins to invoke at `vp`. `user_selection` is honoured only when the
/// caller passes it, i.e. when the variation point declares a selection
/// variable; absent selection means every available plugin.
pub fn resolve_invocation(
    reg: &PluginRegistry,
    vp: &str,
    user_selection: Option<&BTreeSet<String>>,
) -> Result<Vec<PluginDescriptor>, BindingError> {
    let available = reg.available(vp);
    let Some(selection) = user_selection else {
        return Ok(available.into_iter().cloned().collect());
    };
    let missing: Vec<String> = selection
        .iter()
        .filter(|s| !available.iter().any(|p| &&p.plugin_id == s))
        .cloned()
        .collect();
    if !missing.is_empty() {
        return Err(BindingError::Unavailable {
            variation_point: vp.to_string(),
            plugins: missing,
        });
    }
    Ok(available
        .into_iter()
        .filter(|p| selection.contains(&p.plugin_id))
        .cloned()
        .collect())
}

/// Parse a `vp=plugin` startup exclusion argument.
pub fn parse_exclusion(arg: &str) -> Result<(String, String), String> {
    let (vp, plugin) = arg
        .split_once('=')
        .ok_or_else(|| format!("expected <variation_point>=<plugin_id>, got `{arg}`"))?;
    let (vp, plugin) = (vp.trim(), plugin.trim());
    if vp.is_empty() || !is_valid_plugin_id(plugin) {
        return Err(format!("invalid exclusion `{arg}`"));
    }
    Ok((vp.to_string(), plugin.to_string()))
}
