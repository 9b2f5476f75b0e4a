//! Offline commands. Each writes its report to `out` and maps failures to
//! exit codes: 1 when the input is well-formed but rejected, 2 when it
//! cannot be read or parsed at all.

use std::fs;
use std::io::Write;
use std::path::Path;

use pailine::composer::{compose_product, emit_product, ComposeError};
use pailine::engine::replay_journal;
use pailine::feature_model::{
    enumerate_configurations, sample_pairwise, validate_configuration, Configuration, FeatureModel,
};
use serde::Serialize;
use serde_json::json;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Input was understood and rejected.
    #[error("{0}")]
    Rejected(String),
    #[error("{0}")]
    Usage(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Rejected(_) => 1,
            CliError::Usage(_) => 2,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Usage(format!("write failed: {e}"))
    }
}

fn read(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

fn load_model(path: &Path) -> Result<FeatureModel, CliError> {
    FeatureModel::parse(&read(path)?).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

fn load_config(path: &Path) -> Result<Configuration, CliError> {
    Configuration::parse(&read(path)?).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

fn print(out: &mut dyn Write, value: &impl Serialize) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Usage(e.to_string()))?;
    writeln!(out, "{text}")?;
    Ok(())
}

fn print_line(out: &mut dyn Write, value: &impl Serialize) -> Result<(), CliError> {
    let text = serde_json::to_string(value).map_err(|e| CliError::Usage(e.to_string()))?;
    writeln!(out, "{text}")?;
    Ok(())
}

pub fn validate_model(model: &Path, out: &mut dyn Write) -> Result<(), CliError> {
    let text = read(model)?;
    let m = FeatureModel::parse(&text).map_err(|e| CliError::Rejected(format!("{}: {e}", model.display())))?;
    print(
        out,
        &json!({
            "valid": true,
            "process": m.process_name(),
            "activities": m.activities().len(),
            "groups": m.groups().len(),
            "constraints": m.constraints().len(),
            "data_items": m.data_items().len(),
        }),
    )
}

pub fn validate_config(model: &Path, config: &Path, out: &mut dyn Write) -> Result<(), CliError> {
    let m = load_model(model)?;
    let cfg = load_config(config)?;
    let report = validate_configuration(&m, &cfg);
    print(out, &report)?;
    if report.valid {
        Ok(())
    } else {
        let rules: Vec<String> = report.violations.iter().map(|v| v.rule.to_string()).collect();
        Err(CliError::Rejected(format!("configuration violates {}", rules.join(", "))))
    }
}

/// One configuration per line, sorted selections.
pub fn enumerate(model: &Path, limit: usize, out: &mut dyn Write) -> Result<(), CliError> {
    let m = load_model(model)?;
    let all = enumerate_configurations(&m, limit).map_err(|e| CliError::Rejected(e.to_string()))?;
    for cfg in &all {
        print_line(out, cfg)?;
    }
    Ok(())
}

pub fn pairwise(model: &Path, out: &mut dyn Write) -> Result<(), CliError> {
    let m = load_model(model)?;
    let sample = sample_pairwise(&m).map_err(|e| CliError::Rejected(e.to_string()))?;
    for cfg in &sample {
        print_line(out, cfg)?;
    }
    Ok(())
}

/// Compose and emit. Nothing is written to `out_dir` unless the whole
/// product composes.
pub fn derive(
    model: &Path,
    config: &Path,
    features: &Path,
    out_dir: &Path,
    out: &mut dyn Write,
) -> Result<(), CliError> {
    let m = load_model(model)?;
    let cfg = load_config(config)?;
    if !features.is_dir() {
        return Err(CliError::Usage(format!("{}: not a directory", features.display())));
    }
    let bundle = compose_product(&m, &cfg, features).map_err(|e| match e {
        ComposeError::Io { .. } => CliError::Usage(e.to_string()),
        e => CliError::Rejected(e.to_string()),
    })?;
    emit_product(&bundle, out_dir).map_err(|e| CliError::Usage(e.to_string()))?;
    print(
        out,
        &json!({
            "product": out_dir.display().to_string(),
            "processes": bundle.process_models.iter().map(|p| p.id.as_str()).collect::<Vec<_>>(),
            "plugins": bundle.plugin_manifest.iter().map(|p| p.plugin_id.as_str()).collect::<Vec<_>>(),
            "aggregation": bundle.aggregation_selection,
        }),
    )
}

pub fn replay(journal_dir: &Path, out: &mut dyn Write) -> Result<(), CliError> {
    if !journal_dir.is_dir() {
        return Err(CliError::Usage(format!("{}: not a directory", journal_dir.display())));
    }
    let snap = replay_journal(journal_dir).map_err(|e| CliError::Rejected(e.to_string()))?;
    print(out, &snap)
}
