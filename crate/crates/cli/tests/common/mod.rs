#![allow(dead_code)]

use std::path::{Path, PathBuf};

use pailine_cli::commands;

pub fn pack() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/parking-permit")
}

pub fn model() -> PathBuf {
    pack().join("model.json")
}

pub fn config(name: &str) -> PathBuf {
    pack().join("configs").join(format!("{name}.json"))
}

/// Derive the named pack configuration into `<tmp>/product`.
pub fn derive(name: &str) -> (tempfile::TempDir, PathBuf) {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("product");
    commands::derive(&model(), &config(name), &pack().join("features"), &out, &mut Vec::new()).unwrap();
    (tmp, out)
}
