//! Process product lines: derive products from a feature model by
//! superimposing feature folders, then run them on a small workflow engine.

pub mod binding;
pub mod canonical;
pub mod composer;
pub mod data;
pub mod engine;
pub mod feature_model;
pub mod process;
pub mod scenario;
