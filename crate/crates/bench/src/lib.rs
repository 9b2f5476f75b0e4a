//! Fixture access shared by the benchmarks.

use std::path::PathBuf;

use pailine::scenario::Pack;

pub fn pack() -> Pack {
    Pack::open(PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/parking-permit"))
}
