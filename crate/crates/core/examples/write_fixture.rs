//! Regenerates the bundled fixture: `cargo run -p jury-core --example write_fixture [DIR]`.

use std::path::PathBuf;

use jury_core::synth::{fixture, FIXTURE_SEED};

fn main() -> std::io::Result<()> {
    let dir = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures"));
    fixture(FIXTURE_SEED).write_files(&dir)?;
    println!("wrote fixture to {}", dir.display());
    Ok(())
}
