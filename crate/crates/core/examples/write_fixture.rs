//! Regenerates the committed end-to-end fixture.

use methotax::synthetic::{fixture_dir, generate, write_fixture, FIXTURE_SEED};

fn main() -> std::io::Result<()> {
    let dir = fixture_dir();
    write_fixture(&generate(FIXTURE_SEED), &dir)?;
    println!("wrote {}", dir.display());
    Ok(())
}
