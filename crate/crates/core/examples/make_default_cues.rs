//! Regenerates `assets/default_cues.json` from the parametric templates.

use std::path::PathBuf;

fn main() -> cuedgen::Result<()> {
    let cfg = cuedgen::domain::templates::build_default_config();
    cfg.validate()?;
    let path = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("assets/default_cues.json"));
    std::fs::write(&path, cfg.to_json()? + "\n")?;
    println!("wrote {}", path.display());
    Ok(())
}
