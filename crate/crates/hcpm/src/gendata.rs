//! Exports synthetic pairs as PGM images with geometry sidecars.

use std::path::{Path, PathBuf};

use hcpm_core::synthetic::{Dataset, SceneConfig};

use crate::error::{at, Result};
use crate::{pgm, sidecar};

/// Paths written for pair `i`.
pub fn pair_paths(dir: &Path, i: usize) -> [PathBuf; 3] {
    [
        dir.join(format!("pair_{i:05}_a.pgm")),
        dir.join(format!("pair_{i:05}_b.pgm")),
        dir.join(format!("pair_{i:05}.txt")),
    ]
}

pub fn export(scene: SceneConfig, n: usize, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(at(dir))?;
    let ds = Dataset::new(scene, n)?;
    for i in 0..n {
        let s = ds.get(i)?;
        let [a, b, side] = pair_paths(dir, i);
        pgm::write(&a, &s.image_a)?;
        pgm::write(&b, &s.image_b)?;
        std::fs::write(&side, sidecar::format(&sidecar::Sidecar::of(&s))).map_err(at(&side))?;
    }
    Ok(())
}
