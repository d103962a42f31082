//! Dataset loading shared by the subcommands.

use anyhow::{Context, Result};
use nexop_core::phantom::{build_manifest, read_manifest, read_split, DatasetManifest, Example};

use crate::config::RunConfig;

pub struct Splits {
    #[allow(dead_code)]
    pub manifest: DatasetManifest,
    pub train: Vec<Example>,
    pub val: Vec<Example>,
    pub test: Vec<Example>,
}

/// Loads the dataset from `[data].path` when given, otherwise regenerates it
/// in memory from the config fields (same seeds as `gen-data` would use).
pub fn load_splits(cfg: &RunConfig) -> Result<Splits> {
    let manifest = match &cfg.data.path {
        Some(path) => read_manifest(path)
            .with_context(|| format!("reading dataset manifest in {}", path.display()))?,
        None => build_manifest(
            cfg.data.height,
            cfg.data.width,
            cfg.data.nex,
            cfg.data.sigma,
            cfg.data.train,
            cfg.data.val,
            cfg.data.test,
            cfg.seed,
        ),
    };
    let (train, val, test) = match &cfg.data.path {
        Some(path) => (
            read_split(path, &manifest, "train")?,
            read_split(path, &manifest, "val")?,
            read_split(path, &manifest, "test")?,
        ),
        None => (
            manifest.regenerate_split(&manifest.train),
            manifest.regenerate_split(&manifest.val),
            manifest.regenerate_split(&manifest.test),
        ),
    };
    Ok(Splits {
        manifest,
        train,
        val,
        test,
    })
}
