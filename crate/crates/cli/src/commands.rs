//! `imfnd preprocess` and `imfnd cache`.

use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use imfnd::datasets::{preprocess_multi_image, read_records, RawRecord};
use imfnd::encoders::BackendSpec;
use imfnd::lvlm_client::{clear_cache_dir, list_cache_dir, CacheEntryInfo};
use log::warn;

/// Resolves multi-image records to one image each and writes them as JSONL.
/// Returns the number of records written.
pub fn cmd_preprocess(input: &Path, image_root: Option<&Path>, output: &Path, encoder: &BackendSpec) -> Result<usize> {
    let set = read_records(input)?;
    for bad in &set.malformed {
        warn!("{}: {bad}", input.display());
    }
    let root = image_root.unwrap_or_else(|| input.parent().unwrap_or(Path::new(".")));
    let backend = encoder.build()?;
    let chosen = preprocess_multi_image(&set.records, root, backend.as_ref())?;
    let mut body = String::new();
    for ((article, path), record) in chosen.iter().zip(&set.records) {
        let out = RawRecord {
            image_paths: vec![path.clone()],
            ..record.clone()
        };
        debug_assert_eq!(out.id, article.id);
        body.push_str(&serde_json::to_string(&out)?);
        body.push('\n');
    }
    if let Some(parent) = output.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(output, body).with_context(|| format!("writing {}", output.display()))?;
    Ok(chosen.len())
}

pub fn cmd_cache_inspect(dir: &Path) -> Result<Vec<CacheEntryInfo>> {
    list_cache_dir(dir).with_context(|| format!("listing {}", dir.display()))
}

pub fn cmd_cache_clear(dir: &Path) -> Result<usize> {
    clear_cache_dir(dir).with_context(|| format!("clearing {}", dir.display()))
}
