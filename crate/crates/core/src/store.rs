//! On-disk artifact cache inside a run directory (`<run>/cache/`).
//!
//! Files are written to a temporary name and renamed into place, so a
//! reader never sees a partial artifact.

use std::fs;
use std::path::{Path, PathBuf};

use serde_json::Value;

use crate::cluster::Linkage;
use crate::error::Result;
use crate::vulnmap::{cache_file_name, map_from_bytes, map_to_bytes, VulnParams, VulnerabilityMap};

pub const CACHE_DIR: &str = "cache";

pub fn cache_dir(run_dir: &Path) -> PathBuf {
    run_dir.join(CACHE_DIR)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let tmp = path.with_extension(format!("tmp{}", std::process::id()));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn vulnmap_path(run_dir: &Path, pair: usize, params: &VulnParams) -> PathBuf {
    cache_dir(run_dir).join(cache_file_name(pair, params))
}

/// A cached map, if present and describing exactly `(pair, params)`.
pub fn load_vulnmap(run_dir: &Path, pair: usize, params: &VulnParams) -> Result<Option<VulnerabilityMap>> {
    let path = vulnmap_path(run_dir, pair, params);
    if !path.exists() {
        return Ok(None);
    }
    let map = map_from_bytes(&fs::read(path)?)?;
    Ok((map.pair_id == pair && map.params == *params).then_some(map))
}

pub fn save_vulnmap(run_dir: &Path, map: &VulnerabilityMap) -> Result<()> {
    write_atomic(&vulnmap_path(run_dir, map.pair_id, &map.params), &map_to_bytes(map))
}

fn linkage_name(linkage: Linkage) -> &'static str {
    match linkage {
        Linkage::Single => "single",
        Linkage::Complete => "complete",
        Linkage::Average => "average",
    }
}

pub fn dendrogram_path(run_dir: &Path, pair: usize, threshold: f64, linkage: Linkage) -> PathBuf {
    cache_dir(run_dir).join(format!("dendro_{pair}_{threshold}_{}.json", linkage_name(linkage)))
}

pub fn load_dendrogram(run_dir: &Path, pair: usize, threshold: f64, linkage: Linkage) -> Result<Option<Value>> {
    let path = dendrogram_path(run_dir, pair, threshold, linkage);
    if !path.exists() {
        return Ok(None);
    }
    Ok(Some(serde_json::from_slice(&fs::read(path)?)?))
}

pub fn save_dendrogram(run_dir: &Path, pair: usize, threshold: f64, linkage: Linkage, tree: &Value) -> Result<()> {
    write_atomic(&dendrogram_path(run_dir, pair, threshold, linkage), &serde_json::to_vec(tree)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vulnmap::ValueSpace;

    #[test]
    fn round_trips_and_mismatches() {
        let dir = tempfile::tempdir().unwrap();
        let params = VulnParams { k: 2, s: 16, value_space: ValueSpace::Logit };
        let map = VulnerabilityMap {
            params,
            pair_id: 3,
            benign_label: 1,
            adversarial_label: 0,
            image_h: 32,
            image_w: 32,
            rows: 2,
            cols: 2,
            b_map: vec![0.5, -0.25, 0.0, 1e-9],
            a_map: vec![-3.0, 0.0, 2.0, 0.125],
        };
        assert!(load_vulnmap(dir.path(), 3, &params).unwrap().is_none());
        save_vulnmap(dir.path(), &map).unwrap();
        assert_eq!(load_vulnmap(dir.path(), 3, &params).unwrap(), Some(map));

        let tree = serde_json::json!({"root": 4, "h": 0.1 + 0.2});
        save_dendrogram(dir.path(), 3, 0.5, Linkage::Average, &tree).unwrap();
        assert_eq!(load_dendrogram(dir.path(), 3, 0.5, Linkage::Average).unwrap(), Some(tree));
        assert!(load_dendrogram(dir.path(), 3, 0.5, Linkage::Single).unwrap().is_none());
    }
}
