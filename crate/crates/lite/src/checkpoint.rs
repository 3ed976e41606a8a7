//! Checkpoint format: a JSON manifest (kind, config, parameter names, shapes,
//! element offsets, format version) next to a raw blob of little-endian
//! 32-bit floats in manifest order. `<stem>.json` + `<stem>.bin`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Params;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    Backbone,
    Selector,
    Proxy,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub kind: CheckpointKind,
    pub config: serde_json::Value,
    pub params: Vec<ManifestParam>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ManifestParam {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the blob, in elements (not bytes).
    pub offset: usize,
}

fn manifest_path(stem: &Path) -> PathBuf {
    stem.with_extension("json")
}

fn blob_path(stem: &Path) -> PathBuf {
    stem.with_extension("bin")
}

pub fn save<C: Serialize>(
    stem: &Path,
    kind: CheckpointKind,
    config: &C,
    params: &Params,
) -> Result<()> {
    if let Some(dir) = stem.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut manifest = Manifest {
        version: CHECKPOINT_VERSION,
        kind,
        config: serde_json::to_value(config)?,
        params: Vec::new(),
    };
    let mut blob: Vec<u8> = Vec::new();
    let mut offset = 0;
    for e in params.entries() {
        manifest.params.push(ManifestParam {
            name: e.name.clone(),
            shape: e.shape.clone(),
            offset,
        });
        for &v in &e.data {
            blob.extend_from_slice(&(v as f32).to_le_bytes());
        }
        offset += e.data.len();
    }
    fs::write(manifest_path(stem), serde_json::to_vec_pretty(&manifest)?)?;
    fs::write(blob_path(stem), blob)?;
    Ok(())
}

pub fn exists(stem: &Path) -> bool {
    manifest_path(stem).is_file() && blob_path(stem).is_file()
}

pub fn load(stem: &Path, expect_kind: CheckpointKind) -> Result<(serde_json::Value, Params)> {
    let mpath = manifest_path(stem);
    if !mpath.is_file() {
        return Err(Error::MissingArtifact(mpath));
    }
    let bpath = blob_path(stem);
    if !bpath.is_file() {
        return Err(Error::MissingArtifact(bpath));
    }
    let manifest: Manifest = serde_json::from_slice(&fs::read(&mpath)?)?;
    if manifest.version != CHECKPOINT_VERSION {
        return Err(Error::contract(format!(
            "unsupported checkpoint version {}",
            manifest.version
        )));
    }
    if manifest.kind != expect_kind {
        return Err(Error::contract(format!(
            "checkpoint {mpath:?} has kind {:?}, expected {expect_kind:?}",
            manifest.kind
        )));
    }
    let blob = fs::read(&bpath)?;
    let mut params = Params::new();
    for mp in &manifest.params {
        let numel: usize = mp.shape.iter().product();
        let start = mp.offset * 4;
        let end = start + numel * 4;
        if end > blob.len() {
            return Err(Error::contract(format!(
                "checkpoint blob truncated: param {} needs bytes [{start}, {end})",
                mp.name
            )));
        }
        let data: Vec<f64> = blob[start..end]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        params.insert(&mp.name, mp.shape.clone(), data);
    }
    Ok((manifest.config, params))
}
