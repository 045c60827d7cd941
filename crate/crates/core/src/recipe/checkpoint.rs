//! Checkpoint directories: `manifest.json`, `config.json` and one
//! little-endian f32 blob per component.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use super::tuning::TuningPlan;
use crate::error::{Error, Result};
use crate::model::params::{Component, ParamStore, TensorKey};
use crate::numerics::Scalar;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CONFIG_FILE: &str = "config.json";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub component: Component,
    pub path: String,
    pub shape: Vec<usize>,
    /// Byte offset inside the component's blob.
    pub offset: usize,
    /// SHA-256 of this tensor's bytes.
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlobInfo {
    pub file: String,
    pub bytes: usize,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub dtype: String,
    pub plan: TuningPlan,
    pub entries: Vec<ManifestEntry>,
    pub blobs: BTreeMap<Component, BlobInfo>,
    /// Optimizer moments are never stored.
    pub optimizer_state: bool,
}

impl Manifest {
    pub fn paths(&self, component: Component) -> Vec<&str> {
        self.entries
            .iter()
            .filter(|e| e.component == component)
            .map(|e| e.path.as_str())
            .collect()
    }

    pub fn numel(&self) -> usize {
        self.entries.iter().map(|e| e.shape.iter().product::<usize>()).sum()
    }
}

/// Outcome of [`load_checkpoint`].
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LoadReport {
    pub loaded: Vec<String>,
    /// In-scope model tensors the checkpoint does not contain.
    pub missing: Vec<String>,
    /// Checkpoint tensors with no counterpart in the model.
    pub extra: Vec<String>,
}

fn sha_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn blob_name(c: Component) -> String {
    format!("{c}.bin")
}

/// Writes the plan's trainable scope plus `config` into `dir`.
pub fn save_checkpoint<S: Scalar>(store: &ParamStore<S>, plan: &TuningPlan, dir: &Path, config: &Value) -> Result<Manifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::new();
    let mut blobs: BTreeMap<Component, Vec<u8>> = BTreeMap::new();
    for key in plan.scope(store) {
        let component = store.component_of(key);
        let blob = blobs.entry(component).or_default();
        let t = store.tensor(key);
        let bytes: Vec<u8> = t.data().iter().flat_map(|v| (v.to_f64c() as f32).to_le_bytes()).collect();
        entries.push(ManifestEntry {
            component,
            path: store.path(key),
            shape: t.shape().to_vec(),
            offset: blob.len(),
            sha256: sha_hex(&bytes),
        });
        blob.extend_from_slice(&bytes);
    }
    let mut infos = BTreeMap::new();
    for (c, bytes) in &blobs {
        let file = blob_name(*c);
        let path = dir.join(&file);
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        infos.insert(
            *c,
            BlobInfo {
                file,
                bytes: bytes.len(),
                sha256: sha_hex(bytes),
            },
        );
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        dtype: "f32le".into(),
        plan: plan.clone(),
        entries,
        blobs: infos,
        optimizer_state: false,
    };
    let cfg_path = dir.join(CONFIG_FILE);
    fs::write(&cfg_path, serde_json::to_string_pretty(config)? + "\n").map_err(|e| Error::io(&cfg_path, e))?;
    // The manifest is written last: its presence marks a complete checkpoint.
    let man_path = dir.join(MANIFEST_FILE);
    fs::write(&man_path, serde_json::to_string_pretty(&manifest)? + "\n").map_err(|e| Error::io(&man_path, e))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    if m.format_version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "{}: unsupported checkpoint format {}",
            path.display(),
            m.format_version
        )));
    }
    Ok(m)
}

/// Reads every blob and checks blob and per-tensor hashes.
pub fn verify_checkpoint(dir: &Path) -> Result<(Manifest, BTreeMap<Component, Vec<u8>>)> {
    let manifest = read_manifest(dir)?;
    let mut blobs = BTreeMap::new();
    for (c, info) in &manifest.blobs {
        let path = dir.join(&info.file);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        if bytes.len() != info.bytes || sha_hex(&bytes) != info.sha256 {
            return Err(Error::Integrity(format!("blob {} does not match its manifest hash", path.display())));
        }
        blobs.insert(*c, bytes);
    }
    for e in &manifest.entries {
        let n = e.shape.iter().product::<usize>() * 4;
        let bytes = blobs
            .get(&e.component)
            .and_then(|b| b.get(e.offset..e.offset + n))
            .ok_or_else(|| Error::Integrity(format!("{}/{} lies outside its blob", e.component, e.path)))?;
        if sha_hex(bytes) != e.sha256 {
            return Err(Error::Integrity(format!("{}/{} does not match its manifest hash", e.component, e.path)));
        }
    }
    Ok((manifest, blobs))
}

/// Restores tensors by `(component, path)`, optionally only for `components`.
/// Adapter factors load only where adapters are attached.
pub fn load_checkpoint<S: Scalar>(
    store: &mut ParamStore<S>,
    dir: &Path,
    components: Option<&[Component]>,
) -> Result<LoadReport> {
    let (manifest, blobs) = verify_checkpoint(dir)?;
    let wanted = |c: Component| components.is_none_or(|cs| cs.contains(&c));
    let mut report = LoadReport::default();
    let mut seen = BTreeSet::new();
    for e in manifest.entries.iter().filter(|e| wanted(e.component)) {
        let name = format!("{}/{}", e.component, e.path);
        let Some(key) = store.resolve(e.component, &e.path) else {
            report.extra.push(name);
            continue;
        };
        let t = store.tensor(key);
        if t.shape() != e.shape.as_slice() {
            return Err(Error::Dimension(format!(
                "checkpoint tensor {name} has shape {:?}, model expects {:?}",
                e.shape,
                t.shape()
            )));
        }
        let n = t.numel();
        let bytes = &blobs[&e.component][e.offset..e.offset + 4 * n];
        let values: Vec<S> = bytes
            .chunks_exact(4)
            .map(|b| S::from_f64c(f32::from_le_bytes(b.try_into().unwrap()) as f64))
            .collect();
        store.tensor_mut(key).data_mut().copy_from_slice(&values);
        seen.insert(key);
        report.loaded.push(name);
    }
    let in_scope: Vec<TensorKey> = manifest
        .plan
        .scope(store)
        .into_iter()
        .filter(|&k| wanted(store.component_of(k)))
        .collect();
    report.missing = in_scope
        .into_iter()
        .filter(|k| !seen.contains(k))
        .map(|k| store.name(k))
        .collect();
    Ok(report)
}

/// Total bytes of a checkpoint directory's files.
pub fn checkpoint_bytes(dir: &Path) -> Result<u64> {
    let mut total = 0;
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        total += entry.metadata().map_err(|e| Error::io(entry.path(), e))?.len();
    }
    Ok(total)
}
