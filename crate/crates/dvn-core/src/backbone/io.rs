//! Parameter serialization: a flat binary of 64-bit little-endian reals plus
//! a JSON manifest listing tensor names, shapes, and byte offsets.
//!
//! `<stem>.json` holds the manifest, `<stem>.bin` the values. Running
//! statistics are stored alongside the trainable tensors so a reload
//! reproduces eval-mode behavior exactly. Files are written atomically
//! (temp file + rename).

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::{norm_name, running_name, BackboneSpec, ModelParams};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the binary file.
    pub offset: usize,
    /// Number of 64-bit values.
    pub len: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ParamsManifest {
    pub binary: String,
    pub tensors: Vec<ManifestEntry>,
}

fn all_entries(params: &ModelParams) -> Vec<(String, Vec<usize>, Vec<f64>)> {
    let mut out: Vec<(String, Vec<usize>, Vec<f64>)> = params
        .named_tensors()
        .into_iter()
        .map(|(name, t)| (name, t.shape().to_vec(), t.data().to_vec()))
        .collect();
    for (key, np) in &params.norms {
        out.push((
            running_name(key, "running_mean"),
            vec![np.running_mean.len()],
            np.running_mean.clone(),
        ));
        out.push((
            running_name(key, "running_var"),
            vec![np.running_var.len()],
            np.running_var.clone(),
        ));
    }
    out
}

fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(dir)?;
    let tmp = dir.join(format!(
        ".{}.tmp",
        path.file_name().and_then(|n| n.to_str()).unwrap_or("params")
    ));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Writes `<stem>.bin` and `<stem>.json`.
pub fn save_params(params: &ModelParams, stem: &Path) -> Result<ParamsManifest> {
    let entries = all_entries(params);
    let mut blob: Vec<u8> = Vec::new();
    let mut manifest_entries = Vec::with_capacity(entries.len());
    for (name, shape, data) in entries {
        let offset = blob.len();
        for v in &data {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        manifest_entries.push(ManifestEntry {
            name,
            shape,
            offset,
            len: data.len(),
        });
    }
    let bin_path = stem.with_extension("bin");
    let bin_name = bin_path
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| Error::InvalidConfig("parameter stem has no file name".into()))?
        .to_string();
    let manifest = ParamsManifest {
        binary: bin_name,
        tensors: manifest_entries,
    };
    atomic_write(&bin_path, &blob)?;
    atomic_write(
        &stem.with_extension("json"),
        serde_json::to_string_pretty(&manifest)?.as_bytes(),
    )?;
    Ok(manifest)
}

fn read_values(blob: &[u8], entry: &ManifestEntry) -> Result<Vec<f64>> {
    let end = entry.offset + entry.len * 8;
    if end > blob.len() {
        return Err(Error::InvalidConfig(format!(
            "tensor {} overruns the binary ({} > {})",
            entry.name,
            end,
            blob.len()
        )));
    }
    Ok(blob[entry.offset..end]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect())
}

/// Loads parameters for `spec` from `<stem>.json` / the referenced binary.
/// Every tensor the spec requires must be present with a matching shape.
pub fn load_params(spec: &BackboneSpec, stem: &Path) -> Result<ModelParams> {
    let manifest_path = stem.with_extension("json");
    let manifest: ParamsManifest = serde_json::from_str(&fs::read_to_string(&manifest_path)?)?;
    let bin_path: PathBuf = manifest_path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(&manifest.binary);
    let blob = fs::read(&bin_path)?;

    let mut by_name = std::collections::BTreeMap::new();
    for entry in &manifest.tensors {
        by_name.insert(entry.name.clone(), entry);
    }
    let mut take = |name: &str, want_shape: Option<&[usize]>| -> Result<Vec<f64>> {
        let entry = by_name
            .remove(name)
            .ok_or_else(|| Error::InvalidConfig(format!("manifest missing tensor {}", name)))?;
        if let Some(shape) = want_shape {
            if entry.shape != shape {
                return Err(Error::InvalidConfig(format!(
                    "tensor {} has shape {:?}, expected {:?}",
                    name, entry.shape, shape
                )));
            }
        }
        read_values(&blob, entry)
    };

    // template provides structure; every tensor is then overwritten
    let mut params = crate::backbone::init_params(spec, 0)?;
    for (name, tensor) in params.named_tensors_mut() {
        let data = take(&name, Some(tensor.shape()))?;
        *tensor = Tensor::new(tensor.shape().to_vec(), data)?;
    }
    let keys: Vec<_> = params.norms.keys().copied().collect();
    for key in keys {
        let mean = take(&running_name(&key, "running_mean"), None)?;
        let var = take(&running_name(&key, "running_var"), None)?;
        let np = params.norms.get_mut(&key).expect("key from map");
        if mean.len() != np.running_mean.len() || var.len() != np.running_var.len() {
            return Err(Error::InvalidConfig(format!(
                "running statistics of {} have the wrong width",
                norm_name(&key, "running_mean")
            )));
        }
        if var.iter().any(|&v| v <= 0.0) {
            return Err(Error::InvalidConfig(
                "running variance entries must be positive".into(),
            ));
        }
        np.running_mean = mean;
        np.running_var = var;
    }
    if !by_name.is_empty() {
        let extra: Vec<_> = by_name.keys().cloned().collect();
        return Err(Error::InvalidConfig(format!(
            "manifest has tensors the backbone does not define: {:?}",
            extra
        )));
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{init_params, mlp_preset, TaskInfo};
    use crate::partition::TaskId;

    #[test]
    fn params_roundtrip_is_bitwise() {
        let tasks = vec![
            TaskInfo {
                id: TaskId(1),
                class_count: 3,
                input_shape: vec![2],
            },
            TaskInfo {
                id: TaskId(2),
                class_count: 2,
                input_shape: vec![2],
            },
        ];
        let (spec, _, _) = mlp_preset(tasks, 2).unwrap();
        let params = init_params(&spec, 99).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("params");
        save_params(&params, &stem).unwrap();
        let loaded = load_params(&spec, &stem).unwrap();
        assert_eq!(params, loaded);
    }
}
