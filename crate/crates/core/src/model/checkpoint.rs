//! Checkpoint files: a JSON manifest next to a little-endian `f32` blob.
//!
//! ```text
//! <dir>/manifest.json   config + [{name, shape, dtype, offset, nbytes}]
//! <dir>/tensors.bin     tensors back to back, in manifest order
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{CwrnnModel, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "tensors.bin";
const FORMAT: &str = "cwrnn-checkpoint";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: usize,
    pub nbytes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub config: ModelConfig,
    pub tensors: Vec<TensorEntry>,
}

/// Serializes a model into manifest text and tensor blob.
pub fn to_parts<S: Scalar>(model: &CwrnnModel<S>) -> Result<(String, Vec<u8>)> {
    let mut blob = Vec::with_capacity(model.count_parameters() * 4);
    let mut tensors = Vec::with_capacity(model.params().len());
    for (_, name, t) in model.params().iter() {
        let offset = blob.len();
        for v in t.data() {
            blob.extend_from_slice(&(Scalar::to_f64(*v) as f32).to_le_bytes());
        }
        tensors.push(TensorEntry {
            name: name.to_owned(),
            shape: t.shape().to_vec(),
            dtype: "f32".into(),
            offset,
            nbytes: blob.len() - offset,
        });
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        version: VERSION,
        config: model.config().clone(),
        tensors,
    };
    Ok((serde_json::to_string_pretty(&manifest)?, blob))
}

pub fn from_parts(manifest: &str, blob: &[u8]) -> Result<CwrnnModel<f32>> {
    let manifest: Manifest = serde_json::from_str(manifest)?;
    if manifest.format != FORMAT || manifest.version != VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint {} v{}",
            manifest.format, manifest.version
        )));
    }
    let mut model = CwrnnModel::<f32>::new(manifest.config.clone(), 0)?;
    if model.params().len() != manifest.tensors.len() {
        return Err(Error::Format(format!(
            "manifest lists {} tensors, config implies {}",
            manifest.tensors.len(),
            model.params().len()
        )));
    }
    let ids: Vec<_> = model.params().ids().collect();
    for (id, entry) in ids.into_iter().zip(&manifest.tensors) {
        let expected = model.params().get(id).shape().to_vec();
        if model.params().name(id) != entry.name || expected != entry.shape {
            return Err(Error::Format(format!(
                "tensor {} {:?} does not match config ({} {:?})",
                entry.name,
                entry.shape,
                model.params().name(id),
                expected
            )));
        }
        if entry.dtype != "f32" {
            return Err(Error::Format(format!("unsupported dtype {}", entry.dtype)));
        }
        let count: usize = entry.shape.iter().product();
        let end = entry.offset + entry.nbytes;
        if entry.nbytes != count * 4 || end > blob.len() {
            return Err(Error::Format(format!(
                "tensor {} spans bytes {}..{end} of a {}-byte blob",
                entry.name,
                entry.offset,
                blob.len()
            )));
        }
        let data = blob[entry.offset..end]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        model
            .params_mut()
            .set(id, Tensor::from_vec(&entry.shape, data)?)?;
    }
    Ok(model)
}

pub fn save<S: Scalar>(model: &CwrnnModel<S>, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let (manifest, blob) = to_parts(model)?;
    fs::write(dir.join(MANIFEST_FILE), manifest)?;
    fs::write(dir.join(BLOB_FILE), blob)?;
    Ok(())
}

pub fn load(dir: &Path) -> Result<CwrnnModel<f32>> {
    let manifest = fs::read_to_string(dir.join(MANIFEST_FILE))?;
    let blob = fs::read(dir.join(BLOB_FILE))?;
    from_parts(&manifest, &blob)
}
