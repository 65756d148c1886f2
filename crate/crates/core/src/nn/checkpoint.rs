//! On-disk checkpoints: `manifest.json` plus one raw little-endian blob per
//! array for values and each Adam moment.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{Architecture, Model};
use super::params::{ParamArray, ParamGroup, ParamStore};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const CHECKPOINT_FORMAT: &str = "flowtune-checkpoint/1";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Everything needed to re-derive the trainer's random streams.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub round: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub round: usize,
    pub rng: RngState,
    /// Additional scalar trainer state (e.g. a reward baseline).
    #[serde(default)]
    pub extras: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArrayManifest {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub group: ParamGroup,
    pub step: u64,
    pub values: String,
    pub first_moment: String,
    pub second_moment: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub dtype: String,
    pub architecture: Architecture,
    #[serde(flatten)]
    pub meta: CheckpointMeta,
    pub arrays: Vec<ArrayManifest>,
}

fn blob<S: Scalar>(values: &[S]) -> Vec<u8> {
    let mut out = Vec::with_capacity(values.len() * S::BYTES);
    for &v in values {
        v.write_le(&mut out);
    }
    out
}

fn unblob<S: Scalar>(bytes: &[u8], expected: usize, file: &str) -> Result<Vec<S>> {
    if bytes.len() != expected * S::BYTES {
        return Err(Error::Shape(format!(
            "{file}: {} bytes, expected {} ({} x {})",
            bytes.len(),
            expected * S::BYTES,
            expected,
            S::DTYPE
        )));
    }
    Ok(bytes.chunks_exact(S::BYTES).map(S::read_le).collect())
}

/// The checkpoint as an in-memory file map (`manifest.json` plus blobs), keyed by file name.
pub fn encode_checkpoint<S: Scalar>(model: &Model<S>, meta: &CheckpointMeta) -> Result<BTreeMap<String, Vec<u8>>> {
    let mut files = BTreeMap::new();
    let mut arrays = Vec::new();
    for a in model_store(model).arrays() {
        let entry = ArrayManifest {
            name: a.name.clone(),
            shape: a.shape.clone(),
            dtype: S::DTYPE.to_string(),
            group: a.group,
            step: a.step,
            values: format!("{}.bin", a.name),
            first_moment: format!("{}.m.bin", a.name),
            second_moment: format!("{}.v.bin", a.name),
        };
        files.insert(entry.values.clone(), blob(&a.values));
        files.insert(entry.first_moment.clone(), blob(&a.first_moment));
        files.insert(entry.second_moment.clone(), blob(&a.second_moment));
        arrays.push(entry);
    }
    let manifest = CheckpointManifest {
        format: CHECKPOINT_FORMAT.to_string(),
        dtype: S::DTYPE.to_string(),
        architecture: model.architecture().clone(),
        meta: meta.clone(),
        arrays,
    };
    let mut text = serde_json::to_vec_pretty(&manifest)?;
    text.push(b'\n');
    files.insert(MANIFEST_FILE.to_string(), text);
    Ok(files)
}

fn model_store<S: Scalar>(model: &Model<S>) -> &ParamStore<S> {
    use super::model::SequenceModel;
    model.store()
}

pub fn save_checkpoint<S: Scalar>(dir: impl AsRef<Path>, model: &Model<S>, meta: &CheckpointMeta) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (name, bytes) in encode_checkpoint(model, meta)? {
        let path = dir.join(name);
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

pub fn read_manifest(dir: impl AsRef<Path>) -> Result<CheckpointManifest> {
    let path = dir.as_ref().join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: CheckpointManifest = serde_json::from_str(&text)?;
    if manifest.format != CHECKPOINT_FORMAT {
        return Err(Error::Shape(format!("unsupported checkpoint format `{}`", manifest.format)));
    }
    Ok(manifest)
}

pub fn load_checkpoint<S: Scalar>(dir: impl AsRef<Path>) -> Result<(Model<S>, CheckpointMeta)> {
    let dir = dir.as_ref();
    let manifest = read_manifest(dir)?;
    if manifest.dtype != S::DTYPE {
        return Err(Error::Shape(format!("checkpoint stores {}, requested {}", manifest.dtype, S::DTYPE)));
    }
    let mut store = ParamStore::new();
    for a in &manifest.arrays {
        let n: usize = a.shape.iter().product();
        let read = |file: &str| -> Result<Vec<S>> {
            let path = dir.join(file);
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            unblob(&bytes, n, file)
        };
        let id = store.add(&a.name, &a.shape, a.group, read(&a.values)?)?;
        let arr: &mut ParamArray<S> = store.get_mut(id);
        arr.first_moment = read(&a.first_moment)?;
        arr.second_moment = read(&a.second_moment)?;
        arr.step = a.step;
    }
    let model = Model::from_store(manifest.architecture, store)?;
    Ok((model, manifest.meta))
}
