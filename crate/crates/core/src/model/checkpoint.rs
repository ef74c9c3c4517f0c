//! Checkpoint archive: a tar file holding `manifest.json` and one raw
//! little-endian float32 blob per array. Headers carry fixed metadata so the
//! same state always produces the same bytes.

use std::collections::HashMap;
use std::fs;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig, ParamSet};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_DTYPE: &str = "float32-le";
const FORMAT: &str = "vrl-checkpoint/1";
const MANIFEST: &str = "manifest.json";

/// Data-order RNG position: iteration `i` draws from stream `i` of `seed`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub stream: u64,
}

/// First and second moment estimates, aligned with the parameter list.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ParamSet,
    pub optimizer: Option<OptimizerState>,
    pub iteration: u64,
    pub rng: RngState,
    /// Training configuration the run was started with, if any.
    pub train: Option<serde_json::Value>,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    file: String,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    dtype: String,
    config: ModelConfig,
    iteration: u64,
    rng: RngState,
    params: Vec<Entry>,
    #[serde(default)]
    optimizer_step: Option<u64>,
    #[serde(default)]
    train: Option<serde_json::Value>,
}

fn blob(t: &Tensor<f32>) -> Vec<u8> {
    t.data().iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn unblob(bytes: &[u8], shape: &[usize], file: &str) -> Result<Tensor<f32>> {
    let expected = shape.iter().product::<usize>() * 4;
    if bytes.len() != expected {
        return Err(Error::Checkpoint(format!(
            "{file} holds {} bytes, shape {shape:?} needs {expected}",
            bytes.len()
        )));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Tensor::from_vec(shape, data)
}

fn append<W: std::io::Write>(tar: &mut tar::Builder<W>, name: &str, bytes: &[u8]) -> std::io::Result<()> {
    let mut header = tar::Header::new_gnu();
    header.set_size(bytes.len() as u64);
    header.set_mode(0o644);
    header.set_mtime(0);
    header.set_uid(0);
    header.set_gid(0);
    header.set_entry_type(tar::EntryType::Regular);
    header.set_cksum();
    tar.append_data(&mut header, name, bytes)
}

impl Checkpoint {
    pub fn from_model(model: &Model) -> Self {
        Checkpoint {
            config: model.config().clone(),
            params: model.params().clone(),
            optimizer: None,
            iteration: 0,
            rng: RngState {
                seed: model.config().seed,
                stream: 0,
            },
            train: None,
        }
    }

    pub fn model(&self) -> Result<Model> {
        Model::from_params(&self.config, self.params.clone())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let names = self.params.names();
        let mut entries = Vec::new();
        let mut blobs: Vec<(String, Vec<u8>)> = Vec::new();
        let mut push = |dir: &str, name: &str, t: &Tensor<f32>| {
            let file = format!("{dir}/{name}.f32");
            blobs.push((file.clone(), blob(t)));
            file
        };
        for (name, t) in self.params.iter() {
            let file = push("params", name, t);
            entries.push(Entry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                file,
            });
        }
        if let Some(opt) = &self.optimizer {
            if opt.m.len() != names.len() || opt.v.len() != names.len() {
                return Err(Error::Checkpoint("optimizer state does not match the parameters".into()));
            }
            for ((name, m), v) in names.iter().zip(&opt.m).zip(&opt.v) {
                push("adam_m", name, m);
                push("adam_v", name, v);
            }
        }
        let manifest = Manifest {
            format: FORMAT.into(),
            dtype: CHECKPOINT_DTYPE.into(),
            config: self.config.clone(),
            iteration: self.iteration,
            rng: self.rng,
            params: entries,
            optimizer_step: self.optimizer.as_ref().map(|o| o.step),
            train: self.train.clone(),
        };
        let mut tar = tar::Builder::new(Vec::new());
        let io = |e| Error::Checkpoint(format!("writing archive: {e}"));
        append(&mut tar, MANIFEST, serde_json::to_string_pretty(&manifest)?.as_bytes()).map_err(io)?;
        for (file, bytes) in &blobs {
            append(&mut tar, file, bytes).map_err(io)?;
        }
        tar.into_inner().map_err(io)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut archive = tar::Archive::new(bytes);
        let mut files: HashMap<String, Vec<u8>> = HashMap::new();
        let bad = |e: std::io::Error| Error::Checkpoint(format!("reading archive: {e}"));
        for entry in archive.entries().map_err(bad)? {
            let mut entry = entry.map_err(bad)?;
            let path = entry.path().map_err(bad)?.to_string_lossy().into_owned();
            let mut data = Vec::new();
            entry.read_to_end(&mut data).map_err(bad)?;
            files.insert(path, data);
        }
        let manifest_bytes = files
            .get(MANIFEST)
            .ok_or_else(|| Error::Checkpoint("archive has no manifest.json".into()))?;
        let manifest: Manifest = serde_json::from_slice(manifest_bytes)?;
        if manifest.dtype != CHECKPOINT_DTYPE {
            return Err(Error::Checkpoint(format!("unsupported dtype '{}'", manifest.dtype)));
        }
        let read = |file: &str, shape: &[usize]| -> Result<Tensor<f32>> {
            let bytes = files
                .get(file)
                .ok_or_else(|| Error::Checkpoint(format!("archive lacks {file}")))?;
            unblob(bytes, shape, file)
        };
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for e in &manifest.params {
            tensors.push(read(&e.file, &e.shape)?);
            names.push(e.name.clone());
        }
        let optimizer = match manifest.optimizer_step {
            None => None,
            Some(step) => {
                let mut m = Vec::new();
                let mut v = Vec::new();
                for e in &manifest.params {
                    m.push(read(&format!("adam_m/{}.f32", e.name), &e.shape)?);
                    v.push(read(&format!("adam_v/{}.f32", e.name), &e.shape)?);
                }
                Some(OptimizerState { step, m, v })
            }
        };
        let ckpt = Checkpoint {
            config: manifest.config,
            params: ParamSet::new(names, tensors)?,
            optimizer,
            iteration: manifest.iteration,
            rng: manifest.rng,
            train: manifest.train,
        };
        ckpt.model()?;
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, Task};

    #[test]
    fn round_trip_is_bit_exact() {
        let (model, _) = build_model(&ModelConfig::toy(Task::Demosaic)).unwrap();
        let mut ckpt = Checkpoint::from_model(&model);
        ckpt.iteration = 17;
        ckpt.rng = RngState { seed: 5, stream: 17 };
        let weird = |t: &Tensor<f32>| t.map(|v| v * 1e-3 + f32::MIN_POSITIVE / 3.0);
        ckpt.optimizer = Some(OptimizerState {
            step: 17,
            m: model.params().tensors().iter().map(weird).collect(),
            v: model.params().tensors().iter().map(|t| t.map(f32::abs)).collect(),
        });
        ckpt.train = Some(serde_json::json!({"iterations": 20}));
        let bytes = ckpt.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ckpt);
        assert_eq!(back.to_bytes().unwrap(), bytes);
        for (a, b) in back.params.tensors().iter().zip(ckpt.params.tensors()) {
            assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn corrupt_archives_rejected() {
        let (model, _) = build_model(&ModelConfig::toy(Task::Deinterlace)).unwrap();
        let mut ckpt = Checkpoint::from_model(&model);
        ckpt.config.channels = 8;
        ckpt.config.deform_groups = 2;
        ckpt.config.attention.k = crate::attention::TopK::Count(4);
        assert!(matches!(Checkpoint::from_bytes(&ckpt.to_bytes().unwrap()), Err(Error::Checkpoint(_))));
        assert!(Checkpoint::from_bytes(b"not a tar").is_err());
    }
}
