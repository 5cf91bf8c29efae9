use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::data::Vocab;
use super::model::{SegModel, SegModelConfig};
use crate::{Error, Result};

const FORMAT: &str = "latentseq-checkpoint-v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the binary archive.
    pub offset: usize,
    /// Byte length.
    pub bytes: usize,
}

/// JSON manifest describing the flat little-endian f64 archive.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: String,
    pub config: SegModelConfig,
    pub vocab: Vec<String>,
    pub archive: String,
    pub tensors: Vec<TensorEntry>,
}

fn archive_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

/// Writes `<path>` (JSON manifest) and `<path>.bin` with the extension
/// replaced (tensor archive).
pub fn save_checkpoint(model: &SegModel, path: &Path) -> Result<()> {
    let mut bytes = Vec::new();
    let mut tensors = Vec::new();
    for (name, t) in model.params.iter() {
        let offset = bytes.len();
        for x in t.data() {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
        tensors.push(TensorEntry { name: name.to_string(), shape: t.shape().to_vec(), offset, bytes: bytes.len() - offset });
    }
    let bin = archive_path(path);
    let manifest = Manifest {
        format: FORMAT.into(),
        version: crate::VERSION.into(),
        config: model.cfg.clone(),
        vocab: model.vocab.tokens().to_vec(),
        archive: bin.file_name().and_then(|s| s.to_str()).unwrap_or_default().to_string(),
        tensors,
    };
    fs::write(&bin, bytes)?;
    fs::write(path, serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

/// Loads a checkpoint, checking every tensor against the architecture the
/// manifest's config implies.
pub fn load_checkpoint(path: &Path) -> Result<SegModel> {
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(path)?)?;
    if manifest.format != FORMAT {
        return Err(Error::Checkpoint(format!("unknown format {:?}", manifest.format)));
    }
    let bin = path.with_file_name(&manifest.archive);
    let bytes = fs::read(&bin)?;
    let vocab = Vocab::from_tokens(manifest.vocab.clone())?;
    let mut model = SegModel::new(manifest.config.clone(), vocab, 0)?;
    if manifest.tensors.len() != model.params.len() {
        return Err(Error::Checkpoint(format!(
            "manifest lists {} tensors, architecture has {}",
            manifest.tensors.len(),
            model.params.len()
        )));
    }
    let ids: Vec<_> = model.params.ids().collect();
    for (entry, id) in manifest.tensors.iter().zip(ids) {
        let t = model.params.get_mut(id);
        if entry.shape != t.shape() {
            return Err(Error::Checkpoint(format!("tensor {} has shape {:?}, expected {:?}", entry.name, entry.shape, t.shape())));
        }
        if entry.bytes != t.len() * 8 || entry.offset + entry.bytes > bytes.len() {
            return Err(Error::Checkpoint(format!("tensor {} overruns the archive", entry.name)));
        }
        for (k, x) in t.data_mut().iter_mut().enumerate() {
            let o = entry.offset + 8 * k;
            *x = f64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
        }
    }
    for (entry, (name, _)) in manifest.tensors.iter().zip(model.params.iter()) {
        if entry.name != name {
            return Err(Error::Checkpoint(format!("tensor {} where {} was expected", entry.name, name)));
        }
    }
    Ok(model)
}
