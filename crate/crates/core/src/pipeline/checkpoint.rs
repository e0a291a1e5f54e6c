//! Checkpoint directories: `manifest.json`, `params.bin` (little-endian
//! f64, concatenated in manifest order) and `vocab.txt`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::eval::EvalConfig;
use super::model::{LmGnnModel, ModelConfig, Schema};
use super::Task;
use crate::error::{Error, Result};
use crate::tensor::{Module, ParamGroup, Tensor};
use crate::text::Vocab;

const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const PARAMS_FILE: &str = "params.bin";
pub const VOCAB_FILE: &str = "vocab.txt";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub stage: String,
    pub task: Task,
    pub target_relation: Option<String>,
    pub eval: EvalConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    group: ParamGroup,
    shape: Vec<usize>,
    /// Offset in f64 elements into the parameter file.
    offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    meta: CheckpointMeta,
    model: ModelConfig,
    schema: Schema,
    params: Vec<ParamEntry>,
}

pub fn save_checkpoint(dir: &Path, model: &LmGnnModel, meta: &CheckpointMeta) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut entries = Vec::new();
    let mut bytes = Vec::new();
    let mut offset = 0;
    for p in model.params() {
        entries.push(ParamEntry {
            name: p.name().to_string(),
            group: p.group(),
            shape: p.value().shape().to_vec(),
            offset,
        });
        for x in p.value().data() {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
        offset += p.value().numel();
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        meta: meta.clone(),
        model: model.config.clone(),
        schema: model.schema.clone(),
        params: entries,
    };
    fs::write(
        dir.join(MANIFEST_FILE),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    fs::write(dir.join(PARAMS_FILE), bytes)?;
    model.vocab.save(dir.join(VOCAB_FILE))?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<(LmGnnModel, CheckpointMeta)> {
    let text = fs::read_to_string(dir.join(MANIFEST_FILE))
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", dir.join(MANIFEST_FILE).display())))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {}",
            manifest.format_version
        )));
    }
    let bytes = fs::read(dir.join(PARAMS_FILE))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Checkpoint(format!(
            "{PARAMS_FILE} length {} is not a multiple of 8",
            bytes.len()
        )));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    let vocab = Vocab::load(dir.join(VOCAB_FILE))?;
    let mut model = LmGnnModel::new(manifest.model, manifest.schema, vocab, 0)?;
    let mut params = model.params_mut();
    if params.len() != manifest.params.len() {
        return Err(Error::Checkpoint(format!(
            "manifest lists {} parameters, model has {}",
            manifest.params.len(),
            params.len()
        )));
    }
    for (p, e) in params.iter_mut().zip(&manifest.params) {
        if p.name() != e.name || p.group() != e.group || p.value().shape() != e.shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "parameter {} {:?} {:?} does not match manifest entry {} {:?} {:?}",
                p.name(),
                p.group(),
                p.value().shape(),
                e.name,
                e.group,
                e.shape
            )));
        }
        let n: usize = e.shape.iter().product();
        let data = values
            .get(e.offset..e.offset + n)
            .ok_or_else(|| Error::Checkpoint(format!("{PARAMS_FILE} too short for {}", e.name)))?;
        *p.value_mut() = Tensor::new(e.shape.clone(), data.to_vec())?;
    }
    Ok((model, manifest.meta))
}
