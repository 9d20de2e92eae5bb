//! Checkpoints: a directory of VDTN tensors plus an `index.json` describing
//! them and carrying the model's configuration.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::{read_vdtn, write_vdtn, Tensor};

pub const INDEX_FILE: &str = "index.json";
const FORMAT: &str = "vdtn-checkpoint/1";

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    file: String,
    dims: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Index {
    format: String,
    kind: String,
    config: serde_json::Value,
    tensors: Vec<Entry>,
}

fn file_name(name: &str) -> String {
    let safe: String = name
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '_' { c } else { '_' })
        .collect();
    format!("{safe}.vdtn")
}

/// Writes `params` and `config` under `dir`, tagged with a model `kind`.
pub fn save<C: Serialize>(dir: &Path, kind: &str, config: &C, params: &ParamStore<f32>) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tensors = Vec::with_capacity(params.len());
    for (name, t) in params.names().iter().zip(params.tensors()) {
        let file = file_name(name);
        write_vdtn(dir.join(&file), t)?;
        tensors.push(Entry {
            name: name.clone(),
            file,
            dims: t.dims().to_vec(),
        });
    }
    let index = Index {
        format: FORMAT.into(),
        kind: kind.into(),
        config: serde_json::to_value(config).map_err(|e| Error::json("checkpoint config", e))?,
        tensors,
    };
    let path = dir.join(INDEX_FILE);
    let text = serde_json::to_string_pretty(&index).map_err(|e| Error::json("checkpoint index", e))?;
    fs::write(&path, text).map_err(|e| Error::io(path, e))
}

/// Reads a checkpoint written by [`save`], checking its `kind`.
pub fn load<C: DeserializeOwned>(dir: &Path, kind: &str) -> Result<(C, ParamStore<f32>)> {
    let path = dir.join(INDEX_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let index: Index =
        serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))?;
    if index.format != FORMAT {
        return Err(Error::Format(format!("checkpoint format {}", index.format)));
    }
    if index.kind != kind {
        return Err(Error::invalid(format!(
            "checkpoint at {} holds a {} model, expected {kind}",
            dir.display(),
            index.kind
        )));
    }
    let config = serde_json::from_value(index.config).map_err(|e| Error::json("checkpoint config", e))?;
    let mut params = ParamStore::new();
    for e in index.tensors {
        let t: Tensor<f32> = read_vdtn(dir.join(&e.file))?;
        if t.dims() != e.dims.as_slice() {
            return Err(Error::Format(format!("{}: dims {:?} vs index {:?}", e.file, t.dims(), e.dims)));
        }
        params.add(e.name, t);
    }
    Ok((config, params))
}

pub fn exists(dir: &Path) -> bool {
    dir.join(INDEX_FILE).is_file()
}
