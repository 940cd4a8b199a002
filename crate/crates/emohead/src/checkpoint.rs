//! Model checkpoints: `descriptor.json` plus one tensor file per parameter.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use emohead_core::model::{Architecture, HeadModel};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor_file::{read_tensor, write_tensor};

pub const DESCRIPTOR: &str = "descriptor.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParameterEntry {
    pub name: String,
    pub file: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Descriptor {
    pub architecture: Architecture,
    pub parameter_count: usize,
    pub parameters: Vec<ParameterEntry>,
    pub best_epoch: Option<usize>,
    pub best_dev_f1_macro: Option<f64>,
}

pub fn save_checkpoint(
    dir: impl AsRef<Path>,
    model: &HeadModel<f32>,
    best_epoch: Option<usize>,
    best_dev_f1_macro: Option<f64>,
) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut parameters = Vec::new();
    for (name, t) in model.params() {
        let file = format!("{}.sert", name);
        write_tensor(t, dir.join(&file))?;
        parameters.push(ParameterEntry { name: name.clone(), file, shape: t.dims().to_vec() });
    }
    let descriptor = Descriptor {
        architecture: model.architecture().clone(),
        parameter_count: model.parameter_count(),
        parameters,
        best_epoch,
        best_dev_f1_macro,
    };
    let path = dir.join(DESCRIPTOR);
    let mut text = serde_json::to_string_pretty(&descriptor).map_err(|e| Error::Json { path: path.clone(), source: e })?;
    text.push('\n');
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<(HeadModel<f32>, Descriptor)> {
    let dir = dir.as_ref();
    let path = dir.join(DESCRIPTOR);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let descriptor: Descriptor = serde_json::from_str(&text).map_err(|e| Error::Json { path: path.clone(), source: e })?;
    let mut params = BTreeMap::new();
    for p in &descriptor.parameters {
        let t = read_tensor(dir.join(&p.file))?;
        if t.dims() != p.shape.as_slice() {
            return Err(Error::Input(format!("{}: shape {:?} but descriptor says {:?}", p.file, t.dims(), p.shape)));
        }
        params.insert(p.name.clone(), t);
    }
    let model = HeadModel::from_params(descriptor.architecture.clone(), params)?;
    Ok((model, descriptor))
}
