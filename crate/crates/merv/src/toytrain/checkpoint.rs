//! Checkpoints: every parameter tensor in the binary container format plus
//! a JSON manifest tying names to files and recording the pipeline config.

use crate::encoders::io::{read_feature, write_feature};
use crate::error::{MervError, Result};
use crate::numerics::Scalar;
use crate::param::Parameters;
use crate::toytrain::model::{build_pipeline, Model, PipelineConfig};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub group: String,
    pub shape: Vec<usize>,
    pub file: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub pipeline: PipelineConfig,
    pub params: Vec<ManifestEntry>,
}

const FORMAT: &str = "merv-checkpoint-v1";

fn file_name(index: usize, name: &str) -> String {
    let safe: String = name
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c } else { '_' })
        .collect();
    format!("p{index:04}_{safe}.ftr")
}

/// Writes `manifest.json` plus one container file per parameter.
pub fn save_checkpoint<S: Scalar>(model: &mut Model<S>, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut entries = Vec::new();
    let mut tensors = Vec::new();
    model.visit_params(&mut |group, name, p| {
        let idx = entries.len();
        entries.push(ManifestEntry {
            name: name.to_string(),
            group: group.as_str().to_string(),
            shape: p.value.shape().to_vec(),
            file: file_name(idx, name),
        });
        tensors.push(p.value.cast::<f32>());
    });
    for (entry, tensor) in entries.iter().zip(&tensors) {
        write_feature(&dir.join(&entry.file), tensor)?;
    }
    let manifest = Manifest {
        format: FORMAT.to_string(),
        pipeline: model.cfg().clone(),
        params: entries,
    };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| MervError::format(format!("manifest: {e}")))?;
    fs::write(dir.join("manifest.json"), json)?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(dir.join("manifest.json"))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| MervError::format(format!("manifest: {e}")))?;
    if manifest.format != FORMAT {
        return Err(MervError::format(format!(
            "unsupported checkpoint format `{}`",
            manifest.format
        )));
    }
    Ok(manifest)
}

/// Rebuilds the pipeline from the manifest's config and loads every
/// parameter tensor back.
pub fn load_checkpoint(dir: &Path) -> Result<Model<f32>> {
    let manifest = read_manifest(dir)?;
    let mut model = build_pipeline::<f32>(manifest.pipeline.clone())?;
    let mut by_name = std::collections::HashMap::new();
    for entry in &manifest.params {
        let tensor = read_feature(&dir.join(&entry.file))?;
        if tensor.shape() != entry.shape.as_slice() {
            return Err(MervError::format(format!(
                "checkpoint param {}: file shape {:?} != manifest {:?}",
                entry.name,
                tensor.shape(),
                entry.shape
            )));
        }
        by_name.insert(entry.name.clone(), tensor);
    }
    let mut missing = Vec::new();
    model.visit_params(&mut |_, name, p| match by_name.remove(name) {
        Some(tensor) => {
            if tensor.shape() == p.value.shape() {
                p.value = tensor;
            } else {
                missing.push(format!("{name} (shape mismatch)"));
            }
        }
        None => missing.push(name.to_string()),
    });
    if !missing.is_empty() {
        return Err(MervError::format(format!(
            "checkpoint missing parameters: {}",
            missing.join(", ")
        )));
    }
    Ok(model)
}
