//! Model and calibration persistence.
//!
//! A model lives in a directory: a `model.json` manifest listing the layers
//! (padding, nonlinearity, and the file name of each weight tensor) plus one
//! `.rtf` tensor file per layer. Calibration results are a single JSON file
//! that can be produced and re-applied independently of the weights.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::engine::{Layer, LayerQuantConfig, ModelSpec, Nonlinearity, ResidualActQuant};
use crate::error::{Error, Result};
use crate::policy::QuantizerPool;
use crate::quantizer::QuantParams;
use crate::rtf;

// ── Model manifest ──────────────────────────────────────────────────────────

#[derive(Serialize, Deserialize)]
struct LayerManifest {
    weights: String,
    padding: usize,
    nonlinearity: Nonlinearity,
}

#[derive(Serialize, Deserialize)]
struct ModelManifest {
    layers: Vec<LayerManifest>,
}

/// Write `model.json` plus one weight tensor file per layer into `dir`
/// (created if missing). Returns the manifest path.
pub fn save_model(dir: &Path, model: &ModelSpec) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = ModelManifest { layers: Vec::new() };
    for (l, layer) in model.layers().iter().enumerate() {
        let name = format!("w{l}.rtf");
        rtf::write_tensor(dir.join(&name), layer.weights())?;
        manifest.layers.push(LayerManifest {
            weights: name,
            padding: layer.padding(),
            nonlinearity: layer.nonlinearity(),
        });
    }
    let path = dir.join("model.json");
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Load a model from its `model.json`. Weight paths are resolved relative to
/// the manifest's directory. The result carries no calibration.
pub fn load_model(manifest_path: &Path) -> Result<ModelSpec> {
    let text = fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let manifest: ModelManifest = serde_json::from_str(&text)?;
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let mut layers = Vec::with_capacity(manifest.layers.len());
    for entry in &manifest.layers {
        let weights = rtf::read_tensor(base.join(&entry.weights))?;
        layers.push(Layer::new(weights, entry.padding, entry.nonlinearity)?);
    }
    ModelSpec::new(layers)
}

// ── Calibration file ────────────────────────────────────────────────────────

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum ResidualActManifest {
    Single(QuantParams),
    Pool(Vec<QuantParams>),
}

#[derive(Serialize, Deserialize)]
struct LayerCalibManifest {
    keyframe_weight: QuantParams,
    keyframe_act: QuantParams,
    residual_weight: QuantParams,
    residual_act: ResidualActManifest,
}

#[derive(Serialize, Deserialize)]
struct CalibManifest {
    layers: Vec<LayerCalibManifest>,
}

/// Write every layer's quantization parameters to a JSON file. Fails if any
/// layer is still uncalibrated.
pub fn save_calibration(path: &Path, model: &ModelSpec) -> Result<()> {
    let mut manifest = CalibManifest { layers: Vec::new() };
    for (l, layer) in model.layers().iter().enumerate() {
        let cfg = layer
            .quant()
            .ok_or_else(|| Error::Sequencing(format!("layer {l} is not calibrated")))?;
        let residual_act = match &cfg.residual_act {
            ResidualActQuant::Single(p) => ResidualActManifest::Single(p.clone()),
            ResidualActQuant::Pool(pool) => ResidualActManifest::Pool(pool.entries().to_vec()),
        };
        manifest.layers.push(LayerCalibManifest {
            keyframe_weight: cfg.keyframe_weight.clone(),
            keyframe_act: cfg.keyframe_act.clone(),
            residual_weight: cfg.residual_weight.clone(),
            residual_act,
        });
    }
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Apply a calibration file to a model. The file must describe exactly one
/// entry per layer, and every parameter set is re-validated against the
/// layer shapes on the way in.
pub fn load_calibration(path: &Path, model: &mut ModelSpec) -> Result<()> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest: CalibManifest = serde_json::from_str(&text)?;
    if manifest.layers.len() != model.num_layers() {
        return Err(Error::Config(format!(
            "calibration file describes {} layers but the model has {}",
            manifest.layers.len(),
            model.num_layers()
        )));
    }
    for (l, entry) in manifest.layers.into_iter().enumerate() {
        let residual_act = match entry.residual_act {
            ResidualActManifest::Single(p) => ResidualActQuant::Single(p),
            ResidualActManifest::Pool(entries) => {
                ResidualActQuant::Pool(QuantizerPool::new(entries)?)
            }
        };
        model.set_layer_quant(
            l,
            LayerQuantConfig {
                keyframe_weight: entry.keyframe_weight,
                keyframe_act: entry.keyframe_act,
                residual_weight: entry.residual_weight,
                residual_act,
            },
        )?;
    }
    Ok(())
}
