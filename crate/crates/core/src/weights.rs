//! Model weight files.
//!
//! Layout: `"EMFW" | u32 manifest length | UTF-8 JSON manifest | f32 blob`,
//! little-endian. The manifest records the model form, its configuration
//! and one entry per parameter tensor with a byte offset into the blob.
//! Tensor names follow the parameter tree, e.g. `epe.pw.weight`,
//! `stage2.block1.mixer.dw.bn.gamma`, `stage4.lstm.wx.bias`,
//! `head.fpn.lateral1.weight`.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::{Form, Model, ModelConfig, Parameters};
use crate::encoder::EncoderConfig;
use crate::error::{EmfError, Location, Result};
use crate::fsutil::write_atomic;

pub const WEIGHTS_MAGIC: &[u8; 4] = b"EMFW";
pub const WEIGHTS_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset into the blob.
    pub offset: u64,
    pub form: Form,
}

/// Optional context recorded alongside the parameters.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WeightsMeta {
    /// Encoder the model expects its input from.
    pub encoder: Option<EncoderConfig>,
    /// Sensor `[width, height]` the model was set up for.
    pub sensor: Option<[u16; 2]>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub form: Form,
    pub config: ModelConfig,
    #[serde(default)]
    pub meta: WeightsMeta,
    pub tensors: Vec<TensorEntry>,
}

pub fn encode_weights(model: &Model) -> Vec<u8> {
    encode_weights_with_meta(model, &WeightsMeta::default())
}

pub fn encode_weights_with_meta(model: &Model, meta: &WeightsMeta) -> Vec<u8> {
    let mut tensors = Vec::new();
    let mut blob = Vec::new();
    model.visit("", &mut |p| {
        tensors.push(TensorEntry {
            name: p.name.to_string(),
            shape: p.shape.to_vec(),
            dtype: "f32".into(),
            offset: blob.len() as u64,
            form: model.form,
        });
        for v in p.data {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    });
    let manifest = Manifest {
        format_version: WEIGHTS_FORMAT_VERSION,
        form: model.form,
        config: model.config.clone(),
        meta: meta.clone(),
        tensors,
    };
    let json = serde_json::to_vec(&manifest).expect("manifest serializes");
    let mut out = Vec::with_capacity(8 + json.len() + blob.len());
    out.extend_from_slice(WEIGHTS_MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&blob);
    out
}

fn format_err(at: usize, message: impl Into<String>) -> EmfError {
    EmfError::Format {
        path: None,
        location: Location::Byte(at as u64),
        message: message.into(),
    }
}

pub fn read_manifest(bytes: &[u8]) -> Result<(Manifest, usize)> {
    if bytes.len() < 8 || &bytes[..4] != WEIGHTS_MAGIC {
        return Err(format_err(0, "missing \"EMFW\" header"));
    }
    let len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let json = bytes
        .get(8..8 + len)
        .ok_or_else(|| format_err(4, format!("manifest length {len} runs past end of file")))?;
    let manifest: Manifest = serde_json::from_slice(json)
        .map_err(|e| format_err(8 + e.column(), format!("bad manifest: {e}")))?;
    if manifest.format_version != WEIGHTS_FORMAT_VERSION {
        return Err(format_err(
            8,
            format!("unsupported format_version {}", manifest.format_version),
        ));
    }
    Ok((manifest, 8 + len))
}

pub fn decode_weights(bytes: &[u8]) -> Result<Model> {
    decode_weights_with_meta(bytes).map(|(m, _)| m)
}

pub fn decode_weights_with_meta(bytes: &[u8]) -> Result<(Model, WeightsMeta)> {
    let (manifest, blob_start) = read_manifest(bytes)?;
    let blob = &bytes[blob_start..];
    let mut model = Model::skeleton(&manifest.config, manifest.form)?;
    let mut by_name: HashMap<&str, &TensorEntry> = HashMap::new();
    for t in &manifest.tensors {
        if t.dtype != "f32" {
            return Err(format_err(
                8,
                format!("{}: unsupported dtype {:?}", t.name, t.dtype),
            ));
        }
        if t.form != manifest.form {
            return Err(format_err(
                8,
                format!(
                    "{} is marked {} in a {} file",
                    t.name, t.form, manifest.form
                ),
            ));
        }
        if by_name.insert(&t.name, t).is_some() {
            return Err(format_err(8, format!("duplicate tensor {}", t.name)));
        }
    }
    let mut failure: Option<EmfError> = None;
    let mut used = 0usize;
    model.visit_mut("", &mut |p| {
        if failure.is_some() {
            return;
        }
        let Some(entry) = by_name.get(p.name) else {
            failure = Some(format_err(8, format!("missing tensor {}", p.name)));
            return;
        };
        if entry.shape != p.shape {
            failure = Some(EmfError::shape(format!(
                "{}: file has {:?}, model expects {:?}",
                p.name, entry.shape, p.shape
            )));
            return;
        }
        let start = entry.offset as usize;
        let Some(raw) = blob.get(start..start + 4 * p.data.len()) else {
            failure = Some(format_err(
                blob_start + start,
                format!("{} runs past end of file", p.name),
            ));
            return;
        };
        for (d, c) in p.data.iter_mut().zip(raw.chunks_exact(4)) {
            *d = f32::from_le_bytes(c.try_into().unwrap());
        }
        used += 1;
    });
    if let Some(e) = failure {
        return Err(e);
    }
    if used != manifest.tensors.len() {
        return Err(format_err(
            8,
            format!(
                "{} tensors in file do not belong to this architecture",
                manifest.tensors.len() - used
            ),
        ));
    }
    Ok((model, manifest.meta))
}

pub fn save_weights(path: &Path, model: &Model, meta: &WeightsMeta) -> Result<()> {
    write_atomic(path, &encode_weights_with_meta(model, meta))
}

pub fn load_weights(path: &Path) -> Result<(Model, WeightsMeta)> {
    let bytes = std::fs::read(path).map_err(|e| EmfError::io(path, e))?;
    decode_weights_with_meta(&bytes).map_err(|e| match e {
        EmfError::Format {
            location, message, ..
        } => EmfError::Format {
            path: Some(path.to_path_buf()),
            location,
            message,
        },
        other => other,
    })
}
