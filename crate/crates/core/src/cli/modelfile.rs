//! Self-describing JSON model files.
//!
//! The envelope records the architecture, class list, front end, parameter
//! tensors (base64 of little-endian floats), the input standardizer and a
//! SHA-256 checksum of the envelope serialized with an empty checksum.

use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::features::FeatureConfig;
use crate::nn::{LayerSpec, Model, Standardizer};

pub const FORMAT: &str = "miltag-model";
pub const FORMAT_VERSION: u64 = 1;

/// What turns one second of audio into the model's input vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FrontEnd {
    /// Log-mel instances computed directly from audio.
    LogMel(FeatureConfig),
    /// Penultimate activations of a separate embedding model.
    Embedding { dim: usize },
    /// Pre-computed vectors supplied by the caller.
    External { dim: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    /// SHA-256 of the training configuration JSON.
    pub config_digest: String,
    /// Validation clip micro-F1 of the kept checkpoint, if trained.
    pub val_metric: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FloatWidth {
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelFile {
    pub model: Model,
    pub class_list: Vec<String>,
    pub front_end: FrontEnd,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ParamBlob {
    weights: String,
    bias: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct StandardizerBlob {
    mean: String,
    scale: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Envelope {
    format: String,
    version: u64,
    class_list: Vec<String>,
    front_end: FrontEnd,
    input_shape: Vec<usize>,
    layers: Vec<LayerSpec>,
    float_width: u8,
    params: Vec<ParamBlob>,
    standardizer: Option<StandardizerBlob>,
    inference_only: bool,
    provenance: Provenance,
    checksum: String,
}

/// Hex SHA-256 of a value's compact JSON.
pub fn config_digest<T: Serialize>(value: &T) -> String {
    hex_digest(&serde_json::to_vec(value).expect("config serializes"))
}

fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn encode(values: &[f64], width: FloatWidth) -> String {
    let mut bytes = Vec::with_capacity(values.len() * 8);
    for &v in values {
        match width {
            FloatWidth::F32 => bytes.extend_from_slice(&(v as f32).to_le_bytes()),
            FloatWidth::F64 => bytes.extend_from_slice(&v.to_le_bytes()),
        }
    }
    B64.encode(bytes)
}

fn decode(text: &str, width: FloatWidth) -> Result<Vec<f64>> {
    let bytes = B64
        .decode(text)
        .map_err(|e| Error::MalformedModel(format!("bad base64 payload: {e}")))?;
    let size = match width {
        FloatWidth::F32 => 4,
        FloatWidth::F64 => 8,
    };
    if bytes.len() % size != 0 {
        return Err(Error::MalformedModel(format!(
            "payload of {} bytes is not a whole number of {size}-byte floats",
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(size)
        .map(|c| match width {
            FloatWidth::F32 => f64::from(f32::from_le_bytes(c.try_into().unwrap())),
            FloatWidth::F64 => f64::from_le_bytes(c.try_into().unwrap()),
        })
        .collect())
}

fn envelope_checksum(env: &Envelope) -> String {
    let mut blank = env.clone();
    blank.checksum.clear();
    hex_digest(&serde_json::to_vec(&blank).expect("envelope serializes"))
}

impl ModelFile {
    pub fn to_json(&self, width: FloatWidth) -> Result<String> {
        let model = &self.model;
        if self.class_list.len() != model.n_classes() {
            return Err(Error::InvalidConfig(format!(
                "{} class names for a {}-class model",
                self.class_list.len(),
                model.n_classes()
            )));
        }
        let tensors = model.params();
        let params = tensors
            .chunks(2)
            .map(|p| ParamBlob {
                weights: encode(p[0], width),
                bias: encode(p[1], width),
            })
            .collect();
        // The standardizer is always stored at full precision.
        let standardizer = model.standardizer().map(|s| StandardizerBlob {
            mean: encode(&s.mean, FloatWidth::F64),
            scale: encode(&s.scale, FloatWidth::F64),
        });
        let mut env = Envelope {
            format: FORMAT.into(),
            version: FORMAT_VERSION,
            class_list: self.class_list.clone(),
            front_end: self.front_end.clone(),
            input_shape: model.input_shape().to_vec(),
            layers: model.specs(),
            float_width: match width {
                FloatWidth::F32 => 32,
                FloatWidth::F64 => 64,
            },
            params,
            standardizer,
            inference_only: model.inference_only(),
            provenance: self.provenance.clone(),
            checksum: String::new(),
        };
        env.checksum = envelope_checksum(&env);
        let mut text = serde_json::to_string_pretty(&env)?;
        text.push('\n');
        Ok(text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Error::MalformedModel(e.to_string()))?;
        let version = value
            .get("version")
            .and_then(serde_json::Value::as_u64)
            .ok_or_else(|| Error::MalformedModel("missing version".into()))?;
        if version != FORMAT_VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                supported: FORMAT_VERSION,
            });
        }
        let env: Envelope =
            serde_json::from_value(value).map_err(|e| Error::MalformedModel(e.to_string()))?;
        if env.format != FORMAT {
            return Err(Error::MalformedModel(format!("unknown format `{}`", env.format)));
        }
        if envelope_checksum(&env) != env.checksum {
            return Err(Error::ChecksumMismatch);
        }
        let width = match env.float_width {
            32 => FloatWidth::F32,
            64 => FloatWidth::F64,
            w => return Err(Error::MalformedModel(format!("float width {w}"))),
        };
        let mut model = Model::build(&env.input_shape, &env.layers, env.provenance.seed)
            .map_err(|e| Error::MalformedModel(e.to_string()))?;
        if env.params.len() != env.layers.len() {
            return Err(Error::MalformedModel(format!(
                "{} parameter blocks for {} layers",
                env.params.len(),
                env.layers.len()
            )));
        }
        let mut tensors = Vec::with_capacity(env.params.len() * 2);
        for blob in &env.params {
            tensors.push(decode(&blob.weights, width)?);
            tensors.push(decode(&blob.bias, width)?);
        }
        model
            .set_params(tensors)
            .map_err(|e| Error::MalformedModel(e.to_string()))?;
        if let Some(s) = &env.standardizer {
            let standardizer = Standardizer {
                mean: decode(&s.mean, FloatWidth::F64)?,
                scale: decode(&s.scale, FloatWidth::F64)?,
            };
            model
                .set_standardizer(Some(standardizer))
                .map_err(|e| Error::MalformedModel(e.to_string()))?;
        }
        model.set_inference_only(env.inference_only);
        if env.class_list.len() != model.n_classes() {
            return Err(Error::MalformedModel(format!(
                "{} class names for a {}-class model",
                env.class_list.len(),
                model.n_classes()
            )));
        }
        Ok(Self {
            model,
            class_list: env.class_list,
            front_end: env.front_end,
            provenance: env.provenance,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>, width: FloatWidth) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json(width)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::build_model;

    fn sample() -> ModelFile {
        let mut model = build_model(&LayerSpec::mlp(4, &[6], 3), 7).unwrap();
        model
            .set_standardizer(Some(Standardizer {
                mean: vec![0.1, 0.2, 0.3, 0.4],
                scale: vec![1.0, 2.0, 0.5, 3.0],
            }))
            .unwrap();
        ModelFile {
            model,
            class_list: vec!["a".into(), "b".into(), "c".into()],
            front_end: FrontEnd::Embedding { dim: 4 },
            provenance: Provenance {
                seed: 7,
                config_digest: config_digest(&serde_json::json!({"epochs": 3})),
                val_metric: Some(0.75),
            },
        }
    }

    #[test]
    fn f64_roundtrip_is_exact() {
        let m = sample();
        let back = ModelFile::from_json(&m.to_json(FloatWidth::F64).unwrap()).unwrap();
        assert_eq!(back, m);
        let x = [0.3, -1.0, 2.0, 0.0];
        assert_eq!(back.model.predict(&x).unwrap(), m.model.predict(&x).unwrap());
    }

    #[test]
    fn f32_roundtrip_is_close() {
        let m = sample();
        let back = ModelFile::from_json(&m.to_json(FloatWidth::F32).unwrap()).unwrap();
        for (a, b) in back.model.params().iter().zip(m.model.params()) {
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() <= y.abs() * 1e-7 + 1e-30);
            }
        }
    }

    #[test]
    fn future_version_rejected_before_checksum() {
        let text = sample().to_json(FloatWidth::F64).unwrap();
        let bumped = text.replacen("\"version\": 1", "\"version\": 2", 1);
        assert!(matches!(
            ModelFile::from_json(&bumped),
            Err(Error::VersionMismatch { found: 2, supported: 1 })
        ));
    }

    #[test]
    fn tampered_payload_detected() {
        let m = sample();
        let text = m.to_json(FloatWidth::F64).unwrap();
        let mut env: serde_json::Value = serde_json::from_str(&text).unwrap();
        let w = env["params"][0]["weights"].as_str().unwrap().to_string();
        let mut bytes = B64.decode(w).unwrap();
        bytes[3] ^= 0x10;
        env["params"][0]["weights"] = B64.encode(bytes).into();
        assert!(matches!(
            ModelFile::from_json(&env.to_string()),
            Err(Error::ChecksumMismatch)
        ));
    }
}
