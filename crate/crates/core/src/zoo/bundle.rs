use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, VariantId, ZooError};
use crate::nn::{LayerParams, Tensor};
use crate::pipeline::ScalerStats;
use crate::{CONTEXT_LEN, FEATURE_NAMES};

pub const BUNDLE_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BundleMeta {
    pub seed: u64,
    pub epochs: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

/// A trained model with everything needed to run it on raw windows.
/// Parameters are stored at 32-bit precision.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelBundle {
    pub format_version: u32,
    pub variant_id: VariantId,
    pub window_s: u32,
    pub context_len: usize,
    pub feature_order: Vec<String>,
    pub scaler: ScalerStats,
    pub params: Vec<ParamRecord>,
    pub meta: BundleMeta,
    pub checksum: u32,
}

fn params_checksum(params: &[ParamRecord]) -> u32 {
    crc32fast::hash(
        serde_json::to_string(params)
            .expect("plain data")
            .as_bytes(),
    )
}

impl ModelBundle {
    pub fn new(model: &Model, scaler: ScalerStats, window_s: u32, meta: BundleMeta) -> Self {
        let params: Vec<ParamRecord> = model
            .params()
            .iter()
            .map(|(name, t)| ParamRecord {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                values: t.data().iter().map(|&v| v as f32).collect(),
            })
            .collect();
        Self {
            format_version: BUNDLE_FORMAT_VERSION,
            variant_id: model.variant(),
            window_s,
            context_len: CONTEXT_LEN,
            feature_order: FEATURE_NAMES.iter().map(|s| s.to_string()).collect(),
            scaler,
            checksum: params_checksum(&params),
            params,
            meta,
        }
    }

    /// The model as stored, i.e. with 32-bit-rounded parameters.
    pub fn model(&self) -> Result<Model, ZooError> {
        let entries = self
            .params
            .iter()
            .map(|p| {
                let data = p.values.iter().map(|&v| f64::from(v)).collect();
                Ok((p.name.clone(), Tensor::new(p.shape.clone(), data)?))
            })
            .collect::<Result<Vec<_>, ZooError>>()?;
        Model::from_params(self.variant_id, LayerParams::new(entries)?)
    }

    /// Structural checks in order: version, layout, parameter shapes, checksum.
    pub fn validate(&self) -> Result<(), ZooError> {
        if self.format_version != BUNDLE_FORMAT_VERSION {
            return Err(ZooError::VersionMismatch {
                found: self.format_version,
                expected: BUNDLE_FORMAT_VERSION,
            });
        }
        if self.context_len != CONTEXT_LEN {
            return Err(ZooError::InvalidBundle(format!(
                "context_len {}",
                self.context_len
            )));
        }
        if self.feature_order != FEATURE_NAMES {
            return Err(ZooError::InvalidBundle(format!(
                "feature order {:?}",
                self.feature_order
            )));
        }
        let specs = self.variant_id.param_specs();
        if specs.len() != self.params.len() {
            return Err(ZooError::ShapeMismatch(format!(
                "{} expects {} parameter tensors, bundle has {}",
                self.variant_id,
                specs.len(),
                self.params.len()
            )));
        }
        for (spec, p) in specs.iter().zip(&self.params) {
            if spec.name != p.name || spec.shape != p.shape {
                return Err(ZooError::ShapeMismatch(format!(
                    "expected {} {:?}, found {} {:?}",
                    spec.name, spec.shape, p.name, p.shape
                )));
            }
            let n: usize = p.shape.iter().product();
            if n != p.values.len() {
                return Err(ZooError::ShapeMismatch(format!(
                    "{}: shape {:?} holds {n} values, found {}",
                    p.name,
                    p.shape,
                    p.values.len()
                )));
            }
        }
        let computed = params_checksum(&self.params);
        if computed != self.checksum {
            return Err(ZooError::ChecksumMismatch {
                stored: self.checksum,
                computed,
            });
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("plain data")
    }

    pub fn from_json(text: &str) -> Result<Self, ZooError> {
        // read the version first so that future layouts report a clean error
        let value: serde_json::Value = serde_json::from_str(text)?;
        let found = value
            .get("format_version")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| ZooError::InvalidBundle("missing format_version".into()))?;
        if found != u64::from(BUNDLE_FORMAT_VERSION) {
            return Err(ZooError::VersionMismatch {
                found: found.min(u64::from(u32::MAX)) as u32,
                expected: BUNDLE_FORMAT_VERSION,
            });
        }
        let bundle: Self = serde_json::from_value(value)?;
        bundle.validate()?;
        Ok(bundle)
    }

    pub fn save(&self, path: &Path) -> Result<(), ZooError> {
        let mut text = self.to_json();
        text.push('\n');
        fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ZooError> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}
