//! Model files: `<name>.json` manifest plus `<name>.bin` little-endian f32
//! weights in layout order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{Block, ModelSpec, ParameterVector};
use crate::binio;
use crate::error::{Error, Result};

pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelManifest {
    pub format_version: u32,
    pub spec: ModelSpec,
    pub layout: Vec<Block>,
    pub weights_file: String,
    pub byte_order: String,
    pub dtype: String,
}

/// Writes `<prefix>.json` and `<prefix>.bin`.
pub fn save_model(prefix: &Path, spec: &ModelSpec, theta: &ParameterVector) -> Result<()> {
    theta.check_matches(spec)?;
    let bin = binio::with_suffix(prefix, ".bin");
    let manifest = ModelManifest {
        format_version: MODEL_FORMAT_VERSION,
        spec: spec.clone(),
        layout: theta.layout().to_vec(),
        weights_file: file_name(&bin),
        byte_order: "little".into(),
        dtype: "f32".into(),
    };
    binio::write(&bin, &binio::f32_bytes(theta.values()))?;
    let json = serde_json::to_string_pretty(&manifest)?;
    binio::write(&binio::with_suffix(prefix, ".json"), json.as_bytes())
}

pub fn load_model(prefix: &Path) -> Result<(ModelSpec, ParameterVector)> {
    let json_path = binio::with_suffix(prefix, ".json");
    let manifest: ModelManifest = serde_json::from_slice(&binio::read(&json_path)?)?;
    if manifest.format_version != MODEL_FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported model format_version {}",
            manifest.format_version
        )));
    }
    if manifest.byte_order != "little" || manifest.dtype != "f32" {
        return Err(Error::Format(
            "model weights must be little-endian f32".into(),
        ));
    }
    manifest.spec.validate()?;
    if manifest.layout != manifest.spec.layout() {
        return Err(Error::Format(
            "manifest layout does not match its spec".into(),
        ));
    }
    let bin = json_path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(&manifest.weights_file);
    let values = binio::parse_f32(&binio::read(&bin)?, "model weights")?;
    let theta = ParameterVector::from_values(manifest.layout, values)
        .map_err(|e| Error::Format(format!("model weights: {e}")))?;
    Ok((manifest.spec, theta))
}

pub(crate) fn file_name(path: &Path) -> String {
    path.file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_f32_exact() {
        let dir = tempfile::tempdir().unwrap();
        let spec = ModelSpec::new(4, vec![5, 3], 2).unwrap();
        let theta = spec.init_params(1);
        let prefix = dir.path().join("am");
        save_model(&prefix, &spec, &theta).unwrap();
        let (spec2, theta2) = load_model(&prefix).unwrap();
        assert_eq!(spec, spec2);
        for (a, b) in theta.values().iter().zip(theta2.values()) {
            assert_eq!((*a as f32).to_bits(), (*b as f32).to_bits());
        }
        // a second cycle is lossless
        save_model(&prefix, &spec2, &theta2).unwrap();
        assert_eq!(load_model(&prefix).unwrap().1, theta2);
    }

    #[test]
    fn truncated_weights_fail() {
        let dir = tempfile::tempdir().unwrap();
        let spec = ModelSpec::new(2, vec![2], 2).unwrap();
        let prefix = dir.path().join("m");
        save_model(&prefix, &spec, &spec.init_params(0)).unwrap();
        let bin = dir.path().join("m.bin");
        let bytes = std::fs::read(&bin).unwrap();
        std::fs::write(&bin, &bytes[..bytes.len() - 4]).unwrap();
        assert!(load_model(&prefix).is_err());
    }
}
