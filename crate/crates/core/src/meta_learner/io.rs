//! Meta-model files: `<name>.meta.json` manifest plus `<name>.meta.bin`
//! (little-endian f32). Parameter order in the binary: first-layer gates in
//! the order input, forget, output, candidate (each `Wx [H x D]`,
//! `Wh [H x H]`, `b [H]`), then `W_F [H+1]`, `b_F`, `W_I [H+1]`, `b_I`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::{InputVariant, MetaParams};
use super::preprocess::{PreprocessConfig, ThresholdRule};
use crate::binio;
use crate::error::{Error, Result};

pub const META_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetaManifest {
    pub format_version: u32,
    #[serde(rename = "H")]
    pub hidden: usize,
    pub input_variant: InputVariant,
    pub p: f64,
    #[serde(default)]
    pub threshold: ThresholdRule,
}

pub fn save_meta(prefix: &Path, params: &MetaParams) -> Result<()> {
    let manifest = MetaManifest {
        format_version: META_FORMAT_VERSION,
        hidden: params.hidden(),
        input_variant: params.variant(),
        p: params.preprocess().p,
        threshold: params.preprocess().threshold,
    };
    binio::write(
        &binio::with_suffix(prefix, ".meta.bin"),
        &binio::f32_bytes(params.values()),
    )?;
    let json = serde_json::to_string_pretty(&manifest)?;
    binio::write(&binio::with_suffix(prefix, ".meta.json"), json.as_bytes())
}

pub fn load_meta(prefix: &Path) -> Result<MetaParams> {
    let manifest: MetaManifest =
        serde_json::from_slice(&binio::read(&binio::with_suffix(prefix, ".meta.json"))?)?;
    if manifest.format_version != META_FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported meta-model format_version {}",
            manifest.format_version
        )));
    }
    let values = binio::parse_f32(
        &binio::read(&binio::with_suffix(prefix, ".meta.bin"))?,
        "meta-model parameters",
    )?;
    let cfg = PreprocessConfig {
        p: manifest.p,
        threshold: manifest.threshold,
    };
    MetaParams::from_values(manifest.hidden, manifest.input_variant, cfg, values)
        .map_err(|e| Error::Format(format!("meta-model parameters: {e}")))
}
