//! LHUC and linear-transform overlays and their files
//! (`<name>.overlay.json` + `<name>.overlay.bin`, little-endian f32).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::binio;
use crate::error::{Error, Result};
use crate::nn_core::{HiddenOverlay, Matrix, ModelSpec};

/// Per-unit multipliers for every hidden layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LhucParams {
    pub r: Vec<Vec<f64>>,
}

impl LhucParams {
    pub fn ones(spec: &ModelSpec) -> Self {
        Self {
            r: spec.hidden_dims.iter().map(|&d| vec![1.0; d]).collect(),
        }
    }

    pub fn constant(spec: &ModelSpec, value: f64) -> Self {
        Self {
            r: spec.hidden_dims.iter().map(|&d| vec![value; d]).collect(),
        }
    }

    pub fn as_overlay(&self) -> HiddenOverlay<'_> {
        HiddenOverlay::Scale(&self.r)
    }
}

/// Square transform applied after one hidden layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearTransformParams {
    pub layer: usize,
    pub a: Matrix,
}

impl LinearTransformParams {
    pub fn identity(spec: &ModelSpec, layer: usize) -> Result<Self> {
        let d = *spec
            .hidden_dims
            .get(layer)
            .ok_or_else(|| Error::Precondition(format!("hidden layer {layer} does not exist")))?;
        Ok(Self {
            layer,
            a: Matrix::identity(d),
        })
    }

    pub fn as_overlay(&self) -> HiddenOverlay<'_> {
        HiddenOverlay::Linear {
            layer: self.layer,
            matrix: &self.a,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct OverlayManifest {
    format_version: u32,
    kind: String,
    /// LHUC: width of each hidden layer. LINEAR: `[d]`.
    widths: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    layer: Option<usize>,
    byte_order: String,
    dtype: String,
}

/// Either overlay kind, as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub enum Overlay {
    Lhuc(LhucParams),
    Linear(LinearTransformParams),
}

pub fn save_overlay(prefix: &Path, overlay: &Overlay) -> Result<()> {
    let (kind, widths, layer, values) = match overlay {
        Overlay::Lhuc(l) => (
            "lhuc",
            l.r.iter().map(Vec::len).collect(),
            None,
            l.r.concat(),
        ),
        Overlay::Linear(l) => (
            "linear",
            vec![l.a.rows()],
            Some(l.layer),
            l.a.as_slice().to_vec(),
        ),
    };
    let manifest = OverlayManifest {
        format_version: 1,
        kind: kind.into(),
        widths,
        layer,
        byte_order: "little".into(),
        dtype: "f32".into(),
    };
    binio::write(
        &binio::with_suffix(prefix, ".overlay.bin"),
        &binio::f32_bytes(&values),
    )?;
    binio::write(
        &binio::with_suffix(prefix, ".overlay.json"),
        serde_json::to_string_pretty(&manifest)?.as_bytes(),
    )
}

pub fn load_overlay(prefix: &Path) -> Result<Overlay> {
    let m: OverlayManifest =
        serde_json::from_slice(&binio::read(&binio::with_suffix(prefix, ".overlay.json"))?)?;
    if m.format_version != 1 {
        return Err(Error::Format(format!(
            "unsupported overlay format_version {}",
            m.format_version
        )));
    }
    let values = binio::parse_f32(
        &binio::read(&binio::with_suffix(prefix, ".overlay.bin"))?,
        "overlay",
    )?;
    match (m.kind.as_str(), m.layer) {
        ("lhuc", None) => {
            if values.len() != m.widths.iter().sum::<usize>() {
                return Err(Error::Format("LHUC overlay length mismatch".into()));
            }
            let mut r = Vec::with_capacity(m.widths.len());
            let mut off = 0;
            for w in m.widths {
                r.push(values[off..off + w].to_vec());
                off += w;
            }
            Ok(Overlay::Lhuc(LhucParams { r }))
        }
        ("linear", Some(layer)) if m.widths.len() == 1 => {
            let d = m.widths[0];
            let a = Matrix::from_vec(d, d, values)
                .map_err(|e| Error::Format(format!("linear overlay: {e}")))?;
            Ok(Overlay::Linear(LinearTransformParams { layer, a }))
        }
        (kind, _) => Err(Error::Format(format!("malformed overlay of kind {kind:?}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overlay_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = ModelSpec::new(3, vec![4, 2], 2).unwrap();
        let mut lhuc = LhucParams::ones(&spec);
        lhuc.r[1][1] = 0.5;
        let p = dir.path().join("spk");
        save_overlay(&p, &Overlay::Lhuc(lhuc.clone())).unwrap();
        assert_eq!(load_overlay(&p).unwrap(), Overlay::Lhuc(lhuc));

        let mut lin = LinearTransformParams::identity(&spec, 1).unwrap();
        lin.a.set(0, 1, 0.25);
        save_overlay(&p, &Overlay::Linear(lin.clone())).unwrap();
        assert_eq!(load_overlay(&p).unwrap(), Overlay::Linear(lin));
    }
}
