use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::matrix::Matrix;
use crate::error::{Error, Result};

/// Hidden-layer nonlinearity. Only the logistic function is supported.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Logistic,
}

/// Architecture of the feed-forward frame classifier: logistic hidden
/// layers followed by a softmax output layer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub num_classes: usize,
    #[serde(default)]
    pub activation: Activation,
}

impl ModelSpec {
    pub fn new(input_dim: usize, hidden_dims: Vec<usize>, num_classes: usize) -> Result<Self> {
        let spec = Self {
            input_dim,
            hidden_dims,
            num_classes,
            activation: Activation::Logistic,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_dims.is_empty() {
            return Err(Error::Shape("model needs at least one hidden layer".into()));
        }
        if self.input_dim == 0 || self.num_classes == 0 || self.hidden_dims.contains(&0) {
            return Err(Error::Shape("all model dimensions must be >= 1".into()));
        }
        Ok(())
    }

    /// Number of affine layers (hidden layers plus the output layer).
    pub fn num_layers(&self) -> usize {
        self.hidden_dims.len() + 1
    }

    /// `(fan_in, fan_out)` of every affine layer, input to output.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.num_layers());
        let mut fan_in = self.input_dim;
        for &h in &self.hidden_dims {
            dims.push((fan_in, h));
            fan_in = h;
        }
        dims.push((fan_in, self.num_classes));
        dims
    }

    /// Parameter layout: for each layer its weight matrix `[fan_in x fan_out]`
    /// followed by its bias `[fan_out x 1]`.
    pub fn layout(&self) -> Vec<Block> {
        let mut blocks = Vec::with_capacity(2 * self.num_layers());
        let mut offset = 0;
        for (layer, (fan_in, fan_out)) in self.layer_dims().into_iter().enumerate() {
            blocks.push(Block {
                layer,
                kind: BlockKind::WeightMatrix,
                rows: fan_in,
                cols: fan_out,
                offset,
            });
            offset += fan_in * fan_out;
            blocks.push(Block {
                layer,
                kind: BlockKind::Bias,
                rows: fan_out,
                cols: 1,
                offset,
            });
            offset += fan_out;
        }
        blocks
    }

    pub fn num_params(&self) -> usize {
        self.layout().iter().map(Block::len).sum()
    }

    /// Uniform `[-a, a]` weights with `a = sqrt(6 / (fan_in + fan_out))`, zero biases.
    pub fn init_params(&self, seed: u64) -> ParameterVector {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut theta = ParameterVector::zeros(self.layout());
        for block in self.layout() {
            if block.kind != BlockKind::WeightMatrix {
                continue;
            }
            let a = (6.0 / (block.rows + block.cols) as f64).sqrt();
            for v in theta.block_mut(&block) {
                *v = rng.random_range(-a..=a);
            }
        }
        theta
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    WeightMatrix,
    Bias,
}

/// One contiguous parameter block inside a [`ParameterVector`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Block {
    pub layer: usize,
    pub kind: BlockKind,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
}

impl Block {
    #[inline]
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Where a single coordinate lives: block plus row/column inside it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Position {
    pub layer: usize,
    pub kind: BlockKind,
    pub i: usize,
    pub j: usize,
    pub m: usize,
    pub n: usize,
}

/// Flattened model weights with their block layout.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterVector {
    values: Vec<f64>,
    layout: Vec<Block>,
}

impl ParameterVector {
    pub fn zeros(layout: Vec<Block>) -> Self {
        let len = layout.iter().map(Block::len).sum();
        Self {
            values: vec![0.0; len],
            layout,
        }
    }

    pub fn from_values(layout: Vec<Block>, values: Vec<f64>) -> Result<Self> {
        validate_layout(&layout)?;
        let total: usize = layout.iter().map(Block::len).sum();
        if total != values.len() {
            return Err(Error::Shape(format!(
                "layout covers {total} coordinates but {} values were given",
                values.len()
            )));
        }
        Ok(Self { values, layout })
    }

    /// Same layout, new values.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        if values.len() != self.values.len() {
            return Err(Error::Shape(format!(
                "expected {} values, got {}",
                self.values.len(),
                values.len()
            )));
        }
        Ok(Self {
            values,
            layout: self.layout.clone(),
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            values: vec![0.0; self.values.len()],
            layout: self.layout.clone(),
        }
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.values.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn layout(&self) -> &[Block] {
        &self.layout
    }

    pub fn block(&self, block: &Block) -> &[f64] {
        &self.values[block.range()]
    }

    pub fn block_mut(&mut self, block: &Block) -> &mut [f64] {
        &mut self.values[block.range()]
    }

    /// Weight matrix and bias of affine layer `layer`.
    pub fn layer(&self, layer: usize) -> (&[f64], &[f64]) {
        let w = &self.layout[2 * layer];
        let b = &self.layout[2 * layer + 1];
        (&self.values[w.range()], &self.values[b.range()])
    }

    /// Checks that this vector was laid out for `spec`.
    pub fn check_matches(&self, spec: &ModelSpec) -> Result<()> {
        if self.layout != spec.layout() {
            return Err(Error::Shape(
                "parameter layout does not match model spec".into(),
            ));
        }
        Ok(())
    }

    /// Maps a flat coordinate index to its block position.
    pub fn position(&self, coord: usize) -> Option<Position> {
        let block = self.layout.iter().find(|b| b.range().contains(&coord))?;
        let local = coord - block.offset;
        Some(Position {
            layer: block.layer,
            kind: block.kind,
            i: local / block.cols,
            j: local % block.cols,
            m: block.rows,
            n: block.cols,
        })
    }

    /// Normalised `(i/m, j/n)` for every coordinate, in index order.
    pub fn normalized_positions(&self) -> Vec<(f64, f64)> {
        let mut out = Vec::with_capacity(self.len());
        for block in &self.layout {
            for i in 0..block.rows {
                for j in 0..block.cols {
                    out.push((i as f64 / block.rows as f64, j as f64 / block.cols as f64));
                }
            }
        }
        out
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

fn validate_layout(layout: &[Block]) -> Result<()> {
    let mut expected = 0;
    for b in layout {
        if b.offset != expected {
            return Err(Error::Shape(format!(
                "layout block at offset {} is not contiguous (expected {expected})",
                b.offset
            )));
        }
        if b.kind == BlockKind::Bias && b.cols != 1 {
            return Err(Error::Shape("bias blocks must have one column".into()));
        }
        expected += b.len();
    }
    Ok(())
}

/// Frames with class labels and silence flags.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameBatch {
    pub features: Matrix,
    pub labels: Vec<usize>,
    pub is_silence: Vec<bool>,
}

impl FrameBatch {
    pub fn new(features: Matrix, labels: Vec<usize>, is_silence: Vec<bool>) -> Result<Self> {
        if features.rows() != labels.len() || labels.len() != is_silence.len() {
            return Err(Error::Shape(format!(
                "frame batch has {} feature rows, {} labels, {} silence flags",
                features.rows(),
                labels.len(),
                is_silence.len()
            )));
        }
        Ok(Self {
            features,
            labels,
            is_silence,
        })
    }

    pub fn empty(dim: usize) -> Self {
        Self {
            features: Matrix::zeros(0, dim),
            labels: Vec::new(),
            is_silence: Vec::new(),
        }
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn check_labels(&self, num_classes: usize) -> Result<()> {
        match self.labels.iter().position(|&y| y >= num_classes) {
            Some(f) => Err(Error::Precondition(format!(
                "label {} at frame {f} is outside [0, {num_classes})",
                self.labels[f]
            ))),
            None => Ok(()),
        }
    }

    pub fn slice(&self, start: usize, end: usize) -> FrameBatch {
        FrameBatch {
            features: self.features.slice_rows(start, end),
            labels: self.labels[start..end].to_vec(),
            is_silence: self.is_silence[start..end].to_vec(),
        }
    }

    pub fn select(&self, indices: &[usize]) -> FrameBatch {
        FrameBatch {
            features: self.features.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            is_silence: indices.iter().map(|&i| self.is_silence[i]).collect(),
        }
    }

    /// Same frames with replaced labels.
    pub fn with_labels(&self, labels: Vec<usize>) -> Result<FrameBatch> {
        FrameBatch::new(self.features.clone(), labels, self.is_silence.clone())
    }

    pub fn concat(parts: &[&FrameBatch], dim: usize) -> Result<FrameBatch> {
        let feats: Vec<&Matrix> = parts.iter().map(|p| &p.features).collect();
        let features = Matrix::vstack(&feats, dim)?;
        let labels = parts
            .iter()
            .flat_map(|p| p.labels.iter().copied())
            .collect();
        let is_silence = parts
            .iter()
            .flat_map(|p| p.is_silence.iter().copied())
            .collect();
        FrameBatch::new(features, labels, is_silence)
    }

    pub fn silence_count(&self) -> usize {
        self.is_silence.iter().filter(|&&s| s).count()
    }
}
