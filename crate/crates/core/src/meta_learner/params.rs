use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::preprocess::PreprocessConfig;
use crate::error::{Error, Result};

/// What the first LSTM layer sees besides the preprocessed loss and gradient.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputVariant {
    /// `[θ, L, g]`
    Value,
    /// `[i/m, j/n, L, g]`
    #[default]
    Position,
}

impl InputVariant {
    /// Scalars before preprocessing.
    pub fn raw_width(self) -> usize {
        match self {
            InputVariant::Value => 3,
            InputVariant::Position => 4,
        }
    }

    /// Width after `L` and `g` each expand to a pair.
    pub fn input_width(self) -> usize {
        self.raw_width() + 2
    }
}

impl std::str::FromStr for InputVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "value" => Ok(InputVariant::Value),
            "position" => Ok(InputVariant::Position),
            other => Err(Error::Config(format!("unknown input variant {other:?}"))),
        }
    }
}

impl std::fmt::Display for InputVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            InputVariant::Value => "value",
            InputVariant::Position => "position",
        })
    }
}

/// Gate order inside the first LSTM layer.
pub const GATE_INPUT: usize = 0;
pub const GATE_FORGET: usize = 1;
pub const GATE_OUTPUT: usize = 2;
pub const GATE_CANDIDATE: usize = 3;

/// Offsets into the flat meta-parameter vector.
///
/// For each gate (input, forget, output, candidate): `Wx [H x D]`,
/// `Wh [H x H]`, `b [H]`; then `W_F [H+1]`, `b_F`, `W_I [H+1]`, `b_I`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MetaLayout {
    pub hidden: usize,
    pub input_width: usize,
}

impl MetaLayout {
    #[inline]
    fn gate_len(&self) -> usize {
        self.hidden * self.input_width + self.hidden * self.hidden + self.hidden
    }

    #[inline]
    pub fn wx(&self, gate: usize) -> usize {
        gate * self.gate_len()
    }

    #[inline]
    pub fn wh(&self, gate: usize) -> usize {
        self.wx(gate) + self.hidden * self.input_width
    }

    #[inline]
    pub fn bias(&self, gate: usize) -> usize {
        self.wh(gate) + self.hidden * self.hidden
    }

    #[inline]
    pub fn w_f(&self) -> usize {
        4 * self.gate_len()
    }

    #[inline]
    pub fn b_f(&self) -> usize {
        self.w_f() + self.hidden + 1
    }

    #[inline]
    pub fn w_i(&self) -> usize {
        self.b_f() + 1
    }

    #[inline]
    pub fn b_i(&self) -> usize {
        self.w_i() + self.hidden + 1
    }

    pub fn len(&self) -> usize {
        self.b_i() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Human-readable name of a flat index, for gradient-check reports.
    pub fn describe(&self, k: usize) -> String {
        const GATES: [&str; 4] = ["input", "forget", "output", "candidate"];
        if k < self.w_f() {
            let g = k / self.gate_len();
            let local = k - self.wx(g);
            let (part, idx) = if local < self.hidden * self.input_width {
                ("Wx", local)
            } else if local < self.hidden * (self.input_width + self.hidden) {
                ("Wh", local - self.hidden * self.input_width)
            } else {
                ("b", local - self.hidden * (self.input_width + self.hidden))
            };
            format!("layer1.{}.{}[{}]", GATES[g], part, idx)
        } else if k < self.b_f() {
            format!("W_F[{}]", k - self.w_f())
        } else if k == self.b_f() {
            "b_F".into()
        } else if k < self.b_i() {
            format!("W_I[{}]", k - self.w_i())
        } else {
            "b_I".into()
        }
    }
}

/// All meta-learner parameters, stored flat in file order.
#[derive(Clone, Debug, PartialEq)]
pub struct MetaParams {
    layout: MetaLayout,
    variant: InputVariant,
    preprocess: PreprocessConfig,
    values: Vec<f64>,
    pinned_gates: Option<(f64, f64)>,
}

impl MetaParams {
    pub fn zeros(
        hidden: usize,
        variant: InputVariant,
        preprocess: PreprocessConfig,
    ) -> Result<Self> {
        if hidden == 0 {
            return Err(Error::Precondition(
                "meta-learner hidden size must be >= 1".into(),
            ));
        }
        preprocess.validate()?;
        let layout = MetaLayout {
            hidden,
            input_width: variant.input_width(),
        };
        Ok(Self {
            layout,
            variant,
            preprocess,
            values: vec![0.0; layout.len()],
            pinned_gates: None,
        })
    }

    pub fn from_values(
        hidden: usize,
        variant: InputVariant,
        preprocess: PreprocessConfig,
        values: Vec<f64>,
    ) -> Result<Self> {
        let mut p = Self::zeros(hidden, variant, preprocess)?;
        if values.len() != p.values.len() {
            return Err(Error::Shape(format!(
                "meta-learner with H={hidden} needs {} values, got {}",
                p.values.len(),
                values.len()
            )));
        }
        p.values = values;
        Ok(p)
    }

    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        Self::from_values(self.hidden(), self.variant, self.preprocess, values)
    }

    pub fn hidden(&self) -> usize {
        self.layout.hidden
    }

    pub fn variant(&self) -> InputVariant {
        self.variant
    }

    pub fn preprocess(&self) -> &PreprocessConfig {
        &self.preprocess
    }

    pub fn layout(&self) -> &MetaLayout {
        &self.layout
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn w_f(&self) -> &[f64] {
        let o = self.layout.w_f();
        &self.values[o..o + self.hidden() + 1]
    }

    pub fn w_i(&self) -> &[f64] {
        let o = self.layout.w_i();
        &self.values[o..o + self.hidden() + 1]
    }

    pub fn b_f(&self) -> f64 {
        self.values[self.layout.b_f()]
    }

    pub fn b_i(&self) -> f64 {
        self.values[self.layout.b_i()]
    }

    pub fn set_b_f(&mut self, v: f64) {
        let o = self.layout.b_f();
        self.values[o] = v;
    }

    pub fn set_b_i(&mut self, v: f64) {
        let o = self.layout.b_i();
        self.values[o] = v;
    }

    /// Zeroes `W_F` and `W_I`, leaving gates driven by their biases only.
    pub fn zero_gate_weights(&mut self) {
        let h = self.hidden() + 1;
        let (f, i) = (self.layout.w_f(), self.layout.w_i());
        self.values[f..f + h].iter_mut().for_each(|v| *v = 0.0);
        self.values[i..i + h].iter_mut().for_each(|v| *v = 0.0);
    }

    /// Test hook: bypasses the LSTM and uses fixed `(forget, input)` gate values.
    pub fn with_pinned_gates(mut self, forget: f64, input: f64) -> Self {
        self.pinned_gates = Some((forget, input));
        self
    }

    pub fn pinned_gates(&self) -> Option<(f64, f64)> {
        self.pinned_gates
    }
}

/// Seeded initialization: `b_F ~ U[4, 5]`, `b_I ~ U[-5, -4]`, every other
/// weight `U[-0.1, 0.1]`, first-layer biases zero.
pub fn init_meta_params(
    hidden: usize,
    variant: InputVariant,
    preprocess: PreprocessConfig,
    seed: u64,
) -> Result<MetaParams> {
    let mut p = MetaParams::zeros(hidden, variant, preprocess)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let l = *p.layout();
    for gate in 0..4 {
        for k in l.wx(gate)..l.bias(gate) {
            p.values[k] = rng.random_range(-0.1..=0.1);
        }
    }
    for k in l.w_f()..l.b_f() {
        p.values[k] = rng.random_range(-0.1..=0.1);
    }
    for k in l.w_i()..l.b_i() {
        p.values[k] = rng.random_range(-0.1..=0.1);
    }
    p.values[l.b_f()] = rng.random_range(4.0..=5.0);
    p.values[l.b_i()] = rng.random_range(-5.0..=-4.0);
    Ok(p)
}
