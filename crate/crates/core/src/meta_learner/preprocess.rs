use serde::{Deserialize, Serialize};

use super::params::InputVariant;
use crate::error::{Error, Result};

/// Which magnitude separates the log branch from the linear branch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdRule {
    /// `|x| >= e^{-p}`
    #[default]
    ExpNegP,
    /// `|x| >= e^{p}`; the linear branch then covers almost every loss value.
    ExpP,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreprocessConfig {
    pub p: f64,
    #[serde(default)]
    pub threshold: ThresholdRule,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            p: 10.0,
            threshold: ThresholdRule::ExpNegP,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if self.p > 0.0 && self.p.is_finite() {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "preprocess p must be > 0, got {}",
                self.p
            )))
        }
    }

    fn threshold(&self) -> f64 {
        match self.threshold {
            ThresholdRule::ExpNegP => (-self.p).exp(),
            ThresholdRule::ExpP => self.p.exp(),
        }
    }
}

/// Log-magnitude / sign encoding of a loss or gradient value:
/// `(ln|x| / p, sgn x)` for large `|x|`, `(-1, e^p x)` otherwise.
pub fn preprocess(x: f64, cfg: &PreprocessConfig) -> Result<(f64, f64)> {
    if !x.is_finite() {
        return Err(Error::NonFinite(format!("preprocess input {x}")));
    }
    Ok(preprocess_unchecked(x, cfg))
}

#[inline]
pub(crate) fn preprocess_unchecked(x: f64, cfg: &PreprocessConfig) -> (f64, f64) {
    if x.abs() >= cfg.threshold() {
        (x.abs().ln() / cfg.p, x.signum())
    } else {
        (-1.0, cfg.p.exp() * x)
    }
}

/// Weight coordinates inside its block, for the position input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CoordPosition {
    pub i: usize,
    pub j: usize,
    pub m: usize,
    pub n: usize,
}

/// Raw and preprocessed meta-learner input for one coordinate.
#[derive(Clone, Debug, PartialEq)]
pub struct CoordinateInput {
    pub raw: Vec<f64>,
    pub preprocessed: Vec<f64>,
}

/// Value variant: `[θ, pre(L), pre(g)]`; position variant:
/// `[i/m, j/n, pre(L), pre(g)]`. θ and positions are not preprocessed.
pub fn build_input(
    variant: InputVariant,
    theta: f64,
    position: CoordPosition,
    loss: f64,
    grad: f64,
    cfg: &PreprocessConfig,
) -> Result<CoordinateInput> {
    let (l0, l1) = preprocess(loss, cfg)?;
    let (g0, g1) = preprocess(grad, cfg)?;
    match variant {
        InputVariant::Value => Ok(CoordinateInput {
            raw: vec![theta, loss, grad],
            preprocessed: vec![theta, l0, l1, g0, g1],
        }),
        InputVariant::Position => {
            let CoordPosition { i, j, m, n } = position;
            if i >= m || j >= n {
                return Err(Error::Precondition(format!(
                    "position ({i}, {j}) outside a {m}x{n} block"
                )));
            }
            let (pi, pj) = (i as f64 / m as f64, j as f64 / n as f64);
            Ok(CoordinateInput {
                raw: vec![pi, pj, loss, grad],
                preprocessed: vec![pi, pj, l0, l1, g0, g1],
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> PreprocessConfig {
        PreprocessConfig::default()
    }

    #[test]
    fn branch_values() {
        assert_eq!(preprocess(0.0, &cfg()).unwrap(), (-1.0, 0.0));
        assert_eq!(preprocess(1.0, &cfg()).unwrap(), (0.0, 1.0));
        let (a, b) = preprocess(20f64.exp(), &cfg()).unwrap();
        assert!((a - 2.0).abs() < 1e-15);
        assert_eq!(b, 1.0);
        let (a, b) = preprocess(-(-20f64).exp(), &cfg()).unwrap();
        assert_eq!(a, -1.0);
        assert!((b + (-10f64).exp()).abs() < 1e-18);
        assert!((b + 4.539993e-5).abs() < 1e-11);
    }

    #[test]
    fn continuous_at_threshold() {
        let t = (-10f64).exp();
        for x in [t, -t] {
            let at = preprocess(x, &cfg()).unwrap();
            let below = preprocess(x * (1.0 - 1e-15), &cfg()).unwrap();
            assert!((at.0 - below.0).abs() <= 1e-12, "{at:?} {below:?}");
            assert!((at.1 - below.1).abs() <= 1e-12, "{at:?} {below:?}");
        }
    }

    #[test]
    fn printed_threshold_is_selectable() {
        let c = PreprocessConfig {
            p: 10.0,
            threshold: ThresholdRule::ExpP,
        };
        assert_eq!(preprocess(1.0, &c).unwrap(), (-1.0, 10f64.exp()));
        assert_eq!(preprocess(30f64.exp(), &c).unwrap().1, 1.0);
    }

    #[test]
    fn non_finite_rejected() {
        assert!(preprocess(f64::NAN, &cfg()).is_err());
        assert!(preprocess(f64::INFINITY, &cfg()).is_err());
    }

    #[test]
    fn inputs_for_both_variants() {
        let origin = CoordPosition {
            i: 0,
            j: 0,
            m: 4,
            n: 4,
        };
        let v = build_input(InputVariant::Value, 0.5, origin, 1.0, 0.0, &cfg()).unwrap();
        assert_eq!(v.preprocessed, vec![0.5, 0.0, 1.0, -1.0, 0.0]);
        let p = build_input(InputVariant::Position, 9.0, origin, 1.0, 1.0, &cfg()).unwrap();
        assert_eq!(p.preprocessed, vec![0.0, 0.0, 0.0, 1.0, 0.0, 1.0]);
        let corner = CoordPosition {
            i: 3,
            j: 3,
            m: 4,
            n: 4,
        };
        let p = build_input(InputVariant::Position, 0.0, corner, 1.0, 1.0, &cfg()).unwrap();
        assert_eq!(&p.preprocessed[..2], &[0.75, 0.75]);
        let bad = CoordPosition {
            i: 4,
            j: 0,
            m: 4,
            n: 4,
        };
        assert!(build_input(InputVariant::Position, 0.0, bad, 1.0, 1.0, &cfg()).is_err());
    }
}
