use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adaptation::{ALL_DEFAULT_LR, DEFAULT_EPOCHS, LHUC_DEFAULT_LR};
use crate::error::{Error, Result};
use crate::meta_learner::{InputVariant, PreprocessConfig, ThresholdRule};
use crate::meta_training::{AdamConfig, MetaTrainConfig, TargetRegime};
use crate::nn_core::{AmTrainConfig, ModelSpec};
use crate::speaker_sim::{CorpusConfig, FilterConfig};

/// Speaker-independent model shape and training schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AmSection {
    pub hidden_dims: Vec<usize>,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for AmSection {
    fn default() -> Self {
        let t = AmTrainConfig::default();
        Self {
            hidden_dims: vec![64; 6],
            epochs: t.epochs,
            learning_rate: t.learning_rate,
            batch_size: t.batch_size,
            seed: 0,
        }
    }
}

impl AmSection {
    pub fn train_config(&self) -> AmTrainConfig {
        AmTrainConfig {
            epochs: self.epochs,
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetaSection {
    /// Frames per chunk.
    pub chunk_len: usize,
    pub hidden: usize,
    pub input_variant: InputVariant,
    pub p: f64,
    pub threshold: ThresholdRule,
    pub learning_rate: f64,
    pub epochs: usize,
    pub steps: usize,
    pub mode: TargetRegime,
    pub seed: u64,
}

impl Default for MetaSection {
    fn default() -> Self {
        let m = MetaTrainConfig::default();
        Self {
            chunk_len: 1000,
            hidden: m.hidden,
            input_variant: m.input_variant,
            p: m.preprocess.p,
            threshold: m.preprocess.threshold,
            learning_rate: m.adam.learning_rate,
            epochs: m.epochs,
            steps: m.steps,
            mode: TargetRegime::Supervised,
            seed: 0,
        }
    }
}

impl MetaSection {
    pub fn train_config(&self) -> MetaTrainConfig {
        MetaTrainConfig {
            hidden: self.hidden,
            input_variant: self.input_variant,
            preprocess: PreprocessConfig {
                p: self.p,
                threshold: self.threshold,
            },
            adam: AdamConfig::with_lr(self.learning_rate),
            epochs: self.epochs,
            steps: self.steps,
            seed: self.seed,
        }
    }
}

/// Evaluation protocol and baseline schedules.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptSection {
    pub seconds: f64,
    pub epochs: usize,
    pub all_lr: f64,
    pub lhuc_lr: f64,
    pub linear_lr: f64,
    /// Hidden layer receiving the linear transform; the middle one if unset.
    pub linear_layer: Option<usize>,
    pub meta_steps: usize,
}

impl Default for AdaptSection {
    fn default() -> Self {
        Self {
            seconds: 10.0,
            epochs: DEFAULT_EPOCHS,
            all_lr: ALL_DEFAULT_LR,
            lhuc_lr: LHUC_DEFAULT_LR,
            linear_lr: 0.01,
            linear_layer: None,
            meta_steps: 1,
        }
    }
}

/// Every setting of a run in one document.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub corpus: CorpusConfig,
    pub filter: FilterConfig,
    pub am: AmSection,
    pub meta: MetaSection,
    pub adaptation: AdaptSection,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.filter.validate()?;
        self.model_spec()?;
        if self.am.batch_size == 0 {
            return Err(Error::Config("am.batch_size must be >= 1".into()));
        }
        if self.meta.chunk_len == 0 {
            return Err(Error::Config("meta.chunk_len must be >= 1".into()));
        }
        self.meta.train_config().validate()?;
        let a = &self.adaptation;
        if !(a.seconds > 0.0 && a.seconds.is_finite()) {
            return Err(Error::Config(format!(
                "adaptation.seconds must be > 0, got {}",
                a.seconds
            )));
        }
        if a.epochs == 0 || a.meta_steps == 0 {
            return Err(Error::Config(
                "adaptation epochs and meta_steps must be >= 1".into(),
            ));
        }
        if let Some(l) = a.linear_layer {
            if l >= self.am.hidden_dims.len() {
                return Err(Error::Config(format!(
                    "adaptation.linear_layer {l} does not exist"
                )));
            }
        }
        Ok(())
    }

    pub fn model_spec(&self) -> Result<ModelSpec> {
        ModelSpec::new(
            self.corpus.spliced_dim(),
            self.am.hidden_dims.clone(),
            self.corpus.num_classes,
        )
        .map_err(|e| Error::Config(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        assert_eq!(RunConfig::from_toml("").unwrap(), cfg);
    }

    #[test]
    fn documented_defaults() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.meta.hidden, 20);
        assert_eq!(cfg.meta.learning_rate, 0.001);
        assert_eq!(cfg.meta.steps, 1);
        assert_eq!(cfg.meta.chunk_len, 1000);
        assert_eq!(cfg.meta.input_variant, InputVariant::Position);
        assert_eq!(cfg.am.hidden_dims, vec![64; 6]);
        assert_eq!((cfg.adaptation.all_lr, cfg.adaptation.lhuc_lr), (0.01, 0.7));
        assert_eq!(cfg.adaptation.epochs, 3);
        assert_eq!(cfg.adaptation.seconds, 10.0);
        assert_eq!(cfg.corpus.frames_per_second, 100);
        assert_eq!(cfg.corpus.context_width, 7);
        assert_eq!(
            (cfg.filter.chunk_ms, cfg.filter.silence_threshold),
            (50.0, 0.1)
        );
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_toml("bogus = 1").is_err());
        assert!(RunConfig::from_toml("[meta]\nhiden = 3").is_err());
        assert!(RunConfig::from_toml("[corpus.speaker]\nnoise = 3").is_err());
        let cfg = RunConfig::from_toml("[meta]\nhidden = 3\nmode = \"unsup\"").unwrap();
        assert_eq!(cfg.meta.hidden, 3);
        assert_eq!(cfg.meta.mode, TargetRegime::Unsupervised);
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(RunConfig::from_toml("[corpus]\ncontext_width = 4").is_err());
        assert!(RunConfig::from_toml("[adaptation]\nlinear_layer = 6").is_err());
        assert!(RunConfig::from_toml("[meta]\nlearning_rate = 0.0").is_err());
    }
}
