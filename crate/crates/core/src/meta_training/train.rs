use std::time::Instant;

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::{adam_step, AdamConfig, AdamState};
use super::chunks::{pseudo_label_chunks, ChunkPlan, TargetRegime};
use super::loss::{
    meta_gradient_cached, order_free_sum, pair_loss_cached, positions_for, FirstSignal,
};
use crate::error::{Error, Result};
use crate::meta_learner::{init_meta_params, InputVariant, MetaParams, PreprocessConfig};
use crate::nn_core::{ModelSpec, ParameterVector};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetaTrainConfig {
    pub hidden: usize,
    pub input_variant: InputVariant,
    pub preprocess: PreprocessConfig,
    pub adam: AdamConfig,
    pub epochs: usize,
    pub steps: usize,
    pub seed: u64,
}

impl Default for MetaTrainConfig {
    fn default() -> Self {
        Self {
            hidden: 20,
            input_variant: InputVariant::Position,
            preprocess: PreprocessConfig::default(),
            adam: AdamConfig::default(),
            epochs: 10,
            steps: 1,
            seed: 0,
        }
    }
}

impl MetaTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.adam.learning_rate > 0.0 && self.adam.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "meta learning rate must be > 0, got {}",
                self.adam.learning_rate
            )));
        }
        if self.steps == 0 {
            return Err(Error::Config("meta steps must be >= 1".into()));
        }
        if self.hidden == 0 {
            return Err(Error::Config("meta hidden size must be >= 1".into()));
        }
        self.preprocess.validate()
    }
}

/// One line of the training log. Epoch 0 is the initialization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetaEpochLog {
    pub epoch: usize,
    #[serde(rename = "train_J")]
    pub train_j: f64,
    #[serde(rename = "val_J")]
    pub val_j: f64,
    pub wall_ms: u64,
}

#[derive(Clone, Debug)]
pub struct MetaTrainOutcome {
    pub params: MetaParams,
    pub best_epoch: usize,
    pub best_val_j: f64,
    pub log: Vec<MetaEpochLog>,
}

struct PreparedPlan<'a> {
    plan: &'a ChunkPlan,
    firsts: Vec<FirstSignal>,
}

impl<'a> PreparedPlan<'a> {
    fn new(
        spec: &ModelSpec,
        theta: &ParameterVector,
        plan: &'a ChunkPlan,
        regime: TargetRegime,
    ) -> Result<Self> {
        let mut firsts = Vec::with_capacity(plan.pairs.len());
        for &pair in &plan.pairs {
            firsts.push(FirstSignal::compute(
                spec,
                theta,
                &*plan.adapt_batch(pair, regime)?,
            )?);
        }
        Ok(Self { plan, firsts })
    }

    fn loss(
        &self,
        spec: &ModelSpec,
        theta: &ParameterVector,
        meta: &MetaParams,
        regime: TargetRegime,
        steps: usize,
        positions: &[(f64, f64)],
    ) -> Result<f64> {
        let mut losses = Vec::with_capacity(self.firsts.len());
        for (&pair, first) in self.plan.pairs.iter().zip(&self.firsts) {
            let adapt = self.plan.adapt_batch(pair, regime)?;
            let eval = &self.plan.eval_chunk(pair).frames;
            losses.push(pair_loss_cached(
                spec,
                theta,
                meta,
                &adapt,
                eval,
                steps,
                positions,
                Some(first),
            )?);
        }
        Ok(order_free_sum(losses))
    }
}

/// Meta-trains Φ from its seeded initialization with one Adam update per
/// chunk pair, visiting pairs in a seeded random order each epoch. Returns
/// the Φ with the lowest validation `J` over all epochs, the
/// initialization included.
pub fn train_meta(
    spec: &ModelSpec,
    theta: &ParameterVector,
    train_plan: &ChunkPlan,
    val_plan: &ChunkPlan,
    regime: TargetRegime,
    cfg: &MetaTrainConfig,
) -> Result<MetaTrainOutcome> {
    train_meta_with(spec, theta, train_plan, val_plan, regime, cfg, |_| {})
}

/// [`train_meta`] with a callback receiving each log record as it is made.
pub fn train_meta_with<F>(
    spec: &ModelSpec,
    theta: &ParameterVector,
    train_plan: &ChunkPlan,
    val_plan: &ChunkPlan,
    regime: TargetRegime,
    cfg: &MetaTrainConfig,
    mut on_epoch: F,
) -> Result<MetaTrainOutcome>
where
    F: FnMut(&MetaEpochLog),
{
    cfg.validate()?;
    theta.check_matches(spec)?;
    if train_plan.pairs.is_empty() || val_plan.pairs.is_empty() {
        return Err(Error::NoChunkPairs);
    }
    let (train_owned, val_owned);
    let (train_plan, val_plan) = match regime {
        TargetRegime::Supervised => (train_plan, val_plan),
        TargetRegime::Unsupervised => {
            train_owned = pseudo_label_chunks(spec, theta, train_plan)?;
            val_owned = pseudo_label_chunks(spec, theta, val_plan)?;
            (&train_owned, &val_owned)
        }
    };
    let train = PreparedPlan::new(spec, theta, train_plan, regime)?;
    let val = PreparedPlan::new(spec, theta, val_plan, regime)?;

    let start = Instant::now();
    let mut meta = init_meta_params(cfg.hidden, cfg.input_variant, cfg.preprocess, cfg.seed)?;
    let positions = positions_for(&meta, theta);
    let steps = cfg.steps;

    let val_j = val.loss(spec, theta, &meta, regime, steps, &positions)?;
    let train_j = train.loss(spec, theta, &meta, regime, steps, &positions)?;
    let first = MetaEpochLog {
        epoch: 0,
        train_j,
        val_j,
        wall_ms: start.elapsed().as_millis() as u64,
    };
    on_epoch(&first);
    let mut log = vec![first];
    let mut best = (val_j, 0, meta.clone());

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut adam = AdamState::new(meta.len());
    let mut order: Vec<usize> = (0..train_plan.pairs.len()).collect();

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut pair_losses = Vec::with_capacity(order.len());
        for &k in &order {
            let pair = train_plan.pairs[k];
            let adapt = train_plan.adapt_batch(pair, regime)?;
            let eval = &train_plan.eval_chunk(pair).frames;
            let g = meta_gradient_cached(
                spec,
                theta,
                &meta,
                &adapt,
                eval,
                steps,
                &positions,
                Some(&train.firsts[k]),
            )
            .map_err(|e| at_pair(e, epoch, k))?;
            if !g.j_value.is_finite() {
                return Err(at_pair(
                    Error::NonFinite("meta-training loss".into()),
                    epoch,
                    k,
                ));
            }
            pair_losses.push(g.j_value);
            adam_step(&mut adam, meta.values_mut(), &g.d_phi, &cfg.adam)?;
        }
        let val_j = val
            .loss(spec, theta, &meta, regime, steps, &positions)
            .map_err(|e| at_epoch(e, epoch))?;
        if !val_j.is_finite() {
            return Err(at_epoch(Error::NonFinite("validation loss".into()), epoch));
        }
        let rec = MetaEpochLog {
            epoch,
            train_j: order_free_sum(pair_losses),
            val_j,
            wall_ms: start.elapsed().as_millis() as u64,
        };
        on_epoch(&rec);
        log.push(rec);
        if val_j < best.0 {
            best = (val_j, epoch, meta.clone());
        }
    }
    Ok(MetaTrainOutcome {
        params: best.2,
        best_epoch: best.1,
        best_val_j: best.0,
        log,
    })
}

fn at_pair(e: Error, epoch: usize, pair: usize) -> Error {
    match e {
        Error::NonFinite(m) => Error::NonFinite(format!("{m} (epoch {epoch}, pair {pair})")),
        other => other,
    }
}

fn at_epoch(e: Error, epoch: usize) -> Error {
    match e {
        Error::NonFinite(m) => Error::NonFinite(format!("{m} (epoch {epoch}, validation)")),
        other => other,
    }
}
