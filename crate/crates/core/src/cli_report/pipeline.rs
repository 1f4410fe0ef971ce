//! Glue between the corpus, the speaker-independent model and the
//! meta-learner, shared by the command-line tool and the test harnesses.

use super::config::RunConfig;
use crate::error::Result;
use crate::meta_training::{
    make_chunks, train_meta_with, ChunkPlan, MetaEpochLog, MetaTrainOutcome, TargetRegime,
};
use crate::nn_core::{train_si_model, AmTrainOutcome, FrameBatch, ModelSpec, ParameterVector};
use crate::speaker_sim::{speaker_segments, splice_context, Corpus, FilterConfig, Speaker, Split};

/// A speaker's utterances with context splicing applied.
pub fn spliced_utterances(speaker: &Speaker, context_width: usize) -> Result<Vec<FrameBatch>> {
    speaker
        .utterances
        .iter()
        .map(|u| splice_context(&u.frames, context_width))
        .collect()
}

/// Every spliced frame of a split, silence included, in speaker order.
pub fn split_frames(corpus: &Corpus, split: Split) -> Result<FrameBatch> {
    let w = corpus.config.context_width;
    let mut parts = Vec::new();
    for s in corpus.split(split) {
        parts.extend(spliced_utterances(s, w)?);
    }
    let refs: Vec<&FrameBatch> = parts.iter().collect();
    FrameBatch::concat(&refs, corpus.config.spliced_dim())
}

/// Meta-training chunks of a split: spliced, silence-filtered and cut into
/// `chunk_len`-frame chunks that stay inside one utterance.
pub fn chunk_plan(
    corpus: &Corpus,
    split: Split,
    filter: &FilterConfig,
    chunk_len: usize,
) -> Result<ChunkPlan> {
    let w = corpus.config.context_width;
    let fps = corpus.config.frames_per_second;
    let mut speakers = Vec::new();
    for s in corpus.split(split) {
        speakers.push(speaker_segments(&spliced_utterances(s, w)?, filter, fps)?);
    }
    make_chunks(&speakers, chunk_len)
}

/// Trains the speaker-independent model on the `am` split, selecting the
/// checkpoint by cross-entropy on the `val` split.
pub fn train_am(corpus: &Corpus, cfg: &RunConfig) -> Result<(ModelSpec, AmTrainOutcome)> {
    let spec = cfg.model_spec()?;
    let train = split_frames(corpus, Split::Am)?;
    let val = split_frames(corpus, Split::Val)?;
    let out = train_si_model(&spec, &train, &val, &cfg.am.train_config(), cfg.am.seed)?;
    Ok((spec, out))
}

/// Trains the meta-learner on `train`-split pairs with `val`-split selection.
pub fn train_meta_model<F>(
    corpus: &Corpus,
    spec: &ModelSpec,
    theta: &ParameterVector,
    cfg: &RunConfig,
    regime: TargetRegime,
    on_epoch: F,
) -> Result<MetaTrainOutcome>
where
    F: FnMut(&MetaEpochLog),
{
    let train = chunk_plan(corpus, Split::Train, &cfg.filter, cfg.meta.chunk_len)?;
    let val = chunk_plan(corpus, Split::Val, &cfg.filter, cfg.meta.chunk_len)?;
    train_meta_with(
        spec,
        theta,
        &train,
        &val,
        regime,
        &cfg.meta.train_config(),
        on_epoch,
    )
}
