//! Per-speaker adaptation and evaluation, and the report built from it.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::pipeline::spliced_utterances;
use crate::adaptation::{adapt, default_linear_layer, pseudo_labels, AdaptMethodConfig};
use crate::error::{Error, Result};
use crate::meta_learner::MetaParams;
use crate::meta_training::TargetRegime;
use crate::nn_core::{
    argmax_rows, cross_entropy_loss, forward, FrameBatch, Matrix, ModelSpec, ParameterVector,
};
use crate::speaker_sim::{remaining_after, take_adaptation_seconds, Corpus, Speaker};

pub const REPORT_VERSION: u32 = 1;

/// One row of the report.
#[derive(Clone, Debug)]
pub enum MethodSpec<'a> {
    Original,
    Lhuc,
    All,
    Linear,
    Meta {
        label: String,
        params: &'a MetaParams,
    },
}

impl MethodSpec<'_> {
    pub fn label(&self) -> &str {
        match self {
            MethodSpec::Original => "original",
            MethodSpec::Lhuc => "LHUC",
            MethodSpec::All => "ALL",
            MethodSpec::Linear => "LINEAR",
            MethodSpec::Meta { label, .. } => label,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeakerMetrics {
    pub speaker_id: u32,
    pub adaptation_frames: usize,
    /// Evaluated frames, silence included.
    pub frames: usize,
    pub speech_frames: usize,
    /// Mean cross-entropy per frame.
    pub ce: f64,
    /// Misclassified speech frames.
    pub errors: usize,
    /// `errors / speech_frames` (0 without speech frames).
    pub fer: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean_ce: f64,
    pub fer: f64,
    pub num_speakers: usize,
    pub num_frames: usize,
    pub num_speech_frames: usize,
}

impl Summary {
    /// Frame-weighted aggregate of the per-speaker rows, in row order.
    pub fn aggregate(speakers: &[SpeakerMetrics]) -> Self {
        let mut ce_total = 0.0;
        let (mut frames, mut speech, mut errors) = (0, 0, 0);
        for s in speakers {
            ce_total += s.ce * s.frames as f64;
            frames += s.frames;
            speech += s.speech_frames;
            errors += s.errors;
        }
        Self {
            mean_ce: if frames > 0 {
                ce_total / frames as f64
            } else {
                0.0
            },
            fer: if speech > 0 {
                errors as f64 / speech as f64
            } else {
                0.0
            },
            num_speakers: speakers.len(),
            num_frames: frames,
            num_speech_frames: speech,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodRow {
    pub method: String,
    pub summary: Summary,
    pub speakers: Vec<SpeakerMetrics>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub report_version: u32,
    /// Corpus seed of the evaluated dataset.
    pub seed: u64,
    pub mode: TargetRegime,
    pub config: RunConfig,
    pub rows: Vec<MethodRow>,
}

impl EvalReport {
    pub fn row(&self, method: &str) -> Option<&MethodRow> {
        self.rows.iter().find(|r| r.method == method)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

fn speaker_metrics(
    spec: &ModelSpec,
    speaker_id: u32,
    adaptation_frames: usize,
    posteriors: &Matrix,
    eval: &FrameBatch,
) -> Result<SpeakerMetrics> {
    let frames = eval.len();
    let ce = if frames > 0 {
        cross_entropy_loss(posteriors, &eval.labels)? / frames as f64
    } else {
        0.0
    };
    if !ce.is_finite() {
        return Err(Error::NonFinite(format!(
            "evaluation loss of speaker {speaker_id}"
        )));
    }
    debug_assert_eq!(posteriors.cols(), spec.num_classes);
    let predicted = argmax_rows(posteriors);
    let mut speech = 0;
    let mut errors = 0;
    for ((p, &y), &sil) in predicted.iter().zip(&eval.labels).zip(&eval.is_silence) {
        if !sil {
            speech += 1;
            if *p != y {
                errors += 1;
            }
        }
    }
    Ok(SpeakerMetrics {
        speaker_id,
        adaptation_frames,
        frames,
        speech_frames: speech,
        ce,
        errors,
        fer: if speech > 0 {
            errors as f64 / speech as f64
        } else {
            0.0
        },
    })
}

fn method_config<'a>(
    spec: &ModelSpec,
    cfg: &RunConfig,
    m: &MethodSpec<'a>,
) -> Option<AdaptMethodConfig<'a>> {
    let a = &cfg.adaptation;
    match m {
        MethodSpec::Original => None,
        MethodSpec::Lhuc => Some(AdaptMethodConfig::Lhuc {
            learning_rate: a.lhuc_lr,
            epochs: a.epochs,
        }),
        MethodSpec::All => Some(AdaptMethodConfig::All {
            learning_rate: a.all_lr,
            epochs: a.epochs,
        }),
        MethodSpec::Linear => Some(AdaptMethodConfig::Linear {
            learning_rate: a.linear_lr,
            epochs: a.epochs,
            layer: a.linear_layer.unwrap_or_else(|| default_linear_layer(spec)),
        }),
        MethodSpec::Meta { params, .. } => Some(AdaptMethodConfig::Meta {
            params,
            steps: a.meta_steps,
        }),
    }
}

/// Metrics of every method for one test speaker.
fn evaluate_speaker(
    spec: &ModelSpec,
    theta: &ParameterVector,
    corpus: &Corpus,
    cfg: &RunConfig,
    speaker: &Speaker,
    methods: &[MethodSpec<'_>],
    mode: TargetRegime,
) -> Result<Vec<SpeakerMetrics>> {
    let utts = spliced_utterances(speaker, corpus.config.context_width)?;
    let data = take_adaptation_seconds(
        &utts,
        cfg.adaptation.seconds,
        corpus.config.frames_per_second,
        &cfg.filter,
    )?;
    let eval = remaining_after(&utts, data.cut)?;
    let batch = match mode {
        TargetRegime::Supervised => data.batch,
        TargetRegime::Unsupervised => pseudo_labels(spec, theta, &data.batch)?,
    };
    let mut out = Vec::with_capacity(methods.len());
    for m in methods {
        let posteriors = match method_config(spec, cfg, m) {
            None => forward(spec, theta, &eval.features)?,
            Some(mc) => adapt(spec, theta, &batch, &mc)?
                .adapted
                .forward(spec, &eval.features)?,
        };
        out.push(speaker_metrics(
            spec,
            speaker.id(),
            batch.len(),
            &posteriors,
            &eval,
        )?);
    }
    Ok(out)
}

/// Adapts to every test speaker with each method and evaluates on the
/// frames after the adaptation data. With `threads > 1` speakers are
/// processed concurrently; the report is identical either way.
pub fn evaluate_methods(
    spec: &ModelSpec,
    theta: &ParameterVector,
    corpus: &Corpus,
    cfg: &RunConfig,
    methods: &[MethodSpec<'_>],
    mode: TargetRegime,
    threads: usize,
) -> Result<EvalReport> {
    let speakers = &corpus.test;
    let run = |s: &Speaker| evaluate_speaker(spec, theta, corpus, cfg, s, methods, mode);
    let per_speaker: Vec<Vec<SpeakerMetrics>> = if threads <= 1 || speakers.len() <= 1 {
        speakers.iter().map(run).collect::<Result<_>>()?
    } else {
        let per_thread = speakers.len().div_ceil(threads);
        std::thread::scope(|scope| {
            let handles: Vec<_> = speakers
                .chunks(per_thread)
                .map(|group| scope.spawn(move || group.iter().map(run).collect::<Result<Vec<_>>>()))
                .collect();
            let mut all = Vec::with_capacity(speakers.len());
            for h in handles {
                all.extend(h.join().expect("evaluation thread panicked")?);
            }
            Ok::<_, Error>(all)
        })?
    };
    let rows = methods
        .iter()
        .enumerate()
        .map(|(k, m)| {
            let speakers: Vec<SpeakerMetrics> = per_speaker.iter().map(|r| r[k].clone()).collect();
            MethodRow {
                method: m.label().to_string(),
                summary: Summary::aggregate(&speakers),
                speakers,
            }
        })
        .collect();
    Ok(EvalReport {
        report_version: REPORT_VERSION,
        seed: corpus.config.seed,
        mode,
        config: cfg.clone(),
        rows,
    })
}

/// Fixed-width table with one row per method.
pub fn render_table(report: &EvalReport) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "adaptation: {} ({} s)",
        report.mode, report.config.adaptation.seconds
    );
    let _ = writeln!(
        s,
        "{:<14} {:>10} {:>8} {:>9} {:>8}",
        "method", "CE/frame", "FER %", "speakers", "frames"
    );
    for r in &report.rows {
        let _ = writeln!(
            s,
            "{:<14} {:>10.4} {:>8.2} {:>9} {:>8}",
            r.method,
            r.summary.mean_ce,
            100.0 * r.summary.fer,
            r.summary.num_speakers,
            r.summary.num_frames
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::meta_learner::{init_meta_params, InputVariant, PreprocessConfig};
    use crate::speaker_sim::{generate_corpus, CorpusConfig};

    fn setup() -> (RunConfig, Corpus, ModelSpec, ParameterVector) {
        let mut cfg = RunConfig {
            corpus: CorpusConfig {
                num_classes: 4,
                feature_dim: 3,
                context_width: 3,
                num_am_speakers: 1,
                num_train_speakers: 1,
                num_val_speakers: 1,
                num_test_speakers: 3,
                utterances_per_speaker: 2,
                frames_per_utterance: 120,
                ..Default::default()
            },
            ..Default::default()
        };
        cfg.am.hidden_dims = vec![6, 5];
        cfg.adaptation.seconds = 0.5;
        let corpus = generate_corpus(&cfg.corpus).unwrap();
        let spec = cfg.model_spec().unwrap();
        let theta = spec.init_params(4);
        (cfg, corpus, spec, theta)
    }

    #[test]
    fn original_row_matches_plain_evaluation() {
        let (cfg, corpus, spec, theta) = setup();
        let r = evaluate_methods(
            &spec,
            &theta,
            &corpus,
            &cfg,
            &[MethodSpec::Original],
            TargetRegime::Supervised,
            1,
        )
        .unwrap();
        let row = r.row("original").unwrap();
        assert_eq!(row.speakers.len(), 3);
        for s in &row.speakers {
            assert_eq!(s.adaptation_frames, 50);
            assert!((0.0..=1.0).contains(&s.fer));
        }
        let spk = &corpus.test[0];
        let utts = spliced_utterances(spk, 3).unwrap();
        let cut = take_adaptation_seconds(&utts, 0.5, 100, &cfg.filter)
            .unwrap()
            .cut;
        let eval = remaining_after(&utts, cut).unwrap();
        let p = forward(&spec, &theta, &eval.features).unwrap();
        assert_eq!(
            row.speakers[0].ce,
            cross_entropy_loss(&p, &eval.labels).unwrap() / eval.len() as f64
        );
    }

    #[test]
    fn rows_aggregate_and_threads_agree() {
        let (cfg, corpus, spec, theta) = setup();
        let meta =
            init_meta_params(3, InputVariant::Position, PreprocessConfig::default(), 1).unwrap();
        let methods = [
            MethodSpec::Original,
            MethodSpec::Lhuc,
            MethodSpec::All,
            MethodSpec::Linear,
            MethodSpec::Meta {
                label: "META".into(),
                params: &meta,
            },
        ];
        for mode in [TargetRegime::Supervised, TargetRegime::Unsupervised] {
            let one = evaluate_methods(&spec, &theta, &corpus, &cfg, &methods, mode, 1).unwrap();
            let three = evaluate_methods(&spec, &theta, &corpus, &cfg, &methods, mode, 3).unwrap();
            assert_eq!(one.to_json().unwrap(), three.to_json().unwrap());
            for row in &one.rows {
                let ce: f64 = row.speakers.iter().map(|s| s.ce * s.frames as f64).sum();
                let frames: usize = row.speakers.iter().map(|s| s.frames).sum();
                assert_eq!(row.summary.mean_ce, ce / frames as f64);
                assert_eq!(row.summary.num_frames, frames);
                assert!((0.0..=1.0).contains(&row.summary.fer));
            }
            let table = render_table(&one);
            assert_eq!(table.lines().count(), 2 + methods.len());
            assert!(table.contains("LINEAR"));
        }
    }

    #[test]
    fn report_json_is_versioned() {
        let (cfg, corpus, spec, theta) = setup();
        let r = evaluate_methods(
            &spec,
            &theta,
            &corpus,
            &cfg,
            &[MethodSpec::Original],
            TargetRegime::Supervised,
            1,
        )
        .unwrap();
        let v: serde_json::Value = serde_json::from_str(&r.to_json().unwrap()).unwrap();
        assert_eq!(v["report_version"], 1);
        assert_eq!(v["mode"], "sup");
        let back: EvalReport = serde_json::from_str(&r.to_json().unwrap()).unwrap();
        assert_eq!(back, r);
    }
}
