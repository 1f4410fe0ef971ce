//! End-to-end checks of the training pipeline on small corpora.

use metadapt::cli_report::{split_frames, train_am, RunConfig};
use metadapt::nn_core::{argmax_rows, forward};
use metadapt::speaker_sim::{generate_corpus, CorpusConfig, Split, SpeakerVariation};

/// Misclassified speech frames and speech frame count.
fn speech_errors(
    spec: &metadapt::nn_core::ModelSpec,
    theta: &metadapt::nn_core::ParameterVector,
    data: &metadapt::nn_core::FrameBatch,
) -> (usize, usize) {
    let predicted = argmax_rows(&forward(spec, theta, &data.features).unwrap());
    let mut errors = 0;
    let mut speech = 0;
    for ((p, l), s) in predicted.iter().zip(&data.labels).zip(&data.is_silence) {
        if !s {
            speech += 1;
            errors += usize::from(p != l);
        }
    }
    (errors, speech)
}

#[test]
fn identity_speakers_show_no_train_test_gap() {
    let mut cfg = RunConfig {
        corpus: CorpusConfig {
            num_am_speakers: 6,
            num_train_speakers: 1,
            num_val_speakers: 2,
            num_test_speakers: 6,
            speaker: SpeakerVariation::none(),
            seed: 5,
            ..CorpusConfig::default()
        },
        ..RunConfig::default()
    };
    cfg.am.hidden_dims = vec![32, 32];
    cfg.am.epochs = 3;
    let corpus = generate_corpus(&cfg.corpus).unwrap();
    let (spec, out) = train_am(&corpus, &cfg).unwrap();

    let (e_seen, n_seen) = speech_errors(&spec, &out.theta, &split_frames(&corpus, Split::Am).unwrap());
    let (e_new, n_new) = speech_errors(&spec, &out.theta, &split_frames(&corpus, Split::Test).unwrap());
    let (p1, p2) = (e_seen as f64 / n_seen as f64, e_new as f64 / n_new as f64);
    let pooled = (e_seen + e_new) as f64 / (n_seen + n_new) as f64;
    let se = (pooled * (1.0 - pooled) * (1.0 / n_seen as f64 + 1.0 / n_new as f64)).sqrt();
    let z = (p1 - p2) / se;
    assert!(p2 < 0.5, "model did not train: test FER {p2}");
    assert!(z.abs() < 3.0, "seen FER {p1:.4} vs unseen FER {p2:.4}, z = {z:.2}");
}

#[test]
fn speaker_variation_creates_a_gap() {
    let mut cfg = RunConfig {
        corpus: CorpusConfig {
            num_am_speakers: 6,
            num_train_speakers: 1,
            num_val_speakers: 2,
            num_test_speakers: 6,
            seed: 5,
            ..CorpusConfig::default()
        },
        ..RunConfig::default()
    };
    cfg.am.hidden_dims = vec![32, 32];
    cfg.am.epochs = 3;
    let corpus = generate_corpus(&cfg.corpus).unwrap();
    let (spec, out) = train_am(&corpus, &cfg).unwrap();
    let (e_seen, n_seen) = speech_errors(&spec, &out.theta, &split_frames(&corpus, Split::Am).unwrap());
    let (e_new, n_new) = speech_errors(&spec, &out.theta, &split_frames(&corpus, Split::Test).unwrap());
    assert!(
        (e_new as f64 / n_new as f64) > (e_seen as f64 / n_seen as f64),
        "unseen speakers should be harder"
    );
}
