use std::fmt;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn_core::{FrameBatch, Matrix};

/// How far speakers stray from the shared prototypes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpeakerVariation {
    /// Per-dimension scales are `exp(u)`, `u ~ U[-r, r]`.
    pub log_scale_range: f64,
    /// Number of random plane rotations composed into the transform.
    pub num_rotations: usize,
    /// Rotation angles are drawn from `U[-a, a]` radians.
    pub max_rotation: f64,
    pub bias_sigma: f64,
    pub noise_sigma: f64,
}

impl Default for SpeakerVariation {
    fn default() -> Self {
        Self {
            log_scale_range: 0.4,
            num_rotations: 6,
            max_rotation: 0.6,
            bias_sigma: 0.4,
            noise_sigma: 0.2,
        }
    }
}

impl SpeakerVariation {
    /// Every speaker gets the identity transform and no noise.
    pub fn none() -> Self {
        Self {
            log_scale_range: 0.0,
            num_rotations: 0,
            max_rotation: 0.0,
            bias_sigma: 0.0,
            noise_sigma: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    /// Number of classes, class 0 being silence.
    pub num_classes: usize,
    pub feature_dim: usize,
    pub frames_per_second: usize,
    /// Speakers reserved for training the speaker-independent model.
    pub num_am_speakers: usize,
    pub num_train_speakers: usize,
    pub num_val_speakers: usize,
    pub num_test_speakers: usize,
    pub utterances_per_speaker: usize,
    pub frames_per_utterance: usize,
    pub silence_fraction: f64,
    /// Interior pauses per utterance.
    pub pauses_per_utterance: usize,
    pub min_segment_frames: usize,
    pub max_segment_frames: usize,
    /// Standard deviation of the class prototypes.
    pub prototype_sigma: f64,
    /// Within-class standard deviation around a prototype.
    pub class_sigma: f64,
    pub context_width: usize,
    pub speaker: SpeakerVariation,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            num_classes: 12,
            feature_dim: 10,
            frames_per_second: 100,
            num_am_speakers: 24,
            num_train_speakers: 13,
            num_val_speakers: 5,
            num_test_speakers: 10,
            utterances_per_speaker: 2,
            frames_per_utterance: 2400,
            silence_fraction: 0.1,
            pauses_per_utterance: 4,
            min_segment_frames: 3,
            max_segment_frames: 10,
            prototype_sigma: 1.0,
            class_sigma: 0.6,
            context_width: 7,
            speaker: SpeakerVariation::default(),
            seed: 0,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.num_classes < 2 {
            return fail(format!(
                "num_classes must be >= 2, got {}",
                self.num_classes
            ));
        }
        if self.feature_dim < 1 {
            return fail("feature_dim must be >= 1".into());
        }
        if self.frames_per_second < 1 {
            return fail("frames_per_second must be >= 1".into());
        }
        if self.context_width.is_multiple_of(2) {
            return fail(format!(
                "context_width must be odd, got {}",
                self.context_width
            ));
        }
        if !(0.0..1.0).contains(&self.silence_fraction) {
            return fail(format!(
                "silence_fraction must lie in [0, 1), got {}",
                self.silence_fraction
            ));
        }
        if self.frames_per_utterance < 1 {
            return fail("frames_per_utterance must be >= 1".into());
        }
        if self.min_segment_frames < 1 || self.max_segment_frames < self.min_segment_frames {
            return fail("segment lengths must satisfy 1 <= min <= max".into());
        }
        let v = &self.speaker;
        let nonneg = [
            ("prototype_sigma", self.prototype_sigma),
            ("class_sigma", self.class_sigma),
            ("log_scale_range", v.log_scale_range),
            ("max_rotation", v.max_rotation),
            ("bias_sigma", v.bias_sigma),
            ("noise_sigma", v.noise_sigma),
        ];
        for (name, x) in nonneg {
            if !(x >= 0.0 && x.is_finite()) {
                return fail(format!("{name} must be finite and >= 0, got {x}"));
            }
        }
        if v.num_rotations > 0 && self.feature_dim < 2 {
            return fail("rotations need feature_dim >= 2".into());
        }
        Ok(())
    }

    pub fn spliced_dim(&self) -> usize {
        self.feature_dim * self.context_width
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Am,
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Am, Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Am => "am",
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// `x ↦ transform · x + bias + N(0, noise_sigma²)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeakerProfile {
    pub speaker_id: u32,
    /// Row-major `d × d`: diagonal scale times a product of rotations.
    pub transform: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
    pub noise_sigma: f64,
}

impl SpeakerProfile {
    pub fn identity(speaker_id: u32, d: usize) -> Self {
        Self {
            speaker_id,
            transform: Matrix::identity(d)
                .as_slice()
                .chunks(d)
                .map(<[f64]>::to_vec)
                .collect(),
            bias: vec![0.0; d],
            noise_sigma: 0.0,
        }
    }

    /// Draws scales, rotations and bias from `rng`.
    pub fn draw(speaker_id: u32, d: usize, v: &SpeakerVariation, rng: &mut ChaCha8Rng) -> Self {
        let mut m = Matrix::identity(d);
        for _ in 0..v.num_rotations {
            let p = rng.random_range(0..d);
            let mut q = rng.random_range(0..d - 1);
            if q >= p {
                q += 1;
            }
            let angle = if v.max_rotation > 0.0 {
                rng.random_range(-v.max_rotation..=v.max_rotation)
            } else {
                0.0
            };
            let (s, c) = angle.sin_cos();
            for col in 0..d {
                let (a, b) = (m.get(p, col), m.get(q, col));
                m.set(p, col, c * a - s * b);
                m.set(q, col, s * a + c * b);
            }
        }
        for r in 0..d {
            let u: f64 = if v.log_scale_range > 0.0 {
                rng.random_range(-v.log_scale_range..=v.log_scale_range)
            } else {
                0.0
            };
            let scale = u.exp();
            m.row_mut(r).iter_mut().for_each(|x| *x *= scale);
        }
        let bias = (0..d)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                v.bias_sigma * z
            })
            .collect();
        Self {
            speaker_id,
            transform: m.as_slice().chunks(d).map(<[f64]>::to_vec).collect(),
            bias,
            noise_sigma: v.noise_sigma,
        }
    }

    /// Applies the map to one frame, drawing noise only when `noise_sigma > 0`.
    pub fn apply(&self, x: &[f64], rng: &mut ChaCha8Rng) -> Vec<f64> {
        let mut out: Vec<f64> = self
            .transform
            .iter()
            .zip(&self.bias)
            .map(|(row, b)| row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + b)
            .collect();
        if self.noise_sigma > 0.0 {
            for o in &mut out {
                let z: f64 = StandardNormal.sample(rng);
                *o += self.noise_sigma * z;
            }
        }
        out
    }
}

/// One utterance in temporal order.
#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub speaker_id: u32,
    pub frames: FrameBatch,
    pub leading_silence: usize,
    pub trailing_silence: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Speaker {
    pub profile: SpeakerProfile,
    pub utterances: Vec<Utterance>,
}

impl Speaker {
    pub fn id(&self) -> u32 {
        self.profile.speaker_id
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub config: CorpusConfig,
    pub am: Vec<Speaker>,
    pub train: Vec<Speaker>,
    pub val: Vec<Speaker>,
    pub test: Vec<Speaker>,
}

impl Corpus {
    pub fn split(&self, split: Split) -> &[Speaker] {
        match split {
            Split::Am => &self.am,
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn split_mut(&mut self, split: Split) -> &mut Vec<Speaker> {
        match split {
            Split::Am => &mut self.am,
            Split::Train => &mut self.train,
            Split::Val => &mut self.val,
            Split::Test => &mut self.test,
        }
    }
}

/// Random stream of the speaker with global index `index`.
pub fn speaker_rng(seed: u64, index: u32) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1 + index as u64);
    rng
}

/// Class means, one row per class, from stream 0 of the seed.
pub fn draw_prototypes(cfg: &CorpusConfig) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let normal =
        Normal::new(0.0, cfg.prototype_sigma.max(0.0)).unwrap_or(Normal::new(0.0, 0.0).unwrap());
    let data = (0..cfg.num_classes * cfg.feature_dim)
        .map(|_| normal.sample(&mut rng))
        .collect();
    Matrix::from_vec(cfg.num_classes, cfg.feature_dim, data).expect("prototype shape")
}

/// Undistorted frames of one utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct CleanUtterance {
    pub features: Matrix,
    pub labels: Vec<usize>,
    pub leading_silence: usize,
    pub trailing_silence: usize,
}

/// Labels and prototype-plus-noise features of one utterance. Exactly
/// `round(silence_fraction · frames)` frames are silence: about 30% lead,
/// 30% trail and the rest forms interior pauses.
pub fn draw_clean_utterance(
    cfg: &CorpusConfig,
    prototypes: &Matrix,
    rng: &mut ChaCha8Rng,
) -> CleanUtterance {
    let n = cfg.frames_per_utterance;
    let n_sil = ((cfg.silence_fraction * n as f64).round() as usize).min(n);
    let leading = (0.3 * n_sil as f64).round() as usize;
    let trailing = ((0.3 * n_sil as f64).round() as usize).min(n_sil - leading);
    let interior = n_sil - leading - trailing;
    let speech = n - n_sil;

    let pauses = if speech > 1 {
        cfg.pauses_per_utterance.min(interior)
    } else {
        0
    };
    let mut pause_lens = vec![interior / pauses.max(1); pauses];
    for p in pause_lens.iter_mut().take(interior % pauses.max(1)) {
        *p += 1;
    }
    // Interior silence with no pause slot is folded into the leading run.
    let leading = if pauses == 0 {
        leading + interior
    } else {
        leading
    };
    let mut pause_at: Vec<usize> = (0..pauses).map(|_| rng.random_range(1..speech)).collect();
    pause_at.sort_unstable();

    let mut speech_labels = Vec::with_capacity(speech);
    let mut prev = 0;
    while speech_labels.len() < speech {
        let len = rng.random_range(cfg.min_segment_frames..=cfg.max_segment_frames);
        let mut class = rng.random_range(1..cfg.num_classes);
        if class == prev && cfg.num_classes > 2 {
            class = 1 + class % (cfg.num_classes - 1);
        }
        prev = class;
        let take = len.min(speech - speech_labels.len());
        speech_labels.extend(std::iter::repeat_n(class, take));
    }

    let mut labels = vec![0; leading];
    let mut next_pause = 0;
    for (t, &y) in speech_labels.iter().enumerate() {
        while next_pause < pauses && pause_at[next_pause] == t {
            labels.extend(std::iter::repeat_n(0, pause_lens[next_pause]));
            next_pause += 1;
        }
        labels.push(y);
    }
    labels.extend(std::iter::repeat_n(0, trailing));

    let d = cfg.feature_dim;
    let mut data = Vec::with_capacity(n * d);
    for &y in &labels {
        for k in 0..d {
            let z: f64 = StandardNormal.sample(rng);
            data.push(prototypes.get(y, k) + cfg.class_sigma * z);
        }
    }
    CleanUtterance {
        features: Matrix::from_vec(n, d, data).expect("utterance shape"),
        labels,
        leading_silence: leading,
        trailing_silence: trailing,
    }
}

fn generate_speaker(cfg: &CorpusConfig, prototypes: &Matrix, id: u32) -> Speaker {
    let mut rng = speaker_rng(cfg.seed, id);
    let profile = SpeakerProfile::draw(id, cfg.feature_dim, &cfg.speaker, &mut rng);
    let utterances = (0..cfg.utterances_per_speaker)
        .map(|_| {
            let clean = draw_clean_utterance(cfg, prototypes, &mut rng);
            let n = clean.labels.len();
            let mut data = Vec::with_capacity(n * cfg.feature_dim);
            for t in 0..n {
                data.extend(profile.apply(clean.features.row(t), &mut rng));
            }
            crate::round_to_f32(&mut data);
            let is_silence = clean.labels.iter().map(|&y| y == 0).collect();
            let features = Matrix::from_vec(n, cfg.feature_dim, data).expect("utterance shape");
            Utterance {
                speaker_id: id,
                frames: FrameBatch::new(features, clean.labels, is_silence)
                    .expect("utterance batch"),
                leading_silence: clean.leading_silence,
                trailing_silence: clean.trailing_silence,
            }
        })
        .collect();
    Speaker {
        profile,
        utterances,
    }
}

/// Generates all four speaker splits. Speaker ids run consecutively over
/// am, train, val and test, and each speaker draws from its own stream.
pub fn generate_corpus(cfg: &CorpusConfig) -> Result<Corpus> {
    cfg.validate()?;
    let prototypes = draw_prototypes(cfg);
    let counts = [
        cfg.num_am_speakers,
        cfg.num_train_speakers,
        cfg.num_val_speakers,
        cfg.num_test_speakers,
    ];
    let mut next = 0u32;
    let mut splits = counts.iter().map(|&count| {
        let speakers: Vec<Speaker> = (next..next + count as u32)
            .map(|id| generate_speaker(cfg, &prototypes, id))
            .collect();
        next += count as u32;
        speakers
    });
    let (am, train, val, test) = (
        splits.next().unwrap_or_default(),
        splits.next().unwrap_or_default(),
        splits.next().unwrap_or_default(),
        splits.next().unwrap_or_default(),
    );
    Ok(Corpus {
        config: cfg.clone(),
        am,
        train,
        val,
        test,
    })
}
