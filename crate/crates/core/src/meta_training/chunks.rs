use std::borrow::Cow;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn_core::{predict_labels, FrameBatch, ModelSpec, ParameterVector};

/// Where adaptation-chunk labels come from. Evaluation chunks always use
/// the true labels.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TargetRegime {
    #[default]
    #[serde(rename = "sup")]
    Supervised,
    #[serde(rename = "unsup")]
    Unsupervised,
}

impl FromStr for TargetRegime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sup" | "supervised" => Ok(Self::Supervised),
            "unsup" | "unsupervised" => Ok(Self::Unsupervised),
            other => Err(Error::Config(format!(
                "unknown mode {other:?} (expected sup or unsup)"
            ))),
        }
    }
}

impl fmt::Display for TargetRegime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Supervised => "sup",
            Self::Unsupervised => "unsup",
        })
    }
}

/// `N` consecutive frames of one speaker, with optional pseudo-labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Chunk {
    pub frames: FrameBatch,
    pub pseudo_labels: Option<Vec<usize>>,
}

/// Adapt on `chunks[speaker][index]`, evaluate on `chunks[speaker][index + 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ChunkPair {
    pub speaker: usize,
    pub index: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChunkPlan {
    pub chunk_len: usize,
    /// Chunks of each speaker in temporal order.
    pub speakers: Vec<Vec<Chunk>>,
    pub pairs: Vec<ChunkPair>,
}

impl ChunkPlan {
    pub fn num_chunks(&self) -> usize {
        self.speakers.iter().map(Vec::len).sum()
    }

    pub fn adapt_chunk(&self, pair: ChunkPair) -> &Chunk {
        &self.speakers[pair.speaker][pair.index]
    }

    pub fn eval_chunk(&self, pair: ChunkPair) -> &Chunk {
        &self.speakers[pair.speaker][pair.index + 1]
    }

    /// Adaptation frames labelled according to `regime`.
    pub fn adapt_batch(
        &self,
        pair: ChunkPair,
        regime: TargetRegime,
    ) -> Result<Cow<'_, FrameBatch>> {
        let chunk = self.adapt_chunk(pair);
        match regime {
            TargetRegime::Supervised => Ok(Cow::Borrowed(&chunk.frames)),
            TargetRegime::Unsupervised => {
                let labels = chunk.pseudo_labels.clone().ok_or_else(|| {
                    Error::Precondition(format!(
                        "chunk {} of speaker {} has no pseudo-labels",
                        pair.index, pair.speaker
                    ))
                })?;
                Ok(Cow::Owned(chunk.frames.with_labels(labels)?))
            }
        }
    }

    /// Same chunks with a different pair list (every pair must still join
    /// consecutive chunks of one speaker).
    pub fn with_pairs(&self, pairs: Vec<ChunkPair>) -> Result<Self> {
        for p in &pairs {
            let ok = self
                .speakers
                .get(p.speaker)
                .is_some_and(|c| p.index + 1 < c.len());
            if !ok {
                return Err(Error::Precondition(format!(
                    "pair ({}, {}) does not join two chunks of one speaker",
                    p.speaker, p.index
                )));
            }
        }
        Ok(Self {
            chunk_len: self.chunk_len,
            speakers: self.speakers.clone(),
            pairs,
        })
    }
}

/// Cuts every speaker's segments into non-overlapping `n`-frame chunks.
/// Chunks never cross a segment boundary and each segment's trailing
/// remainder is dropped. Consecutive chunks of a speaker form the pairs.
pub fn make_chunks(speakers: &[Vec<FrameBatch>], n: usize) -> Result<ChunkPlan> {
    if n == 0 {
        return Err(Error::Precondition("chunk length must be >= 1".into()));
    }
    let mut out = Vec::with_capacity(speakers.len());
    let mut pairs = Vec::new();
    for (s, segments) in speakers.iter().enumerate() {
        let mut chunks = Vec::new();
        for seg in segments {
            for c in 0..seg.len() / n {
                chunks.push(Chunk {
                    frames: seg.slice(c * n, (c + 1) * n),
                    pseudo_labels: None,
                });
            }
        }
        for index in 0..chunks.len().saturating_sub(1) {
            pairs.push(ChunkPair { speaker: s, index });
        }
        out.push(chunks);
    }
    Ok(ChunkPlan {
        chunk_len: n,
        speakers: out,
        pairs,
    })
}

/// Attaches frame-argmax labels of the unadapted model to every chunk. The
/// true labels are left untouched.
pub fn pseudo_label_chunks(
    spec: &ModelSpec,
    theta: &ParameterVector,
    plan: &ChunkPlan,
) -> Result<ChunkPlan> {
    let mut out = plan.clone();
    for chunk in out.speakers.iter_mut().flatten() {
        chunk.pseudo_labels = Some(predict_labels(spec, theta, &chunk.frames.features)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn_core::Matrix;

    fn frames(n: usize, offset: usize) -> FrameBatch {
        let data = (0..n).map(|k| (k + offset) as f64).collect();
        FrameBatch::new(
            Matrix::from_vec(n, 1, data).unwrap(),
            vec![0; n],
            vec![false; n],
        )
        .unwrap()
    }

    #[test]
    fn chunk_counts() {
        let plan = make_chunks(&[vec![frames(2500, 0)]], 1000).unwrap();
        assert_eq!((plan.num_chunks(), plan.pairs.len()), (2, 1));
        let plan = make_chunks(&[vec![frames(999, 0)]], 1000).unwrap();
        assert_eq!((plan.num_chunks(), plan.pairs.len()), (0, 0));
        let plan = make_chunks(&[vec![frames(3000, 0)]], 1000).unwrap();
        assert_eq!(
            plan.pairs,
            vec![
                ChunkPair {
                    speaker: 0,
                    index: 0
                },
                ChunkPair {
                    speaker: 0,
                    index: 1
                }
            ]
        );
        assert!(make_chunks(&[vec![frames(10, 0)]], 0).is_err());
        assert_eq!(make_chunks(&[], 5).unwrap().pairs.len(), 0);
    }

    #[test]
    fn chunks_are_ordered_and_stay_inside_segments() {
        let plan =
            make_chunks(&[vec![frames(7, 0), frames(5, 100)], vec![frames(3, 0)]], 3).unwrap();
        let firsts: Vec<f64> = plan.speakers[0]
            .iter()
            .map(|c| c.frames.features.get(0, 0))
            .collect();
        assert_eq!(firsts, vec![0.0, 3.0, 100.0]);
        assert_eq!(plan.speakers[1].len(), 1);
        assert_eq!(plan.pairs.len(), 2);
        assert!(plan.pairs.iter().all(|p| p.speaker == 0));
        assert!(plan
            .with_pairs(vec![ChunkPair {
                speaker: 1,
                index: 0
            }])
            .is_err());
    }

    #[test]
    fn regime_parsing() {
        assert_eq!(
            "sup".parse::<TargetRegime>().unwrap(),
            TargetRegime::Supervised
        );
        assert_eq!(
            "unsup".parse::<TargetRegime>().unwrap(),
            TargetRegime::Unsupervised
        );
        assert!("semi".parse::<TargetRegime>().is_err());
        assert_eq!(TargetRegime::Unsupervised.to_string(), "unsup");
    }

    #[test]
    fn untrained_model_labels_everything_class_zero() {
        let spec = ModelSpec::new(1, vec![2], 3).unwrap();
        let theta = ParameterVector::zeros(spec.layout());
        let mut plan = make_chunks(&[vec![frames(6, 0)]], 3).unwrap();
        plan.speakers[0][1].frames.labels = vec![2, 1, 2];
        let labelled = pseudo_label_chunks(&spec, &theta, &plan).unwrap();
        for (a, b) in labelled.speakers[0].iter().zip(&plan.speakers[0]) {
            assert_eq!(a.pseudo_labels.as_deref(), Some(&[0, 0, 0][..]));
            assert_eq!(a.frames, b.frames);
        }
        let pair = labelled.pairs[0];
        assert_eq!(
            labelled
                .adapt_batch(pair, TargetRegime::Unsupervised)
                .unwrap()
                .labels,
            vec![0; 3]
        );
        assert_eq!(labelled.eval_chunk(pair).frames.labels, vec![2, 1, 2]);
        assert!(plan.adapt_batch(pair, TargetRegime::Unsupervised).is_err());
    }
}
