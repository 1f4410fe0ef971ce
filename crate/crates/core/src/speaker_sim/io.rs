//! Dataset directory: `manifest.json` plus `frames.bin`, `labels.bin` and
//! `silence.bin` per split. Every binary file starts with the magic
//! `MLAD`, a `u32` version, a `u32` rank and one `u64` per dimension, all
//! little-endian, followed by the array (`f32`, `u32` or `u8`).

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::generate::{Corpus, CorpusConfig, Speaker, SpeakerProfile, Split, Utterance};
use crate::binio;
use crate::error::{Error, Result};
use crate::nn_core::{FrameBatch, Matrix};

pub const DATASET_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"MLAD";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UtteranceManifest {
    pub frames: usize,
    pub silence_frames: usize,
    pub leading_silence: usize,
    pub trailing_silence: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpeakerManifest {
    pub profile: SpeakerProfile,
    pub utterances: Vec<UtteranceManifest>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitManifests {
    pub am: Vec<SpeakerManifest>,
    pub train: Vec<SpeakerManifest>,
    pub val: Vec<SpeakerManifest>,
    pub test: Vec<SpeakerManifest>,
}

impl SplitManifests {
    fn get(&self, split: Split) -> &[SpeakerManifest] {
        match split {
            Split::Am => &self.am,
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub config: CorpusConfig,
    pub splits: SplitManifests,
}

fn header(dims: &[u64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 8 * dims.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for d in dims {
        out.extend_from_slice(&d.to_le_bytes());
    }
    out
}

/// Checks the header and returns `(dims, payload)`.
fn parse_header<'a>(bytes: &'a [u8], what: &str) -> Result<(Vec<u64>, &'a [u8])> {
    let bad = |m: &str| Error::Format(format!("{what}: {m}"));
    if bytes.len() < 12 {
        return Err(bad("truncated header"));
    }
    if &bytes[..4] != MAGIC {
        return Err(bad("bad magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != DATASET_VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let rank = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let body = 12 + 8 * rank;
    if rank > 8 || bytes.len() < body {
        return Err(bad("truncated header"));
    }
    let dims = bytes[12..body]
        .chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Ok((dims, &bytes[body..]))
}

fn expect_len(payload: &[u8], want: u64, what: &str) -> Result<()> {
    if payload.len() as u64 != want {
        return Err(Error::Format(format!(
            "{what}: expected {want} payload bytes, found {}",
            payload.len()
        )));
    }
    Ok(())
}

fn split_batch(speakers: &[Speaker], dim: usize) -> Result<FrameBatch> {
    let parts: Vec<&FrameBatch> = speakers
        .iter()
        .flat_map(|s| s.utterances.iter().map(|u| &u.frames))
        .collect();
    FrameBatch::concat(&parts, dim)
}

/// Writes the corpus under `dir`, creating it if needed.
pub fn save_dataset(dir: &Path, corpus: &Corpus) -> Result<()> {
    let d = corpus.config.feature_dim;
    for split in Split::ALL {
        let all = split_batch(corpus.split(split), d)?;
        let sub = dir.join(split.name());
        let n = all.len() as u64;

        let mut frames = header(&[n, d as u64]);
        frames.extend(binio::f32_bytes(all.features.as_slice()));
        binio::write(&sub.join("frames.bin"), &frames)?;

        let mut labels = header(&[n]);
        for &y in &all.labels {
            labels.extend_from_slice(&(y as u32).to_le_bytes());
        }
        binio::write(&sub.join("labels.bin"), &labels)?;

        let mut silence = header(&[n]);
        silence.extend(all.is_silence.iter().map(|&s| s as u8));
        binio::write(&sub.join("silence.bin"), &silence)?;
    }
    let manifest_of = |speakers: &[Speaker]| -> Vec<SpeakerManifest> {
        speakers
            .iter()
            .map(|s| SpeakerManifest {
                profile: s.profile.clone(),
                utterances: s
                    .utterances
                    .iter()
                    .map(|u| UtteranceManifest {
                        frames: u.frames.len(),
                        silence_frames: u.frames.silence_count(),
                        leading_silence: u.leading_silence,
                        trailing_silence: u.trailing_silence,
                    })
                    .collect(),
            })
            .collect()
    };
    let manifest = DatasetManifest {
        format_version: DATASET_VERSION,
        config: corpus.config.clone(),
        splits: SplitManifests {
            am: manifest_of(&corpus.am),
            train: manifest_of(&corpus.train),
            val: manifest_of(&corpus.val),
            test: manifest_of(&corpus.test),
        },
    };
    let json = serde_json::to_string_pretty(&manifest)?;
    binio::write(&dir.join("manifest.json"), json.as_bytes())
}

fn load_split(
    dir: &Path,
    split: Split,
    cfg: &CorpusConfig,
    speakers: &[SpeakerManifest],
) -> Result<Vec<Speaker>> {
    let sub = dir.join(split.name());
    let d = cfg.feature_dim;
    let expected: usize = speakers
        .iter()
        .flat_map(|s| &s.utterances)
        .map(|u| u.frames)
        .sum();
    let what = |f: &str| format!("{}/{f}", split.name());

    let bytes = binio::read(&sub.join("frames.bin"))?;
    let (dims, payload) = parse_header(&bytes, &what("frames.bin"))?;
    if dims != [expected as u64, d as u64] {
        return Err(Error::Format(format!(
            "{}: dims {dims:?}, manifest implies [{expected}, {d}]",
            what("frames.bin")
        )));
    }
    expect_len(payload, (expected * d * 4) as u64, &what("frames.bin"))?;
    let features = binio::parse_f32(payload, &what("frames.bin"))?;

    let bytes = binio::read(&sub.join("labels.bin"))?;
    let (dims, payload) = parse_header(&bytes, &what("labels.bin"))?;
    if dims != [expected as u64] {
        return Err(Error::Format(format!(
            "{}: dims {dims:?}",
            what("labels.bin")
        )));
    }
    expect_len(payload, (expected * 4) as u64, &what("labels.bin"))?;
    let labels: Vec<usize> = payload
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")) as usize)
        .collect();
    if let Some(y) = labels.iter().find(|&&y| y >= cfg.num_classes) {
        return Err(Error::Format(format!(
            "{}: label {y} out of range",
            what("labels.bin")
        )));
    }

    let bytes = binio::read(&sub.join("silence.bin"))?;
    let (dims, payload) = parse_header(&bytes, &what("silence.bin"))?;
    if dims != [expected as u64] {
        return Err(Error::Format(format!(
            "{}: dims {dims:?}",
            what("silence.bin")
        )));
    }
    expect_len(payload, expected as u64, &what("silence.bin"))?;
    let mut is_silence = Vec::with_capacity(expected);
    for &b in payload {
        match b {
            0 => is_silence.push(false),
            1 => is_silence.push(true),
            other => {
                return Err(Error::Format(format!(
                    "{}: flag byte {other}",
                    what("silence.bin")
                )))
            }
        }
    }

    let all = FrameBatch::new(Matrix::from_vec(expected, d, features)?, labels, is_silence)?;
    let mut offset = 0;
    let mut out = Vec::with_capacity(speakers.len());
    for s in speakers {
        let mut utterances = Vec::with_capacity(s.utterances.len());
        for u in &s.utterances {
            let frames = all.slice(offset, offset + u.frames);
            if frames.silence_count() != u.silence_frames {
                return Err(Error::Format(format!(
                    "{}: speaker {} silence count disagrees with the manifest",
                    split.name(),
                    s.profile.speaker_id
                )));
            }
            offset += u.frames;
            utterances.push(Utterance {
                speaker_id: s.profile.speaker_id,
                frames,
                leading_silence: u.leading_silence,
                trailing_silence: u.trailing_silence,
            });
        }
        out.push(Speaker {
            profile: s.profile.clone(),
            utterances,
        });
    }
    Ok(out)
}

pub fn load_dataset(dir: &Path) -> Result<Corpus> {
    let manifest: DatasetManifest =
        serde_json::from_slice(&binio::read(&dir.join("manifest.json"))?)?;
    if manifest.format_version != DATASET_VERSION {
        return Err(Error::Format(format!(
            "unsupported dataset format_version {}",
            manifest.format_version
        )));
    }
    manifest.config.validate()?;
    let mut corpus = Corpus {
        config: manifest.config.clone(),
        am: Vec::new(),
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for split in Split::ALL {
        *corpus.split_mut(split) =
            load_split(dir, split, &manifest.config, manifest.splits.get(split))?;
    }
    Ok(corpus)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::speaker_sim::generate::generate_corpus;

    fn small(tests: usize) -> CorpusConfig {
        CorpusConfig {
            num_classes: 3,
            feature_dim: 2,
            num_am_speakers: 1,
            num_train_speakers: 1,
            num_val_speakers: 1,
            num_test_speakers: tests,
            utterances_per_speaker: 2,
            frames_per_utterance: 50,
            ..Default::default()
        }
    }

    #[test]
    fn round_trip_is_exact() {
        for tests in [2, 0] {
            let dir = tempfile::tempdir().unwrap();
            let corpus = generate_corpus(&small(tests)).unwrap();
            save_dataset(dir.path(), &corpus).unwrap();
            assert_eq!(load_dataset(dir.path()).unwrap(), corpus);
        }
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        save_dataset(dir.path(), &generate_corpus(&small(1)).unwrap()).unwrap();
        let path = dir.path().join("test/frames.bin");
        let good = std::fs::read(&path).unwrap();

        let mut bad = good.clone();
        bad[0] = b'X';
        std::fs::write(&path, &bad).unwrap();
        assert!(load_dataset(dir.path())
            .unwrap_err()
            .to_string()
            .contains("bad magic"));

        let mut bad = good.clone();
        bad[4] = 2;
        std::fs::write(&path, &bad).unwrap();
        assert!(load_dataset(dir.path())
            .unwrap_err()
            .to_string()
            .contains("version"));

        std::fs::write(&path, &good[..good.len() - 3]).unwrap();
        assert!(load_dataset(dir.path()).is_err());

        std::fs::write(&path, &good).unwrap();
        assert!(load_dataset(dir.path()).is_ok());
    }
}
