use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn_core::{FrameBatch, Matrix};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FilterConfig {
    pub chunk_ms: f64,
    /// Chunks with a larger silence fraction are dropped.
    pub silence_threshold: f64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            chunk_ms: 50.0,
            silence_threshold: 0.10,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.chunk_ms > 0.0 && self.chunk_ms.is_finite()) {
            return Err(Error::Config(format!(
                "chunk_ms must be > 0, got {}",
                self.chunk_ms
            )));
        }
        if !(0.0..=1.0).contains(&self.silence_threshold) {
            return Err(Error::Config(format!(
                "silence_threshold must lie in [0, 1], got {}",
                self.silence_threshold
            )));
        }
        Ok(())
    }
}

/// Frames per filter chunk: `round(chunk_ms · fps / 1000)`, at least 1.
pub fn filter_chunk_len(cfg: &FilterConfig, fps: usize) -> usize {
    ((cfg.chunk_ms * fps as f64 / 1000.0).round() as usize).max(1)
}

/// Stacks each frame with its `(w-1)/2` neighbours on either side,
/// repeating the first and last frame past the edges. Labels and silence
/// flags are those of the centre frame.
pub fn splice_context(frames: &FrameBatch, w: usize) -> Result<FrameBatch> {
    if w.is_multiple_of(2) {
        return Err(Error::Precondition(format!(
            "context width must be odd, got {w}"
        )));
    }
    let n = frames.len();
    let d = frames.dim();
    let half = (w / 2) as isize;
    let mut data = Vec::with_capacity(n * d * w);
    for t in 0..n as isize {
        for o in -half..=half {
            let s = (t + o).clamp(0, n as isize - 1) as usize;
            data.extend_from_slice(frames.features.row(s));
        }
    }
    FrameBatch::new(
        Matrix::from_vec(n, d * w, data)?,
        frames.labels.clone(),
        frames.is_silence.clone(),
    )
}

/// Range left after removing leading and trailing silence.
pub fn trim_silence(is_silence: &[bool]) -> Range<usize> {
    let start = is_silence
        .iter()
        .position(|&s| !s)
        .unwrap_or(is_silence.len());
    let end = is_silence
        .iter()
        .rposition(|&s| !s)
        .map_or(start, |e| e + 1);
    start..end
}

/// Frame ranges kept by the silence filter, in order. After trimming, the
/// utterance is cut into fixed-length chunks (a trailing shorter chunk is
/// judged by its own silence fraction).
pub fn silence_filter_ranges(
    is_silence: &[bool],
    cfg: &FilterConfig,
    fps: usize,
) -> Result<Vec<Range<usize>>> {
    cfg.validate()?;
    if fps == 0 {
        return Err(Error::Precondition("frames per second must be >= 1".into()));
    }
    let len = filter_chunk_len(cfg, fps);
    let trimmed = trim_silence(is_silence);
    let mut kept = Vec::new();
    let mut start = trimmed.start;
    while start < trimmed.end {
        let end = (start + len).min(trimmed.end);
        let silent = is_silence[start..end].iter().filter(|&&s| s).count();
        if silent as f64 / (end - start) as f64 <= cfg.silence_threshold {
            kept.push(start..end);
        }
        start = end;
    }
    Ok(kept)
}

/// The chunks kept by [`silence_filter_ranges`].
pub fn silence_filter(
    utterance: &FrameBatch,
    cfg: &FilterConfig,
    fps: usize,
) -> Result<Vec<FrameBatch>> {
    Ok(silence_filter_ranges(&utterance.is_silence, cfg, fps)?
        .into_iter()
        .map(|r| utterance.slice(r.start, r.end))
        .collect())
}

/// Each utterance's kept chunks joined into one segment (empty segments
/// are skipped).
pub fn speaker_segments(
    utterances: &[FrameBatch],
    cfg: &FilterConfig,
    fps: usize,
) -> Result<Vec<FrameBatch>> {
    let mut out = Vec::new();
    for u in utterances {
        let chunks = silence_filter(u, cfg, fps)?;
        if !chunks.is_empty() {
            let refs: Vec<&FrameBatch> = chunks.iter().collect();
            out.push(FrameBatch::concat(&refs, u.dim())?);
        }
    }
    Ok(out)
}

/// A point in a speaker's utterance sequence: frames before `frame` of
/// utterance `utterance` come earlier.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct StreamPosition {
    pub utterance: usize,
    pub frame: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdaptationData {
    pub batch: FrameBatch,
    /// Just past the last frame used for adaptation.
    pub cut: StreamPosition,
}

/// The first `seconds · fps` filtered frames of a speaker, in temporal
/// order, truncating the last chunk. Short speakers yield everything.
pub fn take_adaptation_seconds(
    utterances: &[FrameBatch],
    seconds: f64,
    fps: usize,
    cfg: &FilterConfig,
) -> Result<AdaptationData> {
    if !(seconds > 0.0 && seconds.is_finite()) {
        return Err(Error::Precondition(format!(
            "adaptation seconds must be > 0, got {seconds}"
        )));
    }
    let budget = (seconds * fps as f64).round() as usize;
    let dim = utterances.first().map_or(0, FrameBatch::dim);
    let mut parts = Vec::new();
    let mut taken = 0;
    let mut cut = StreamPosition {
        utterance: 0,
        frame: 0,
    };
    'outer: for (u, utt) in utterances.iter().enumerate() {
        for r in silence_filter_ranges(&utt.is_silence, cfg, fps)? {
            if taken >= budget {
                break 'outer;
            }
            let end = r.start + (r.end - r.start).min(budget - taken);
            parts.push(utt.slice(r.start, end));
            taken += end - r.start;
            cut = StreamPosition {
                utterance: u,
                frame: end,
            };
        }
    }
    if taken == 0 {
        return Err(Error::NoAdaptationFrames);
    }
    let refs: Vec<&FrameBatch> = parts.iter().collect();
    Ok(AdaptationData {
        batch: FrameBatch::concat(&refs, dim)?,
        cut,
    })
}

/// Every frame (silence included) from `cut` onwards.
pub fn remaining_after(utterances: &[FrameBatch], cut: StreamPosition) -> Result<FrameBatch> {
    let dim = utterances.first().map_or(0, FrameBatch::dim);
    let mut parts = Vec::new();
    for (u, utt) in utterances.iter().enumerate().skip(cut.utterance) {
        let start = if u == cut.utterance {
            cut.frame.min(utt.len())
        } else {
            0
        };
        if start < utt.len() {
            parts.push(utt.slice(start, utt.len()));
        }
    }
    let refs: Vec<&FrameBatch> = parts.iter().collect();
    FrameBatch::concat(&refs, dim)
}
