//! Synthetic multi-speaker corpus: class prototypes shared by everyone,
//! seen through a per-speaker affine distortion plus noise, with silence
//! at utterance edges and in pauses.

mod generate;
mod io;
mod protocol;

pub use generate::{
    draw_clean_utterance, draw_prototypes, generate_corpus, speaker_rng, CleanUtterance, Corpus,
    CorpusConfig, Speaker, SpeakerProfile, SpeakerVariation, Split, Utterance,
};
pub use io::{load_dataset, save_dataset, DatasetManifest, DATASET_VERSION};
pub use protocol::{
    filter_chunk_len, remaining_after, silence_filter, silence_filter_ranges, speaker_segments,
    splice_context, take_adaptation_seconds, trim_silence, AdaptationData, FilterConfig,
    StreamPosition,
};
