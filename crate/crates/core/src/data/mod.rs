//! Paired audio-visual samples: a seeded synthetic generator, a WAV corpus
//! loader, and per-epoch batching over cached spectrogram features.

mod batch;
mod corpus;
mod synthetic;

pub use batch::{audio_features, epoch_order, PairedBatch, PreparedData, PreparedSplit, SpectrogramCache};
pub use corpus::{export_dataset, load_corpus, split_bucket, Bucket};
pub use synthetic::{class_frequencies, generate, SyntheticSpec, SYNTH_RATE};

use crate::audio::Waveform;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct PairedSample {
    /// Stable identifier, used for caching and file names.
    pub key: String,
    pub visual: Tensor,
    pub audio: Waveform,
    /// Category label. Only the linear probe reads it.
    pub label: usize,
}

/// Train / validation / test partition (nominally 70 / 10 / 20).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<PairedSample>,
    pub val: Vec<PairedSample>,
    pub test: Vec<PairedSample>,
    pub n_classes: usize,
}

impl DatasetSplit {
    pub fn len(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn all(&self) -> impl Iterator<Item = &PairedSample> {
        self.train.iter().chain(&self.val).chain(&self.test)
    }

    pub fn visual_dim(&self) -> Option<usize> {
        self.all().next().map(|s| s.visual.numel())
    }
}
