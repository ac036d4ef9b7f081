use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{DatasetSplit, PairedSample};
use crate::audio::{process, MelSpectrogram, StftParams};
use crate::error::{Error, Result};
use crate::model::AudioInput;
use crate::tensor::Tensor;

/// Memoizes spectrograms by sample key. Safe to share across threads; a
/// cached result is bit-identical to recomputing it.
#[derive(Debug)]
pub struct SpectrogramCache {
    params: StftParams,
    map: Mutex<HashMap<String, Arc<MelSpectrogram>>>,
}

impl SpectrogramCache {
    pub fn new(params: StftParams) -> Result<Self> {
        params.validate()?;
        Ok(Self {
            params,
            map: Mutex::new(HashMap::new()),
        })
    }

    pub fn params(&self) -> &StftParams {
        &self.params
    }

    pub fn len(&self) -> usize {
        self.map.lock().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get_or_compute(&self, sample: &PairedSample) -> Result<Arc<MelSpectrogram>> {
        if let Some(m) = self.map.lock().expect("cache lock").get(&sample.key) {
            return Ok(Arc::clone(m));
        }
        // computed outside the lock; a racing duplicate is harmless
        let mel = Arc::new(process(&sample.audio, &self.params)?);
        let mut map = self.map.lock().expect("cache lock");
        Ok(Arc::clone(map.entry(sample.key.clone()).or_insert(mel)))
    }
}

pub fn audio_features(mel: &MelSpectrogram, input: AudioInput) -> Vec<f64> {
    match input {
        AudioInput::BandMeans => mel.band_means(),
        AudioInput::Flatten => mel.values.data().to_vec(),
    }
}

/// Feature matrices for one split, ready for batching.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedSplit {
    pub visual: Vec<Vec<f64>>,
    pub audio: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

impl PreparedSplit {
    pub fn new(samples: &[PairedSample], cache: &SpectrogramCache, input: AudioInput) -> Result<Self> {
        Self::build(samples, input, |s| cache.get_or_compute(s))
    }

    /// Same as [`PreparedSplit::new`] but recomputes every spectrogram.
    pub fn uncached(samples: &[PairedSample], params: &StftParams, input: AudioInput) -> Result<Self> {
        Self::build(samples, input, |s| process(&s.audio, params).map(Arc::new))
    }

    fn build<F>(samples: &[PairedSample], input: AudioInput, mel: F) -> Result<Self>
    where
        F: Fn(&PairedSample) -> Result<Arc<MelSpectrogram>> + Sync,
    {
        let audio = samples
            .par_iter()
            .map(|s| mel(s).map(|m| audio_features(&m, input)))
            .collect::<Result<Vec<_>>>()?;
        let visual: Vec<Vec<f64>> = samples.iter().map(|s| s.visual.data().to_vec()).collect();
        for (rows, what) in [(&visual, "visual"), (&audio, "audio")] {
            if let Some(first) = rows.first() {
                if let Some(bad) = rows.iter().position(|r| r.len() != first.len()) {
                    return Err(Error::Contract(format!(
                        "{what} feature length {} of sample {} differs from {}",
                        rows[bad].len(),
                        samples[bad].key,
                        first.len()
                    )));
                }
            }
        }
        Ok(Self {
            visual,
            audio,
            labels: samples.iter().map(|s| s.label).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn visual_dim(&self) -> usize {
        self.visual.first().map_or(0, Vec::len)
    }

    pub fn audio_dim(&self) -> usize {
        self.audio.first().map_or(0, Vec::len)
    }

    /// Gathers the given rows into one batch.
    pub fn gather(&self, indices: &[usize]) -> Result<PairedBatch> {
        if indices.is_empty() {
            return Err(Error::Contract("cannot build an empty batch".into()));
        }
        let stack = |rows: &[Vec<f64>], dim: usize| {
            let data: Vec<f64> = indices.iter().flat_map(|&i| rows[i].iter().copied()).collect();
            Tensor::new(&[indices.len(), dim], data)
        };
        Ok(PairedBatch {
            visual: stack(&self.visual, self.visual_dim())?,
            audio: stack(&self.audio, self.audio_dim())?,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            indices: indices.to_vec(),
        })
    }

    /// The whole split as one batch, in stored order.
    pub fn full_batch(&self) -> Result<PairedBatch> {
        self.gather(&(0..self.len()).collect::<Vec<_>>())
    }

    /// Shuffled minibatches for one epoch. The ragged tail is dropped so every
    /// batch has exactly `batch_size` rows.
    pub fn batches(&self, batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<PairedBatch>> {
        if batch_size < 2 {
            return Err(Error::Config(format!("batch_size must be at least 2, got {batch_size}")));
        }
        if batch_size > self.len() {
            return Err(Error::Config(format!(
                "batch_size {batch_size} exceeds the {} training samples",
                self.len()
            )));
        }
        epoch_order(self.len(), seed, epoch)
            .chunks_exact(batch_size)
            .map(|idx| self.gather(idx))
            .collect()
    }
}

/// Deterministic permutation of `0..n` for an epoch.
pub fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    idx
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairedBatch {
    /// `B × visual_dim`
    pub visual: Tensor,
    /// `B × audio_dim`
    pub audio: Tensor,
    pub labels: Vec<usize>,
    /// Row positions within the source split.
    pub indices: Vec<usize>,
}

impl PairedBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// All three splits with audio features extracted.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedData {
    pub train: PreparedSplit,
    pub val: PreparedSplit,
    pub test: PreparedSplit,
    pub n_classes: usize,
}

impl PreparedData {
    pub fn new(split: &DatasetSplit, cache: &SpectrogramCache, input: AudioInput) -> Result<Self> {
        Ok(Self {
            train: PreparedSplit::new(&split.train, cache, input)?,
            val: PreparedSplit::new(&split.val, cache, input)?,
            test: PreparedSplit::new(&split.test, cache, input)?,
            n_classes: split.n_classes,
        })
    }

    pub fn visual_dim(&self) -> usize {
        self.train.visual_dim()
    }

    pub fn audio_dim(&self) -> usize {
        self.train.audio_dim()
    }
}
