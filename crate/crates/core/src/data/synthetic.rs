use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{DatasetSplit, PairedSample};
use crate::audio::Waveform;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SYNTH_RATE: u32 = 24_000;

/// Candidate tone frequencies: 200 Hz to 4 kHz on a 100 Hz grid.
const FREQ_GRID: std::ops::RangeInclusive<u32> = 2..=40;
const TONE_AMPLITUDE: f64 = 0.4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_classes: usize,
    pub per_class: usize,
    pub visual_dim: usize,
    pub audio_seconds: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_classes: 4,
            per_class: 64,
            visual_dim: 32,
            audio_seconds: 1.0,
            noise_sigma: 0.1,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(Error::Config("data.n_classes must be at least 2".into()));
        }
        if self.per_class < 2 {
            return Err(Error::Config("data.per_class must be at least 2".into()));
        }
        let grid = FREQ_GRID.count();
        if 2 * self.n_classes > grid {
            return Err(Error::Config(format!(
                "data.n_classes = {} needs {} distinct tones but only {grid} fit in 200–4000 Hz at 100 Hz spacing",
                self.n_classes,
                2 * self.n_classes
            )));
        }
        if self.visual_dim == 0 {
            return Err(Error::Config("data.visual_dim must be positive".into()));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config("data.noise_sigma must be non-negative".into()));
        }
        if !(self.audio_seconds > 0.0 && self.audio_seconds.is_finite()) {
            return Err(Error::Config("data.audio_seconds must be positive".into()));
        }
        Ok(())
    }

    pub fn audio_samples(&self) -> usize {
        (self.audio_seconds * SYNTH_RATE as f64).round() as usize
    }
}

/// The two tone frequencies (Hz) of every class for a given seed.
pub fn class_frequencies(spec: &SyntheticSpec) -> Vec<[f64; 2]> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(1);
    let mut grid: Vec<u32> = FREQ_GRID.collect();
    grid.shuffle(&mut rng);
    grid.chunks_exact(2)
        .take(spec.n_classes)
        .map(|c| [c[0] as f64 * 100.0, c[1] as f64 * 100.0])
        .collect()
}

/// Generates a labelled dataset in which one latent class drives both
/// modalities: class `k` pairs a fixed random visual template with a
/// two-tone audio signature, each perturbed by Gaussian noise.
pub fn generate(spec: &SyntheticSpec) -> Result<DatasetSplit> {
    spec.validate()?;
    if spec.visual_dim < spec.n_classes {
        log::warn!(
            "visual_dim {} < n_classes {}: class templates may be hard to separate",
            spec.visual_dim,
            spec.n_classes
        );
    }
    let freqs = class_frequencies(spec);

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(2);
    let templates: Vec<Vec<f64>> = (0..spec.n_classes)
        .map(|_| (0..spec.visual_dim).map(|_| StandardNormal.sample(&mut rng)).collect())
        .collect();

    // σ = 0 is a valid degenerate case; Normal requires a finite σ ≥ 0.
    let noise = Normal::new(0.0, spec.noise_sigma).expect("validated sigma");
    let n_audio = spec.audio_samples();
    let two_pi = 2.0 * std::f64::consts::PI;

    let mut split = DatasetSplit {
        n_classes: spec.n_classes,
        ..DatasetSplit::default()
    };
    for (k, template) in templates.iter().enumerate() {
        let mut class_samples = Vec::with_capacity(spec.per_class);
        for s in 0..spec.per_class {
            let visual: Vec<f64> = template.iter().map(|t| t + noise.sample(&mut rng)).collect();
            let phases: [f64; 2] = [rng.random_range(0.0..two_pi), rng.random_range(0.0..two_pi)];
            let samples: Vec<f64> = (0..n_audio)
                .map(|i| {
                    let t = i as f64 / SYNTH_RATE as f64;
                    let tone: f64 = freqs[k]
                        .iter()
                        .zip(&phases)
                        .map(|(f, ph)| TONE_AMPLITUDE * (two_pi * f * t + ph).sin())
                        .sum();
                    (tone + noise.sample(&mut rng)).clamp(-1.0, 1.0)
                })
                .collect();
            class_samples.push(PairedSample {
                key: format!("c{k:02}_s{s:04}"),
                visual: Tensor::vector(&visual),
                audio: Waveform::mono(samples, SYNTH_RATE)?,
                label: k,
            });
        }
        // stratified split: identical counts per class
        class_samples.shuffle(&mut rng);
        let n = class_samples.len();
        let n_train = (0.7 * n as f64).round() as usize;
        let n_val = (0.1 * n as f64).round() as usize;
        let mut it = class_samples.into_iter();
        split.train.extend(it.by_ref().take(n_train));
        split.val.extend(it.by_ref().take(n_val));
        split.test.extend(it);
    }
    Ok(split)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::HashSet;

    fn small(seed: u64) -> SyntheticSpec {
        SyntheticSpec {
            audio_seconds: 0.02,
            seed,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn same_seed_is_bit_identical() {
        assert_eq!(generate(&small(5)).unwrap(), generate(&small(5)).unwrap());
        assert_ne!(generate(&small(5)).unwrap(), generate(&small(6)).unwrap());
    }

    #[test]
    fn zero_noise_collapses_each_class_visual() {
        let spec = SyntheticSpec { noise_sigma: 0.0, ..small(1) };
        let d = generate(&spec).unwrap();
        for k in 0..spec.n_classes {
            let vs: Vec<_> = d.all().filter(|s| s.label == k).map(|s| &s.visual).collect();
            assert!(vs.windows(2).all(|w| w[0] == w[1]));
        }
    }

    /// Nearest-centroid classifier fitted on train, scored on test.
    fn nearest_centroid_accuracy(d: &DatasetSplit) -> f64 {
        let dim = d.visual_dim().unwrap();
        let mut sums = vec![vec![0.0; dim]; d.n_classes];
        let mut counts = vec![0usize; d.n_classes];
        for s in &d.train {
            counts[s.label] += 1;
            for (a, v) in sums[s.label].iter_mut().zip(s.visual.data()) {
                *a += v;
            }
        }
        let centroids: Vec<Vec<f64>> = sums
            .iter()
            .zip(&counts)
            .map(|(s, &c)| s.iter().map(|v| v / c as f64).collect())
            .collect();
        let correct = d
            .test
            .iter()
            .filter(|s| {
                let dist = |c: &Vec<f64>| -> f64 { c.iter().zip(s.visual.data()).map(|(a, b)| (a - b).powi(2)).sum() };
                let best = (0..d.n_classes)
                    .min_by(|&a, &b| dist(&centroids[a]).total_cmp(&dist(&centroids[b])))
                    .unwrap();
                best == s.label
            })
            .count();
        correct as f64 / d.test.len() as f64
    }

    #[test]
    fn visual_classes_are_separable() {
        for seed in 0..3 {
            let acc = nearest_centroid_accuracy(&generate(&small(seed)).unwrap());
            assert!(acc > 0.95, "seed {seed}: {acc}");
        }
    }

    #[test]
    fn class_tones_are_unique_and_in_range() {
        let spec = SyntheticSpec { n_classes: 19, ..small(3) };
        let freqs: Vec<f64> = class_frequencies(&spec).into_iter().flatten().collect();
        assert_eq!(freqs.len(), 38);
        let mut sorted = freqs.clone();
        sorted.sort_by(f64::total_cmp);
        assert!(sorted.windows(2).all(|w| w[1] - w[0] >= 100.0));
        assert!(freqs.iter().all(|f| (200.0..=4000.0).contains(f)));
        assert!(SyntheticSpec { n_classes: 20, ..small(0) }.validate().is_err());
    }

    #[test]
    fn samples_have_expected_duration_and_labels() {
        let spec = small(2);
        let d = generate(&spec).unwrap();
        for s in d.all() {
            assert!(s.label < spec.n_classes);
            assert_eq!(s.audio.samples().len(), spec.audio_samples());
            assert!((s.audio.duration_secs() - spec.audio_seconds).abs() <= 1.0 / SYNTH_RATE as f64);
            assert!(s.audio.samples().iter().all(|x| x.abs() <= 1.0));
        }
    }

    #[test]
    fn default_split_sizes() {
        let d = generate(&SyntheticSpec { audio_seconds: 0.01, ..SyntheticSpec::default() }).unwrap();
        assert_eq!((d.train.len(), d.val.len(), d.test.len()), (180, 24, 52));
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(SyntheticSpec { n_classes: 1, ..small(0) }.validate().is_err());
        assert!(SyntheticSpec { per_class: 1, ..small(0) }.validate().is_err());
        assert!(SyntheticSpec { noise_sigma: -0.1, ..small(0) }.validate().is_err());
        // fewer visual dims than classes only warns
        assert!(generate(&SyntheticSpec { visual_dim: 2, ..small(0) }).is_ok());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn split_is_a_balanced_partition(n_classes in 2usize..8, per_class in 10usize..40, seed in any::<u64>()) {
            let spec = SyntheticSpec { n_classes, per_class, visual_dim: 4, audio_seconds: 0.001, seed, ..SyntheticSpec::default() };
            let d = generate(&spec).unwrap();
            let keys = |v: &[PairedSample]| v.iter().map(|s| s.key.clone()).collect::<HashSet<_>>();
            let (tr, va, te) = (keys(&d.train), keys(&d.val), keys(&d.test));
            prop_assert!(tr.is_disjoint(&va) && tr.is_disjoint(&te) && va.is_disjoint(&te));
            prop_assert_eq!(tr.len() + va.len() + te.len(), n_classes * per_class);
            for part in [&d.train, &d.val, &d.test] {
                let counts: Vec<usize> = (0..n_classes).map(|k| part.iter().filter(|s| s.label == k).count()).collect();
                let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
                prop_assert!(hi - lo <= 1);
            }
        }
    }
}
