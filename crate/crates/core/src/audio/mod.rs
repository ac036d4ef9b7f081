//! Waveform to mel-spectrogram pipeline.
//!
//! `process` = [`to_mono`] → [`resample`] to the analysis rate →
//! [`stft_magnitude`] → [`mel_scale`]. Every stage is a pure function of its
//! inputs, so the pipeline is bit-deterministic.

mod mel;
mod resample;
mod stft;
mod wav;

pub use mel::{band_center_hz, hz_to_mel, mel_filterbank, mel_scale, mel_to_hz, resize_frames};
pub use resample::resample;
pub use stft::{hann_window, stft_magnitude, window_len};
pub use wav::{decode_wav, read_wav, write_wav_pcm16};

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Interleaved PCM samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate: u32,
    channels: u16,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32, channels: u16) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::Contract("sample rate must be positive".into()));
        }
        if channels == 0 || !samples.len().is_multiple_of(channels as usize) {
            return Err(Error::Contract(format!(
                "{} samples do not divide into {channels} channels",
                samples.len()
            )));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::Contract(format!("non-finite sample at index {i}")));
        }
        Ok(Self {
            samples,
            sample_rate,
            channels,
        })
    }

    pub fn mono(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        Self::new(samples, sample_rate, 1)
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn channels(&self) -> u16 {
        self.channels
    }

    /// Number of sample frames (samples per channel).
    pub fn frames(&self) -> usize {
        self.samples.len() / self.channels as usize
    }

    pub fn duration_secs(&self) -> f64 {
        self.frames() as f64 / self.sample_rate as f64
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Averages stereo frames; mono passes through unchanged.
pub fn to_mono(w: &Waveform) -> Result<Waveform> {
    match w.channels {
        1 => Ok(w.clone()),
        2 => {
            let samples = w
                .samples
                .chunks_exact(2)
                .map(|f| (f[0] + f[1]) / 2.0)
                .collect();
            Waveform::new(samples, w.sample_rate, 1)
        }
        n => Err(Error::UnsupportedFormat(format!(
            "{n} channels (expected 1 or 2)"
        ))),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WindowFn {
    Hann,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StftParams {
    pub sample_rate: u32,
    pub window_ms: f64,
    pub hop_ms: f64,
    pub n_bands: usize,
    pub target_frames: usize,
    pub window_fn: WindowFn,
    /// Apply `ln(1 + x)` to the mel magnitudes before the time resize.
    pub log_compress: bool,
}

impl Default for StftParams {
    fn default() -> Self {
        Self {
            sample_rate: 24_000,
            window_ms: 10.0,
            hop_ms: 10.0,
            n_bands: 256,
            target_frames: 256,
            window_fn: WindowFn::Hann,
            log_compress: false,
        }
    }
}

impl StftParams {
    pub fn validate(&self) -> Result<()> {
        if self.sample_rate == 0 {
            return Err(Error::Config("stft.sample_rate must be positive".into()));
        }
        if !(self.hop_ms > 0.0 && self.window_ms >= self.hop_ms) {
            return Err(Error::Config(format!(
                "stft needs window_ms >= hop_ms > 0, got window {} hop {}",
                self.window_ms, self.hop_ms
            )));
        }
        if self.n_bands == 0 || self.target_frames == 0 {
            return Err(Error::Config(
                "stft.n_bands and stft.target_frames must be positive".into(),
            ));
        }
        if self.win_samples() < 2 || self.hop_samples() == 0 {
            return Err(Error::Config(format!(
                "window of {} ms at {} Hz is too short",
                self.window_ms, self.sample_rate
            )));
        }
        Ok(())
    }

    pub fn win_samples(&self) -> usize {
        window_len(self.window_ms, self.sample_rate)
    }

    pub fn hop_samples(&self) -> usize {
        window_len(self.hop_ms, self.sample_rate)
    }

    pub fn n_bins(&self) -> usize {
        self.win_samples() / 2 + 1
    }
}

/// Mel magnitudes, `n_bands × target_frames`, non-negative.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    pub values: Tensor,
    pub source_rate: u32,
    pub params: StftParams,
}

impl MelSpectrogram {
    pub fn bands(&self) -> usize {
        self.values.rows()
    }

    pub fn frames(&self) -> usize {
        self.values.cols()
    }

    /// Time-averaged magnitude of every band.
    pub fn band_means(&self) -> Vec<f64> {
        (0..self.bands())
            .map(|m| self.values.row(m).iter().sum::<f64>() / self.frames() as f64)
            .collect()
    }

    /// Writes the matrix in tensor format and the parameters to `<path>.json`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let sidecar = sidecar_path(path);
        let meta = serde_json::json!({
            "source_rate": self.source_rate,
            "shape": self.values.shape(),
            "stft": self.params,
        });
        let json = serde_json::to_vec_pretty(&meta).expect("serializable");
        crate::fsutil::write_atomic(&sidecar, &json)?;
        if let Err(e) = self.values.save(path) {
            let _ = std::fs::remove_file(&sidecar);
            return Err(e);
        }
        Ok(())
    }
}

pub fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    s.into()
}

/// Full pipeline from any decodable waveform.
pub fn process(w: &Waveform, p: &StftParams) -> Result<MelSpectrogram> {
    p.validate()?;
    let mono = to_mono(w)?;
    let resampled = resample(&mono, p.sample_rate)?;
    let spec = stft_magnitude(&resampled, p)?;
    let mut mel = mel_scale(&spec, p)?;
    mel.source_rate = w.sample_rate;
    Ok(mel)
}

pub fn process_file(path: &Path, p: &StftParams) -> Result<MelSpectrogram> {
    process(&read_wav(path)?, p)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mono_cases() {
        let m = Waveform::mono(vec![0.1, -0.3, 0.7], 8000).unwrap();
        assert_eq!(to_mono(&m).unwrap(), m);
        let s = Waveform::new(vec![0.5, -0.5, 0.2, 0.6], 8000, 2).unwrap();
        let out = to_mono(&s).unwrap();
        assert_eq!(out.channels(), 1);
        assert_eq!(out.samples()[0], 0.0);
        assert!((out.samples()[1] - 0.4).abs() < 1e-15);
        let q = Waveform::new(vec![0.0; 6], 8000, 3).unwrap();
        assert!(matches!(to_mono(&q), Err(Error::UnsupportedFormat(_))));
    }

    #[test]
    fn waveform_invariants() {
        assert!(Waveform::new(vec![0.0; 3], 8000, 2).is_err());
        assert!(Waveform::new(vec![0.0; 2], 0, 1).is_err());
        assert!(Waveform::new(vec![f64::NAN], 8000, 1).is_err());
    }

    #[test]
    fn default_params_match_pipeline_geometry() {
        let p = StftParams::default();
        p.validate().unwrap();
        assert_eq!(p.win_samples(), 240);
        assert_eq!(p.hop_samples(), 240);
        assert_eq!(p.n_bins(), 121);
    }

    #[test]
    fn params_reject_bad_values() {
        let p = StftParams {
            hop_ms: 20.0,
            ..StftParams::default()
        };
        assert!(p.validate().is_err());
        let p = StftParams {
            n_bands: 0,
            ..StftParams::default()
        };
        assert!(p.validate().is_err());
        assert!(serde_json::from_str::<StftParams>(r#"{"windw_ms": 10}"#).is_err());
    }
}
