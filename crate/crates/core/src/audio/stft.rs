use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use super::{StftParams, WindowFn, Waveform};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Samples covered by `ms` milliseconds at `rate`, rounded to the nearest integer.
pub fn window_len(ms: f64, rate: u32) -> usize {
    (ms * rate as f64 / 1000.0).round() as usize
}

/// Periodic Hann window of length `n`.
pub fn hann_window(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

/// Magnitude STFT, `frames × (win/2 + 1)`.
///
/// `frames = floor((len − win) / hop) + 1`; input shorter than one window is
/// zero-padded to a single frame.
pub fn stft_magnitude(w: &Waveform, p: &StftParams) -> Result<Tensor> {
    p.validate()?;
    if w.channels() != 1 {
        return Err(Error::Contract("stft_magnitude needs a mono waveform".into()));
    }
    if w.sample_rate() != p.sample_rate {
        return Err(Error::Contract(format!(
            "stft_magnitude expects {} Hz input, got {} Hz",
            p.sample_rate,
            w.sample_rate()
        )));
    }
    let win = p.win_samples();
    let hop = p.hop_samples();
    let bins = p.n_bins();
    let window = match p.window_fn {
        WindowFn::Hann => hann_window(win),
    };

    let mut samples = w.samples().to_vec();
    if samples.len() < win {
        samples.resize(win, 0.0);
    }
    let frames = (samples.len() - win) / hop + 1;

    let fft: Arc<dyn Fft<f64>> = FftPlanner::new().plan_fft_forward(win);
    let mut buf = vec![Complex::new(0.0, 0.0); win];
    let mut scratch = vec![Complex::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    let mut out = Vec::with_capacity(frames * bins);
    for f in 0..frames {
        let frame = &samples[f * hop..f * hop + win];
        for ((b, &s), &wv) in buf.iter_mut().zip(frame).zip(&window) {
            *b = Complex::new(s * wv, 0.0);
        }
        fft.process_with_scratch(&mut buf, &mut scratch);
        out.extend(buf[..bins].iter().map(|c| c.norm()));
    }
    Tensor::new(&[frames, bins], out)
}
