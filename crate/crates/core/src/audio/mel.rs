use super::{MelSpectrogram, StftParams};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// HTK mel: `2595 · log10(1 + f / 700)`.
pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Filter edge frequencies: `n_bands + 2` points evenly spaced in mel over
/// `[0, rate / 2]`.
fn mel_points_hz(p: &StftParams) -> Vec<f64> {
    let top = hz_to_mel(p.sample_rate as f64 / 2.0);
    let n = p.n_bands + 1;
    (0..=n)
        .map(|i| mel_to_hz(top * i as f64 / n as f64))
        .collect()
}

/// Peak frequency of band `m`.
pub fn band_center_hz(p: &StftParams, m: usize) -> f64 {
    mel_points_hz(p)[m + 1]
}

/// Triangular filters with unit peak, `n_bands × n_bins`. Filters narrower
/// than the bin spacing can be empty; their band stays zero.
pub fn mel_filterbank(p: &StftParams) -> Tensor {
    let pts = mel_points_hz(p);
    let bins = p.n_bins();
    let bin_hz = p.sample_rate as f64 / p.win_samples() as f64;
    let mut w = vec![0.0; p.n_bands * bins];
    for m in 0..p.n_bands {
        let (lo, center, hi) = (pts[m], pts[m + 1], pts[m + 2]);
        for k in 0..bins {
            let f = k as f64 * bin_hz;
            let rise = (f - lo) / (center - lo);
            let fall = (hi - f) / (hi - center);
            w[m * bins + k] = rise.min(fall).max(0.0);
        }
    }
    Tensor::new(&[p.n_bands, bins], w).expect("filterbank shape")
}

/// Linear interpolation along time with aligned endpoints.
/// `values` is `rows × frames` with `frames ≥ 2`.
pub fn resize_frames(values: &[f64], rows: usize, frames: usize, target: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * target];
    for j in 0..target {
        let pos = if target == 1 {
            0.0
        } else {
            j as f64 * (frames - 1) as f64 / (target - 1) as f64
        };
        let i0 = (pos.floor() as usize).min(frames - 1);
        let i1 = (i0 + 1).min(frames - 1);
        let frac = pos - i0 as f64;
        for r in 0..rows {
            let a = values[r * frames + i0];
            let b = values[r * frames + i1];
            out[r * target + j] = a + (b - a) * frac;
        }
    }
    out
}

/// Applies the mel filterbank per frame and resizes the time axis to
/// `p.target_frames`, yielding `n_bands × target_frames`.
pub fn mel_scale(spec: &Tensor, p: &StftParams) -> Result<MelSpectrogram> {
    p.validate()?;
    if spec.rank() != 2 || spec.cols() != p.n_bins() {
        return Err(Error::dim("mel_scale", spec.shape(), &[p.n_bins()]));
    }
    let fb = mel_filterbank(p);
    // bands × frames
    let mut mel = fb.matmul(&spec.transpose()?)?.into_data();
    let mut frames = spec.rows();
    if frames < 2 {
        log::warn!("mel_scale: {frames} input frame(s); padding by repetition");
        let single: Vec<f64> = mel.clone();
        mel = single.iter().flat_map(|&v| [v, v]).collect();
        frames = 2;
    }
    for v in mel.iter_mut() {
        // filter weights and magnitudes are non-negative; clamp rounding noise
        *v = v.max(0.0);
        if p.log_compress {
            *v = v.ln_1p();
        }
    }
    let resized = resize_frames(&mel, p.n_bands, frames, p.target_frames);
    Ok(MelSpectrogram {
        values: Tensor::new(&[p.n_bands, p.target_frames], resized)?,
        source_rate: p.sample_rate,
        params: p.clone(),
    })
}
