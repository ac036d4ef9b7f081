//! Band-limited sample-rate conversion with a Kaiser-windowed sinc kernel.

use super::Waveform;
use crate::error::{Error, Result};

/// Kernel half-width in zero crossings of the low-pass sinc.
const ZERO_CROSSINGS: f64 = 24.0;
/// Cutoff as a fraction of the lower Nyquist frequency.
const ROLLOFF: f64 = 0.92;
const KAISER_BETA: f64 = 9.0;

/// Zeroth-order modified Bessel function of the first kind (power series).
fn bessel_i0(x: f64) -> f64 {
    let q = x * x / 4.0;
    let mut term = 1.0;
    let mut sum = 1.0;
    for k in 1..64 {
        term *= q / (k * k) as f64;
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        let px = std::f64::consts::PI * x;
        px.sin() / px
    }
}

/// Resamples a mono waveform to `target` Hz.
///
/// Output length is `round(len · target / rate)`. When downsampling the
/// kernel cutoff drops below the new Nyquist frequency, so content above it is
/// attenuated rather than aliased. Same-rate input is returned unchanged.
pub fn resample(w: &Waveform, target: u32) -> Result<Waveform> {
    if target == 0 {
        return Err(Error::Contract("resample target rate must be positive".into()));
    }
    if w.channels() != 1 {
        return Err(Error::Contract("resample needs a mono waveform".into()));
    }
    let src = w.sample_rate();
    if src == target {
        return Ok(w.clone());
    }
    let x = w.samples();
    if x.is_empty() {
        return Waveform::mono(Vec::new(), target);
    }

    let ratio = target as f64 / src as f64;
    // cutoff in cycles per input sample
    let fc = 0.5 * ratio.min(1.0) * ROLLOFF;
    let half = ZERO_CROSSINGS / (2.0 * fc);
    let norm = bessel_i0(KAISER_BETA);
    let kernel = |t: f64| -> f64 {
        let r = t / half;
        if r.abs() >= 1.0 {
            return 0.0;
        }
        let win = bessel_i0(KAISER_BETA * (1.0 - r * r).sqrt()) / norm;
        2.0 * fc * sinc(2.0 * fc * t) * win
    };

    let out_len = (x.len() as f64 * ratio).round() as usize;
    let step = src as f64 / target as f64;
    let last = x.len() as isize - 1;
    let out = (0..out_len)
        .map(|n| {
            let t = n as f64 * step;
            let lo = ((t - half).ceil() as isize).max(0);
            let hi = ((t + half).floor() as isize).min(last);
            (lo..=hi)
                .map(|k| x[k as usize] * kernel(t - k as f64))
                .sum::<f64>()
        })
        .collect();
    Waveform::mono(out, target)
}
