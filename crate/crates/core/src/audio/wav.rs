use std::io::{Cursor, Read};
use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use super::Waveform;
use crate::error::{Error, Result};

/// Decodes integer PCM (8–32 bit) or 32-bit float WAV into a [`Waveform`].
pub fn decode_wav<R: Read>(reader: R, path: &Path) -> Result<Waveform> {
    let decode_err = |message: String| Error::AudioDecode {
        path: path.to_path_buf(),
        message,
    };
    let mut r = WavReader::new(reader).map_err(|e| decode_err(e.to_string()))?;
    let spec = r.spec();
    let samples: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Float, 32) => r
            .samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| decode_err(e.to_string()))?,
        (SampleFormat::Int, bits @ 8..=32) => {
            let scale = (1u64 << (bits - 1)) as f64;
            r.samples::<i32>()
                .map(|s| s.map(|v| v as f64 / scale))
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| decode_err(e.to_string()))?
        }
        (fmt, bits) => {
            return Err(decode_err(format!("unsupported sample format {fmt:?}/{bits}-bit")))
        }
    };
    Waveform::new(samples, spec.sample_rate, spec.channels).map_err(|e| decode_err(e.to_string()))
}

pub fn read_wav(path: &Path) -> Result<Waveform> {
    let file = std::fs::File::open(path).map_err(|e| Error::AudioDecode {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    decode_wav(std::io::BufReader::new(file), path)
}

/// Writes 16-bit PCM, clamping samples to [-1, 1].
pub fn write_wav_pcm16(path: &Path, w: &Waveform) -> Result<()> {
    let spec = WavSpec {
        channels: w.channels(),
        sample_rate: w.sample_rate(),
        bits_per_sample: 16,
        sample_format: SampleFormat::Int,
    };
    let mut buf = Cursor::new(Vec::new());
    {
        let to_io = |e: hound::Error| Error::io(format!("encoding {}", path.display()), std::io::Error::other(e));
        let mut writer = WavWriter::new(&mut buf, spec).map_err(to_io)?;
        for &s in w.samples() {
            let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
            writer.write_sample(v).map_err(to_io)?;
        }
        writer.finalize().map_err(to_io)?;
    }
    crate::fsutil::write_atomic(path, &buf.into_inner())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pcm16_round_trip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.wav");
        let w = Waveform::new(vec![0.0, 0.5, -0.5, 1.0, -1.0, 0.25], 22_050, 2).unwrap();
        write_wav_pcm16(&path, &w).unwrap();
        let back = read_wav(&path).unwrap();
        assert_eq!(back.sample_rate(), 22_050);
        assert_eq!(back.channels(), 2);
        for (a, b) in w.samples().iter().zip(back.samples()) {
            assert!((a - b).abs() < 1.0 / 32_000.0);
        }
    }

    #[test]
    fn float_wav_decodes() {
        let spec = WavSpec {
            channels: 1,
            sample_rate: 8000,
            bits_per_sample: 32,
            sample_format: SampleFormat::Float,
        };
        let mut buf = Cursor::new(Vec::new());
        {
            let mut wr = WavWriter::new(&mut buf, spec).unwrap();
            for s in [0.25f32, -0.75] {
                wr.write_sample(s).unwrap();
            }
            wr.finalize().unwrap();
        }
        let w = decode_wav(Cursor::new(buf.into_inner()), Path::new("mem")).unwrap();
        assert_eq!(w.samples(), &[0.25, -0.75]);
    }

    #[test]
    fn garbage_is_a_decode_error_naming_the_path() {
        let err = decode_wav(Cursor::new(b"not a wav file".to_vec()), Path::new("x.wav")).unwrap_err();
        assert!(matches!(err, Error::AudioDecode { .. }));
        assert!(err.to_string().contains("x.wav"));
        assert!(matches!(read_wav(Path::new("/nonexistent/y.wav")), Err(Error::AudioDecode { .. })));
    }
}
