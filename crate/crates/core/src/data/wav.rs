use std::path::Path;

use crate::error::{Error, Result};
use crate::signal::{Waveform, SAMPLE_RATE};

fn wav_err(path: &Path, detail: impl Into<String>) -> Error {
    Error::Wav { path: path.to_path_buf(), detail: detail.into() }
}

/// Reads 16-bit PCM mono at 16 kHz.
pub fn read_wav(path: &Path) -> Result<Waveform> {
    let reader = hound::WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => wav_err(path, other.to_string()),
    })?;
    let spec = reader.spec();
    if spec.sample_rate != SAMPLE_RATE {
        return Err(wav_err(path, format!("sample rate {} Hz, expected {SAMPLE_RATE} Hz", spec.sample_rate)));
    }
    if spec.channels != 1 {
        return Err(wav_err(path, format!("{} channels, expected mono", spec.channels)));
    }
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(wav_err(path, format!("{}-bit {:?} samples, expected 16-bit PCM", spec.bits_per_sample, spec.sample_format)));
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| v as f32 / 32768.0))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| wav_err(path, e.to_string()))?;
    Waveform::from_samples(samples)
}

/// Writes 16-bit PCM mono at 16 kHz with a 44-byte header; samples beyond
/// `[-1, 1)` are clipped.
pub fn write_wav(path: &Path, w: &Waveform) -> Result<()> {
    let spec = hound::WavSpec { channels: 1, sample_rate: SAMPLE_RATE, bits_per_sample: 16, sample_format: hound::SampleFormat::Int };
    let map = |e: hound::Error| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => wav_err(path, other.to_string()),
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(map)?;
    for &s in w.samples() {
        let q = (s as f64 * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        writer.write_sample(q).map_err(map)?;
    }
    writer.finalize().map_err(map)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_within_one_step_and_canonical_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.wav");
        let samples: Vec<f32> = (0..1000).map(|i| ((i as f32) * 0.37).sin() * 0.9).collect();
        let w = Waveform::from_samples(samples.clone()).unwrap();
        write_wav(&path, &w).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(bytes.len(), 44 + 2 * 1000);
        assert_eq!(&bytes[..4], b"RIFF");
        assert_eq!(&bytes[8..12], b"WAVE");
        assert_eq!(&bytes[36..40], b"data");
        let back = read_wav(&path).unwrap();
        let err = back.samples().iter().zip(&samples).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
        assert!(err <= 1.0 / 32768.0, "{err}");
    }

    #[test]
    fn foreign_formats_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        for (rate, channels, bits, needle) in [(44_100, 1, 16, "sample rate"), (16_000, 2, 16, "channels"), (16_000, 1, 24, "16-bit")] {
            let path = dir.path().join("x.wav");
            let spec = hound::WavSpec { channels, sample_rate: rate, bits_per_sample: bits, sample_format: hound::SampleFormat::Int };
            let mut w = hound::WavWriter::create(&path, spec).unwrap();
            for _ in 0..10 {
                w.write_sample(0i32).unwrap();
            }
            w.finalize().unwrap();
            let err = read_wav(&path).unwrap_err().to_string();
            assert!(err.contains(needle), "{err}");
        }
        assert!(matches!(read_wav(&dir.path().join("missing.wav")), Err(Error::Io { .. })));
    }
}
