//! Multichannel WAV input/output (PCM 16-bit and IEEE float 32-bit).

use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum WavFormat {
    Pcm16,
    #[default]
    Float32,
}

/// Deinterleaved channels plus sample rate.
#[derive(Clone, Debug, PartialEq)]
pub struct WavData {
    pub channels: Vec<Vec<f64>>,
    pub sample_rate: u32,
}

pub fn read_wav(path: impl AsRef<Path>) -> Result<WavData> {
    let mut reader = WavReader::open(path)?;
    let spec = reader.spec();
    let n_ch = spec.channels as usize;
    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<std::result::Result<_, _>>()?,
        (SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| f64::from(v) / 32768.0))
            .collect::<std::result::Result<_, _>>()?,
        (fmt, bits) => {
            return Err(Error::Config(format!("unsupported wav encoding {fmt:?}/{bits} bit")));
        }
    };
    let mut channels = vec![Vec::with_capacity(interleaved.len() / n_ch.max(1)); n_ch];
    for frame in interleaved.chunks_exact(n_ch) {
        for (c, s) in channels.iter_mut().zip(frame) {
            c.push(*s);
        }
    }
    Ok(WavData { channels, sample_rate: spec.sample_rate })
}

pub fn write_wav(path: impl AsRef<Path>, channels: &[Vec<f64>], sample_rate: u32, format: WavFormat) -> Result<()> {
    let n_ch = channels.len();
    if n_ch == 0 || n_ch > u16::MAX as usize {
        return Err(Error::Config(format!("cannot write {n_ch} channels")));
    }
    let len = channels[0].len();
    if channels.iter().any(|c| c.len() != len) {
        return Err(Error::ShapeMismatch("wav channels differ in length".into()));
    }
    let spec = match format {
        WavFormat::Pcm16 => WavSpec {
            channels: n_ch as u16,
            sample_rate,
            bits_per_sample: 16,
            sample_format: SampleFormat::Int,
        },
        WavFormat::Float32 => WavSpec {
            channels: n_ch as u16,
            sample_rate,
            bits_per_sample: 32,
            sample_format: SampleFormat::Float,
        },
    };
    let mut writer = WavWriter::create(path, spec)?;
    for t in 0..len {
        for c in channels {
            match format {
                WavFormat::Pcm16 => {
                    let v = (c[t] * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
                    writer.write_sample(v)?;
                }
                WavFormat::Float32 => writer.write_sample(c[t] as f32)?,
            }
        }
    }
    writer.finalize()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn float_round_trip_multichannel() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.wav");
        let chans = vec![vec![0.5, -0.25, 0.125], vec![0.0, 1.0, -1.0]];
        write_wav(&path, &chans, 16_000, WavFormat::Float32).unwrap();
        let back = read_wav(&path).unwrap();
        assert_eq!(back.sample_rate, 16_000);
        assert_eq!(back.channels, chans);
    }

    #[test]
    fn pcm16_round_trip_is_quantized() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.wav");
        let chans = vec![vec![0.3, -0.7, 0.0001]];
        write_wav(&path, &chans, 8_000, WavFormat::Pcm16).unwrap();
        let back = read_wav(&path).unwrap();
        for (a, b) in back.channels[0].iter().zip(&chans[0]) {
            assert!((a - b).abs() <= 0.5 / 32768.0 + 1e-12);
        }
    }

    #[test]
    fn ragged_channels_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let r = write_wav(dir.path().join("c.wav"), &[vec![0.0; 3], vec![0.0; 2]], 16_000, WavFormat::Float32);
        assert!(r.is_err());
    }
}
