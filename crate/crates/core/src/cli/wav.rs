//! Mono RIFF/WAV I/O, 16-bit PCM and 32-bit float only.

use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use crate::error::{Error, Result};
use crate::spectral::Waveform;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WavFormat {
    Pcm16,
    Float32,
}

/// Why a file could not be used.
#[derive(Debug)]
pub enum WavError {
    /// Missing, unreadable or not a WAV file.
    Unreadable(String),
    /// A valid WAV this tool does not accept (channels, sample format).
    Unsupported(String),
}

impl From<WavError> for Error {
    fn from(e: WavError) -> Self {
        match e {
            WavError::Unreadable(m) | WavError::Unsupported(m) => Error::Wav(m),
        }
    }
}

pub fn read_wav(path: &Path) -> std::result::Result<(Waveform, WavFormat), WavError> {
    let mut reader = WavReader::open(path).map_err(|e| WavError::Unreadable(format!("{}: {e}", path.display())))?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(WavError::Unsupported(format!(
            "{}: expected mono, found {} channels",
            path.display(),
            spec.channels
        )));
    }
    let unreadable = |e: hound::Error| WavError::Unreadable(format!("{}: {e}", path.display()));
    let (samples, format) = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Int, 16) => (
            reader
                .samples::<i16>()
                .map(|s| s.map(|v| v as f64 / 32768.0))
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(unreadable)?,
            WavFormat::Pcm16,
        ),
        (SampleFormat::Float, 32) => (
            reader
                .samples::<f32>()
                .map(|s| s.map(f64::from))
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(unreadable)?,
            WavFormat::Float32,
        ),
        (f, b) => {
            return Err(WavError::Unsupported(format!(
                "{}: unsupported sample format {f:?}/{b} bits (mono PCM16 or float32 only)",
                path.display()
            )))
        }
    };
    let wave = Waveform::new(samples, spec.sample_rate).map_err(|e| WavError::Unreadable(e.to_string()))?;
    Ok((wave, format))
}

/// PCM16 output is rounded and saturated to the 16-bit range.
pub fn write_wav(path: &Path, wave: &Waveform, format: WavFormat) -> Result<()> {
    let spec = WavSpec {
        channels: 1,
        sample_rate: wave.sample_rate,
        bits_per_sample: match format {
            WavFormat::Pcm16 => 16,
            WavFormat::Float32 => 32,
        },
        sample_format: match format {
            WavFormat::Pcm16 => SampleFormat::Int,
            WavFormat::Float32 => SampleFormat::Float,
        },
    };
    let err = |e: hound::Error| Error::Wav(format!("{}: {e}", path.display()));
    let mut cursor = std::io::Cursor::new(Vec::new());
    {
        let mut w = WavWriter::new(&mut cursor, spec).map_err(err)?;
        for &s in &wave.samples {
            match format {
                WavFormat::Pcm16 => w.write_sample((s * 32768.0).round().clamp(-32768.0, 32767.0) as i16),
                WavFormat::Float32 => w.write_sample(s as f32),
            }
            .map_err(err)?;
        }
        w.finalize().map_err(err)?;
    }
    super::checkpoint::write_atomic(path, &cursor.into_inner())
}
