//! WAV file I/O: 16 kHz mono only, PCM16 or float32 in, float32 out.
//!
//! Anything else is rejected outright — no silent resampling or downmixing.

use std::path::Path;

use thiserror::Error;

use crate::signal::Waveform;
use crate::SAMPLE_RATE;

#[derive(Error, Debug)]
pub enum WavError {
    #[error("failed to open {path}: {source}")]
    Open {
        path: String,
        source: hound::Error,
    },
    #[error("{path}: expected {expected} Hz mono, got {got_rate} Hz {got_channels}-channel (resampling is not performed)")]
    Format {
        path: String,
        expected: u32,
        got_rate: u32,
        got_channels: u16,
    },
    #[error("{path}: unsupported sample format {bits}-bit {kind}")]
    SampleFormat {
        path: String,
        bits: u16,
        kind: String,
    },
    #[error("failed to write {path}: {source}")]
    Write {
        path: String,
        source: hound::Error,
    },
}

pub fn read_wav(path: impl AsRef<Path>) -> Result<Waveform, WavError> {
    let path = path.as_ref();
    let pstr = path.display().to_string();
    let mut reader = hound::WavReader::open(path).map_err(|source| WavError::Open {
        path: pstr.clone(),
        source,
    })?;
    let spec = reader.spec();
    if spec.sample_rate != SAMPLE_RATE || spec.channels != 1 {
        return Err(WavError::Format {
            path: pstr,
            expected: SAMPLE_RATE,
            got_rate: spec.sample_rate,
            got_channels: spec.channels,
        });
    }
    let samples: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect::<Result<_, _>>()
            .map_err(|source| WavError::Open {
                path: pstr.clone(),
                source,
            })?,
        (hound::SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .map(|s| s.map(|v| v as f64))
            .collect::<Result<_, _>>()
            .map_err(|source| WavError::Open {
                path: pstr.clone(),
                source,
            })?,
        (kind, bits) => {
            return Err(WavError::SampleFormat {
                path: pstr,
                bits,
                kind: format!("{kind:?}"),
            })
        }
    };
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(Waveform::new(samples, id))
}

pub fn write_wav(path: impl AsRef<Path>, w: &Waveform) -> Result<(), WavError> {
    let path = path.as_ref();
    let pstr = path.display().to_string();
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: SAMPLE_RATE,
        bits_per_sample: 32,
        sample_format: hound::SampleFormat::Float,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(|source| WavError::Write {
        path: pstr.clone(),
        source,
    })?;
    for &s in &w.samples {
        writer
            .write_sample(s as f32)
            .map_err(|source| WavError::Write {
                path: pstr.clone(),
                source,
            })?;
    }
    writer.finalize().map_err(|source| WavError::Write {
        path: pstr,
        source,
    })
}
