//! Mono WAV files, PCM16 or IEEE float32.

use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};
use mfcl_core::synth::Waveform;

use crate::error::{CliError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Encoding {
    Pcm16,
    Float32,
}

fn wav_err(path: &Path, e: hound::Error) -> CliError {
    CliError::Data(format!("{}: {e}", path.display()))
}

/// Reads a mono PCM16 or float32 file. PCM16 value `v` maps to `v / 32768`.
pub fn read_wav(path: &Path) -> Result<Waveform> {
    let mut reader = WavReader::open(path).map_err(|e| wav_err(path, e))?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(CliError::Data(format!(
            "{}: expected mono audio, found {} channels",
            path.display(),
            spec.channels
        )));
    }
    let samples: Vec<f32> = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f32 / 32768.0))
            .collect::<std::result::Result<_, _>>(),
        (SampleFormat::Float, 32) => reader.samples::<f32>().collect::<std::result::Result<_, _>>(),
        (fmt, bits) => {
            return Err(CliError::Data(format!(
                "{}: unsupported codec {fmt:?} with {bits} bits per sample",
                path.display()
            )))
        }
    }
    .map_err(|e| wav_err(path, e))?;
    Waveform::new(samples, spec.sample_rate)
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

/// Writes raw samples. Empty input and samples outside `[-1, 1]` are
/// rejected.
pub fn write_samples(path: &Path, samples: &[f32], sample_rate: u32, encoding: Encoding) -> Result<()> {
    if samples.is_empty() {
        return Err(CliError::Data(format!("{}: refusing to write an empty waveform", path.display())));
    }
    if let Some(i) = samples.iter().position(|s| !(s.abs() <= 1.0)) {
        return Err(CliError::Data(format!(
            "{}: sample {i} ({}) outside [-1, 1]",
            path.display(),
            samples[i]
        )));
    }
    let spec = match encoding {
        Encoding::Pcm16 => WavSpec {
            channels: 1,
            sample_rate,
            bits_per_sample: 16,
            sample_format: SampleFormat::Int,
        },
        Encoding::Float32 => WavSpec {
            channels: 1,
            sample_rate,
            bits_per_sample: 32,
            sample_format: SampleFormat::Float,
        },
    };
    let mut w = WavWriter::create(path, spec).map_err(|e| wav_err(path, e))?;
    for &s in samples {
        let r = match encoding {
            Encoding::Pcm16 => w.write_sample((s * 32768.0).round().clamp(-32768.0, 32767.0) as i16),
            Encoding::Float32 => w.write_sample(s),
        };
        r.map_err(|e| wav_err(path, e))?;
    }
    w.finalize().map_err(|e| wav_err(path, e))
}

pub fn write_wav(path: &Path, wave: &Waveform, encoding: Encoding) -> Result<()> {
    write_samples(path, wave.samples(), wave.sample_rate(), encoding)
}

/// Duration declared by a file's header, in seconds.
pub fn header_duration(path: &Path) -> Result<f64> {
    let reader = WavReader::open(path).map_err(|e| wav_err(path, e))?;
    Ok(reader.duration() as f64 / reader.spec().sample_rate as f64)
}
