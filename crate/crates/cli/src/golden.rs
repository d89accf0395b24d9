//! DSP golden vectors.
//!
//! Text format: a `shape <rows> <cols>` line, then one row (frame) per line
//! of space-separated values with 9 significant digits.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use mfcl_core::dsp::{DspConfig, FrontEnd, Matrix};
use mfcl_core::synth::{synth_indexed, SynthSpec, Waveform};

use crate::error::{CliError, Result};
use crate::wav::{self, Encoding};

pub const TOLERANCE: f64 = 1e-5;
pub const CLIP_FILE: &str = "reference.wav";
pub const OUTPUTS: [&str; 3] = ["spectrogram", "logmel", "mfcc"];

pub fn format_matrix(m: &Matrix) -> String {
    let mut s = format!("shape {} {}\n", m.rows, m.cols);
    for r in 0..m.rows {
        let row: Vec<String> = m.row(r).iter().map(|v| format!("{v:.8e}")).collect();
        let _ = writeln!(s, "{}", row.join(" "));
    }
    s
}

pub fn parse_matrix(text: &str) -> Result<Matrix> {
    let bad = |m: &str| CliError::Data(format!("golden file: {m}"));
    let mut lines = text.lines();
    let head: Vec<&str> = lines.next().unwrap_or("").split_whitespace().collect();
    let (rows, cols) = match head.as_slice() {
        ["shape", r, c] => (
            r.parse::<usize>().map_err(|_| bad("bad row count"))?,
            c.parse::<usize>().map_err(|_| bad("bad column count"))?,
        ),
        _ => return Err(bad("missing `shape <rows> <cols>` line")),
    };
    let mut m = Matrix::zeros(rows, cols);
    let mut n = 0;
    for line in lines.filter(|l| !l.trim().is_empty()) {
        if n == rows {
            return Err(bad("more rows than declared"));
        }
        let vals = line
            .split_whitespace()
            .map(|v| v.parse::<f64>().map_err(|_| bad(&format!("bad value `{v}`"))))
            .collect::<Result<Vec<_>>>()?;
        if vals.len() != cols {
            return Err(bad(&format!("row {n} has {} values, expected {cols}", vals.len())));
        }
        m.row_mut(n).copy_from_slice(&vals);
        n += 1;
    }
    if n != rows {
        return Err(bad(&format!("{n} rows, expected {rows}")));
    }
    Ok(m)
}

/// The 1 s reference clip: a short synthetic mixture at peak 0.25, which
/// keeps power values small enough for 9 significant digits to resolve
/// 1e-5 absolute.
pub fn reference_clip() -> Waveform {
    let spec = SynthSpec {
        n_clips: 1,
        clip_len_s: 1.0,
        event_len_s: (0.3, 0.6),
        events_per_clip: (2, 2),
        seed: 2024,
        ..SynthSpec::default()
    };
    let w = synth_indexed(&spec, 0).expect("reference spec is valid").wave;
    let g = 0.25 / w.peak();
    Waveform::new(w.samples().iter().map(|s| s * g).collect(), w.sample_rate()).unwrap()
}

pub fn compute(wave: &Waveform) -> Result<Vec<(&'static str, Matrix)>> {
    let front = FrontEnd::new(DspConfig::default())?;
    let x = wave.to_f64();
    Ok(vec![
        ("spectrogram", front.power(&x)?.values),
        ("logmel", front.log_mel(&x)?.values),
        ("mfcc", front.mfcc(&x)?.values),
    ])
}

/// Writes the reference clip and its golden outputs into `dir`.
pub fn emit(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let clip = reference_clip();
    wav::write_wav(&dir.join(CLIP_FILE), &clip, Encoding::Float32)?;
    for (name, m) in compute(&clip)? {
        let p = dir.join(format!("{name}.txt"));
        fs::write(&p, format_matrix(&m)).map_err(|e| CliError::io(&p, e))?;
    }
    Ok(())
}

/// Recomputes outputs from the committed clip and returns the largest
/// absolute deviation per output.
pub fn verify(dir: &Path) -> Result<Vec<(&'static str, f64)>> {
    let clip = wav::read_wav(&dir.join(CLIP_FILE))?;
    let mut out = Vec::new();
    for (name, m) in compute(&clip)? {
        let p = dir.join(format!("{name}.txt"));
        let text = fs::read_to_string(&p).map_err(|e| CliError::io(&p, e))?;
        let g = parse_matrix(&text)?;
        if (g.rows, g.cols) != (m.rows, m.cols) {
            return Err(CliError::Data(format!(
                "{name}: golden shape {}x{} but computed {}x{}",
                g.rows, g.cols, m.rows, m.cols
            )));
        }
        let err = g
            .data
            .iter()
            .zip(&m.data)
            .fold(0.0f64, |e, (a, b)| e.max((a - b).abs()));
        out.push((name, err));
    }
    Ok(out)
}
