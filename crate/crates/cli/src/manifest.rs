//! Dataset manifests: `path,labels,duration_s` CSV with paths relative to
//! the manifest's directory.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use mfcl_core::rng::{self, domain};
use mfcl_core::synth::{LabelVector, Waveform};
use rand::seq::SliceRandom;

use crate::error::{CliError, Result};
use crate::wav;

pub const HEADER: &str = "path,labels,duration_s";

#[derive(Clone, Debug, PartialEq)]
pub struct ClipRecord {
    pub path: PathBuf,
    pub labels: LabelVector,
    pub duration_s: f64,
}

pub fn format_manifest(records: &[ClipRecord]) -> String {
    let mut s = String::from(HEADER);
    s.push('\n');
    for r in records {
        let _ = writeln!(
            s,
            "{},{},{}",
            r.path.display(),
            r.labels.to_bit_string(),
            r.duration_s
        );
    }
    s
}

pub fn write_manifest(path: &Path, records: &[ClipRecord]) -> Result<()> {
    for r in records {
        let p = r.path.to_string_lossy();
        if p.contains(',') || p.contains('\n') {
            return Err(CliError::Data(format!("clip path `{p}` contains a separator")));
        }
    }
    fs::write(path, format_manifest(records)).map_err(|e| CliError::io(path, e))
}

pub fn parse_manifest(text: &str) -> Result<Vec<ClipRecord>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == HEADER => {}
        other => {
            return Err(CliError::Data(format!(
                "manifest header must be `{HEADER}`, found `{}`",
                other.unwrap_or("")
            )))
        }
    }
    let mut out = Vec::new();
    for (n, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |what: &str| CliError::Data(format!("manifest line {}: {what}", n + 2));
        let mut parts = line.rsplitn(3, ',');
        let dur = parts.next().ok_or_else(|| bad("missing duration"))?;
        let labels = parts.next().ok_or_else(|| bad("missing labels"))?;
        let path = parts.next().ok_or_else(|| bad("missing path"))?;
        let duration_s: f64 = dur.trim().parse().map_err(|_| bad("duration is not a number"))?;
        if !(duration_s > 0.0) {
            return Err(bad("duration must be positive"));
        }
        let labels = LabelVector::parse(labels.trim()).map_err(|e| bad(&e.to_string()))?;
        out.push(ClipRecord {
            path: PathBuf::from(path.trim()),
            labels,
            duration_s,
        });
    }
    Ok(out)
}

pub fn read_manifest(path: &Path) -> Result<Vec<ClipRecord>> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    parse_manifest(&text).map_err(|e| match e {
        CliError::Data(m) => CliError::Data(format!("{}: {m}", path.display())),
        e => e,
    })
}

/// Number of validation records for a split fraction.
pub fn val_count(n: usize, val_fraction: f64) -> usize {
    ((n as f64 * val_fraction).round() as usize).min(n)
}

/// Splits records into train and validation sets. Which records go to
/// validation depends only on `seed`; both parts keep manifest order.
pub fn split(records: &[ClipRecord], val_fraction: f64, seed: u64) -> (Vec<ClipRecord>, Vec<ClipRecord>) {
    let n_val = val_count(records.len(), val_fraction);
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.shuffle(&mut rng::stream(seed, domain::SPLIT, 0));
    let mut is_val = vec![false; records.len()];
    for &i in &order[..n_val] {
        is_val[i] = true;
    }
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (r, v) in records.iter().zip(is_val) {
        if v {
            val.push(r.clone());
        } else {
            train.push(r.clone());
        }
    }
    (train, val)
}

/// Loaded audio and labels of a manifest.
#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub waves: Vec<Waveform>,
    pub labels: Vec<LabelVector>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.waves.len()
    }

    pub fn is_empty(&self) -> bool {
        self.waves.is_empty()
    }
}

/// Reads every clip of a manifest and checks its declared duration.
pub fn load(manifest: &Path) -> Result<Dataset> {
    let records = read_manifest(manifest)?;
    let dir = manifest.parent().unwrap_or(Path::new("."));
    let mut ds = Dataset::default();
    for r in records {
        let path = dir.join(&r.path);
        let w = wav::read_wav(&path)?;
        let tol = 1.0 / w.sample_rate() as f64;
        if (w.duration_s() - r.duration_s).abs() > tol {
            return Err(CliError::Data(format!(
                "{}: manifest says {} s but file holds {} s",
                path.display(),
                r.duration_s,
                w.duration_s()
            )));
        }
        ds.waves.push(w);
        ds.labels.push(r.labels);
    }
    Ok(ds)
}
