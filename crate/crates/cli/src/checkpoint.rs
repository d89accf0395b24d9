//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "MFCL" | u32 version = 1 | u32 len + config text
//! repeated until EOF: u32 len + name | u32 rank | rank x u64 dims | data
//! ```
//!
//! Element width follows the `checkpoint.dtype` line of the config text
//! (`f32` when absent). Optimizer moments are stored as `/opt/<name>/m` and
//! `/opt/<name>/v`; step counters and the best validation loss are
//! `checkpoint.*` lines of the config text.

use std::fs;
use std::path::Path;

use mfcl_core::autodiff::ParamStore;
use mfcl_core::encoders::ContrastiveModel;
use mfcl_core::optim::Adam;
use mfcl_core::probe::{Probe, ProbeConfig};
use mfcl_core::tensor::{Scalar, Tensor};
use mfcl_core::train::TrainState;

use crate::error::{CliError, Result};

pub const MAGIC: &[u8; 4] = b"MFCL";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<S> {
    pub config_text: String,
    pub tensors: Vec<(String, Tensor<S>)>,
}

fn corrupt(msg: impl Into<String>) -> CliError {
    CliError::Data(format!("corrupted checkpoint: {}", msg.into()))
}

/// Value of a `key = value` line of checkpoint config text.
pub fn meta<'a>(config_text: &'a str, key: &str) -> Option<&'a str> {
    config_text.lines().find_map(|l| {
        let (k, v) = l.split_once('=')?;
        (k.trim() == key).then(|| v.trim())
    })
}

impl<S: Scalar> Checkpoint<S> {
    pub fn get(&self, name: &str) -> Option<&Tensor<S>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_str(&mut out, &self.config_text);
        for (name, t) in &self.tensors {
            put_str(&mut out, name);
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                v.to_le_bytes_vec(&mut out);
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let config_text = read_header(&mut r)?;
        let dtype = meta(&config_text, "checkpoint.dtype").unwrap_or("f32");
        if dtype != S::NAME {
            return Err(CliError::Data(format!(
                "checkpoint holds {dtype} data but {} was requested",
                S::NAME
            )));
        }
        let mut tensors = Vec::new();
        while r.pos < bytes.len() {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            if rank > 8 {
                return Err(corrupt(format!("`{name}` claims rank {rank}")));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(usize::try_from(r.u64()?).map_err(|_| corrupt("dimension overflow"))?);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| corrupt(format!("`{name}` has an absurd shape {shape:?}")))?;
            let raw = r.take(n.checked_mul(S::BYTES).ok_or_else(|| corrupt("size overflow"))?)?;
            let data = raw.chunks_exact(S::BYTES).map(S::from_le_slice).collect();
            let t = Tensor::new(shape, data).map_err(|e| corrupt(e.to_string()))?;
            tensors.push((name, t));
        }
        Ok(Checkpoint { config_text, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()).map_err(|e| CliError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
        Self::decode(&bytes).map_err(|e| match e {
            CliError::Data(m) => CliError::Data(format!("{}: {m}", path.display())),
            e => e,
        })
    }
}

/// Config text of a checkpoint file without reading its tensors.
pub fn read_config_text(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    read_header(&mut Reader { bytes: &bytes, pos: 0 })
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn read_header(r: &mut Reader<'_>) -> Result<String> {
    let magic = r.take(4).map_err(|_| corrupt("file too short for a header"))?;
    if magic != MAGIC {
        return Err(corrupt("bad magic bytes"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(CliError::Data(format!(
            "unsupported checkpoint version {version} (expected {VERSION})"
        )));
    }
    r.string()
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(corrupt(format!(
                "truncated: needed {n} bytes at offset {}, {} left",
                self.pos,
                self.bytes.len() - self.pos
            ))),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| corrupt("string is not UTF-8"))
    }
}

fn with_meta(config_text: &str, dtype: &str, lines: &[(&str, String)]) -> String {
    let mut s = String::from(config_text);
    if !s.is_empty() && !s.ends_with('\n') {
        s.push('\n');
    }
    s.push_str(&format!("checkpoint.dtype = {dtype}\n"));
    for (k, v) in lines {
        s.push_str(&format!("checkpoint.{k} = {v}\n"));
    }
    s
}

/// Strips `checkpoint.*` lines, leaving the run configuration.
pub fn run_config_text(config_text: &str) -> String {
    config_text
        .lines()
        .filter(|l| !l.trim_start().starts_with("checkpoint."))
        .map(|l| format!("{l}\n"))
        .collect()
}

/// Snapshot of parameters plus optimizer state.
pub fn from_training<S: Scalar>(
    config_text: &str,
    params: &ParamStore<S>,
    adam: &Adam<S>,
    step: usize,
    best_val_loss: Option<f64>,
) -> Checkpoint<S> {
    let text = with_meta(
        config_text,
        S::NAME,
        &[
            ("step", step.to_string()),
            ("adam_step", adam.step_count().to_string()),
            (
                "best_val_loss",
                best_val_loss.map(|v| format!("{v:e}")).unwrap_or_else(|| "none".into()),
            ),
        ],
    );
    let mut tensors: Vec<(String, Tensor<S>)> =
        params.iter().map(|p| (p.name.clone(), p.value.clone())).collect();
    for (i, p) in params.iter().enumerate() {
        let (m, v) = adam.moments(i);
        let shape = p.value.shape().to_vec();
        tensors.push((format!("/opt/{}/m", p.name), Tensor::new(shape.clone(), m.to_vec()).unwrap()));
        tensors.push((format!("/opt/{}/v", p.name), Tensor::new(shape, v.to_vec()).unwrap()));
    }
    Checkpoint { config_text: text, tensors }
}

fn shape_error(name: &str, found: &[usize], expected: &[usize]) -> CliError {
    CliError::Data(format!(
        "checkpoint does not match the model: parameter `{name}` has shape {found:?}, config expects {expected:?}"
    ))
}

/// Copies parameters into `params`, checking every name and shape.
pub fn load_params<S: Scalar>(ckpt: &Checkpoint<S>, params: &mut ParamStore<S>) -> Result<()> {
    for p in params.iter() {
        match ckpt.get(&p.name) {
            None => {
                return Err(CliError::Data(format!(
                    "checkpoint does not match the model: parameter `{}` is missing",
                    p.name
                )))
            }
            Some(t) if t.shape() != p.value.shape() => {
                return Err(shape_error(&p.name, t.shape(), p.value.shape()))
            }
            Some(_) => {}
        }
    }
    for p in params.iter_mut() {
        p.value = ckpt.get(&p.name).unwrap().clone();
    }
    Ok(())
}

/// Rebuilds a training state: parameters, optimizer moments and step.
pub fn restore_training<S: Scalar>(ckpt: &Checkpoint<S>, model: ContrastiveModel<S>) -> Result<TrainState<S>> {
    let mut state = TrainState::fresh(model);
    load_params(ckpt, &mut state.model.params)?;
    let mut ms = Vec::new();
    let mut vs = Vec::new();
    for p in state.model.params.iter() {
        for (buf, tag) in [(&mut ms, "m"), (&mut vs, "v")] {
            let name = format!("/opt/{}/{tag}", p.name);
            let t = ckpt
                .get(&name)
                .ok_or_else(|| CliError::Data(format!("checkpoint lacks optimizer buffer `{name}`")))?;
            if t.shape() != p.value.shape() {
                return Err(shape_error(&name, t.shape(), p.value.shape()));
            }
            buf.push(t.data().to_vec());
        }
    }
    let num = |key: &str| -> Result<u64> {
        meta(&ckpt.config_text, key)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| CliError::Data(format!("checkpoint lacks `{key}`")))
    };
    state.adam.restore(num("checkpoint.adam_step")?, ms, vs)?;
    state.step = num("checkpoint.step")? as usize;
    Ok(state)
}

/// Probe weights plus standardization statistics, always in f64.
pub fn from_probe(config_text: &str, probe: &Probe) -> Checkpoint<f64> {
    let text = with_meta(config_text, "f64", &[("classes", probe.classes.to_string())]);
    let mut tensors: Vec<(String, Tensor<f64>)> =
        probe.params.iter().map(|p| (p.name.clone(), p.value.clone())).collect();
    let (mean, inv_std) = probe.standardization();
    tensors.push(("probe/feature_mean".into(), Tensor::new(vec![mean.len()], mean.to_vec()).unwrap()));
    tensors.push(("probe/feature_inv_std".into(), Tensor::new(vec![inv_std.len()], inv_std.to_vec()).unwrap()));
    Checkpoint { config_text: text, tensors }
}

pub fn to_probe(ckpt: &Checkpoint<f64>, config: ProbeConfig) -> Result<Probe> {
    let classes: usize = meta(&ckpt.config_text, "checkpoint.classes")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| CliError::Data("probe checkpoint lacks `checkpoint.classes`".into()))?;
    let vec_of = |name: &str| -> Result<Vec<f64>> {
        ckpt.get(name)
            .map(|t| t.data().to_vec())
            .ok_or_else(|| CliError::Data(format!("probe checkpoint lacks `{name}`")))
    };
    let mut params = ParamStore::new();
    for (name, t) in &ckpt.tensors {
        if name.starts_with("probe/") && !name.starts_with("probe/feature_") {
            params.add(name, t.clone())?;
        }
    }
    Probe::from_parts(config, classes, &params, vec_of("probe/feature_mean")?, vec_of("probe/feature_inv_std")?)
        .map_err(|e| CliError::Data(format!("probe checkpoint: {e}")))
}
