//! Run configuration: flat `section.key = value` lines with `#` comments.
//!
//! Every key has a default, so an empty file is a complete configuration.
//! [`RunConfig::to_text`] echoes every key and is itself parseable.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use mfcl_core::augment::AugmentPolicy;
use mfcl_core::dsp::{DspConfig, Window};
use mfcl_core::encoders::{EvalInputs, ModelConfig};
use mfcl_core::probe::{LabelMode, ProbeConfig};
use mfcl_core::synth::{EventClass, SynthSpec};
use mfcl_core::train::TrainConfig;
use mfcl_core::views::{crop_samples, Format, FormatSpec};

use crate::error::{CliError, Result};
use crate::wav::Encoding;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn name(self) -> &'static str {
        match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        }
    }
}

/// Dataset generation settings.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSettings {
    /// Clips split into train and validation.
    pub n_clips: usize,
    /// Held-out clips for probe evaluation.
    pub n_eval: usize,
    pub clip_len_s: f64,
    pub events_min: usize,
    pub events_max: usize,
    pub event_len_s: (f64, f64),
    pub snr_db: (f64, f64),
    pub val_fraction: f64,
    pub seed: u64,
    pub encoding: Encoding,
}

impl Default for SynthSettings {
    fn default() -> Self {
        let s = SynthSpec::default();
        SynthSettings {
            n_clips: 2000,
            n_eval: 500,
            clip_len_s: s.clip_len_s,
            events_min: s.events_per_clip.0,
            events_max: s.events_per_clip.1,
            event_len_s: s.event_len_s,
            snr_db: s.snr_db,
            val_fraction: 0.05,
            seed: 0,
            encoding: Encoding::Pcm16,
        }
    }
}

impl SynthSettings {
    /// Spec of the pretraining pool (`eval = false`) or the held-out set.
    pub fn spec(&self, sample_rate: u32, eval: bool) -> SynthSpec {
        SynthSpec {
            n_clips: if eval { self.n_eval } else { self.n_clips },
            clip_len_s: self.clip_len_s,
            classes: EventClass::ALL.to_vec(),
            events_per_clip: (self.events_min, self.events_max),
            event_len_s: self.event_len_s,
            snr_db: self.snr_db,
            sample_rate,
            // The eval set uses a disjoint stream family.
            seed: if eval { self.seed ^ 0x5eed_e7a1 } else { self.seed },
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalSettings {
    /// `None` picks both branches for two formats, the shared encoder
    /// otherwise.
    pub inputs: Option<EvalInputs>,
    pub probe: ProbeConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Formats,
    CropSize,
    FreqShift,
    Temperature,
    LatentSize,
    BatchSize,
    ConvDepth,
}

impl Axis {
    pub const ALL: [Axis; 7] = [
        Axis::Formats,
        Axis::CropSize,
        Axis::FreqShift,
        Axis::Temperature,
        Axis::LatentSize,
        Axis::BatchSize,
        Axis::ConvDepth,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Axis::Formats => "formats",
            Axis::CropSize => "crop_size",
            Axis::FreqShift => "freq_shift",
            Axis::Temperature => "temperature",
            Axis::LatentSize => "latent_size",
            Axis::BatchSize => "batch_size",
            Axis::ConvDepth => "conv_depth",
        }
    }

    /// The config key an axis value overrides.
    pub fn key(self) -> &'static str {
        match self {
            Axis::Formats => "views.formats",
            Axis::CropSize => "views.crop_len_s",
            Axis::FreqShift => "augment.freq_shift_max",
            Axis::Temperature => "train.temperature",
            Axis::LatentSize => "model.latent_size",
            Axis::BatchSize => "train.batch",
            Axis::ConvDepth => "model.conv_depth",
        }
    }

    pub fn parse(s: &str) -> Option<Axis> {
        Axis::ALL.into_iter().find(|a| a.name() == s)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblateSettings {
    pub axis: Option<Axis>,
    pub values: Vec<String>,
    pub seeds: Vec<u64>,
}

impl Default for AblateSettings {
    fn default() -> Self {
        AblateSettings {
            axis: None,
            values: Vec::new(),
            seeds: vec![0, 1, 2],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub synth: SynthSettings,
    /// Directory holding `train.csv`, `val.csv` and `eval.csv`.
    pub data_dir: PathBuf,
    pub dsp: DspConfig,
    pub augment: AugmentPolicy,
    pub crop_len_s: f64,
    pub model: ModelConfig,
    pub precision: Precision,
    pub train: TrainConfig,
    pub eval: EvalSettings,
    pub ablate: AblateSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            synth: SynthSettings::default(),
            data_dir: PathBuf::from("data"),
            dsp: DspConfig::default(),
            augment: AugmentPolicy::default(),
            crop_len_s: 3.0,
            model: ModelConfig::default(),
            precision: Precision::F32,
            train: TrainConfig::default(),
            eval: EvalSettings {
                inputs: None,
                probe: ProbeConfig::default(),
            },
            ablate: AblateSettings::default(),
        }
    }
}

fn bad(key: &str, reason: impl Into<String>) -> CliError {
    CliError::Config(format!("`{key}`: {}", reason.into()))
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| bad(key, format!("cannot parse `{v}` as {}", std::any::type_name::<T>())))
}

fn boolean(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(bad(key, format!("`{v}` is not a boolean"))),
    }
}

fn pair(key: &str, v: &str) -> Result<(f64, f64)> {
    let (a, b) = v
        .split_once(',')
        .ok_or_else(|| bad(key, format!("expected `low, high`, got `{v}`")))?;
    Ok((num(key, a.trim())?, num(key, b.trim())?))
}

fn optional<T: std::str::FromStr>(key: &str, v: &str) -> Result<Option<T>> {
    if v == "none" {
        Ok(None)
    } else {
        num(key, v).map(Some)
    }
}

fn show_opt<T: std::fmt::Display>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_else(|| "none".into())
}

fn core_err(e: mfcl_core::Error) -> CliError {
    match e {
        mfcl_core::Error::Config { field, reason } => bad(&field, reason),
        other => CliError::Config(other.to_string()),
    }
}

impl RunConfig {
    /// Every recognised key, in echo order.
    pub const KEYS: &'static [&'static str] = &[
        "synth.n_clips",
        "synth.n_eval",
        "synth.clip_len_s",
        "synth.events_min",
        "synth.events_max",
        "synth.event_len_s",
        "synth.snr_db",
        "synth.val_fraction",
        "synth.seed",
        "synth.encoding",
        "data.dir",
        "dsp.sample_rate",
        "dsp.win_ms",
        "dsp.hop_ms",
        "dsp.n_fft",
        "dsp.n_mels",
        "dsp.n_mfcc",
        "dsp.fmin",
        "dsp.fmax",
        "dsp.log_eps",
        "dsp.window",
        "augment.mix",
        "augment.mix_beta",
        "augment.time_mask",
        "augment.freq_mask",
        "augment.freq_shift_max",
        "views.formats",
        "views.crop_len_s",
        "model.precision",
        "model.conv_depth",
        "model.conv_channels",
        "model.conv_groups",
        "model.spec_blocks",
        "model.spec_channels",
        "model.spec_groups",
        "model.spec_out_channels",
        "model.proj_hidden",
        "model.latent_size",
        "train.steps",
        "train.batch",
        "train.lr",
        "train.lr_min",
        "train.temperature",
        "train.val_every",
        "train.seed",
        "eval.inputs",
        "eval.mode",
        "eval.probe_hidden",
        "eval.probe_lr",
        "eval.probe_steps",
        "eval.probe_batch",
        "eval.probe_crops",
        "ablate.axis",
        "ablate.values",
        "ablate.seeds",
    ];

    /// Sets one key from its textual value. Values are checked for syntax
    /// here and for consistency in [`RunConfig::validate`].
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let v = v.trim();
        match key {
            "synth.n_clips" => self.synth.n_clips = num(key, v)?,
            "synth.n_eval" => self.synth.n_eval = num(key, v)?,
            "synth.clip_len_s" => self.synth.clip_len_s = num(key, v)?,
            "synth.events_min" => self.synth.events_min = num(key, v)?,
            "synth.events_max" => self.synth.events_max = num(key, v)?,
            "synth.event_len_s" => self.synth.event_len_s = pair(key, v)?,
            "synth.snr_db" => self.synth.snr_db = pair(key, v)?,
            "synth.val_fraction" => self.synth.val_fraction = num(key, v)?,
            "synth.seed" => self.synth.seed = num(key, v)?,
            "synth.encoding" => {
                self.synth.encoding = match v {
                    "pcm16" => Encoding::Pcm16,
                    "float32" => Encoding::Float32,
                    _ => return Err(bad(key, format!("`{v}` is not pcm16 or float32"))),
                }
            }
            "data.dir" => self.data_dir = PathBuf::from(v),
            "dsp.sample_rate" => self.dsp.sample_rate = num(key, v)?,
            "dsp.win_ms" => self.dsp.win_ms = num(key, v)?,
            "dsp.hop_ms" => self.dsp.hop_ms = num(key, v)?,
            "dsp.n_fft" => {
                self.dsp.n_fft = if v == "auto" { None } else { Some(num(key, v)?) }
            }
            "dsp.n_mels" => self.dsp.n_mels = num(key, v)?,
            "dsp.n_mfcc" => self.dsp.n_mfcc = num(key, v)?,
            "dsp.fmin" => self.dsp.fmin = num(key, v)?,
            "dsp.fmax" => {
                self.dsp.fmax = if v == "nyquist" { None } else { Some(num(key, v)?) }
            }
            "dsp.log_eps" => self.dsp.log_eps = num(key, v)?,
            "dsp.window" => {
                self.dsp.window = match v {
                    "hann" => Window::Hann,
                    "rectangular" => Window::Rectangular,
                    _ => return Err(bad(key, format!("`{v}` is not hann or rectangular"))),
                }
            }
            "augment.mix" => self.augment.mix_enabled = boolean(key, v)?,
            "augment.mix_beta" => self.augment.mix_beta = pair(key, v)?,
            "augment.time_mask" => self.augment.time_mask = optional(key, v)?,
            "augment.freq_mask" => self.augment.freq_mask = optional(key, v)?,
            "augment.freq_shift_max" => self.augment.freq_shift_max = num(key, v)?,
            "views.formats" => {
                self.model.formats = FormatSpec::parse(v).map_err(|e| bad(key, e.to_string()))?
            }
            "views.crop_len_s" => self.crop_len_s = num(key, v)?,
            "model.precision" => {
                self.precision = match v {
                    "f32" => Precision::F32,
                    "f64" => Precision::F64,
                    _ => return Err(bad(key, format!("`{v}` is not f32 or f64"))),
                }
            }
            "model.conv_depth" => self.model.conv.n_stride2_layers = num(key, v)?,
            "model.conv_channels" => self.model.conv.channels = num(key, v)?,
            "model.conv_groups" => self.model.conv.groups = num(key, v)?,
            "model.spec_blocks" => self.model.spec2d.n_blocks = num(key, v)?,
            "model.spec_channels" => self.model.spec2d.base_channels = num(key, v)?,
            "model.spec_groups" => self.model.spec2d.groups = num(key, v)?,
            "model.spec_out_channels" => self.model.spec2d.out_channels = optional(key, v)?,
            "model.proj_hidden" => self.model.projector.hidden_dim = num(key, v)?,
            "model.latent_size" => self.model.projector.out_dim = num(key, v)?,
            "train.steps" => self.train.steps = num(key, v)?,
            "train.batch" => self.train.batch = num(key, v)?,
            "train.lr" => self.train.lr0 = num(key, v)?,
            "train.lr_min" => self.train.lr_min = num(key, v)?,
            "train.temperature" => self.train.temperature = num(key, v)?,
            "train.val_every" => self.train.val_every = num(key, v)?,
            "train.seed" => self.train.seed = num(key, v)?,
            "eval.inputs" => {
                self.eval.inputs = if v == "auto" {
                    None
                } else {
                    Some(EvalInputs::parse(v).map_err(core_err)?)
                }
            }
            "eval.mode" => {
                self.eval.probe.mode = match v {
                    "multi" => LabelMode::MultiLabel,
                    "single" => LabelMode::SingleLabel,
                    _ => return Err(bad(key, format!("`{v}` is not multi or single"))),
                }
            }
            "eval.probe_hidden" => self.eval.probe.hidden = num(key, v)?,
            "eval.probe_lr" => self.eval.probe.lr = num(key, v)?,
            "eval.probe_steps" => self.eval.probe.steps = num(key, v)?,
            "eval.probe_batch" => self.eval.probe.batch = num(key, v)?,
            "eval.probe_crops" => self.eval.probe.crops_per_clip = num(key, v)?,
            "ablate.axis" => {
                self.ablate.axis = if v == "none" {
                    None
                } else {
                    Some(Axis::parse(v).ok_or_else(|| {
                        let names: Vec<_> = Axis::ALL.iter().map(|a| a.name()).collect();
                        bad(key, format!("`{v}` is not one of {}", names.join(", ")))
                    })?)
                }
            }
            "ablate.values" => {
                self.ablate.values = v
                    .split(';')
                    .map(|s| s.trim().to_string())
                    .filter(|s| !s.is_empty())
                    .collect()
            }
            "ablate.seeds" => {
                self.ablate.seeds = v
                    .split(',')
                    .map(|s| s.trim())
                    .filter(|s| !s.is_empty())
                    .map(|s| num(key, s))
                    .collect::<Result<_>>()?
            }
            _ => return Err(CliError::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Current value of a key in the syntax [`RunConfig::set`] accepts.
    pub fn get(&self, key: &str) -> Option<String> {
        let s = &self.synth;
        let d = &self.dsp;
        let a = &self.augment;
        let m = &self.model;
        let t = &self.train;
        let p = &self.eval.probe;
        Some(match key {
            "synth.n_clips" => s.n_clips.to_string(),
            "synth.n_eval" => s.n_eval.to_string(),
            "synth.clip_len_s" => s.clip_len_s.to_string(),
            "synth.events_min" => s.events_min.to_string(),
            "synth.events_max" => s.events_max.to_string(),
            "synth.event_len_s" => format!("{}, {}", s.event_len_s.0, s.event_len_s.1),
            "synth.snr_db" => format!("{}, {}", s.snr_db.0, s.snr_db.1),
            "synth.val_fraction" => s.val_fraction.to_string(),
            "synth.seed" => s.seed.to_string(),
            "synth.encoding" => match s.encoding {
                Encoding::Pcm16 => "pcm16".into(),
                Encoding::Float32 => "float32".into(),
            },
            "data.dir" => self.data_dir.display().to_string(),
            "dsp.sample_rate" => d.sample_rate.to_string(),
            "dsp.win_ms" => d.win_ms.to_string(),
            "dsp.hop_ms" => d.hop_ms.to_string(),
            "dsp.n_fft" => d.n_fft.map(|n| n.to_string()).unwrap_or_else(|| "auto".into()),
            "dsp.n_mels" => d.n_mels.to_string(),
            "dsp.n_mfcc" => d.n_mfcc.to_string(),
            "dsp.fmin" => d.fmin.to_string(),
            "dsp.fmax" => d.fmax.map(|f| f.to_string()).unwrap_or_else(|| "nyquist".into()),
            "dsp.log_eps" => d.log_eps.to_string(),
            "dsp.window" => match d.window {
                Window::Hann => "hann".into(),
                Window::Rectangular => "rectangular".into(),
            },
            "augment.mix" => a.mix_enabled.to_string(),
            "augment.mix_beta" => format!("{}, {}", a.mix_beta.0, a.mix_beta.1),
            "augment.time_mask" => show_opt(a.time_mask),
            "augment.freq_mask" => show_opt(a.freq_mask),
            "augment.freq_shift_max" => a.freq_shift_max.to_string(),
            "views.formats" => m.formats.label(),
            "views.crop_len_s" => self.crop_len_s.to_string(),
            "model.precision" => self.precision.name().into(),
            "model.conv_depth" => m.conv.n_stride2_layers.to_string(),
            "model.conv_channels" => m.conv.channels.to_string(),
            "model.conv_groups" => m.conv.groups.to_string(),
            "model.spec_blocks" => m.spec2d.n_blocks.to_string(),
            "model.spec_channels" => m.spec2d.base_channels.to_string(),
            "model.spec_groups" => m.spec2d.groups.to_string(),
            "model.spec_out_channels" => show_opt(m.spec2d.out_channels),
            "model.proj_hidden" => m.projector.hidden_dim.to_string(),
            "model.latent_size" => m.projector.out_dim.to_string(),
            "train.steps" => t.steps.to_string(),
            "train.batch" => t.batch.to_string(),
            "train.lr" => t.lr0.to_string(),
            "train.lr_min" => t.lr_min.to_string(),
            "train.temperature" => t.temperature.to_string(),
            "train.val_every" => t.val_every.to_string(),
            "train.seed" => t.seed.to_string(),
            "eval.inputs" => self.eval.inputs.map(|i| i.name().to_string()).unwrap_or_else(|| "auto".into()),
            "eval.mode" => match p.mode {
                LabelMode::MultiLabel => "multi".into(),
                LabelMode::SingleLabel => "single".into(),
            },
            "eval.probe_hidden" => p.hidden.to_string(),
            "eval.probe_lr" => p.lr.to_string(),
            "eval.probe_steps" => p.steps.to_string(),
            "eval.probe_batch" => p.batch.to_string(),
            "eval.probe_crops" => p.crops_per_clip.to_string(),
            "ablate.axis" => self.ablate.axis.map(|a| a.name().to_string()).unwrap_or_else(|| "none".into()),
            "ablate.values" => self.ablate.values.join("; "),
            "ablate.seeds" => {
                let s: Vec<String> = self.ablate.seeds.iter().map(|s| s.to_string()).collect();
                s.join(", ")
            }
            _ => return None,
        })
    }

    /// Parses config text on top of the defaults. In strict mode unknown
    /// keys are errors; otherwise they are returned as warnings.
    pub fn parse(text: &str, strict: bool) -> Result<(RunConfig, Vec<String>)> {
        let mut cfg = RunConfig::default();
        let mut warnings = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                CliError::Config(format!("line {}: expected `section.key = value`", n + 1))
            })?;
            let key = key.trim();
            if !Self::KEYS.contains(&key) {
                let msg = format!("line {}: unknown key `{key}`", n + 1);
                if strict {
                    return Err(CliError::Config(msg));
                }
                warnings.push(msg);
                continue;
            }
            cfg.set(key, value)?;
        }
        cfg.validate()?;
        Ok((cfg, warnings))
    }

    pub fn load(path: &Path, strict: bool) -> Result<(RunConfig, Vec<String>)> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text, strict)
    }

    /// The effective configuration, one `key = value` line per key.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in Self::KEYS {
            let _ = writeln!(out, "{key} = {}", self.get(key).unwrap_or_default());
        }
        out
    }

    /// Number of spectral bins augmentations act on.
    fn spectral_bins(&self) -> usize {
        let f = self.model.formats;
        [f.branch_a, f.branch_b]
            .into_iter()
            .filter(|f| f.is_spectral())
            .map(|f| match f {
                Format::Spectrogram => self.dsp.n_bins(),
                Format::Mfcc => self.dsp.n_mfcc,
                _ => self.dsp.n_mels,
            })
            .min()
            .unwrap_or(self.dsp.n_mels)
    }

    /// Cross-field validation; errors name the offending key.
    pub fn validate(&self) -> Result<()> {
        let s = &self.synth;
        if s.n_clips == 0 {
            return Err(bad("synth.n_clips", "must be > 0"));
        }
        if !(0.0..1.0).contains(&s.val_fraction) {
            return Err(bad("synth.val_fraction", "must lie in [0, 1)"));
        }
        self.synth.spec(self.dsp.sample_rate, false).validate().map_err(core_err)?;
        self.dsp.validate().map_err(core_err)?;
        self.augment.validate(self.spectral_bins()).map_err(core_err)?;
        self.model.validate().map_err(core_err)?;
        self.train.validate().map_err(core_err)?;
        self.eval.probe.validate().map_err(core_err)?;
        if !(self.crop_len_s > 0.0) {
            return Err(bad("views.crop_len_s", "must be > 0"));
        }
        if self.crop_len_s > s.clip_len_s {
            return Err(bad(
                "views.crop_len_s",
                format!("crop of {} s does not fit {} s clips", self.crop_len_s, s.clip_len_s),
            ));
        }
        let n = crop_samples(self.crop_len_s, self.dsp.sample_rate);
        for f in [self.model.formats.branch_a, self.model.formats.branch_b] {
            let fits = match f {
                Format::Waveform => self.model.conv.output_frames(n).is_some(),
                spectral => self.dsp.frame_count(n).is_some_and(|frames| {
                    let bins = match spectral {
                        Format::Spectrogram => self.dsp.n_bins(),
                        Format::Mfcc => self.dsp.n_mfcc,
                        _ => self.dsp.n_mels,
                    };
                    self.model.spec2d.output_grid(frames, bins).is_some()
                }),
            };
            if !fits {
                return Err(bad(
                    "views.crop_len_s",
                    format!("a {} s crop is too short for the {} encoder", self.crop_len_s, f.name()),
                ));
            }
        }
        if let Some(EvalInputs::BranchB) = self.eval.inputs {
            if self.model.formats.is_single_format() {
                return Err(bad("eval.inputs", "a shared encoder has no separate branch b"));
            }
        }
        if let LabelMode::SingleLabel = self.eval.probe.mode {
            if s.events_max != 1 {
                return Err(bad("eval.mode", "single-label mode needs synth.events_max = 1"));
            }
        }
        if let Some(axis) = self.ablate.axis {
            if self.ablate.values.is_empty() {
                return Err(bad("ablate.values", format!("axis `{}` needs values", axis.name())));
            }
            if self.ablate.seeds.is_empty() {
                return Err(bad("ablate.seeds", "at least one seed required"));
            }
        }
        Ok(())
    }

    /// Copy with one more `key = value` applied and revalidated.
    pub fn with(&self, key: &str, value: &str) -> Result<RunConfig> {
        let mut c = self.clone();
        c.set(key, value)?;
        c.validate()?;
        Ok(c)
    }

    pub fn eval_inputs(&self) -> EvalInputs {
        self.eval.inputs.unwrap_or(if self.model.formats.is_single_format() {
            EvalInputs::BranchA
        } else {
            EvalInputs::Both
        })
    }
}
