//! Commands: dataset synthesis, pretraining, probing, evaluation and
//! ablation grids.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use mfcl_core::dsp::FrontEnd;
use mfcl_core::encoders::ContrastiveModel;
use mfcl_core::metrics::MapReport;
use mfcl_core::probe::{crop_training_set, evaluate, train_probe, EvalResult, FeatureExtractor, Probe, ProbeConfig};
use mfcl_core::synth::{synth_indexed, EventClass, NUM_CLASSES};
use mfcl_core::tensor::Scalar;
use mfcl_core::train::{metrics_line, Snapshot, TrainState, Trainer, METRICS_HEADER};
use mfcl_core::views::ViewSettings;

use crate::checkpoint::{self, Checkpoint};
use crate::config::{Precision, RunConfig};
use crate::error::{CliError, Result};
use crate::manifest::{self, ClipRecord, Dataset};
use crate::wav;

pub const CONFIG_FILE: &str = "config.effective";
pub const METRICS_FILE: &str = "metrics.csv";
pub const BEST_CKPT: &str = "ckpt.best";
pub const LAST_CKPT: &str = "ckpt.last";
pub const PROBE_CKPT: &str = "probe.ckpt";
pub const EVAL_FILE: &str = "eval.csv";
pub const ABLATION_FILE: &str = "ablation.csv";
pub const ABLATION_SUMMARY_FILE: &str = "ablation_summary.csv";

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

/// FNV-1a of a text, as 16 hex digits.
pub fn text_hash(text: &str) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in text.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    format!("{h:016x}")
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSummary {
    pub train: usize,
    pub val: usize,
    pub eval: usize,
}

/// Writes the pretraining pool (split into `train.csv` / `val.csv`) and the
/// held-out `eval.csv` set under `out`.
pub fn cmd_synth(cfg: &RunConfig, out: &Path) -> Result<SynthSummary> {
    let sr = cfg.dsp.sample_rate;
    let mut summary = SynthSummary { train: 0, val: 0, eval: 0 };
    for (eval, sub) in [(false, "pool"), (true, "eval")] {
        let spec = cfg.synth.spec(sr, eval);
        let dir = out.join(sub);
        create_dir(&dir)?;
        let mut records = Vec::with_capacity(spec.n_clips);
        for i in 0..spec.n_clips {
            let clip = synth_indexed(&spec, i)?;
            let rel = PathBuf::from(sub).join(format!("clip_{i:05}.wav"));
            wav::write_wav(&out.join(&rel), &clip.wave, cfg.synth.encoding)?;
            records.push(ClipRecord {
                path: rel,
                labels: clip.labels,
                duration_s: clip.wave.duration_s(),
            });
        }
        if eval {
            summary.eval = records.len();
            manifest::write_manifest(&out.join("eval.csv"), &records)?;
        } else {
            let (train, val) = manifest::split(&records, cfg.synth.val_fraction, cfg.synth.seed);
            summary.train = train.len();
            summary.val = val.len();
            manifest::write_manifest(&out.join("train.csv"), &train)?;
            manifest::write_manifest(&out.join("val.csv"), &val)?;
        }
    }
    write_file(&out.join(CONFIG_FILE), &cfg.to_text())?;
    Ok(summary)
}

/// The three splits of a synthesized dataset.
#[derive(Clone, Debug, Default)]
pub struct Datasets {
    pub train: Dataset,
    pub val: Dataset,
    pub eval: Dataset,
}

pub fn load_split(dir: &Path, name: &str) -> Result<Dataset> {
    let p = dir.join(format!("{name}.csv"));
    if !p.exists() {
        return Err(CliError::Data(format!("manifest {} not found", p.display())));
    }
    manifest::load(&p)
}

pub fn load_datasets(dir: &Path, with_eval: bool) -> Result<Datasets> {
    Ok(Datasets {
        train: load_split(dir, "train")?,
        val: load_split(dir, "val")?,
        eval: if with_eval { load_split(dir, "eval")? } else { Dataset::default() },
    })
}

/// In-memory datasets straight from the generator, without files.
pub fn synth_in_memory(cfg: &RunConfig) -> Result<Datasets> {
    let sr = cfg.dsp.sample_rate;
    let gen = |eval: bool| -> Result<Vec<(ClipRecord, mfcl_core::synth::SynthClip)>> {
        let spec = cfg.synth.spec(sr, eval);
        (0..spec.n_clips)
            .map(|i| {
                let c = synth_indexed(&spec, i)?;
                let r = ClipRecord {
                    path: PathBuf::from(format!("{i}")),
                    labels: c.labels.clone(),
                    duration_s: c.wave.duration_s(),
                };
                Ok((r, c))
            })
            .collect()
    };
    let pool = gen(false)?;
    let records: Vec<ClipRecord> = pool.iter().map(|(r, _)| r.clone()).collect();
    let (train_r, val_r) = manifest::split(&records, cfg.synth.val_fraction, cfg.synth.seed);
    let pick = |rs: &[ClipRecord]| {
        let mut d = Dataset::default();
        for r in rs {
            let i: usize = r.path.to_string_lossy().parse().unwrap();
            d.waves.push(pool[i].1.wave.clone());
            d.labels.push(pool[i].1.labels.clone());
        }
        d
    };
    let mut eval = Dataset::default();
    for (_, c) in gen(true)? {
        eval.waves.push(c.wave);
        eval.labels.push(c.labels);
    }
    Ok(Datasets {
        train: pick(&train_r),
        val: pick(&val_r),
        eval,
    })
}

/// Per-run hooks for persisting progress.
struct RunFiles {
    dir: PathBuf,
    config_text: String,
    metrics: BufWriter<File>,
}

impl RunFiles {
    fn create(dir: &Path, cfg: &RunConfig, append: bool) -> Result<Self> {
        create_dir(dir)?;
        let config_text = cfg.to_text();
        write_file(&dir.join(CONFIG_FILE), &config_text)?;
        let p = dir.join(METRICS_FILE);
        let file = if append && p.exists() {
            fs::OpenOptions::new().append(true).open(&p)
        } else {
            File::create(&p)
        }
        .map_err(|e| CliError::io(&p, e))?;
        let mut metrics = BufWriter::new(file);
        if !append {
            writeln!(metrics, "{METRICS_HEADER}").map_err(|e| CliError::io(&p, e))?;
        }
        Ok(RunFiles {
            dir: dir.to_path_buf(),
            config_text,
            metrics,
        })
    }

    fn save_snapshot<S: Scalar>(&self, file: &str, snap: &Snapshot<S>) -> Result<()> {
        checkpoint::from_training(&self.config_text, &snap.params, &snap.adam, snap.step, Some(snap.val_loss))
            .save(&self.dir.join(file))
    }
}

/// Pretrains a model. With `dir`, writes the effective config, the metrics
/// CSV and checkpoints; with `resume`, continues from `ckpt.last` in `dir`.
pub fn pretrain<S: Scalar>(
    cfg: &RunConfig,
    data: &Datasets,
    dir: Option<&Path>,
    resume: bool,
) -> Result<TrainState<S>> {
    let front = FrontEnd::new(cfg.dsp.clone())?;
    let settings = ViewSettings {
        formats: cfg.model.formats,
        policy: &cfg.augment,
        crop_len_s: cfg.crop_len_s,
        front: &front,
    };
    let model = ContrastiveModel::<S>::new(cfg.model.clone(), cfg.train.seed)?;
    let mut state = TrainState::fresh(model.clone());
    if resume {
        let dir = dir.ok_or_else(|| CliError::Other("resume needs a run directory".into()))?;
        let last = Checkpoint::<S>::load(&dir.join(LAST_CKPT))?;
        state = checkpoint::restore_training(&last, model.clone())?;
        let best_path = dir.join(BEST_CKPT);
        if best_path.exists() {
            let best = Checkpoint::<S>::load(&best_path)?;
            let b = checkpoint::restore_training(&best, model)?;
            let val_loss = checkpoint::meta(&best.config_text, "checkpoint.best_val_loss")
                .and_then(|v| v.parse().ok())
                .unwrap_or(f64::INFINITY);
            state.best = Some(Snapshot {
                step: b.step,
                val_loss,
                params: b.model.params,
                adam: b.adam,
            });
        }
    }
    let mut files = match dir {
        Some(d) => Some(RunFiles::create(d, cfg, resume)?),
        None => None,
    };
    let mut trainer = Trainer::new(cfg.train, state, settings, &data.train.waves, &data.val.waves)?;
    let mut best_step = trainer.state.best.as_ref().map(|b| b.step);
    while !trainer.is_done() {
        let row = trainer.step()?;
        if let Some(f) = files.as_mut() {
            let p = f.dir.join(METRICS_FILE);
            writeln!(f.metrics, "{}", metrics_line(&row)).map_err(|e| CliError::io(&p, e))?;
            if row.val_loss.is_some() || trainer.is_done() {
                f.metrics.flush().map_err(|e| CliError::io(&p, e))?;
                let st = &trainer.state;
                let now = st.best.as_ref().map(|b| b.step);
                if now != best_step {
                    f.save_snapshot(BEST_CKPT, st.best.as_ref().unwrap())?;
                    best_step = now;
                }
                checkpoint::from_training(&f.config_text, &st.model.params, &st.adam, st.step, st.best.as_ref().map(|b| b.val_loss))
                    .save(&f.dir.join(LAST_CKPT))?;
            }
        }
    }
    Ok(trainer.state)
}

/// The model whose encoders the probe reads: the best snapshot of a run.
pub fn best_model<S: Scalar>(state: &TrainState<S>) -> ContrastiveModel<S> {
    let mut m = state.model.clone();
    if let Some(b) = &state.best {
        m.params = b.params.clone();
    }
    m
}

pub fn load_model<S: Scalar>(cfg: &RunConfig, ckpt_path: &Path) -> Result<ContrastiveModel<S>> {
    let ckpt = Checkpoint::<S>::load(ckpt_path)?;
    let mut model = ContrastiveModel::<S>::new(cfg.model.clone(), cfg.train.seed)?;
    checkpoint::load_params(&ckpt, &mut model.params)?;
    Ok(model)
}

fn probe_config(cfg: &RunConfig) -> ProbeConfig {
    ProbeConfig {
        seed: cfg.train.seed,
        ..cfg.eval.probe
    }
}

/// Trains a probe on frozen features of random crops of the train split.
pub fn fit_probe<S: Scalar>(cfg: &RunConfig, model: &ContrastiveModel<S>, train: &Dataset) -> Result<Probe> {
    let front = FrontEnd::new(cfg.dsp.clone())?;
    let ex = FeatureExtractor::new(model, &front, cfg.eval_inputs());
    let pc = probe_config(cfg);
    let data = crop_training_set(&ex, &train.waves, &train.labels, cfg.crop_len_s, &pc)?;
    Ok(train_probe(&data, NUM_CLASSES, &pc)?)
}

pub fn score<S: Scalar>(cfg: &RunConfig, model: &ContrastiveModel<S>, probe: &Probe, eval: &Dataset) -> Result<EvalResult> {
    let front = FrontEnd::new(cfg.dsp.clone())?;
    let ex = FeatureExtractor::new(model, &front, cfg.eval_inputs());
    Ok(evaluate(probe, &ex, &eval.waves, &eval.labels, cfg.crop_len_s)?)
}

/// `class,ap` rows and a trailing summary line.
pub fn format_eval_report(report: &MapReport, accuracy: Option<f64>, config_hash: &str, checkpoint_id: &str) -> String {
    let mut s = String::from("class,ap\n");
    for (c, ap) in report.per_class.iter().enumerate() {
        let name = EventClass::from_id(c).map(|e| e.name()).unwrap_or("?");
        match ap {
            Some(v) => s.push_str(&format!("{name},{v:.6}\n")),
            None => s.push_str(&format!("{name},excluded\n")),
        }
    }
    s.push_str(&format!(
        "# map={:.6} accuracy={} config_hash={config_hash} checkpoint={checkpoint_id}\n",
        report.map,
        accuracy.map(|a| format!("{a:.6}")).unwrap_or_else(|| "none".into())
    ));
    s
}

/// Outcome of one pretrain + probe + eval run.
#[derive(Clone, Debug)]
pub struct Outcome {
    pub map: f64,
    pub result: EvalResult,
    pub final_train_loss: Option<f64>,
}

/// Pretrains (unless `pretrain` is false, which probes the random
/// initialization), probes and scores on the eval split.
pub fn experiment<S: Scalar>(cfg: &RunConfig, data: &Datasets, dir: Option<&Path>, pretrain_first: bool) -> Result<Outcome> {
    let (model, final_train_loss) = if pretrain_first {
        let state = pretrain::<S>(cfg, data, dir, false)?;
        (best_model(&state), None)
    } else {
        (ContrastiveModel::<S>::new(cfg.model.clone(), cfg.train.seed)?, None)
    };
    let probe = fit_probe(cfg, &model, &data.train)?;
    let result = score(cfg, &model, &probe, &data.eval)?;
    if let Some(d) = dir {
        create_dir(d)?;
        let report = format_eval_report(
            &result.report,
            result.accuracy,
            &text_hash(&cfg.to_text()),
            &format!("{:016x}", model.params.checksum()),
        );
        write_file(&d.join(EVAL_FILE), &report)?;
    }
    Ok(Outcome {
        map: result.report.map,
        result,
        final_train_loss,
    })
}

/// Dispatches on the configured precision.
macro_rules! with_precision {
    ($cfg:expr, $f:ident ( $($arg:expr),* )) => {
        match $cfg.precision {
            Precision::F32 => $f::<f32>($($arg),*),
            Precision::F64 => $f::<f64>($($arg),*),
        }
    };
}

pub fn cmd_pretrain(cfg: &RunConfig, run_dir: &Path, resume: bool) -> Result<()> {
    let data = load_datasets(&cfg.data_dir, false)?;
    fn go<S: Scalar>(cfg: &RunConfig, data: &Datasets, dir: &Path, resume: bool) -> Result<()> {
        pretrain::<S>(cfg, data, Some(dir), resume).map(|_| ())
    }
    with_precision!(cfg, go(cfg, &data, run_dir, resume))
}

pub fn cmd_probe(cfg: &RunConfig, run_dir: &Path) -> Result<()> {
    let train = load_split(&cfg.data_dir, "train")?;
    fn go<S: Scalar>(cfg: &RunConfig, train: &Dataset, dir: &Path) -> Result<()> {
        let model = load_model::<S>(cfg, &dir.join(BEST_CKPT))?;
        let probe = fit_probe(cfg, &model, train)?;
        checkpoint::from_probe(&cfg.to_text(), &probe).save(&dir.join(PROBE_CKPT))
    }
    with_precision!(cfg, go(cfg, &train, run_dir))
}

pub fn cmd_eval(cfg: &RunConfig, run_dir: &Path) -> Result<EvalResult> {
    let eval = load_split(&cfg.data_dir, "eval")?;
    fn go<S: Scalar>(cfg: &RunConfig, eval: &Dataset, dir: &Path) -> Result<EvalResult> {
        let model = load_model::<S>(cfg, &dir.join(BEST_CKPT))?;
        let pc = Checkpoint::<f64>::load(&dir.join(PROBE_CKPT))?;
        let probe = checkpoint::to_probe(&pc, probe_config(cfg))?;
        let result = score(cfg, &model, &probe, eval)?;
        let report = format_eval_report(
            &result.report,
            result.accuracy,
            &text_hash(&cfg.to_text()),
            &format!("{:016x}", model.params.checksum()),
        );
        write_file(&dir.join(EVAL_FILE), &report)?;
        Ok(result)
    }
    with_precision!(cfg, go(cfg, &eval, run_dir))
}

/// One row of an ablation table; `map` is `None` for a failed run.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub axis: String,
    pub value: String,
    pub seed: u64,
    pub map: Option<f64>,
    pub error: Option<String>,
}

pub fn ablation_line(r: &AblationRow) -> String {
    let v = r.map.map(|m| format!("{m:.6}")).unwrap_or_else(|| "failed".into());
    format!("{},{},{},{}", r.axis, r.value.replace(',', ";"), r.seed, v)
}

/// Per-value mean over successful runs: `(value, mean, runs)`.
pub fn ablation_summary(rows: &[AblationRow]) -> Vec<(String, f64, usize)> {
    let mut out: Vec<(String, f64, usize)> = Vec::new();
    for r in rows {
        let Some(m) = r.map else { continue };
        match out.iter_mut().find(|(v, _, _)| *v == r.value) {
            Some(e) => {
                e.1 += m;
                e.2 += 1;
            }
            None => out.push((r.value.clone(), m, 1)),
        }
    }
    for e in &mut out {
        e.1 /= e.2 as f64;
    }
    out
}

/// Runs every `(value, seed)` of the configured grid; a failed run is
/// recorded and the grid continues.
pub fn cmd_ablate(cfg: &RunConfig, out: &Path) -> Result<Vec<AblationRow>> {
    let axis = cfg
        .ablate
        .axis
        .ok_or_else(|| CliError::Config("`ablate.axis`: no axis configured".into()))?;
    let data = load_datasets(&cfg.data_dir, true)?;
    create_dir(out)?;
    write_file(&out.join(CONFIG_FILE), &cfg.to_text())?;
    let p = out.join(ABLATION_FILE);
    let mut table = BufWriter::new(File::create(&p).map_err(|e| CliError::io(&p, e))?);
    writeln!(table, "axis,value,seed,val_map").map_err(|e| CliError::io(&p, e))?;
    let mut rows = Vec::new();
    for value in &cfg.ablate.values {
        for &seed in &cfg.ablate.seeds {
            let run = cfg
                .with(axis.key(), value)
                .and_then(|c| c.with("train.seed", &seed.to_string()));
            let name = format!("{}_{}_s{seed}", axis.name(), value.replace(['+', ' ', '/'], "_"));
            let outcome = run.and_then(|c| with_precision!(c, experiment(&c, &data, Some(&out.join(&name)), true)));
            let row = AblationRow {
                axis: axis.name().to_string(),
                value: value.clone(),
                seed,
                map: outcome.as_ref().ok().map(|o| o.map),
                error: outcome.err().map(|e| e.to_string()),
            };
            if let Some(e) = &row.error {
                eprintln!("run {name} failed: {e}");
            }
            writeln!(table, "{}", ablation_line(&row)).map_err(|e| CliError::io(&p, e))?;
            table.flush().map_err(|e| CliError::io(&p, e))?;
            rows.push(row);
        }
    }
    let mut s = String::from("axis,value,mean_map,runs\n");
    for (v, m, n) in ablation_summary(&rows) {
        s.push_str(&format!("{},{},{m:.6},{n}\n", axis.name(), v.replace(',', ";")));
    }
    write_file(&out.join(ABLATION_SUMMARY_FILE), &s)?;
    Ok(rows)
}
