//! Frozen-encoder evaluation: feature extraction, an MLP probe, and
//! clip-level prediction by averaging logits over overlapping subclips.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;

use crate::autodiff::{ParamStore, Tape};
use crate::dsp::FrontEnd;
use crate::encoders::{ContrastiveModel, EvalInputs, ProjectorConfig, Projector};
use crate::metrics::{self, MapReport};
use crate::optim::{Adam, AdamConfig};
use crate::rng::{self, domain};
use crate::synth::{LabelVector, Waveform};
use crate::tensor::{Scalar, Tensor};
use crate::views::{crop_samples, random_offset, views_to_tensor, Format, View};
use crate::{Error, Result};

/// Window starts at `0, crop/2, crop, ...` while the window fits, plus one
/// window flush with the end if the last regular window stops short.
pub fn subclip_starts(len: usize, crop: usize) -> Result<Vec<usize>> {
    if crop == 0 || crop > len {
        return Err(Error::invalid(format!(
            "clip of {len} samples is shorter than the {crop}-sample crop"
        )));
    }
    let hop = (crop / 2).max(1);
    let mut starts: Vec<usize> = (0..).map(|k| k * hop).take_while(|s| s + crop <= len).collect();
    let last = *starts.last().unwrap();
    if last + crop < len {
        starts.push(len - crop);
    }
    Ok(starts)
}

/// Computes frozen features of waveform crops from one or both branches.
pub struct FeatureExtractor<'a, S> {
    model: &'a ContrastiveModel<S>,
    front: &'a FrontEnd,
    inputs: EvalInputs,
    chunk: usize,
}

impl<'a, S: Scalar> FeatureExtractor<'a, S> {
    pub fn new(model: &'a ContrastiveModel<S>, front: &'a FrontEnd, inputs: EvalInputs) -> Self {
        FeatureExtractor {
            model,
            front,
            inputs,
            chunk: 32,
        }
    }

    pub fn dim(&self) -> usize {
        self.model.eval_feature_dim(self.inputs)
    }

    fn branch(&self, format: Format, encoder: &crate::encoders::Encoder, crops: &[&[f64]]) -> Result<Vec<Vec<f64>>> {
        let views = crops
            .iter()
            .map(|c| format.transform(c, self.front))
            .collect::<Result<Vec<View>>>()?;
        let x: Tensor<S> = views_to_tensor(&views)?;
        let mut tape = Tape::new();
        let xv = tape.input(x);
        let f = encoder.forward(&mut tape, &self.model.params, xv)?;
        let d = encoder.feature_dim();
        Ok(tape.value(f).to_f64().chunks(d).map(|r| r.to_vec()).collect())
    }

    /// Row-major `[crops.len(), dim]` features.
    pub fn features(&self, crops: &[&[f64]]) -> Result<Vec<f64>> {
        let fmt = self.model.config.formats;
        let mut out = Vec::with_capacity(crops.len() * self.dim());
        for chunk in crops.chunks(self.chunk) {
            let a = match self.inputs {
                EvalInputs::BranchA | EvalInputs::Both => {
                    Some(self.branch(fmt.branch_a, self.model.encoder_a(), chunk)?)
                }
                EvalInputs::BranchB => None,
            };
            let b = match self.inputs {
                EvalInputs::BranchB | EvalInputs::Both => {
                    Some(self.branch(fmt.branch_b, self.model.encoder_b(), chunk)?)
                }
                EvalInputs::BranchA => None,
            };
            for i in 0..chunk.len() {
                if let Some(a) = &a {
                    out.extend_from_slice(&a[i]);
                }
                if let Some(b) = &b {
                    out.extend_from_slice(&b[i]);
                }
            }
        }
        Ok(out)
    }

    /// Features of every subclip of `clip`, `[n_subclips, dim]`.
    pub fn subclip_features(&self, clip: &Waveform, crop_len_s: f64) -> Result<Vec<f64>> {
        let crop = crop_samples(crop_len_s, clip.sample_rate());
        let x = clip.to_f64();
        let starts = subclip_starts(x.len(), crop)?;
        let crops: Vec<&[f64]> = starts.iter().map(|&s| &x[s..s + crop]).collect();
        self.features(&crops)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LabelMode {
    /// Sigmoid outputs with binary cross-entropy.
    MultiLabel,
    /// Softmax outputs with cross-entropy; every clip has exactly one class.
    SingleLabel,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbeConfig {
    pub hidden: usize,
    pub lr: f64,
    pub steps: usize,
    pub batch: usize,
    /// Random crops per training clip whose features form the training set.
    pub crops_per_clip: usize,
    pub mode: LabelMode,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            hidden: 512,
            lr: 1e-3,
            steps: 2000,
            batch: 256,
            crops_per_clip: 4,
            mode: LabelMode::MultiLabel,
            seed: 0,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 {
            return Err(Error::config("eval.probe_hidden", "must be positive"));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::config("eval.probe_lr", "must be > 0"));
        }
        if self.steps == 0 {
            return Err(Error::config("eval.probe_steps", "must be positive"));
        }
        if self.batch == 0 {
            return Err(Error::config("eval.probe_batch", "must be positive"));
        }
        if self.crops_per_clip == 0 {
            return Err(Error::config("eval.probe_crops", "must be positive"));
        }
        Ok(())
    }
}

/// Probe training set: feature rows with per-row targets.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeData {
    pub features: Vec<f64>,
    pub dim: usize,
    pub labels: Vec<LabelVector>,
}

impl ProbeData {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }
}

/// Features of `crops_per_clip` random crops of every clip, each labelled
/// with its clip's labels.
pub fn crop_training_set<S: Scalar>(
    extractor: &FeatureExtractor<'_, S>,
    clips: &[Waveform],
    labels: &[LabelVector],
    crop_len_s: f64,
    cfg: &ProbeConfig,
) -> Result<ProbeData> {
    if clips.len() != labels.len() {
        return Err(Error::invalid("clips and labels differ in count"));
    }
    let mut features = Vec::with_capacity(clips.len() * cfg.crops_per_clip * extractor.dim());
    let mut row_labels = Vec::with_capacity(clips.len() * cfg.crops_per_clip);
    let mut pending: Vec<Vec<f64>> = Vec::new();
    let flush = |pending: &mut Vec<Vec<f64>>, features: &mut Vec<f64>| -> Result<()> {
        let refs: Vec<&[f64]> = pending.iter().map(|c| c.as_slice()).collect();
        features.extend(extractor.features(&refs)?);
        pending.clear();
        Ok(())
    };
    for (i, (clip, lab)) in clips.iter().zip(labels).enumerate() {
        let n = crop_samples(crop_len_s, clip.sample_rate());
        let x = clip.samples();
        let mut r = rng::stream(cfg.seed, domain::PROBE_CROPS, i as u64);
        for _ in 0..cfg.crops_per_clip {
            let s = random_offset(x.len(), n, &mut r)?;
            pending.push(x[s..s + n].iter().map(|&v| v as f64).collect());
            row_labels.push(lab.clone());
        }
        if pending.len() >= 64 {
            flush(&mut pending, &mut features)?;
        }
    }
    if !pending.is_empty() {
        flush(&mut pending, &mut features)?;
    }
    Ok(ProbeData {
        features,
        dim: extractor.dim(),
        labels: row_labels,
    })
}

/// One-hidden-layer MLP on standardized features.
#[derive(Clone, Debug)]
pub struct Probe {
    pub config: ProbeConfig,
    pub classes: usize,
    pub params: ParamStore<f64>,
    mlp: Projector,
    mean: Vec<f64>,
    inv_std: Vec<f64>,
}

impl Probe {
    /// Reassembles a probe from saved parameters and standardization
    /// statistics. Every parameter of the architecture must be present in
    /// `params` with its expected shape.
    pub fn from_parts(
        config: ProbeConfig,
        classes: usize,
        params: &ParamStore<f64>,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
    ) -> Result<Probe> {
        if mean.len() != inv_std.len() || mean.is_empty() {
            return Err(Error::invalid("probe standardization vectors differ in length"));
        }
        let mut store = ParamStore::new();
        let mut r = rng::stream(0, domain::PROBE_TRAIN, 0);
        let pc = ProjectorConfig {
            hidden_dim: config.hidden,
            out_dim: classes,
        };
        let mlp = Projector::build(mean.len(), pc, "probe", &mut store, &mut r)?;
        for p in store.iter_mut() {
            let src = params
                .by_name(&p.name)
                .ok_or_else(|| Error::invalid(format!("missing probe parameter `{}`", p.name)))?;
            if src.value.shape() != p.value.shape() {
                return Err(Error::shape(
                    "probe",
                    format!(
                        "`{}` has shape {:?}, expected {:?}",
                        p.name,
                        src.value.shape(),
                        p.value.shape()
                    ),
                ));
            }
            p.value = src.value.clone();
        }
        Ok(Probe {
            config,
            classes,
            params: store,
            mlp,
            mean,
            inv_std,
        })
    }

    /// Per-feature mean and inverse standard deviation used to standardize
    /// inputs.
    pub fn standardization(&self) -> (&[f64], &[f64]) {
        (&self.mean, &self.inv_std)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Logits `[n, classes]` of row-major features `[n, dim]`.
    pub fn logits(&self, features: &[f64]) -> Result<Vec<f64>> {
        let d = self.dim();
        if features.len() % d != 0 {
            return Err(Error::shape("probe", format!("{} values are not rows of {d}", features.len())));
        }
        let x = self.standardize(features);
        let mut tape = Tape::new();
        let xv = tape.input(Tensor::new(vec![features.len() / d, d], x)?);
        let y = self.mlp.forward(&mut tape, &self.params, xv)?;
        Ok(tape.value(y).data().to_vec())
    }

    fn standardize(&self, features: &[f64]) -> Vec<f64> {
        let d = self.dim();
        features
            .iter()
            .enumerate()
            .map(|(i, &v)| (v - self.mean[i % d]) * self.inv_std[i % d])
            .collect()
    }

    /// Mean of the subclip logits of `clip`.
    pub fn predict_clip<S: Scalar>(
        &self,
        extractor: &FeatureExtractor<'_, S>,
        clip: &Waveform,
        crop_len_s: f64,
    ) -> Result<Vec<f64>> {
        let f = extractor.subclip_features(clip, crop_len_s)?;
        Ok(mean_rows(&self.logits(&f)?, self.classes))
    }
}

/// Column means of a row-major `[n, cols]` matrix.
pub fn mean_rows(values: &[f64], cols: usize) -> Vec<f64> {
    let n = values.len() / cols;
    let mut out = vec![0.0; cols];
    for row in values.chunks(cols) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    out.iter_mut().for_each(|v| *v /= n as f64);
    out
}

/// Trains a probe with Adam on mini-batches drawn from `data`.
pub fn train_probe(data: &ProbeData, classes: usize, cfg: &ProbeConfig) -> Result<Probe> {
    cfg.validate()?;
    if data.is_empty() || data.dim == 0 {
        return Err(Error::invalid("empty probe training set"));
    }
    if data.labels.iter().any(|l| l.len() != classes) {
        return Err(Error::invalid(format!("label vectors must have {classes} entries")));
    }
    let single: Vec<usize> = match cfg.mode {
        LabelMode::SingleLabel => data
            .labels
            .iter()
            .map(|l| {
                l.single()
                    .ok_or_else(|| Error::invalid("single-label mode needs exactly one class per clip"))
            })
            .collect::<Result<_>>()?,
        LabelMode::MultiLabel => Vec::new(),
    };
    let present = (0..classes)
        .filter(|&c| data.labels.iter().any(|l| l.get(c)))
        .count();
    if present < 2 {
        return Err(Error::invalid(
            "probe training set is degenerate: fewer than two classes present",
        ));
    }

    let d = data.dim;
    let n = data.len();
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for (m, v) in mean.iter_mut().zip(data.row(i)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0.0; d];
    for i in 0..n {
        for ((s, v), m) in var.iter_mut().zip(data.row(i)).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    let inv_std = var
        .iter()
        .map(|&s| {
            let sd = crate::math::sqrt(s / n as f64);
            if sd > 1e-8 { 1.0 / sd } else { 1.0 }
        })
        .collect();

    let mut params = ParamStore::new();
    let mut r = rng::stream(cfg.seed, domain::PROBE_TRAIN, 0);
    let mlp = Projector::build(
        d,
        ProjectorConfig {
            hidden_dim: cfg.hidden,
            out_dim: classes,
        },
        "probe",
        &mut params,
        &mut r,
    )?;
    let mut probe = Probe {
        config: *cfg,
        classes,
        params,
        mlp,
        mean,
        inv_std,
    };
    let x_all = probe.standardize(&data.features);
    let mut adam = Adam::new(&probe.params, AdamConfig::default());
    let batch = cfg.batch.min(n);
    let mut order: Vec<usize> = (0..n).collect();
    let mut pos = n;
    for _ in 0..cfg.steps {
        if pos + batch > n {
            order.shuffle(&mut r);
            pos = 0;
        }
        let idx = &order[pos..pos + batch];
        pos += batch;
        let mut xb = Vec::with_capacity(batch * d);
        for &i in idx {
            xb.extend_from_slice(&x_all[i * d..(i + 1) * d]);
        }
        let mut tape = Tape::new();
        let xv = tape.input(Tensor::new(vec![batch, d], xb)?);
        let logits = probe.mlp.forward(&mut tape, &probe.params, xv)?;
        let loss = match cfg.mode {
            LabelMode::MultiLabel => {
                let t: Vec<f64> = idx
                    .iter()
                    .flat_map(|&i| data.labels[i].bits().iter().map(|&b| if b { 1.0 } else { 0.0 }))
                    .collect();
                tape.bce_with_logits(logits, &t)?
            }
            LabelMode::SingleLabel => {
                let t: Vec<usize> = idx.iter().map(|&i| single[i]).collect();
                tape.softmax_cross_entropy(logits, &t)?
            }
        };
        probe.params.zero_grad();
        tape.backward(loss, &mut probe.params)?;
        adam.step(&mut probe.params, cfg.lr)?;
    }
    Ok(probe)
}

/// Clip-level scores and metrics of a probe on labelled clips.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalResult {
    pub scores: Vec<f64>,
    pub report: MapReport,
    /// Only in single-label mode.
    pub accuracy: Option<f64>,
}

pub fn evaluate<S: Scalar>(
    probe: &Probe,
    extractor: &FeatureExtractor<'_, S>,
    clips: &[Waveform],
    labels: &[LabelVector],
    crop_len_s: f64,
) -> Result<EvalResult> {
    if clips.len() != labels.len() || clips.is_empty() {
        return Err(Error::invalid("evaluation needs matching, non-empty clips and labels"));
    }
    let c = probe.classes;
    let mut scores = Vec::with_capacity(clips.len() * c);
    for clip in clips {
        scores.extend(probe.predict_clip(extractor, clip, crop_len_s)?);
    }
    let flat: Vec<bool> = labels.iter().flat_map(|l| l.bits().iter().copied()).collect();
    let report = metrics::mean_average_precision(&scores, &flat, c)?;
    let accuracy = match probe.config.mode {
        LabelMode::SingleLabel => {
            let t = labels
                .iter()
                .map(|l| l.single().ok_or_else(|| Error::invalid("single-label clip without exactly one class")))
                .collect::<Result<Vec<_>>>()?;
            Some(metrics::accuracy(&scores, &t, c)?)
        }
        LabelMode::MultiLabel => None,
    };
    Ok(EvalResult {
        scores,
        report,
        accuracy,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::DspConfig;
    use crate::encoders::{ConvNConfig, ModelConfig, Spec2DConfig};
    use crate::views::FormatSpec;
    use rand::Rng as _;

    #[test]
    fn subclip_grid() {
        let s = subclip_starts(160_000, 48_000).unwrap();
        assert_eq!(s, vec![0, 24_000, 48_000, 72_000, 96_000, 112_000]);
        assert_eq!(subclip_starts(48_000, 48_000).unwrap(), vec![0]);
        assert_eq!(subclip_starts(96_000, 48_000).unwrap(), vec![0, 24_000, 48_000]);
        assert!(subclip_starts(100, 200).is_err());
    }

    #[test]
    fn subclips_always_cover_the_end() {
        for len in 50..200 {
            for crop in 1..=len {
                let s = subclip_starts(len, crop).unwrap();
                assert_eq!(s.last().unwrap() + crop, len);
                assert!(s.windows(2).all(|w| w[0] < w[1]));
            }
        }
    }

    fn separable(n: usize, seed: u64) -> ProbeData {
        let mut r = rng::stream(seed, 0, 0);
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let c = i % 2;
            let centre = if c == 0 { -2.0 } else { 2.0 };
            features.push(centre + r.gen_range(-1.0..1.0));
            features.push(r.gen_range(-1.0..1.0));
            let mut l = LabelVector::empty(2);
            l.set(c);
            labels.push(l);
        }
        ProbeData {
            features,
            dim: 2,
            labels,
        }
    }

    #[test]
    fn separable_data_is_learned() {
        let data = separable(200, 3);
        for mode in [LabelMode::SingleLabel, LabelMode::MultiLabel] {
            let cfg = ProbeConfig {
                steps: 200,
                batch: 64,
                mode,
                ..ProbeConfig::default()
            };
            let probe = train_probe(&data, 2, &cfg).unwrap();
            let logits = probe.logits(&data.features).unwrap();
            let targets: Vec<usize> = data.labels.iter().map(|l| l.single().unwrap()).collect();
            assert_eq!(metrics::accuracy(&logits, &targets, 2).unwrap(), 1.0);
        }
    }

    #[test]
    fn probe_training_is_deterministic() {
        let data = separable(50, 4);
        let cfg = ProbeConfig {
            steps: 20,
            ..ProbeConfig::default()
        };
        let a = train_probe(&data, 2, &cfg).unwrap();
        let b = train_probe(&data, 2, &cfg).unwrap();
        assert_eq!(a.params.checksum(), b.params.checksum());
    }

    #[test]
    fn single_class_training_set_rejected() {
        let mut data = separable(10, 1);
        for l in &mut data.labels {
            *l = LabelVector::from_bits(vec![true, false]);
        }
        let cfg = ProbeConfig {
            steps: 5,
            mode: LabelMode::SingleLabel,
            ..ProbeConfig::default()
        };
        assert!(train_probe(&data, 2, &cfg).is_err());
    }

    fn tiny_model() -> ContrastiveModel<f64> {
        let cfg = ModelConfig {
            formats: FormatSpec::default(),
            conv: ConvNConfig {
                n_stride2_layers: 3,
                channels: 4,
                groups: 2,
            },
            spec2d: Spec2DConfig {
                n_blocks: 2,
                base_channels: 2,
                groups: 2,
                out_channels: Some(4),
            },
            projector: ProjectorConfig {
                hidden_dim: 8,
                out_dim: 4,
            },
        };
        ContrastiveModel::new(cfg, 5).unwrap()
    }

    #[test]
    fn tiled_clip_logits_equal_single_subclip() {
        let model = tiny_model();
        let front = FrontEnd::new(DspConfig::default()).unwrap();
        let ex = FeatureExtractor::new(&model, &front, EvalInputs::Both);
        assert_eq!(ex.dim(), 8);
        // period of 400 samples divides every subclip offset (multiples of 4000)
        let tile: Vec<f32> = (0..400).map(|i| crate::math::sin(i as f64 * 0.0314159 * 2.0) as f32 * 0.5).collect();
        let samples: Vec<f32> = tile.iter().copied().cycle().take(24_000).collect();
        let clip = Waveform::new(samples, 16_000).unwrap();
        let data = ProbeData {
            features: vec![0.0, 1.0, 0.5, 0.2, 0.1, 0.3, 0.7, 0.9, 1.0, 0.0, 0.4, 0.6, 0.8, 0.2, 0.5, 0.1],
            dim: 8,
            labels: vec![LabelVector::from_bits(vec![true, false]), LabelVector::from_bits(vec![false, true])],
        };
        let probe = train_probe(&data, 2, &ProbeConfig { steps: 3, ..ProbeConfig::default() }).unwrap();
        let clip_logits = probe.predict_clip(&ex, &clip, 0.5).unwrap();
        let x = clip.to_f64();
        let single = probe.logits(&ex.features(&[&x[..8000]]).unwrap()).unwrap();
        for (a, b) in clip_logits.iter().zip(&single) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
        let before = model.params.checksum();
        let _ = evaluate(&probe, &ex, &[clip], &[LabelVector::from_bits(vec![true, false])], 0.5).unwrap();
        assert_eq!(model.params.checksum(), before);
    }
}
