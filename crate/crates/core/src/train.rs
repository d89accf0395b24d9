//! Contrastive pretraining loop.
//!
//! Every step `s` draws its clips from an epoch shuffle and its crops and
//! augmentations from an RNG stream keyed by `(seed, s)`, so a run resumed
//! from a checkpoint at step `s` continues exactly as an uninterrupted one.

use alloc::format;
use alloc::string::ToString;
use alloc::vec::Vec;

use crate::autodiff::{ParamStore, Tape};
use crate::encoders::ContrastiveModel;
use crate::loss::LossConfig;
use crate::optim::{cosine_lr, Adam, AdamConfig};
use crate::rng::{self, domain};
use crate::synth::Waveform;
use crate::tensor::{Scalar, Tensor};
use crate::views::{assemble_from, views_to_tensor, EpochSampler, ViewBatch, ViewSettings};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr0: f64,
    pub lr_min: f64,
    pub temperature: f64,
    /// Validation loss is computed every this many steps and at the end.
    pub val_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 3000,
            batch: 128,
            lr0: 1e-4,
            lr_min: 1e-6,
            temperature: 0.1,
            val_every: 100,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::config("train.steps", "must be at least 1"));
        }
        if self.batch < 2 {
            return Err(Error::config("train.batch", "must be at least 2"));
        }
        if !(self.lr0 > 0.0) || !self.lr0.is_finite() {
            return Err(Error::config("train.lr", "must be > 0"));
        }
        if !(self.lr_min >= 0.0) || self.lr_min > self.lr0 {
            return Err(Error::config("train.lr_min", "must satisfy 0 <= lr_min <= lr"));
        }
        if self.val_every == 0 {
            return Err(Error::config("train.val_every", "must be at least 1"));
        }
        LossConfig {
            temperature: self.temperature,
        }
        .validate()
    }
}

/// One line of the metrics log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsRow {
    /// 1-based number of the completed step.
    pub step: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

/// Parameters and optimizer state at some step.
#[derive(Clone, Debug)]
pub struct Snapshot<S> {
    pub step: usize,
    pub val_loss: f64,
    pub params: ParamStore<S>,
    pub adam: Adam<S>,
}

/// Everything needed to continue a run.
#[derive(Clone, Debug)]
pub struct TrainState<S> {
    pub model: ContrastiveModel<S>,
    pub adam: Adam<S>,
    /// Completed steps.
    pub step: usize,
    /// Lowest validation loss seen so far.
    pub best: Option<Snapshot<S>>,
}

impl<S: Scalar> TrainState<S> {
    pub fn fresh(model: ContrastiveModel<S>) -> Self {
        let adam = Adam::new(&model.params, AdamConfig::default());
        TrainState {
            model,
            adam,
            step: 0,
            best: None,
        }
    }
}

pub fn batch_tensors<S: Scalar>(batch: &ViewBatch) -> Result<(Tensor<S>, Tensor<S>)> {
    Ok((views_to_tensor(&batch.views_a)?, views_to_tensor(&batch.views_b)?))
}

pub struct Trainer<'a, S> {
    pub config: TrainConfig,
    pub state: TrainState<S>,
    settings: ViewSettings<'a>,
    train: &'a [Waveform],
    sampler: EpochSampler,
    val: Option<(Tensor<S>, Tensor<S>)>,
}

impl<'a, S: Scalar> Trainer<'a, S> {
    /// `val` may be empty, in which case no validation loss is logged and
    /// the final parameters count as best.
    pub fn new(
        config: TrainConfig,
        state: TrainState<S>,
        settings: ViewSettings<'a>,
        train: &'a [Waveform],
        val: &[Waveform],
    ) -> Result<Self> {
        config.validate()?;
        if train.is_empty() {
            return Err(Error::invalid("no training clips"));
        }
        let sampler = EpochSampler::new(train.len(), config.batch, config.seed)?;
        let val = if val.len() >= 2 {
            let m = val.len().min(config.batch);
            let idx: Vec<usize> = (0..m).collect();
            let mut r = rng::stream(config.seed, domain::VALIDATION, 0);
            let b = assemble_from(val, &idx, &settings, &mut r)?;
            Some(batch_tensors(&b)?)
        } else {
            None
        };
        Ok(Trainer {
            config,
            state,
            settings,
            train,
            sampler,
            val,
        })
    }

    pub fn is_done(&self) -> bool {
        self.state.step >= self.config.steps
    }

    /// The batch drawn at 0-based step `s`.
    pub fn batch_at(&self, s: usize) -> Result<ViewBatch> {
        let idx = self.sampler.indices(s);
        let mut r = rng::stream(self.config.seed, domain::TRAIN_STEP, s as u64);
        assemble_from(self.train, &idx, &self.settings, &mut r)
    }

    pub fn val_loss(&self) -> Result<Option<f64>> {
        let Some((xa, xb)) = &self.val else {
            return Ok(None);
        };
        let mut tape = Tape::new();
        let l = self
            .state
            .model
            .loss(&mut tape, xa.clone(), xb.clone(), self.config.temperature)?;
        Ok(Some(tape.value(l).data()[0].as_f64()))
    }

    /// Runs one optimization step and returns its metrics row.
    pub fn step(&mut self) -> Result<MetricsRow> {
        let s = self.state.step;
        let number = s + 1;
        let diverged = |e: Error| match e {
            Error::NonFinite { .. } | Error::ZeroNorm { .. } => Error::Diverged {
                step: number,
                cause: e.to_string(),
            },
            Error::Diverged { cause, .. } => Error::Diverged { step: number, cause },
            other => other,
        };
        let batch = self.batch_at(s)?;
        let (xa, xb) = batch_tensors::<S>(&batch)?;
        drop(batch);
        let lr = cosine_lr(s, self.config.steps, self.config.lr0, self.config.lr_min);
        let train_loss = {
            let model = &mut self.state.model;
            let mut tape = Tape::new();
            let l = model
                .loss(&mut tape, xa, xb, self.config.temperature)
                .map_err(diverged)?;
            let value = tape.value(l).data()[0].as_f64();
            model.params.zero_grad();
            tape.backward(l, &mut model.params)?;
            value
        };
        self.state
            .adam
            .step(&mut self.state.model.params, lr)
            .map_err(diverged)?;
        self.state.step = number;

        let val_loss = if number % self.config.val_every == 0 || number == self.config.steps {
            self.val_loss().map_err(diverged)?
        } else {
            None
        };
        let candidate = val_loss.or(if self.val.is_none() && number == self.config.steps {
            Some(train_loss)
        } else {
            None
        });
        if let Some(v) = candidate {
            if self.state.best.as_ref().map_or(true, |b| v < b.val_loss) {
                self.state.best = Some(Snapshot {
                    step: number,
                    val_loss: v,
                    params: self.state.model.params.clone(),
                    adam: self.state.adam.clone(),
                });
            }
        }
        Ok(MetricsRow {
            step: number,
            lr,
            train_loss,
            val_loss,
        })
    }

    /// Steps until `config.steps`, reporting each row.
    pub fn run(&mut self, mut on_row: impl FnMut(&MetricsRow)) -> Result<()> {
        while !self.is_done() {
            let row = self.step()?;
            on_row(&row);
        }
        Ok(())
    }

    /// Model with the best snapshot's parameters (or the current ones when no
    /// snapshot exists).
    pub fn best_model(&self) -> ContrastiveModel<S> {
        let mut m = self.state.model.clone();
        if let Some(b) = &self.state.best {
            m.params = b.params.clone();
        }
        m
    }
}

/// Formats a metrics row as `step,lr,train_loss,val_loss` with round-trip
/// precision; the validation column is empty when not computed.
pub fn metrics_line(row: &MetricsRow) -> alloc::string::String {
    let val = row.val_loss.map(|v| format!("{v:e}")).unwrap_or_default();
    format!("{},{:e},{:e},{}", row.step, row.lr, row.train_loss, val)
}

pub const METRICS_HEADER: &str = "step,lr,train_loss,val_loss";

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::AugmentPolicy;
    use crate::dsp::{DspConfig, FrontEnd};
    use crate::encoders::{ConvNConfig, ModelConfig, ProjectorConfig, Spec2DConfig};
    use crate::synth::{synth_indexed, SynthSpec};
    use crate::views::FormatSpec;

    fn clips(n: usize) -> Vec<Waveform> {
        let spec = SynthSpec {
            clip_len_s: 1.0,
            event_len_s: (0.2, 0.5),
            ..SynthSpec::default()
        };
        (0..n).map(|i| synth_indexed(&spec, i).unwrap().wave).collect()
    }

    fn tiny() -> ModelConfig {
        ModelConfig {
            formats: FormatSpec::default(),
            conv: ConvNConfig {
                n_stride2_layers: 4,
                channels: 8,
                groups: 4,
            },
            spec2d: Spec2DConfig {
                n_blocks: 2,
                base_channels: 4,
                groups: 4,
                out_channels: Some(8),
            },
            projector: ProjectorConfig {
                hidden_dim: 16,
                out_dim: 8,
            },
        }
    }

    #[test]
    fn config_validation_names_fields() {
        let bad = TrainConfig {
            temperature: -1.0,
            ..TrainConfig::default()
        };
        assert_eq!(
            bad.validate(),
            Err(Error::config("train.temperature", "must be > 0"))
        );
        let bad = TrainConfig {
            lr_min: 1.0,
            ..TrainConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config { field, .. }) if field == "train.lr_min"));
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let data = clips(12);
        let front = FrontEnd::new(DspConfig::default()).unwrap();
        let policy = AugmentPolicy::default();
        let settings = ViewSettings {
            formats: FormatSpec::default(),
            policy: &policy,
            crop_len_s: 0.5,
            front: &front,
        };
        let cfg = TrainConfig {
            steps: 4,
            batch: 4,
            lr0: 1e-3,
            val_every: 2,
            ..TrainConfig::default()
        };
        let model = ContrastiveModel::<f64>::new(tiny(), 3).unwrap();
        let mut full = Trainer::new(cfg, TrainState::fresh(model.clone()), settings.clone(), &data[..8], &data[8..]).unwrap();
        let mut rows = Vec::new();
        full.run(|r| rows.push(*r)).unwrap();
        assert_eq!(rows.len(), 4);
        assert!(rows[1].val_loss.is_some() && rows[0].val_loss.is_none());

        let mut first = Trainer::new(cfg, TrainState::fresh(model), settings.clone(), &data[..8], &data[8..]).unwrap();
        first.step().unwrap();
        first.step().unwrap();
        let state = first.state.clone();
        let mut second = Trainer::new(cfg, state, settings, &data[..8], &data[8..]).unwrap();
        let r3 = second.step().unwrap();
        assert_eq!(r3, rows[2]);
        let r4 = second.step().unwrap();
        assert_eq!(r4, rows[3]);
        assert_eq!(
            second.state.model.params.checksum(),
            full.state.model.params.checksum()
        );
    }

    #[test]
    fn metrics_line_format() {
        let row = MetricsRow {
            step: 3,
            lr: 1e-4,
            train_loss: 2.5,
            val_loss: None,
        };
        assert_eq!(metrics_line(&row), "3,1e-4,2.5e0,");
    }
}
