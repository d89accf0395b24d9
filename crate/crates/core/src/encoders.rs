//! Branch encoders and the shared projection head.
//!
//! Waveform branches use a strided 1-D conv stack ("ConvN", named after its
//! total downsampling factor `5 * 2^n`). Spectral branches use a small 2-D
//! conv net. Both end in global average pooling; the resulting feature
//! vectors go through one projector shared by the two branches.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand_distr::{Distribution, Uniform};

use crate::autodiff::{conv_out_len, Padding, ParamId, ParamStore, Tape, Var};
use crate::math;
use crate::rng::{self, Rng};
use crate::tensor::{Scalar, Tensor};
use crate::views::{Format, FormatSpec};
use crate::{Error, Result};

const GN_EPS: f64 = 1e-5;

/// Desk-scale guard on encoder size.
pub const MAX_ENCODER_PARAMS: usize = 2_000_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvNConfig {
    /// Number of kernel-4 stride-2 layers after the kernel-10 stride-5 one.
    pub n_stride2_layers: usize,
    pub channels: usize,
    pub groups: usize,
}

impl Default for ConvNConfig {
    fn default() -> Self {
        ConvNConfig {
            n_stride2_layers: 6,
            channels: 64,
            groups: 16,
        }
    }
}

impl ConvNConfig {
    pub fn validate(&self) -> Result<()> {
        if !(1..=9).contains(&self.n_stride2_layers) {
            return Err(Error::config("model.conv_depth", "must be between 1 and 9"));
        }
        if self.channels == 0 {
            return Err(Error::config("model.conv_channels", "must be positive"));
        }
        if self.groups == 0 || self.channels % self.groups != 0 {
            return Err(Error::config(
                "model.conv_groups",
                format!("{} channels are not divisible into {} groups", self.channels, self.groups),
            ));
        }
        Ok(())
    }

    pub fn downsample_factor(&self) -> usize {
        5 << self.n_stride2_layers
    }

    /// `(kernel, stride)` of every layer.
    pub fn layers(&self) -> Vec<(usize, usize)> {
        let mut l = vec![(10, 5)];
        l.extend(core::iter::repeat((4, 2)).take(self.n_stride2_layers));
        l
    }

    /// Temporal length before pooling, or `None` if the input is too short.
    pub fn output_frames(&self, len: usize) -> Option<usize> {
        self.layers()
            .into_iter()
            .try_fold(len, |l, (k, s)| conv_out_len(l, k, s))
    }

    /// Shortest input that yields one output frame.
    pub fn receptive_field(&self) -> usize {
        self.layers()
            .into_iter()
            .rev()
            .fold(1, |l, (k, s)| (l - 1) * s + k)
    }

    pub fn feature_dim(&self) -> usize {
        self.channels
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Spec2DConfig {
    pub n_blocks: usize,
    /// Channels of the first block; doubled by every following block.
    pub base_channels: usize,
    pub groups: usize,
    /// Optional final 1x1 convolution to this many channels, used to match
    /// the other branch's feature size.
    pub out_channels: Option<usize>,
}

impl Default for Spec2DConfig {
    fn default() -> Self {
        Spec2DConfig {
            n_blocks: 3,
            base_channels: 16,
            groups: 16,
            out_channels: None,
        }
    }
}

impl Spec2DConfig {
    pub fn block_channels(&self, block: usize) -> usize {
        self.base_channels << block
    }

    pub fn feature_dim(&self) -> usize {
        self.out_channels
            .unwrap_or_else(|| self.block_channels(self.n_blocks.saturating_sub(1)))
    }

    /// GroupNorm groups for a layer with `channels` channels.
    fn groups_for(&self, channels: usize) -> usize {
        self.groups.min(channels)
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=6).contains(&self.n_blocks) {
            return Err(Error::config("model.spec_blocks", "must be between 1 and 6"));
        }
        if self.base_channels == 0 {
            return Err(Error::config("model.spec_channels", "must be positive"));
        }
        if self.groups == 0 {
            return Err(Error::config("model.spec_groups", "must be positive"));
        }
        if self.out_channels == Some(0) {
            return Err(Error::config("model.spec_out_channels", "must be positive"));
        }
        for c in (0..self.n_blocks).map(|b| self.block_channels(b)) {
            if c % self.groups_for(c) != 0 {
                return Err(Error::config(
                    "model.spec_groups",
                    format!("{c} channels are not divisible into {} groups", self.groups_for(c)),
                ));
            }
        }
        Ok(())
    }

    /// `(frames, bins)` after the pooling stages, if every stage fits.
    pub fn output_grid(&self, frames: usize, bins: usize) -> Option<(usize, usize)> {
        (0..self.n_blocks).try_fold((frames, bins), |(t, f), _| {
            (t >= 2 && f >= 2).then_some((t / 2, f / 2))
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ProjectorConfig {
    pub hidden_dim: usize,
    pub out_dim: usize,
}

impl Default for ProjectorConfig {
    fn default() -> Self {
        ProjectorConfig {
            hidden_dim: 512,
            out_dim: 512,
        }
    }
}

impl ProjectorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 {
            return Err(Error::config("model.proj_hidden", "must be positive"));
        }
        if self.out_dim == 0 {
            return Err(Error::config("model.latent_size", "must be positive"));
        }
        Ok(())
    }
}

/// Architecture of a two-branch model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct ModelConfig {
    pub formats: FormatSpec,
    pub conv: ConvNConfig,
    pub spec2d: Spec2DConfig,
    pub projector: ProjectorConfig,
}

impl ModelConfig {
    pub fn encoder_kind(&self, format: Format) -> EncoderKind {
        if format.is_spectral() {
            EncoderKind::Spec2D(self.spec2d)
        } else {
            EncoderKind::ConvN(self.conv)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fa = self.formats.branch_a;
        let fb = self.formats.branch_b;
        for f in [fa, fb] {
            match self.encoder_kind(f) {
                EncoderKind::ConvN(c) => c.validate()?,
                EncoderKind::Spec2D(c) => c.validate()?,
            }
        }
        self.projector.validate()?;
        let (da, db) = (self.encoder_kind(fa).feature_dim(), self.encoder_kind(fb).feature_dim());
        if da != db {
            return Err(Error::config(
                "model.spec_out_channels",
                format!(
                    "branch feature sizes differ ({da} for {} vs {db} for {}); the shared projector needs equal sizes, set a matching 1x1 output layer",
                    fa.name(),
                    fb.name()
                ),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EncoderKind {
    ConvN(ConvNConfig),
    Spec2D(Spec2DConfig),
}

impl EncoderKind {
    pub fn feature_dim(&self) -> usize {
        match self {
            EncoderKind::ConvN(c) => c.feature_dim(),
            EncoderKind::Spec2D(c) => c.feature_dim(),
        }
    }

    /// Rank of the expected input tensor.
    pub fn input_rank(&self) -> usize {
        match self {
            EncoderKind::ConvN(_) => 3,
            EncoderKind::Spec2D(_) => 4,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct ConvLayer {
    weight: ParamId,
    bias: ParamId,
    gamma: ParamId,
    beta: ParamId,
    stride: usize,
    groups: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    kind: EncoderKind,
    prefix: String,
    layers: Vec<ConvLayer>,
    /// `(weight, bias)` of the optional 1x1 output conv.
    out_proj: Option<(ParamId, ParamId)>,
}

fn kaiming_uniform<S: Scalar>(shape: &[usize], fan_in: usize, rng: &mut Rng) -> Tensor<S> {
    let bound = math::sqrt(6.0 / fan_in as f64);
    let dist = Uniform::new_inclusive(-bound, bound);
    let n = shape.iter().product();
    let data = (0..n).map(|_| S::from_f64_lossy(dist.sample(rng))).collect();
    Tensor::new(shape.to_vec(), data).expect("shape and data agree")
}

fn add_conv<S: Scalar>(
    store: &mut ParamStore<S>,
    prefix: &str,
    shape: &[usize],
    rng: &mut Rng,
) -> Result<(ParamId, ParamId)> {
    let fan_in = shape[1..].iter().product();
    let w = store.add(&format!("{prefix}/weight"), kaiming_uniform(shape, fan_in, rng))?;
    let b = store.add(&format!("{prefix}/bias"), Tensor::zeros(&shape[..1]))?;
    Ok((w, b))
}

fn add_norm<S: Scalar>(store: &mut ParamStore<S>, prefix: &str, channels: usize) -> Result<(ParamId, ParamId)> {
    let g = store.add(&format!("{prefix}/gn_gamma"), Tensor::full(&[channels], S::one()))?;
    let b = store.add(&format!("{prefix}/gn_beta"), Tensor::zeros(&[channels]))?;
    Ok((g, b))
}

impl Encoder {
    /// Registers the encoder's parameters under `prefix/...`.
    pub fn build<S: Scalar>(
        kind: EncoderKind,
        prefix: &str,
        store: &mut ParamStore<S>,
        rng: &mut Rng,
    ) -> Result<Self> {
        let mut layers = Vec::new();
        let mut out_proj = None;
        match kind {
            EncoderKind::ConvN(cfg) => {
                cfg.validate()?;
                let mut c_in = 1;
                for (i, (k, s)) in cfg.layers().into_iter().enumerate() {
                    let name = format!("{prefix}/layer{i}");
                    let (weight, bias) = add_conv(store, &name, &[cfg.channels, c_in, k], rng)?;
                    let (gamma, beta) = add_norm(store, &name, cfg.channels)?;
                    layers.push(ConvLayer {
                        weight,
                        bias,
                        gamma,
                        beta,
                        stride: s,
                        groups: cfg.groups,
                    });
                    c_in = cfg.channels;
                }
            }
            EncoderKind::Spec2D(cfg) => {
                cfg.validate()?;
                let mut c_in = 1;
                for blk in 0..cfg.n_blocks {
                    let c = cfg.block_channels(blk);
                    for j in 0..2 {
                        let name = format!("{prefix}/block{blk}/conv{j}");
                        let (weight, bias) = add_conv(store, &name, &[c, c_in, 3, 3], rng)?;
                        let (gamma, beta) = add_norm(store, &name, c)?;
                        layers.push(ConvLayer {
                            weight,
                            bias,
                            gamma,
                            beta,
                            stride: 1,
                            groups: cfg.groups_for(c),
                        });
                        c_in = c;
                    }
                }
                if let Some(c) = cfg.out_channels {
                    out_proj = Some(add_conv(store, &format!("{prefix}/out"), &[c, c_in, 1, 1], rng)?);
                }
            }
        }
        let enc = Encoder {
            kind,
            prefix: prefix.into(),
            layers,
            out_proj,
        };
        let n = enc.num_params(store);
        if n > MAX_ENCODER_PARAMS {
            return Err(Error::config(
                "model",
                format!("encoder `{prefix}` has {n} parameters, above the {MAX_ENCODER_PARAMS} limit"),
            ));
        }
        Ok(enc)
    }

    pub fn kind(&self) -> EncoderKind {
        self.kind
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn feature_dim(&self) -> usize {
        self.kind.feature_dim()
    }

    pub fn num_params<S: Scalar>(&self, store: &ParamStore<S>) -> usize {
        store.numel_with_prefix(&format!("{}/", self.prefix))
    }

    /// `[B, feature_dim]` features of a `[B, 1, L]` waveform batch or a
    /// `[B, 1, T, F]` spectral batch.
    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, store: &ParamStore<S>, x: Var) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        if shape.len() != self.kind.input_rank() || shape[1] != 1 {
            let want = match self.kind {
                EncoderKind::ConvN(_) => "a waveform batch [B, 1, L]",
                EncoderKind::Spec2D(_) => "a spectral batch [B, 1, T, F]",
            };
            return Err(Error::invalid(format!(
                "encoder `{}` expects {want}, got shape {shape:?}",
                self.prefix
            )));
        }
        match self.kind {
            EncoderKind::ConvN(cfg) => {
                if cfg.output_frames(shape[2]).is_none() {
                    return Err(Error::invalid(format!(
                        "input of {} samples is shorter than the receptive field of {}",
                        shape[2],
                        cfg.receptive_field()
                    )));
                }
                let mut h = x;
                for l in &self.layers {
                    let (w, b) = (tape.param(store, l.weight), tape.param(store, l.bias));
                    h = tape.conv1d(h, w, b, l.stride)?;
                    h = self.norm_relu(tape, store, h, l)?;
                }
                tape.global_avg_pool(h, &[2])
            }
            EncoderKind::Spec2D(cfg) => {
                if cfg.output_grid(shape[2], shape[3]).is_none() {
                    return Err(Error::invalid(format!(
                        "spectral input {}x{} is smaller than the pooling factor {}",
                        shape[2],
                        shape[3],
                        1usize << cfg.n_blocks
                    )));
                }
                let mut h = x;
                for (i, l) in self.layers.iter().enumerate() {
                    let (w, b) = (tape.param(store, l.weight), tape.param(store, l.bias));
                    h = tape.conv2d(h, w, b, 1, Padding::Same)?;
                    h = self.norm_relu(tape, store, h, l)?;
                    if i % 2 == 1 {
                        h = tape.avg_pool2d(h)?;
                    }
                }
                if let Some((w, b)) = self.out_proj {
                    let (w, b) = (tape.param(store, w), tape.param(store, b));
                    h = tape.conv2d(h, w, b, 1, Padding::Valid)?;
                }
                tape.global_avg_pool(h, &[2, 3])
            }
        }
    }

    fn norm_relu<S: Scalar>(&self, tape: &mut Tape<S>, store: &ParamStore<S>, h: Var, l: &ConvLayer) -> Result<Var> {
        let (g, b) = (tape.param(store, l.gamma), tape.param(store, l.beta));
        let h = tape.group_norm(h, g, b, l.groups, GN_EPS)?;
        tape.relu(h)
    }
}

/// Linear -> ReLU -> linear. No normalization; cosine similarity is taken in
/// the loss.
#[derive(Clone, Debug, PartialEq)]
pub struct Projector {
    in_dim: usize,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

impl Projector {
    pub fn build<S: Scalar>(
        in_dim: usize,
        cfg: ProjectorConfig,
        prefix: &str,
        store: &mut ParamStore<S>,
        rng: &mut Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let w1 = store.add(
            &format!("{prefix}/hidden/weight"),
            kaiming_uniform(&[cfg.hidden_dim, in_dim], in_dim, rng),
        )?;
        let b1 = store.add(&format!("{prefix}/hidden/bias"), Tensor::zeros(&[cfg.hidden_dim]))?;
        let w2 = store.add(
            &format!("{prefix}/out/weight"),
            kaiming_uniform(&[cfg.out_dim, cfg.hidden_dim], cfg.hidden_dim, rng),
        )?;
        let b2 = store.add(&format!("{prefix}/out/bias"), Tensor::zeros(&[cfg.out_dim]))?;
        Ok(Projector { in_dim, w1, b1, w2, b2 })
    }

    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, store: &ParamStore<S>, z: Var) -> Result<Var> {
        let s = tape.shape(z);
        if s.len() != 2 || s[1] != self.in_dim {
            return Err(Error::shape(
                "project",
                format!("features {s:?}, projector expects width {}", self.in_dim),
            ));
        }
        let (w1, b1) = (tape.param(store, self.w1), tape.param(store, self.b1));
        let h = tape.linear(z, w1, b1)?;
        let h = tape.relu(h)?;
        let (w2, b2) = (tape.param(store, self.w2), tape.param(store, self.b2));
        tape.linear(h, w2, b2)
    }
}

/// Which trained branches feed the probe.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalInputs {
    BranchA,
    BranchB,
    Both,
}

impl EvalInputs {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "a" | "branch_a" => Ok(EvalInputs::BranchA),
            "b" | "branch_b" => Ok(EvalInputs::BranchB),
            "both" | "a+b" => Ok(EvalInputs::Both),
            other => Err(Error::config(
                "eval.inputs",
                format!("`{other}` is not one of a, b, both"),
            )),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            EvalInputs::BranchA => "a",
            EvalInputs::BranchB => "b",
            EvalInputs::Both => "both",
        }
    }
}

/// Encoders of both branches plus the shared projector, with all parameters
/// in one store. Parameter names: `encoder_a/...`, `encoder_b/...`,
/// `projector/...`. When both branches use the same format they share
/// `encoder_a`.
#[derive(Clone, Debug)]
pub struct ContrastiveModel<S> {
    pub config: ModelConfig,
    pub params: ParamStore<S>,
    encoder_a: Encoder,
    encoder_b: Option<Encoder>,
    projector: Projector,
}

impl<S: Scalar> ContrastiveModel<S> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut r = rng::stream(seed, rng::domain::INIT, 0);
        let fmt = config.formats;
        let encoder_a = Encoder::build(config.encoder_kind(fmt.branch_a), "encoder_a", &mut store, &mut r)?;
        let encoder_b = if fmt.is_single_format() {
            None
        } else {
            Some(Encoder::build(
                config.encoder_kind(fmt.branch_b),
                "encoder_b",
                &mut store,
                &mut r,
            )?)
        };
        let projector = Projector::build(
            encoder_a.feature_dim(),
            config.projector,
            "projector",
            &mut store,
            &mut r,
        )?;
        Ok(ContrastiveModel {
            config,
            params: store,
            encoder_a,
            encoder_b,
            projector,
        })
    }

    pub fn encoder_a(&self) -> &Encoder {
        &self.encoder_a
    }

    pub fn encoder_b(&self) -> &Encoder {
        self.encoder_b.as_ref().unwrap_or(&self.encoder_a)
    }

    pub fn shares_encoder(&self) -> bool {
        self.encoder_b.is_none()
    }

    /// Default probe inputs: both branches when they differ, otherwise the
    /// single shared encoder.
    pub fn default_eval_inputs(&self) -> EvalInputs {
        if self.shares_encoder() {
            EvalInputs::BranchA
        } else {
            EvalInputs::Both
        }
    }

    pub fn eval_feature_dim(&self, inputs: EvalInputs) -> usize {
        match inputs {
            EvalInputs::BranchA => self.encoder_a.feature_dim(),
            EvalInputs::BranchB => self.encoder_b().feature_dim(),
            EvalInputs::Both => self.encoder_a.feature_dim() + self.encoder_b().feature_dim(),
        }
    }

    /// Projected latents `[2N, out_dim]`: rows `0..N` from branch A, rows
    /// `N..2N` from branch B.
    pub fn latents(&self, tape: &mut Tape<S>, xa: Var, xb: Var) -> Result<Var> {
        let za = self.encoder_a.forward(tape, &self.params, xa)?;
        let zb = self.encoder_b().forward(tape, &self.params, xb)?;
        let z = tape.concat_rows(za, zb)?;
        self.projector.forward(tape, &self.params, z)
    }

    /// Mean NT-Xent of a batch of positive pairs.
    pub fn loss(&self, tape: &mut Tape<S>, xa: Tensor<S>, xb: Tensor<S>, temperature: f64) -> Result<Var> {
        let n = xa.shape().first().copied().unwrap_or(0);
        if xb.shape().first() != Some(&n) {
            return Err(Error::shape(
                "loss",
                format!("branch batches {:?} and {:?}", xa.shape(), xb.shape()),
            ));
        }
        let (xa, xb) = (tape.input(xa), tape.input(xb));
        let h = self.latents(tape, xa, xb)?;
        tape.nt_xent(h, &crate::loss::halves_pairing(n), temperature)
    }

    pub fn projector(&self) -> &Projector {
        &self.projector
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn conv320_frame_arithmetic() {
        let c = ConvNConfig::default();
        assert_eq!(c.downsample_factor(), 320);
        assert_eq!(c.output_frames(48_000), Some(148));
        let rf = c.receptive_field();
        assert_eq!(c.output_frames(rf), Some(1));
        assert_eq!(c.output_frames(rf - 1), None);
    }

    #[test]
    fn spec2d_grid_arithmetic() {
        assert_eq!(Spec2DConfig::default().output_grid(299, 80), Some((37, 10)));
        assert_eq!(Spec2DConfig::default().output_grid(7, 80), None);
        assert_eq!(Spec2DConfig::default().feature_dim(), 64);
    }

    #[test]
    fn default_model_dims_match_and_mismatch_is_rejected() {
        assert!(ModelConfig::default().validate().is_ok());
        let bad = ModelConfig {
            spec2d: Spec2DConfig {
                base_channels: 32,
                ..Spec2DConfig::default()
            },
            ..ModelConfig::default()
        };
        let err = bad.validate().unwrap_err();
        assert!(matches!(err, Error::Config { .. }));
        assert!(alloc::format!("{err}").contains("shared projector"));
        let fixed = ModelConfig {
            spec2d: Spec2DConfig {
                base_channels: 32,
                out_channels: Some(64),
                ..Spec2DConfig::default()
            },
            ..ModelConfig::default()
        };
        assert!(fixed.validate().is_ok());
    }

    #[test]
    fn waveform_into_spectral_encoder_is_rejected() {
        let m = ContrastiveModel::<f32>::new(ModelConfig::default(), 0).unwrap();
        let mut tape = Tape::new();
        let x = tape.input(Tensor::zeros(&[2, 1, 4000]));
        assert!(m.encoder_b().forward(&mut tape, &m.params, x).is_err());
    }

    #[test]
    fn parameter_names_and_sharing() {
        let m = ContrastiveModel::<f32>::new(ModelConfig::default(), 0).unwrap();
        assert!(m.params.by_name("encoder_a/layer0/weight").is_some());
        assert!(m.params.by_name("encoder_b/block2/conv1/gn_gamma").is_some());
        assert!(m.params.by_name("projector/out/bias").is_some());
        let shared = ModelConfig {
            formats: FormatSpec::new(Format::Waveform, Format::Waveform),
            ..ModelConfig::default()
        };
        let m2 = ContrastiveModel::<f32>::new(shared, 0).unwrap();
        assert!(m2.shares_encoder());
        assert!(m2.params.iter().all(|p| !p.name.starts_with("encoder_b")));
        assert!(m.encoder_a().num_params(&m.params) < MAX_ENCODER_PARAMS);
        assert!(m.encoder_b().num_params(&m.params) < MAX_ENCODER_PARAMS);
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let a = ContrastiveModel::<f64>::new(ModelConfig::default(), 7).unwrap();
        let b = ContrastiveModel::<f64>::new(ModelConfig::default(), 7).unwrap();
        let c = ContrastiveModel::<f64>::new(ModelConfig::default(), 8).unwrap();
        assert_eq!(a.params.checksum(), b.params.checksum());
        assert_ne!(a.params.checksum(), c.params.checksum());
        let w = a.params.by_name("encoder_a/layer1/weight").unwrap();
        let bound = math::sqrt(6.0 / 256.0);
        assert!(w.value.data().iter().all(|v| v.abs() <= bound));
        let bias = a.params.by_name("encoder_a/layer1/bias").unwrap();
        assert!(bias.value.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_projector_gives_zero_latent() {
        let mut store = ParamStore::<f64>::new();
        let mut r = rng::stream(0, 0, 0);
        let p = Projector::build(4, ProjectorConfig { hidden_dim: 3, out_dim: 2 }, "p", &mut store, &mut r).unwrap();
        for prm in store.iter_mut() {
            prm.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let mut tape = Tape::new();
        let z = tape.input(Tensor::full(&[5, 4], 1.0));
        let y = p.forward(&mut tape, &store, z).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
        let bad = tape.input(Tensor::full(&[5, 3], 1.0));
        assert!(p.forward(&mut tape, &store, bad).is_err());
    }

    #[test]
    fn waveform_features_have_channel_width() {
        let cfg = ModelConfig {
            conv: ConvNConfig {
                n_stride2_layers: 5,
                channels: 8,
                groups: 4,
            },
            formats: FormatSpec::new(Format::Waveform, Format::Waveform),
            ..ModelConfig::default()
        };
        let m = ContrastiveModel::<f32>::new(cfg, 1).unwrap();
        let x: Vec<f32> = (0..2 * 4000).map(|i| math::sin(i as f64 * 0.01) as f32).collect();
        let mut tape = Tape::new();
        let xv = tape.input(Tensor::new(vec![2, 1, 4000], x).unwrap());
        let f = m.encoder_a().forward(&mut tape, &m.params, xv).unwrap();
        assert_eq!(tape.shape(f), &[2, 8]);
        assert!(tape.value(f).all_finite());
    }

    #[test]
    fn constant_spectral_input_feature_vs_length() {
        let cfg = Spec2DConfig {
            n_blocks: 2,
            base_channels: 4,
            groups: 2,
            out_channels: None,
        };
        let mut store = ParamStore::<f64>::new();
        let mut r = rng::stream(0, 0, 0);
        let e = Encoder::build(EncoderKind::Spec2D(cfg), "e", &mut store, &mut r).unwrap();
        let run = |t: usize| {
            let mut tape = Tape::new();
            let x = tape.input(Tensor::full(&[1, 1, t, 8], 0.5));
            let f = e.forward(&mut tape, &store, x).unwrap();
            tape.value(f).data().to_vec()
        };
        // Zero padding makes the border rows differ from the interior, so
        // the pooled feature only converges as the interior dominates.
        let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        let (f16, f64_, f256, f1024) = (run(16), run(64), run(256), run(1024));
        assert!(f16.iter().chain(&f1024).all(|v| v.is_finite()));
        assert!(dist(&f256, &f1024) < 0.25 * dist(&f16, &f64_));
        assert!(dist(&f256, &f1024) < 0.02);
    }
}
