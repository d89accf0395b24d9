//! Positive-pair creation: two random crops per clip, each routed to its
//! input format and augmented, collected into batches.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::{index, SliceRandom};
use rand::Rng as _;

use crate::augment::{apply_policy, AugmentPolicy};
use crate::dsp::{FrontEnd, Spectral};
use crate::math;
use crate::rng::{self, Rng};
use crate::synth::Waveform;
use crate::tensor::{Scalar, Tensor};
use crate::{Error, Result};

/// Input representation of one branch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Format {
    Waveform,
    Spectrogram,
    LogMel,
    Mfcc,
}

impl Format {
    pub const ALL: [Format; 4] = [
        Format::Waveform,
        Format::Spectrogram,
        Format::LogMel,
        Format::Mfcc,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Format::Waveform => "waveform",
            Format::Spectrogram => "spectrogram",
            Format::LogMel => "logmel",
            Format::Mfcc => "mfcc",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "waveform" | "wave" | "raw" => Ok(Format::Waveform),
            "spectrogram" | "spec" => Ok(Format::Spectrogram),
            "logmel" | "log-mel" | "log_mel" => Ok(Format::LogMel),
            "mfcc" => Ok(Format::Mfcc),
            other => Err(Error::invalid(format!("unknown format `{other}`"))),
        }
    }

    pub fn is_spectral(self) -> bool {
        self != Format::Waveform
    }

    /// Converts a waveform crop into this format.
    pub fn transform(self, samples: &[f64], front: &FrontEnd) -> Result<View> {
        Ok(match self {
            Format::Waveform => View::Wave(samples.to_vec()),
            Format::Spectrogram => View::Spectral(front.power(samples)?),
            Format::LogMel => View::Spectral(front.log_mel(samples)?),
            Format::Mfcc => View::Spectral(front.mfcc(samples)?),
        })
    }
}

/// Formats of the two branches.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct FormatSpec {
    pub branch_a: Format,
    pub branch_b: Format,
}

impl FormatSpec {
    pub fn new(branch_a: Format, branch_b: Format) -> Self {
        FormatSpec { branch_a, branch_b }
    }

    /// Same format on both sides: the branches share one encoder.
    pub fn is_single_format(&self) -> bool {
        self.branch_a == self.branch_b
    }

    /// `a+b` notation used in configs and ablation tables.
    pub fn parse(s: &str) -> Result<Self> {
        let (a, b) = s
            .split_once('+')
            .ok_or_else(|| Error::invalid(format!("formats `{s}` must look like `a+b`")))?;
        Ok(FormatSpec::new(Format::parse(a)?, Format::parse(b)?))
    }

    pub fn label(&self) -> alloc::string::String {
        format!("{}+{}", self.branch_a.name(), self.branch_b.name())
    }
}

impl Default for FormatSpec {
    fn default() -> Self {
        FormatSpec::new(Format::Waveform, Format::LogMel)
    }
}

/// One encoder input: a waveform crop or a time x frequency matrix.
#[derive(Clone, Debug, PartialEq)]
pub enum View {
    Wave(Vec<f64>),
    Spectral(Spectral),
}

impl View {
    pub fn spectral_bins(&self) -> Option<usize> {
        match self {
            View::Spectral(s) => Some(s.bins()),
            View::Wave(_) => None,
        }
    }

    /// `[L]` for waveforms, `[frames, bins]` for spectral views.
    pub fn dims(&self) -> Vec<usize> {
        match self {
            View::Wave(x) => vec![x.len()],
            View::Spectral(s) => vec![s.frames(), s.bins()],
        }
    }

    fn values(&self) -> &[f64] {
        match self {
            View::Wave(x) => x,
            View::Spectral(s) => &s.values.data,
        }
    }
}

/// Stacks same-shaped views into an encoder input: `[N, 1, L]` for
/// waveforms, `[N, 1, T, F]` for spectral views.
pub fn views_to_tensor<S: Scalar>(views: &[View]) -> Result<Tensor<S>> {
    let first = views
        .first()
        .ok_or_else(|| Error::invalid("cannot stack zero views"))?;
    let dims = first.dims();
    let mut data = Vec::with_capacity(views.len() * dims.iter().product::<usize>());
    for (i, v) in views.iter().enumerate() {
        if v.dims() != dims || core::mem::discriminant(v) != core::mem::discriminant(first) {
            return Err(Error::shape(
                "views_to_tensor",
                format!("view {i} has dims {:?}, expected {:?}", v.dims(), dims),
            ));
        }
        data.extend(v.values().iter().map(|&x| S::from_f64_lossy(x)));
    }
    let mut shape = vec![views.len(), 1];
    shape.extend_from_slice(&dims);
    Tensor::new(shape, data)
}

pub fn crop_samples(crop_len_s: f64, sample_rate: u32) -> usize {
    math::round(crop_len_s * sample_rate as f64) as usize
}

/// Two crops of the same clip.
#[derive(Clone, Debug, PartialEq)]
pub struct CropPair {
    pub start_i: usize,
    pub start_j: usize,
    pub crop_i: Vec<f64>,
    pub crop_j: Vec<f64>,
}

/// Uniform start offset of a `crop_len`-sample window in a `len`-sample
/// signal.
pub fn random_offset(len: usize, crop_len: usize, rng: &mut Rng) -> Result<usize> {
    if crop_len == 0 || crop_len > len {
        return Err(Error::invalid(format!(
            "cannot crop {crop_len} samples from a {len}-sample clip"
        )));
    }
    Ok(rng.gen_range(0..=len - crop_len))
}

/// Two independent uniformly placed crops of `crop_len_s` seconds. The crops
/// may overlap.
pub fn random_crop_pair(wave: &Waveform, crop_len_s: f64, rng: &mut Rng) -> Result<CropPair> {
    let n = crop_samples(crop_len_s, wave.sample_rate());
    let start_i = random_offset(wave.len(), n, rng)?;
    let start_j = random_offset(wave.len(), n, rng)?;
    let x = wave.samples();
    let take = |s: usize| x[s..s + n].iter().map(|&v| v as f64).collect::<Vec<_>>();
    Ok(CropPair {
        start_i,
        start_j,
        crop_i: take(start_i),
        crop_j: take(start_j),
    })
}

/// Settings shared by every view of a run.
#[derive(Clone, Debug)]
pub struct ViewSettings<'a> {
    pub formats: FormatSpec,
    pub policy: &'a AugmentPolicy,
    pub crop_len_s: f64,
    pub front: &'a FrontEnd,
}

/// Builds the positive pair for one clip: crop, optional mix with a crop of
/// `partner`, format transform, format-appropriate augmentation.
pub fn make_views(
    clip: &Waveform,
    settings: &ViewSettings<'_>,
    partner: Option<&Waveform>,
    rng: &mut Rng,
) -> Result<(View, View)> {
    let pair = random_crop_pair(clip, settings.crop_len_s, rng)?;
    let n = pair.crop_i.len();
    let partner_crop = |rng: &mut Rng| -> Result<Option<Vec<f64>>> {
        match (settings.policy.mix_enabled, partner) {
            (true, Some(p)) => {
                let s = random_offset(p.len(), n, rng)?;
                Ok(Some(p.samples()[s..s + n].iter().map(|&v| v as f64).collect()))
            }
            (true, None) => Err(Error::invalid("mixing enabled but no partner clip")),
            (false, _) => Ok(None),
        }
    };
    let pa = partner_crop(rng)?;
    let pb = partner_crop(rng)?;
    let a = apply_policy(
        &pair.crop_i,
        settings.formats.branch_a,
        settings.policy,
        pa.as_deref(),
        settings.front,
        rng,
    )?;
    let b = apply_policy(
        &pair.crop_j,
        settings.formats.branch_b,
        settings.policy,
        pb.as_deref(),
        settings.front,
        rng,
    )?;
    Ok((a, b))
}

/// `N` positive pairs. Pair `k` is `(views_a[k], views_b[k])`; every other
/// combination is a negative.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewBatch {
    pub views_a: Vec<View>,
    pub views_b: Vec<View>,
    pub source_ids: Vec<usize>,
    pub pairing: Vec<(usize, usize)>,
}

impl ViewBatch {
    pub fn len(&self) -> usize {
        self.views_a.len()
    }

    pub fn is_empty(&self) -> bool {
        self.views_a.is_empty()
    }
}

/// Builds a batch from the given distinct clip indices. Mixing partners are
/// drawn uniformly from the other clips of the batch.
pub fn assemble_from(
    clips: &[Waveform],
    indices: &[usize],
    settings: &ViewSettings<'_>,
    rng: &mut Rng,
) -> Result<ViewBatch> {
    let n = indices.len();
    if n < 2 {
        return Err(Error::invalid("a batch needs at least two clips"));
    }
    let mut views_a = Vec::with_capacity(n);
    let mut views_b = Vec::with_capacity(n);
    for (k, &idx) in indices.iter().enumerate() {
        let clip = clips
            .get(idx)
            .ok_or_else(|| Error::invalid(format!("clip index {idx} out of range")))?;
        let partner = if settings.policy.mix_enabled {
            let mut p = rng.gen_range(0..n - 1);
            if p >= k {
                p += 1;
            }
            Some(&clips[indices[p]])
        } else {
            None
        };
        let (a, b) = make_views(clip, settings, partner, rng)?;
        views_a.push(a);
        views_b.push(b);
    }
    Ok(ViewBatch {
        views_a,
        views_b,
        source_ids: indices.to_vec(),
        pairing: (0..n).map(|k| (k, k)).collect(),
    })
}

/// Samples `n` distinct clips without replacement and builds their pairs.
pub fn assemble_batch(
    clips: &[Waveform],
    n: usize,
    settings: &ViewSettings<'_>,
    rng: &mut Rng,
) -> Result<ViewBatch> {
    if n < 2 {
        return Err(Error::invalid("batch size must be at least 2"));
    }
    if clips.len() < n {
        return Err(Error::invalid(format!(
            "batch of {n} requested from {} clips",
            clips.len()
        )));
    }
    let indices = index::sample(rng, clips.len(), n).into_vec();
    assemble_from(clips, &indices, settings, rng)
}

/// Epoch-based batch order: the clip list is reshuffled every epoch and cut
/// into full batches; a ragged tail is dropped. Batch `step` is a pure
/// function of `(seed, step)`.
#[derive(Clone, Debug)]
pub struct EpochSampler {
    n_clips: usize,
    batch: usize,
    seed: u64,
}

impl EpochSampler {
    pub fn new(n_clips: usize, batch: usize, seed: u64) -> Result<Self> {
        if batch < 2 || batch > n_clips {
            return Err(Error::config(
                "train.batch",
                format!("batch {batch} needs 2 <= batch <= {n_clips} clips"),
            ));
        }
        Ok(EpochSampler {
            n_clips,
            batch,
            seed,
        })
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.n_clips / self.batch
    }

    pub fn epoch_order(&self, epoch: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.n_clips).collect();
        let mut r = rng::stream(self.seed, rng::domain::EPOCH_ORDER, epoch as u64);
        order.shuffle(&mut r);
        order
    }

    pub fn indices(&self, step: usize) -> Vec<usize> {
        let per = self.batches_per_epoch();
        let pos = step % per;
        self.epoch_order(step / per)[pos * self.batch..(pos + 1) * self.batch].to_vec()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::DspConfig;
    use crate::synth::{synth_indexed, SynthSpec};

    fn ramp(n: usize) -> Waveform {
        Waveform::new((0..n).map(|i| i as f32 / n as f32).collect(), 16_000).unwrap()
    }

    #[test]
    fn full_length_crop_is_whole_clip() {
        let w = ramp(16_000);
        let mut r = rng::stream(0, 0, 0);
        let p = random_crop_pair(&w, 1.0, &mut r).unwrap();
        assert_eq!((p.start_i, p.start_j), (0, 0));
        assert_eq!(p.crop_i, w.to_f64());
        assert!(random_crop_pair(&w, 1.5, &mut r).is_err());
    }

    #[test]
    fn crops_are_contiguous_subsequences() {
        let w = ramp(32_000);
        let src = w.to_f64();
        let mut r = rng::stream(1, 0, 0);
        for _ in 0..50 {
            let p = random_crop_pair(&w, 0.5, &mut r).unwrap();
            assert_eq!(p.crop_i.len(), 8000);
            assert_eq!(p.crop_i[..], src[p.start_i..p.start_i + 8000]);
            assert_eq!(p.crop_j[..], src[p.start_j..p.start_j + 8000]);
        }
    }

    #[test]
    fn view_shapes_for_default_formats() {
        let spec = SynthSpec {
            clip_len_s: 4.0,
            ..SynthSpec::default()
        };
        let clips: Vec<_> = (0..3).map(|i| synth_indexed(&spec, i).unwrap().wave).collect();
        let front = FrontEnd::new(DspConfig::default()).unwrap();
        let policy = AugmentPolicy::default();
        let settings = ViewSettings {
            formats: FormatSpec::default(),
            policy: &policy,
            crop_len_s: 3.0,
            front: &front,
        };
        let mut r = rng::stream(3, 0, 0);
        let (a, b) = make_views(&clips[0], &settings, Some(&clips[1]), &mut r).unwrap();
        assert_eq!(a.dims(), vec![48_000]);
        assert_eq!(b.dims(), vec![299, 80]);
        let mut r2 = rng::stream(3, 0, 0);
        assert_eq!(
            make_views(&clips[0], &settings, Some(&clips[1]), &mut r2).unwrap(),
            (a, b)
        );
    }

    #[test]
    fn batch_of_two_pairs_diagonally() {
        let clips: Vec<_> = (0..5).map(|i| ramp(4000 + i)).collect();
        let front = FrontEnd::new(DspConfig::default()).unwrap();
        let policy = AugmentPolicy::none();
        let settings = ViewSettings {
            formats: FormatSpec::new(Format::Waveform, Format::Waveform),
            policy: &policy,
            crop_len_s: 0.2,
            front: &front,
        };
        let mut r = rng::stream(0, 0, 0);
        let b = assemble_batch(&clips, 2, &settings, &mut r).unwrap();
        assert_eq!(b.pairing, vec![(0, 0), (1, 1)]);
        assert_ne!(b.source_ids[0], b.source_ids[1]);
        assert!(assemble_batch(&clips, 1, &settings, &mut r).is_err());
        assert!(assemble_batch(&clips, 6, &settings, &mut r).is_err());
        let t: Tensor<f32> = views_to_tensor(&b.views_a).unwrap();
        assert_eq!(t.shape(), &[2, 1, 3200]);
    }

    #[test]
    fn epoch_sampler_partitions_and_drops_tail() {
        let s = EpochSampler::new(10, 3, 4).unwrap();
        assert_eq!(s.batches_per_epoch(), 3);
        let mut seen: Vec<usize> = (0..3).flat_map(|k| s.indices(k)).collect();
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen.len(), 9);
        assert_eq!(s.indices(7), s.indices(7));
        assert_ne!(s.epoch_order(0), s.epoch_order(1));
        assert!(EpochSampler::new(3, 4, 0).is_err());
    }

    #[test]
    fn format_parsing() {
        assert_eq!(
            FormatSpec::parse("waveform+logmel").unwrap(),
            FormatSpec::default()
        );
        assert!(FormatSpec::parse("waveform").is_err());
        assert_eq!(FormatSpec::default().label(), "waveform+logmel");
    }
}
