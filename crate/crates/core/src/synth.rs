//! Waveforms, multi-hot labels and the synthetic multi-event audio dataset.
//!
//! The dataset stands in for a large multi-label event corpus: every clip
//! carries one to three short events from a fixed palette of eight classes,
//! placed at random onsets over white background noise.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::seq::index;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::math;
use crate::rng::{self, Rng};
use crate::{Error, Result};

/// Default sample rate in Hz.
pub const SAMPLE_RATE: u32 = 16_000;

/// Size of the event palette.
pub const NUM_CLASSES: usize = 8;

/// Mono PCM audio with samples in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    samples: Vec<f32>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::invalid("sample rate must be positive"));
        }
        if samples.is_empty() {
            return Err(Error::invalid("waveform is empty"));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::invalid(format!("sample {i} is not finite")));
        }
        Ok(Waveform {
            samples,
            sample_rate,
        })
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.samples.iter().map(|&s| s as f64).collect()
    }

    pub fn peak(&self) -> f32 {
        self.samples.iter().fold(0.0f32, |m, s| m.max(s.abs()))
    }
}

/// Multi-hot vector over the event palette.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct LabelVector {
    bits: Vec<bool>,
}

impl LabelVector {
    pub fn empty(classes: usize) -> Self {
        LabelVector {
            bits: vec![false; classes],
        }
    }

    pub fn from_bits(bits: Vec<bool>) -> Self {
        LabelVector { bits }
    }

    /// Parses the compact `0`/`1` string used by manifests.
    pub fn parse(s: &str) -> Result<Self> {
        s.chars()
            .map(|c| match c {
                '0' => Ok(false),
                '1' => Ok(true),
                other => Err(Error::invalid(format!("label character {other:?}"))),
            })
            .collect::<Result<Vec<_>>>()
            .map(LabelVector::from_bits)
    }

    pub fn set(&mut self, class: usize) {
        self.bits[class] = true;
    }

    pub fn get(&self, class: usize) -> bool {
        self.bits[class]
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn cardinality(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Index of the only set bit, for single-label data.
    pub fn single(&self) -> Option<usize> {
        if self.cardinality() == 1 {
            self.bits.iter().position(|&b| b)
        } else {
            None
        }
    }

    pub fn to_bit_string(&self) -> String {
        self.bits.iter().map(|&b| if b { '1' } else { '0' }).collect()
    }
}

/// The fixed event palette.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EventClass {
    LowTone,
    HighTone,
    HarmonicStack,
    ChirpUp,
    ChirpDown,
    AmTone,
    NoiseBurst,
    SquareWave,
}

impl EventClass {
    pub const ALL: [EventClass; NUM_CLASSES] = [
        EventClass::LowTone,
        EventClass::HighTone,
        EventClass::HarmonicStack,
        EventClass::ChirpUp,
        EventClass::ChirpDown,
        EventClass::AmTone,
        EventClass::NoiseBurst,
        EventClass::SquareWave,
    ];

    pub fn from_id(id: usize) -> Result<Self> {
        Self::ALL
            .get(id)
            .copied()
            .ok_or_else(|| Error::invalid(format!("unknown event class {id}")))
    }

    pub fn id(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            EventClass::LowTone => "low_tone",
            EventClass::HighTone => "high_tone",
            EventClass::HarmonicStack => "harmonic_stack",
            EventClass::ChirpUp => "chirp_up",
            EventClass::ChirpDown => "chirp_down",
            EventClass::AmTone => "am_tone",
            EventClass::NoiseBurst => "noise_burst",
            EventClass::SquareWave => "square_wave",
        }
    }
}

/// Parameters of a synthetic dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub n_clips: usize,
    pub clip_len_s: f64,
    pub classes: Vec<EventClass>,
    /// Inclusive range of distinct events per clip.
    pub events_per_clip: (usize, usize),
    /// Uniform range of event durations in seconds.
    pub event_len_s: (f64, f64),
    /// Uniform range of the background-noise SNR in dB.
    pub snr_db: (f64, f64),
    pub sample_rate: u32,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_clips: 2000,
            clip_len_s: 10.0,
            classes: EventClass::ALL.to_vec(),
            events_per_clip: (1, 3),
            event_len_s: (0.5, 2.5),
            snr_db: (10.0, 30.0),
            sample_rate: SAMPLE_RATE,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_clips == 0 {
            return Err(Error::config("synth.n_clips", "must be > 0"));
        }
        if !(self.clip_len_s > 0.0) {
            return Err(Error::config("synth.clip_len_s", "must be > 0"));
        }
        if self.classes.is_empty() {
            return Err(Error::config("synth.classes", "at least one class required"));
        }
        let (lo, hi) = self.events_per_clip;
        if lo < 1 || hi < lo {
            return Err(Error::config(
                "synth.events_per_clip",
                "need 1 <= min <= max",
            ));
        }
        if hi > self.classes.len() {
            return Err(Error::config(
                "synth.events_per_clip",
                "max exceeds the number of distinct classes",
            ));
        }
        let (dlo, dhi) = self.event_len_s;
        if !(dlo > 0.0) || dhi < dlo {
            return Err(Error::config("synth.event_len_s", "need 0 < min <= max"));
        }
        if self.snr_db.1 < self.snr_db.0 {
            return Err(Error::config("synth.snr_db", "need min <= max"));
        }
        if self.sample_rate == 0 {
            return Err(Error::config("synth.sample_rate", "must be > 0"));
        }
        Ok(())
    }

    pub fn clip_samples(&self) -> usize {
        math::round(self.clip_len_s * self.sample_rate as f64) as usize
    }
}

/// Where an event landed inside a clip.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PlacedEvent {
    pub class: EventClass,
    pub onset: usize,
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthClip {
    pub wave: Waveform,
    pub labels: LabelVector,
    pub events: Vec<PlacedEvent>,
}

const EVENT_PEAK: f64 = 0.9;
const CLIP_PEAK: f64 = 0.95;
const FADE_S: f64 = 0.01;

/// Renders one event of `class` lasting `duration_s` seconds.
///
/// The result is deterministic in the RNG state and peaks between 0.45 and
/// 0.9.
pub fn synth_event(
    class: EventClass,
    duration_s: f64,
    sample_rate: u32,
    rng: &mut Rng,
) -> Result<Waveform> {
    let n = render_len(duration_s, sample_rate)?;
    let mut x = render_event(class, n, sample_rate as f64, rng);
    let gain = rng.gen_range(0.5..=1.0) * EVENT_PEAK;
    normalize_peak(&mut x, gain);
    Waveform::new(x.iter().map(|&v| v as f32).collect(), sample_rate)
}

/// [`synth_event`] addressed by palette index.
pub fn synth_event_id(
    class_id: usize,
    duration_s: f64,
    sample_rate: u32,
    rng: &mut Rng,
) -> Result<Waveform> {
    synth_event(EventClass::from_id(class_id)?, duration_s, sample_rate, rng)
}

fn render_len(duration_s: f64, sample_rate: u32) -> Result<usize> {
    if !(duration_s > 0.0) || !duration_s.is_finite() {
        return Err(Error::invalid(format!(
            "event duration must be positive, got {duration_s}"
        )));
    }
    if sample_rate == 0 {
        return Err(Error::invalid("sample rate must be positive"));
    }
    let n = math::round(duration_s * sample_rate as f64) as usize;
    if n == 0 {
        return Err(Error::invalid("event shorter than one sample"));
    }
    Ok(n)
}

fn render_event(class: EventClass, n: usize, sr: f64, rng: &mut Rng) -> Vec<f64> {
    let phase0 = rng.gen_range(0.0..2.0 * PI);
    let dur = n as f64 / sr;
    let mut x = vec![0.0; n];
    match class {
        EventClass::LowTone | EventClass::HighTone => {
            let f = if class == EventClass::LowTone {
                rng.gen_range(200.0..400.0)
            } else {
                rng.gen_range(2000.0..4000.0)
            };
            for (i, v) in x.iter_mut().enumerate() {
                *v = math::sin(2.0 * PI * f * i as f64 / sr + phase0);
            }
        }
        EventClass::HarmonicStack => {
            let f0 = rng.gen_range(150.0..300.0);
            let harmonics = (1..=8).filter(|&h| f0 * h as f64 * 2.0 < sr);
            for h in harmonics {
                let amp = 1.0 / h as f64;
                let ph = rng.gen_range(0.0..2.0 * PI);
                for (i, v) in x.iter_mut().enumerate() {
                    *v += amp * math::sin(2.0 * PI * f0 * h as f64 * i as f64 / sr + ph);
                }
            }
        }
        EventClass::ChirpUp | EventClass::ChirpDown => {
            let low = rng.gen_range(300.0..800.0);
            let high = rng.gen_range(2500.0..5000.0);
            let (f_start, f_end) = if class == EventClass::ChirpUp {
                (low, high)
            } else {
                (high, low)
            };
            let sweep = (f_end - f_start) / dur;
            for (i, v) in x.iter_mut().enumerate() {
                let t = i as f64 / sr;
                *v = math::sin(2.0 * PI * (f_start * t + 0.5 * sweep * t * t) + phase0);
            }
        }
        EventClass::AmTone => {
            let carrier = rng.gen_range(800.0..1600.0);
            let rate = rng.gen_range(4.0..12.0);
            let depth = 0.9;
            for (i, v) in x.iter_mut().enumerate() {
                let t = i as f64 / sr;
                let env = (1.0 + depth * math::sin(2.0 * PI * rate * t)) / (1.0 + depth);
                *v = env * math::sin(2.0 * PI * carrier * t + phase0);
            }
        }
        EventClass::NoiseBurst => {
            for v in x.iter_mut() {
                *v = rng.gen_range(-1.0..1.0);
            }
        }
        EventClass::SquareWave => {
            let f = rng.gen_range(100.0..300.0);
            for (i, v) in x.iter_mut().enumerate() {
                let s = math::sin(2.0 * PI * f * i as f64 / sr + phase0);
                *v = if s >= 0.0 { 1.0 } else { -1.0 };
            }
        }
    }
    apply_fades(&mut x, sr);
    x
}

fn apply_fades(x: &mut [f64], sr: f64) {
    let n = x.len();
    let fade = ((FADE_S * sr) as usize).min(n / 10);
    for i in 0..fade {
        let g = 0.5 - 0.5 * math::cos(PI * i as f64 / fade as f64);
        x[i] *= g;
        x[n - 1 - i] *= g;
    }
}

fn normalize_peak(x: &mut [f64], target: f64) {
    let peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        let g = target / peak;
        x.iter_mut().for_each(|v| *v *= g);
    }
}

/// Synthesizes one labeled clip.
///
/// Events are distinct classes drawn from `spec.classes`; label bit `k` is
/// set iff an event of class `k` was placed. The mix is peak-normalized to
/// 0.95.
pub fn synth_clip(spec: &SynthSpec, rng: &mut Rng) -> Result<SynthClip> {
    spec.validate()?;
    let n = spec.clip_samples();
    let sr = spec.sample_rate as f64;
    let (lo, hi) = spec.events_per_clip;
    let k = rng.gen_range(lo..=hi);
    let picks = index::sample(rng, spec.classes.len(), k);

    let mut mix = vec![0.0f64; n];
    let mut labels = LabelVector::empty(NUM_CLASSES);
    let mut events = Vec::with_capacity(k);
    for pick in picks.iter() {
        let class = spec.classes[pick];
        let dur = rng.gen_range(spec.event_len_s.0..=spec.event_len_s.1);
        let len = (math::round(dur * sr) as usize).clamp(1, n);
        let mut ev = render_event(class, len, sr, rng);
        normalize_peak(&mut ev, rng.gen_range(0.5..=1.0) * EVENT_PEAK);
        let onset = rng.gen_range(0..=n - len);
        for (dst, src) in mix[onset..onset + len].iter_mut().zip(&ev) {
            *dst += src;
        }
        labels.set(class.id());
        events.push(PlacedEvent { class, onset, len });
    }

    let power = mix.iter().map(|v| v * v).sum::<f64>() / n as f64;
    let snr = rng.gen_range(spec.snr_db.0..=spec.snr_db.1);
    let noise_std = math::sqrt(power / math::powf(10.0, snr / 10.0));
    for v in mix.iter_mut() {
        let z: f64 = StandardNormal.sample(rng);
        *v += noise_std * z;
    }
    normalize_peak(&mut mix, CLIP_PEAK);

    let wave = Waveform::new(mix.iter().map(|&v| v as f32).collect(), spec.sample_rate)?;
    Ok(SynthClip {
        wave,
        labels,
        events,
    })
}

/// Clip `index` of the dataset described by `spec`; independent of every
/// other clip.
pub fn synth_indexed(spec: &SynthSpec, index: usize) -> Result<SynthClip> {
    let mut rng = rng::stream(spec.seed, rng::domain::SYNTH_CLIP, index as u64);
    synth_clip(spec, &mut rng)
}

/// The whole dataset, a pure function of `spec` (including its seed).
pub fn synth_dataset(spec: &SynthSpec) -> Result<Vec<SynthClip>> {
    spec.validate()?;
    (0..spec.n_clips).map(|i| synth_indexed(spec, i)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dominant_frequency(x: &[f32], sr: f64) -> f64 {
        // naive DFT over a 4096-sample window, 1 Hz-ish resolution is not
        // needed; bin spacing sr/4096 ~ 3.9 Hz
        let n = 4096.min(x.len());
        let mut best = (0usize, 0.0f64);
        for k in 1..n / 2 {
            let (mut re, mut im) = (0.0, 0.0);
            for (i, &v) in x[..n].iter().enumerate() {
                let a = -2.0 * PI * (k * i) as f64 / n as f64;
                re += v as f64 * math::cos(a);
                im += v as f64 * math::sin(a);
            }
            let p = re * re + im * im;
            if p > best.1 {
                best = (k, p);
            }
        }
        best.0 as f64 * sr / n as f64
    }

    #[test]
    fn low_tone_has_dominant_bin_in_band() {
        let mut rng = rng::stream(0, 0, 0);
        let w = synth_event(EventClass::LowTone, 1.0, 16_000, &mut rng).unwrap();
        assert_eq!(w.len(), 16_000);
        let f = dominant_frequency(w.samples(), 16_000.0);
        assert!((200.0..=400.0).contains(&f), "dominant {f}");
        assert!(w.peak() <= 0.9 + 1e-6);
    }

    #[test]
    fn zero_duration_and_unknown_class_rejected() {
        let mut rng = rng::stream(0, 0, 0);
        assert!(synth_event(EventClass::LowTone, 0.0, 16_000, &mut rng).is_err());
        assert!(synth_event_id(8, 1.0, 16_000, &mut rng).is_err());
    }

    #[test]
    fn single_event_clip_sets_exactly_that_bit() {
        let spec = SynthSpec {
            classes: vec![EventClass::ChirpDown],
            events_per_clip: (1, 1),
            clip_len_s: 2.0,
            ..SynthSpec::default()
        };
        let clip = synth_indexed(&spec, 3).unwrap();
        assert_eq!(clip.labels.cardinality(), 1);
        assert!(clip.labels.get(EventClass::ChirpDown.id()));
        assert_eq!(clip.labels.single(), Some(4));
    }

    #[test]
    fn clips_are_deterministic_and_bounded() {
        let spec = SynthSpec {
            clip_len_s: 2.0,
            ..SynthSpec::default()
        };
        let a = synth_indexed(&spec, 11).unwrap();
        let b = synth_indexed(&spec, 11).unwrap();
        assert_eq!(a, b);
        assert!(a.wave.peak() <= 0.95 + 1e-6);
        for ev in &a.events {
            assert!(a.labels.get(ev.class.id()));
            assert!(ev.onset + ev.len <= a.wave.len());
        }
        assert_eq!(a.labels.cardinality(), a.events.len());
    }

    #[test]
    fn label_string_round_trip() {
        let l = LabelVector::parse("01001000").unwrap();
        assert_eq!(l.to_bit_string(), "01001000");
        assert!(LabelVector::parse("01x").is_err());
    }

    #[test]
    fn spec_validation() {
        let bad = SynthSpec {
            events_per_clip: (0, 2),
            ..SynthSpec::default()
        };
        assert!(bad.validate().is_err());
        let bad = SynthSpec {
            n_clips: 0,
            ..SynthSpec::default()
        };
        assert!(bad.validate().is_err());
    }
}
