//! Waveform and spectrogram augmentations: audio mixing, time masking,
//! frequency masking and truncated frequency shift.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng as _;
use rand_distr::{Beta, Distribution};

use crate::dsp::{FrontEnd, Spectral};
use crate::math;
use crate::rng::Rng;
use crate::views::{Format, View};
use crate::{Error, Result};

/// Which augmentations to apply and their ranges.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentPolicy {
    pub mix_enabled: bool,
    /// Beta distribution `(a, b)` of the mixing weight.
    pub mix_beta: (f64, f64),
    /// Maximum masked fraction of the time axis; `None` disables.
    pub time_mask: Option<f64>,
    /// Maximum number of masked frequency bins; `None` disables.
    pub freq_mask: Option<usize>,
    /// Maximum absolute frequency shift in bins; `0` disables.
    pub freq_shift_max: usize,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        AugmentPolicy {
            mix_enabled: true,
            mix_beta: (5.0, 2.0),
            time_mask: None,
            freq_mask: None,
            freq_shift_max: 40,
        }
    }
}

impl AugmentPolicy {
    /// Every augmentation off.
    pub fn none() -> Self {
        AugmentPolicy {
            mix_enabled: false,
            mix_beta: (5.0, 2.0),
            time_mask: None,
            freq_mask: None,
            freq_shift_max: 0,
        }
    }

    /// Checks ranges against the number of bins of the spectral views.
    pub fn validate(&self, n_bins: usize) -> Result<()> {
        let (a, b) = self.mix_beta;
        if !(a > 0.0 && b > 0.0) {
            return Err(Error::config("augment.mix_beta", "both parameters must be > 0"));
        }
        if let Some(t) = self.time_mask {
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::config("augment.time_mask", "must lie in [0, 1]"));
            }
        }
        if let Some(f) = self.freq_mask {
            if f > n_bins {
                return Err(Error::config(
                    "augment.freq_mask",
                    format!("{f} exceeds {n_bins} bins"),
                ));
            }
        }
        if self.freq_shift_max > n_bins {
            return Err(Error::config(
                "augment.freq_shift_max",
                format!("{} exceeds {n_bins} bins", self.freq_shift_max),
            ));
        }
        Ok(())
    }
}

/// Mixing weight drawn from Beta(5, 2).
pub fn sample_alpha(rng: &mut Rng) -> f64 {
    sample_alpha_with((5.0, 2.0), rng)
}

pub fn sample_alpha_with((a, b): (f64, f64), rng: &mut Rng) -> f64 {
    Beta::new(a, b).expect("beta parameters validated").sample(rng)
}

/// `alpha * x1 + (1 - alpha) * x2`.
pub fn mix(x1: &[f64], x2: &[f64], alpha: f64) -> Result<Vec<f64>> {
    if x1.len() != x2.len() {
        return Err(Error::shape(
            "mix",
            format!("lengths {} and {}", x1.len(), x2.len()),
        ));
    }
    Ok(x1
        .iter()
        .zip(x2)
        .map(|(a, b)| alpha * a + (1.0 - alpha) * b)
        .collect())
}

fn time_len(view: &View) -> usize {
    match view {
        View::Wave(x) => x.len(),
        View::Spectral(s) => s.frames(),
    }
}

/// Sets time steps `[t0, t0 + t)` (samples or frames) to zero energy.
pub fn time_mask(view: &View, t: usize, t0: usize) -> Result<View> {
    let len = time_len(view);
    if t0 + t > len {
        return Err(Error::invalid(format!(
            "time mask [{t0}, {}) exceeds length {len}",
            t0 + t
        )));
    }
    let mut out = view.clone();
    match &mut out {
        View::Wave(x) => x[t0..t0 + t].iter_mut().for_each(|v| *v = 0.0),
        View::Spectral(s) => {
            let fill = s.fill();
            for r in t0..t0 + t {
                s.values.row_mut(r).iter_mut().for_each(|v| *v = fill);
            }
        }
    }
    Ok(out)
}

fn spectral<'a>(view: &'a View, op: &str) -> Result<&'a Spectral> {
    match view {
        View::Spectral(s) => Ok(s),
        View::Wave(_) => Err(Error::invalid(format!(
            "{op} needs a spectral view; waveforms have no frequency axis"
        ))),
    }
}

/// Sets bins `[f0, f0 + f)` of every frame to zero energy.
pub fn freq_mask(view: &View, f: usize, f0: usize) -> Result<View> {
    let s = spectral(view, "frequency masking")?;
    if f0 + f > s.bins() {
        return Err(Error::invalid(format!(
            "frequency mask [{f0}, {}) exceeds {} bins",
            f0 + f,
            s.bins()
        )));
    }
    let mut out = s.clone();
    let fill = out.fill();
    for r in 0..out.frames() {
        out.values.row_mut(r)[f0..f0 + f]
            .iter_mut()
            .for_each(|v| *v = fill);
    }
    Ok(View::Spectral(out))
}

/// Moves every frame `shift` bins up (negative: down). Bins shifted in from
/// outside the axis take the zero-energy fill.
pub fn freq_shift(view: &View, shift: isize) -> Result<View> {
    let s = spectral(view, "frequency shift")?;
    let bins = s.bins() as isize;
    let mut out = s.clone();
    let fill = out.fill();
    for r in 0..out.frames() {
        let src = s.values.row(r);
        for (b, dst) in out.values.row_mut(r).iter_mut().enumerate() {
            let from = b as isize - shift;
            *dst = if (0..bins).contains(&from) {
                src[from as usize]
            } else {
                fill
            };
        }
    }
    Ok(View::Spectral(out))
}

/// Turns one waveform crop into an augmented view of `format`.
///
/// Mixing happens on the waveform before any transform. Spectral views then
/// get shift, frequency mask and time mask, in that order; waveform views
/// only get the time mask. Each stochastic parameter is drawn from `rng`
/// only when its augmentation is enabled.
pub fn apply_policy(
    crop: &[f64],
    format: Format,
    policy: &AugmentPolicy,
    partner: Option<&[f64]>,
    front: &FrontEnd,
    rng: &mut Rng,
) -> Result<View> {
    let mixed;
    let signal = if policy.mix_enabled {
        let partner =
            partner.ok_or_else(|| Error::invalid("mixing enabled but no partner crop given"))?;
        let alpha = sample_alpha_with(policy.mix_beta, rng);
        mixed = mix(crop, partner, alpha)?;
        &mixed[..]
    } else {
        crop
    };

    let mut view = format.transform(signal, front)?;

    if let Some(bins) = view.spectral_bins() {
        if policy.freq_shift_max > 0 {
            let f = policy.freq_shift_max as isize;
            let shift = rng.gen_range(-f..=f);
            view = freq_shift(&view, shift)?;
        }
        if let Some(f_max) = policy.freq_mask {
            let f = rng.gen_range(0..=f_max.min(bins));
            let f0 = rng.gen_range(0..=bins - f);
            view = freq_mask(&view, f, f0)?;
        }
    }
    if let Some(t_max) = policy.time_mask {
        let len = time_len(&view);
        let t = rng.gen_range(0..=math::floor(t_max * len as f64) as usize);
        let t0 = rng.gen_range(0..=len - t);
        view = time_mask(&view, t, t0)?;
    }
    Ok(view)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::{DspConfig, Matrix, SpectralKind};
    use crate::rng;
    use alloc::vec;

    fn logmel(rows: usize, cols: usize, data: Vec<f64>) -> View {
        View::Spectral(Spectral {
            kind: SpectralKind::LogMel,
            values: Matrix { rows, cols, data },
            log_floor: math::ln(1e-6),
        })
    }

    #[test]
    fn beta_moments() {
        let mut r = rng::stream(1, 0, 0);
        let n = 1_000_000;
        let (mut s, mut s2) = (0.0, 0.0);
        for _ in 0..n {
            let a = sample_alpha(&mut r);
            assert!(a > 0.0 && a < 1.0);
            s += a;
            s2 += a * a;
        }
        let mean = s / n as f64;
        let var = s2 / n as f64 - mean * mean;
        assert!((mean - 5.0 / 7.0).abs() < 1e-3, "mean {mean}");
        assert!((var - 10.0 / 392.0).abs() < 1e-3, "var {var}");
    }

    #[test]
    fn mix_cases() {
        assert_eq!(mix(&[1.0, 0.0], &[0.0, 1.0], 0.5).unwrap(), vec![0.5, 0.5]);
        assert_eq!(mix(&[0.3, -0.2], &[0.9, 0.9], 1.0).unwrap(), vec![0.3, -0.2]);
        assert!(mix(&[1.0], &[1.0, 2.0], 0.5).is_err());
    }

    #[test]
    fn mixing_expectation_follows_beta_mean() {
        let mut r = rng::stream(2, 0, 0);
        let (x1, x2) = ([1.0, -0.5], [0.25, 1.0]);
        let n = 200_000;
        let mut acc = [0.0; 2];
        for _ in 0..n {
            let m = mix(&x1, &x2, sample_alpha(&mut r)).unwrap();
            acc[0] += m[0];
            acc[1] += m[1];
        }
        for i in 0..2 {
            let expect = 5.0 / 7.0 * x1[i] + 2.0 / 7.0 * x2[i];
            assert!((acc[i] / n as f64 - expect).abs() < 2e-3);
        }
    }

    #[test]
    fn time_mask_on_waveform() {
        let v = View::Wave(vec![1.0; 4]);
        assert_eq!(time_mask(&v, 2, 1).unwrap(), View::Wave(vec![1.0, 0.0, 0.0, 1.0]));
        assert_eq!(time_mask(&v, 0, 3).unwrap(), v);
        assert!(time_mask(&v, 3, 2).is_err());
    }

    #[test]
    fn masks_use_log_floor_for_log_mel() {
        let v = logmel(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let fl = math::ln(1e-6);
        let m = freq_mask(&v, 1, 1).unwrap();
        assert_eq!(m, logmel(2, 3, vec![1.0, fl, 3.0, 4.0, fl, 6.0]));
        let t = time_mask(&v, 1, 0).unwrap();
        assert_eq!(t, logmel(2, 3, vec![fl, fl, fl, 4.0, 5.0, 6.0]));
        let full = freq_mask(&v, 3, 0).unwrap();
        assert_eq!(full, logmel(2, 3, vec![fl; 6]));
        assert!(freq_mask(&View::Wave(vec![0.0; 3]), 1, 0).is_err());
        assert!(freq_shift(&View::Wave(vec![0.0; 3]), 1).is_err());
    }

    #[test]
    fn shift_moves_energy_up() {
        let v = logmel(1, 5, vec![1.0, 2.0, 3.0, 4.0, 5.0]);
        let fl = math::ln(1e-6);
        assert_eq!(
            freq_shift(&v, 2).unwrap(),
            logmel(1, 5, vec![fl, fl, 1.0, 2.0, 3.0])
        );
        assert_eq!(
            freq_shift(&v, -1).unwrap(),
            logmel(1, 5, vec![2.0, 3.0, 4.0, 5.0, fl])
        );
        assert_eq!(freq_shift(&v, 0).unwrap(), v);
    }

    #[test]
    fn all_off_policy_is_plain_transform() {
        let front = FrontEnd::new(DspConfig::default()).unwrap();
        let crop: Vec<f64> = (0..4000).map(|i| math::sin(i as f64 * 0.1)).collect();
        let mut r = rng::stream(0, 0, 0);
        let v = apply_policy(&crop, Format::LogMel, &AugmentPolicy::none(), None, &front, &mut r)
            .unwrap();
        assert_eq!(v, View::Spectral(front.log_mel(&crop).unwrap()));
        let w = apply_policy(&crop, Format::Waveform, &AugmentPolicy::none(), None, &front, &mut r)
            .unwrap();
        assert_eq!(w, View::Wave(crop));
    }

    #[test]
    fn mixing_only_policy_equals_mix() {
        let front = FrontEnd::new(DspConfig::default()).unwrap();
        let a: Vec<f64> = (0..1000).map(|i| math::sin(i as f64 * 0.01)).collect();
        let b: Vec<f64> = (0..1000).map(|i| math::cos(i as f64 * 0.03)).collect();
        let policy = AugmentPolicy {
            mix_enabled: true,
            ..AugmentPolicy::none()
        };
        let mut r1 = rng::stream(5, 0, 0);
        let mut r2 = rng::stream(5, 0, 0);
        let v = apply_policy(&a, Format::Waveform, &policy, Some(&b), &front, &mut r1).unwrap();
        let expect = mix(&a, &b, sample_alpha(&mut r2)).unwrap();
        assert_eq!(v, View::Wave(expect));
        assert!(apply_policy(&a, Format::Waveform, &policy, None, &front, &mut r1).is_err());
    }

    #[test]
    fn full_policy_is_deterministic_and_shape_preserving() {
        let front = FrontEnd::new(DspConfig::default()).unwrap();
        let a: Vec<f64> = (0..8000).map(|i| math::sin(i as f64 * 0.07) * 0.5).collect();
        let b: Vec<f64> = (0..8000).map(|i| math::sin(i as f64 * 0.011) * 0.5).collect();
        let policy = AugmentPolicy {
            time_mask: Some(0.2),
            freq_mask: Some(10),
            ..AugmentPolicy::default()
        };
        let run = || {
            let mut r = rng::stream(9, 0, 0);
            apply_policy(&a, Format::LogMel, &policy, Some(&b), &front, &mut r).unwrap()
        };
        let v1 = run();
        assert_eq!(v1, run());
        match v1 {
            View::Spectral(s) => {
                assert_eq!((s.frames(), s.bins()), (49, 80));
                assert!(s.values.data.iter().all(|v| v.is_finite()));
            }
            View::Wave(_) => panic!("expected spectral view"),
        }
    }

    #[test]
    fn policy_validation() {
        let p = AugmentPolicy {
            freq_shift_max: 81,
            ..AugmentPolicy::default()
        };
        assert!(p.validate(80).is_err());
        assert!(AugmentPolicy::default().validate(80).is_ok());
        let p = AugmentPolicy {
            time_mask: Some(1.5),
            ..AugmentPolicy::default()
        };
        assert!(p.validate(80).is_err());
    }
}
