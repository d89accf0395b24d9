//! Spectral front end: framing, power STFT, mel filterbank, log-mel and MFCC.
//!
//! Conventions: periodic Hann window, no centering or padding of the signal,
//! power (not magnitude) spectra, natural log with an additive floor, HTK mel
//! scale with area-normalized triangles, orthonormal DCT-II keeping `c0`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use crate::math;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Window {
    Hann,
    /// All-ones window. Used by the Parseval check.
    Rectangular,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DspConfig {
    pub sample_rate: u32,
    pub win_ms: f64,
    pub hop_ms: f64,
    /// FFT size; `None` picks the next power of two at or above the window.
    pub n_fft: Option<usize>,
    pub n_mels: usize,
    pub n_mfcc: usize,
    pub fmin: f64,
    /// Upper band edge; `None` means Nyquist.
    pub fmax: Option<f64>,
    pub log_eps: f64,
    pub window: Window,
}

impl Default for DspConfig {
    fn default() -> Self {
        DspConfig {
            sample_rate: 16_000,
            win_ms: 20.0,
            hop_ms: 10.0,
            n_fft: None,
            n_mels: 80,
            n_mfcc: 13,
            fmin: 0.0,
            fmax: None,
            log_eps: 1e-6,
            window: Window::Hann,
        }
    }
}

impl DspConfig {
    pub fn win_samples(&self) -> usize {
        math::round(self.win_ms * self.sample_rate as f64 / 1000.0) as usize
    }

    pub fn hop_samples(&self) -> usize {
        math::round(self.hop_ms * self.sample_rate as f64 / 1000.0) as usize
    }

    pub fn n_fft(&self) -> usize {
        self.n_fft
            .unwrap_or_else(|| self.win_samples().max(1).next_power_of_two())
    }

    pub fn n_bins(&self) -> usize {
        self.n_fft() / 2 + 1
    }

    pub fn fmax(&self) -> f64 {
        self.fmax.unwrap_or(self.sample_rate as f64 / 2.0)
    }

    /// Number of frames for a signal of `len` samples, if at least one fits.
    pub fn frame_count(&self, len: usize) -> Option<usize> {
        let win = self.win_samples();
        let hop = self.hop_samples();
        if len < win || hop == 0 {
            None
        } else {
            Some((len - win) / hop + 1)
        }
    }

    /// The zero-energy value of a log-mel cell.
    pub fn log_floor(&self) -> f64 {
        math::ln(self.log_eps)
    }

    pub fn validate(&self) -> Result<()> {
        if self.sample_rate == 0 {
            return Err(Error::config("dsp.sample_rate", "must be > 0"));
        }
        let win = self.win_samples();
        let hop = self.hop_samples();
        if hop == 0 || hop > win {
            return Err(Error::config("dsp.hop_ms", "need 0 < hop <= window"));
        }
        let n_fft = self.n_fft();
        if n_fft < win || !n_fft.is_power_of_two() {
            return Err(Error::config(
                "dsp.n_fft",
                format!("{n_fft} must be a power of two >= window ({win})"),
            ));
        }
        if self.n_mels == 0 || self.n_mels >= self.n_bins() {
            return Err(Error::config(
                "dsp.n_mels",
                format!("must be in 1..{}", self.n_bins()),
            ));
        }
        if self.n_mfcc == 0 || self.n_mfcc > self.n_mels {
            return Err(Error::config("dsp.n_mfcc", "need 1 <= n_mfcc <= n_mels"));
        }
        let nyquist = self.sample_rate as f64 / 2.0;
        if !(self.fmin >= 0.0 && self.fmin < self.fmax() && self.fmax() <= nyquist) {
            return Err(Error::config("dsp.fmax", "need 0 <= fmin < fmax <= sample_rate/2"));
        }
        if !(self.log_eps > 0.0) {
            return Err(Error::config("dsp.log_eps", "must be > 0"));
        }
        Ok(())
    }
}

/// Dense row-major matrix of `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }
}

/// What a time x frequency matrix holds. Decides the zero-energy fill used by
/// masking and shifting.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SpectralKind {
    Power,
    LogMel,
    Mfcc,
}

/// Time x frequency features: `frames` rows, `bins` columns.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectral {
    pub kind: SpectralKind,
    pub values: Matrix,
    /// `ln(log_eps)` of the producing config.
    pub log_floor: f64,
}

impl Spectral {
    /// Value that represents zero energy in this representation: `0` for
    /// power and cepstra, `ln(eps)` for log-mel.
    pub fn fill(&self) -> f64 {
        match self.kind {
            SpectralKind::Power | SpectralKind::Mfcc => 0.0,
            SpectralKind::LogMel => self.log_floor,
        }
    }

    pub fn frames(&self) -> usize {
        self.values.rows
    }

    pub fn bins(&self) -> usize {
        self.values.cols
    }
}

pub fn hann_window(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * math::cos(2.0 * PI * i as f64 / n as f64))
        .collect()
}

fn window_values(cfg: &DspConfig) -> Vec<f64> {
    match cfg.window {
        Window::Hann => hann_window(cfg.win_samples()),
        Window::Rectangular => vec![1.0; cfg.win_samples()],
    }
}

/// Splits `samples` into windowed frames (rows of the result). Frame `t`
/// starts at sample `t * hop`; the tail that does not fill a frame is dropped.
pub fn frame(samples: &[f64], cfg: &DspConfig) -> Result<Matrix> {
    let window = window_values(cfg);
    frame_with(samples, cfg, &window)
}

fn frame_with(samples: &[f64], cfg: &DspConfig, window: &[f64]) -> Result<Matrix> {
    let win = window.len();
    let hop = cfg.hop_samples();
    let frames = cfg.frame_count(samples.len()).ok_or_else(|| {
        Error::invalid(format!(
            "signal of {} samples is shorter than one {win}-sample window",
            samples.len()
        ))
    })?;
    let mut m = Matrix::zeros(frames, win);
    for t in 0..frames {
        let src = &samples[t * hop..t * hop + win];
        for ((dst, &s), &w) in m.row_mut(t).iter_mut().zip(src).zip(window) {
            *dst = s * w;
        }
    }
    Ok(m)
}

/// In-place iterative radix-2 complex FFT of a fixed size.
#[derive(Clone, Debug)]
pub struct Fft {
    n: usize,
    cos: Vec<f64>,
    sin: Vec<f64>,
    rev: Vec<usize>,
}

impl Fft {
    pub fn new(n: usize) -> Result<Self> {
        if n == 0 || !n.is_power_of_two() {
            return Err(Error::invalid(format!("FFT size {n} is not a power of two")));
        }
        let bits = n.trailing_zeros();
        let rev = (0..n)
            .map(|i| if bits == 0 { 0 } else { i.reverse_bits() >> (usize::BITS - bits) })
            .collect();
        let half = n / 2;
        let cos = (0..half)
            .map(|k| math::cos(-2.0 * PI * k as f64 / n as f64))
            .collect();
        let sin = (0..half)
            .map(|k| math::sin(-2.0 * PI * k as f64 / n as f64))
            .collect();
        Ok(Fft { n, cos, sin, rev })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// Forward transform `X[k] = sum_n x[n] exp(-2 pi i k n / N)`.
    pub fn forward(&self, re: &mut [f64], im: &mut [f64]) {
        let n = self.n;
        assert!(re.len() == n && im.len() == n);
        for i in 0..n {
            let j = self.rev[i];
            if i < j {
                re.swap(i, j);
                im.swap(i, j);
            }
        }
        let mut size = 2;
        while size <= n {
            let half = size / 2;
            let step = n / size;
            for start in (0..n).step_by(size) {
                for k in 0..half {
                    let (wr, wi) = (self.cos[k * step], self.sin[k * step]);
                    let a = start + k;
                    let b = a + half;
                    let tr = re[b] * wr - im[b] * wi;
                    let ti = re[b] * wi + im[b] * wr;
                    re[b] = re[a] - tr;
                    im[b] = im[a] - ti;
                    re[a] += tr;
                    im[a] += ti;
                }
            }
            size *= 2;
        }
    }
}

fn power_of_frames(frames: &Matrix, fft: &Fft) -> Matrix {
    let n_fft = fft.len();
    let bins = n_fft / 2 + 1;
    let mut out = Matrix::zeros(frames.rows, bins);
    let mut re = vec![0.0; n_fft];
    let mut im = vec![0.0; n_fft];
    for t in 0..frames.rows {
        re.iter_mut().for_each(|v| *v = 0.0);
        im.iter_mut().for_each(|v| *v = 0.0);
        re[..frames.cols].copy_from_slice(frames.row(t));
        fft.forward(&mut re, &mut im);
        for (k, p) in out.row_mut(t).iter_mut().enumerate() {
            *p = re[k] * re[k] + im[k] * im[k];
        }
    }
    out
}

/// Power spectrogram `|X|^2`, shape `[frames x (n_fft/2 + 1)]`.
pub fn stft_power(samples: &[f64], cfg: &DspConfig) -> Result<Spectral> {
    cfg.validate()?;
    let frames = frame(samples, cfg)?;
    let fft = Fft::new(cfg.n_fft())?;
    Ok(Spectral {
        kind: SpectralKind::Power,
        values: power_of_frames(&frames, &fft),
        log_floor: cfg.log_floor(),
    })
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * math::log10(1.0 + f / 700.0)
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (math::powf(10.0, m / 2595.0) - 1.0)
}

/// Triangular mel filters over the positive-frequency FFT bins.
#[derive(Clone, Debug, PartialEq)]
pub struct MelBank {
    /// `[n_mels x n_bins]`
    pub weights: Matrix,
    /// Nonzero column range of each row.
    support: Vec<(usize, usize)>,
    /// Center frequency of each filter in Hz.
    pub centers_hz: Vec<f64>,
}

impl MelBank {
    pub fn n_mels(&self) -> usize {
        self.weights.rows
    }

    pub fn n_bins(&self) -> usize {
        self.weights.cols
    }
}

/// Builds `n_mels` area-normalized triangles with centers evenly spaced on
/// the mel scale between `fmin` and `fmax`.
pub fn mel_filterbank(cfg: &DspConfig) -> Result<MelBank> {
    cfg.validate()?;
    let n_mels = cfg.n_mels;
    let n_fft = cfg.n_fft();
    let bins = cfg.n_bins();
    let sr = cfg.sample_rate as f64;
    let (mlo, mhi) = (hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax()));
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(mlo + (mhi - mlo) * i as f64 / (n_mels + 1) as f64))
        .collect();
    let mut weights = Matrix::zeros(n_mels, bins);
    let mut support = Vec::with_capacity(n_mels);
    for m in 0..n_mels {
        let (left, center, right) = (edges[m], edges[m + 1], edges[m + 2]);
        let norm = 2.0 / (right - left);
        let row = weights.row_mut(m);
        let mut lo = usize::MAX;
        let mut hi = 0;
        for (k, w) in row.iter_mut().enumerate() {
            let f = k as f64 * sr / n_fft as f64;
            let up = (f - left) / (center - left);
            let down = (right - f) / (right - center);
            let v = up.min(down).max(0.0);
            if v > 0.0 {
                *w = v * norm;
                lo = lo.min(k);
                hi = k + 1;
            }
        }
        if lo == usize::MAX {
            return Err(Error::config(
                "dsp.n_mels",
                format!(
                    "mel filter {m} ({left:.1}-{right:.1} Hz) covers no FFT bin; \
                     reduce n_mels or raise n_fft"
                ),
            ));
        }
        support.push((lo, hi));
    }
    Ok(MelBank {
        weights,
        support,
        centers_hz: edges[1..=n_mels].to_vec(),
    })
}

/// `ln(bank . power + eps)` per frame.
pub fn log_mel(spec: &Spectral, bank: &MelBank, cfg: &DspConfig) -> Result<Spectral> {
    if spec.kind != SpectralKind::Power {
        return Err(Error::invalid("log_mel expects a power spectrogram"));
    }
    if spec.bins() != bank.n_bins() {
        return Err(Error::shape(
            "log_mel",
            format!("spectrogram has {} bins, bank {}", spec.bins(), bank.n_bins()),
        ));
    }
    let mut out = Matrix::zeros(spec.frames(), bank.n_mels());
    for t in 0..spec.frames() {
        let frame = spec.values.row(t);
        for (m, dst) in out.row_mut(t).iter_mut().enumerate() {
            let (lo, hi) = bank.support[m];
            let w = &bank.weights.row(m)[lo..hi];
            let e: f64 = w.iter().zip(&frame[lo..hi]).map(|(a, b)| a * b).sum();
            *dst = math::ln(e + cfg.log_eps);
        }
    }
    Ok(Spectral {
        kind: SpectralKind::LogMel,
        values: out,
        log_floor: cfg.log_floor(),
    })
}

/// Orthonormal DCT-II basis, `n x n`, rows are frequencies.
pub fn dct_matrix(n: usize) -> Matrix {
    let mut m = Matrix::zeros(n, n);
    for k in 0..n {
        let scale = if k == 0 {
            math::sqrt(1.0 / n as f64)
        } else {
            math::sqrt(2.0 / n as f64)
        };
        for (i, v) in m.row_mut(k).iter_mut().enumerate() {
            *v = scale * math::cos(PI * k as f64 * (2 * i + 1) as f64 / (2 * n) as f64);
        }
    }
    m
}

fn apply_dct(logmel: &Spectral, dct: &Matrix, n_mfcc: usize) -> Matrix {
    let mut out = Matrix::zeros(logmel.frames(), n_mfcc);
    for t in 0..logmel.frames() {
        let x = logmel.values.row(t);
        for (k, dst) in out.row_mut(t).iter_mut().enumerate() {
            *dst = dct.row(k).iter().zip(x).map(|(a, b)| a * b).sum();
        }
    }
    out
}

/// First `n_mfcc` orthonormal DCT-II coefficients of each log-mel frame.
pub fn mfcc(logmel: &Spectral, cfg: &DspConfig) -> Result<Spectral> {
    if logmel.kind != SpectralKind::LogMel {
        return Err(Error::invalid("mfcc expects log-mel input"));
    }
    if cfg.n_mfcc == 0 || cfg.n_mfcc > logmel.bins() {
        return Err(Error::shape(
            "mfcc",
            format!("n_mfcc {} vs {} mel bands", cfg.n_mfcc, logmel.bins()),
        ));
    }
    let dct = dct_matrix(logmel.bins());
    Ok(Spectral {
        kind: SpectralKind::Mfcc,
        values: apply_dct(logmel, &dct, cfg.n_mfcc),
        log_floor: logmel.log_floor,
    })
}

/// Precomputed window, FFT tables, mel bank and DCT for repeated use.
#[derive(Clone, Debug)]
pub struct FrontEnd {
    cfg: DspConfig,
    window: Vec<f64>,
    fft: Fft,
    bank: MelBank,
    dct: Matrix,
}

impl FrontEnd {
    pub fn new(cfg: DspConfig) -> Result<Self> {
        cfg.validate()?;
        let bank = mel_filterbank(&cfg)?;
        Ok(FrontEnd {
            window: window_values(&cfg),
            fft: Fft::new(cfg.n_fft())?,
            dct: dct_matrix(cfg.n_mels),
            bank,
            cfg,
        })
    }

    pub fn config(&self) -> &DspConfig {
        &self.cfg
    }

    pub fn bank(&self) -> &MelBank {
        &self.bank
    }

    pub fn power(&self, samples: &[f64]) -> Result<Spectral> {
        let frames = frame_with(samples, &self.cfg, &self.window)?;
        Ok(Spectral {
            kind: SpectralKind::Power,
            values: power_of_frames(&frames, &self.fft),
            log_floor: self.cfg.log_floor(),
        })
    }

    pub fn log_mel(&self, samples: &[f64]) -> Result<Spectral> {
        log_mel(&self.power(samples)?, &self.bank, &self.cfg)
    }

    pub fn mfcc(&self, samples: &[f64]) -> Result<Spectral> {
        let lm = self.log_mel(samples)?;
        Ok(Spectral {
            kind: SpectralKind::Mfcc,
            values: apply_dct(&lm, &self.dct, self.cfg.n_mfcc),
            log_floor: lm.log_floor,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sine(freq: f64, n: usize, sr: f64) -> Vec<f64> {
        (0..n)
            .map(|i| math::sin(2.0 * PI * freq * i as f64 / sr))
            .collect()
    }

    #[test]
    fn default_geometry() {
        let cfg = DspConfig::default();
        assert_eq!(cfg.win_samples(), 320);
        assert_eq!(cfg.hop_samples(), 160);
        assert_eq!(cfg.n_fft(), 512);
        assert_eq!(cfg.n_bins(), 257);
        assert_eq!(cfg.frame_count(48_000), Some(299));
        assert_eq!(cfg.frame_count(320), Some(1));
        assert_eq!(cfg.frame_count(319), None);
    }

    #[test]
    fn constant_frame_is_the_window() {
        let cfg = DspConfig::default();
        let m = frame(&[1.0; 320], &cfg).unwrap();
        assert_eq!(m.rows, 1);
        assert_eq!(m.row(0), hann_window(320).as_slice());
        assert!(frame(&[1.0; 100], &cfg).is_err());
    }

    #[test]
    fn fft_matches_naive_dft() {
        let n = 16;
        let fft = Fft::new(n).unwrap();
        let x: Vec<f64> = (0..n).map(|i| ((i * 7) % 5) as f64 - 2.0).collect();
        let mut re = x.clone();
        let mut im = vec![0.0; n];
        fft.forward(&mut re, &mut im);
        for k in 0..n {
            let (mut r, mut i) = (0.0, 0.0);
            for (j, v) in x.iter().enumerate() {
                let a = -2.0 * PI * (k * j) as f64 / n as f64;
                r += v * math::cos(a);
                i += v * math::sin(a);
            }
            assert!((r - re[k]).abs() < 1e-9 && (i - im[k]).abs() < 1e-9);
        }
    }

    #[test]
    fn bin_centred_sine_peaks_at_its_bin() {
        let cfg = DspConfig::default();
        let k = 40;
        let f = k as f64 * 16_000.0 / 512.0;
        let spec = stft_power(&sine(f, 16_000, 16_000.0), &cfg).unwrap();
        for t in 0..spec.frames() {
            let row = spec.values.row(t);
            let argmax = (0..row.len())
                .max_by(|&a, &b| row[a].partial_cmp(&row[b]).unwrap())
                .unwrap();
            assert_eq!(argmax, k);
        }
    }

    #[test]
    fn zero_input_gives_zero_power_and_log_floor() {
        let cfg = DspConfig::default();
        let spec = stft_power(&[0.0; 4000], &cfg).unwrap();
        assert!(spec.values.data.iter().all(|&v| v == 0.0));
        let bank = mel_filterbank(&cfg).unwrap();
        let lm = log_mel(&spec, &bank, &cfg).unwrap();
        assert!(lm.values.data.iter().all(|&v| v == math::ln(1e-6)));
    }

    #[test]
    fn mel_formula() {
        assert!((hz_to_mel(700.0) - 2595.0 * math::log10(2.0)).abs() < 1e-12);
        assert!((hz_to_mel(700.0) - 781.17).abs() < 0.01);
        assert!((mel_to_hz(hz_to_mel(1234.5)) - 1234.5).abs() < 1e-9);
    }

    #[test]
    fn filterbank_rows_are_unimodal_and_ordered() {
        let cfg = DspConfig::default();
        let bank = mel_filterbank(&cfg).unwrap();
        assert_eq!(bank.n_mels(), 80);
        assert_eq!(bank.n_bins(), 257);
        let mut prev_peak = None;
        for m in 0..80 {
            let row = bank.weights.row(m);
            assert!(row.iter().all(|&w| w >= 0.0));
            assert!(row.iter().sum::<f64>() > 0.0);
            let peak = (0..row.len())
                .max_by(|&a, &b| row[a].partial_cmp(&row[b]).unwrap())
                .unwrap();
            assert!(row[..=peak].windows(2).all(|w| w[0] <= w[1]));
            assert!(row[peak..].windows(2).all(|w| w[0] >= w[1]));
            if m > 0 {
                assert!(bank.centers_hz[m] > bank.centers_hz[m - 1]);
            }
            if let Some(p) = prev_peak {
                assert!(peak >= p);
            }
            prev_peak = Some(peak);
        }
    }

    #[test]
    fn too_many_mels_is_rejected() {
        let cfg = DspConfig {
            n_mels: 200,
            ..DspConfig::default()
        };
        assert!(matches!(mel_filterbank(&cfg), Err(Error::Config { .. })));
    }

    #[test]
    fn constant_mel_vector_has_only_dc() {
        let cfg = DspConfig::default();
        let v = -3.5;
        let lm = Spectral {
            kind: SpectralKind::LogMel,
            values: Matrix {
                rows: 1,
                cols: 80,
                data: vec![v; 80],
            },
            log_floor: cfg.log_floor(),
        };
        let c = mfcc(&lm, &cfg).unwrap();
        assert_eq!(c.bins(), 13);
        assert!((c.values.get(0, 0) - v * math::sqrt(80.0)).abs() < 1e-12);
        for k in 1..13 {
            assert!(c.values.get(0, k).abs() < 1e-12);
        }
    }

    #[test]
    fn front_end_matches_free_functions() {
        let cfg = DspConfig::default();
        let fe = FrontEnd::new(cfg.clone()).unwrap();
        let x = sine(440.0, 4000, 16_000.0);
        let a = fe.log_mel(&x).unwrap();
        let spec = stft_power(&x, &cfg).unwrap();
        let b = log_mel(&spec, &mel_filterbank(&cfg).unwrap(), &cfg).unwrap();
        assert_eq!(a, b);
        let c = fe.mfcc(&x).unwrap();
        assert_eq!(c, mfcc(&b, &cfg).unwrap());
    }

    #[test]
    fn config_validation() {
        let bad = DspConfig {
            hop_ms: 30.0,
            ..DspConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = DspConfig {
            n_mfcc: 81,
            ..DspConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
