//! STFT analysis/synthesis, magnitude compression, and phase handling.
//!
//! Analysis windows the signal, synthesis uses weighted overlap-add with
//! squared-window normalization, so any window/hop pair whose squared
//! overlap-add is bounded away from zero reconstructs exactly.

use ndarray::Array2;
use num_complex::Complex64;
use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use thiserror::Error;

use crate::SAMPLE_RATE;

#[derive(Error, Debug)]
pub enum SignalError {
    #[error("invalid STFT configuration: {0}")]
    Config(String),
    #[error("waveform too short: {len} samples, need at least {need}")]
    TooShort { len: usize, need: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("domain error: {0}")]
    Domain(String),
}

/// Mono audio at 16 kHz.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
    pub id: String,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, id: impl Into<String>) -> Self {
        Waveform {
            samples,
            sample_rate: SAMPLE_RATE,
            id: id.into(),
        }
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

    /// Root-mean-square level over all samples.
    pub fn rms(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        let e: f64 = self.samples.iter().map(|x| x * x).sum();
        (e / self.samples.len() as f64).sqrt()
    }

    pub fn energy(&self) -> f64 {
        self.samples.iter().map(|x| x * x).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WindowKind {
    Hann,
    Rect,
}

impl WindowKind {
    pub fn samples(&self, len: usize) -> Vec<f64> {
        match self {
            // Periodic Hann, so integer submultiples of the length overlap-add
            // to a constant.
            WindowKind::Hann => (0..len)
                .map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / len as f64).cos())
                .collect(),
            WindowKind::Rect => vec![1.0; len],
        }
    }
}

/// STFT parameters shared by analysis and synthesis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StftConfig {
    pub n_fft: usize,
    pub hop: usize,
    pub win_length: usize,
    pub window: WindowKind,
    pub compress_exponent: f64,
}

impl StftConfig {
    /// Validates sizes, the compression exponent, and that the squared
    /// window overlap-adds to a constant (perfect reconstruction).
    pub fn new(
        n_fft: usize,
        hop: usize,
        win_length: usize,
        window: WindowKind,
        compress_exponent: f64,
    ) -> Result<Self, SignalError> {
        if hop == 0 || win_length == 0 || n_fft == 0 {
            return Err(SignalError::Config("sizes must be positive".into()));
        }
        if !(hop <= win_length && win_length <= n_fft) {
            return Err(SignalError::Config(format!(
                "need hop <= win_length <= n_fft, got {hop}/{win_length}/{n_fft}"
            )));
        }
        if !(compress_exponent > 0.0 && compress_exponent <= 1.0) {
            return Err(SignalError::Config(format!(
                "compress_exponent must be in (0, 1], got {compress_exponent}"
            )));
        }
        let cfg = StftConfig {
            n_fft,
            hop,
            win_length,
            window,
            compress_exponent,
        };
        cfg.check_cola()?;
        Ok(cfg)
    }

    /// Default analysis setup at 16 kHz: 25 ms Hann window, 6.25 ms hop,
    /// power-law compression 0.3.
    pub fn default_16k() -> Self {
        StftConfig::new(400, 100, 400, WindowKind::Hann, 0.3).expect("default config is valid")
    }

    pub fn bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    pub fn frames_for_len(&self, len: usize) -> usize {
        let padded = len + 2 * self.pad();
        if padded < self.win_length {
            return 1;
        }
        (padded - self.win_length).div_ceil(self.hop) + 1
    }

    fn pad(&self) -> usize {
        self.win_length
    }

    /// Squared-window overlap-add must be constant over the interior,
    /// otherwise synthesis cannot undo analysis.
    fn check_cola(&self) -> Result<(), SignalError> {
        let w = self.window.samples(self.win_length);
        let span = 4 * self.win_length;
        let mut acc = vec![0.0f64; span + self.win_length];
        let mut start = 0;
        while start <= span {
            for (n, &wn) in w.iter().enumerate() {
                acc[start + n] += wn * wn;
            }
            start += self.hop;
        }
        let interior = &acc[self.win_length..span];
        let max = interior.iter().cloned().fold(f64::MIN, f64::max);
        let min = interior.iter().cloned().fold(f64::MAX, f64::min);
        if min <= 1e-10 || (max - min) / max > 1e-8 {
            return Err(SignalError::Config(format!(
                "window/hop pair is not COLA (overlap-add spread {:.3e})",
                (max - min) / max.max(1e-300)
            )));
        }
        Ok(())
    }

    pub(crate) fn window_vec(&self) -> Vec<f64> {
        self.window.samples(self.win_length)
    }

}

/// Compressed magnitude, wrapped phase, and implied complex views of one
/// signal. `T` rows (frames) by `F = n_fft/2 + 1` columns (bins).
#[derive(Debug, Clone, PartialEq)]
pub struct SpectroTriple {
    pub magnitude: Array2<f64>,
    pub phase: Array2<f64>,
}

impl SpectroTriple {
    pub fn frames(&self) -> usize {
        self.magnitude.nrows()
    }

    pub fn bins(&self) -> usize {
        self.magnitude.ncols()
    }

    /// Decompresses the magnitude and recombines with phase.
    pub fn complex(&self, compress_exponent: f64) -> Array2<Complex64> {
        let mut out = Array2::from_elem(self.magnitude.dim(), Complex64::new(0.0, 0.0));
        for ((t, f), m) in self.magnitude.indexed_iter() {
            let lin = m.powf(1.0 / compress_exponent);
            let ph = self.phase[[t, f]];
            out[[t, f]] = Complex64::from_polar(lin, ph);
        }
        out
    }

    pub fn from_complex(spec: &Array2<Complex64>, compress_exponent: f64) -> Self {
        let mut magnitude = Array2::zeros(spec.dim());
        let mut phase = Array2::zeros(spec.dim());
        for ((t, f), c) in spec.indexed_iter() {
            let m = c.norm();
            magnitude[[t, f]] = m.powf(compress_exponent);
            // Angle of an exactly-zero bin is undefined; use 0.
            phase[[t, f]] = if m == 0.0 { 0.0 } else { wrap_unchecked(c.arg()) };
        }
        SpectroTriple { magnitude, phase }
    }
}

/// Complex STFT of a waveform, frames by bins.
pub fn stft_complex(samples: &[f64], cfg: &StftConfig) -> Result<Array2<Complex64>, SignalError> {
    if samples.len() < cfg.win_length {
        return Err(SignalError::TooShort {
            len: samples.len(),
            need: cfg.win_length,
        });
    }
    let pad = cfg.pad();
    let frames = cfg.frames_for_len(samples.len());
    let window = cfg.window_vec();
    let bins = cfg.bins();

    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(cfg.n_fft);
    let mut out = Array2::from_elem((frames, bins), Complex64::new(0.0, 0.0));
    let mut buf = vec![Complex::new(0.0f64, 0.0); cfg.n_fft];
    for t in 0..frames {
        let start = t * cfg.hop;
        for n in 0..cfg.n_fft {
            let v = if n < cfg.win_length {
                let idx = start + n;
                // Analysis runs over the zero-padded signal.
                if idx >= pad && idx - pad < samples.len() {
                    samples[idx - pad] * window[n]
                } else {
                    0.0
                }
            } else {
                0.0
            };
            buf[n] = Complex::new(v, 0.0);
        }
        fft.process(&mut buf);
        for f in 0..bins {
            out[[t, f]] = Complex64::new(buf[f].re, buf[f].im);
        }
    }
    Ok(out)
}

/// Analysis: compressed magnitude plus wrapped phase.
pub fn stft(w: &Waveform, cfg: &StftConfig) -> Result<SpectroTriple, SignalError> {
    let spec = stft_complex(&w.samples, cfg)?;
    Ok(SpectroTriple::from_complex(&spec, cfg.compress_exponent))
}

/// Weighted overlap-add synthesis of a complex spectrogram, trimmed or
/// zero-padded to `length` samples.
pub fn istft_complex(
    spec: &Array2<Complex64>,
    cfg: &StftConfig,
    length: usize,
) -> Result<Vec<f64>, SignalError> {
    if spec.ncols() != cfg.bins() {
        return Err(SignalError::Shape(format!(
            "expected {} bins, got {}",
            cfg.bins(),
            spec.ncols()
        )));
    }
    let frames = spec.nrows();
    let pad = cfg.pad();
    if length > frames * cfg.hop + cfg.win_length {
        return Err(SignalError::Shape(format!(
            "requested length {length} exceeds {} frames of coverage",
            frames
        )));
    }
    let window = cfg.window_vec();
    let total = (frames - 1) * cfg.hop + cfg.n_fft;
    let mut acc = vec![0.0f64; total];
    let mut wsq = vec![0.0f64; total];

    let mut planner = FftPlanner::new();
    let ifft = planner.plan_fft_inverse(cfg.n_fft);
    let mut buf = vec![Complex::new(0.0f64, 0.0); cfg.n_fft];
    for t in 0..frames {
        for f in 0..cfg.bins() {
            buf[f] = Complex::new(spec[[t, f]].re, spec[[t, f]].im);
        }
        // Hermitian symmetry for the real inverse transform.
        for f in cfg.bins()..cfg.n_fft {
            let c = spec[[t, cfg.n_fft - f]];
            buf[f] = Complex::new(c.re, -c.im);
        }
        ifft.process(&mut buf);
        let start = t * cfg.hop;
        for n in 0..cfg.win_length {
            let x = buf[n].re / cfg.n_fft as f64;
            acc[start + n] += x * window[n];
            wsq[start + n] += window[n] * window[n];
        }
    }
    let mut out = vec![0.0f64; length];
    for i in 0..length {
        let idx = pad + i;
        if idx < acc.len() && wsq[idx] > 1e-12 {
            out[i] = acc[idx] / wsq[idx];
        }
    }
    Ok(out)
}

/// Synthesis from a compressed triple.
pub fn istft(s: &SpectroTriple, cfg: &StftConfig, length: usize) -> Result<Waveform, SignalError> {
    let spec = s.complex(cfg.compress_exponent);
    let samples = istft_complex(&spec, cfg, length)?;
    Ok(Waveform::new(samples, ""))
}

/// Element-wise power-law compression of a non-negative magnitude field.
pub fn compress_mag(linear: &Array2<f64>, exponent: f64) -> Result<Array2<f64>, SignalError> {
    if linear.iter().any(|&x| x < 0.0) {
        return Err(SignalError::Domain(
            "magnitude must be non-negative before compression".into(),
        ));
    }
    Ok(linear.mapv(|x| x.powf(exponent)))
}

pub fn decompress_mag(compressed: &Array2<f64>, exponent: f64) -> Result<Array2<f64>, SignalError> {
    if compressed.iter().any(|&x| x < 0.0) {
        return Err(SignalError::Domain(
            "compressed magnitude must be non-negative".into(),
        ));
    }
    Ok(compressed.mapv(|x| x.powf(1.0 / exponent)))
}

fn wrap_unchecked(theta: f64) -> f64 {
    let r = theta - 2.0 * PI * (theta / (2.0 * PI)).round();
    if r <= -PI {
        r + 2.0 * PI
    } else {
        r
    }
}

/// Wraps an angle into the principal interval (−π, π].
pub fn wrap_phase(theta: f64) -> Result<f64, SignalError> {
    if !theta.is_finite() {
        return Err(SignalError::Domain(format!("non-finite phase {theta}")));
    }
    Ok(wrap_unchecked(theta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array1;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn random_signal(rng: &mut impl Rng, len: usize) -> Waveform {
        Waveform::new((0..len).map(|_| rng.gen_range(-1.0..1.0)).collect(), "t")
    }

    #[test]
    fn config_rejects_bad_sizes() {
        assert!(StftConfig::new(400, 500, 400, WindowKind::Hann, 0.3).is_err());
        assert!(StftConfig::new(400, 100, 400, WindowKind::Hann, 0.0).is_err());
        assert!(StftConfig::new(400, 100, 400, WindowKind::Hann, 1.5).is_err());
    }

    #[test]
    fn config_rejects_non_cola() {
        // Hop larger than half the Hann window leaves gaps in the
        // squared-window overlap-add.
        assert!(StftConfig::new(400, 300, 400, WindowKind::Hann, 0.3).is_err());
    }

    #[test]
    fn rect_full_hop_is_cola() {
        assert!(StftConfig::new(256, 256, 256, WindowKind::Rect, 1.0).is_ok());
    }

    #[test]
    fn zero_signal_gives_zero_triple() {
        let cfg = StftConfig::default_16k();
        let w = Waveform::new(vec![0.0; 16_000], "z");
        let s = stft(&w, &cfg).unwrap();
        assert!(s.magnitude.iter().all(|&m| m == 0.0));
        assert!(s.phase.iter().all(|&p| p == 0.0));
    }

    #[test]
    fn too_short_errors() {
        let cfg = StftConfig::default_16k();
        let w = Waveform::new(vec![0.0; 100], "s");
        assert!(matches!(
            stft(&w, &cfg),
            Err(SignalError::TooShort { .. })
        ));
    }

    #[test]
    fn sine_at_bin_center_concentrates() {
        // Rectangular window, frame-length hop: each frame is a plain DFT.
        let cfg = StftConfig::new(256, 256, 256, WindowKind::Rect, 1.0).unwrap();
        let k = 16usize;
        let freq = k as f64 * SAMPLE_RATE as f64 / 256.0;
        let w = Waveform::new(
            (0..2560)
                .map(|n| (2.0 * PI * freq * n as f64 / SAMPLE_RATE as f64).sin())
                .collect(),
            "sine",
        );
        let s = stft(&w, &cfg).unwrap();
        // Direct DFT oracle on an interior frame (pad-aligned at t where the
        // frame covers real samples only).
        let t = 2usize;
        let start = t * cfg.hop;
        let pad = cfg.win_length;
        let frame: Vec<f64> = (0..256)
            .map(|n| {
                let idx = start + n;
                if idx >= pad && idx - pad < w.samples.len() {
                    w.samples[idx - pad]
                } else {
                    0.0
                }
            })
            .collect();
        let mut oracle = vec![0.0f64; 129];
        for (f, o) in oracle.iter_mut().enumerate() {
            let (mut re, mut im) = (0.0, 0.0);
            for (n, &x) in frame.iter().enumerate() {
                let ang = -2.0 * PI * f as f64 * n as f64 / 256.0;
                re += x * ang.cos();
                im += x * ang.sin();
            }
            *o = (re * re + im * im).sqrt();
        }
        for f in 0..129 {
            assert!(
                (s.magnitude[[t, f]] - oracle[f]).abs() < 1e-8,
                "bin {f}: {} vs {}",
                s.magnitude[[t, f]],
                oracle[f]
            );
        }
        // Energy concentrated at bin k.
        let total: f64 = oracle.iter().map(|m| m * m).sum();
        assert!(oracle[k] * oracle[k] / total > 0.99);
    }

    #[test]
    fn round_trip_default_config() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = StftConfig::default_16k();
        let w = random_signal(&mut rng, 16_000);
        let s = stft(&w, &cfg).unwrap();
        let back = istft(&s, &cfg, w.len()).unwrap();
        let err = w
            .samples
            .iter()
            .zip(&back.samples)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-9, "round-trip error {err}");
    }

    #[test]
    fn istft_scaling_single_frame() {
        // One full frame with rectangular window: scaling the compressed
        // magnitude by k scales the waveform by k^(1/exponent).
        let cfg = StftConfig::new(256, 256, 256, WindowKind::Rect, 0.5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = random_signal(&mut rng, 256);
        let s = stft(&w, &cfg).unwrap();
        let scaled = SpectroTriple {
            magnitude: s.magnitude.mapv(|m| 3.0 * m),
            phase: s.phase.clone(),
        };
        let a = istft(&s, &cfg, 256).unwrap();
        let b = istft(&scaled, &cfg, 256).unwrap();
        let k = 3.0f64.powf(1.0 / 0.5);
        for (x, y) in a.samples.iter().zip(&b.samples) {
            assert!((k * x - y).abs() < 1e-8);
        }
    }

    #[test]
    fn linearity_of_analysis() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = StftConfig::default_16k();
        let w = random_signal(&mut rng, 4000);
        let scaled = Waveform::new(w.samples.iter().map(|x| 2.5 * x).collect(), "s");
        let a = stft_complex(&w.samples, &cfg).unwrap();
        let b = stft_complex(&scaled.samples, &cfg).unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((y - x * 2.5).norm() < 1e-9);
        }
    }

    #[test]
    fn parseval_rect_window() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cfg = StftConfig::new(256, 256, 256, WindowKind::Rect, 1.0).unwrap();
        let w = random_signal(&mut rng, 1024);
        let spec = stft_complex(&w.samples, &cfg).unwrap();
        // Interior frame fully inside the signal.
        let t = 2usize;
        let start = t * cfg.hop - cfg.pad();
        let frame = &w.samples[start..start + 256];
        let time_energy: f64 = frame.iter().map(|x| x * x).sum();
        let mut spec_energy = 0.0;
        for f in 0..cfg.bins() {
            let c = spec[[t, f]].norm_sqr();
            let w2 = if f == 0 || f == cfg.n_fft / 2 { 1.0 } else { 2.0 };
            spec_energy += w2 * c;
        }
        spec_energy /= cfg.n_fft as f64;
        assert!(
            ((time_energy - spec_energy) / time_energy).abs() < 1e-6,
            "{time_energy} vs {spec_energy}"
        );
    }

    #[test]
    fn compress_decompress_identity() {
        let m = Array2::from_shape_fn((3, 4), |(i, j)| (i * 4 + j) as f64 * 0.1);
        let c = compress_mag(&m, 0.3).unwrap();
        let d = decompress_mag(&c, 0.3).unwrap();
        for (a, b) in m.iter().zip(d.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(compress_mag(&Array2::from_elem((1, 1), -0.1), 0.3).is_err());
    }

    #[test]
    fn compress_analytic_points() {
        let m = Array2::from_shape_vec((1, 3), vec![0.0, 1.0, 4.0]).unwrap();
        let c = compress_mag(&m, 0.5).unwrap();
        assert_eq!(c[[0, 0]], 0.0);
        assert_eq!(c[[0, 1]], 1.0);
        assert!((c[[0, 2]] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn wrap_phase_analytic() {
        assert_eq!(wrap_phase(0.0).unwrap(), 0.0);
        assert!((wrap_phase(3.0 * PI).unwrap() - PI).abs() < 1e-12);
        assert!((wrap_phase(-3.5 * PI).unwrap() - 0.5 * PI).abs() < 1e-12);
        assert!(wrap_phase(f64::NAN).is_err());
        assert!(wrap_phase(f64::INFINITY).is_err());
    }

    #[test]
    fn wrap_phase_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let t: f64 = rng.gen_range(-50.0..50.0);
            let once = wrap_phase(t).unwrap();
            let twice = wrap_phase(once).unwrap();
            assert_eq!(once, twice);
            assert!(once > -PI && once <= PI);
        }
    }

    #[test]
    fn triple_complex_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let spec = Array2::from_shape_fn((5, 9), |_| {
            Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
        });
        let triple = SpectroTriple::from_complex(&spec, 0.3);
        let back = triple.complex(0.3);
        for (a, b) in spec.iter().zip(back.iter()) {
            assert!((a - b).norm() < 1e-10);
        }
    }

    #[test]
    fn istft_zero_triple_is_zero() {
        let cfg = StftConfig::default_16k();
        let s = SpectroTriple {
            magnitude: Array2::zeros((20, cfg.bins())),
            phase: Array2::zeros((20, cfg.bins())),
        };
        let w = istft(&s, &cfg, 1500).unwrap();
        assert!(w.samples.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn istft_rejects_bad_shape() {
        let cfg = StftConfig::default_16k();
        let s = SpectroTriple {
            magnitude: Array2::zeros((20, 55)),
            phase: Array2::zeros((20, 55)),
        };
        assert!(istft(&s, &cfg, 100).is_err());
    }

    #[test]
    fn frames_cover_requested_length() {
        let cfg = StftConfig::default_16k();
        for len in [400, 401, 999, 16_000] {
            let frames = cfg.frames_for_len(len);
            assert!(len <= frames * cfg.hop + cfg.win_length);
        }
        let _ = Array1::<f64>::zeros(1);
    }
}
