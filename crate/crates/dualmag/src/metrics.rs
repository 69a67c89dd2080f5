//! Objective evaluation: LSD, STOI, SI-SDR, measured SNR, RT60, and
//! report aggregation.

use ndarray::Array2;
use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;
use thiserror::Error;

use crate::signal::Waveform;
use crate::sim::ManifestEntry;
use crate::wav::read_wav;
use crate::SAMPLE_RATE;

#[derive(Error, Debug)]
pub enum MetricsError {
    #[error("length mismatch: {a} vs {b} samples")]
    LengthMismatch { a: usize, b: usize },
    #[error("signal too short: {0}")]
    TooShort(String),
    #[error("zero-energy input: {0}")]
    ZeroEnergy(String),
    #[error("decay range too small to fit RT60 (only {span_db:.1} dB available)")]
    DecayRange { span_db: f64 },
    #[error(transparent)]
    Wav(#[from] crate::wav::WavError),
    #[error("empty manifest")]
    EmptyManifest,
}

/// SI-SDR values above this are reported as the scale-invariance cap.
pub const SI_SDR_CAP_DB: f64 = 60.0;

// ---------------------------------------------------------------------------
// Shared helpers
// ---------------------------------------------------------------------------

fn rfft_frames(samples: &[f64], frame: usize, hop: usize, n_fft: usize, hann: bool) -> Array2<Complex<f64>> {
    assert!(samples.len() >= frame);
    let n_frames = (samples.len() - frame) / hop + 1;
    let bins = n_fft / 2 + 1;
    let window: Vec<f64> = if hann {
        (0..frame)
            .map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / frame as f64).cos())
            .collect()
    } else {
        vec![1.0; frame]
    };
    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(n_fft);
    let mut out = Array2::from_elem((n_frames, bins), Complex::new(0.0, 0.0));
    let mut buf = vec![Complex::new(0.0f64, 0.0); n_fft];
    for t in 0..n_frames {
        for n in 0..n_fft {
            buf[n] = if n < frame {
                Complex::new(samples[t * hop + n] * window[n], 0.0)
            } else {
                Complex::new(0.0, 0.0)
            };
        }
        fft.process(&mut buf);
        for (f, b) in buf.iter().take(bins).enumerate() {
            out[[t, f]] = *b;
        }
    }
    out
}

/// Mean power of the clean signal restricted to active frames: 20 ms
/// frames whose power is within 40 dB of the loudest frame. Silence does
/// not dilute the speech level this way.
pub fn active_speech_power(samples: &[f64]) -> Option<f64> {
    let frame = 320;
    let hop = 160;
    if samples.len() < frame {
        let p = samples.iter().map(|x| x * x).sum::<f64>() / samples.len().max(1) as f64;
        return if p > 0.0 { Some(p) } else { None };
    }
    let n_frames = (samples.len() - frame) / hop + 1;
    let powers: Vec<f64> = (0..n_frames)
        .map(|t| {
            samples[t * hop..t * hop + frame]
                .iter()
                .map(|x| x * x)
                .sum::<f64>()
                / frame as f64
        })
        .collect();
    let peak = powers.iter().cloned().fold(0.0f64, f64::max);
    if peak <= 0.0 {
        return None;
    }
    let thresh = peak * 1e-4; // 40 dB below peak
    let active: Vec<f64> = powers.iter().cloned().filter(|&p| p >= thresh).collect();
    Some(active.iter().sum::<f64>() / active.len() as f64)
}

// ---------------------------------------------------------------------------
// LSD
// ---------------------------------------------------------------------------

/// Log-spectral distance in dB, with a degenerate flag for silent
/// references.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LsdOutcome {
    pub db: f64,
    pub degenerate: bool,
}

const LSD_NFFT: usize = 2048;
const LSD_HOP: usize = 512;
const LSD_EPS: f64 = 1e-10;

/// Frame-averaged RMS log power-spectrum distance, reported in dB:
/// mean over frames of sqrt(mean over bins of (log10 Pref - log10 Pest)^2),
/// scaled by 10, on a 2048-point Hann STFT with hop 512.
pub fn lsd(reference: &Waveform, estimate: &Waveform) -> Result<LsdOutcome, MetricsError> {
    if reference.len() != estimate.len() {
        return Err(MetricsError::LengthMismatch {
            a: reference.len(),
            b: estimate.len(),
        });
    }
    if reference.len() < LSD_NFFT {
        return Err(MetricsError::TooShort(format!(
            "need at least {LSD_NFFT} samples for LSD, got {}",
            reference.len()
        )));
    }
    let degenerate = reference.energy() == 0.0;
    let sr = rfft_frames(&reference.samples, LSD_NFFT, LSD_HOP, LSD_NFFT, true);
    let se = rfft_frames(&estimate.samples, LSD_NFFT, LSD_HOP, LSD_NFFT, true);
    let (frames, bins) = sr.dim();
    let mut acc = 0.0;
    for t in 0..frames {
        let mut frame_acc = 0.0;
        for f in 0..bins {
            let pr = sr[[t, f]].norm_sqr() + LSD_EPS;
            let pe = se[[t, f]].norm_sqr() + LSD_EPS;
            let d = pr.log10() - pe.log10();
            frame_acc += d * d;
        }
        acc += (frame_acc / bins as f64).sqrt();
    }
    Ok(LsdOutcome {
        db: 10.0 * acc / frames as f64,
        degenerate,
    })
}

// ---------------------------------------------------------------------------
// STOI
// ---------------------------------------------------------------------------

const STOI_FRAME: usize = 256;
const STOI_HOP: usize = 128;
const STOI_NFFT: usize = 512;
const STOI_BANDS: usize = 15;
const STOI_SEG: usize = 48; // 48 hops of 8 ms = 384 ms analysis segments
const STOI_DYN_RANGE_DB: f64 = 40.0;
const STOI_CLIP_DB: f64 = -15.0;

fn third_octave_bands() -> Vec<Vec<usize>> {
    let bin_hz = SAMPLE_RATE as f64 / STOI_NFFT as f64;
    (0..STOI_BANDS)
        .map(|k| {
            let cf = 150.0 * 2f64.powf(k as f64 / 3.0);
            let lo = cf / 2f64.powf(1.0 / 6.0);
            let hi = cf * 2f64.powf(1.0 / 6.0);
            (1..STOI_NFFT / 2 + 1)
                .filter(|&i| {
                    let f = i as f64 * bin_hz;
                    f >= lo && f < hi
                })
                .collect()
        })
        .collect()
}

/// Classical short-time objective intelligibility at 16 kHz: silent-frame
/// removal, 15 one-third-octave bands from 150 Hz, 384 ms segments,
/// normalized and clipped band-envelope correlations, averaged.
pub fn stoi(reference: &Waveform, estimate: &Waveform) -> Result<f64, MetricsError> {
    if reference.len() != estimate.len() {
        return Err(MetricsError::LengthMismatch {
            a: reference.len(),
            b: estimate.len(),
        });
    }
    if reference.len() < STOI_FRAME {
        return Err(MetricsError::TooShort("below one STOI frame".into()));
    }
    if reference.energy() == 0.0 {
        return Err(MetricsError::ZeroEnergy("reference".into()));
    }
    let sr = rfft_frames(&reference.samples, STOI_FRAME, STOI_HOP, STOI_NFFT, true);
    let se = rfft_frames(&estimate.samples, STOI_FRAME, STOI_HOP, STOI_NFFT, true);
    let n_frames = sr.nrows();

    // Silent-frame mask from the reference, 40 dB dynamic range.
    let energies: Vec<f64> = (0..n_frames)
        .map(|t| (0..sr.ncols()).map(|f| sr[[t, f]].norm_sqr()).sum())
        .collect();
    let peak = energies.iter().cloned().fold(0.0f64, f64::max);
    let thresh = peak * 10f64.powf(-STOI_DYN_RANGE_DB / 10.0);
    let keep: Vec<usize> = (0..n_frames).filter(|&t| energies[t] > thresh).collect();
    if keep.len() < STOI_SEG {
        return Err(MetricsError::TooShort(format!(
            "only {} active frames, need {} (384 ms of active speech)",
            keep.len(),
            STOI_SEG
        )));
    }

    let bands = third_octave_bands();
    let mut xb = Array2::zeros((keep.len(), STOI_BANDS));
    let mut yb = Array2::zeros((keep.len(), STOI_BANDS));
    for (row, &t) in keep.iter().enumerate() {
        for (j, band) in bands.iter().enumerate() {
            let ex: f64 = band.iter().map(|&i| sr[[t, i]].norm_sqr()).sum();
            let ey: f64 = band.iter().map(|&i| se[[t, i]].norm_sqr()).sum();
            xb[[row, j]] = ex.sqrt();
            yb[[row, j]] = ey.sqrt();
        }
    }

    // Clipping bound: the normalized estimate may exceed the reference
    // envelope by at most the -15 dB SDR floor.
    let beta = 1.0 + 10f64.powf(STOI_CLIP_DB / 20.0);
    let mut acc = 0.0;
    let mut count = 0usize;
    for m in STOI_SEG..=keep.len() {
        for j in 0..STOI_BANDS {
            let x: Vec<f64> = (m - STOI_SEG..m).map(|r| xb[[r, j]]).collect();
            let y: Vec<f64> = (m - STOI_SEG..m).map(|r| yb[[r, j]]).collect();
            let nx: f64 = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            let ny: f64 = y.iter().map(|v| v * v).sum::<f64>().sqrt();
            let scale = if ny > 0.0 { nx / ny } else { 0.0 };
            let yc: Vec<f64> = y
                .iter()
                .zip(&x)
                .map(|(&yv, &xv)| (yv * scale).min(xv * beta))
                .collect();
            let mx = x.iter().sum::<f64>() / STOI_SEG as f64;
            let my = yc.iter().sum::<f64>() / STOI_SEG as f64;
            let mut num = 0.0;
            let mut dx = 0.0;
            let mut dy = 0.0;
            for i in 0..STOI_SEG {
                let a = x[i] - mx;
                let b = yc[i] - my;
                num += a * b;
                dx += a * a;
                dy += b * b;
            }
            if dx > 0.0 && dy > 0.0 {
                acc += num / (dx.sqrt() * dy.sqrt());
            }
            count += 1;
        }
    }
    Ok(acc / count as f64)
}

// ---------------------------------------------------------------------------
// SI-SDR and SNR
// ---------------------------------------------------------------------------

/// Scale-invariant signal-to-distortion ratio in dB, capped at
/// [`SI_SDR_CAP_DB`] when the estimate is an exact rescaling of the
/// reference.
pub fn si_sdr(reference: &Waveform, estimate: &Waveform) -> Result<f64, MetricsError> {
    if reference.len() != estimate.len() {
        return Err(MetricsError::LengthMismatch {
            a: reference.len(),
            b: estimate.len(),
        });
    }
    let er = reference.energy();
    let ee = estimate.energy();
    if er == 0.0 || ee == 0.0 {
        return Err(MetricsError::ZeroEnergy("si_sdr input".into()));
    }
    let dot: f64 = reference
        .samples
        .iter()
        .zip(&estimate.samples)
        .map(|(r, e)| r * e)
        .sum();
    let alpha = dot / er;
    let mut e_target = 0.0;
    let mut e_res = 0.0;
    for (r, e) in reference.samples.iter().zip(&estimate.samples) {
        let t = alpha * r;
        e_target += t * t;
        let d = e - t;
        e_res += d * d;
    }
    if e_res <= e_target * 1e-24 {
        return Ok(SI_SDR_CAP_DB);
    }
    Ok((10.0 * (e_target / e_res).log10()).min(SI_SDR_CAP_DB))
}

/// SNR of a mixture against its known clean component, via the residual
/// method: active-speech clean power over full residual power. Returns
/// +inf when the residual is (numerically) zero.
pub fn measured_snr(clean: &Waveform, mixture: &Waveform) -> Result<f64, MetricsError> {
    if clean.len() != mixture.len() {
        return Err(MetricsError::LengthMismatch {
            a: clean.len(),
            b: mixture.len(),
        });
    }
    let p_clean =
        active_speech_power(&clean.samples).ok_or(MetricsError::ZeroEnergy("clean".into()))?;
    let res_energy: f64 = clean
        .samples
        .iter()
        .zip(&mixture.samples)
        .map(|(c, m)| {
            let d = m - c;
            d * d
        })
        .sum();
    let p_res = res_energy / clean.len() as f64;
    if p_res <= p_clean * 1e-24 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (p_clean / p_res).log10())
}

// ---------------------------------------------------------------------------
// RT60 and spectra
// ---------------------------------------------------------------------------

/// RT60 from an impulse response via Schroeder backward integration:
/// least-squares line through the -5..-35 dB span of the decay curve,
/// extrapolated to 60 dB.
pub fn rt60_schroeder(taps: &[f64], sample_rate: u32) -> Result<f64, MetricsError> {
    if taps.is_empty() || taps.iter().all(|&t| t == 0.0) {
        return Err(MetricsError::ZeroEnergy("impulse response".into()));
    }
    let mut edc = vec![0.0f64; taps.len()];
    let mut acc = 0.0;
    for (i, &t) in taps.iter().enumerate().rev() {
        acc += t * t;
        edc[i] = acc;
    }
    let total = edc[0];
    let db: Vec<f64> = edc.iter().map(|&e| 10.0 * (e / total).log10()).collect();
    let i5 = db.iter().position(|&d| d <= -5.0);
    let i35 = db.iter().position(|&d| d <= -35.0);
    let (start, end) = match (i5, i35) {
        (Some(a), Some(b)) if b > a + 2 => (a, b),
        _ => {
            let span = db
                .iter()
                .rev()
                .find(|d| d.is_finite())
                .cloned()
                .unwrap_or(0.0);
            return Err(MetricsError::DecayRange { span_db: -span });
        }
    };
    // Least-squares fit of dB vs. time over the decay span.
    let n = (end - start) as f64;
    let mut sx = 0.0;
    let mut sy = 0.0;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for i in start..end {
        let x = i as f64 / sample_rate as f64;
        let y = db[i];
        sx += x;
        sy += y;
        sxx += x * x;
        sxy += x * y;
    }
    let slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
    if slope >= 0.0 {
        return Err(MetricsError::DecayRange { span_db: 0.0 });
    }
    Ok(-60.0 / slope)
}

/// Welch power spectral density: mean Hann periodogram, 1024-point
/// segments with 50% overlap. Returns one value per bin (513 bins).
pub fn welch_psd(samples: &[f64]) -> Result<Vec<f64>, MetricsError> {
    const N: usize = 1024;
    if samples.len() < N {
        return Err(MetricsError::TooShort("below one Welch segment".into()));
    }
    let spec = rfft_frames(samples, N, N / 2, N, true);
    let (frames, bins) = spec.dim();
    let mut psd = vec![0.0f64; bins];
    for t in 0..frames {
        for (f, p) in psd.iter_mut().enumerate() {
            *p += spec[[t, f]].norm_sqr();
        }
    }
    for p in psd.iter_mut() {
        *p /= frames as f64;
    }
    Ok(psd)
}

/// Estimates the -3 dB bandwidth of `filtered` relative to `reference`:
/// the highest frequency at which the Welch PSD ratio is within 3 dB of
/// its low-frequency level.
pub fn bandwidth_3db(filtered: &Waveform, reference: &Waveform) -> Result<f64, MetricsError> {
    let pf = welch_psd(&filtered.samples)?;
    let pr = welch_psd(&reference.samples)?;
    let bin_hz = SAMPLE_RATE as f64 / 1024.0;
    let ratio_db: Vec<f64> = pf
        .iter()
        .zip(&pr)
        .map(|(&a, &b)| 10.0 * ((a + 1e-30) / (b + 1e-30)).log10())
        .collect();
    // Reference passband level: median ratio between 100 Hz and 1 kHz.
    let lo = (100.0 / bin_hz).ceil() as usize;
    let hi = (1000.0 / bin_hz).floor() as usize;
    let mut pass: Vec<f64> = ratio_db[lo..=hi].to_vec();
    pass.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let level = pass[pass.len() / 2];
    let mut bw = 0.0;
    for (i, &r) in ratio_db.iter().enumerate().skip(lo) {
        if r >= level - 3.0 {
            bw = i as f64 * bin_hz;
        }
    }
    Ok(bw)
}

// ---------------------------------------------------------------------------
// Report aggregation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UtteranceRow {
    pub id: String,
    pub lsd_db: f64,
    pub stoi: f64,
    pub si_sdr_db: f64,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub external: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: f64,
    pub ci95_lo: f64,
    pub ci95_hi: f64,
    pub n: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_utterance: Vec<UtteranceRow>,
    pub aggregate: BTreeMap<String, MetricSummary>,
    pub missing: Vec<String>,
    pub lsd_stft: String,
}

impl EvalReport {
    /// Plain-text table mirroring the usual STOI / LSD column order.
    pub fn summary_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("LSD STFT: {}\n", self.lsd_stft));
        out.push_str("metric        mean      95% CI              n\n");
        for (name, s) in &self.aggregate {
            out.push_str(&format!(
                "{:<12} {:>8.4}  [{:>8.4}, {:>8.4}]  {}\n",
                name, s.mean, s.ci95_lo, s.ci95_hi, s.n
            ));
        }
        if !self.missing.is_empty() {
            out.push_str(&format!("missing restored files: {:?}\n", self.missing));
        }
        out
    }
}

fn summarize(values: &[f64]) -> MetricSummary {
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = if n > 1 {
        values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64
    } else {
        0.0
    };
    let half = 1.96 * (var / n as f64).sqrt();
    MetricSummary {
        mean,
        ci95_lo: mean - half,
        ci95_hi: mean + half,
        n,
    }
}

/// Range limits for merged external metric columns; out-of-range sidecar
/// values are dropped.
fn external_in_range(name: &str, v: f64) -> bool {
    match name {
        "pesq" => (-0.5..=4.65).contains(&v),
        "csig" | "cbak" | "covl" => (0.0..=5.0).contains(&v),
        "srmr" => (0.0..=40.0).contains(&v),
        _ => v.is_finite(),
    }
}

/// Computes LSD / STOI / SI-SDR per manifest pair against files in
/// `restored_dir` (matched by degraded file name), merging optional
/// externally computed columns keyed by utterance id.
pub fn evaluate(
    manifest: &[ManifestEntry],
    restored_dir: &Path,
    external: Option<&BTreeMap<String, BTreeMap<String, f64>>>,
) -> Result<EvalReport, MetricsError> {
    if manifest.is_empty() {
        return Err(MetricsError::EmptyManifest);
    }
    let mut rows = Vec::new();
    let mut missing = Vec::new();
    for entry in manifest {
        let name = Path::new(&entry.degraded_path)
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        let restored_path = restored_dir.join(&name);
        if !restored_path.exists() {
            missing.push(name);
            continue;
        }
        let clean = read_wav(&entry.clean_path)?;
        let mut restored = read_wav(&restored_path)?;
        if restored.len() != clean.len() {
            return Err(MetricsError::LengthMismatch {
                a: clean.len(),
                b: restored.len(),
            });
        }
        restored.id = clean.id.clone();
        let id = Path::new(&entry.degraded_path)
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        let mut ext = BTreeMap::new();
        if let Some(map) = external {
            if let Some(cols) = map.get(&id) {
                for (k, &v) in cols {
                    if external_in_range(k, v) {
                        ext.insert(k.clone(), v);
                    }
                }
            }
        }
        rows.push(UtteranceRow {
            id,
            lsd_db: lsd(&clean, &restored)?.db,
            stoi: stoi(&clean, &restored)?,
            si_sdr_db: si_sdr(&clean, &restored)?,
            external: ext,
        });
    }
    if rows.is_empty() {
        return Err(MetricsError::EmptyManifest);
    }
    let mut aggregate = BTreeMap::new();
    aggregate.insert(
        "lsd_db".to_string(),
        summarize(&rows.iter().map(|r| r.lsd_db).collect::<Vec<_>>()),
    );
    aggregate.insert(
        "stoi".to_string(),
        summarize(&rows.iter().map(|r| r.stoi).collect::<Vec<_>>()),
    );
    aggregate.insert(
        "si_sdr_db".to_string(),
        summarize(&rows.iter().map(|r| r.si_sdr_db).collect::<Vec<_>>()),
    );
    let mut ext_names: Vec<String> = Vec::new();
    for r in &rows {
        for k in r.external.keys() {
            if !ext_names.contains(k) {
                ext_names.push(k.clone());
            }
        }
    }
    for name in ext_names {
        let vals: Vec<f64> = rows
            .iter()
            .filter_map(|r| r.external.get(&name).cloned())
            .collect();
        aggregate.insert(name, summarize(&vals));
    }
    Ok(EvalReport {
        per_utterance: rows,
        aggregate,
        missing,
        lsd_stft: format!("{LSD_NFFT}-point Hann, hop {LSD_HOP}, power eps {LSD_EPS:e}"),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn noise(seed: u64, len: usize) -> Waveform {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Waveform::new((0..len).map(|_| rng.gen_range(-0.5..0.5)).collect(), "n")
    }

    /// Speech-shaped test signal: amplitude-modulated tone mix so STOI's
    /// envelope correlation has structure to latch onto.
    fn speechish(seed: u64, len: usize) -> Waveform {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut samples = vec![0.0f64; len];
        for _ in 0..12 {
            let f = rng.gen_range(120.0..3500.0);
            let mod_f = rng.gen_range(2.0..8.0);
            let amp = rng.gen_range(0.02..0.1);
            let ph: f64 = rng.gen_range(0.0..2.0 * PI);
            for (n, s) in samples.iter_mut().enumerate() {
                let t = n as f64 / SAMPLE_RATE as f64;
                let env = 0.5 + 0.5 * (2.0 * PI * mod_f * t + ph).sin();
                *s += amp * env * (2.0 * PI * f * t + ph).sin();
            }
        }
        Waveform::new(samples, "sp")
    }

    #[test]
    fn lsd_zero_for_identical() {
        let x = noise(1, 8000);
        assert!(lsd(&x, &x).unwrap().db.abs() < 1e-12);
    }

    #[test]
    fn lsd_scaling_is_20db() {
        let x = noise(2, 16_000);
        let y = Waveform::new(x.samples.iter().map(|v| 10.0 * v).collect(), "y");
        let d = lsd(&x, &y).unwrap().db;
        assert!((d - 20.0).abs() < 0.01, "lsd {d}");
    }

    #[test]
    fn lsd_matches_brute_force_oracle() {
        // Independent double-loop recomputation from raw frame DFTs.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..5 {
            let len = rng.gen_range(4096..10_000);
            let x = noise(rng.gen(), len);
            let y = noise(rng.gen(), len);
            let got = lsd(&x, &y).unwrap().db;

            let window: Vec<f64> = (0..LSD_NFFT)
                .map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / LSD_NFFT as f64).cos())
                .collect();
            let n_frames = (len - LSD_NFFT) / LSD_HOP + 1;
            let mut total = 0.0;
            for t in 0..n_frames {
                let mut frame_acc = 0.0;
                for f in 0..LSD_NFFT / 2 + 1 {
                    let (mut rr, mut ri, mut er, mut ei) = (0.0, 0.0, 0.0, 0.0);
                    for n in 0..LSD_NFFT {
                        let ang = -2.0 * PI * (f * n) as f64 / LSD_NFFT as f64;
                        let (s, c) = (ang.sin(), ang.cos());
                        let xv = x.samples[t * LSD_HOP + n] * window[n];
                        let yv = y.samples[t * LSD_HOP + n] * window[n];
                        rr += xv * c;
                        ri += xv * s;
                        er += yv * c;
                        ei += yv * s;
                    }
                    let pr = rr * rr + ri * ri + LSD_EPS;
                    let pe = er * er + ei * ei + LSD_EPS;
                    let d = pr.log10() - pe.log10();
                    frame_acc += d * d;
                }
                total += (frame_acc / (LSD_NFFT / 2 + 1) as f64).sqrt();
            }
            let oracle = 10.0 * total / n_frames as f64;
            assert!((got - oracle).abs() < 1e-9, "{got} vs {oracle}");
        }
    }

    #[test]
    fn lsd_symmetric() {
        let x = noise(4, 8000);
        let y = noise(5, 8000);
        let a = lsd(&x, &y).unwrap().db;
        let b = lsd(&y, &x).unwrap().db;
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn lsd_errors() {
        let x = noise(6, 8000);
        let y = noise(7, 4000);
        assert!(matches!(lsd(&x, &y), Err(MetricsError::LengthMismatch { .. })));
        let z = Waveform::new(vec![0.0; 8000], "z");
        assert!(lsd(&z, &x).unwrap().degenerate);
    }

    #[test]
    fn stoi_self_is_one() {
        let x = speechish(1, 32_000);
        let s = stoi(&x, &x).unwrap();
        assert!(s >= 0.999, "self STOI {s}");
    }

    #[test]
    fn stoi_scale_invariant() {
        let x = speechish(2, 32_000);
        let y = Waveform::new(x.samples.iter().map(|v| 0.37 * v).collect(), "y");
        let a = stoi(&x, &x).unwrap();
        let b = stoi(&x, &y).unwrap();
        assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        let xs = Waveform::new(x.samples.iter().map(|v| 4.2 * v).collect(), "xs");
        let c = stoi(&xs, &y).unwrap();
        assert!((a - c).abs() < 1e-6);
    }

    #[test]
    fn stoi_decreases_with_noise() {
        // The clipping stage keeps the score well above zero even for
        // pure noise, so assert the ordering rather than an absolute
        // floor: more noise must score lower.
        let x = speechish(3, 48_000);
        let n = noise(99, 48_000);
        let at = |snr_db: f64| {
            let g = 10f64.powf(-snr_db / 20.0) * x.rms() / n.rms();
            let y = Waveform::new(
                x.samples.iter().zip(&n.samples).map(|(a, b)| a + g * b).collect(),
                "y",
            );
            stoi(&x, &y).unwrap()
        };
        let clean = stoi(&x, &x).unwrap();
        let s20 = at(20.0);
        let s0 = at(0.0);
        let pure = stoi(&x, &n).unwrap();
        assert!(clean > s20 && s20 > s0 && s0 > pure, "{clean} {s20} {s0} {pure}");
        assert!(pure < clean - 0.2, "pure-noise STOI {pure} vs clean {clean}");
    }

    #[test]
    fn stoi_too_short_errors() {
        let x = speechish(4, 2000);
        assert!(matches!(stoi(&x, &x), Err(MetricsError::TooShort(_))));
    }

    #[test]
    fn si_sdr_cap_and_scale_invariance() {
        let x = noise(8, 8000);
        assert_eq!(si_sdr(&x, &x).unwrap(), SI_SDR_CAP_DB);
        let y = Waveform::new(x.samples.iter().map(|v| 2.0 * v).collect(), "y");
        assert_eq!(si_sdr(&x, &y).unwrap(), SI_SDR_CAP_DB);
        let z = Waveform::new(vec![0.0; 8000], "z");
        assert!(si_sdr(&x, &z).is_err());
    }

    #[test]
    fn si_sdr_known_value() {
        // est = ref + independent noise at known residual ratio.
        let x = noise(9, 16_000);
        let n = noise(10, 16_000);
        let y = Waveform::new(
            x.samples
                .iter()
                .zip(&n.samples)
                .map(|(a, b)| a + 0.1 * b)
                .collect(),
            "y",
        );
        let v = si_sdr(&x, &y).unwrap();
        assert!((15.0..25.0).contains(&v), "si_sdr {v}");
    }

    #[test]
    fn measured_snr_by_construction() {
        let x = speechish(5, 32_000);
        let n = noise(11, 32_000);
        let p_clean = active_speech_power(&x.samples).unwrap();
        let p_noise = n.energy() / n.len() as f64;
        for target in [0.0, 7.3, 15.0] {
            let g = (p_clean / p_noise).sqrt() * 10f64.powf(-target / 20.0);
            let mix = Waveform::new(
                x.samples
                    .iter()
                    .zip(&n.samples)
                    .map(|(a, b)| a + g * b)
                    .collect(),
                "m",
            );
            let got = measured_snr(&x, &mix).unwrap();
            assert!((got - target).abs() < 1e-9, "{got} vs {target}");
        }
    }

    #[test]
    fn measured_snr_identity_is_infinite() {
        let x = speechish(6, 16_000);
        assert!(measured_snr(&x, &x).unwrap().is_infinite());
    }

    #[test]
    fn rt60_synthetic_exponential() {
        // Decay constant set so the energy envelope drops 60 dB in 0.5 s.
        let fs = SAMPLE_RATE;
        let t60 = 0.5;
        let tau = t60 / (3.0 * 10f64.ln()); // amplitude e-folding time
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let taps: Vec<f64> = (0..(fs as f64 * 0.8) as usize)
            .map(|n| {
                let t = n as f64 / fs as f64;
                (-t / tau).exp() * rng.gen_range(-1.0..1.0f64)
            })
            .collect();
        let est = rt60_schroeder(&taps, fs).unwrap();
        assert!((est - t60).abs() < 0.05, "rt60 {est}");
    }

    #[test]
    fn rt60_rejects_flat_ir() {
        assert!(rt60_schroeder(&[0.0; 100], SAMPLE_RATE).is_err());
        assert!(rt60_schroeder(&vec![1.0; 1600], SAMPLE_RATE).is_err());
    }

    #[test]
    fn bandwidth_of_filtered_noise() {
        use crate::filter::{lowpass, FilterFamily};
        let x = noise(13, 64_000);
        let y = lowpass(&x, FilterFamily::Butterworth, 8, 3000.0).unwrap();
        let bw = bandwidth_3db(&y, &x).unwrap();
        assert!((bw - 3000.0).abs() < 300.0, "bandwidth {bw}");
    }

    #[test]
    fn summary_recomputes_from_rows() {
        let s = summarize(&[1.0, 2.0, 3.0, 4.0]);
        assert!((s.mean - 2.5).abs() < 1e-12);
        assert_eq!(s.n, 4);
        assert!(s.ci95_lo < s.mean && s.mean < s.ci95_hi);
    }

    #[test]
    fn external_ranges() {
        assert!(external_in_range("pesq", 3.2));
        assert!(!external_in_range("pesq", 9.0));
        assert!(!external_in_range("csig", -1.0));
    }
}
