//! Distortion simulation: reverberation (shoebox image-source method),
//! SNR-controlled noise mixing, and low-pass bandwidth degradation, plus
//! corpus generation and verification of the achieved degradations.

use rand::prelude::*;
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use thiserror::Error;

use crate::filter::{lowpass, FilterError, FilterFamily};
use crate::metrics::{active_speech_power, bandwidth_3db, rt60_schroeder};
use crate::signal::Waveform;
use crate::wav::{read_wav, write_wav};
use crate::SAMPLE_RATE;

const SPEED_OF_SOUND: f64 = 343.0;

#[derive(Error, Debug)]
pub enum SimError {
    #[error("geometry error: {0}")]
    Geometry(String),
    #[error("energy error: {0}")]
    Energy(String),
    #[error("argument error: {0}")]
    Argument(String),
    #[error(transparent)]
    Filter(#[from] FilterError),
    #[error(transparent)]
    Wav(#[from] crate::wav::WavError),
    #[error("corpus error: {0}")]
    Corpus(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("manifest parse error: {0}")]
    Manifest(String),
}

/// Everything that determines one degraded utterance. Identical spec and
/// inputs reproduce the output bit for bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistortionSpec {
    /// Requested SNR in dB; `None` disables the noise stage.
    pub snr_db: Option<f64>,
    /// Room length, width, height in meters.
    pub room_dims: [f64; 3],
    /// Target reverberation time in seconds (ignored for dry rooms).
    pub rt60_s: f64,
    /// When set, walls use a fixed absorption coefficient of 0.99.
    pub dry_room: bool,
    pub src_pos: [f64; 3],
    pub mic_pos: [f64; 3],
    pub filter_family: FilterFamily,
    pub filter_order: usize,
    pub cutoff_hz: f64,
    /// Start of the noise crop, in samples.
    pub noise_offset: usize,
    /// When true the noise is injected after low-pass filtering instead of
    /// sharing the bandwidth limit.
    pub noise_post_filter: bool,
    pub rng_seed: u64,
}

pub const WALL_CLEARANCE_M: f64 = 0.3;

impl DistortionSpec {
    pub fn validate(&self) -> Result<(), SimError> {
        let [l, w, h] = self.room_dims;
        if !(5.0..=10.0).contains(&l) || !(5.0..=10.0).contains(&w) || !(2.0..=6.0).contains(&h) {
            return Err(SimError::Geometry(format!(
                "room dims {l}x{w}x{h} outside 5-10 x 5-10 x 2-6 m"
            )));
        }
        for (name, p) in [("src", self.src_pos), ("mic", self.mic_pos)] {
            for (axis, &dim) in p.iter().zip(&self.room_dims) {
                if *axis < WALL_CLEARANCE_M || *axis > dim - WALL_CLEARANCE_M {
                    return Err(SimError::Geometry(format!(
                        "{name} position {p:?} violates {WALL_CLEARANCE_M} m wall clearance"
                    )));
                }
            }
        }
        if !self.dry_room && !(0.05..=5.0).contains(&self.rt60_s) {
            return Err(SimError::Geometry(format!("rt60 {} s out of range", self.rt60_s)));
        }
        if let Some(snr) = self.snr_db {
            if !snr.is_finite() {
                return Err(SimError::Argument(format!("snr {snr} not finite")));
            }
        }
        if !(0.0 < self.cutoff_hz && self.cutoff_hz < SAMPLE_RATE as f64 / 2.0) {
            return Err(SimError::Argument(format!("cutoff {} Hz out of range", self.cutoff_hz)));
        }
        Ok(())
    }
}

/// Simulated room impulse response at 16 kHz. Taps are scaled and shifted
/// so the direct path arrives at the start with unit gain, keeping clean
/// and degraded signals time-aligned.
#[derive(Debug, Clone)]
pub struct Rir {
    pub taps: Vec<f64>,
    pub rt60_target_s: f64,
    pub rt60_measured_s: Option<f64>,
}

impl Rir {
    pub fn unit_impulse() -> Self {
        Rir {
            taps: vec![1.0],
            rt60_target_s: 0.0,
            rt60_measured_s: None,
        }
    }
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        x.sin() / x
    }
}

/// Uniform wall absorption that realizes `rt60` in this room, from
/// Eyring's formula.
fn eyring_exponent(room_dims: [f64; 3], rt60: f64) -> f64 {
    let [l, w, h] = room_dims;
    let volume = l * w * h;
    let surface = 2.0 * (l * w + l * h + w * h);
    0.161 * volume / (surface * rt60)
}

/// Shoebox image-source RIR (Allen-Berkley with windowed-sinc fractional
/// delays), truncated where the backward-integrated energy falls 75 dB
/// below the total. The uniform-wall image model decays noticeably
/// slower than Eyring's formula predicts (axial image chains dominate
/// the late tail), so the absorption is calibrated against the measured
/// Schroeder RT60 in a short fixed-point loop.
pub fn gen_rir(spec: &DistortionSpec) -> Result<Rir, SimError> {
    spec.validate()?;
    let target = spec.rt60_s;
    // k = -ln(1 - absorption); Eyring gives the starting point.
    let mut k = if spec.dry_room {
        -(1.0f64 - 0.99).ln()
    } else {
        eyring_exponent(spec.room_dims, target)
    };
    let mut taps = Vec::new();
    let mut measured = None;
    for iter in 0..4 {
        let beta = (-k).exp().sqrt();
        taps = ism_taps(spec, beta);
        truncate_to_decay(&mut taps)?;
        measured = rt60_schroeder(&taps, SAMPLE_RATE).ok();
        if spec.dry_room {
            break;
        }
        match measured {
            Some(rt) if (rt - target).abs() > 0.08 * target && iter < 3 => {
                // Decay time scales inversely with k for the dominant
                // image chains.
                k *= rt / target;
            }
            _ => break,
        }
    }
    Ok(Rir {
        taps,
        rt60_target_s: if spec.dry_room { 0.0 } else { target },
        rt60_measured_s: measured,
    })
}

/// One image-source pass at a fixed wall reflection coefficient. Taps
/// are shifted and scaled so the direct path lands at the start with
/// unit gain.
fn ism_taps(spec: &DistortionSpec, beta: f64) -> Vec<f64> {
    let fs = SAMPLE_RATE as f64;
    let cts = SPEED_OF_SOUND / fs; // meters per sample
    let room: Vec<f64> = spec.room_dims.iter().map(|d| d / cts).collect();
    let src: Vec<f64> = spec.src_pos.iter().map(|d| d / cts).collect();
    let mic: Vec<f64> = spec.mic_pos.iter().map(|d| d / cts).collect();
    let direct_dist = ((src[0] - mic[0]).powi(2)
        + (src[1] - mic[1]).powi(2)
        + (src[2] - mic[2]).powi(2))
    .sqrt();

    let tw = (2.0 * (0.004 * fs).round()) as usize; // 8 ms FIR for fractional delays
    // Long enough to cover the decay down to -75 dB after calibration.
    let decay_s = if spec.dry_room { 0.1 } else { 1.5 * spec.rt60_s };
    let n_samples = (decay_s * fs).ceil() as usize + tw;
    let direct_shift = direct_dist.floor() as i64;
    let direct_gain = 4.0 * PI * direct_dist * cts;

    let mut taps = vec![0.0f64; n_samples];
    let n1 = (n_samples as f64 / (2.0 * room[0])).ceil() as i64;
    let n2 = (n_samples as f64 / (2.0 * room[1])).ceil() as i64;
    let n3 = (n_samples as f64 / (2.0 * room[2])).ceil() as i64;
    for mx in -n1..=n1 {
        for my in -n2..=n2 {
            for mz in -n3..=n3 {
                let rm = [
                    2.0 * mx as f64 * room[0],
                    2.0 * my as f64 * room[1],
                    2.0 * mz as f64 * room[2],
                ];
                for q in 0..=1i64 {
                    for j in 0..=1i64 {
                        for k in 0..=1i64 {
                            let dx = (1 - 2 * q) as f64 * src[0] - mic[0] + rm[0];
                            let dy = (1 - 2 * j) as f64 * src[1] - mic[1] + rm[1];
                            let dz = (1 - 2 * k) as f64 * src[2] - mic[2] + rm[2];
                            let refl_count = (mx - q).abs()
                                + mx.abs()
                                + (my - j).abs()
                                + my.abs()
                                + (mz - k).abs()
                                + mz.abs();
                            let dist = (dx * dx + dy * dy + dz * dz).sqrt();
                            let fdist = dist.floor();
                            if (fdist as i64 - direct_shift) >= n_samples as i64 {
                                continue;
                            }
                            let gain = beta.powi(refl_count as i32) / (4.0 * PI * dist * cts)
                                * direct_gain;
                            // Far-field images more than 120 dB below the
                            // direct path are inaudible and pruned.
                            if gain.abs() < 1e-6 {
                                continue;
                            }
                            let start = fdist as i64 - (tw as i64 / 2 - 1) - direct_shift;
                            let frac = dist - fdist;
                            for n in 0..tw {
                                let idx = start + n as i64;
                                if idx < 0 || idx >= n_samples as i64 {
                                    continue;
                                }
                                let t = (n as f64 - 0.5 * tw as f64 + 1.0) - frac;
                                let lp = 0.5 * (1.0 + (2.0 * PI * t / tw as f64).cos())
                                    * sinc(PI * t);
                                taps[idx as usize] += gain * lp;
                            }
                        }
                    }
                }
            }
        }
    }

    taps
}

/// Truncates a RIR where the backward-integrated energy falls 75 dB
/// below the total.
fn truncate_to_decay(taps: &mut Vec<f64>) -> Result<(), SimError> {
    let mut edc = vec![0.0f64; taps.len()];
    let mut acc = 0.0;
    for (i, &t) in taps.iter().enumerate().rev() {
        acc += t * t;
        edc[i] = acc;
    }
    let total = edc[0];
    if total <= 0.0 {
        return Err(SimError::Geometry("empty impulse response".into()));
    }
    let cut = edc
        .iter()
        .position(|&e| e / total < 10f64.powf(-7.5))
        .unwrap_or(taps.len());
    taps.truncate(cut.max(1));
    Ok(())
}

/// FFT-based full convolution, trimmed to `len` samples.
fn convolve_trim(x: &[f64], h: &[f64], len: usize) -> Vec<f64> {
    let full = x.len() + h.len() - 1;
    let n = full.next_power_of_two();
    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(n);
    let ifft = planner.plan_fft_inverse(n);
    let mut a: Vec<Complex<f64>> = x
        .iter()
        .map(|&v| Complex::new(v, 0.0))
        .chain(std::iter::repeat(Complex::new(0.0, 0.0)))
        .take(n)
        .collect();
    let mut b: Vec<Complex<f64>> = h
        .iter()
        .map(|&v| Complex::new(v, 0.0))
        .chain(std::iter::repeat(Complex::new(0.0, 0.0)))
        .take(n)
        .collect();
    fft.process(&mut a);
    fft.process(&mut b);
    for (av, bv) in a.iter_mut().zip(&b) {
        *av *= bv;
    }
    ifft.process(&mut a);
    a.iter().take(len).map(|c| c.re / n as f64).collect()
}

/// Convolves a waveform with a room impulse response, trims to the input
/// length, and peak-normalizes only if the result exceeds full scale.
/// Returns the applied normalization gain (1.0 when untouched).
pub fn apply_rir_with_gain(x: &Waveform, r: &Rir) -> Result<(Waveform, f64), SimError> {
    if r.taps.is_empty() {
        return Err(SimError::Argument("empty impulse response".into()));
    }
    let mut y = convolve_trim(&x.samples, &r.taps, x.len());
    let peak = y.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let gain = if peak > 1.0 { 1.0 / peak } else { 1.0 };
    if gain != 1.0 {
        for v in y.iter_mut() {
            *v *= gain;
        }
    }
    let mut out = Waveform::new(y, x.id.clone());
    out.sample_rate = x.sample_rate;
    Ok((out, gain))
}

pub fn apply_rir(x: &Waveform, r: &Rir) -> Result<Waveform, SimError> {
    apply_rir_with_gain(x, r).map(|(w, _)| w)
}

/// Mixes noise into clean speech at the requested active-speech-level SNR.
/// The noise is cropped at `offset` (tiled first if shorter than the
/// clean signal). Returns the mixture and the applied noise gain.
pub fn mix_at_snr(
    clean: &Waveform,
    noise: &Waveform,
    snr_db: f64,
    offset: usize,
) -> Result<(Waveform, f64), SimError> {
    let p_clean = active_speech_power(&clean.samples)
        .ok_or_else(|| SimError::Energy("clean signal is silent".into()))?;
    if noise.is_empty() || noise.energy() == 0.0 {
        return Err(SimError::Energy("noise signal is silent".into()));
    }
    let crop = crop_noise(&noise.samples, clean.len(), offset);
    let p_noise = crop.iter().map(|x| x * x).sum::<f64>() / crop.len() as f64;
    if p_noise == 0.0 {
        return Err(SimError::Energy("noise crop is silent".into()));
    }
    let gain = (p_clean / p_noise).sqrt() * 10f64.powf(-snr_db / 20.0);
    let mixture = Waveform::new(
        clean
            .samples
            .iter()
            .zip(&crop)
            .map(|(c, n)| c + gain * n)
            .collect(),
        clean.id.clone(),
    );
    Ok((mixture, gain))
}

fn crop_noise(noise: &[f64], len: usize, offset: usize) -> Vec<f64> {
    (0..len)
        .map(|i| noise[(offset + i) % noise.len()])
        .collect()
}

/// Intermediate signals of one degradation, kept for verification.
#[derive(Debug, Clone)]
pub struct DegradeOutput {
    pub degraded: Waveform,
    /// Reverberated and low-pass-filtered speech component of the output.
    pub speech_path: Waveform,
    /// Reverberated speech before the low-pass stage.
    pub reverberant: Waveform,
    pub noise_gain: Option<f64>,
    pub rir: Rir,
    pub spec: DistortionSpec,
}

/// Composes reverberation, noise mixing, and low-pass filtering:
/// y = h(x * r) + n', with the SNR set on the components as they appear
/// in the output so the achieved SNR is exact.
pub fn degrade(
    clean: &Waveform,
    noise: Option<&Waveform>,
    spec: &DistortionSpec,
) -> Result<DegradeOutput, SimError> {
    spec.validate()?;
    let rir = gen_rir(spec)?;
    let (reverberant, _g) = apply_rir_with_gain(clean, &rir)?;
    let speech_path = lowpass(
        &reverberant,
        spec.filter_family,
        spec.filter_order,
        spec.cutoff_hz,
    )?;
    let (degraded, noise_gain) = match (noise, spec.snr_db) {
        (Some(noise), Some(snr)) => {
            let crop = Waveform::new(
                crop_noise(&noise.samples, clean.len(), spec.noise_offset),
                noise.id.clone(),
            );
            let noise_component = if spec.noise_post_filter {
                crop
            } else {
                lowpass(&crop, spec.filter_family, spec.filter_order, spec.cutoff_hz)?
            };
            let (mix, gain) = mix_at_snr(&speech_path, &noise_component, snr, 0)?;
            (mix, Some(gain))
        }
        (None, None) => (speech_path.clone(), None),
        (None, Some(_)) => {
            return Err(SimError::Argument(
                "spec requests an SNR but no noise signal was provided".into(),
            ))
        }
        (Some(_), None) => (speech_path.clone(), None),
    };
    let mut degraded = degraded;
    degraded.id = clean.id.clone();
    Ok(DegradeOutput {
        degraded,
        speech_path,
        reverberant,
        noise_gain,
        rir,
        spec: spec.clone(),
    })
}

// ---------------------------------------------------------------------------
// Verification
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Check {
    pub measured: f64,
    pub expected: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VerificationReport {
    pub utterance: String,
    /// SNR check against the requested value (0.1 dB tolerance); absent
    /// when the spec disables noise.
    pub snr: Option<Check>,
    /// Set when the residual against the recomputed speech path is
    /// numerically zero (degraded == speech path).
    pub snr_infinite: bool,
    /// RT60 check (+-20%); absent for dry rooms.
    pub rt60: Option<Check>,
    /// -3 dB bandwidth check (+-10%).
    pub bandwidth: Check,
}

impl VerificationReport {
    pub fn pass(&self) -> bool {
        self.snr.as_ref().map(|c| c.pass).unwrap_or(true)
            && self.rt60.as_ref().map(|c| c.pass).unwrap_or(true)
            && self.bandwidth.pass
    }
}

pub const SNR_TOLERANCE_DB: f64 = 0.1;
pub const RT60_TOLERANCE_REL: f64 = 0.2;
pub const BANDWIDTH_TOLERANCE_REL: f64 = 0.1;

/// Checks a degraded file against its spec by deterministically
/// recomputing the degradation pipeline from the clean signal.
pub fn verify_degradation(
    clean: &Waveform,
    degraded: &Waveform,
    noise: Option<&Waveform>,
    spec: &DistortionSpec,
) -> Result<VerificationReport, SimError> {
    if clean.len() != degraded.len() {
        return Err(SimError::Argument(format!(
            "paired lengths differ: {} vs {}",
            clean.len(),
            degraded.len()
        )));
    }
    let recomputed = degrade(clean, noise, spec)?;
    let speech = &recomputed.speech_path;
    let p_speech = active_speech_power(&speech.samples)
        .ok_or_else(|| SimError::Energy("speech path is silent".into()))?;
    let res_power = degraded
        .samples
        .iter()
        .zip(&speech.samples)
        .map(|(d, s)| (d - s) * (d - s))
        .sum::<f64>()
        / degraded.len() as f64;
    let snr_infinite = res_power <= p_speech * 1e-10;
    let snr = match spec.snr_db {
        Some(req) if !snr_infinite => {
            let measured = 10.0 * (p_speech / res_power).log10();
            Some(Check {
                measured,
                expected: req,
                pass: (measured - req).abs() <= SNR_TOLERANCE_DB,
            })
        }
        _ => None,
    };
    let rt60 = if spec.dry_room {
        None
    } else {
        let measured = recomputed.rir.rt60_measured_s.unwrap_or(f64::NAN);
        Some(Check {
            measured,
            expected: spec.rt60_s,
            pass: (measured - spec.rt60_s).abs() <= RT60_TOLERANCE_REL * spec.rt60_s,
        })
    };
    // Bandwidth of the filtered speech path relative to its unfiltered
    // input isolates |h|^2 regardless of the noise floor.
    let bw = bandwidth_3db(speech, &recomputed.reverberant)
        .map_err(|e| SimError::Argument(e.to_string()))?;
    let bandwidth = Check {
        measured: bw,
        expected: spec.cutoff_hz,
        pass: (bw - spec.cutoff_hz).abs() <= BANDWIDTH_TOLERANCE_REL * spec.cutoff_hz,
    };
    Ok(VerificationReport {
        utterance: clean.id.clone(),
        snr,
        snr_infinite,
        rt60,
        bandwidth,
    })
}

// ---------------------------------------------------------------------------
// Corpus generation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub clean_path: String,
    pub degraded_path: String,
    pub noise_path: Option<String>,
    pub split: String,
    pub spec: DistortionSpec,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    /// Text file listing clean WAV paths, one per line.
    pub clean_manifest: PathBuf,
    /// Text file listing noise WAV paths, one per line.
    pub noise_manifest: PathBuf,
    pub out_dir: PathBuf,
    pub count: usize,
    pub seed: u64,
    #[serde(default = "default_snr_range")]
    pub snr_range: (f64, f64),
    #[serde(default = "default_rt60_range")]
    pub rt60_range: (f64, f64),
    #[serde(default = "default_cutoff_range")]
    pub cutoff_range: (f64, f64),
    #[serde(default)]
    pub noise_post_filter: bool,
}

fn default_snr_range() -> (f64, f64) {
    (0.0, 20.0)
}
fn default_rt60_range() -> (f64, f64) {
    (0.3, 0.9)
}
fn default_cutoff_range() -> (f64, f64) {
    (2000.0, 4000.0)
}

const FAMILIES: [FilterFamily; 4] = [
    FilterFamily::Butterworth,
    FilterFamily::Bessel,
    FilterFamily::Chebyshev1,
    FilterFamily::Elliptic,
];

/// Validation speakers held out of the training split.
pub const VALIDATION_SPEAKERS: [&str; 2] = ["p258", "p287"];

fn read_path_list(path: &Path) -> Result<Vec<PathBuf>, SimError> {
    let file = std::fs::File::open(path).map_err(|e| {
        SimError::Corpus(format!("cannot open manifest {}: {e}", path.display()))
    })?;
    let mut out = Vec::new();
    for line in std::io::BufReader::new(file).lines() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        out.push(PathBuf::from(line));
    }
    Ok(out)
}

fn sample_position(rng: &mut impl Rng, dims: [f64; 3]) -> [f64; 3] {
    let margin = WALL_CLEARANCE_M + 0.05;
    [
        rng.gen_range(margin..dims[0] - margin),
        rng.gen_range(margin..dims[1] - margin),
        rng.gen_range(margin..dims[2] - margin),
    ]
}

/// Draws one distortion spec from the configured ranges. All randomness
/// comes from the per-utterance generator.
pub fn sample_spec(rng: &mut impl Rng, cfg: &CorpusConfig, seed: u64) -> DistortionSpec {
    let dims = [
        rng.gen_range(5.0..10.0),
        rng.gen_range(5.0..10.0),
        rng.gen_range(2.0..6.0),
    ];
    let src = sample_position(rng, dims);
    let mic = loop {
        let m = sample_position(rng, dims);
        let d2: f64 = m
            .iter()
            .zip(&src)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        if d2.sqrt() >= 0.5 {
            break m;
        }
    };
    let family = FAMILIES[rng.gen_range(0..FAMILIES.len())];
    DistortionSpec {
        snr_db: Some(rng.gen_range(cfg.snr_range.0..=cfg.snr_range.1)),
        room_dims: dims,
        rt60_s: rng.gen_range(cfg.rt60_range.0..=cfg.rt60_range.1),
        dry_room: false,
        src_pos: src,
        mic_pos: mic,
        filter_family: family,
        filter_order: family.default_order(),
        cutoff_hz: rng.gen_range(cfg.cutoff_range.0..=cfg.cutoff_range.1),
        noise_offset: rng.gen_range(0..1_000_000),
        noise_post_filter: cfg.noise_post_filter,
        rng_seed: seed,
    }
}

fn speaker_split(stem: &str) -> &'static str {
    if VALIDATION_SPEAKERS.iter().any(|s| stem.starts_with(s)) {
        "validation"
    } else {
        "train"
    }
}

/// Generates `count` degraded/clean pairs under `out_dir` and writes a
/// JSONL manifest. Unreadable manifest entries are skipped with a logged
/// warning; identical seeds reproduce identical trees.
pub fn build_corpus(cfg: &CorpusConfig) -> Result<Vec<ManifestEntry>, SimError> {
    let clean_list = usable_wavs(&read_path_list(&cfg.clean_manifest)?);
    let noise_list = usable_wavs(&read_path_list(&cfg.noise_manifest)?);
    std::fs::create_dir_all(cfg.out_dir.join("clean"))?;
    std::fs::create_dir_all(cfg.out_dir.join("degraded"))?;
    if cfg.count > 0 && (clean_list.is_empty() || noise_list.is_empty()) {
        return Err(SimError::Corpus(
            "no readable clean or noise files in the manifests".into(),
        ));
    }

    let results: Vec<Result<ManifestEntry, SimError>> = (0..cfg.count)
        .into_par_iter()
        .map(|i| build_one(cfg, &clean_list, &noise_list, i))
        .collect();
    let mut entries = Vec::with_capacity(cfg.count);
    for r in results {
        entries.push(r?);
    }
    if cfg.count > 0 && entries.is_empty() {
        return Err(SimError::Corpus("corpus generation produced no pairs".into()));
    }
    write_manifest(&cfg.out_dir.join("manifest.jsonl"), &entries)?;
    Ok(entries)
}

fn usable_wavs(paths: &[PathBuf]) -> Vec<PathBuf> {
    paths
        .iter()
        .filter(|p| match read_wav(p) {
            Ok(_) => true,
            Err(e) => {
                log::warn!("skipping unreadable manifest entry {}: {e}", p.display());
                false
            }
        })
        .cloned()
        .collect()
}

fn build_one(
    cfg: &CorpusConfig,
    clean_list: &[PathBuf],
    noise_list: &[PathBuf],
    index: usize,
) -> Result<ManifestEntry, SimError> {
    let seed = cfg.seed ^ index as u64;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let clean_path = &clean_list[rng.gen_range(0..clean_list.len())];
    let noise_path = &noise_list[rng.gen_range(0..noise_list.len())];
    let clean = read_wav(clean_path)?;
    let noise = read_wav(noise_path)?;
    let spec = sample_spec(&mut rng, cfg, seed);
    let out = degrade(&clean, Some(&noise), &spec)?;

    let stem = clean_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let name = format!("{index:05}_{stem}.wav");
    let clean_out = cfg.out_dir.join("clean").join(&name);
    let degraded_out = cfg.out_dir.join("degraded").join(&name);
    write_wav(&clean_out, &clean)?;
    write_wav(&degraded_out, &out.degraded)?;
    Ok(ManifestEntry {
        clean_path: clean_out.display().to_string(),
        degraded_path: degraded_out.display().to_string(),
        noise_path: Some(noise_path.display().to_string()),
        split: speaker_split(&stem).to_string(),
        spec,
    })
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<(), SimError> {
    let mut file = std::fs::File::create(path)?;
    for e in entries {
        let line = serde_json::to_string(e).map_err(|e| SimError::Manifest(e.to_string()))?;
        writeln!(file, "{line}")?;
    }
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>, SimError> {
    let file = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry = serde_json::from_str(&line)
            .map_err(|e| SimError::Manifest(format!("line {}: {e}", i + 1)))?;
        out.push(entry);
    }
    Ok(out)
}
