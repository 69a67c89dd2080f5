//! Training: spectral loss stack, AdamW, and a deterministic, resumable
//! loop.
//!
//! Every random choice in a step (batch items, crop offsets) is drawn
//! from a generator seeded by (run seed, step index), so interrupting and
//! resuming from a checkpoint reproduces the exact same parameter
//! trajectory.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use ndarray::{ArrayD, IxDyn};
use rand::prelude::*;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::{Tape, Var};
use crate::model::{load_checkpoint, save_checkpoint, Model, ModelError, OptState, Variant};
use crate::signal::{self, StftConfig, Waveform};

#[derive(Error, Debug)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Signal(#[from] crate::signal::SignalError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("data error: {0}")]
    Data(String),
    #[error("numeric error: {0}")]
    Numeric(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub magnitude: f64,
    pub complex: f64,
    pub phase: f64,
    pub time: f64,
    pub consistency: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            magnitude: 0.9,
            complex: 0.1,
            phase: 0.3,
            time: 0.2,
            consistency: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: u64,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_segment")]
    pub segment_seconds: f64,
    #[serde(default)]
    pub weights: LossWeights,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_ckpt_every")]
    pub checkpoint_every: u64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_grad_clip")]
    pub grad_clip: f64,
    /// Linear learning-rate ramp from 0 over this many steps.
    #[serde(default)]
    pub warmup_steps: u64,
    /// Linear decay target after warmup; `None` holds `lr` constant.
    #[serde(default)]
    pub lr_final: Option<f64>,
}

fn default_lr() -> f64 {
    5e-4
}
fn default_batch() -> usize {
    2
}
fn default_segment() -> f64 {
    2.0
}
fn default_ckpt_every() -> u64 {
    100
}
fn default_weight_decay() -> f64 {
    0.01
}
fn default_grad_clip() -> f64 {
    5.0
}

impl TrainConfig {
    pub fn quick(steps: u64) -> Self {
        TrainConfig {
            steps,
            lr: default_lr(),
            batch_size: default_batch(),
            segment_seconds: default_segment(),
            weights: LossWeights::default(),
            seed: 0,
            checkpoint_every: default_ckpt_every(),
            weight_decay: default_weight_decay(),
            grad_clip: default_grad_clip(),
            warmup_steps: 0,
            lr_final: None,
        }
    }

    /// Learning rate at a given step: linear warmup, then constant or
    /// linear decay towards `lr_final` at the last step. A pure function
    /// of the step index so interrupted runs resume on the same schedule.
    pub fn lr_at(&self, step: u64) -> f64 {
        if step < self.warmup_steps {
            return self.lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        match self.lr_final {
            Some(end) if self.steps > self.warmup_steps + 1 => {
                let span = (self.steps - 1 - self.warmup_steps) as f64;
                let frac = (step - self.warmup_steps) as f64 / span;
                self.lr + (end - self.lr) * frac.min(1.0)
            }
            _ => self.lr,
        }
    }
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

/// Maps any angle to its principal value in (-pi, pi] differentiably.
/// Periodic by construction, so phase losses never punish 2*pi wraps.
pub fn principal_angle(tape: &mut Tape, d: Var) -> Var {
    let s = tape.sin(d);
    let c = tape.cos(d);
    tape.atan2(s, c)
}

fn mse(tape: &mut Tape, a: Var, b: Var) -> Var {
    let d = tape.sub(a, b);
    let sq = tape.mul(d, d);
    tape.mean_all(sq)
}

/// Mean absolute error; the time-domain loss term.
pub fn l1(tape: &mut Tape, a: Var, b: Var) -> Var {
    let d = tape.sub(a, b);
    let ad = tape.abs(d);
    tape.mean_all(ad)
}

/// Difference along the given axis (for group delay and instantaneous
/// frequency views of a phase spectrogram).
fn diff_axis(tape: &mut Tape, x: Var, axis: usize) -> Var {
    let n = tape.value(x).shape()[axis];
    let hi = tape.slice_axis(x, axis, 1, n);
    let lo = tape.slice_axis(x, axis, 0, n - 1);
    tape.sub(hi, lo)
}

fn antiwrap_term(tape: &mut Tape, pred: Var, target: Var) -> Var {
    let d = tape.sub(pred, target);
    let p = principal_angle(tape, d);
    let a = tape.abs(p);
    tape.mean_all(a)
}

/// Anti-wrapping phase loss over the raw angle difference, the frequency
/// difference (group delay) and the time difference (instantaneous
/// frequency), each passed through the principal-angle kernel.
pub fn phase_loss(tape: &mut Tape, pred: Var, target: Var) -> Var {
    let ip = antiwrap_term(tape, pred, target);
    let pred_gd = diff_axis(tape, pred, 2);
    let tgt_gd = diff_axis(tape, target, 2);
    let gd = antiwrap_term(tape, pred_gd, tgt_gd);
    let pred_if = diff_axis(tape, pred, 1);
    let tgt_if = diff_axis(tape, target, 1);
    let iaf = antiwrap_term(tape, pred_if, tgt_if);
    let s = tape.add(ip, gd);
    tape.add(s, iaf)
}

pub struct LossTerms {
    pub total: Var,
    pub magnitude: Var,
    pub complex: Var,
    pub phase: Var,
    pub time: Var,
    pub consistency: Var,
}

/// Full restoration loss. Magnitudes are in the compressed domain,
/// shaped [B, T, F]; `target_time` is [B, N] raw samples.
#[allow(clippy::too_many_arguments)]
pub fn restoration_loss(
    tape: &mut Tape,
    pred_mag: Var,
    pred_phase: Var,
    target_mag: Var,
    target_phase: Var,
    target_time: Var,
    stft_cfg: &StftConfig,
    weights: &LossWeights,
) -> LossTerms {
    let shape = tape.value(pred_mag).shape().to_vec();
    let (b, t, f) = (shape[0], shape[1], shape[2]);
    let n = tape.value(target_time).shape()[1];

    let l_mag = mse(tape, pred_mag, target_mag);

    // Complex loss in the compressed domain.
    let pc = tape.cos(pred_phase);
    let ps = tape.sin(pred_phase);
    let pre = tape.mul(pred_mag, pc);
    let pim = tape.mul(pred_mag, ps);
    let tc = tape.cos(target_phase);
    let ts = tape.sin(target_phase);
    let tre = tape.mul(target_mag, tc);
    let tim = tape.mul(target_mag, ts);
    let lre = mse(tape, pre, tre);
    let lim = mse(tape, pim, tim);
    let l_complex = tape.add(lre, lim);

    let l_phase = phase_loss(tape, pred_phase, target_phase);

    // Time and consistency losses need the synthesized waveform. The
    // fused magnitude can dip below zero only through a learnable fusion
    // scale; clamp before decompression.
    let mut l_time = tape.scalar(0.0);
    let mut l_cons = tape.scalar(0.0);
    // Synthesis is the expensive part of the graph; skip it entirely
    // when neither waveform-domain term carries weight.
    let want_synthesis = weights.time != 0.0 || weights.consistency != 0.0;
    let mag_pos = tape.relu(pred_mag);
    let mag_lin = tape.powf(mag_pos, 1.0 / stft_cfg.compress_exponent);
    let lre2 = tape.mul(mag_lin, pc);
    let lim2 = tape.mul(mag_lin, ps);
    for i in 0..b {
        if !want_synthesis {
            break;
        }
        let re_i = tape.slice_axis(lre2, 0, i, i + 1);
        let im_i = tape.slice_axis(lim2, 0, i, i + 1);
        let re_i = tape.reshape(re_i, &[1, t, f]);
        let im_i = tape.reshape(im_i, &[1, t, f]);
        let spec = tape.concat(&[re_i, im_i], 0);
        let wave = tape.istft(spec, stft_cfg, n);
        let tgt_i = tape.slice_axis(target_time, 0, i, i + 1);
        let tgt_i = tape.reshape(tgt_i, &[n]);
        let li = l1(tape, wave, tgt_i);
        l_time = tape.add(l_time, li);
        // Re-analysis of the synthesized waveform must reproduce the
        // predicted spectrum.
        let re_spec = tape.stft(wave, stft_cfg);
        let ci = mse(tape, re_spec, spec);
        l_cons = tape.add(l_cons, ci);
    }
    let l_time = tape.scale(l_time, 1.0 / b as f64);
    let l_cons = tape.scale(l_cons, 1.0 / b as f64);

    let mut total = tape.scale(l_mag, weights.magnitude);
    let wc = tape.scale(l_complex, weights.complex);
    total = tape.add(total, wc);
    let wp = tape.scale(l_phase, weights.phase);
    total = tape.add(total, wp);
    let wt = tape.scale(l_time, weights.time);
    total = tape.add(total, wt);
    let wcs = tape.scale(l_cons, weights.consistency);
    total = tape.add(total, wcs);

    LossTerms {
        total,
        magnitude: l_mag,
        complex: l_complex,
        phase: l_phase,
        time: l_time,
        consistency: l_cons,
    }
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Global L2 norm of a gradient list.
pub fn grad_norm(grads: &[ArrayD<f64>]) -> f64 {
    grads
        .iter()
        .map(|g| g.iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

/// One decoupled-weight-decay Adam step with global-norm clipping.
/// Parameter order must match the optimizer state.
pub fn adamw_step(
    model: &mut Model,
    grads: &mut [ArrayD<f64>],
    state: &mut OptState,
    lr: f64,
    weight_decay: f64,
    grad_clip: f64,
) {
    let norm = grad_norm(grads);
    if norm > grad_clip && norm > 0.0 {
        let s = grad_clip / norm;
        for g in grads.iter_mut() {
            g.mapv_inplace(|v| v * s);
        }
    }
    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - ADAM_BETA1.powf(t);
    let bc2 = 1.0 - ADAM_BETA2.powf(t);
    for (i, (_, p)) in model.params.iter_mut().enumerate() {
        let g = &grads[i];
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        azip(m, g, |mv, gv| *mv = ADAM_BETA1 * *mv + (1.0 - ADAM_BETA1) * gv);
        azip(v, g, |vv, gv| *vv = ADAM_BETA2 * *vv + (1.0 - ADAM_BETA2) * gv * gv);
        for ((pv, mv), vv) in p.iter_mut().zip(m.iter()).zip(v.iter()) {
            let mhat = mv / bc1;
            let vhat = vv / bc2;
            *pv -= lr * (mhat / (vhat.sqrt() + ADAM_EPS) + weight_decay * *pv);
        }
    }
}

fn azip(a: &mut ArrayD<f64>, b: &ArrayD<f64>, f: impl Fn(&mut f64, f64)) {
    for (av, &bv) in a.iter_mut().zip(b.iter()) {
        f(av, bv);
    }
}

pub fn zero_opt_state(model: &Model) -> OptState {
    OptState {
        step: 0,
        m: model.params.iter().map(|(_, v)| ArrayD::zeros(v.raw_dim())).collect(),
        v: model.params.iter().map(|(_, v)| ArrayD::zeros(v.raw_dim())).collect(),
    }
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct TrainItem {
    pub degraded: Waveform,
    pub clean: Waveform,
}

#[derive(Debug, Clone, Serialize)]
pub struct StepStats {
    pub step: u64,
    pub lr: f64,
    pub total: f64,
    pub magnitude: f64,
    pub complex: f64,
    pub phase: f64,
    pub time: f64,
    pub consistency: f64,
    pub grad_norm: f64,
    pub alpha: Option<f64>,
}

impl StepStats {
    pub fn log_line(&self) -> String {
        let alpha = self
            .alpha
            .map(|a| format!(" alpha={a:.6}"))
            .unwrap_or_default();
        format!(
            "step={} lr={:.6} loss={:.6} mag={:.6} complex={:.6} phase={:.6} time={:.6} cons={:.6} grad_norm={:.6}{}",
            self.step,
            self.lr,
            self.total,
            self.magnitude,
            self.complex,
            self.phase,
            self.time,
            self.consistency,
            self.grad_norm,
            alpha
        )
    }
}

pub struct TrainSummary {
    pub steps_run: u64,
    pub final_loss: Option<f64>,
    pub checkpoint: PathBuf,
    pub log: PathBuf,
}

/// Generator for all randomness of one step: batch choice and crops.
fn step_rng(seed: u64, step: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(step + 1);
    rng
}

fn crop(samples: &[f64], start: usize, len: usize) -> Vec<f64> {
    (0..len)
        .map(|i| samples.get(start + i).copied().unwrap_or(0.0))
        .collect()
}

struct Batch {
    mag_deg: ArrayD<f64>,
    phase_deg: ArrayD<f64>,
    mag_clean: ArrayD<f64>,
    phase_clean: ArrayD<f64>,
    time_clean: ArrayD<f64>,
}

fn make_batch(
    items: &[TrainItem],
    rng: &mut ChaCha20Rng,
    batch_size: usize,
    seg: usize,
    stft_cfg: &StftConfig,
) -> Result<Batch, TrainError> {
    let t = stft_cfg.frames_for_len(seg);
    let f = stft_cfg.bins();
    let mut mag_deg = ArrayD::zeros(IxDyn(&[batch_size, t, f]));
    let mut phase_deg = ArrayD::zeros(IxDyn(&[batch_size, t, f]));
    let mut mag_clean = ArrayD::zeros(IxDyn(&[batch_size, t, f]));
    let mut phase_clean = ArrayD::zeros(IxDyn(&[batch_size, t, f]));
    let mut time_clean = ArrayD::zeros(IxDyn(&[batch_size, seg]));
    for b in 0..batch_size {
        let idx = rng.gen_range(0..items.len());
        let item = &items[idx];
        if item.degraded.len() != item.clean.len() {
            return Err(TrainError::Data(format!(
                "pair {} has mismatched lengths",
                item.clean.id
            )));
        }
        let max_start = item.clean.len().saturating_sub(seg);
        let start = if max_start > 0 {
            rng.gen_range(0..=max_start)
        } else {
            0
        };
        let deg = Waveform::new(crop(&item.degraded.samples, start, seg), "d");
        let cln = Waveform::new(crop(&item.clean.samples, start, seg), "c");
        let dspec = signal::stft(&deg, stft_cfg)?;
        let cspec = signal::stft(&cln, stft_cfg)?;
        for ti in 0..t {
            for fi in 0..f {
                mag_deg[[b, ti, fi]] = dspec.magnitude[[ti, fi]];
                phase_deg[[b, ti, fi]] = dspec.phase[[ti, fi]];
                mag_clean[[b, ti, fi]] = cspec.magnitude[[ti, fi]];
                phase_clean[[b, ti, fi]] = cspec.phase[[ti, fi]];
            }
        }
        for (i, &v) in cln.samples.iter().enumerate() {
            time_clean[[b, i]] = v;
        }
    }
    Ok(Batch {
        mag_deg,
        phase_deg,
        mag_clean,
        phase_clean,
        time_clean,
    })
}

/// Runs (or resumes) training. The checkpoint lives at
/// `workdir/checkpoint.dmck`, the append-only log at `workdir/train.log`.
/// For a fixed seed the trajectory is bit-identical whether or not the
/// run was interrupted at a checkpoint boundary.
pub fn train(
    model: &mut Model,
    items: &[TrainItem],
    cfg: &TrainConfig,
    workdir: &Path,
    resume: bool,
) -> Result<TrainSummary, TrainError> {
    if items.is_empty() {
        return Err(TrainError::Data("no training pairs".into()));
    }
    std::fs::create_dir_all(workdir)?;
    let ckpt_path = workdir.join("checkpoint.dmck");
    let log_path = workdir.join("train.log");
    let stft_cfg = model.cfg.stft_config()?;
    let seg = (cfg.segment_seconds * crate::SAMPLE_RATE as f64).round() as usize;
    if seg < stft_cfg.win_length {
        return Err(TrainError::Data(format!(
            "segment of {seg} samples is shorter than one analysis window"
        )));
    }

    let mut opt = zero_opt_state(model);
    let mut start_step = 0u64;
    let mut alpha_traj: Vec<f64> = Vec::new();
    if resume {
        if !ckpt_path.exists() {
            return Err(TrainError::Data(format!(
                "resume requested but {} does not exist",
                ckpt_path.display()
            )));
        }
        let ck = load_checkpoint(&ckpt_path, Some(&model.cfg))?;
        model.params = ck.model.params;
        start_step = ck.step;
        alpha_traj = ck.alpha_trajectory;
        if let Some(state) = ck.opt {
            opt = state;
        }
    }

    let mut log = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)?;
    let mut final_loss = None;
    for step in start_step..cfg.steps {
        let mut rng = step_rng(cfg.seed, step);
        let batch = make_batch(items, &mut rng, cfg.batch_size, seg, &stft_cfg)?;

        let mut tape = Tape::new();
        let bp = model.bind(&mut tape);
        let mag_in = tape.leaf(batch.mag_deg);
        let phase_in = tape.leaf(batch.phase_deg);
        let mag_tgt = tape.leaf(batch.mag_clean);
        let phase_tgt = tape.leaf(batch.phase_clean);
        let time_tgt = tape.leaf(batch.time_clean);
        let out = model.forward(&mut tape, &bp, mag_in, phase_in);
        let loss = restoration_loss(
            &mut tape,
            out.magnitude,
            out.phase,
            mag_tgt,
            phase_tgt,
            time_tgt,
            &stft_cfg,
            &cfg.weights,
        );
        let total = tape.value(loss.total)[IxDyn(&[])];
        if !total.is_finite() {
            let snap = workdir.join("nan_snapshot.dmck");
            save_checkpoint(&snap, model, step, &alpha_traj, Some(&opt))?;
            return Err(TrainError::Numeric(format!(
                "non-finite loss {total} at step {step}; state saved to {}",
                snap.display()
            )));
        }
        let grads_all = tape.backward(loss.total);
        let mut grads: Vec<ArrayD<f64>> = bp
            .order
            .iter()
            .map(|(_, v)| grads_all.wrt(&tape, *v))
            .collect();
        let gnorm = grad_norm(&grads);
        let lr = cfg.lr_at(step);
        adamw_step(model, &mut grads, &mut opt, lr, cfg.weight_decay, cfg.grad_clip);

        let alpha = if model.cfg.variant == Variant::Dm2 {
            let a = model.params.get("fuse.alpha")[IxDyn(&[])];
            alpha_traj.push(a);
            Some(a)
        } else {
            None
        };
        let stats = StepStats {
            step: step + 1,
            lr,
            total,
            magnitude: tape.value(loss.magnitude)[IxDyn(&[])],
            complex: tape.value(loss.complex)[IxDyn(&[])],
            phase: tape.value(loss.phase)[IxDyn(&[])],
            time: tape.value(loss.time)[IxDyn(&[])],
            consistency: tape.value(loss.consistency)[IxDyn(&[])],
            grad_norm: gnorm,
            alpha,
        };
        writeln!(log, "{}", stats.log_line())?;
        final_loss = Some(total);

        let done = step + 1;
        if done % cfg.checkpoint_every == 0 || done == cfg.steps {
            save_checkpoint(&ckpt_path, model, done, &alpha_traj, Some(&opt))?;
        }
    }
    if cfg.steps == start_step {
        // Nothing to run; still leave a valid checkpoint behind.
        save_checkpoint(&ckpt_path, model, start_step, &alpha_traj, Some(&opt))?;
    }
    Ok(TrainSummary {
        steps_run: cfg.steps.saturating_sub(start_step),
        final_loss,
        checkpoint: ckpt_path,
        log: log_path,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::signal::WindowKind;
    use ndarray::Array;
    use std::f64::consts::PI;

    fn tiny_stft() -> StftConfig {
        StftConfig::new(16, 4, 16, WindowKind::Hann, 0.3).unwrap()
    }

    fn rand_arr(seed: u64, shape: &[usize]) -> ArrayD<f64> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        Array::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-1.0..1.0))
    }

    fn rand_pos(seed: u64, shape: &[usize]) -> ArrayD<f64> {
        rand_arr(seed, shape).mapv(|v| v.abs())
    }

    fn loss_on(
        pred_mag: ArrayD<f64>,
        pred_phase: ArrayD<f64>,
        tgt_mag: ArrayD<f64>,
        tgt_phase: ArrayD<f64>,
        time: ArrayD<f64>,
        weights: &LossWeights,
    ) -> (Tape, Vec<Var>, LossTerms) {
        let cfg = tiny_stft();
        let mut tape = Tape::new();
        let pm = tape.leaf(pred_mag);
        let pp = tape.leaf(pred_phase);
        let tm = tape.leaf(tgt_mag);
        let tp = tape.leaf(tgt_phase);
        let tt = tape.leaf(time);
        let terms = restoration_loss(&mut tape, pm, pp, tm, tp, tt, &cfg, weights);
        (tape, vec![pm, pp, tm, tp, tt], terms)
    }

    /// Consistent (mag, phase, time) triple derived from a real signal.
    fn consistent_triple(seed: u64, n: usize) -> (ArrayD<f64>, ArrayD<f64>, ArrayD<f64>) {
        let cfg = tiny_stft();
        let x = rand_arr(seed, &[n]);
        let w = Waveform::new(x.as_slice().unwrap().to_vec(), "x");
        let s = signal::stft(&w, &cfg).unwrap();
        let (t, f) = (s.magnitude.nrows(), s.magnitude.ncols());
        let mag = s
            .magnitude
            .clone()
            .into_shape_with_order(IxDyn(&[1, t, f]))
            .unwrap();
        let phase = s
            .phase
            .clone()
            .into_shape_with_order(IxDyn(&[1, t, f]))
            .unwrap();
        let time = x.into_shape_with_order(IxDyn(&[1, n])).unwrap();
        (mag, phase, time)
    }

    #[test]
    fn identity_prediction_has_zero_loss() {
        let (mag, phase, time) = consistent_triple(1, 64);
        let (tape, _, terms) = loss_on(
            mag.clone(),
            phase.clone(),
            mag,
            phase,
            time,
            &LossWeights::default(),
        );
        for (name, v) in [
            ("total", terms.total),
            ("mag", terms.magnitude),
            ("complex", terms.complex),
            ("phase", terms.phase),
            ("time", terms.time),
            ("consistency", terms.consistency),
        ] {
            let val = tape.value(v)[IxDyn(&[])];
            assert!(val.abs() < 1e-16, "{name} = {val}");
        }
    }

    #[test]
    fn principal_angle_properties() {
        let mut tape = Tape::new();
        let d = tape.leaf(
            ArrayD::from_shape_vec(
                IxDyn(&[5]),
                vec![0.0, PI, -0.5, 3.0 * PI, -3.5 * PI],
            )
            .unwrap(),
        );
        let p = principal_angle(&mut tape, d);
        let v = tape.value(p);
        assert!(v[[0]].abs() < 1e-12);
        assert!((v[[1]].abs() - PI).abs() < 1e-12);
        assert!((v[[2]] + 0.5).abs() < 1e-12);
        // 3pi wraps to pi (up to sign at the branch point), -3.5pi to 0.5pi.
        assert!((v[[3]].abs() - PI).abs() < 1e-12);
        assert!((v[[4]] - 0.5 * PI).abs() < 1e-12);
    }

    #[test]
    fn phase_loss_ignores_full_wraps() {
        let phase = rand_arr(2, &[1, 6, 9]).mapv(|v| v * 0.8);
        let wrapped = phase.mapv(|v| v + 2.0 * PI);
        let mut tape = Tape::new();
        let a = tape.leaf(phase.clone());
        let b = tape.leaf(wrapped);
        let l = phase_loss(&mut tape, a, b);
        let val = tape.value(l)[IxDyn(&[])];
        assert!(val < 1e-12, "wrap penalty {val}");
    }

    #[test]
    fn constant_offset_hits_only_the_ip_term() {
        // Adding a constant pi/2 shifts the instantaneous term but leaves
        // both difference terms untouched.
        let phase = rand_arr(3, &[1, 6, 9]).mapv(|v| v * 0.5);
        let shifted = phase.mapv(|v| v + 0.5 * PI);
        let mut tape = Tape::new();
        let a = tape.leaf(shifted);
        let b = tape.leaf(phase);
        let ip = antiwrap_term(&mut tape, a, b);
        let ag = diff_axis(&mut tape, a, 2);
        let bg = diff_axis(&mut tape, b, 2);
        let gd = antiwrap_term(&mut tape, ag, bg);
        let at = diff_axis(&mut tape, a, 1);
        let bt = diff_axis(&mut tape, b, 1);
        let iaf = antiwrap_term(&mut tape, at, bt);
        assert!((tape.value(ip)[IxDyn(&[])] - 0.5 * PI).abs() < 1e-12);
        assert!(tape.value(gd)[IxDyn(&[])] < 1e-12);
        assert!(tape.value(iaf)[IxDyn(&[])] < 1e-12);
    }

    #[test]
    fn time_l1_of_sign_flip_is_twice_mean_abs() {
        let x = rand_arr(4, &[1, 50]);
        let neg = x.mapv(|v| -v);
        let expect = 2.0 * x.iter().map(|v| v.abs()).sum::<f64>() / x.len() as f64;
        let mut tape = Tape::new();
        let a = tape.leaf(x);
        let b = tape.leaf(neg);
        let l = l1(&mut tape, a, b);
        assert!((tape.value(l)[IxDyn(&[])] - expect).abs() < 1e-12);
    }

    #[test]
    fn zeroed_weights_remove_gradients() {
        let (mag, phase, time) = consistent_triple(5, 64);
        let pred_mag = rand_pos(6, mag.shape());
        let pred_phase = rand_arr(7, phase.shape()).mapv(|v| v * 2.0);

        // Only the magnitude term active: phase prediction gets no grad.
        let w = LossWeights {
            magnitude: 1.0,
            complex: 0.0,
            phase: 0.0,
            time: 0.0,
            consistency: 0.0,
        };
        let (tape, vars, terms) = loss_on(
            pred_mag.clone(),
            pred_phase.clone(),
            mag.clone(),
            phase.clone(),
            time.clone(),
            &w,
        );
        let g = tape.backward(terms.total);
        assert!(g.wrt(&tape, vars[1]).iter().all(|&v| v == 0.0));
        assert!(g.wrt(&tape, vars[0]).iter().any(|&v| v != 0.0));

        // Only the phase term active: magnitude prediction gets no grad.
        let w = LossWeights {
            magnitude: 0.0,
            complex: 0.0,
            phase: 1.0,
            time: 0.0,
            consistency: 0.0,
        };
        let (tape, vars, terms) = loss_on(pred_mag, pred_phase, mag, phase, time, &w);
        let g = tape.backward(terms.total);
        assert!(g.wrt(&tape, vars[0]).iter().all(|&v| v == 0.0));
        assert!(g.wrt(&tape, vars[1]).iter().any(|&v| v != 0.0));
    }

    // -- loop tests ----------------------------------------------------------

    fn tiny_model(variant: Variant, seed: u64) -> Model {
        let mut cfg = ModelConfig::tiny(variant);
        cfg.n_fft = 64;
        cfg.hop = 16;
        cfg.win_length = 64;
        Model::init(cfg, seed).unwrap()
    }

    fn toy_items(seed: u64, len: usize) -> Vec<TrainItem> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let clean: Vec<f64> = (0..len)
            .map(|n| {
                0.3 * (2.0 * PI * 220.0 * n as f64 / 16_000.0).sin()
                    + 0.1 * (2.0 * PI * 800.0 * n as f64 / 16_000.0).sin()
            })
            .collect();
        let degraded: Vec<f64> = clean
            .iter()
            .map(|&v| 0.7 * v + rng.gen_range(-0.05..0.05))
            .collect();
        vec![TrainItem {
            degraded: Waveform::new(degraded, "deg"),
            clean: Waveform::new(clean, "cln"),
        }]
    }

    fn quick_cfg(steps: u64) -> TrainConfig {
        let mut cfg = TrainConfig::quick(steps);
        cfg.segment_seconds = 0.05; // 800 samples
        cfg.batch_size = 1;
        cfg.checkpoint_every = 2;
        cfg
    }

    #[test]
    fn zero_lr_changes_nothing() {
        let mut model = tiny_model(Variant::Dm1, 1);
        let before: Vec<ArrayD<f64>> =
            model.params.iter().map(|(_, v)| v.clone()).collect();
        let items = toy_items(2, 2000);
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = quick_cfg(2);
        cfg.lr = 0.0;
        train(&mut model, &items, &cfg, dir.path(), false).unwrap();
        for ((_, after), b) in model.params.iter().zip(&before) {
            assert_eq!(after, b);
        }
    }

    #[test]
    fn training_reduces_loss_and_logs() {
        let mut model = tiny_model(Variant::Dm1, 3);
        let items = toy_items(4, 2000);
        let dir = tempfile::tempdir().unwrap();
        let cfg = quick_cfg(8);
        let summary = train(&mut model, &items, &cfg, dir.path(), false).unwrap();
        assert_eq!(summary.steps_run, 8);
        let log = std::fs::read_to_string(&summary.log).unwrap();
        let lines: Vec<&str> = log.lines().collect();
        assert_eq!(lines.len(), 8);
        assert!(lines[0].starts_with("step=1 "));
        let first: f64 = lines[0]
            .split_whitespace()
            .find_map(|t| t.strip_prefix("loss="))
            .unwrap()
            .parse()
            .unwrap();
        let last = summary.final_loss.unwrap();
        assert!(last < first, "loss did not drop: {first} -> {last}");
    }

    #[test]
    fn resume_is_bit_identical() {
        let items = toy_items(5, 2000);
        let cfg8 = quick_cfg(8);

        let mut straight = tiny_model(Variant::Dm2, 6);
        let dir_a = tempfile::tempdir().unwrap();
        train(&mut straight, &items, &cfg8, dir_a.path(), false).unwrap();

        let mut resumed = tiny_model(Variant::Dm2, 6);
        let dir_b = tempfile::tempdir().unwrap();
        let cfg4 = TrainConfig { steps: 4, ..cfg8.clone() };
        train(&mut resumed, &items, &cfg4, dir_b.path(), false).unwrap();
        train(&mut resumed, &items, &cfg8, dir_b.path(), true).unwrap();

        for ((na, va), (nb, vb)) in straight.params.iter().zip(resumed.params.iter()) {
            assert_eq!(na, nb);
            assert_eq!(va, vb, "parameter {na} differs after resume");
        }
        // The persisted alpha trajectories agree as well.
        let ca = load_checkpoint(&dir_a.path().join("checkpoint.dmck"), None).unwrap();
        let cb = load_checkpoint(&dir_b.path().join("checkpoint.dmck"), None).unwrap();
        assert_eq!(ca.alpha_trajectory, cb.alpha_trajectory);
        assert_eq!(ca.alpha_trajectory.len(), 8);
    }

    #[test]
    fn alpha_learns_in_dm2() {
        let mut model = tiny_model(Variant::Dm2, 7);
        let a0 = model.params.get("fuse.alpha")[IxDyn(&[])];
        let items = toy_items(8, 2000);
        let dir = tempfile::tempdir().unwrap();
        train(&mut model, &items, &quick_cfg(3), dir.path(), false).unwrap();
        let a1 = model.params.get("fuse.alpha")[IxDyn(&[])];
        assert_ne!(a0, a1, "alpha received no gradient");
    }

    #[test]
    fn zero_steps_still_writes_checkpoint() {
        let mut model = tiny_model(Variant::S1, 9);
        let items = toy_items(10, 2000);
        let dir = tempfile::tempdir().unwrap();
        let summary = train(&mut model, &items, &quick_cfg(0), dir.path(), false).unwrap();
        assert_eq!(summary.steps_run, 0);
        let ck = load_checkpoint(&summary.checkpoint, Some(&model.cfg)).unwrap();
        assert_eq!(ck.step, 0);
    }

    #[test]
    fn resume_without_checkpoint_errors() {
        let mut model = tiny_model(Variant::S1, 11);
        let items = toy_items(12, 2000);
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            train(&mut model, &items, &quick_cfg(2), dir.path().join("void").as_path(), true),
            Err(TrainError::Data(_))
        ));
    }

    #[test]
    fn adamw_clips_large_gradients() {
        let mut model = tiny_model(Variant::S1, 13);
        let mut state = zero_opt_state(&model);
        let mut grads: Vec<ArrayD<f64>> = model
            .params
            .iter()
            .map(|(_, v)| ArrayD::from_elem(v.raw_dim(), 100.0))
            .collect();
        let before = grad_norm(&grads);
        assert!(before > 5.0);
        adamw_step(&mut model, &mut grads, &mut state, 1e-3, 0.0, 5.0);
        let after = grad_norm(&grads);
        assert!((after - 5.0).abs() < 1e-9, "clipped norm {after}");
    }
}
