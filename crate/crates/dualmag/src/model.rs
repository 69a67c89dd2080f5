//! Dual-path magnitude restoration network.
//!
//! A convolutional encoder halves the frequency axis, a stack of
//! time/frequency conformer pairs models the sequence, and decoders
//! produce a masked magnitude, a mapped magnitude, and a phase estimate.
//! The five variants differ only in how the two magnitude paths are fused
//! and whether their decoder bodies share parameters.

use std::collections::BTreeMap;
use std::io::{Read as _, Write as _};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use rand::prelude::*;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::autograd::{Tape, Var};
use crate::signal::{self, SpectroTriple, StftConfig, Waveform, WindowKind};

#[derive(Error, Debug)]
pub enum ModelError {
    #[error("config error: {0}")]
    Config(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Signal(#[from] crate::signal::SignalError),
}

/// Network variant. The magnitude fusion rules:
/// S1 masks only, S2 maps only (with an input skip), U1 and DM1 blend
/// both paths with a fixed weight, DM2 adds a learnably scaled mask to
/// the map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    S1,
    S2,
    U1,
    Dm1,
    Dm2,
}

impl Variant {
    pub fn parse(s: &str) -> Result<Self, ModelError> {
        match s.to_ascii_lowercase().as_str() {
            "s1" => Ok(Variant::S1),
            "s2" => Ok(Variant::S2),
            "u1" => Ok(Variant::U1),
            "dm1" => Ok(Variant::Dm1),
            "dm2" => Ok(Variant::Dm2),
            other => Err(ModelError::Config(format!(
                "unknown variant {other:?}, expected s1/s2/u1/dm1/dm2"
            ))),
        }
    }

    pub fn has_mask_path(&self) -> bool {
        !matches!(self, Variant::S2)
    }

    pub fn has_map_path(&self) -> bool {
        !matches!(self, Variant::S1)
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Variant::S1 => "s1",
            Variant::S2 => "s2",
            Variant::U1 => "u1",
            Variant::Dm1 => "dm1",
            Variant::Dm2 => "dm2",
        };
        write!(f, "{s}")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Variant,
    /// Width of every internal feature map.
    pub channels: usize,
    /// Number of time/frequency conformer pairs.
    pub n_conformers: usize,
    pub n_heads: usize,
    pub n_fft: usize,
    pub hop: usize,
    pub win_length: usize,
    pub compress_exponent: f64,
    /// Fixed fusion weight on the masking path (U1, DM1).
    pub omega: f64,
    /// Initial value of the learnable DM2 fusion scale.
    pub alpha_init: f64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.n_fft % 4 != 0 {
            // F = n_fft/2 + 1 must be odd so the strided encoder and the
            // transposed-conv upsampler are exact inverses on the bin axis.
            return Err(ModelError::Config(format!(
                "n_fft must be divisible by 4, got {}",
                self.n_fft
            )));
        }
        if self.channels == 0 || self.n_conformers == 0 || self.n_heads == 0 {
            return Err(ModelError::Config("sizes must be positive".into()));
        }
        if self.channels % self.n_heads != 0 {
            return Err(ModelError::Config(format!(
                "channels {} not divisible by heads {}",
                self.channels, self.n_heads
            )));
        }
        if !(0.0..=1.0).contains(&self.omega) {
            return Err(ModelError::Config(format!("omega {} outside [0,1]", self.omega)));
        }
        self.stft_config()?;
        Ok(())
    }

    /// Desk-scale default: 25 ms frames at 16 kHz, 48 channels, 4
    /// conformer pairs.
    pub fn default_for(variant: Variant) -> Self {
        ModelConfig {
            variant,
            channels: 48,
            n_conformers: 4,
            n_heads: 4,
            n_fft: 400,
            hop: 100,
            win_length: 400,
            compress_exponent: 0.3,
            omega: 0.5,
            alpha_init: 0.5,
        }
    }

    /// Minimal size for gradient checks and overfit smoke tests.
    pub fn tiny(variant: Variant) -> Self {
        ModelConfig {
            variant,
            channels: 4,
            n_conformers: 1,
            n_heads: 2,
            n_fft: 256,
            hop: 64,
            win_length: 256,
            compress_exponent: 0.3,
            omega: 0.5,
            alpha_init: 0.5,
        }
    }

    pub fn stft_config(&self) -> Result<StftConfig, ModelError> {
        Ok(StftConfig::new(
            self.n_fft,
            self.hop,
            self.win_length,
            WindowKind::Hann,
            self.compress_exponent,
        )?)
    }

    pub fn bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    pub fn encoded_bins(&self) -> usize {
        (self.bins() + 1) / 2
    }

    /// SHA-256 of the canonical JSON encoding, used to pair checkpoints
    /// with configs.
    pub fn hash(&self) -> [u8; 32] {
        let json = serde_json::to_string(self).expect("config serializes");
        let mut h = Sha256::new();
        h.update(json.as_bytes());
        h.finalize().into()
    }
}

// ---------------------------------------------------------------------------
// Parameter store
// ---------------------------------------------------------------------------

/// Ordered, named parameter tensors. Iteration order is insertion order,
/// which fixes the checkpoint layout and the optimizer update order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<ArrayD<f64>>,
    index: BTreeMap<String, usize>,
}

impl ParamStore {
    fn add(&mut self, name: &str, value: ArrayD<f64>) {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter {name}"
        );
        self.index.insert(name.to_string(), self.names.len());
        self.names.push(name.to_string());
        self.values.push(value);
    }

    pub fn get(&self, name: &str) -> &ArrayD<f64> {
        &self.values[*self.index.get(name).unwrap_or_else(|| panic!("no parameter {name}"))]
    }

    pub fn get_mut(&mut self, name: &str) -> &mut ArrayD<f64> {
        let i = *self.index.get(name).unwrap_or_else(|| panic!("no parameter {name}"));
        &mut self.values[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<f64>)> {
        self.names.iter().map(|n| n.as_str()).zip(self.values.iter())
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut ArrayD<f64>)> {
        self.names
            .iter()
            .map(|n| n.as_str())
            .zip(self.values.iter_mut())
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn count_parameters(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }
}

/// Tape handles for every parameter of one forward pass, in store order.
pub struct BoundParams {
    pub order: Vec<(String, Var)>,
    map: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn var(&self, name: &str) -> Var {
        *self
            .map
            .get(name)
            .unwrap_or_else(|| panic!("no bound parameter {name}"))
    }
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParamStore,
}

/// Tape handles of the network outputs, all in the compressed magnitude
/// domain, shaped [B, T, F].
pub struct ModelOutput {
    pub magnitude: Var,
    pub phase: Var,
    pub mask: Option<Var>,
    pub map: Option<Var>,
}

struct Init {
    rng: ChaCha20Rng,
}

impl Init {
    fn uniform(&mut self, shape: &[usize], bound: f64) -> ArrayD<f64> {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| self.rng.gen_range(-bound..bound)).collect();
        ArrayD::from_shape_vec(IxDyn(shape), data).expect("shape")
    }

    fn conv(&mut self, shape: &[usize]) -> ArrayD<f64> {
        let fan_in: usize = shape[1..].iter().product();
        self.uniform(shape, (1.0 / fan_in as f64).sqrt())
    }

    fn linear(&mut self, inp: usize, out: usize) -> ArrayD<f64> {
        self.uniform(&[inp, out], (1.0 / inp as f64).sqrt())
    }

    fn zeros(shape: &[usize]) -> ArrayD<f64> {
        ArrayD::zeros(IxDyn(shape))
    }

    fn full(shape: &[usize], v: f64) -> ArrayD<f64> {
        ArrayD::from_elem(IxDyn(shape), v)
    }
}

const DW_KERNEL: usize = 7;
const LN_EPS: f64 = 1e-5;
/// Maximum value of the learnable-slope sigmoid gate on the masking path.
pub const MASK_GATE_MAX: f64 = 2.0;

impl Model {
    pub fn init(cfg: ModelConfig, seed: u64) -> Result<Model, ModelError> {
        cfg.validate()?;
        let mut params = ParamStore::default();
        let mut init = Init {
            rng: ChaCha20Rng::seed_from_u64(seed),
        };
        let c = cfg.channels;

        // Encoder.
        params.add("enc.conv0.w", init.conv(&[c, 2, 1, 1]));
        params.add("enc.conv0.b", Init::zeros(&[c, 1, 1]));
        params.add("enc.prelu0.a", Init::full(&[c, 1, 1], 0.25));
        for (i, _dil) in [(1usize, 1usize), (2, 1)].iter().enumerate() {
            params.add(&format!("enc.conv{}.w", i + 1), init.conv(&[c, c, 3, 3]));
            params.add(&format!("enc.conv{}.b", i + 1), Init::zeros(&[c, 1, 1]));
            params.add(&format!("enc.prelu{}.a", i + 1), Init::full(&[c, 1, 1], 0.25));
        }
        params.add("enc.down.w", init.conv(&[c, c, 1, 3]));
        params.add("enc.down.b", Init::zeros(&[c, 1, 1]));
        params.add("enc.down.prelu.a", Init::full(&[c, 1, 1], 0.25));

        // Time/frequency conformer pairs.
        for i in 0..cfg.n_conformers {
            for axis in ["time", "freq"] {
                let p = format!("conf{i}.{axis}");
                for ffn in ["ffn1", "ffn2"] {
                    params.add(&format!("{p}.{ffn}.ln.g"), Init::full(&[c], 1.0));
                    params.add(&format!("{p}.{ffn}.ln.b"), Init::zeros(&[c]));
                    params.add(&format!("{p}.{ffn}.w1"), init.linear(c, 2 * c));
                    params.add(&format!("{p}.{ffn}.b1"), Init::zeros(&[2 * c]));
                    params.add(&format!("{p}.{ffn}.w2"), init.linear(2 * c, c));
                    params.add(&format!("{p}.{ffn}.b2"), Init::zeros(&[c]));
                }
                params.add(&format!("{p}.mhsa.ln.g"), Init::full(&[c], 1.0));
                params.add(&format!("{p}.mhsa.ln.b"), Init::zeros(&[c]));
                params.add(&format!("{p}.mhsa.wqkv"), init.linear(c, 3 * c));
                params.add(&format!("{p}.mhsa.bqkv"), Init::zeros(&[3 * c]));
                params.add(&format!("{p}.mhsa.wo"), init.linear(c, c));
                params.add(&format!("{p}.mhsa.bo"), Init::zeros(&[c]));
                params.add(&format!("{p}.conv.ln.g"), Init::full(&[c], 1.0));
                params.add(&format!("{p}.conv.ln.b"), Init::zeros(&[c]));
                params.add(&format!("{p}.conv.pw1.w"), init.linear(c, 2 * c));
                params.add(&format!("{p}.conv.pw1.b"), Init::zeros(&[2 * c]));
                params.add(
                    &format!("{p}.conv.dw.w"),
                    init.uniform(&[c, DW_KERNEL], (1.0 / DW_KERNEL as f64).sqrt()),
                );
                params.add(&format!("{p}.conv.pw2.w"), init.linear(c, c));
                params.add(&format!("{p}.conv.pw2.b"), Init::zeros(&[c]));
                params.add(&format!("{p}.ln.g"), Init::full(&[c], 1.0));
                params.add(&format!("{p}.ln.b"), Init::zeros(&[c]));
            }
        }

        // Decoder bodies: the magnitude body is shared by the mask and map
        // heads except in U1, which gets an independent second body.
        Model::add_body(&mut params, &mut init, c, "dec.mag", 1);
        if cfg.variant == Variant::U1 {
            Model::add_body(&mut params, &mut init, c, "dec.mag2", 1);
        }
        Model::add_body(&mut params, &mut init, c, "dec.phase", 2);

        if cfg.variant.has_mask_path() {
            params.add("mask.k", Init::full(&[cfg.bins()], 1.0));
        }
        if cfg.variant == Variant::Dm2 {
            params.add("fuse.alpha", Init::full(&[], cfg.alpha_init));
        }
        Ok(Model { cfg, params })
    }

    fn add_body(params: &mut ParamStore, init: &mut Init, c: usize, prefix: &str, heads: usize) {
        params.add(&format!("{prefix}.conv1.w"), init.conv(&[c, c, 3, 3]));
        params.add(&format!("{prefix}.conv1.b"), Init::zeros(&[c, 1, 1]));
        params.add(&format!("{prefix}.prelu1.a"), Init::full(&[c, 1, 1], 0.25));
        params.add(&format!("{prefix}.conv2.w"), init.conv(&[c, c, 3, 3]));
        params.add(&format!("{prefix}.conv2.b"), Init::zeros(&[c, 1, 1]));
        params.add(&format!("{prefix}.prelu2.a"), Init::full(&[c, 1, 1], 0.25));
        // Transposed conv weight layout is [Cin, Cout, kh, kw].
        params.add(&format!("{prefix}.up.w"), init.conv(&[c, c, 1, 3]));
        params.add(&format!("{prefix}.up.b"), Init::zeros(&[c, 1, 1]));
        params.add(&format!("{prefix}.up.prelu.a"), Init::full(&[c, 1, 1], 0.25));
        for h in 0..heads {
            params.add(&format!("{prefix}.proj{h}.w"), init.conv(&[1, c, 1, 1]));
            params.add(&format!("{prefix}.proj{h}.b"), Init::zeros(&[1, 1, 1]));
        }
    }

    /// Leafs every parameter onto the tape, in store order.
    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        let mut order = Vec::new();
        let mut map = BTreeMap::new();
        for (name, value) in self.params.iter() {
            let v = tape.leaf(value.clone());
            order.push((name.to_string(), v));
            map.insert(name.to_string(), v);
        }
        BoundParams { order, map }
    }

    pub fn count_parameters(&self) -> usize {
        self.params.count_parameters()
    }

    // -- building blocks -----------------------------------------------------

    fn prelu(tape: &mut Tape, bp: &BoundParams, name: &str, x: Var) -> Var {
        let a = bp.var(name);
        let pos = tape.relu(x);
        let nx = tape.neg(x);
        let negpart = tape.relu(nx);
        let scaled = tape.mul(a, negpart);
        tape.sub(pos, scaled)
    }

    fn conv_block(
        tape: &mut Tape,
        bp: &BoundParams,
        prefix: &str,
        x: Var,
        stride: (usize, usize),
        padding: (usize, usize),
        dilation: (usize, usize),
    ) -> Var {
        let w = bp.var(&format!("{prefix}.w"));
        let b = bp.var(&format!("{prefix}.b"));
        let y = tape.conv2d(x, w, stride, padding, dilation);
        tape.add(y, b)
    }

    fn layernorm(tape: &mut Tape, bp: &BoundParams, prefix: &str, x: Var) -> Var {
        let g = bp.var(&format!("{prefix}.g"));
        let b = bp.var(&format!("{prefix}.b"));
        let mu = tape.mean_last_keep(x);
        let d = tape.sub(x, mu);
        let d2 = tape.mul(d, d);
        let var = tape.mean_last_keep(d2);
        let stable = tape.add_const(var, LN_EPS);
        let inv = tape.powf(stable, -0.5);
        let normed = tape.mul(d, inv);
        let scaled = tape.mul(normed, g);
        tape.add(scaled, b)
    }

    fn linear(tape: &mut Tape, bp: &BoundParams, x: Var, w: &str, b: &str) -> Var {
        let wv = bp.var(w);
        let bv = bp.var(b);
        let shape = tape.value(x).shape().to_vec();
        let inp = *shape.last().expect("non-scalar");
        let rows: usize = shape[..shape.len() - 1].iter().product();
        let flat = tape.reshape(x, &[rows, inp]);
        let y = tape.matmul(flat, wv);
        let out = tape.value(y).shape()[1];
        let mut new_shape = shape;
        *new_shape.last_mut().expect("non-scalar") = out;
        let back = tape.reshape(y, &new_shape);
        tape.add(back, bv)
    }

    fn ffn_half(tape: &mut Tape, bp: &BoundParams, prefix: &str, x: Var) -> Var {
        let n = Model::layernorm(tape, bp, &format!("{prefix}.ln"), x);
        let h = Model::linear(tape, bp, n, &format!("{prefix}.w1"), &format!("{prefix}.b1"));
        let h = tape.swish(h);
        let o = Model::linear(tape, bp, h, &format!("{prefix}.w2"), &format!("{prefix}.b2"));
        let half = tape.scale(o, 0.5);
        tape.add(x, half)
    }

    fn mhsa(tape: &mut Tape, bp: &BoundParams, prefix: &str, x: Var, heads: usize) -> Var {
        let shape = tape.value(x).shape().to_vec();
        let (n, s, c) = (shape[0], shape[1], shape[2]);
        let dh = c / heads;
        let normed = Model::layernorm(tape, bp, &format!("{prefix}.ln"), x);
        let qkv = Model::linear(
            tape,
            bp,
            normed,
            &format!("{prefix}.wqkv"),
            &format!("{prefix}.bqkv"),
        );
        let split_head = |tape: &mut Tape, v: Var| {
            let r = tape.reshape(v, &[n, s, heads, dh]);
            let p = tape.permute(r, &[0, 2, 1, 3]);
            tape.reshape(p, &[n * heads, s, dh])
        };
        let q = tape.slice_axis(qkv, 2, 0, c);
        let k = tape.slice_axis(qkv, 2, c, 2 * c);
        let v = tape.slice_axis(qkv, 2, 2 * c, 3 * c);
        let q = split_head(tape, q);
        let k = split_head(tape, k);
        let v = split_head(tape, v);
        let kt = tape.permute(k, &[0, 2, 1]);
        let scores = tape.bmm(q, kt);
        let scaled = tape.scale(scores, 1.0 / (dh as f64).sqrt());
        let attn = tape.softmax_last(scaled);
        let ctx = tape.bmm(attn, v);
        let r = tape.reshape(ctx, &[n, heads, s, dh]);
        let p = tape.permute(r, &[0, 2, 1, 3]);
        let merged = tape.reshape(p, &[n, s, c]);
        let o = Model::linear(
            tape,
            bp,
            merged,
            &format!("{prefix}.wo"),
            &format!("{prefix}.bo"),
        );
        tape.add(x, o)
    }

    fn conv_module(tape: &mut Tape, bp: &BoundParams, prefix: &str, x: Var) -> Var {
        let shape = tape.value(x).shape().to_vec();
        let c = shape[2];
        let normed = Model::layernorm(tape, bp, &format!("{prefix}.ln"), x);
        let h = Model::linear(
            tape,
            bp,
            normed,
            &format!("{prefix}.pw1.w"),
            &format!("{prefix}.pw1.b"),
        );
        let a = tape.slice_axis(h, 2, 0, c);
        let b = tape.slice_axis(h, 2, c, 2 * c);
        let gate = tape.sigmoid(b);
        let glu = tape.mul(a, gate);
        let chan_first = tape.permute(glu, &[0, 2, 1]);
        let dw = bp.var(&format!("{prefix}.dw.w"));
        let conved = tape.dwconv1d_same(chan_first, dw);
        let act = tape.swish(conved);
        let back = tape.permute(act, &[0, 2, 1]);
        let o = Model::linear(
            tape,
            bp,
            back,
            &format!("{prefix}.pw2.w"),
            &format!("{prefix}.pw2.b"),
        );
        tape.add(x, o)
    }

    /// One conformer block over sequences shaped [N, S, C].
    fn conformer(tape: &mut Tape, bp: &BoundParams, prefix: &str, x: Var, heads: usize) -> Var {
        let x = Model::ffn_half(tape, bp, &format!("{prefix}.ffn1"), x);
        let x = Model::mhsa(tape, bp, &format!("{prefix}.mhsa"), x, heads);
        let x = Model::conv_module(tape, bp, &format!("{prefix}.conv"), x);
        let x = Model::ffn_half(tape, bp, &format!("{prefix}.ffn2"), x);
        Model::layernorm(tape, bp, &format!("{prefix}.ln"), x)
    }

    fn decoder_body(tape: &mut Tape, bp: &BoundParams, prefix: &str, x: Var) -> Var {
        let h = Model::conv_block(tape, bp, &format!("{prefix}.conv1"), x, (1, 1), (1, 1), (1, 1));
        let h = Model::prelu(tape, bp, &format!("{prefix}.prelu1.a"), h);
        let h = Model::conv_block(tape, bp, &format!("{prefix}.conv2"), h, (1, 1), (2, 1), (2, 1));
        let h = Model::prelu(tape, bp, &format!("{prefix}.prelu2.a"), h);
        let w = bp.var(&format!("{prefix}.up.w"));
        let b = bp.var(&format!("{prefix}.up.b"));
        let up = tape.conv_transpose2d(h, w, (1, 2), (0, 1));
        let up = tape.add(up, b);
        Model::prelu(tape, bp, &format!("{prefix}.up.prelu.a"), up)
    }

    fn project(tape: &mut Tape, bp: &BoundParams, prefix: &str, x: Var) -> Var {
        let w = bp.var(&format!("{prefix}.w"));
        let b = bp.var(&format!("{prefix}.b"));
        let y = tape.conv2d(x, w, (1, 1), (0, 0), (1, 1));
        let y = tape.add(y, b);
        let shape = tape.value(y).shape().to_vec();
        tape.reshape(y, &[shape[0], shape[2], shape[3]])
    }

    // -- forward -------------------------------------------------------------

    /// Runs the network on compressed magnitude and phase, both [B, T, F].
    pub fn forward(
        &self,
        tape: &mut Tape,
        bp: &BoundParams,
        magnitude: Var,
        phase: Var,
    ) -> ModelOutput {
        let shape = tape.value(magnitude).shape().to_vec();
        assert_eq!(shape.len(), 3, "inputs must be [B, T, F]");
        assert_eq!(
            shape[2],
            self.cfg.bins(),
            "input bins do not match the configured n_fft"
        );
        let (b, t, f) = (shape[0], shape[1], shape[2]);
        let fp = self.cfg.encoded_bins();
        let c = self.cfg.channels;

        // Two input planes: compressed magnitude and wrapped phase.
        let mag4 = tape.reshape(magnitude, &[b, 1, t, f]);
        let phase4 = tape.reshape(phase, &[b, 1, t, f]);
        let x = tape.concat(&[mag4, phase4], 1);

        // Encoder.
        let h = Model::conv_block(tape, bp, "enc.conv0", x, (1, 1), (0, 0), (1, 1));
        let h = Model::prelu(tape, bp, "enc.prelu0.a", h);
        let h = Model::conv_block(tape, bp, "enc.conv1", h, (1, 1), (1, 1), (1, 1));
        let h = Model::prelu(tape, bp, "enc.prelu1.a", h);
        let h = Model::conv_block(tape, bp, "enc.conv2", h, (1, 1), (2, 1), (2, 1));
        let h = Model::prelu(tape, bp, "enc.prelu2.a", h);
        let h = Model::conv_block(tape, bp, "enc.down", h, (1, 2), (0, 1), (1, 1));
        let mut h = Model::prelu(tape, bp, "enc.down.prelu.a", h);

        // Alternating time and frequency conformers.
        for i in 0..self.cfg.n_conformers {
            // Time: sequences of length T, one per (batch, bin).
            let p = tape.permute(h, &[0, 3, 2, 1]);
            let seq = tape.reshape(p, &[b * fp, t, c]);
            let seq = Model::conformer(tape, bp, &format!("conf{i}.time"), seq, self.cfg.n_heads);
            let p = tape.reshape(seq, &[b, fp, t, c]);
            h = tape.permute(p, &[0, 3, 2, 1]);
            // Frequency: sequences of length F', one per (batch, frame).
            let p = tape.permute(h, &[0, 2, 3, 1]);
            let seq = tape.reshape(p, &[b * t, fp, c]);
            let seq = Model::conformer(tape, bp, &format!("conf{i}.freq"), seq, self.cfg.n_heads);
            let p = tape.reshape(seq, &[b, t, fp, c]);
            h = tape.permute(p, &[0, 3, 1, 2]);
        }

        // Magnitude paths.
        let mag_body = Model::decoder_body(tape, bp, "dec.mag", h);
        let mask = if self.cfg.variant.has_mask_path() {
            let u = Model::project(tape, bp, "dec.mag.proj0", mag_body);
            let k = bp.var("mask.k");
            let slope = tape.mul(u, k);
            let gate = tape.sigmoid(slope);
            let gate = tape.scale(gate, MASK_GATE_MAX);
            Some(tape.mul(magnitude, gate))
        } else {
            None
        };
        let map = if self.cfg.variant.has_map_path() {
            let body = if self.cfg.variant == Variant::U1 {
                Model::decoder_body(tape, bp, "dec.mag2", h)
            } else {
                mag_body
            };
            let prefix = if self.cfg.variant == Variant::U1 {
                "dec.mag2.proj0"
            } else {
                "dec.mag.proj0"
            };
            let u = Model::project(tape, bp, prefix, body);
            Some(tape.relu(u))
        } else {
            None
        };

        let magnitude_out = match self.cfg.variant {
            Variant::S1 => mask.expect("mask path"),
            Variant::S2 => {
                let m = map.expect("map path");
                tape.add(m, magnitude)
            }
            Variant::U1 | Variant::Dm1 => {
                let mk = tape.scale(mask.expect("mask path"), self.cfg.omega);
                let mp = tape.scale(map.expect("map path"), 1.0 - self.cfg.omega);
                tape.add(mk, mp)
            }
            Variant::Dm2 => {
                let alpha = bp.var("fuse.alpha");
                let scaled = tape.mul(mask.expect("mask path"), alpha);
                tape.add(map.expect("map path"), scaled)
            }
        };

        // Phase decoder: own body, two projections, angle via atan2.
        let ph_body = Model::decoder_body(tape, bp, "dec.phase", h);
        let pre = Model::project(tape, bp, "dec.phase.proj0", ph_body);
        let pim = Model::project(tape, bp, "dec.phase.proj1", ph_body);
        let phase_out = tape.atan2(pim, pre);

        ModelOutput {
            magnitude: magnitude_out,
            phase: phase_out,
            mask,
            map,
        }
    }

    /// End-to-end restoration of one waveform.
    pub fn restore(&self, input: &Waveform) -> Result<Waveform, ModelError> {
        let stft_cfg = self.cfg.stft_config()?;
        let triple = signal::stft(input, &stft_cfg)?;
        let (t, f) = (triple.magnitude.nrows(), triple.magnitude.ncols());
        let mut tape = Tape::new();
        let bp = self.bind(&mut tape);
        let mag = tape.leaf(
            triple
                .magnitude
                .clone()
                .into_shape_with_order(IxDyn(&[1, t, f]))
                .expect("shape"),
        );
        let phase = tape.leaf(
            triple
                .phase
                .clone()
                .into_shape_with_order(IxDyn(&[1, t, f]))
                .expect("shape"),
        );
        let out = self.forward(&mut tape, &bp, mag, phase);
        let mag_out = tape
            .value(out.magnitude)
            .clone()
            .into_shape_with_order((t, f))
            .expect("shape")
            .into_dimensionality::<ndarray::Ix2>()
            .expect("2-D");
        // Clamp tiny negative fusion results before decompression.
        let mag_out = mag_out.mapv(|v| v.max(0.0));
        let phase_out = tape
            .value(out.phase)
            .clone()
            .into_shape_with_order((t, f))
            .expect("shape")
            .into_dimensionality::<ndarray::Ix2>()
            .expect("2-D");
        let restored = SpectroTriple {
            magnitude: mag_out,
            phase: phase_out,
        };
        let mut out = signal::istft(&restored, &stft_cfg, input.len())?;
        out.id = format!("{}_restored", input.id);
        out.sample_rate = input.sample_rate;
        Ok(out)
    }
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

const CKPT_MAGIC: &[u8; 4] = b"DMCK";
const CKPT_VERSION: u32 = 1;

/// First-moment/second-moment optimizer state, stored in parameter order.
#[derive(Debug, Clone, PartialEq)]
pub struct OptState {
    pub step: u64,
    pub m: Vec<ArrayD<f64>>,
    pub v: Vec<ArrayD<f64>>,
}

pub struct Checkpoint {
    pub model: Model,
    pub step: u64,
    /// DM2 fusion scale at every logged step (empty for other variants).
    pub alpha_trajectory: Vec<f64>,
    pub opt: Option<OptState>,
}

fn write_array(out: &mut Vec<u8>, a: &ArrayD<f64>) {
    out.push(a.ndim() as u8);
    for &d in a.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in a.as_standard_layout().iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        if self.pos + n > self.buf.len() {
            return Err(ModelError::Checkpoint("truncated checkpoint".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, ModelError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, ModelError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64, ModelError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn array(&mut self) -> Result<ArrayD<f64>, ModelError> {
        let ndim = self.u8()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(self.u64()? as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(self.f64()?);
        }
        ArrayD::from_shape_vec(IxDyn(&shape), data)
            .map_err(|e| ModelError::Checkpoint(format!("bad tensor shape: {e}")))
    }
}

/// Serializes model, step counter, alpha trajectory, and optionally the
/// optimizer state. The write is atomic (temp file + rename).
pub fn save_checkpoint(
    path: &Path,
    model: &Model,
    step: u64,
    alpha_trajectory: &[f64],
    opt: Option<&OptState>,
) -> Result<(), ModelError> {
    let mut out = Vec::new();
    out.extend_from_slice(CKPT_MAGIC);
    out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    let cfg_json = serde_json::to_vec(&model.cfg).expect("config serializes");
    out.extend_from_slice(&(cfg_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&cfg_json);
    out.extend_from_slice(&model.cfg.hash());
    out.extend_from_slice(&step.to_le_bytes());
    out.extend_from_slice(&(alpha_trajectory.len() as u64).to_le_bytes());
    for &a in alpha_trajectory {
        out.extend_from_slice(&a.to_le_bytes());
    }
    out.extend_from_slice(&(model.params.names().len() as u64).to_le_bytes());
    for (name, value) in model.params.iter() {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        write_array(&mut out, value);
    }
    match opt {
        Some(state) => {
            out.push(1);
            out.extend_from_slice(&state.step.to_le_bytes());
            for a in state.m.iter().chain(state.v.iter()) {
                write_array(&mut out, a);
            }
        }
        None => out.push(0),
    }

    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    std::fs::create_dir_all(dir)?;
    let tmp = dir.join(format!(
        ".{}.tmp",
        path.file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "checkpoint".into())
    ));
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&out)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Loads a checkpoint, refusing configs whose hash does not match
/// `expected` (when given).
pub fn load_checkpoint(
    path: &Path,
    expected: Option<&ModelConfig>,
) -> Result<Checkpoint, ModelError> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    let mut r = Reader { buf: &buf, pos: 0 };
    if r.take(4)? != CKPT_MAGIC {
        return Err(ModelError::Checkpoint("bad magic, not a checkpoint".into()));
    }
    let version = r.u32()?;
    if version != CKPT_VERSION {
        return Err(ModelError::Checkpoint(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let cfg_len = r.u32()? as usize;
    let cfg: ModelConfig = serde_json::from_slice(r.take(cfg_len)?)
        .map_err(|e| ModelError::Checkpoint(format!("bad embedded config: {e}")))?;
    let stored_hash: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
    if stored_hash != cfg.hash() {
        return Err(ModelError::Checkpoint(
            "embedded config does not match its stored hash".into(),
        ));
    }
    if let Some(exp) = expected {
        if exp.hash() != stored_hash {
            return Err(ModelError::Checkpoint(
                "checkpoint was written for a different config".into(),
            ));
        }
    }
    let step = r.u64()?;
    let n_alpha = r.u64()? as usize;
    let mut alpha_trajectory = Vec::with_capacity(n_alpha);
    for _ in 0..n_alpha {
        alpha_trajectory.push(r.f64()?);
    }
    let mut model = Model::init(cfg, 0)?;
    let n_params = r.u64()? as usize;
    if n_params != model.params.names().len() {
        return Err(ModelError::Checkpoint(format!(
            "expected {} tensors, found {n_params}",
            model.params.names().len()
        )));
    }
    for i in 0..n_params {
        let name_len = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes")) as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| ModelError::Checkpoint("non-utf8 tensor name".into()))?;
        let expected_name = model.params.names()[i].clone();
        if name != expected_name {
            return Err(ModelError::Checkpoint(format!(
                "tensor {i} is {name:?}, expected {expected_name:?}"
            )));
        }
        let value = r.array()?;
        let slot = model.params.get_mut(&name);
        if slot.shape() != value.shape() {
            return Err(ModelError::Checkpoint(format!(
                "tensor {name} has shape {:?}, expected {:?}",
                value.shape(),
                slot.shape()
            )));
        }
        *slot = value;
    }
    let opt = match r.u8()? {
        0 => None,
        1 => {
            let ostep = r.u64()?;
            let mut m = Vec::with_capacity(n_params);
            for _ in 0..n_params {
                m.push(r.array()?);
            }
            let mut v = Vec::with_capacity(n_params);
            for _ in 0..n_params {
                v.push(r.array()?);
            }
            Some(OptState { step: ostep, m, v })
        }
        other => {
            return Err(ModelError::Checkpoint(format!(
                "bad optimizer flag {other}"
            )))
        }
    };
    Ok(Checkpoint {
        model,
        step,
        alpha_trajectory,
        opt,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;

    fn tiny(variant: Variant) -> Model {
        Model::init(ModelConfig::tiny(variant), 7).unwrap()
    }

    fn rand_input(seed: u64, b: usize, t: usize, f: usize) -> (ArrayD<f64>, ArrayD<f64>) {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mag = Array::from_shape_fn(IxDyn(&[b, t, f]), |_| rng.gen_range(0.0..1.0));
        let phase = Array::from_shape_fn(IxDyn(&[b, t, f]), |_| {
            rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI)
        });
        (mag, phase)
    }

    fn run(model: &Model, mag: &ArrayD<f64>, phase: &ArrayD<f64>) -> (ArrayD<f64>, ArrayD<f64>) {
        let mut tape = Tape::new();
        let bp = model.bind(&mut tape);
        let m = tape.leaf(mag.clone());
        let p = tape.leaf(phase.clone());
        let out = model.forward(&mut tape, &bp, m, p);
        (
            tape.value(out.magnitude).clone(),
            tape.value(out.phase).clone(),
        )
    }

    #[test]
    fn config_validation() {
        let mut cfg = ModelConfig::tiny(Variant::Dm1);
        assert!(cfg.validate().is_ok());
        cfg.n_fft = 250; // not divisible by 4
        assert!(cfg.validate().is_err());
        let mut cfg = ModelConfig::tiny(Variant::Dm1);
        cfg.n_heads = 3; // does not divide channels=4
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn output_shapes_match_input() {
        let model = tiny(Variant::Dm1);
        let f = model.cfg.bins();
        let (mag, phase) = rand_input(1, 2, 6, f);
        let (m, p) = run(&model, &mag, &phase);
        assert_eq!(m.shape(), &[2, 6, f]);
        assert_eq!(p.shape(), &[2, 6, f]);
    }

    #[test]
    fn encoded_bins_arithmetic() {
        let cfg = ModelConfig::tiny(Variant::S1);
        // F odd, F' = (F+1)/2, and the upsampler returns 2F'-1 = F.
        let f = cfg.bins();
        assert_eq!(f % 2, 1);
        assert_eq!(2 * cfg.encoded_bins() - 1, f);
    }

    #[test]
    fn parameter_count_relations() {
        let s1 = tiny(Variant::S1).count_parameters();
        let s2 = tiny(Variant::S2).count_parameters();
        let u1 = tiny(Variant::U1).count_parameters();
        let dm1 = tiny(Variant::Dm1).count_parameters();
        let dm2 = tiny(Variant::Dm2).count_parameters();

        // Masking and dual-path variants share every tensor: the map head
        // is parameter-free.
        assert_eq!(s1, dm1);
        // S2 drops the per-bin mask slopes.
        assert_eq!(s2, dm1 - ModelConfig::tiny(Variant::S2).bins());
        // DM2 adds exactly the scalar fusion weight.
        assert_eq!(dm2, dm1 + 1);
        // U1 adds exactly one independent decoder body.
        let u1_model = tiny(Variant::U1);
        let body: usize = u1_model
            .params
            .iter()
            .filter(|(n, _)| n.starts_with("dec.mag2."))
            .map(|(_, v)| v.len())
            .sum();
        assert!(body > 0);
        assert_eq!(u1, dm1 + body);
        let shared_body: usize = u1_model
            .params
            .iter()
            .filter(|(n, _)| n.starts_with("dec.mag.") )
            .map(|(_, v)| v.len())
            .sum();
        assert_eq!(body, shared_body);
    }

    #[test]
    fn dm1_with_full_mask_weight_equals_s1() {
        let mut cfg = ModelConfig::tiny(Variant::Dm1);
        cfg.omega = 1.0;
        let dm1 = Model::init(cfg, 11).unwrap();
        let mut s1 = tiny(Variant::S1);
        // Same tensors, same order, same seed requirement: copy explicitly.
        for (name, value) in dm1.params.iter() {
            *s1.params.get_mut(name) = value.clone();
        }
        let f = dm1.cfg.bins();
        let (mag, phase) = rand_input(2, 1, 5, f);
        let (m_dm, p_dm) = run(&dm1, &mag, &phase);
        let (m_s1, p_s1) = run(&s1, &mag, &phase);
        assert_eq!(m_dm, m_s1);
        assert_eq!(p_dm, p_s1);
    }

    #[test]
    fn dm2_mask_branch_equals_s1() {
        // With the map path zeroed and alpha frozen at one, DM2's fusion
        // reduces to exactly the S1 masking branch.
        let dm2 = {
            let mut m = tiny(Variant::Dm2);
            *m.params.get_mut("fuse.alpha") = ArrayD::from_elem(IxDyn(&[]), 1.0);
            m
        };
        let mut s1 = tiny(Variant::S1);
        for (name, value) in dm2.params.iter() {
            if name != "fuse.alpha" {
                *s1.params.get_mut(name) = value.clone();
            }
        }
        let f = dm2.cfg.bins();
        let (mag, phase) = rand_input(3, 1, 5, f);

        let mut tape = Tape::new();
        let bp = dm2.bind(&mut tape);
        let m = tape.leaf(mag.clone());
        let p = tape.leaf(phase.clone());
        let out = dm2.forward(&mut tape, &bp, m, p);
        let mask = tape.value(out.mask.unwrap()).clone();
        let map = tape.value(out.map.unwrap()).clone();
        let fused = tape.value(out.magnitude).clone();
        let zeroed = &fused - &map; // subtract the map contribution
        let (m_s1, _) = run(&s1, &mag, &phase);
        for ((a, b), c) in zeroed.iter().zip(mask.iter()).zip(m_s1.iter()) {
            assert!((a - b).abs() < 1e-12);
            assert!((b - c).abs() < 1e-12);
        }
    }

    #[test]
    fn mask_stays_within_gate_limits() {
        let model = tiny(Variant::S1);
        let f = model.cfg.bins();
        let (mag, phase) = rand_input(4, 1, 4, f);
        let mut tape = Tape::new();
        let bp = model.bind(&mut tape);
        let m = tape.leaf(mag.clone());
        let p = tape.leaf(phase);
        let out = model.forward(&mut tape, &bp, m, p);
        let mask = tape.value(out.mask.unwrap());
        for (mv, xv) in mask.iter().zip(mag.iter()) {
            assert!(*mv >= 0.0 && *mv <= MASK_GATE_MAX * xv + 1e-12);
        }
    }

    #[test]
    fn map_is_nonnegative_and_phase_in_range() {
        let model = tiny(Variant::Dm2);
        let f = model.cfg.bins();
        let (mag, phase) = rand_input(5, 1, 4, f);
        let mut tape = Tape::new();
        let bp = model.bind(&mut tape);
        let m = tape.leaf(mag);
        let p = tape.leaf(phase);
        let out = model.forward(&mut tape, &bp, m, p);
        assert!(tape.value(out.map.unwrap()).iter().all(|&v| v >= 0.0));
        for &v in tape.value(out.phase).iter() {
            assert!(v > -std::f64::consts::PI && v <= std::f64::consts::PI);
        }
    }

    #[test]
    fn batching_is_invariant() {
        let model = tiny(Variant::Dm1);
        let f = model.cfg.bins();
        let (mag, phase) = rand_input(6, 2, 5, f);
        let (m_batch, p_batch) = run(&model, &mag, &phase);
        for i in 0..2 {
            let m1 = mag
                .slice_axis(ndarray::Axis(0), ndarray::Slice::from(i..i + 1))
                .to_owned();
            let p1 = phase
                .slice_axis(ndarray::Axis(0), ndarray::Slice::from(i..i + 1))
                .to_owned();
            let (m_one, p_one) = run(&model, &m1, &p1);
            let mb = m_batch
                .slice_axis(ndarray::Axis(0), ndarray::Slice::from(i..i + 1))
                .to_owned();
            let pb = p_batch
                .slice_axis(ndarray::Axis(0), ndarray::Slice::from(i..i + 1))
                .to_owned();
            assert_eq!(m_one, mb, "batch item {i} magnitude");
            assert_eq!(p_one, pb, "batch item {i} phase");
        }
    }

    #[test]
    fn shared_body_feeds_both_paths() {
        // Perturbing the shared decoder body must move both mask and map
        // in DM1; in U1 the map path has its own body and must not move.
        let f = ModelConfig::tiny(Variant::Dm1).bins();
        let (mag, phase) = rand_input(7, 1, 4, f);
        let outputs = |model: &Model| {
            let mut tape = Tape::new();
            let bp = model.bind(&mut tape);
            let m = tape.leaf(mag.clone());
            let p = tape.leaf(phase.clone());
            let out = model.forward(&mut tape, &bp, m, p);
            (
                tape.value(out.mask.unwrap()).clone(),
                tape.value(out.map.unwrap()).clone(),
            )
        };
        for (variant, map_should_move) in [(Variant::Dm1, true), (Variant::U1, false)] {
            let mut model = tiny(variant);
            let (mask0, map0) = outputs(&model);
            model.params.get_mut("dec.mag.conv1.w")[[0, 0, 0, 0]] += 0.5;
            let (mask1, map1) = outputs(&model);
            assert_ne!(mask0, mask1, "{variant}: mask did not move");
            if map_should_move {
                assert_ne!(map0, map1, "{variant}: map should share the body");
            } else {
                assert_eq!(map0, map1, "{variant}: map must be independent");
            }
        }
    }

    #[test]
    fn init_is_deterministic() {
        let a = Model::init(ModelConfig::tiny(Variant::Dm2), 123).unwrap();
        let b = Model::init(ModelConfig::tiny(Variant::Dm2), 123).unwrap();
        for ((na, va), (nb, vb)) in a.params.iter().zip(b.params.iter()) {
            assert_eq!(na, nb);
            assert_eq!(va, vb);
        }
        let c = Model::init(ModelConfig::tiny(Variant::Dm2), 124).unwrap();
        assert!(a.params.iter().zip(c.params.iter()).any(|((_, va), (_, vc))| va != vc));
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.dmck");
        let model = tiny(Variant::Dm2);
        let opt = OptState {
            step: 42,
            m: model.params.iter().map(|(_, v)| v.mapv(|x| x * 0.1)).collect(),
            v: model.params.iter().map(|(_, v)| v.mapv(|x| x * x)).collect(),
        };
        save_checkpoint(&path, &model, 42, &[0.5, 0.51, 0.52], Some(&opt)).unwrap();
        let back = load_checkpoint(&path, Some(&model.cfg)).unwrap();
        assert_eq!(back.step, 42);
        assert_eq!(back.alpha_trajectory, vec![0.5, 0.51, 0.52]);
        for ((na, va), (nb, vb)) in model.params.iter().zip(back.model.params.iter()) {
            assert_eq!(na, nb);
            assert_eq!(va, vb);
        }
        let bopt = back.opt.unwrap();
        assert_eq!(bopt.step, 42);
        assert_eq!(bopt.m, opt.m);
        assert_eq!(bopt.v, opt.v);
    }

    #[test]
    fn checkpoint_rejects_other_config() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.dmck");
        let model = tiny(Variant::S1);
        save_checkpoint(&path, &model, 0, &[], None).unwrap();
        let other = ModelConfig::tiny(Variant::Dm1);
        assert!(matches!(
            load_checkpoint(&path, Some(&other)),
            Err(ModelError::Checkpoint(_))
        ));
        // And garbage is refused outright.
        std::fs::write(&path, b"not a checkpoint").unwrap();
        assert!(load_checkpoint(&path, None).is_err());
    }

    #[test]
    fn restore_produces_same_length_audio() {
        let model = tiny(Variant::Dm1);
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        let x = Waveform::new(
            (0..4000).map(|_| rng.gen_range(-0.1..0.1)).collect(),
            "probe",
        );
        let y = model.restore(&x).unwrap();
        assert_eq!(y.len(), x.len());
        assert!(y.samples.iter().all(|v| v.is_finite()));
    }
}
