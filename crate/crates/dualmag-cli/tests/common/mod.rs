//! Shared fixtures for CLI and acceptance tests: synthetic speech/noise
//! material and corpus scaffolding laid out relative to a workdir.

#![allow(dead_code)]

use std::f64::consts::PI;
use std::path::{Path, PathBuf};
use std::process::Command;

use rand::prelude::*;
use rand_chacha::ChaCha20Rng;

use dualmag::signal::Waveform;
use dualmag::wav::write_wav;

pub fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_dualmag"))
}

/// Harmonic tone complex with slow amplitude modulation; loud enough
/// everywhere that the whole signal counts as active speech.
pub fn synth_speech(seed: u64, len: usize) -> Waveform {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let f0 = rng.gen_range(100.0..220.0);
    let mod_rate = rng.gen_range(2.0..5.0);
    let mod_phase = rng.gen_range(0.0..2.0 * PI);
    let fs = dualmag::SAMPLE_RATE as f64;
    let samples: Vec<f64> = (0..len)
        .map(|n| {
            let t = n as f64 / fs;
            let env = 0.55 + 0.4 * (2.0 * PI * mod_rate * t + mod_phase).sin();
            let mut v = 0.0;
            for h in 1..=10 {
                let f = f0 * h as f64;
                if f < 7500.0 {
                    v += (2.0 * PI * f * t).sin() / h as f64;
                }
            }
            0.25 * env * v
        })
        .collect();
    Waveform::new(samples, format!("speech{seed}"))
}

pub fn synth_noise(seed: u64, len: usize) -> Waveform {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let samples: Vec<f64> = (0..len).map(|_| rng.gen_range(-0.3..0.3)).collect();
    Waveform::new(samples, format!("noise{seed}"))
}

/// Writes `n_clean` speech and `n_noise` noise WAVs under `root` along
/// with the two path-list files `build_corpus` expects. All paths inside
/// the lists are relative to `root`.
pub fn setup_corpus_inputs(root: &Path, n_clean: usize, n_noise: usize, len: usize, seed: u64) {
    std::fs::create_dir_all(root.join("src_clean")).unwrap();
    std::fs::create_dir_all(root.join("src_noise")).unwrap();
    let mut clean_list = String::new();
    for i in 0..n_clean {
        let rel = format!("src_clean/sp{i:02}.wav");
        write_wav(root.join(&rel), &synth_speech(seed + i as u64, len)).unwrap();
        clean_list.push_str(&rel);
        clean_list.push('\n');
    }
    let mut noise_list = String::new();
    for i in 0..n_noise {
        let rel = format!("src_noise/ns{i:02}.wav");
        write_wav(root.join(&rel), &synth_noise(seed + 1000 + i as u64, len * 2)).unwrap();
        noise_list.push_str(&rel);
        noise_list.push('\n');
    }
    std::fs::write(root.join("clean_list.txt"), clean_list).unwrap();
    std::fs::write(root.join("noise_list.txt"), noise_list).unwrap();
}

/// Corpus config TOML referencing the fixture lists, everything relative.
pub fn write_sim_config(root: &Path, count: usize, seed: u64) -> PathBuf {
    let text = format!(
        r#"clean_manifest = "clean_list.txt"
noise_manifest = "noise_list.txt"
out_dir = "corpus"
count = {count}
seed = {seed}
rt60_range = [0.3, 0.5]
cutoff_range = [2000.0, 3500.0]
"#
    );
    let path = root.join("sim.toml");
    std::fs::write(&path, text).unwrap();
    path
}

/// Training config for a fast tiny model over the fixture corpus.
pub fn write_train_config(root: &Path, variant: &str, steps: u64) -> PathBuf {
    let text = format!(
        r#"manifest = "corpus/manifest.jsonl"
variant = "{variant}"
split = "all"

[model]
preset = "tiny"
n_fft = 64
hop = 16
win_length = 64

[train]
steps = {steps}
segment_seconds = 0.1
batch_size = 2
checkpoint_every = 50
"#
    );
    let path = root.join("train.toml");
    std::fs::write(&path, text).unwrap();
    path
}

/// Generates a ready corpus in `root/corpus` and returns the manifest path.
pub fn make_corpus(root: &Path, count: usize, seed: u64) -> PathBuf {
    setup_corpus_inputs(root, 3, 2, 8000, seed);
    let cfg = write_sim_config(root, count, seed);
    let out = bin()
        .arg("--workdir")
        .arg(root)
        .arg("simulate")
        .arg("--config")
        .arg(cfg.file_name().unwrap())
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "simulate failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    root.join("corpus/manifest.jsonl")
}
