#![allow(dead_code)]

use vqspeech_core::config::SystemConfig;
use vqspeech_core::data::{extract_features, synth_waveform, Utterance};
use vqspeech_core::training::{Phase, Trainer};

/// Tiny preset with one short segment per step.
pub fn fast_config() -> SystemConfig {
    let mut cfg = SystemConfig::tiny();
    cfg.training.batch_size = 1;
    cfg.training.segment_samples = 1800;
    cfg.training.joint_segment_frames = 6;
    cfg
}

pub fn utterance(cfg: &SystemConfig, phones: &[usize], durations: &[usize], seed: u64) -> Utterance {
    let wave = synth_waveform(phones, durations, seed).unwrap();
    let frames = durations.iter().sum();
    let (mel, pitch) = extract_features(&wave, durations, frames, &cfg.features).unwrap();
    Utterance { phonemes: phones.to_vec(), durations: durations.to_vec(), wave, mel, pitch }
}

/// A codec trained for `steps` steps, saved to `path`.
pub fn pretrained_codec(cfg: &SystemConfig, steps: usize, path: &std::path::Path) -> Trainer {
    let mut t = Trainer::new(cfg.clone()).unwrap();
    let clip = synth_waveform(&[0, 3, 10, 5], &[4, 5, 3, 6], 7).unwrap();
    for _ in 0..steps {
        let batch = t.crop_segments(&[clip.clone()]).unwrap();
        t.train_codec_step(&batch).unwrap();
    }
    t.save(path).unwrap();
    t
}

pub fn joint_config(cfg: &SystemConfig) -> SystemConfig {
    let mut c = cfg.clone();
    c.training.phase = Phase::Joint;
    c
}
