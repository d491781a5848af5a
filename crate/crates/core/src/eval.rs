//! Inference and evaluation: text-to-waveform synthesis, rate/quality sweeps
//! and real-time-factor measurement.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::acoustic::AcousticModel;
use crate::codec::{CodecNetwork, FrameRepresentation, SAMPLES_PER_FRAME};
use crate::config::SystemConfig;
use crate::discriminators::Discriminators;
use crate::dsp::{multi_res_spectral_distance, Waveform};
use crate::error::{Error, Result};
use crate::quantizer::bitrate_bps;
use crate::training::Trainer;

/// Phonemes to waveform of `Σ durations × 300` samples; returns the durations used.
pub fn synthesize(am: &AcousticModel, codec: &CodecNetwork, ids: &[usize]) -> Result<(Waveform, Vec<usize>)> {
    let (repr, durations) = am.infer(ids)?;
    let frames = repr.dim(0);
    let wave = codec.decode(&FrameRepresentation { values: repr, num_samples: frames * SAMPLES_PER_FRAME }, None)?;
    Ok((wave, durations))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    /// Values are quantizer stage counts.
    Bitrate,
    /// Values are latent widths.
    LatentDim,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: usize,
    pub bitrate_kbps: f64,
    pub latent_dim: usize,
    pub spectral_distance: f64,
    pub config: SystemConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub axis: SweepAxis,
    pub steps_per_point: u64,
    pub rows: Vec<SweepRow>,
}

impl SweepResult {
    /// Plain-text table, one row per point.
    pub fn table(&self) -> String {
        let mut out = String::from("value  bitrate_kbps  latent_dim  spectral_distance\n");
        for r in &self.rows {
            out.push_str(&format!("{:>5}  {:>12.1}  {:>10}  {:>17.4}\n", r.value, r.bitrate_kbps, r.latent_dim, r.spectral_distance));
        }
        out
    }
}

/// Configuration of one sweep point.
pub fn sweep_point_config(base: &SystemConfig, axis: SweepAxis, value: usize) -> SystemConfig {
    let mut cfg = base.clone();
    match axis {
        SweepAxis::Bitrate => cfg.quantizer.num_stages = value,
        SweepAxis::LatentDim => {
            cfg.codec.latent_dim = value;
            cfg.quantizer.dim = value;
            cfg.acoustic.latent_dim = value;
        }
    }
    cfg
}

/// Mean distance between each clip and its reconstruction.
pub fn reconstruction_distance(trainer: &Trainer, clips: &[Waveform]) -> Result<f64> {
    if clips.is_empty() {
        return Err(Error::Empty("evaluation clips"));
    }
    let mut total = 0.0;
    for c in clips {
        total += multi_res_spectral_distance(c, &trainer.reconstruct(c)?)?;
    }
    Ok(total / clips.len() as f64)
}

/// Trains a codec for `steps` steps at each point and scores reconstructions of `eval`.
/// Rows come back sorted by value.
pub fn run_sweep(
    base: &SystemConfig,
    axis: SweepAxis,
    values: &[usize],
    steps: u64,
    train: &[Waveform],
    eval: &[Waveform],
) -> Result<SweepResult> {
    if train.is_empty() {
        return Err(Error::Empty("sweep training clips"));
    }
    let mut sorted = values.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let mut rows = Vec::with_capacity(sorted.len());
    for value in sorted {
        let cfg = sweep_point_config(base, axis, value);
        let mut trainer = Trainer::new(cfg.clone())?;
        let bs = cfg.training.batch_size;
        for step in 0..steps {
            let start = (step as usize * bs) % train.len();
            let picks: Vec<Waveform> = (0..bs).map(|i| train[(start + i) % train.len()].clone()).collect();
            let batch = trainer.crop_segments(&picks)?;
            trainer.train_codec_step(&batch)?;
        }
        rows.push(SweepRow {
            value,
            bitrate_kbps: bitrate_bps(&cfg.quantizer) / 1000.0,
            latent_dim: cfg.codec.latent_dim,
            spectral_distance: reconstruction_distance(&trainer, eval)?,
            config: cfg,
        });
    }
    Ok(SweepResult { axis, steps_per_point: steps, rows })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamCounts {
    pub acoustic_model: usize,
    pub encoder: usize,
    pub decoder: usize,
    pub discriminators: usize,
}

impl ParamCounts {
    /// Closed-form counts from layer widths.
    pub fn from_config(cfg: &SystemConfig) -> Self {
        let (encoder, decoder) = CodecNetwork::param_count(&cfg.codec);
        Self {
            acoustic_model: AcousticModel::param_count(&cfg.acoustic),
            encoder,
            decoder,
            discriminators: Discriminators::param_count(&cfg.discriminators),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RtfReport {
    pub utterances: usize,
    pub audio_secs: f64,
    pub acoustic_secs: f64,
    pub vocoder_secs: f64,
    pub total_secs: f64,
    /// Wall-clock seconds per second of audio.
    pub rtf: f64,
    pub params: ParamCounts,
}

/// Times acoustic model and vocoder separately over `inputs`.
pub fn measure_rtf(cfg: &SystemConfig, am: &AcousticModel, codec: &CodecNetwork, inputs: &[Vec<usize>]) -> Result<RtfReport> {
    if inputs.is_empty() {
        return Err(Error::Empty("rtf inputs"));
    }
    let (mut acoustic_secs, mut vocoder_secs, mut audio_secs) = (0.0, 0.0, 0.0);
    let all = Instant::now();
    for ids in inputs {
        let t0 = Instant::now();
        let (repr, _) = am.infer(ids)?;
        let t1 = Instant::now();
        let frames = repr.dim(0);
        let wave = codec.decode(&FrameRepresentation { values: repr, num_samples: frames * SAMPLES_PER_FRAME }, None)?;
        let t2 = Instant::now();
        acoustic_secs += (t1 - t0).as_secs_f64();
        vocoder_secs += (t2 - t1).as_secs_f64();
        audio_secs += wave.duration_secs();
    }
    let total_secs = all.elapsed().as_secs_f64();
    Ok(RtfReport {
        utterances: inputs.len(),
        audio_secs,
        acoustic_secs,
        vocoder_secs,
        total_secs,
        rtf: total_secs / audio_secs,
        params: ParamCounts::from_config(cfg),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthesis_length_law() {
        let cfg = SystemConfig::tiny();
        let am = AcousticModel::new(cfg.acoustic.clone(), 0).unwrap();
        let codec = CodecNetwork::new(cfg.codec.clone(), 0).unwrap();
        let (wave, durs) = synthesize(&am, &codec, &[1, 5, 2]).unwrap();
        assert_eq!(wave.len(), durs.iter().sum::<usize>() * 300);
        assert_eq!(wave, synthesize(&am, &codec, &[1, 5, 2]).unwrap().0);
    }

    #[test]
    fn sweep_point_configs() {
        let base = SystemConfig::tiny();
        let kbps: Vec<f64> = [4, 8, 16]
            .iter()
            .map(|&s| {
                let mut c = sweep_point_config(&base, SweepAxis::Bitrate, s);
                c.quantizer.codebook_size = 1024;
                bitrate_bps(&c.quantizer) / 1000.0
            })
            .collect();
        assert_eq!(kbps, vec![3.2, 6.4, 12.8]);
        let c = sweep_point_config(&base, SweepAxis::LatentDim, 24);
        c.validate().unwrap();
        assert_eq!((c.codec.latent_dim, c.quantizer.dim, c.acoustic.latent_dim), (24, 24, 24));
    }

    #[test]
    fn single_value_sweep_has_one_row() {
        let mut base = SystemConfig::tiny();
        base.training.batch_size = 1;
        base.training.segment_samples = 1200;
        let clip = crate::data::synth_waveform(&[0, 1], &[4, 4], 0).unwrap();
        let r = run_sweep(&base, SweepAxis::Bitrate, &[2], 2, &[clip.clone()], &[clip]).unwrap();
        assert_eq!(r.rows.len(), 1);
        assert!(r.rows[0].spectral_distance.is_finite());
        assert!(r.table().lines().count() == 2);
    }

    #[test]
    fn rtf_report_bookkeeping() {
        let cfg = SystemConfig::tiny();
        let am = AcousticModel::new(cfg.acoustic.clone(), 0).unwrap();
        let codec = CodecNetwork::new(cfg.codec.clone(), 0).unwrap();
        let r = measure_rtf(&cfg, &am, &codec, &[vec![1, 2, 3], vec![4, 5]]).unwrap();
        assert!(r.rtf > 0.0);
        assert!(r.acoustic_secs + r.vocoder_secs <= r.total_secs + 1e-3);
        assert!(r.total_secs - (r.acoustic_secs + r.vocoder_secs) < 0.05);
        let (e, d) = CodecNetwork::param_count(&cfg.codec);
        assert_eq!(e + d, codec.params.numel());
        assert_eq!(r.params.acoustic_model, am.params.numel());
    }
}
