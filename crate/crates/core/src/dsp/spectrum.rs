use rustfft::num_complex::Complex64;
use vqspeech_autograd::{kernels, Tensor};

use super::{SpectrogramConfig, Waveform};
use crate::error::{Error, Result};

/// One-sided complex spectrogram, row-major `[frames × bins]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexSpectrogram {
    pub frames: usize,
    pub bins: usize,
    pub data: Vec<Complex64>,
}

impl ComplexSpectrogram {
    pub fn at(&self, frame: usize, bin: usize) -> Complex64 {
        self.data[frame * self.bins + bin]
    }

    pub fn magnitudes(&self) -> Tensor {
        Tensor::new(&[self.frames, self.bins], self.data.iter().map(|c| c.norm()).collect())
    }
}

/// Centered STFT with a periodic Hann window of `win_length_samples`.
pub fn stft(wave: &Waveform, cfg: &SpectrogramConfig) -> Result<ComplexSpectrogram> {
    cfg.validate()?;
    wave.expect_rate(cfg.sample_rate_hz)?;
    if wave.is_empty() {
        return Err(Error::Empty("stft input has no samples"));
    }
    let spec = cfg.stft_spec();
    let data = kernels::stft(&wave.samples, &spec);
    Ok(ComplexSpectrogram { frames: data.len() / spec.bins(), bins: spec.bins(), data })
}

fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular mel filters on the HTK mel scale, `[n_mels × bins]`, unnormalized.
pub fn mel_filterbank(cfg: &SpectrogramConfig) -> Tensor {
    let bins = cfg.fft_size / 2 + 1;
    let (lo, hi) = (hz_to_mel(cfg.fmin_hz), hz_to_mel(cfg.fmax_hz));
    let edges: Vec<f64> = (0..cfg.n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.n_mels + 1) as f64))
        .collect();
    let bin_hz = f64::from(cfg.sample_rate_hz) / cfg.fft_size as f64;
    Tensor::from_fn(&[cfg.n_mels, bins], |i| {
        let (m, k) = (i / bins, i % bins);
        let f = k as f64 * bin_hz;
        let (l, c, r) = (edges[m], edges[m + 1], edges[m + 2]);
        let up = (f - l) / (c - l);
        let down = (r - f) / (r - c);
        up.min(down).max(0.0)
    })
}

/// Log mel spectrogram `[frames × n_mels]`: `ln(max(mel(|X|), log_floor))`.
pub fn mel_spectrogram(wave: &Waveform, cfg: &SpectrogramConfig) -> Result<Tensor> {
    let spec = stft(wave, cfg)?;
    let fb = mel_filterbank(cfg);
    let mags = spec.magnitudes();
    // [frames × bins] · [bins × n_mels]
    let mel = kernels::matmul(&mags, &fb.transpose_last2());
    Ok(mel.map(|v| v.max(cfg.log_floor).ln()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg_16k() -> SpectrogramConfig {
        SpectrogramConfig::default()
    }

    #[test]
    fn zero_signal_frames_and_bins() {
        let w = Waveform::new(vec![0.0; 16000], 16000).unwrap();
        let s = stft(&w, &cfg_16k()).unwrap();
        assert_eq!(s.frames, 81);
        assert!(s.data.iter().all(|c| c.norm() == 0.0));
        let mel = mel_spectrogram(&w, &cfg_16k()).unwrap();
        assert_eq!(mel.shape(), &[81, 80]);
        let floor = 1e-5f64.ln();
        assert!(mel.data().iter().all(|&v| v == floor));
    }

    #[test]
    fn sine_peaks_at_expected_bin() {
        // 1000 Hz at 16 kHz with a 1024-point FFT: bin round(1000·1024/16000) = 64.
        let samples: Vec<f64> = (0..16000)
            .map(|n| (2.0 * std::f64::consts::PI * 1000.0 * n as f64 / 16000.0).sin() * 0.5)
            .collect();
        let w = Waveform::new(samples, 16000).unwrap();
        let s = stft(&w, &cfg_16k()).unwrap();
        for t in 5..s.frames - 5 {
            let (arg, _) = (0..s.bins)
                .map(|k| (k, s.at(t, k).norm()))
                .fold((0, f64::MIN), |a, b| if b.1 > a.1 { b } else { a });
            assert_eq!(arg, 64, "frame {t}");
        }
    }

    #[test]
    fn linear_in_amplitude() {
        let x: Vec<f64> = (0..4000).map(|n| ((n * 7919) % 101) as f64 / 101.0 - 0.5).collect();
        let w1 = Waveform::new(x.clone(), 16000).unwrap();
        let w2 = Waveform::new(x.iter().map(|v| 2.0 * v).collect(), 16000).unwrap();
        let (a, b) = (stft(&w1, &cfg_16k()).unwrap(), stft(&w2, &cfg_16k()).unwrap());
        for (p, q) in a.data.iter().zip(&b.data) {
            assert!((q.norm() - 2.0 * p.norm()).abs() <= 1e-9 * (1.0 + p.norm()));
        }
    }

    #[test]
    fn rejects_bad_config_and_empty_input() {
        let w = Waveform::new(vec![], 16000).unwrap();
        assert!(matches!(stft(&w, &cfg_16k()), Err(Error::Empty(_))));
        let mut cfg = cfg_16k();
        cfg.hop_length_samples = 900;
        let w = Waveform::new(vec![0.0; 10], 16000).unwrap();
        assert!(matches!(stft(&w, &cfg), Err(Error::Config(_))));
        let w24 = Waveform::new(vec![0.0; 10], 24000).unwrap();
        assert!(matches!(stft(&w24, &cfg_16k()), Err(Error::SampleRate { .. })));
    }
}
