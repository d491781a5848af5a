//! Deterministic signal-processing primitives shared by the codec, the acoustic
//! model and the evaluation harness.
//!
//! Every function here is pure; framing is centered with `len / hop + 1` frames
//! everywhere ([`frame_count`]).

mod distance;
mod pitch;
mod resample;
mod spectrum;
mod ssim;
mod wav;
mod wavelet;

pub use distance::{multi_res_spectral_distance, multi_res_spectral_var, spectral_terms, SpectralTerms, MRS_RESOLUTIONS};
pub use pitch::{extract_pitch, phone_average_pitch, PitchTrack, PITCH_MAX_HZ, PITCH_MIN_HZ, VOICING_THRESHOLD};
pub use resample::{resample, RESAMPLER_HALF_TAPS};
pub use spectrum::{mel_filterbank, mel_spectrogram, stft, ComplexSpectrogram};
pub use ssim::{gaussian_window, ssim, ssim_var, SSIM_SIGMA, SSIM_WINDOW};
pub use vqspeech_autograd::kernels::frame_count;
pub use wav::{read_wav, write_wav};
pub use wavelet::{haar_dwt, haar_idwt};

use crate::error::{Error, Result};

/// Codec-side sample rate.
pub const CODEC_RATE: u32 = 24_000;
/// Feature-side sample rate (mel and pitch analysis).
pub const FEATURE_RATE: u32 = 16_000;

/// Mono audio at a declared sample rate.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate_hz: u32,
}

impl Waveform {
    /// Validates finiteness and that the rate is one of the two rates this system uses.
    pub fn new(samples: Vec<f64>, sample_rate_hz: u32) -> Result<Self> {
        if sample_rate_hz != CODEC_RATE && sample_rate_hz != FEATURE_RATE {
            return Err(Error::Invalid(format!(
                "sample rate {sample_rate_hz} Hz; waveforms must be {FEATURE_RATE} or {CODEC_RATE} Hz"
            )));
        }
        if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
            return Err(Error::Invalid(format!("non-finite sample at index {i}")));
        }
        Ok(Self { samples, sample_rate_hz })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / f64::from(self.sample_rate_hz)
    }

    pub(crate) fn expect_rate(&self, expected: u32) -> Result<()> {
        if self.sample_rate_hz == expected {
            Ok(())
        } else {
            Err(Error::SampleRate { got: self.sample_rate_hz, expected })
        }
    }
}

/// STFT / mel analysis parameters.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpectrogramConfig {
    pub sample_rate_hz: u32,
    pub win_length_samples: usize,
    pub hop_length_samples: usize,
    pub fft_size: usize,
    pub n_mels: usize,
    pub fmin_hz: f64,
    pub fmax_hz: f64,
    pub log_floor: f64,
}

impl Default for SpectrogramConfig {
    /// 16 kHz features: 50 ms window, 12.5 ms hop, 80 mel bands.
    fn default() -> Self {
        Self {
            sample_rate_hz: FEATURE_RATE,
            win_length_samples: 800,
            hop_length_samples: 200,
            fft_size: 1024,
            n_mels: 80,
            fmin_hz: 0.0,
            fmax_hz: 8000.0,
            log_floor: 1e-5,
        }
    }
}

impl SpectrogramConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.hop_length_samples == 0
            || self.hop_length_samples > self.win_length_samples
            || self.win_length_samples > self.fft_size
        {
            return bad(format!(
                "need 0 < hop ({}) <= win ({}) <= fft_size ({})",
                self.hop_length_samples, self.win_length_samples, self.fft_size
            ));
        }
        let nyquist = f64::from(self.sample_rate_hz) / 2.0;
        if !(self.fmin_hz >= 0.0 && self.fmin_hz < self.fmax_hz && self.fmax_hz <= nyquist) {
            return bad(format!(
                "need 0 <= fmin ({}) < fmax ({}) <= {nyquist}",
                self.fmin_hz, self.fmax_hz
            ));
        }
        if !(self.log_floor > 0.0) {
            return bad(format!("log_floor must be positive, got {}", self.log_floor));
        }
        if self.n_mels == 0 {
            return bad("n_mels must be positive".into());
        }
        Ok(())
    }

    pub(crate) fn stft_spec(&self) -> vqspeech_autograd::StftSpec {
        vqspeech_autograd::StftSpec {
            n_fft: self.fft_size,
            hop: self.hop_length_samples,
            win: self.win_length_samples,
        }
    }
}
