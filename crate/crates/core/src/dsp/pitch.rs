use super::{frame_count, Waveform, FEATURE_RATE};
use crate::error::{Error, Result};

/// Lower edge of the f0 search band.
pub const PITCH_MIN_HZ: f64 = 50.0;
/// Upper edge of the f0 search band.
pub const PITCH_MAX_HZ: f64 = 600.0;
/// Minimum normalized autocorrelation peak for a frame to count as voiced.
pub const VOICING_THRESHOLD: f64 = 0.3;
/// Analysis window, 50 ms at 16 kHz.
const WINDOW: usize = 800;
/// A lag whose correlation is within this fraction of the best is preferred if shorter.
const NEAR_MAX: f64 = 0.9;

/// Frame-level f0 in Hz; 0 marks an unvoiced frame.
#[derive(Clone, Debug, PartialEq)]
pub struct PitchTrack {
    pub f0_hz: Vec<f64>,
    pub hop_length_samples: usize,
}

/// Normalized-autocorrelation f0 tracker on 16 kHz audio, one value per `hop` samples.
pub fn extract_pitch(wave: &Waveform, hop: usize) -> Result<PitchTrack> {
    wave.expect_rate(FEATURE_RATE)?;
    if hop == 0 {
        return Err(Error::Invalid("pitch hop must be positive".into()));
    }
    let fs = f64::from(FEATURE_RATE);
    let min_lag = (fs / PITCH_MAX_HZ).floor() as usize;
    let max_lag = (fs / PITCH_MIN_HZ).ceil() as usize;
    let x = &wave.samples;
    let mut frame = vec![0.0; WINDOW];
    let mut corr = vec![0.0; max_lag + 2];
    let f0_hz = (0..frame_count(x.len(), hop))
        .map(|t| {
            let start = (t * hop) as isize - (WINDOW / 2) as isize;
            for (i, v) in frame.iter_mut().enumerate() {
                let n = start + i as isize;
                *v = if n >= 0 && (n as usize) < x.len() { x[n as usize] } else { 0.0 };
            }
            frame_f0(&frame, min_lag, max_lag, fs, &mut corr)
        })
        .collect();
    Ok(PitchTrack { f0_hz, hop_length_samples: hop })
}

fn frame_f0(frame: &[f64], min_lag: usize, max_lag: usize, fs: f64, corr: &mut [f64]) -> f64 {
    let energy: f64 = frame.iter().map(|v| v * v).sum();
    if energy < 1e-8 {
        return 0.0;
    }
    let lo = min_lag.saturating_sub(1).max(1);
    let hi = (max_lag + 1).min(frame.len() - 1);
    for lag in lo..=hi {
        let (mut xy, mut xx, mut yy) = (0.0, 0.0, 0.0);
        for n in 0..frame.len() - lag {
            let (a, b) = (frame[n], frame[n + lag]);
            xy += a * b;
            xx += a * a;
            yy += b * b;
        }
        corr[lag] = if xx > 0.0 && yy > 0.0 { xy / (xx * yy).sqrt() } else { 0.0 };
    }
    let is_peak = |l: usize| corr[l] >= corr[l - 1] && corr[l] >= corr[l + 1];
    let best = (min_lag..=max_lag.min(hi - 1))
        .filter(|&l| is_peak(l))
        .map(|l| corr[l])
        .fold(f64::MIN, f64::max);
    if best < VOICING_THRESHOLD {
        return 0.0;
    }
    let lag = (min_lag..=max_lag.min(hi - 1))
        .find(|&l| is_peak(l) && corr[l] >= NEAR_MAX * best)
        .expect("the best peak qualifies");
    let (a, b, c) = (corr[lag - 1], corr[lag], corr[lag + 1]);
    let denom = a - 2.0 * b + c;
    let shift = if denom.abs() > 1e-12 { (0.5 * (a - c) / denom).clamp(-0.5, 0.5) } else { 0.0 };
    (fs / (lag as f64 + shift)).clamp(PITCH_MIN_HZ, PITCH_MAX_HZ)
}

/// Mean voiced f0 inside each phone's frame span; an all-unvoiced span yields 0.
pub fn phone_average_pitch(track: &PitchTrack, durations: &[i64]) -> Result<Vec<f64>> {
    if let Some(d) = durations.iter().find(|&&d| d < 0) {
        return Err(Error::Invalid(format!("negative duration {d}")));
    }
    let total: i64 = durations.iter().sum();
    if total as usize > track.f0_hz.len() {
        return Err(Error::Alignment(format!(
            "durations cover {total} frames but the pitch track has {}",
            track.f0_hz.len()
        )));
    }
    let mut pos = 0;
    Ok(durations
        .iter()
        .map(|&d| {
            let span = &track.f0_hz[pos..pos + d as usize];
            pos += d as usize;
            let voiced: Vec<f64> = span.iter().copied().filter(|&f| f > 0.0).collect();
            if voiced.is_empty() {
                0.0
            } else {
                voiced.iter().sum::<f64>() / voiced.len() as f64
            }
        })
        .collect())
}
