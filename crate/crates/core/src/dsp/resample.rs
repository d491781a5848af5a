use super::Waveform;
use crate::error::Result;

/// Zero crossings of the interpolation kernel on each side of the centre.
pub const RESAMPLER_HALF_TAPS: usize = 32;
/// Cutoff as a fraction of the lower Nyquist frequency.
const ROLLOFF: f64 = 0.95;

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        let px = std::f64::consts::PI * x;
        px.sin() / px
    }
}

/// Band-limited resampling with a Hann-windowed sinc kernel
/// (`RESAMPLER_HALF_TAPS` zero crossings per side, cutoff `0.95 × min(fs_in, fs_out) / 2`).
/// Output length is `ceil(len · out / in)`.
pub fn resample(wave: &Waveform, out_rate: u32) -> Result<Waveform> {
    if out_rate == wave.sample_rate_hz {
        return Waveform::new(wave.samples.clone(), out_rate);
    }
    let (fin, fout) = (f64::from(wave.sample_rate_hz), f64::from(out_rate));
    let ratio = fout / fin;
    // Cutoff in cycles per input sample.
    let fc = 0.5 * ROLLOFF * ratio.min(1.0);
    let reach = RESAMPLER_HALF_TAPS as f64 / (2.0 * fc);
    let n_out = (wave.len() as u64 * u64::from(out_rate)).div_ceil(u64::from(wave.sample_rate_hz)) as usize;
    let x = &wave.samples;
    let out = (0..n_out)
        .map(|n| {
            let t = n as f64 / ratio;
            let lo = (t - reach).ceil().max(0.0) as usize;
            let hi = ((t + reach).floor() as usize).min(x.len().saturating_sub(1));
            (lo..=hi)
                .map(|k| {
                    let u = t - k as f64;
                    let w = 0.5 + 0.5 * (std::f64::consts::PI * u / reach).cos();
                    x[k] * 2.0 * fc * sinc(2.0 * fc * u) * w
                })
                .sum::<f64>()
        })
        .collect();
    Waveform::new(out, out_rate)
}
