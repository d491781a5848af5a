//! Short-time Fourier analysis and the orthonormal Haar transform.

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::tensor::Tensor;

/// Framing parameters of a centered STFT.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StftSpec {
    pub n_fft: usize,
    pub hop: usize,
    pub win: usize,
}

impl StftSpec {
    pub fn bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    fn check(&self) {
        assert!(
            self.hop >= 1 && self.hop <= self.win && self.win <= self.n_fft,
            "invalid STFT spec {self:?}: need 1 <= hop <= win <= n_fft"
        );
    }
}

/// Power below which a bin's magnitude is clamped (magnitude floor 1e-5).
pub const POWER_FLOOR: f64 = 1e-10;

/// Number of centered frames for a signal of `len` samples: `len / hop + 1`.
pub fn frame_count(len: usize, hop: usize) -> usize {
    len / hop + 1
}

/// Periodic Hann window of length `win`.
pub fn hann_window(win: usize) -> Vec<f64> {
    (0..win)
        .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / win as f64).cos())
        .collect()
}

/// The analysis window zero-padded and centered inside an `n_fft` frame.
fn padded_window(spec: &StftSpec) -> Vec<f64> {
    let mut w = vec![0.0; spec.n_fft];
    let off = (spec.n_fft - spec.win) / 2;
    w[off..off + spec.win].copy_from_slice(&hann_window(spec.win));
    w
}

/// Visits each windowed frame of `signal` (zero-padded by `n_fft/2` on both sides).
fn for_each_frame(signal: &[f64], spec: &StftSpec, mut f: impl FnMut(usize, &mut [Complex64])) {
    spec.check();
    let half = (spec.n_fft / 2) as isize;
    let window = padded_window(spec);
    let frames = frame_count(signal.len(), spec.hop);
    let mut buf = vec![Complex64::new(0.0, 0.0); spec.n_fft];
    for t in 0..frames {
        let start = (t * spec.hop) as isize - half;
        for (n, slot) in buf.iter_mut().enumerate() {
            let idx = start + n as isize;
            let v = if idx >= 0 && (idx as usize) < signal.len() { signal[idx as usize] } else { 0.0 };
            *slot = Complex64::new(v * window[n], 0.0);
        }
        f(t, &mut buf);
    }
}

/// One-sided complex STFT, row-major `[frames × (n_fft/2 + 1)]`.
pub fn stft(signal: &[f64], spec: &StftSpec) -> Vec<Complex64> {
    let bins = spec.bins();
    let fft = FftPlanner::new().plan_fft_forward(spec.n_fft);
    let frames = frame_count(signal.len(), spec.hop);
    let mut out = Vec::with_capacity(frames * bins);
    for_each_frame(signal, spec, |_, buf| {
        fft.process(buf);
        out.extend_from_slice(&buf[..bins]);
    });
    out
}

fn magnitude(c: Complex64) -> f64 {
    c.norm_sqr().max(POWER_FLOOR).sqrt()
}

/// Clamped STFT magnitudes of a `[B, T]` batch, shaped `[B, frames, bins]`.
pub fn stft_mag(x: &Tensor, spec: &StftSpec) -> Tensor {
    assert_eq!(x.ndim(), 2, "stft_mag expects [B, T], got {:?}", x.shape());
    let (bs, t) = (x.dim(0), x.dim(1));
    let frames = frame_count(t, spec.hop);
    let mut out = Vec::with_capacity(bs * frames * spec.bins());
    for b in 0..bs {
        let spec_b = stft(&x.data()[b * t..(b + 1) * t], spec);
        out.extend(spec_b.into_iter().map(magnitude));
    }
    Tensor::new(&[bs, frames, spec.bins()], out)
}

/// Gradient of [`stft_mag`] with respect to its input.
pub fn stft_mag_backward(x: &Tensor, g: &Tensor, spec: &StftSpec) -> Tensor {
    let (bs, t) = (x.dim(0), x.dim(1));
    let bins = spec.bins();
    let n = spec.n_fft;
    let half = (n / 2) as isize;
    let window = padded_window(spec);
    let mut planner = FftPlanner::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let mut gx = vec![0.0; x.len()];
    let mut spec_buf = vec![Complex64::new(0.0, 0.0); n];
    for b in 0..bs {
        let signal = &x.data()[b * t..(b + 1) * t];
        let gb = &g.data()[b * g.dim(1) * bins..];
        let gxb = &mut gx[b * t..(b + 1) * t];
        for_each_frame(signal, spec, |frame, buf| {
            fwd.process(buf);
            // d|X_k| / dRe, dIm, folded into a one-sided spectrum; the unnormalized
            // inverse transform then yields Σ_k gR cos θ − gI sin θ per sample.
            for (k, slot) in spec_buf.iter_mut().enumerate() {
                *slot = if k < bins {
                    let xk = buf[k];
                    if xk.norm_sqr() <= POWER_FLOOR {
                        Complex64::new(0.0, 0.0)
                    } else {
                        let gk = gb[frame * bins + k] / xk.norm();
                        Complex64::new(gk * xk.re, gk * xk.im)
                    }
                } else {
                    Complex64::new(0.0, 0.0)
                };
            }
            inv.process(&mut spec_buf);
            let start = (frame * spec.hop) as isize - half;
            for (i, c) in spec_buf.iter().enumerate() {
                let idx = start + i as isize;
                if idx >= 0 && (idx as usize) < t {
                    gxb[idx as usize] += window[i] * c.re;
                }
            }
        });
    }
    Tensor::new(x.shape(), gx)
}

/// Haar analysis of `[B, C, T]` along time: returns `[B, 2C, T/2]` with the
/// approximation bands in channels `0..C` and detail bands in `C..2C`.
pub fn haar_dwt_channels(x: &Tensor) -> Tensor {
    assert_eq!(x.ndim(), 3, "haar_dwt_channels expects [B, C, T]");
    let (bs, c, t) = (x.dim(0), x.dim(1), x.dim(2));
    assert!(t % 2 == 0, "Haar DWT needs an even length, got {t}");
    let h = t / 2;
    let s = std::f64::consts::FRAC_1_SQRT_2;
    let mut out = vec![0.0; x.len()];
    for b in 0..bs {
        for ch in 0..c {
            let src = &x.data()[(b * c + ch) * t..(b * c + ch + 1) * t];
            let a_off = (b * 2 * c + ch) * h;
            let d_off = (b * 2 * c + c + ch) * h;
            for k in 0..h {
                out[a_off + k] = (src[2 * k] + src[2 * k + 1]) * s;
                out[d_off + k] = (src[2 * k] - src[2 * k + 1]) * s;
            }
        }
    }
    Tensor::new(&[bs, 2 * c, h], out)
}

/// Inverse (and adjoint) of [`haar_dwt_channels`].
pub fn haar_dwt_channels_inverse(y: &Tensor) -> Tensor {
    let (bs, c2, h) = (y.dim(0), y.dim(1), y.dim(2));
    let c = c2 / 2;
    let t = h * 2;
    let s = std::f64::consts::FRAC_1_SQRT_2;
    let mut out = vec![0.0; y.len()];
    for b in 0..bs {
        for ch in 0..c {
            let a = &y.data()[(b * c2 + ch) * h..(b * c2 + ch + 1) * h];
            let d = &y.data()[(b * c2 + c + ch) * h..(b * c2 + c + ch + 1) * h];
            let dst = &mut out[(b * c + ch) * t..(b * c + ch + 1) * t];
            for k in 0..h {
                dst[2 * k] = (a[k] + d[k]) * s;
                dst[2 * k + 1] = (a[k] - d[k]) * s;
            }
        }
    }
    Tensor::new(&[bs, c, t], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_count_law() {
        assert_eq!(frame_count(16000, 200), 81);
        assert_eq!(frame_count(199, 200), 1);
    }

    #[test]
    fn haar_roundtrip() {
        let x = Tensor::from_fn(&[2, 3, 8], |i| (i as f64 * 1.3).sin());
        let y = haar_dwt_channels(&x);
        assert_eq!(y.shape(), &[2, 6, 4]);
        let r = haar_dwt_channels_inverse(&y);
        for (a, b) in r.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn stft_of_zero_is_floor() {
        let spec = StftSpec { n_fft: 64, hop: 16, win: 32 };
        let m = stft_mag(&Tensor::zeros(&[1, 100]), &spec);
        assert_eq!(m.shape(), &[1, 7, 33]);
        assert!(m.data().iter().all(|&v| (v - 1e-5).abs() < 1e-12));
    }
}
