use vqspeech_autograd::{StftSpec, Tape, Tensor, Var};

use super::Waveform;
use crate::error::{Error, Result};

/// `(fft, hop, win)` of each analysis resolution.
pub const MRS_RESOLUTIONS: [StftSpec; 3] = [
    StftSpec { n_fft: 512, hop: 50, win: 240 },
    StftSpec { n_fft: 1024, hop: 120, win: 600 },
    StftSpec { n_fft: 2048, hop: 240, win: 1200 },
];

/// Per-resolution components of the distance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpectralTerms {
    /// `‖|X|−|Y|‖_F / ‖|X|‖_F` with `X` the reference.
    pub convergence: f64,
    /// Mean `|ln|X| − ln|Y||`; symmetric in its arguments.
    pub log_magnitude: f64,
}

fn check_pair(reference: &Waveform, other: &Waveform) -> Result<()> {
    if reference.sample_rate_hz != other.sample_rate_hz {
        return Err(Error::SampleRate { got: other.sample_rate_hz, expected: reference.sample_rate_hz });
    }
    if reference.len() != other.len() {
        return Err(Error::Shape(format!(
            "spectral distance needs equal lengths, got {} and {}",
            reference.len(),
            other.len()
        )));
    }
    if reference.is_empty() {
        return Err(Error::Empty("spectral distance of empty signals"));
    }
    Ok(())
}

/// Both terms at every resolution, reference first.
pub fn spectral_terms(reference: &Waveform, other: &Waveform) -> Result<Vec<SpectralTerms>> {
    check_pair(reference, other)?;
    let tape = Tape::new();
    let shape = [1, reference.len()];
    let x = tape.constant(Tensor::new(&shape, reference.samples.clone()));
    let y = tape.constant(Tensor::new(&shape, other.samples.clone()));
    Ok(MRS_RESOLUTIONS
        .iter()
        .map(|spec| {
            let (sc, lm) = resolution_terms(x, y, *spec);
            SpectralTerms { convergence: sc.item(), log_magnitude: lm.item() }
        })
        .collect())
}

/// Sum over resolutions of spectral convergence plus log-magnitude L1; `reference` is the ground truth.
pub fn multi_res_spectral_distance(reference: &Waveform, other: &Waveform) -> Result<f64> {
    Ok(spectral_terms(reference, other)?.iter().map(|t| t.convergence + t.log_magnitude).sum())
}

fn resolution_terms<'t>(reference: Var<'t>, other: Var<'t>, spec: StftSpec) -> (Var<'t>, Var<'t>) {
    let mx = reference.stft_mag(spec);
    let my = other.stft_mag(spec);
    let sc = mx.sub(my).sqr().sum().sqrt().div(mx.sqr().sum().sqrt());
    let lm = mx.ln().sub(my.ln()).abs().mean();
    (sc, lm)
}

/// Differentiable distance over `[B, T]` batches (Frobenius norms taken over the whole batch).
pub fn multi_res_spectral_var<'t>(reference: Var<'t>, other: Var<'t>) -> Var<'t> {
    let mut total: Option<Var<'t>> = None;
    for spec in MRS_RESOLUTIONS {
        let (sc, lm) = resolution_terms(reference, other, spec);
        let term = sc.add(lm);
        total = Some(match total {
            Some(t) => t.add(term),
            None => term,
        });
    }
    total.expect("at least one resolution")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sine(n: usize) -> Vec<f64> {
        (0..n).map(|i| 0.4 * (2.0 * std::f64::consts::PI * 330.0 * i as f64 / 24000.0).sin()).collect()
    }

    #[test]
    fn identical_signals_are_zero_distance() {
        let w = Waveform::new(sine(6000), 24000).unwrap();
        assert!(multi_res_spectral_distance(&w, &w).unwrap().abs() < 1e-6);
    }

    #[test]
    fn monotone_in_noise_level() {
        let x = sine(12000);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let noise: Vec<f64> = (0..x.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let reference = Waveform::new(x.clone(), 24000).unwrap();
        let d: Vec<f64> = [0.01, 0.1, 0.5]
            .iter()
            .map(|eps| {
                let y = x.iter().zip(&noise).map(|(a, n)| a + eps * n).collect();
                multi_res_spectral_distance(&reference, &Waveform::new(y, 24000).unwrap()).unwrap()
            })
            .collect();
        assert!(d[0] < d[1] && d[1] < d[2], "{d:?}");
    }

    #[test]
    fn log_magnitude_term_is_symmetric() {
        let x = Waveform::new(sine(4000), 24000).unwrap();
        let y = Waveform::new(sine(4000).iter().map(|v| v * 0.3 + 0.01).collect(), 24000).unwrap();
        let (a, b) = (spectral_terms(&x, &y).unwrap(), spectral_terms(&y, &x).unwrap());
        for (p, q) in a.iter().zip(&b) {
            assert!((p.log_magnitude - q.log_magnitude).abs() < 1e-12);
            assert!(p.convergence >= 0.0);
        }
    }

    #[test]
    fn length_mismatch_is_an_error() {
        let x = Waveform::new(vec![0.0; 10], 24000).unwrap();
        let y = Waveform::new(vec![0.0; 11], 24000).unwrap();
        assert!(matches!(multi_res_spectral_distance(&x, &y), Err(Error::Shape(_))));
    }
}
