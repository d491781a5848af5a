use crate::error::{Error, Result};

/// One level of the orthonormal Haar transform: `(approx, detail)`.
pub fn haar_dwt(signal: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    if signal.len() % 2 != 0 {
        return Err(Error::Invalid(format!(
            "Haar DWT needs an even-length signal, got {} samples",
            signal.len()
        )));
    }
    let s = std::f64::consts::FRAC_1_SQRT_2;
    Ok(signal.chunks_exact(2).map(|p| ((p[0] + p[1]) * s, (p[0] - p[1]) * s)).unzip())
}

/// Inverse of [`haar_dwt`].
pub fn haar_idwt(approx: &[f64], detail: &[f64]) -> Result<Vec<f64>> {
    if approx.len() != detail.len() {
        return Err(Error::Shape(format!(
            "approx has {} coefficients, detail has {}",
            approx.len(),
            detail.len()
        )));
    }
    let s = std::f64::consts::FRAC_1_SQRT_2;
    Ok(approx.iter().zip(detail).flat_map(|(a, d)| [(a + d) * s, (a - d) * s]).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const SQRT2: f64 = std::f64::consts::SQRT_2;

    #[test]
    fn constant_has_no_detail() {
        let (a, d) = haar_dwt(&[1.0; 4]).unwrap();
        assert!(a.iter().all(|v| (v - SQRT2).abs() < 1e-15));
        assert_eq!(d, vec![0.0, 0.0]);
    }

    #[test]
    fn two_sample_formula() {
        let (a, d) = haar_dwt(&[3.0, 1.0]).unwrap();
        assert!((a[0] - 2.0 * SQRT2).abs() < 1e-15);
        assert!((d[0] - SQRT2).abs() < 1e-15);
    }

    #[test]
    fn odd_length_is_rejected() {
        assert!(matches!(haar_dwt(&[1.0, 2.0, 3.0]), Err(Error::Invalid(_))));
        assert!(matches!(haar_idwt(&[1.0], &[]), Err(Error::Shape(_))));
    }

    proptest! {
        #[test]
        fn perfect_reconstruction_and_parseval(x in prop::collection::vec(-1.0f64..1.0, 1..256)) {
            let mut x = x;
            if x.len() % 2 == 1 { x.pop(); }
            let (a, d) = haar_dwt(&x).unwrap();
            let y = haar_idwt(&a, &d).unwrap();
            let err = x.iter().zip(&y).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
            prop_assert!(err < 1e-12);
            let ex: f64 = x.iter().map(|v| v * v).sum();
            let eb: f64 = a.iter().chain(&d).map(|v| v * v).sum();
            prop_assert!((ex - eb).abs() < 1e-9);
        }
    }
}
