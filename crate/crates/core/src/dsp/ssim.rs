use vqspeech_autograd::{Tape, Tensor, Var};

use crate::error::{Error, Result};

/// Side length of the Gaussian SSIM window.
pub const SSIM_WINDOW: usize = 7;
/// Standard deviation of the Gaussian SSIM window.
pub const SSIM_SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

/// Unit-sum 1-D Gaussian of `size` taps (the 2-D window is its outer product).
pub fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let mid = (size as f64 - 1.0) / 2.0;
    let w: Vec<f64> = (0..size).map(|i| (-(i as f64 - mid).powi(2) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Mean local SSIM of two equally shaped `[R, C]` maps already scaled to `[0, 1]`.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() || a.ndim() != 2 {
        return Err(Error::Shape(format!(
            "ssim needs two equal 2-D maps, got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    if a.is_empty() {
        return Err(Error::Empty("ssim of an empty map"));
    }
    let tape = Tape::new();
    let shape = [1, a.dim(0), a.dim(1)];
    let va = tape.constant(a.clone().reshape(&shape));
    let vb = tape.constant(b.clone().reshape(&shape));
    Ok(ssim_var(va, vb).item())
}

/// Differentiable mean SSIM over `[B, R, C]` maps. The window is clipped to
/// the map size along each axis and statistics use only fully covered positions.
pub fn ssim_var<'t>(a: Var<'t>, b: Var<'t>) -> Var<'t> {
    let (r, c) = (a.dim(1), a.dim(2));
    let kr = gaussian_window(SSIM_WINDOW.min(r), SSIM_SIGMA);
    let kc = gaussian_window(SSIM_WINDOW.min(c), SSIM_SIGMA);
    let blur = |x: Var<'t>| x.blur2d(&kr, &kc);
    let (mu_a, mu_b) = (blur(a), blur(b));
    let (mu_aa, mu_bb, mu_ab) = (mu_a.sqr(), mu_b.sqr(), mu_a.mul(mu_b));
    let var_a = blur(a.sqr()).sub(mu_aa);
    let var_b = blur(b.sqr()).sub(mu_bb);
    let cov = blur(a.mul(b)).sub(mu_ab);
    let num = mu_ab.scale(2.0).add_scalar(C1).mul(cov.scale(2.0).add_scalar(C2));
    let den = mu_aa.add(mu_bb).add_scalar(C1).mul(var_a.add(var_b).add_scalar(C2));
    num.div(den).mean()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn identity_and_symmetry() {
        let a = Tensor::from_fn(&[10, 12], |i| ((i * 37) % 11) as f64 / 10.0);
        let b = Tensor::from_fn(&[10, 12], |i| ((i * 53) % 7) as f64 / 6.0);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-6);
        assert_eq!(ssim(&a, &b).unwrap(), ssim(&b, &a).unwrap());
    }

    #[test]
    fn constant_patches_closed_form() {
        let a = Tensor::full(&[8, 9], 0.5);
        let b = Tensor::full(&[8, 9], 0.75);
        let (ma, mb) = (0.5f64, 0.75f64);
        let expected = ((2.0 * ma * mb + C1) * C2) / ((ma * ma + mb * mb + C1) * C2);
        assert!((ssim(&a, &b).unwrap() - expected).abs() < 1e-9);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let a = Tensor::zeros(&[3, 3]);
        let b = Tensor::zeros(&[3, 4]);
        assert!(matches!(ssim(&a, &b), Err(Error::Shape(_))));
    }

    #[test]
    fn small_maps_clip_the_window() {
        let a = Tensor::from_fn(&[2, 3], |i| i as f64 / 5.0);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-6);
    }

    proptest! {
        #[test]
        fn bounded(a in prop::collection::vec(0.0f64..1.0, 64), b in prop::collection::vec(0.0f64..1.0, 64)) {
            let s = ssim(&Tensor::new(&[8, 8], a), &Tensor::new(&[8, 8], b)).unwrap();
            prop_assert!((-1.0..=1.0 + 1e-12).contains(&s));
        }
    }
}
