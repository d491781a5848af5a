use crate::tensor::Tensor;

/// Layer normalization over the last axis with affine `gamma`, `beta` of that length.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Tensor {
    let d = *x.shape().last().expect("layer_norm on scalar");
    assert_eq!(gamma.len(), d, "layer_norm gamma length");
    assert_eq!(beta.len(), d, "layer_norm beta length");
    let mut out = vec![0.0; x.len()];
    for (row, dst) in x.data().chunks(d).zip(out.chunks_mut(d)) {
        let (mean, rstd) = moments(row, eps);
        for i in 0..d {
            dst[i] = (row[i] - mean) * rstd * gamma.data()[i] + beta.data()[i];
        }
    }
    Tensor::new(x.shape(), out)
}

fn moments(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}

pub fn layer_norm_backward(x: &Tensor, gamma: &Tensor, gy: &Tensor, eps: f64) -> (Tensor, Tensor, Tensor) {
    let d = gamma.len();
    let mut gx = vec![0.0; x.len()];
    let mut gg = vec![0.0; d];
    let mut gb = vec![0.0; d];
    let mut xhat = vec![0.0; d];
    let mut dxhat = vec![0.0; d];
    for ((row, grow), dst) in x.data().chunks(d).zip(gy.data().chunks(d)).zip(gx.chunks_mut(d)) {
        let (mean, rstd) = moments(row, eps);
        for i in 0..d {
            xhat[i] = (row[i] - mean) * rstd;
            dxhat[i] = grow[i] * gamma.data()[i];
            gg[i] += grow[i] * xhat[i];
            gb[i] += grow[i];
        }
        let n = d as f64;
        let m1 = dxhat.iter().sum::<f64>() / n;
        let m2 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / n;
        for i in 0..d {
            dst[i] = rstd * (dxhat[i] - m1 - xhat[i] * m2);
        }
    }
    (Tensor::new(x.shape(), gx), Tensor::new(gamma.shape(), gg), Tensor::new(gamma.shape(), gb))
}

/// Softmax over the last axis.
pub fn softmax(x: &Tensor) -> Tensor {
    let d = *x.shape().last().expect("softmax on scalar");
    let mut out = vec![0.0; x.len()];
    for (row, dst) in x.data().chunks(d).zip(out.chunks_mut(d)) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for (o, &v) in dst.iter_mut().zip(row) {
            *o = (v - max).exp();
            z += *o;
        }
        for o in dst.iter_mut() {
            *o /= z;
        }
    }
    Tensor::new(x.shape(), out)
}

pub fn softmax_backward(y: &Tensor, gy: &Tensor) -> Tensor {
    let d = *y.shape().last().unwrap();
    let mut out = vec![0.0; y.len()];
    for ((yr, gr), dst) in y.data().chunks(d).zip(gy.data().chunks(d)).zip(out.chunks_mut(d)) {
        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
        for i in 0..d {
            dst[i] = yr[i] * (gr[i] - dot);
        }
    }
    Tensor::new(y.shape(), out)
}

/// Separable "valid" 2-D filtering of `[B, R, C]` maps:
/// `out[b, i, j] = Σ_{a,c} kr[a]·kc[c]·x[b, i+a, j+c]`.
pub fn blur2d(x: &Tensor, kr: &[f64], kc: &[f64]) -> Tensor {
    assert_eq!(x.ndim(), 3, "blur2d expects [B, R, C]");
    let (bs, r, c) = (x.dim(0), x.dim(1), x.dim(2));
    assert!(kr.len() <= r && kc.len() <= c, "blur window larger than map");
    let (ro, co) = (r - kr.len() + 1, c - kc.len() + 1);
    let mut tmp = vec![0.0; r * co];
    let mut out = vec![0.0; bs * ro * co];
    for b in 0..bs {
        let xs = &x.data()[b * r * c..(b + 1) * r * c];
        for i in 0..r {
            for j in 0..co {
                tmp[i * co + j] = kc.iter().enumerate().map(|(k, w)| w * xs[i * c + j + k]).sum();
            }
        }
        let ys = &mut out[b * ro * co..(b + 1) * ro * co];
        for i in 0..ro {
            for (a, w) in kr.iter().enumerate() {
                for j in 0..co {
                    ys[i * co + j] += w * tmp[(i + a) * co + j];
                }
            }
        }
    }
    Tensor::new(&[bs, ro, co], out)
}

/// Adjoint of [`blur2d`] back onto an input of `shape`.
pub fn blur2d_adjoint(g: &Tensor, shape: &[usize], kr: &[f64], kc: &[f64]) -> Tensor {
    let (bs, r, c) = (shape[0], shape[1], shape[2]);
    let (ro, co) = (g.dim(1), g.dim(2));
    let mut tmp = vec![0.0; r * co];
    let mut out = vec![0.0; bs * r * c];
    for b in 0..bs {
        tmp.iter_mut().for_each(|v| *v = 0.0);
        let gs = &g.data()[b * ro * co..(b + 1) * ro * co];
        for i in 0..ro {
            for (a, w) in kr.iter().enumerate() {
                for j in 0..co {
                    tmp[(i + a) * co + j] += w * gs[i * co + j];
                }
            }
        }
        let xs = &mut out[b * r * c..(b + 1) * r * c];
        for i in 0..r {
            for j in 0..co {
                let v = tmp[i * co + j];
                for (k, w) in kc.iter().enumerate() {
                    xs[i * c + j + k] += w * v;
                }
            }
        }
    }
    Tensor::new(shape, out)
}
