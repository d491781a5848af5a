//! 1-D convolution and transposed convolution via im2col + GEMM.

use super::linalg::gemm;
use crate::tensor::Tensor;

/// Geometry of a 1-D convolution over the last axis of `[batch, channels, time]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub pad_left: usize,
    pub pad_right: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl ConvGeometry {
    /// Stride 1, symmetric "same" padding for an odd kernel.
    pub fn same(kernel: usize, dilation: usize) -> Self {
        let total = dilation * (kernel - 1);
        Self { stride: 1, pad_left: total / 2, pad_right: total - total / 2, dilation, groups: 1 }
    }

    pub fn output_len(&self, input_len: usize, kernel: usize) -> usize {
        let span = self.dilation * (kernel - 1) + 1;
        let padded = input_len + self.pad_left + self.pad_right;
        assert!(padded >= span, "conv input of length {input_len} shorter than kernel span {span}");
        (padded - span) / self.stride + 1
    }
}

struct Dims {
    batch: usize,
    cin: usize,
    tin: usize,
    cout: usize,
    cin_g: usize,
    cout_g: usize,
    k: usize,
    tout: usize,
}

fn dims(x: &Tensor, w: &Tensor, geom: &ConvGeometry) -> Dims {
    assert_eq!(x.ndim(), 3, "conv1d input must be [B, C, T], got {:?}", x.shape());
    assert_eq!(w.ndim(), 3, "conv1d weight must be [Cout, Cin/g, K], got {:?}", w.shape());
    let (batch, cin, tin) = (x.dim(0), x.dim(1), x.dim(2));
    let (cout, cin_g, k) = (w.dim(0), w.dim(1), w.dim(2));
    let g = geom.groups;
    assert!(g >= 1 && cin % g == 0 && cout % g == 0, "bad group count {g}");
    assert_eq!(cin / g, cin_g, "conv1d channel mismatch: input {:?}, weight {:?}", x.shape(), w.shape());
    let tout = geom.output_len(tin, k);
    Dims { batch, cin, tin, cout, cin_g, cout_g: cout / g, k, tout }
}

/// Fills `cols [cin_g*k, tout]` from one batch/group slice of the input.
fn im2col(xs: &[f64], d: &Dims, geom: &ConvGeometry, cols: &mut [f64]) {
    for c in 0..d.cin_g {
        let row_in = &xs[c * d.tin..(c + 1) * d.tin];
        for kk in 0..d.k {
            let row = &mut cols[(c * d.k + kk) * d.tout..(c * d.k + kk + 1) * d.tout];
            let off = (kk * geom.dilation) as isize - geom.pad_left as isize;
            for (t, slot) in row.iter_mut().enumerate() {
                let src = (t * geom.stride) as isize + off;
                *slot = if src >= 0 && (src as usize) < d.tin { row_in[src as usize] } else { 0.0 };
            }
        }
    }
}

/// Scatter-adds `cols` back into an input-shaped slice (adjoint of [`im2col`]).
fn col2im(cols: &[f64], d: &Dims, geom: &ConvGeometry, xs: &mut [f64]) {
    for c in 0..d.cin_g {
        for kk in 0..d.k {
            let row = &cols[(c * d.k + kk) * d.tout..(c * d.k + kk + 1) * d.tout];
            let off = (kk * geom.dilation) as isize - geom.pad_left as isize;
            for (t, v) in row.iter().enumerate() {
                let dst = (t * geom.stride) as isize + off;
                if dst >= 0 && (dst as usize) < d.tin {
                    xs[c * d.tin + dst as usize] += v;
                }
            }
        }
    }
}

/// Cross-correlation `y[b, o, t] = Σ_{c,k} w[o, c, k] · x[b, c, t·stride + k·dilation − pad_left]`.
pub fn conv1d(x: &Tensor, w: &Tensor, geom: &ConvGeometry) -> Tensor {
    let d = dims(x, w, geom);
    let ck = d.cin_g * d.k;
    let mut out = vec![0.0; d.batch * d.cout * d.tout];
    let mut cols = vec![0.0; ck * d.tout];
    for b in 0..d.batch {
        for g in 0..geom.groups {
            let xs = &x.data()[(b * d.cin + g * d.cin_g) * d.tin..];
            im2col(xs, &d, geom, &mut cols);
            let ws = &w.data()[g * d.cout_g * ck..];
            let ys = &mut out[(b * d.cout + g * d.cout_g) * d.tout..];
            gemm(d.cout_g, ck, d.tout, 1.0, ws, (ck, 1), &cols, (d.tout, 1), 0.0, ys, (d.tout, 1));
        }
    }
    Tensor::new(&[d.batch, d.cout, d.tout], out)
}

/// Gradients of [`conv1d`] with respect to input and weight.
pub fn conv1d_backward(x: &Tensor, w: &Tensor, gy: &Tensor, geom: &ConvGeometry) -> (Tensor, Tensor) {
    let d = dims(x, w, geom);
    let ck = d.cin_g * d.k;
    let mut gx = vec![0.0; x.len()];
    let mut gw = vec![0.0; w.len()];
    let mut cols = vec![0.0; ck * d.tout];
    let mut gcols = vec![0.0; ck * d.tout];
    for b in 0..d.batch {
        for g in 0..geom.groups {
            let xoff = (b * d.cin + g * d.cin_g) * d.tin;
            let gys = &gy.data()[(b * d.cout + g * d.cout_g) * d.tout..];
            let ws = &w.data()[g * d.cout_g * ck..];
            // dW += gy · colsᵀ
            im2col(&x.data()[xoff..], &d, geom, &mut cols);
            gemm(
                d.cout_g,
                d.tout,
                ck,
                1.0,
                gys,
                (d.tout, 1),
                &cols,
                (1, d.tout),
                1.0,
                &mut gw[g * d.cout_g * ck..],
                (ck, 1),
            );
            // dcols = Wᵀ · gy
            gemm(ck, d.cout_g, d.tout, 1.0, ws, (1, ck), gys, (d.tout, 1), 0.0, &mut gcols, (d.tout, 1));
            col2im(&gcols, &d, geom, &mut gx[xoff..xoff + d.cin_g * d.tin]);
        }
    }
    (Tensor::new(x.shape(), gx), Tensor::new(w.shape(), gw))
}

/// Transposed convolution with weight `[Cin, Cout, K]`.
///
/// The uncropped output has length `(Tin − 1)·stride + K`; the returned window is
/// `[crop, crop + out_len)`.
pub fn conv_transpose1d(x: &Tensor, w: &Tensor, stride: usize, crop: usize, out_len: usize) -> Tensor {
    assert_eq!(x.ndim(), 3, "conv_transpose1d input must be [B, C, T]");
    let (batch, cin, tin) = (x.dim(0), x.dim(1), x.dim(2));
    assert_eq!(w.dim(0), cin, "conv_transpose1d channel mismatch: {:?} vs {:?}", x.shape(), w.shape());
    let (cout, k) = (w.dim(1), w.dim(2));
    let full = (tin - 1) * stride + k;
    assert!(crop + out_len <= full, "conv_transpose1d crop window exceeds output length {full}");
    let ck = cout * k;
    let mut cols = vec![0.0; ck * tin];
    let mut out = vec![0.0; batch * cout * out_len];
    for b in 0..batch {
        let xs = &x.data()[b * cin * tin..];
        // cols = Wᵀ · x  : [Cout·K, Cin] · [Cin, Tin]
        gemm(ck, cin, tin, 1.0, w.data(), (1, ck), xs, (tin, 1), 0.0, &mut cols, (tin, 1));
        let ys = &mut out[b * cout * out_len..(b + 1) * cout * out_len];
        for co in 0..cout {
            for kk in 0..k {
                let row = &cols[(co * k + kk) * tin..(co * k + kk + 1) * tin];
                for (t, v) in row.iter().enumerate() {
                    let pos = t * stride + kk;
                    if pos >= crop && pos < crop + out_len {
                        ys[co * out_len + pos - crop] += v;
                    }
                }
            }
        }
    }
    Tensor::new(&[batch, cout, out_len], out)
}

pub fn conv_transpose1d_backward(
    x: &Tensor,
    w: &Tensor,
    gy: &Tensor,
    stride: usize,
    crop: usize,
) -> (Tensor, Tensor) {
    let (batch, cin, tin) = (x.dim(0), x.dim(1), x.dim(2));
    let (cout, k) = (w.dim(1), w.dim(2));
    let out_len = gy.dim(2);
    let ck = cout * k;
    let mut gcols = vec![0.0; ck * tin];
    let mut gx = vec![0.0; x.len()];
    let mut gw = vec![0.0; w.len()];
    for b in 0..batch {
        let gys = &gy.data()[b * cout * out_len..(b + 1) * cout * out_len];
        for co in 0..cout {
            for kk in 0..k {
                let row = &mut gcols[(co * k + kk) * tin..(co * k + kk + 1) * tin];
                for (t, slot) in row.iter_mut().enumerate() {
                    let pos = t * stride + kk;
                    *slot = if pos >= crop && pos < crop + out_len {
                        gys[co * out_len + pos - crop]
                    } else {
                        0.0
                    };
                }
            }
        }
        let xs = &x.data()[b * cin * tin..];
        // dx = W · dcols : [Cin, Cout·K] · [Cout·K, Tin]
        gemm(cin, ck, tin, 1.0, w.data(), (ck, 1), &gcols, (tin, 1), 0.0, &mut gx[b * cin * tin..], (tin, 1));
        // dW += x · dcolsᵀ : [Cin, Tin] · [Tin, Cout·K]
        gemm(cin, tin, ck, 1.0, xs, (tin, 1), &gcols, (1, tin), 1.0, &mut gw, (ck, 1));
    }
    (Tensor::new(x.shape(), gx), Tensor::new(w.shape(), gw))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &Tensor, w: &Tensor, geom: &ConvGeometry) -> Tensor {
        let (b, cin, tin) = (x.dim(0), x.dim(1), x.dim(2));
        let (cout, cin_g, k) = (w.dim(0), w.dim(1), w.dim(2));
        let cout_g = cout / geom.groups;
        let tout = geom.output_len(tin, k);
        Tensor::from_fn(&[b, cout, tout], |i| {
            let (bi, rest) = (i / (cout * tout), i % (cout * tout));
            let (o, t) = (rest / tout, rest % tout);
            let g = o / cout_g;
            let mut acc = 0.0;
            for c in 0..cin_g {
                for kk in 0..k {
                    let src = (t * geom.stride + kk * geom.dilation) as isize - geom.pad_left as isize;
                    if src >= 0 && (src as usize) < tin {
                        let ci = g * cin_g + c;
                        acc += w.data()[(o * cin_g + c) * k + kk] * x.data()[(bi * cin + ci) * tin + src as usize];
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn matches_naive_with_groups_stride_dilation() {
        let x = Tensor::from_fn(&[2, 4, 11], |i| ((i * 7919) % 13) as f64 - 6.0);
        let w = Tensor::from_fn(&[6, 2, 3], |i| ((i * 104729) % 7) as f64 - 3.0);
        let geom = ConvGeometry { stride: 2, pad_left: 2, pad_right: 1, dilation: 2, groups: 2 };
        assert_eq!(conv1d(&x, &w, &geom), naive_conv(&x, &w, &geom));
    }

    #[test]
    fn transpose_is_adjoint_of_conv() {
        // <conv(x), y> == <x, convT(y)> for matching geometry and crop.
        let (stride, k) = (3, 6);
        let x = Tensor::from_fn(&[1, 2, 12], |i| (i as f64 * 0.37).sin());
        let w = Tensor::from_fn(&[3, 2, k], |i| (i as f64 * 0.11).cos());
        let crop = stride / 2;
        let geom = ConvGeometry { stride, pad_left: crop, pad_right: k, dilation: 1, groups: 1 };
        let y = conv1d(&x, &w, &geom);
        let probe = Tensor::from_fn(y.shape(), |i| (i as f64 * 0.23).sin());
        let lhs: f64 = y.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum();
        // w as [Cout, Cin, K] is a valid transposed-conv weight [Cin', Cout', K] for probe.
        let xt = conv_transpose1d(&probe, &w, stride, crop, 12);
        let rhs: f64 = x.data().iter().zip(xt.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9, "{lhs} vs {rhs}");
    }
}
