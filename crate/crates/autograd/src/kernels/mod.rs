//! Forward and adjoint kernels behind the tape operations.
//!
//! Everything here works on plain [`Tensor`]s and is usable without a tape.

mod conv;
mod linalg;
mod norm;
mod spectral;

pub use conv::{conv1d, conv1d_backward, conv_transpose1d, conv_transpose1d_backward, ConvGeometry};
pub use linalg::{bmm, bmm_grads, gemm, matmul, matmul_grad_a, matmul_grad_b};
pub use norm::{blur2d, blur2d_adjoint, layer_norm, layer_norm_backward, softmax, softmax_backward};
pub use spectral::{
    frame_count, haar_dwt_channels, haar_dwt_channels_inverse, hann_window, stft, stft_mag,
    stft_mag_backward, StftSpec,
};

use crate::tensor::{strides_of, Tensor};

/// Left-pads `b` with unit axes to `out.len()` dims and returns its broadcast strides
/// (zero on broadcast axes). Panics if `b` is not broadcastable onto `out`.
fn broadcast_strides(out: &[usize], b: &[usize]) -> Vec<usize> {
    assert!(b.len() <= out.len(), "cannot broadcast {b:?} onto {out:?}");
    let pad = out.len() - b.len();
    let mut full = vec![1; pad];
    full.extend_from_slice(b);
    let st = strides_of(&full);
    full.iter()
        .zip(out)
        .zip(st)
        .map(|((&bd, &od), s)| {
            assert!(bd == od || bd == 1, "cannot broadcast {b:?} onto {out:?}");
            if bd == 1 {
                0
            } else {
                s
            }
        })
        .collect()
}

/// Calls `f(out_index, b_index)` for every element of `out_shape`.
fn for_each_broadcast(out_shape: &[usize], b_shape: &[usize], mut f: impl FnMut(usize, usize)) {
    let n: usize = out_shape.iter().product();
    if n == 0 {
        return;
    }
    let bst = broadcast_strides(out_shape, b_shape);
    let nd = out_shape.len();
    if nd == 0 {
        f(0, 0);
        return;
    }
    let inner = out_shape[nd - 1];
    let inner_stride = bst[nd - 1];
    let mut counter = vec![0usize; nd];
    let mut base = 0usize;
    let mut i = 0usize;
    while i < n {
        for k in 0..inner {
            f(i + k, base + k * inner_stride);
        }
        i += inner;
        // advance the odometer over the outer axes
        let mut ax = nd - 1;
        while ax > 0 {
            ax -= 1;
            counter[ax] += 1;
            base += bst[ax];
            if counter[ax] < out_shape[ax] {
                break;
            }
            base -= bst[ax] * counter[ax];
            counter[ax] = 0;
        }
    }
}

/// `a ⊙ b` where `b` broadcasts onto `a`'s shape.
pub fn broadcast_binary(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    if a.shape() == b.shape() {
        return a.zip_map(b, f);
    }
    let mut out = vec![0.0; a.len()];
    let (ad, bd) = (a.data(), b.data());
    for_each_broadcast(a.shape(), b.shape(), |i, j| out[i] = f(ad[i], bd[j]));
    Tensor::new(a.shape(), out)
}

/// Sums `g` down onto `shape`, the adjoint of broadcasting `shape` up to `g.shape()`.
pub fn reduce_to_shape(g: &Tensor, shape: &[usize]) -> Tensor {
    if g.shape() == shape {
        return g.clone();
    }
    let mut out = vec![0.0; shape.iter().product()];
    let gd = g.data();
    for_each_broadcast(g.shape(), shape, |i, j| out[j] += gd[i]);
    Tensor::new(shape, out)
}

/// Sums over `axis`, keeping it with length 1.
pub fn sum_axis(x: &Tensor, axis: usize) -> Tensor {
    let shape = x.shape();
    let outer: usize = shape[..axis].iter().product();
    let n = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let mut out = vec![0.0; outer * inner];
    let d = x.data();
    for o in 0..outer {
        for k in 0..n {
            let src = &d[(o * n + k) * inner..(o * n + k + 1) * inner];
            let dst = &mut out[o * inner..(o + 1) * inner];
            for (a, b) in dst.iter_mut().zip(src) {
                *a += b;
            }
        }
    }
    let mut out_shape = shape.to_vec();
    out_shape[axis] = 1;
    Tensor::new(&out_shape, out)
}

/// Repeats a keep-dim reduction `g` along `axis` back to `shape`.
pub fn expand_axis(g: &Tensor, shape: &[usize], axis: usize) -> Tensor {
    let outer: usize = shape[..axis].iter().product();
    let n = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let mut out = vec![0.0; outer * n * inner];
    let gd = g.data();
    for o in 0..outer {
        for k in 0..n {
            out[(o * n + k) * inner..(o * n + k + 1) * inner]
                .copy_from_slice(&gd[o * inner..(o + 1) * inner]);
        }
    }
    Tensor::new(shape, out)
}

/// General axis permutation: output axis `i` is input axis `perm[i]`.
pub fn permute(x: &Tensor, perm: &[usize]) -> Tensor {
    let nd = x.ndim();
    assert_eq!(perm.len(), nd, "permutation rank mismatch");
    let in_st = x.strides();
    let out_shape: Vec<usize> = perm.iter().map(|&p| x.dim(p)).collect();
    let src_st: Vec<usize> = perm.iter().map(|&p| in_st[p]).collect();
    let n = x.len();
    let mut out = Vec::with_capacity(n);
    let d = x.data();
    if nd == 0 {
        return x.clone();
    }
    let mut counter = vec![0usize; nd];
    let mut src = 0usize;
    for _ in 0..n {
        out.push(d[src]);
        let mut ax = nd;
        while ax > 0 {
            ax -= 1;
            counter[ax] += 1;
            src += src_st[ax];
            if counter[ax] < out_shape[ax] {
                break;
            }
            src -= src_st[ax] * counter[ax];
            counter[ax] = 0;
        }
    }
    Tensor::new(&out_shape, out)
}

/// Slice `[start, start+len)` along `axis`.
pub fn narrow(x: &Tensor, axis: usize, start: usize, len: usize) -> Tensor {
    let shape = x.shape();
    assert!(start + len <= shape[axis], "narrow out of range on axis {axis} of {shape:?}");
    let outer: usize = shape[..axis].iter().product();
    let n = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let mut out = Vec::with_capacity(outer * len * inner);
    let d = x.data();
    for o in 0..outer {
        out.extend_from_slice(&d[(o * n + start) * inner..(o * n + start + len) * inner]);
    }
    let mut out_shape = shape.to_vec();
    out_shape[axis] = len;
    Tensor::new(&out_shape, out)
}

/// Adjoint of [`narrow`]: embeds `g` into zeros of `shape`.
pub fn unnarrow(g: &Tensor, shape: &[usize], axis: usize, start: usize) -> Tensor {
    let outer: usize = shape[..axis].iter().product();
    let n = shape[axis];
    let len = g.dim(axis);
    let inner: usize = shape[axis + 1..].iter().product();
    let mut out = vec![0.0; shape.iter().product()];
    let gd = g.data();
    for o in 0..outer {
        out[(o * n + start) * inner..(o * n + start + len) * inner]
            .copy_from_slice(&gd[o * len * inner..(o + 1) * len * inner]);
    }
    Tensor::new(shape, out)
}

pub fn concat(xs: &[&Tensor], axis: usize) -> Tensor {
    assert!(!xs.is_empty(), "concat of nothing");
    let first = xs[0].shape();
    let outer: usize = first[..axis].iter().product();
    let inner: usize = first[axis + 1..].iter().product();
    let mut total = 0;
    for x in xs {
        let s = x.shape();
        assert!(
            s.len() == first.len()
                && s[..axis] == first[..axis]
                && s[axis + 1..] == first[axis + 1..],
            "concat shape mismatch: {s:?} vs {first:?}"
        );
        total += s[axis];
    }
    let mut out = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for x in xs {
            let n = x.dim(axis);
            out.extend_from_slice(&x.data()[o * n * inner..(o + 1) * n * inner]);
        }
    }
    let mut shape = first.to_vec();
    shape[axis] = total;
    Tensor::new(&shape, out)
}

/// Rows of `x` (axis 0) selected by `idx`, repeats allowed.
pub fn gather_rows(x: &Tensor, idx: &[usize]) -> Tensor {
    let rows = x.dim(0);
    let inner = x.len() / rows.max(1);
    let mut out = Vec::with_capacity(idx.len() * inner);
    for &i in idx {
        assert!(i < rows, "row index {i} out of range for {rows} rows");
        out.extend_from_slice(&x.data()[i * inner..(i + 1) * inner]);
    }
    let mut shape = x.shape().to_vec();
    shape[0] = idx.len();
    Tensor::new(&shape, out)
}

/// Adjoint of [`gather_rows`].
pub fn scatter_rows(g: &Tensor, shape: &[usize], idx: &[usize]) -> Tensor {
    let inner: usize = shape[1..].iter().product();
    let mut out = vec![0.0; shape.iter().product()];
    for (k, &i) in idx.iter().enumerate() {
        let src = &g.data()[k * inner..(k + 1) * inner];
        for (a, b) in out[i * inner..(i + 1) * inner].iter_mut().zip(src) {
            *a += b;
        }
    }
    Tensor::new(shape, out)
}

/// Zero-pads the last axis.
pub fn pad_last(x: &Tensor, left: usize, right: usize) -> Tensor {
    let shape = x.shape();
    let t = *shape.last().expect("pad_last on a scalar");
    let outer = x.len() / t.max(1);
    let nt = t + left + right;
    let mut out = vec![0.0; outer * nt];
    for o in 0..outer {
        out[o * nt + left..o * nt + left + t].copy_from_slice(&x.data()[o * t..(o + 1) * t]);
    }
    let mut s = shape.to_vec();
    *s.last_mut().unwrap() = nt;
    Tensor::new(&s, out)
}
