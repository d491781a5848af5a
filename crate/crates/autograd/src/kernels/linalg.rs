use crate::tensor::Tensor;

/// `c = alpha * a·b + beta * c` over strided row/column views.
///
/// `a` is `m×k` with strides `(rsa, csa)`, `b` is `k×n`, `c` is `m×n`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    let last = |rows: usize, cols: usize, rs: usize, cs: usize| {
        (rows - 1) * rs + (cols - 1) * cs
    };
    assert!(k == 0 || last(m, k, rsa, csa) < a.len(), "gemm: a too small");
    assert!(k == 0 || last(k, n, rsb, csb) < b.len(), "gemm: b too small");
    assert!(last(m, n, rsc, csc) < c.len(), "gemm: c too small");
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                c[i * rsc + j * csc] *= beta;
            }
        }
        return;
    }
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

/// `[..., m, k] · [k, n] -> [..., m, n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(b.ndim(), 2, "matmul rhs must be a matrix, got {:?}", b.shape());
    let k = *a.shape().last().expect("matmul lhs is a scalar");
    assert_eq!(k, b.dim(0), "matmul inner dims: {:?} · {:?}", a.shape(), b.shape());
    let n = b.dim(1);
    let m = a.len() / k.max(1);
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, 1.0, a.data(), (k, 1), b.data(), (n, 1), 0.0, &mut out, (n, 1));
    let mut shape = a.shape().to_vec();
    *shape.last_mut().unwrap() = n;
    Tensor::new(&shape, out)
}

pub fn matmul_grad_a(g: &Tensor, b: &Tensor, a_shape: &[usize]) -> Tensor {
    let (k, n) = (b.dim(0), b.dim(1));
    let m = g.len() / n.max(1);
    let mut out = vec![0.0; m * k];
    // g [m,n] · bᵀ [n,k]
    gemm(m, n, k, 1.0, g.data(), (n, 1), b.data(), (1, n), 0.0, &mut out, (k, 1));
    Tensor::new(a_shape, out)
}

pub fn matmul_grad_b(g: &Tensor, a: &Tensor, b_shape: &[usize]) -> Tensor {
    let (k, n) = (b_shape[0], b_shape[1]);
    let m = a.len() / k.max(1);
    let mut out = vec![0.0; k * n];
    // aᵀ [k,m] · g [m,n]
    gemm(k, m, n, 1.0, a.data(), (1, k), g.data(), (n, 1), 0.0, &mut out, (n, 1));
    Tensor::new(b_shape, out)
}

/// Batched `[B, m, k] · [B, k, n] -> [B, m, n]`.
pub fn bmm(a: &Tensor, b: &Tensor) -> Tensor {
    assert!(a.ndim() == 3 && b.ndim() == 3, "bmm needs rank-3 operands");
    let (bs, m, k) = (a.dim(0), a.dim(1), a.dim(2));
    assert_eq!(b.dim(0), bs, "bmm batch mismatch");
    assert_eq!(b.dim(1), k, "bmm inner mismatch: {:?} · {:?}", a.shape(), b.shape());
    let n = b.dim(2);
    let mut out = vec![0.0; bs * m * n];
    for i in 0..bs {
        gemm(
            m,
            k,
            n,
            1.0,
            &a.data()[i * m * k..],
            (k, 1),
            &b.data()[i * k * n..],
            (n, 1),
            0.0,
            &mut out[i * m * n..],
            (n, 1),
        );
    }
    Tensor::new(&[bs, m, n], out)
}

pub fn bmm_grads(g: &Tensor, a: &Tensor, b: &Tensor) -> (Tensor, Tensor) {
    let (bs, m, k) = (a.dim(0), a.dim(1), a.dim(2));
    let n = b.dim(2);
    let mut ga = vec![0.0; bs * m * k];
    let mut gb = vec![0.0; bs * k * n];
    for i in 0..bs {
        let gi = &g.data()[i * m * n..];
        gemm(m, n, k, 1.0, gi, (n, 1), &b.data()[i * k * n..], (1, n), 0.0, &mut ga[i * m * k..], (k, 1));
        gemm(k, m, n, 1.0, &a.data()[i * m * k..], (1, k), gi, (n, 1), 0.0, &mut gb[i * k * n..], (n, 1));
    }
    (Tensor::new(a.shape(), ga), Tensor::new(b.shape(), gb))
}
