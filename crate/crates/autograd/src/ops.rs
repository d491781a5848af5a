//! Differentiable operations on [`Var`].

use crate::kernels::{self, ConvGeometry, StftSpec};
use crate::tape::{Op, Unary, Var};
use crate::tensor::Tensor;

impl<'t> Var<'t> {
    fn unary(self, u: Unary) -> Var<'t> {
        let v = self.value().map(|x| u.apply(x));
        self.push(v, Op::Unary(self.id, u), &[self.id])
    }

    /// `self + other`; `other` may broadcast onto `self`'s shape.
    pub fn add(self, other: Var<'t>) -> Var<'t> {
        let v = kernels::broadcast_binary(&self.value(), &other.value(), |a, b| a + b);
        self.push(v, Op::Add(self.id, other.id), &[self.id, other.id])
    }

    /// `self − other`; `other` may broadcast onto `self`'s shape.
    pub fn sub(self, other: Var<'t>) -> Var<'t> {
        let v = kernels::broadcast_binary(&self.value(), &other.value(), |a, b| a - b);
        self.push(v, Op::Sub(self.id, other.id), &[self.id, other.id])
    }

    /// Elementwise product; `other` may broadcast onto `self`'s shape.
    pub fn mul(self, other: Var<'t>) -> Var<'t> {
        let v = kernels::broadcast_binary(&self.value(), &other.value(), |a, b| a * b);
        self.push(v, Op::Mul(self.id, other.id), &[self.id, other.id])
    }

    /// Elementwise quotient of equal-shape operands.
    pub fn div(self, other: Var<'t>) -> Var<'t> {
        let v = self.value().zip_map(&other.value(), |a, b| a / b);
        self.push(v, Op::Div(self.id, other.id), &[self.id, other.id])
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        let v = self.value().map(|x| x * c);
        self.push(v, Op::Scale(self.id, c), &[self.id])
    }

    pub fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        let v = self.value().map(|x| x + c);
        self.push(v, Op::AddScalar(self.id), &[self.id])
    }

    pub fn tanh(self) -> Var<'t> {
        self.unary(Unary::Tanh)
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(Unary::Sigmoid)
    }

    pub fn relu(self) -> Var<'t> {
        self.unary(Unary::Relu)
    }

    pub fn leaky_relu(self, slope: f64) -> Var<'t> {
        self.unary(Unary::LeakyRelu(slope))
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(Unary::Exp)
    }

    pub fn ln(self) -> Var<'t> {
        self.unary(Unary::Log)
    }

    pub fn abs(self) -> Var<'t> {
        self.unary(Unary::Abs)
    }

    pub fn sqr(self) -> Var<'t> {
        self.unary(Unary::Sqr)
    }

    pub fn sqrt(self) -> Var<'t> {
        self.unary(Unary::Sqrt)
    }

    pub fn silu(self) -> Var<'t> {
        self.unary(Unary::Silu)
    }

    pub fn sum(self) -> Var<'t> {
        let v = Tensor::scalar(self.value().sum());
        self.push(v, Op::SumAll(self.id), &[self.id])
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.value().len() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Sum over `axis`, keeping it with length 1.
    pub fn sum_axis(self, axis: usize) -> Var<'t> {
        let v = kernels::sum_axis(&self.value(), axis);
        self.push(v, Op::SumAxis { x: self.id, axis }, &[self.id])
    }

    pub fn mean_axis(self, axis: usize) -> Var<'t> {
        let n = self.value().dim(axis) as f64;
        self.sum_axis(axis).scale(1.0 / n)
    }

    /// `[..., m, k] · [k, n]`.
    pub fn matmul(self, w: Var<'t>) -> Var<'t> {
        let v = kernels::matmul(&self.value(), &w.value());
        self.push(v, Op::MatMul { a: self.id, b: w.id }, &[self.id, w.id])
    }

    /// Batched `[B, m, k] · [B, k, n]`.
    pub fn bmm(self, other: Var<'t>) -> Var<'t> {
        let v = kernels::bmm(&self.value(), &other.value());
        self.push(v, Op::BatchMatMul { a: self.id, b: other.id }, &[self.id, other.id])
    }

    pub fn permute(self, perm: &[usize]) -> Var<'t> {
        let v = kernels::permute(&self.value(), perm);
        self.push(v, Op::Permute { x: self.id, perm: perm.to_vec() }, &[self.id])
    }

    /// Swaps the two trailing axes.
    pub fn transpose(self) -> Var<'t> {
        let nd = self.value().ndim();
        let mut perm: Vec<usize> = (0..nd).collect();
        perm.swap(nd - 2, nd - 1);
        self.permute(&perm)
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'t> {
        let v = (*self.value()).clone().reshape(shape);
        self.push(v, Op::Reshape { x: self.id }, &[self.id])
    }

    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Var<'t> {
        let v = kernels::narrow(&self.value(), axis, start, len);
        self.push(v, Op::Narrow { x: self.id, axis, start }, &[self.id])
    }

    pub fn concat(parts: &[Var<'t>], axis: usize) -> Var<'t> {
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let refs: Vec<&Tensor> = values.iter().map(|v| v.as_ref()).collect();
        let v = kernels::concat(&refs, axis);
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        parts[0].push(v, Op::Concat { xs: ids.clone(), axis }, &ids)
    }

    /// Selects rows along axis 0; indices may repeat.
    pub fn gather_rows(self, idx: &[usize]) -> Var<'t> {
        let v = kernels::gather_rows(&self.value(), idx);
        self.push(v, Op::GatherRows { x: self.id, idx: idx.to_vec() }, &[self.id])
    }

    /// 1-D cross-correlation of `[B, Cin, T]` with weight `[Cout, Cin/groups, K]`.
    pub fn conv1d(self, w: Var<'t>, geom: ConvGeometry) -> Var<'t> {
        let v = kernels::conv1d(&self.value(), &w.value(), &geom);
        self.push(v, Op::Conv1d { x: self.id, w: w.id, geom }, &[self.id, w.id])
    }

    /// Transposed convolution with weight `[Cin, Cout, K]`, output window `[crop, crop+out_len)`.
    pub fn conv_transpose1d(self, w: Var<'t>, stride: usize, crop: usize, out_len: usize) -> Var<'t> {
        let v = kernels::conv_transpose1d(&self.value(), &w.value(), stride, crop, out_len);
        self.push(v, Op::ConvTranspose1d { x: self.id, w: w.id, stride, crop }, &[self.id, w.id])
    }

    /// Zero-pads the last axis.
    pub fn pad_last(self, left: usize, right: usize) -> Var<'t> {
        let v = kernels::pad_last(&self.value(), left, right);
        self.push(v, Op::PadLast { x: self.id, left }, &[self.id])
    }

    pub fn layer_norm(self, gamma: Var<'t>, beta: Var<'t>, eps: f64) -> Var<'t> {
        let v = kernels::layer_norm(&self.value(), &gamma.value(), &beta.value(), eps);
        self.push(
            v,
            Op::LayerNorm { x: self.id, gamma: gamma.id, beta: beta.id, eps },
            &[self.id, gamma.id, beta.id],
        )
    }

    /// Softmax over the last axis.
    pub fn softmax(self) -> Var<'t> {
        let v = kernels::softmax(&self.value());
        self.push(v, Op::Softmax { x: self.id }, &[self.id])
    }

    /// Forward value is `value`; the gradient passes to `self` unchanged.
    pub fn straight_through(self, value: Tensor) -> Var<'t> {
        assert_eq!(value.shape(), self.value().shape(), "straight_through shape mismatch");
        self.push(value, Op::StraightThrough { x: self.id }, &[self.id])
    }

    /// Clamped STFT magnitudes of a `[B, T]` batch: `[B, frames, bins]`.
    pub fn stft_mag(self, spec: StftSpec) -> Var<'t> {
        let v = kernels::stft_mag(&self.value(), &spec);
        self.push(v, Op::StftMag { x: self.id, spec }, &[self.id])
    }

    /// One Haar analysis level of `[B, C, T]` into `[B, 2C, T/2]`.
    pub fn haar_dwt(self) -> Var<'t> {
        let v = kernels::haar_dwt_channels(&self.value());
        self.push(v, Op::HaarDwt { x: self.id }, &[self.id])
    }

    /// Separable valid filtering of `[B, R, C]` maps.
    pub fn blur2d(self, kr: &[f64], kc: &[f64]) -> Var<'t> {
        let v = kernels::blur2d(&self.value(), kr, kc);
        self.push(v, Op::Blur2d { x: self.id, kr: kr.to_vec(), kc: kc.to_vec() }, &[self.id])
    }
}
