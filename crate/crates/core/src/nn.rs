//! Parameterized building blocks and the optimizer shared by every model.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use vqspeech_autograd::gradcheck::{check_gradients, GradCheckReport};
use vqspeech_autograd::{Binding, ConvGeometry, ParamId, ParamStore, Tensor, Var};

/// Uniform `±1/√fan_in` initialization.
pub fn init_uniform(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.random_range(-bound..bound))
}

/// Uniform init with unit output variance per unit input variance, `±√(3/fan_in)`;
/// used for convolutions so deep stacks do not shrink the signal.
pub fn init_conv(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = (3.0 / fan_in.max(1) as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.random_range(-bound..bound))
}

/// Affine map over the last axis; weight stored `[in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, din: usize, dout: usize, rng: &mut ChaCha8Rng) -> Self {
        let w = store.add(format!("{name}.weight"), init_uniform(rng, &[din, dout], din));
        let b = store.add(format!("{name}.bias"), Tensor::zeros(&[dout]));
        Self { w, b: Some(b) }
    }

    pub fn no_bias(store: &mut ParamStore, name: &str, din: usize, dout: usize, rng: &mut ChaCha8Rng) -> Self {
        let w = store.add(format!("{name}.weight"), init_uniform(rng, &[din, dout], din));
        Self { w, b: None }
    }

    pub fn forward<'t>(&self, p: &Binding<'t>, x: Var<'t>) -> Var<'t> {
        let y = x.matmul(p.get(self.w));
        match self.b {
            Some(b) => y.add(p.get(b)),
            None => y,
        }
    }

    pub fn param_count(din: usize, dout: usize, bias: bool) -> usize {
        din * dout + if bias { dout } else { 0 }
    }
}

/// 1-D convolution over `[B, C, T]` with per-channel bias.
#[derive(Clone, Debug)]
pub struct Conv1d {
    pub w: ParamId,
    pub b: ParamId,
    pub geom: ConvGeometry,
}

impl Conv1d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        geom: ConvGeometry,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let cin_g = cin / geom.groups;
        let w = store.add(format!("{name}.weight"), init_conv(rng, &[cout, cin_g, kernel], cin_g * kernel));
        let b = store.add(format!("{name}.bias"), Tensor::zeros(&[cout, 1]));
        Self { w, b, geom }
    }

    /// Stride-1 convolution that preserves length.
    pub fn same(store: &mut ParamStore, name: &str, cin: usize, cout: usize, kernel: usize, rng: &mut ChaCha8Rng) -> Self {
        Self::new(store, name, cin, cout, kernel, ConvGeometry::same(kernel, 1), rng)
    }

    pub fn forward<'t>(&self, p: &Binding<'t>, x: Var<'t>) -> Var<'t> {
        x.conv1d(p.get(self.w), self.geom).add(p.get(self.b))
    }

    pub fn param_count(cin: usize, cout: usize, kernel: usize, groups: usize) -> usize {
        cout * (cin / groups) * kernel + cout
    }
}

/// Transposed convolution upsampling `[B, C, T]` by exactly `stride`.
#[derive(Clone, Debug)]
pub struct Upsample {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
}

impl Upsample {
    /// Kernel `2·stride`, cropped so the output has `T·stride` samples.
    pub fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, stride: usize, rng: &mut ChaCha8Rng) -> Self {
        let k = 2 * stride;
        let w = store.add(format!("{name}.weight"), init_conv(rng, &[cin, cout, k], cin * 2));
        let b = store.add(format!("{name}.bias"), Tensor::zeros(&[cout, 1]));
        Self { w, b, stride }
    }

    pub fn forward<'t>(&self, p: &Binding<'t>, x: Var<'t>) -> Var<'t> {
        let t = x.dim(2);
        x.conv_transpose1d(p.get(self.w), self.stride, self.stride / 2, t * self.stride)
            .add(p.get(self.b))
    }

    pub fn param_count(cin: usize, cout: usize, stride: usize) -> usize {
        cin * cout * 2 * stride + cout
    }
}

/// Strided convolution downsampling `[B, C, T]` by exactly `stride` (T divisible by stride).
pub fn downsample_geometry(stride: usize) -> ConvGeometry {
    ConvGeometry { stride, pad_left: stride / 2, pad_right: stride - stride / 2, dilation: 1, groups: 1 }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::full(&[dim], 1.0));
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[dim]));
        Self { gamma, beta }
    }

    pub fn forward<'t>(&self, p: &Binding<'t>, x: Var<'t>) -> Var<'t> {
        x.layer_norm(p.get(self.gamma), p.get(self.beta), 1e-5)
    }
}

#[derive(Clone, Debug)]
pub struct Embedding {
    pub table: ParamId,
    pub rows: usize,
}

impl Embedding {
    pub fn new(store: &mut ParamStore, name: &str, rows: usize, dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let table = store.add(format!("{name}.table"), init_uniform(rng, &[rows, dim], 1));
        Self { table, rows }
    }

    pub fn forward<'t>(&self, p: &Binding<'t>, ids: &[usize]) -> Var<'t> {
        p.get(self.table).gather_rows(ids)
    }
}

/// Adam hyper-parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.8, beta2: 0.99, eps: 1e-8 }
    }
}

/// Adam with bias correction. State is kept per parameter, in store order.
#[derive(Clone, Debug)]
pub struct Adam {
    pub cfg: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(cfg: AdamConfig, store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store.ids().map(|id| Tensor::zeros(store.get(id).shape())).collect();
        Self { cfg, step: 0, m: zeros.clone(), v: zeros }
    }

    /// One update over the parameters selected by `trainable`; the rest are left untouched.
    pub fn update(
        &mut self,
        store: &mut ParamStore,
        grads: &[Tensor],
        lr: f64,
        trainable: impl Fn(&str) -> bool,
    ) {
        assert_eq!(grads.len(), store.len(), "one gradient per parameter");
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        let ids: Vec<ParamId> = store.ids().collect();
        for id in ids {
            if !trainable(store.name(id)) {
                continue;
            }
            let i = id.index();
            let g = grads[i].data();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let w = store.get_mut(id).data_mut();
            for k in 0..w.len() {
                m[k] = beta1 * m[k] + (1.0 - beta1) * g[k];
                v[k] = beta2 * v[k] + (1.0 - beta2) * g[k] * g[k];
                let mhat = m[k] / bc1;
                let vhat = v[k] / bc2;
                w[k] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

/// Rescales `grads` in place so their joint L2 norm is at most `max_norm`; returns the pre-clip norm.
pub fn clip_grad_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads.iter().flat_map(|g| g.data()).map(|v| v * v).sum::<f64>().sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

/// Exponential moving average of a parameter set, used for evaluation snapshots.
/// The decay warms up as `min(decay, (1 + n)/(10 + n))` after `n` updates.
#[derive(Clone, Debug)]
pub struct WeightEma {
    pub decay: f64,
    pub updates: u64,
    pub shadow: Vec<Tensor>,
}

impl WeightEma {
    pub fn new(decay: f64, store: &ParamStore) -> Self {
        Self { decay, updates: 0, shadow: store.ids().map(|id| store.get(id).clone()).collect() }
    }

    pub fn current_decay(&self) -> f64 {
        let n = self.updates as f64;
        self.decay.min((1.0 + n) / (10.0 + n))
    }

    pub fn update(&mut self, store: &ParamStore) {
        let decay = self.current_decay();
        for (id, s) in store.ids().zip(self.shadow.iter_mut()) {
            for (a, &b) in s.data_mut().iter_mut().zip(store.get(id).data()) {
                *a = decay * *a + (1.0 - decay) * b;
            }
        }
        self.updates += 1;
    }

    /// A copy of `store` holding the averaged weights.
    pub fn snapshot(&self, store: &ParamStore) -> ParamStore {
        let mut out = store.clone();
        for (id, s) in store.ids().zip(&self.shadow) {
            out.set(id, s.clone());
        }
        out
    }
}

/// Fixed sinusoidal position table `[len, dim]`.
pub fn sinusoidal_positions(len: usize, dim: usize) -> Tensor {
    Tensor::from_fn(&[len, dim], |i| {
        let (pos, j) = ((i / dim) as f64, i % dim);
        let rate = 1.0 / 10000f64.powf((2 * (j / 2)) as f64 / dim as f64);
        if j % 2 == 0 {
            (pos * rate).sin()
        } else {
            (pos * rate).cos()
        }
    })
}

/// Finite-difference check of `f` with respect to every parameter in `store`
/// and every extra input. The scalar objective is a fixed pseudo-random
/// weighting of `f`'s output, so every output element contributes.
pub fn check_module_gradients<F, S>(store: &ParamStore, inputs: &[Tensor], select: S, f: F) -> GradCheckReport
where
    F: for<'t> Fn(&Binding<'t>, &[Var<'t>]) -> Var<'t>,
    S: Fn(usize, usize) -> Vec<usize>,
{
    let n_params = store.len();
    let mut all: Vec<Tensor> = store.ids().map(|id| store.get(id).clone()).collect();
    all.extend(inputs.iter().cloned());
    check_gradients(
        &all,
        1e-6,
        |tape, v| {
            let p = Binding::from_vars(v[..n_params].to_vec());
            let y = f(&p, &v[n_params..]);
            let w = Tensor::from_fn(&y.shape(), |i| ((i as f64 + 1.0) * 0.7311).sin());
            y.mul(tape.constant(w)).sum()
        },
        select,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use vqspeech_autograd::Tape;

    #[test]
    fn adam_skips_frozen_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let a = Linear::new(&mut store, "enc", 2, 2, &mut rng);
        let _b = Linear::new(&mut store, "dec", 2, 2, &mut rng);
        let before = store.clone();
        let grads: Vec<Tensor> = store.ids().map(|id| Tensor::full(store.get(id).shape(), 1.0)).collect();
        let mut opt = Adam::new(AdamConfig::default(), &store);
        opt.update(&mut store, &grads, 1e-2, |n| !n.starts_with("enc"));
        assert_eq!(store.get(a.w), before.get(a.w));
        let moved = store.find("dec.weight").unwrap();
        assert_ne!(store.get(moved), before.get(moved));
    }

    #[test]
    fn upsample_and_downsample_lengths() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let up = Upsample::new(&mut store, "up", 2, 3, 5, &mut rng);
        let down = Conv1d::new(&mut store, "down", 3, 2, 10, downsample_geometry(5), &mut rng);
        let tape = Tape::new();
        let p = store.bind(&tape, false);
        let x = tape.constant(Tensor::zeros(&[1, 2, 7]));
        let y = up.forward(&p, x);
        assert_eq!(y.shape(), vec![1, 3, 35]);
        assert_eq!(down.forward(&p, y).shape(), vec![1, 2, 7]);
    }

    #[test]
    fn clip_scales_to_max_norm() {
        let mut g = vec![Tensor::new(&[2], vec![3.0, 4.0])];
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((g[0].data()[0] - 0.6).abs() < 1e-12);
    }
}
