//! The recording tape, differentiable variables and reverse-mode backward pass.

use std::cell::RefCell;
use std::rc::Rc;

use crate::kernels::{self, ConvGeometry, StftSpec};
use crate::tensor::Tensor;

/// Elementwise nonlinearities with closed-form derivatives.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Unary {
    Tanh,
    Sigmoid,
    Relu,
    LeakyRelu(f64),
    Exp,
    Log,
    Abs,
    Sqr,
    Sqrt,
    Silu,
}

impl Unary {
    pub(crate) fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Tanh => x.tanh(),
            Unary::Sigmoid => sigmoid(x),
            Unary::Relu => x.max(0.0),
            Unary::LeakyRelu(s) => {
                if x >= 0.0 {
                    x
                } else {
                    s * x
                }
            }
            Unary::Exp => x.exp(),
            Unary::Log => x.ln(),
            Unary::Abs => x.abs(),
            Unary::Sqr => x * x,
            Unary::Sqrt => x.sqrt(),
            Unary::Silu => x * sigmoid(x),
        }
    }

    /// Derivative given the input `x` and the output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Tanh => 1.0 - y * y,
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::LeakyRelu(s) => {
                if x >= 0.0 {
                    1.0
                } else {
                    s
                }
            }
            Unary::Exp => y,
            Unary::Log => 1.0 / x,
            Unary::Abs => {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
            Unary::Sqr => 2.0 * x,
            // Guarded so that sqrt(0) backpropagates a large but finite value.
            Unary::Sqrt => 0.5 / y.max(1e-12),
            Unary::Silu => {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            }
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Unary(usize, Unary),
    SumAll(usize),
    SumAxis { x: usize, axis: usize },
    MatMul { a: usize, b: usize },
    BatchMatMul { a: usize, b: usize },
    Permute { x: usize, perm: Vec<usize> },
    Reshape { x: usize },
    Narrow { x: usize, axis: usize, start: usize },
    Concat { xs: Vec<usize>, axis: usize },
    GatherRows { x: usize, idx: Vec<usize> },
    Conv1d { x: usize, w: usize, geom: ConvGeometry },
    ConvTranspose1d { x: usize, w: usize, stride: usize, crop: usize },
    PadLast { x: usize, left: usize },
    LayerNorm { x: usize, gamma: usize, beta: usize, eps: f64 },
    Softmax { x: usize },
    StraightThrough { x: usize },
    StftMag { x: usize, spec: StftSpec },
    HaarDwt { x: usize },
    Blur2d { x: usize, kr: Vec<f64>, kc: Vec<f64> },
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Records a computation so it can be differentiated in reverse.
///
/// Tapes are single-threaded and meant to live for one forward/backward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// A handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    pub(crate) tape: &'t Tape,
    pub(crate) id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}({:?})", self.id, self.value())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A constant: gradients never flow into it.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf_rc(Rc::new(value), false)
    }

    /// A differentiable input.
    pub fn var(&self, value: Tensor) -> Var<'_> {
        self.leaf_rc(Rc::new(value), true)
    }

    pub fn leaf_rc(&self, value: Rc<Tensor>, needs_grad: bool) -> Var<'_> {
        self.push_raw(value, Op::Leaf, needs_grad)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push_raw(&self, value: Rc<Tensor>, op: Op, needs_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, needs_grad });
        Var { tape: self, id: nodes.len() - 1 }
    }

    pub(crate) fn push(&self, value: Tensor, op: Op, inputs: &[usize]) -> Var<'_> {
        let needs_grad = {
            let nodes = self.nodes.borrow();
            inputs.iter().any(|&i| nodes[i].needs_grad)
        };
        self.push_raw(Rc::new(value), op, needs_grad)
    }

    pub(crate) fn value_of(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    pub(crate) fn needs_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].needs_grad
    }

    /// Reverse-mode sweep from a scalar `loss`, seeded with gradient 1.
    pub fn backward(&self, loss: Var<'_>) -> Gradients {
        let seed_shape = self.value_of(loss.id).shape().to_vec();
        assert_eq!(
            seed_shape.iter().product::<usize>(),
            1,
            "backward() needs a scalar loss, got shape {seed_shape:?}"
        );
        self.backward_with(loss, Tensor::full(&seed_shape, 1.0))
    }

    /// Reverse-mode sweep seeded with an arbitrary output gradient.
    pub fn backward_with(&self, out: Var<'_>, seed: Tensor) -> Gradients {
        let n = self.len();
        let mut grads: Vec<Option<Tensor>> = vec![None; n];
        assert_eq!(seed.shape(), self.value_of(out.id).shape(), "seed shape mismatch");
        grads[out.id] = Some(seed);
        for id in (0..=out.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let (op, needs) = {
                let nodes = self.nodes.borrow();
                (nodes[id].op.clone(), nodes[id].needs_grad)
            };
            if needs && !matches!(op, Op::Leaf) {
                for (input, contrib) in self.backward_op(id, &op, &g) {
                    if !self.needs_grad(input) {
                        continue;
                    }
                    match &mut grads[input] {
                        Some(acc) => acc.add_assign(&contrib),
                        slot => *slot = Some(contrib),
                    }
                }
            }
            grads[id] = Some(g);
        }
        Gradients { grads }
    }

    fn backward_op(&self, id: usize, op: &Op, g: &Tensor) -> Vec<(usize, Tensor)> {
        let val = |i: usize| self.value_of(i);
        match op {
            Op::Leaf => Vec::new(),
            Op::Add(a, b) => {
                let gb = kernels::reduce_to_shape(g, val(*b).shape());
                vec![(*a, g.clone()), (*b, gb)]
            }
            Op::Sub(a, b) => {
                let gb = kernels::reduce_to_shape(g, val(*b).shape()).map(|v| -v);
                vec![(*a, g.clone()), (*b, gb)]
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let mut out = Vec::with_capacity(2);
                if self.needs_grad(*a) {
                    out.push((*a, kernels::broadcast_binary(g, &vb, |x, y| x * y)));
                }
                if self.needs_grad(*b) {
                    let full = g.zip_map(&va, |x, y| x * y);
                    out.push((*b, kernels::reduce_to_shape(&full, vb.shape())));
                }
                out
            }
            Op::Div(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let ga = g.zip_map(&vb, |x, y| x / y);
                let gb = Tensor::from_fn(g.shape(), |i| {
                    -g.data()[i] * va.data()[i] / (vb.data()[i] * vb.data()[i])
                });
                vec![(*a, ga), (*b, gb)]
            }
            Op::Scale(a, c) => vec![(*a, g.map(|v| v * c))],
            Op::AddScalar(a) => vec![(*a, g.clone())],
            Op::Unary(a, u) => {
                let x = val(*a);
                let y = val(id);
                let d = Tensor::from_fn(g.shape(), |i| {
                    g.data()[i] * u.derivative(x.data()[i], y.data()[i])
                });
                vec![(*a, d)]
            }
            Op::SumAll(a) => {
                let shape = val(*a).shape().to_vec();
                vec![(*a, Tensor::full(&shape, g.item()))]
            }
            Op::SumAxis { x, axis } => {
                let shape = val(*x).shape().to_vec();
                vec![(*x, kernels::expand_axis(g, &shape, *axis))]
            }
            Op::MatMul { a, b } => {
                let (va, vb) = (val(*a), val(*b));
                let mut out = Vec::with_capacity(2);
                if self.needs_grad(*a) {
                    out.push((*a, kernels::matmul_grad_a(g, &vb, va.shape())));
                }
                if self.needs_grad(*b) {
                    out.push((*b, kernels::matmul_grad_b(g, &va, vb.shape())));
                }
                out
            }
            Op::BatchMatMul { a, b } => {
                let (va, vb) = (val(*a), val(*b));
                let (ga, gb) = kernels::bmm_grads(g, &va, &vb);
                vec![(*a, ga), (*b, gb)]
            }
            Op::Permute { x, perm } => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                vec![(*x, kernels::permute(g, &inv))]
            }
            Op::Reshape { x } => {
                let shape = val(*x).shape().to_vec();
                vec![(*x, g.clone().reshape(&shape))]
            }
            Op::Narrow { x, axis, start } => {
                let shape = val(*x).shape().to_vec();
                vec![(*x, kernels::unnarrow(g, &shape, *axis, *start))]
            }
            Op::Concat { xs, axis } => {
                let mut start = 0;
                let mut out = Vec::with_capacity(xs.len());
                for &x in xs {
                    let len = val(x).dim(*axis);
                    out.push((x, kernels::narrow(g, *axis, start, len)));
                    start += len;
                }
                out
            }
            Op::GatherRows { x, idx } => {
                let shape = val(*x).shape().to_vec();
                vec![(*x, kernels::scatter_rows(g, &shape, idx))]
            }
            Op::Conv1d { x, w, geom } => {
                let (vx, vw) = (val(*x), val(*w));
                let (gx, gw) = kernels::conv1d_backward(&vx, &vw, g, geom);
                vec![(*x, gx), (*w, gw)]
            }
            Op::ConvTranspose1d { x, w, stride, crop } => {
                let (vx, vw) = (val(*x), val(*w));
                let (gx, gw) = kernels::conv_transpose1d_backward(&vx, &vw, g, *stride, *crop);
                vec![(*x, gx), (*w, gw)]
            }
            Op::PadLast { x, left } => {
                let len = val(*x).shape().last().copied().unwrap_or(1);
                let axis = g.ndim() - 1;
                vec![(*x, kernels::narrow(g, axis, *left, len))]
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let (gx, gg, gb) =
                    kernels::layer_norm_backward(&val(*x), &val(*gamma), g, *eps);
                vec![(*x, gx), (*gamma, gg), (*beta, gb)]
            }
            Op::Softmax { x } => vec![(*x, kernels::softmax_backward(&val(id), g))],
            Op::StraightThrough { x } => vec![(*x, g.clone())],
            Op::StftMag { x, spec } => vec![(*x, kernels::stft_mag_backward(&val(*x), g, spec))],
            Op::HaarDwt { x } => vec![(*x, kernels::haar_dwt_channels_inverse(g))],
            Op::Blur2d { x, kr, kc } => {
                let shape = val(*x).shape().to_vec();
                vec![(*x, kernels::blur2d_adjoint(g, &shape, kr, kc))]
            }
        }
    }
}

/// Gradients produced by [`Tape::backward`], indexed by variable.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros when nothing flowed into it.
    pub fn wrt(&self, v: Var<'_>) -> Tensor {
        match self.get(v) {
            Some(g) => g.clone(),
            None => Tensor::zeros(v.value().shape()),
        }
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.value().dim(axis)
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.needs_grad(self.id)
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Var<'t> {
        self.tape.leaf_rc(self.value(), false)
    }

    /// The scalar value of a one-element variable.
    pub fn item(&self) -> f64 {
        self.value().item()
    }

    pub(crate) fn push(&self, value: Tensor, op: Op, inputs: &[usize]) -> Var<'t> {
        self.tape.push(value, op, inputs)
    }
}
