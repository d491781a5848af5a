//! Bidirectional recurrent layers over `[B, T, d]` sequences.
//!
//! Both directions share the output projection and their outputs are summed,
//! so the layer keeps width `d`. The result is added back onto the input.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use vqspeech_autograd::{Binding, ParamId, ParamStore, Tensor, Var};

use crate::nn::{init_uniform, Linear};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RecurrentKind {
    /// Two-timescale long expressive memory cell.
    #[default]
    Lem,
    /// Gated recurrent unit.
    Gru,
}

/// Weights of one direction. `input` projects all timesteps at once; `state` acts on the carried state.
#[derive(Clone, Debug)]
struct Direction {
    input: Linear,
    state: ParamId,
    /// LEM only: the map from the updated `z` into the `y` candidate.
    cross: Option<ParamId>,
}

#[derive(Clone, Debug)]
pub struct BiRecurrent {
    pub kind: RecurrentKind,
    pub hidden: usize,
    fwd: Direction,
    bwd: Direction,
    out: Linear,
}

impl BiRecurrent {
    /// The backward direction starts as an exact copy of the forward one.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        kind: RecurrentKind,
        dim: usize,
        hidden: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let gates = match kind {
            RecurrentKind::Lem => 4,
            RecurrentKind::Gru => 3,
        };
        let w_in = init_uniform(rng, &[dim, gates * hidden], dim);
        let w_state = init_uniform(rng, &[hidden, (gates - 1) * hidden], hidden);
        let w_cross = init_uniform(rng, &[hidden, hidden], hidden);
        let mut direction = |dir: &str| {
            let input = Linear {
                w: store.add(format!("{name}.{dir}.input.weight"), w_in.clone()),
                b: Some(store.add(format!("{name}.{dir}.input.bias"), Tensor::zeros(&[gates * hidden]))),
            };
            let state = store.add(format!("{name}.{dir}.state.weight"), w_state.clone());
            let cross = (kind == RecurrentKind::Lem).then(|| store.add(format!("{name}.{dir}.cross.weight"), w_cross.clone()));
            Direction { input, state, cross }
        };
        let fwd = direction("fwd");
        let bwd = direction("bwd");
        let out = Linear::new(store, &format!("{name}.out"), hidden, dim, rng);
        Self { kind, hidden, fwd, bwd, out }
    }

    pub fn param_count(kind: RecurrentKind, dim: usize, hidden: usize) -> usize {
        let per_dir = match kind {
            RecurrentKind::Lem => dim * 4 * hidden + 4 * hidden + hidden * 3 * hidden + hidden * hidden,
            RecurrentKind::Gru => dim * 3 * hidden + 3 * hidden + hidden * 2 * hidden,
        };
        2 * per_dir + Linear::param_count(hidden, dim, true)
    }

    /// `x + out(fwd(x) + bwd(x))` for `x` of shape `[B, T, d]`.
    pub fn forward<'t>(&self, p: &Binding<'t>, x: Var<'t>) -> Var<'t> {
        let f = self.run(p, &self.fwd, x, false);
        let b = self.run(p, &self.bwd, x, true);
        x.add(self.out.forward(p, f.add(b)))
    }

    fn run<'t>(&self, p: &Binding<'t>, dir: &Direction, x: Var<'t>, reverse: bool) -> Var<'t> {
        let (bs, t_len, h) = (x.dim(0), x.dim(1), self.hidden);
        let tape = x.tape();
        let proj = dir.input.forward(p, x);
        let w_state = p.get(dir.state);
        let mut y = tape.constant(Tensor::zeros(&[bs, h]));
        let mut z = y;
        let mut outs: Vec<Option<Var<'t>>> = vec![None; t_len];
        let steps: Box<dyn Iterator<Item = usize>> = if reverse { Box::new((0..t_len).rev()) } else { Box::new(0..t_len) };
        for t in steps {
            let u = proj.narrow(1, t, 1).reshape(&[bs, proj.dim(2)]);
            let gate = |v: Var<'t>, i: usize| v.narrow(1, i * h, h);
            match self.kind {
                RecurrentKind::Lem => {
                    let s = y.matmul(w_state);
                    let dt1 = gate(s, 0).add(gate(u, 0)).sigmoid();
                    let dt2 = gate(s, 1).add(gate(u, 1)).sigmoid();
                    let cz = gate(s, 2).add(gate(u, 2)).tanh();
                    z = z.add(dt1.mul(cz.sub(z)));
                    let cy = z.matmul(p.get(dir.cross.expect("LEM carries a cross map"))).add(gate(u, 3)).tanh();
                    y = y.add(dt2.mul(cy.sub(y)));
                }
                RecurrentKind::Gru => {
                    let s = y.matmul(w_state);
                    let r = gate(s, 0).add(gate(u, 0)).sigmoid();
                    let zg = gate(s, 1).add(gate(u, 1)).sigmoid();
                    let w_n = w_state.narrow(1, 0, h);
                    // Candidate uses the reset-gated state through the reset block's weights.
                    let n = r.mul(y).matmul(w_n).add(gate(u, 2)).tanh();
                    y = y.add(zg.mul(n.sub(y)));
                }
            }
            outs[t] = Some(y.reshape(&[bs, 1, h]));
        }
        let outs: Vec<Var<'t>> = outs.into_iter().map(|o| o.expect("every step visited")).collect();
        Var::concat(&outs, 1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use crate::nn::check_module_gradients;
    use vqspeech_autograd::gradcheck::spread;
    use vqspeech_autograd::Tape;

    fn layer(kind: RecurrentKind, d: usize, h: usize) -> (ParamStore, BiRecurrent) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        let l = BiRecurrent::new(&mut store, "rnn", kind, d, h, &mut rng);
        (store, l)
    }

    fn reverse_time(x: &Tensor) -> Tensor {
        let (b, t, d) = (x.dim(0), x.dim(1), x.dim(2));
        Tensor::from_fn(x.shape(), |i| {
            let (bi, ti, di) = (i / (t * d), (i / d) % t, i % d);
            x.data()[(bi * t + (t - 1 - ti)) * d + di]
        })
        .reshape(&[b, t, d])
    }

    #[test]
    fn length_preserving_including_single_step() {
        for kind in [RecurrentKind::Lem, RecurrentKind::Gru] {
            let (store, l) = layer(kind, 3, 4);
            for t in [1, 5] {
                let tape = Tape::new();
                let p = store.bind(&tape, false);
                let y = l.forward(&p, tape.constant(Tensor::full(&[2, t, 3], 0.3)));
                assert_eq!(y.shape(), vec![2, t, 3]);
            }
        }
    }

    #[test]
    fn tied_directions_commute_with_time_reversal() {
        for kind in [RecurrentKind::Lem, RecurrentKind::Gru] {
            let (store, l) = layer(kind, 3, 5);
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let x = Tensor::from_fn(&[2, 6, 3], |_| rng.random_range(-1.0..1.0));
            let run = |input: &Tensor| {
                let tape = Tape::new();
                let p = store.bind(&tape, false);
                l.forward(&p, tape.constant(input.clone())).value().as_ref().clone()
            };
            let a = reverse_time(&run(&reverse_time(&x)));
            let b = run(&x);
            assert!(a.zip_map(&b, |p, q| (p - q).abs()).max_abs() < 1e-12);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        for kind in [RecurrentKind::Lem, RecurrentKind::Gru] {
            let (mut store, l) = layer(kind, 2, 3);
            // Untie the directions so both receive distinct gradients.
            let ids: Vec<_> = store.ids().collect();
            for id in ids {
                let t = store.get(id).map(|v| v + 0.05 * (v * 13.0).sin());
                store.set(id, t);
            }
            let x = Tensor::from_fn(&[1, 4, 2], |i| ((i as f64) * 0.77).cos());
            let report = check_module_gradients(&store, &[x], spread(6), |p, v| l.forward(p, v[0]));
            assert!(report.passes(1e-3), "{kind:?}: {report:?}");
        }
    }
}
