//! Multi-period and multi-scale waveform critics.
//!
//! The multi-scale critics see the waveform at full rate and after one and
//! two cascaded Haar analysis levels, with every subband stacked as a
//! channel (approximation bands first).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use vqspeech_autograd::{Binding, ConvGeometry, ParamStore, Tape, Tensor, Var};

use crate::codec::LEAKY_SLOPE;
use crate::dsp::Waveform;
use crate::error::{Error, Result};
use crate::nn::Conv1d;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscriminatorConfig {
    pub periods: Vec<usize>,
    /// Widths of the strided stack in each period critic.
    pub mpd_channels: Vec<usize>,
    /// Widths of each scale critic: the stem, then each grouped strided layer.
    pub msd_channels: Vec<usize>,
    pub msd_kernel: usize,
    pub msd_groups: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            periods: vec![2, 3, 5, 7, 11],
            mpd_channels: vec![8, 16, 32, 32],
            msd_channels: vec![16, 32, 64, 64],
            msd_kernel: 21,
            msd_groups: 4,
        }
    }
}

impl DiscriminatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.periods.iter().any(|&p| p == 0) {
            return Err(Error::Config("discriminator periods must be positive".into()));
        }
        if self.mpd_channels.is_empty() || self.msd_channels.is_empty() {
            return Err(Error::Config("discriminator channel lists must be nonempty".into()));
        }
        if self.msd_channels.iter().any(|c| c % self.msd_groups != 0) || self.msd_kernel % 2 == 0 {
            return Err(Error::Config("msd widths must divide by msd_groups and msd_kernel must be odd".into()));
        }
        Ok(())
    }
}

/// Score maps and intermediate activations of each sub-critic, in order
/// (periods first, then scales).
pub struct DiscriminatorOutput<'t> {
    pub scores: Vec<Var<'t>>,
    pub features: Vec<Vec<Var<'t>>>,
}

impl<'t> DiscriminatorOutput<'t> {
    fn extend(&mut self, other: DiscriminatorOutput<'t>) {
        self.scores.extend(other.scores);
        self.features.extend(other.features);
    }
}

/// Padded length and row count of the `rows × period` grid for a waveform of `len` samples.
pub fn period_grid(len: usize, period: usize) -> (usize, usize) {
    let padded = len.div_ceil(period) * period;
    (padded, padded / period)
}

fn strided(stride: usize, kernel: usize, groups: usize) -> ConvGeometry {
    ConvGeometry { stride, pad_left: kernel / 2, pad_right: kernel / 2, dilation: 1, groups }
}

#[derive(Clone, Debug)]
struct PeriodCritic {
    period: usize,
    layers: Vec<Conv1d>,
    post: Conv1d,
}

const MPD_KERNEL: usize = 5;
const MPD_STRIDE: usize = 3;

impl PeriodCritic {
    fn new(store: &mut ParamStore, name: &str, period: usize, channels: &[usize], rng: &mut ChaCha8Rng) -> Self {
        let mut cin = 1;
        let layers = channels
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let stride = if i + 1 < channels.len() { MPD_STRIDE } else { 1 };
                let geom = strided(stride, MPD_KERNEL, 1);
                let conv = Conv1d::new(store, &format!("{name}.conv{i}"), cin, c, MPD_KERNEL, geom, rng);
                cin = c;
                conv
            })
            .collect();
        let post = Conv1d::same(store, &format!("{name}.post"), cin, 1, 3, rng);
        Self { period, layers, post }
    }

    /// `x` `[B, 1, T]`: padded on the right to a multiple of the period, then
    /// each of the `period` phase columns is convolved along its rows.
    fn forward<'t>(&self, p: &Binding<'t>, x: Var<'t>) -> (Var<'t>, Vec<Var<'t>>) {
        let (bs, t) = (x.dim(0), x.dim(2));
        let (padded, rows) = period_grid(t, self.period);
        let grid = x.pad_last(0, padded - t).reshape(&[bs, rows, self.period]);
        let mut h = grid.permute(&[0, 2, 1]).reshape(&[bs * self.period, 1, rows]);
        let mut feats = Vec::with_capacity(self.layers.len());
        for conv in &self.layers {
            h = conv.forward(p, h).leaky_relu(LEAKY_SLOPE);
            feats.push(h);
        }
        let score = self.post.forward(p, h);
        feats.push(score);
        (score, feats)
    }

    fn param_count(channels: &[usize]) -> usize {
        let mut cin = 1;
        let mut n = 0;
        for &c in channels {
            n += Conv1d::param_count(cin, c, MPD_KERNEL, 1);
            cin = c;
        }
        n + Conv1d::param_count(cin, 1, 3, 1)
    }
}

#[derive(Clone, Debug)]
struct ScaleCritic {
    layers: Vec<Conv1d>,
    post: Conv1d,
}

const MSD_STEM_KERNEL: usize = 15;
const MSD_STRIDE: usize = 4;

impl ScaleCritic {
    fn new(store: &mut ParamStore, name: &str, cin: usize, cfg: &DiscriminatorConfig, rng: &mut ChaCha8Rng) -> Self {
        let mut layers = Vec::new();
        let ch = &cfg.msd_channels;
        layers.push(Conv1d::same(store, &format!("{name}.conv0"), cin, ch[0], MSD_STEM_KERNEL, rng));
        for i in 1..ch.len() {
            let geom = strided(MSD_STRIDE, cfg.msd_kernel, cfg.msd_groups);
            layers.push(Conv1d::new(store, &format!("{name}.conv{i}"), ch[i - 1], ch[i], cfg.msd_kernel, geom, rng));
        }
        let last = *ch.last().expect("nonempty");
        layers.push(Conv1d::same(store, &format!("{name}.conv{}", ch.len()), last, last, 5, rng));
        let post = Conv1d::same(store, &format!("{name}.post"), last, 1, 3, rng);
        Self { layers, post }
    }

    fn forward<'t>(&self, p: &Binding<'t>, x: Var<'t>) -> (Var<'t>, Vec<Var<'t>>) {
        let mut h = x;
        let mut feats = Vec::with_capacity(self.layers.len() + 1);
        for conv in &self.layers {
            h = conv.forward(p, h).leaky_relu(LEAKY_SLOPE);
            feats.push(h);
        }
        let score = self.post.forward(p, h);
        feats.push(score);
        (score, feats)
    }

    fn param_count(cin: usize, cfg: &DiscriminatorConfig) -> usize {
        let ch = &cfg.msd_channels;
        let mut n = Conv1d::param_count(cin, ch[0], MSD_STEM_KERNEL, 1);
        for i in 1..ch.len() {
            n += Conv1d::param_count(ch[i - 1], ch[i], cfg.msd_kernel, cfg.msd_groups);
        }
        let last = *ch.last().expect("nonempty");
        n + Conv1d::param_count(last, last, 5, 1) + Conv1d::param_count(last, 1, 3, 1)
    }
}

/// Inputs of the three scale critics for `x` `[B, 1, T]`: the waveform
/// zero-padded to a multiple of 4, its one-level Haar subbands `[B, 2, T/2]`,
/// and the two-level cascade `[B, 4, T/4]`.
pub fn msd_inputs<'t>(x: Var<'t>) -> [Var<'t>; 3] {
    let t = x.dim(2);
    let x0 = x.pad_last(0, t.div_ceil(4) * 4 - t);
    let x1 = x0.haar_dwt();
    let x2 = x1.haar_dwt();
    [x0, x1, x2]
}

/// All critics, with weights in one store (`mpd.*`, `msd.*`).
#[derive(Clone, Debug)]
pub struct Discriminators {
    pub cfg: DiscriminatorConfig,
    pub params: ParamStore,
    mpd: Vec<PeriodCritic>,
    msd: Vec<ScaleCritic>,
}

impl Discriminators {
    pub fn new(cfg: DiscriminatorConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let mpd = cfg
            .periods
            .iter()
            .map(|&per| PeriodCritic::new(&mut params, &format!("mpd.p{per}"), per, &cfg.mpd_channels, &mut rng))
            .collect();
        let msd = [1, 2, 4]
            .iter()
            .enumerate()
            .map(|(i, &cin)| ScaleCritic::new(&mut params, &format!("msd.s{i}"), cin, &cfg, &mut rng))
            .collect();
        Ok(Self { cfg, params, mpd, msd })
    }

    pub fn mpd_forward<'t>(&self, p: &Binding<'t>, x: Var<'t>) -> DiscriminatorOutput<'t> {
        let (scores, features) = self.mpd.iter().map(|c| c.forward(p, x)).unzip();
        DiscriminatorOutput { scores, features }
    }

    pub fn msd_forward<'t>(&self, p: &Binding<'t>, x: Var<'t>) -> DiscriminatorOutput<'t> {
        let (scores, features) = self.msd.iter().zip(msd_inputs(x)).map(|(c, xi)| c.forward(p, xi)).unzip();
        DiscriminatorOutput { scores, features }
    }

    /// Period critics followed by scale critics, for `x` `[B, 1, T]`.
    pub fn forward<'t>(&self, p: &Binding<'t>, x: Var<'t>) -> DiscriminatorOutput<'t> {
        let mut out = self.mpd_forward(p, x);
        out.extend(self.msd_forward(p, x));
        out
    }

    /// Score tensors of every critic on `wave`, in inference mode.
    pub fn score(&self, wave: &Waveform) -> Result<Vec<Tensor>> {
        if wave.len() < 4 {
            return Err(Error::Invalid(format!("critics need at least 4 samples, got {}", wave.len())));
        }
        let tape = Tape::new();
        let p = self.params.bind(&tape, false);
        let x = tape.constant(Tensor::new(&[1, 1, wave.len()], wave.samples.clone()));
        Ok(self.forward(&p, x).scores.iter().map(|s| s.value().as_ref().clone()).collect())
    }

    /// Score-map shapes for a batch of one waveform of `len` samples.
    pub fn score_shapes(&self, len: usize) -> Vec<Vec<usize>> {
        let mut shapes = Vec::new();
        for &per in &self.cfg.periods {
            let (_, mut rows) = period_grid(len, per);
            for i in 0..self.cfg.mpd_channels.len() {
                let stride = if i + 1 < self.cfg.mpd_channels.len() { MPD_STRIDE } else { 1 };
                rows = strided(stride, MPD_KERNEL, 1).output_len(rows, MPD_KERNEL);
            }
            shapes.push(vec![per, 1, rows]);
        }
        let base = len.div_ceil(4) * 4;
        for level in 0..3 {
            let mut t = base >> level;
            for _ in 1..self.cfg.msd_channels.len() {
                t = strided(MSD_STRIDE, self.cfg.msd_kernel, self.cfg.msd_groups).output_len(t, self.cfg.msd_kernel);
            }
            shapes.push(vec![1, 1, t]);
        }
        shapes
    }

    pub fn param_count(cfg: &DiscriminatorConfig) -> usize {
        cfg.periods.len() * PeriodCritic::param_count(&cfg.mpd_channels)
            + [1, 2, 4].iter().map(|&c| ScaleCritic::param_count(c, cfg)).sum::<usize>()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::check_module_gradients;
    use vqspeech_autograd::gradcheck::spread;

    fn wave(n: usize) -> Waveform {
        Waveform::new((0..n).map(|i| ((i as f64) * 0.013).sin() * 0.7).collect(), 24000).unwrap()
    }

    #[test]
    fn period_grid_arithmetic() {
        assert_eq!(period_grid(1000, 3), (1002, 334));
        assert_eq!(period_grid(1000, 2), (1000, 500));
    }

    #[test]
    fn structure_and_shape_law() {
        let d = Discriminators::new(DiscriminatorConfig::default(), 0).unwrap();
        for len in [300, 1000, 24000] {
            let scores = d.score(&wave(len)).unwrap();
            assert_eq!(scores.len(), 5 + 3);
            let shapes: Vec<Vec<usize>> = scores.iter().map(|s| s.shape().to_vec()).collect();
            assert_eq!(shapes, d.score_shapes(len), "len {len}");
        }
        let tape = Tape::new();
        let p = d.params.bind(&tape, false);
        let x = tape.constant(Tensor::new(&[1, 1, 1000], wave(1000).samples));
        assert_eq!(d.mpd_forward(&p, x).features.len(), 5);
        let msd = d.msd_forward(&p, x);
        assert_eq!(msd.scores.len(), 3);
        assert!(msd.features.iter().all(|f| f.len() == 6));
    }

    #[test]
    fn deterministic() {
        let d = Discriminators::new(DiscriminatorConfig::default(), 4).unwrap();
        let w = wave(777);
        assert_eq!(d.score(&w).unwrap(), d.score(&w).unwrap());
    }

    #[test]
    fn haar_levels_keep_energy_and_constant_has_no_detail() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::full(&[1, 1, 64], 0.3));
        let [x0, x1, x2] = msd_inputs(x);
        assert_eq!(x1.shape(), vec![1, 2, 32]);
        assert_eq!(x2.shape(), vec![1, 4, 16]);
        assert!(x1.value().data()[32..].iter().all(|&v| v == 0.0));
        let w = wave(1002);
        let x = tape.constant(Tensor::new(&[1, 1, 1002], w.samples.clone()));
        let [x0b, x1b, x2b] = msd_inputs(x);
        let e = |v: &Var| v.value().data().iter().map(|a| a * a).sum::<f64>();
        assert!((e(&x0b) - e(&x1b)).abs() < 1e-9 && (e(&x1b) - e(&x2b)).abs() < 1e-9);
        let _ = (x0, x2);
    }

    #[test]
    fn period_zero_is_rejected() {
        let cfg = DiscriminatorConfig { periods: vec![2, 0], ..Default::default() };
        assert!(matches!(Discriminators::new(cfg, 0), Err(Error::Config(_))));
    }

    #[test]
    fn parameter_count_and_gradients() {
        let cfg = DiscriminatorConfig {
            periods: vec![2, 3],
            mpd_channels: vec![2, 2],
            msd_channels: vec![2, 4],
            msd_kernel: 5,
            msd_groups: 2,
        };
        let d = Discriminators::new(cfg.clone(), 5).unwrap();
        assert_eq!(d.params.numel(), Discriminators::param_count(&cfg));
        let x = Tensor::from_fn(&[1, 1, 8], |i| ((i as f64) * 1.1).sin());
        let report = check_module_gradients(&d.params, &[x], spread(4), |p, v| {
            let out = d.forward(p, v[0]);
            let mut acc = out.scores[0].sum();
            for s in &out.scores[1..] {
                acc = acc.add(s.sum());
            }
            for f in out.features.iter().flatten() {
                acc = acc.add(f.sqr().mean());
            }
            acc
        });
        assert!(report.passes(1e-3), "{report:?}");
    }
}
