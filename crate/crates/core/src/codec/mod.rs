//! Waveform encoder and decoder of the speech codec.
//!
//! The encoder maps 24 kHz audio to one latent vector per 300 samples
//! (12.5 ms). The decoder mirrors it, with a bidirectional recurrent layer
//! ahead of the upsampling stack. While skips are enabled, the outputs of the
//! first encoder blocks are added into the mirrored decoder blocks.

mod recurrent;

pub use recurrent::{BiRecurrent, RecurrentKind};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use vqspeech_autograd::{Binding, ParamStore, Tape, Tensor, Var};

use crate::dsp::{Waveform, CODEC_RATE};
use crate::error::{Error, Result};
use crate::nn::{downsample_geometry, Conv1d, Upsample};

/// Slope of every leaky ReLU in the codec and discriminators.
pub const LEAKY_SLOPE: f64 = 0.1;
/// Samples per latent frame at 24 kHz.
pub const SAMPLES_PER_FRAME: usize = 300;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CodecConfig {
    pub sample_rate_hz: u32,
    pub downsample_factors: Vec<usize>,
    pub channels: Vec<usize>,
    pub latent_dim: usize,
    pub lem_hidden: usize,
    pub skip_block_count: usize,
    pub use_skips: bool,
    pub recurrent: RecurrentKind,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            sample_rate_hz: CODEC_RATE,
            downsample_factors: vec![5, 5, 4, 3],
            channels: vec![16, 32, 64, 128],
            latent_dim: 128,
            lem_hidden: 128,
            skip_block_count: 3,
            use_skips: true,
            recurrent: RecurrentKind::Lem,
        }
    }
}

impl CodecConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.sample_rate_hz != CODEC_RATE {
            return bad(format!("codec.sample_rate_hz must be {CODEC_RATE}, got {}", self.sample_rate_hz));
        }
        let product: usize = self.downsample_factors.iter().product();
        if product != SAMPLES_PER_FRAME {
            return bad(format!(
                "codec.downsample_factors multiply to {product}; a 12.5 ms frame at 24 kHz needs {SAMPLES_PER_FRAME}"
            ));
        }
        if self.channels.len() != self.downsample_factors.len() {
            return bad(format!(
                "codec.channels has {} entries for {} blocks",
                self.channels.len(),
                self.downsample_factors.len()
            ));
        }
        if self.skip_block_count + 1 > self.downsample_factors.len() {
            return bad(format!(
                "codec.skip_block_count {} exceeds the {} blocks that have a mirrored decoder block",
                self.skip_block_count,
                self.downsample_factors.len() - 1
            ));
        }
        if self.latent_dim == 0 || self.lem_hidden == 0 || self.channels.contains(&0) {
            return bad("codec widths must be positive".into());
        }
        Ok(())
    }

    fn blocks(&self) -> usize {
        self.downsample_factors.len()
    }

    /// Width after encoder block `i`.
    fn block_out(&self, i: usize) -> usize {
        self.channels[(i + 1).min(self.blocks() - 1)]
    }
}

/// Frame-level latent sequence plus the source length it was padded from.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameRepresentation {
    /// `[frames, latent_dim]`.
    pub values: Tensor,
    pub num_samples: usize,
}

impl FrameRepresentation {
    pub const FRAME_HOP_MS: f64 = 12.5;

    pub fn frames(&self) -> usize {
        self.values.dim(0)
    }
}

/// `len` rounded up to whole frames.
pub fn padded_len(len: usize) -> usize {
    len.div_ceil(SAMPLES_PER_FRAME).max(1) * SAMPLES_PER_FRAME
}

/// Two-convolution residual unit: `x + conv_1(act(conv_3(act(x))))`.
#[derive(Clone, Debug)]
pub struct ResUnit {
    conv_a: Conv1d,
    conv_b: Conv1d,
}

impl ResUnit {
    pub fn new(store: &mut ParamStore, name: &str, ch: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            conv_a: Conv1d::same(store, &format!("{name}.conv_a"), ch, ch, 3, rng),
            conv_b: Conv1d::same(store, &format!("{name}.conv_b"), ch, ch, 1, rng),
        }
    }

    pub fn forward<'t>(&self, p: &Binding<'t>, x: Var<'t>) -> Var<'t> {
        let h = self.conv_a.forward(p, x.leaky_relu(LEAKY_SLOPE));
        x.add(self.conv_b.forward(p, h.leaky_relu(LEAKY_SLOPE)))
    }

    pub fn param_count(ch: usize) -> usize {
        Conv1d::param_count(ch, ch, 3, 1) + Conv1d::param_count(ch, ch, 1, 1)
    }
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pre: Conv1d,
    blocks: Vec<(ResUnit, Conv1d)>,
    post: Conv1d,
}

/// Encoder output: latent frames plus the block outputs used as skip taps.
pub struct Encoded<'t> {
    /// `[B, latent_dim, frames]`.
    pub latent: Var<'t>,
    /// Output of encoder block `i` for `i < skip_block_count`.
    pub taps: Vec<Var<'t>>,
}

impl Encoder {
    pub fn new(store: &mut ParamStore, cfg: &CodecConfig, rng: &mut ChaCha8Rng) -> Self {
        let ch = &cfg.channels;
        let pre = Conv1d::same(store, "encoder.pre", 1, ch[0], 7, rng);
        let blocks = (0..cfg.blocks())
            .map(|i| {
                let f = cfg.downsample_factors[i];
                let res = ResUnit::new(store, &format!("encoder.block{i}.res"), ch[i], rng);
                let down = Conv1d::new(
                    store,
                    &format!("encoder.block{i}.down"),
                    ch[i],
                    cfg.block_out(i),
                    2 * f,
                    downsample_geometry(f),
                    rng,
                );
                (res, down)
            })
            .collect();
        let post = Conv1d::same(store, "encoder.post", cfg.block_out(cfg.blocks() - 1), cfg.latent_dim, 3, rng);
        Self { pre, blocks, post }
    }

    /// `x` is `[B, 1, T]` with `T` a multiple of 300.
    pub fn forward<'t>(&self, p: &Binding<'t>, x: Var<'t>, skip_block_count: usize) -> Encoded<'t> {
        let mut h = self.pre.forward(p, x);
        let mut taps = Vec::new();
        for (i, (res, down)) in self.blocks.iter().enumerate() {
            h = down.forward(p, res.forward(p, h).leaky_relu(LEAKY_SLOPE));
            if i < skip_block_count {
                taps.push(h);
            }
        }
        let latent = self.post.forward(p, h.leaky_relu(LEAKY_SLOPE));
        Encoded { latent, taps }
    }

    pub fn param_count(cfg: &CodecConfig) -> usize {
        let ch = &cfg.channels;
        let mut n = Conv1d::param_count(1, ch[0], 7, 1);
        for i in 0..cfg.blocks() {
            n += ResUnit::param_count(ch[i]);
            n += Conv1d::param_count(ch[i], cfg.block_out(i), 2 * cfg.downsample_factors[i], 1);
        }
        n + Conv1d::param_count(cfg.block_out(cfg.blocks() - 1), cfg.latent_dim, 3, 1)
    }
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pre: Conv1d,
    recurrent: BiRecurrent,
    blocks: Vec<(Upsample, ResUnit)>,
    post: Conv1d,
    /// Encoder block whose output is added after each upsampling block, if any.
    tap_source: Vec<Option<usize>>,
}

impl Decoder {
    pub fn new(store: &mut ParamStore, cfg: &CodecConfig, rng: &mut ChaCha8Rng) -> Self {
        let n = cfg.blocks();
        let top = cfg.block_out(n - 1);
        let pre = Conv1d::same(store, "decoder.pre", cfg.latent_dim, top, 7, rng);
        let recurrent = BiRecurrent::new(store, "decoder.recurrent", cfg.recurrent, top, cfg.lem_hidden, rng);
        let mut cin = top;
        let mut blocks = Vec::new();
        let mut tap_source = Vec::new();
        for j in 0..n {
            let f = cfg.downsample_factors[n - 1 - j];
            let cout = cfg.channels[n - 1 - j];
            let up = Upsample::new(store, &format!("decoder.block{j}.up"), cin, cout, f, rng);
            let res = ResUnit::new(store, &format!("decoder.block{j}.res"), cout, rng);
            blocks.push((up, res));
            // Mirror of encoder block n-2-j produces exactly this width and rate.
            let src = (n - 1).checked_sub(j + 1).filter(|&b| b < cfg.skip_block_count);
            tap_source.push(src);
            cin = cout;
        }
        let post = Conv1d::same(store, "decoder.post", cin, 1, 7, rng);
        Self { pre, recurrent, blocks, post, tap_source }
    }

    /// `latent` is `[B, latent_dim, F]`; returns `[B, 1, 300·F]` in `(-1, 1)`.
    /// `taps` are consulted only when `Some`.
    pub fn forward<'t>(&self, p: &Binding<'t>, latent: Var<'t>, taps: Option<&[Var<'t>]>) -> Var<'t> {
        let h = self.pre.forward(p, latent);
        let seq = self.recurrent.forward(p, h.permute(&[0, 2, 1]));
        let mut h = seq.permute(&[0, 2, 1]);
        for ((up, res), src) in self.blocks.iter().zip(&self.tap_source) {
            h = up.forward(p, h.leaky_relu(LEAKY_SLOPE));
            if let (Some(taps), Some(b)) = (taps, src) {
                h = h.add(taps[*b]);
            }
            h = res.forward(p, h);
        }
        self.post.forward(p, h.leaky_relu(LEAKY_SLOPE)).tanh()
    }

    pub fn param_count(cfg: &CodecConfig) -> usize {
        let n = cfg.blocks();
        let top = cfg.block_out(n - 1);
        let mut total = Conv1d::param_count(cfg.latent_dim, top, 7, 1);
        total += BiRecurrent::param_count(cfg.recurrent, top, cfg.lem_hidden);
        let mut cin = top;
        for j in 0..n {
            let cout = cfg.channels[n - 1 - j];
            total += Upsample::param_count(cin, cout, cfg.downsample_factors[n - 1 - j]);
            total += ResUnit::param_count(cout);
            cin = cout;
        }
        total + Conv1d::param_count(cin, 1, 7, 1)
    }
}

/// Encoder and decoder weights in one store (`encoder.*`, `decoder.*`).
#[derive(Clone, Debug)]
pub struct CodecNetwork {
    pub cfg: CodecConfig,
    pub params: ParamStore,
    pub encoder: Encoder,
    pub decoder: Decoder,
}

impl CodecNetwork {
    pub fn new(cfg: CodecConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let encoder = Encoder::new(&mut params, &cfg, &mut rng);
        let decoder = Decoder::new(&mut params, &cfg, &mut rng);
        Ok(Self { cfg, params, encoder, decoder })
    }

    /// Enables or disables the encoder→decoder skip path.
    pub fn toggle_skips(&mut self, enabled: bool) {
        self.cfg.use_skips = enabled;
    }

    pub fn skips_enabled(&self) -> bool {
        self.cfg.use_skips
    }

    /// Pads `wave` to whole frames and shapes it as `[1, 1, T]`.
    pub fn waveform_input(wave: &Waveform) -> Result<Tensor> {
        wave.expect_rate(CODEC_RATE)?;
        let mut s = wave.samples.clone();
        s.resize(padded_len(s.len()), 0.0);
        let n = s.len();
        Ok(Tensor::new(&[1, 1, n], s))
    }

    /// Pre-quantization latents, `[frames, latent_dim]`.
    pub fn encode(&self, wave: &Waveform) -> Result<FrameRepresentation> {
        let x = Self::waveform_input(wave)?;
        let tape = Tape::new();
        let p = self.params.bind(&tape, false);
        let enc = self.encoder.forward(&p, tape.constant(x), 0);
        let values = enc.latent.value().as_ref().clone();
        let (d, f) = (values.dim(1), values.dim(2));
        Ok(FrameRepresentation { values: values.reshape(&[d, f]).transpose_last2(), num_samples: wave.len() })
    }

    /// Encoder skip taps for `wave`, as plain tensors.
    pub fn encoder_taps(&self, wave: &Waveform) -> Result<Vec<Tensor>> {
        let x = Self::waveform_input(wave)?;
        let tape = Tape::new();
        let p = self.params.bind(&tape, false);
        let enc = self.encoder.forward(&p, tape.constant(x), self.cfg.skip_block_count);
        Ok(enc.taps.iter().map(|t| t.value().as_ref().clone()).collect())
    }

    /// Waveform of exactly `frames × 300` samples. `skips` is ignored unless skips are enabled.
    pub fn decode(&self, repr: &FrameRepresentation, skips: Option<&[Tensor]>) -> Result<Waveform> {
        if repr.values.ndim() != 2 || repr.values.dim(1) != self.cfg.latent_dim {
            return Err(Error::Shape(format!(
                "representation has shape {:?}, codec latent_dim is {}",
                repr.values.shape(),
                self.cfg.latent_dim
            )));
        }
        let (f, d) = (repr.frames(), self.cfg.latent_dim);
        let tape = Tape::new();
        let p = self.params.bind(&tape, false);
        let latent = tape.constant(repr.values.transpose_last2().reshape(&[1, d, f]));
        let taps: Option<Vec<Var>> = match (self.cfg.use_skips, skips) {
            (true, Some(ts)) => Some(ts.iter().map(|t| tape.constant(t.clone())).collect()),
            _ => None,
        };
        let y = self.decoder.forward(&p, latent, taps.as_deref());
        Waveform::new(y.value().data().to_vec(), CODEC_RATE)
    }

    pub fn param_count(cfg: &CodecConfig) -> (usize, usize) {
        (Encoder::param_count(cfg), Decoder::param_count(cfg))
    }
}
