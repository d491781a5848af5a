//! Phoneme-to-representation model with a variance adaptor.
//!
//! Phonemes pass through convolution-augmented self-attention blocks; the
//! adaptor predicts per-phone log durations, pitch (as `ln(1 + f0)`), phone
//! conditions and an utterance condition. Reference encoders read the mel
//! spectrogram to produce the condition targets. The phone sequence is then
//! expanded by durations and decoded into codec latents.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use vqspeech_autograd::{Binding, ConvGeometry, ParamStore, Tape, Tensor, Var};

use crate::error::{Error, Result};
use crate::nn::{sinusoidal_positions, Conv1d, Embedding, LayerNorm, Linear};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AcousticConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub encoder_blocks: usize,
    pub decoder_blocks: usize,
    pub conv_kernel: usize,
    pub ffn_mult: usize,
    pub predictor_hidden: usize,
    pub cond_dim: usize,
    pub n_mels: usize,
    /// Codec latent width the decoder must produce.
    pub latent_dim: usize,
}

impl Default for AcousticConfig {
    fn default() -> Self {
        Self {
            vocab_size: 64,
            d_model: 128,
            n_heads: 2,
            encoder_blocks: 2,
            decoder_blocks: 2,
            conv_kernel: 7,
            ffn_mult: 4,
            predictor_hidden: 128,
            cond_dim: 16,
            n_mels: 80,
            latent_dim: 128,
        }
    }
}

impl AcousticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "acoustic.d_model ({}) must be a positive multiple of n_heads ({}) and vocab_size positive",
                self.d_model, self.n_heads
            )));
        }
        if self.conv_kernel % 2 == 0 {
            return Err(Error::Config("acoustic.conv_kernel must be odd".into()));
        }
        if self.cond_dim == 0 || self.predictor_hidden == 0 || self.latent_dim == 0 || self.n_mels == 0 {
            return Err(Error::Config("acoustic widths must be positive".into()));
        }
        Ok(())
    }
}

/// Pitch as modelled: `ln(1 + f0)`, so unvoiced phones sit at 0.
pub fn pitch_to_model(f0_hz: f64) -> f64 {
    f0_hz.max(0.0).ln_1p()
}

pub fn pitch_from_model(v: f64) -> f64 {
    v.exp_m1().max(0.0)
}

/// Duration as modelled: `ln(1 + frames)`.
pub fn duration_to_model(frames: usize) -> f64 {
    (frames as f64).ln_1p()
}

/// Inference rounding: `max(1, round(exp(x) − 1))`.
pub fn duration_from_model(x: f64) -> usize {
    let d = x.exp_m1().round();
    if d.is_finite() && d > 1.0 {
        d as usize
    } else {
        1
    }
}

/// Key mask as an additive attention bias `[B·H, 1, N]`.
fn attention_bias(lengths: &[usize], n: usize, heads: usize) -> Tensor {
    Tensor::from_fn(&[lengths.len() * heads, 1, n], |i| {
        let (bh, j) = (i / n, i % n);
        if j < lengths[bh / heads] {
            0.0
        } else {
            -1e9
        }
    })
}

/// `[B, N, 1]` with ones on valid rows.
pub fn row_mask(lengths: &[usize], n: usize) -> Tensor {
    Tensor::from_fn(&[lengths.len(), n, 1], |i| if i % n < lengths[i / n] { 1.0 } else { 0.0 })
}

/// `[B, 1, N]` rows that average the first `lengths[b]` positions.
fn mean_pool(lengths: &[usize], n: usize) -> Tensor {
    Tensor::from_fn(&[lengths.len(), 1, n], |i| {
        let (b, j) = (i / n, i % n);
        if j < lengths[b] {
            1.0 / lengths[b] as f64
        } else {
            0.0
        }
    })
}

#[derive(Clone, Debug)]
struct SelfAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
}

impl SelfAttention {
    fn new(store: &mut ParamStore, name: &str, d: usize, heads: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            q: Linear::new(store, &format!("{name}.q"), d, d, rng),
            k: Linear::new(store, &format!("{name}.k"), d, d, rng),
            v: Linear::new(store, &format!("{name}.v"), d, d, rng),
            o: Linear::new(store, &format!("{name}.o"), d, d, rng),
            heads,
        }
    }

    fn forward<'t>(&self, p: &Binding<'t>, x: Var<'t>, bias: Var<'t>) -> Var<'t> {
        let (bs, n, d) = (x.dim(0), x.dim(1), x.dim(2));
        let (h, dh) = (self.heads, d / self.heads);
        let split = |y: Var<'t>| y.reshape(&[bs, n, h, dh]).permute(&[0, 2, 1, 3]).reshape(&[bs * h, n, dh]);
        let q = split(self.q.forward(p, x));
        let k = split(self.k.forward(p, x));
        let v = split(self.v.forward(p, x));
        let att = q.bmm(k.transpose()).scale(1.0 / (dh as f64).sqrt()).add(bias).softmax();
        let ctx = att.bmm(v).reshape(&[bs, h, n, dh]).permute(&[0, 2, 1, 3]).reshape(&[bs, n, d]);
        self.o.forward(p, ctx)
    }
}

/// Pre-norm block: self-attention, then a gated depthwise-convolution module, then a feed-forward layer.
#[derive(Clone, Debug)]
struct ConformerBlock {
    ln_att: LayerNorm,
    att: SelfAttention,
    ln_conv: LayerNorm,
    pw_in: Linear,
    depthwise: Conv1d,
    pw_out: Linear,
    ln_ffn: LayerNorm,
    ffn_in: Linear,
    ffn_out: Linear,
}

impl ConformerBlock {
    fn new(store: &mut ParamStore, name: &str, cfg: &AcousticConfig, rng: &mut ChaCha8Rng) -> Self {
        let d = cfg.d_model;
        let geom = ConvGeometry { groups: d, ..ConvGeometry::same(cfg.conv_kernel, 1) };
        Self {
            ln_att: LayerNorm::new(store, &format!("{name}.ln_att"), d),
            att: SelfAttention::new(store, &format!("{name}.att"), d, cfg.n_heads, rng),
            ln_conv: LayerNorm::new(store, &format!("{name}.ln_conv"), d),
            pw_in: Linear::new(store, &format!("{name}.conv.pw_in"), d, 2 * d, rng),
            depthwise: Conv1d::new(store, &format!("{name}.conv.depthwise"), d, d, cfg.conv_kernel, geom, rng),
            pw_out: Linear::new(store, &format!("{name}.conv.pw_out"), d, d, rng),
            ln_ffn: LayerNorm::new(store, &format!("{name}.ln_ffn"), d),
            ffn_in: Linear::new(store, &format!("{name}.ffn.in"), d, cfg.ffn_mult * d, rng),
            ffn_out: Linear::new(store, &format!("{name}.ffn.out"), cfg.ffn_mult * d, d, rng),
        }
    }

    /// `mask` `[B, N, 1]` zeroes padded rows ahead of the convolution.
    fn forward<'t>(&self, p: &Binding<'t>, x: Var<'t>, bias: Var<'t>, mask: Var<'t>) -> Var<'t> {
        let d = x.dim(2);
        let x = x.add(self.att.forward(p, self.ln_att.forward(p, x), bias));
        let g = self.pw_in.forward(p, self.ln_conv.forward(p, x));
        let glu = g.narrow(2, 0, d).mul(g.narrow(2, d, d).sigmoid()).mul(mask);
        let c = self.depthwise.forward(p, glu.permute(&[0, 2, 1])).permute(&[0, 2, 1]).silu();
        let x = x.add(self.pw_out.forward(p, c));
        let f = self.ffn_out.forward(p, self.ffn_in.forward(p, self.ln_ffn.forward(p, x)).silu());
        x.add(f).mul(mask)
    }
}

/// Two convolutions with ReLU and layer norm, then a linear head; `[B, N, d] → [B, N, out]`.
#[derive(Clone, Debug)]
struct VariancePredictor {
    conv1: Conv1d,
    ln1: LayerNorm,
    conv2: Conv1d,
    ln2: LayerNorm,
    head: Linear,
}

impl VariancePredictor {
    fn new(store: &mut ParamStore, name: &str, d: usize, hidden: usize, out: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            conv1: Conv1d::same(store, &format!("{name}.conv1"), d, hidden, 3, rng),
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), hidden),
            conv2: Conv1d::same(store, &format!("{name}.conv2"), hidden, hidden, 3, rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), hidden),
            head: Linear::new(store, &format!("{name}.head"), hidden, out, rng),
        }
    }

    fn forward<'t>(&self, p: &Binding<'t>, x: Var<'t>, mask: Var<'t>) -> Var<'t> {
        let conv = |c: &Conv1d, h: Var<'t>| c.forward(p, h.permute(&[0, 2, 1])).permute(&[0, 2, 1]).relu();
        let h = self.ln1.forward(p, conv(&self.conv1, x.mul(mask)));
        let h = self.ln2.forward(p, conv(&self.conv2, h.mul(mask)));
        self.head.forward(p, h).mul(mask)
    }
}

/// Utterance-level and phone-level condition vectors plus pitch and durations.
#[derive(Clone, Debug, PartialEq)]
pub struct VarianceBundle {
    /// `[B, cond_dim]`.
    pub utt_cond: Tensor,
    /// `[B, N, cond_dim]`.
    pub phone_cond: Tensor,
    /// `[B, N]`, in model units (`ln(1 + f0)`).
    pub pitch: Tensor,
    /// Frames per phone for each item.
    pub durations: Vec<Vec<usize>>,
}

/// Which predicted fields replace ground truth in one scheduled-sampling draw.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SampleChoice {
    pub pitch: bool,
    pub utt: bool,
    pub phone: bool,
}

impl SampleChoice {
    /// Independent Bernoulli(`p`) draw per field.
    pub fn draw(p: f64, rng: &mut ChaCha8Rng) -> Self {
        let p = p.clamp(0.0, 1.0);
        let mut coin = || rng.random::<f64>() < p;
        Self { pitch: coin(), utt: coin(), phone: coin() }
    }
}

/// Replaces pitch, utterance and phone conditions of `gt` by `pred`, each with
/// probability `p`; durations always come from `gt`.
pub fn scheduled_sample(gt: &VarianceBundle, pred: &VarianceBundle, p: f64, seed: u64) -> VarianceBundle {
    let choice = SampleChoice::draw(p, &mut ChaCha8Rng::seed_from_u64(seed));
    apply_choice(gt, pred, choice)
}

pub fn apply_choice(gt: &VarianceBundle, pred: &VarianceBundle, c: SampleChoice) -> VarianceBundle {
    let pick = |use_pred: bool, g: &Tensor, q: &Tensor| if use_pred { q.clone() } else { g.clone() };
    VarianceBundle {
        utt_cond: pick(c.utt, &gt.utt_cond, &pred.utt_cond),
        phone_cond: pick(c.phone, &gt.phone_cond, &pred.phone_cond),
        pitch: pick(c.pitch, &gt.pitch, &pred.pitch),
        durations: gt.durations.clone(),
    }
}

/// Repeats row `i` of `hidden` `[N, d]` `durations[i]` times.
pub fn length_regulate(hidden: &Tensor, durations: &[usize]) -> Result<Tensor> {
    if hidden.ndim() != 2 || hidden.dim(0) != durations.len() {
        return Err(Error::Alignment(format!(
            "{} durations for hidden of shape {:?}",
            durations.len(),
            hidden.shape()
        )));
    }
    if durations.iter().all(|&d| d == 0) {
        return Err(Error::Invalid("all durations are zero".into()));
    }
    let idx: Vec<usize> = durations.iter().enumerate().flat_map(|(i, &d)| std::iter::repeat_n(i, d)).collect();
    Ok(vqspeech_autograd::kernels::gather_rows(hidden, &idx))
}

/// Differentiable batched expansion: `[B, N, d]` → `[B, F_max, d]`, padded frames zero.
fn regulate_var<'t>(hidden: Var<'t>, durations: &[Vec<usize>], f_max: usize) -> Var<'t> {
    let (bs, n, d) = (hidden.dim(0), hidden.dim(1), hidden.dim(2));
    let zero_row = bs * n;
    let table = Var::concat(&[hidden.reshape(&[bs * n, d]), hidden.tape().constant(Tensor::zeros(&[1, d]))], 0);
    let mut idx = Vec::with_capacity(bs * f_max);
    for (b, durs) in durations.iter().enumerate() {
        let start = idx.len();
        for (i, &k) in durs.iter().enumerate() {
            idx.extend(std::iter::repeat_n(b * n + i, k));
        }
        idx.resize(start + f_max, zero_row);
    }
    table.gather_rows(&idx).reshape(&[bs, f_max, d])
}

/// Padded model inputs for one batch.
#[derive(Clone, Debug)]
pub struct AcousticBatch {
    /// `[B × N_max]` phoneme ids, padded with 0.
    pub phonemes: Vec<usize>,
    pub phone_lens: Vec<usize>,
    /// Frames per phone, one list per item (unpadded).
    pub durations: Vec<Vec<usize>>,
    pub frame_lens: Vec<usize>,
    /// `[B, F_max, n_mels]` reference log-mel, zero padded.
    pub mel: Tensor,
    /// `[B, N_max]` phone pitch in model units.
    pub pitch: Tensor,
}

impl AcousticBatch {
    pub fn batch_size(&self) -> usize {
        self.phone_lens.len()
    }

    pub fn max_phones(&self) -> usize {
        self.phonemes.len() / self.batch_size().max(1)
    }

    pub fn max_frames(&self) -> usize {
        self.mel.dim(1)
    }

    /// `[B, N_max]` log-duration targets.
    pub fn log_durations(&self) -> Tensor {
        let n = self.max_phones();
        Tensor::from_fn(&[self.batch_size(), n], |i| {
            self.durations[i / n].get(i % n).map_or(0.0, |&d| duration_to_model(d))
        })
    }
}

/// Everything the training losses need from one forward pass.
pub struct AcousticOutputs<'t> {
    /// `[B, F_max, latent_dim]`.
    pub repr: Var<'t>,
    /// `[B, N, 1]` predicted log durations.
    pub log_duration: Var<'t>,
    /// `[B, N, 1]`.
    pub pitch: Var<'t>,
    /// `[B, N, cond]`.
    pub phone_cond: Var<'t>,
    /// `[B, 1, cond]`.
    pub utt_cond: Var<'t>,
    /// Reference-encoder targets, same shapes as the predictions.
    pub ref_phone: Var<'t>,
    pub ref_utt: Var<'t>,
}

#[derive(Clone, Debug)]
pub struct AcousticModel {
    pub cfg: AcousticConfig,
    pub params: ParamStore,
    embed: Embedding,
    encoder: Vec<ConformerBlock>,
    duration: VariancePredictor,
    pitch: VariancePredictor,
    phone: VariancePredictor,
    utt: VariancePredictor,
    ref_utt_in: Linear,
    ref_utt_out: Linear,
    ref_phone_in: Linear,
    ref_phone_out: Linear,
    phone_proj: Linear,
    pitch_proj: Linear,
    utt_proj: Linear,
    decoder: Vec<ConformerBlock>,
    out: Linear,
}

impl AcousticModel {
    pub fn new(cfg: AcousticConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = &mut ParamStore::new();
        let r = &mut rng;
        let (d, h, c) = (cfg.d_model, cfg.predictor_hidden, cfg.cond_dim);
        let embed = Embedding::new(s, "am.embed", cfg.vocab_size, d, r);
        let encoder = (0..cfg.encoder_blocks).map(|i| ConformerBlock::new(s, &format!("am.encoder{i}"), &cfg, r)).collect();
        let duration = VariancePredictor::new(s, "am.duration", d, h, 1, r);
        let pitch = VariancePredictor::new(s, "am.pitch", d, h, 1, r);
        let phone = VariancePredictor::new(s, "am.phone_cond", d, h, c, r);
        let utt = VariancePredictor::new(s, "am.utt_cond", d, h, c, r);
        let ref_utt_in = Linear::new(s, "am.ref_utt.in", cfg.n_mels, h, r);
        let ref_utt_out = Linear::new(s, "am.ref_utt.out", h, c, r);
        let ref_phone_in = Linear::new(s, "am.ref_phone.in", cfg.n_mels, h, r);
        let ref_phone_out = Linear::new(s, "am.ref_phone.out", h, c, r);
        let phone_proj = Linear::new(s, "am.phone_proj", c, d, r);
        let pitch_proj = Linear::new(s, "am.pitch_proj", 1, d, r);
        let utt_proj = Linear::new(s, "am.utt_proj", c, d, r);
        let decoder = (0..cfg.decoder_blocks).map(|i| ConformerBlock::new(s, &format!("am.decoder{i}"), &cfg, r)).collect();
        let out = Linear::new(s, "am.out", d, cfg.latent_dim, r);
        let params = std::mem::take(s);
        Ok(Self {
            cfg,
            params,
            embed,
            encoder,
            duration,
            pitch,
            phone,
            utt,
            ref_utt_in,
            ref_utt_out,
            ref_phone_in,
            ref_phone_out,
            phone_proj,
            pitch_proj,
            utt_proj,
            decoder,
            out,
        })
    }

    pub fn param_count(cfg: &AcousticConfig) -> usize {
        let (d, h, c, k) = (cfg.d_model, cfg.predictor_hidden, cfg.cond_dim, cfg.conv_kernel);
        let lin = |i, o| Linear::param_count(i, o, true);
        let block = 3 * 2 * d
            + 5 * lin(d, d)
            + lin(d, 2 * d)
            + Conv1d::param_count(d, d, k, d)
            + lin(d, cfg.ffn_mult * d)
            + lin(cfg.ffn_mult * d, d);
        let predictor = |out| Conv1d::param_count(d, h, 3, 1) + Conv1d::param_count(h, h, 3, 1) + 4 * h + lin(h, out);
        cfg.vocab_size * d
            + (cfg.encoder_blocks + cfg.decoder_blocks) * block
            + 2 * predictor(1)
            + 2 * predictor(c)
            + 2 * (lin(cfg.n_mels, h) + lin(h, c))
            + 2 * lin(c, d)
            + lin(1, d)
            + lin(d, cfg.latent_dim)
    }

    fn check_ids(&self, ids: &[usize]) -> Result<()> {
        match ids.iter().find(|&&i| i >= self.cfg.vocab_size) {
            Some(&id) => Err(Error::UnknownPhonemeId { id, size: self.cfg.vocab_size }),
            None => Ok(()),
        }
    }

    fn blocks<'t>(&self, p: &Binding<'t>, blocks: &[ConformerBlock], x: Var<'t>, lengths: &[usize]) -> Var<'t> {
        let (n, d) = (x.dim(1), x.dim(2));
        let tape = x.tape();
        let bias = tape.constant(attention_bias(lengths, n, self.cfg.n_heads));
        let mask = tape.constant(row_mask(lengths, n));
        let mut h = x.add(tape.constant(sinusoidal_positions(n, d))).mul(mask);
        for b in blocks {
            h = b.forward(p, h, bias, mask);
        }
        h
    }

    /// `[B, N, d]` phoneme encodings from padded ids `[B × N]`.
    pub fn encode_var<'t>(&self, p: &Binding<'t>, ids: &[usize], lengths: &[usize]) -> Var<'t> {
        let (bs, d) = (lengths.len(), self.cfg.d_model);
        let n = ids.len() / bs;
        let x = self.embed.forward(p, ids).reshape(&[bs, n, d]);
        self.blocks(p, &self.encoder, x, lengths)
    }

    /// Utterance reference `[B, 1, cond]` from mel `[B, F, n_mels]`.
    pub fn ref_utterance_var<'t>(&self, p: &Binding<'t>, mel: Var<'t>, frame_lens: &[usize]) -> Var<'t> {
        let h = self.ref_utt_in.forward(p, mel).tanh();
        let pool = mel.tape().constant(mean_pool(frame_lens, mel.dim(1)));
        self.ref_utt_out.forward(p, pool.bmm(h))
    }

    /// Phone references `[B, N, cond]`: per-phone mean of projected mel frames.
    pub fn ref_phones_var<'t>(&self, p: &Binding<'t>, mel: Var<'t>, durations: &[Vec<usize>], n: usize) -> Var<'t> {
        let f = mel.dim(1);
        let h = self.ref_phone_in.forward(p, mel).tanh();
        let pool = Tensor::from_fn(&[durations.len(), n, f], |i| {
            let (b, rest) = (i / (n * f), i % (n * f));
            let (ph, fr) = (rest / f, rest % f);
            let durs = &durations[b];
            if ph >= durs.len() || durs[ph] == 0 {
                return 0.0;
            }
            let start: usize = durs[..ph].iter().sum();
            if (start..start + durs[ph]).contains(&fr) {
                1.0 / durs[ph] as f64
            } else {
                0.0
            }
        });
        self.ref_phone_out.forward(p, mel.tape().constant(pool).bmm(h))
    }

    /// Expands phone-level states by `durations` and decodes `[B, F, latent_dim]`.
    #[allow(clippy::too_many_arguments)]
    pub fn decode_var<'t>(
        &self,
        p: &Binding<'t>,
        hidden: Var<'t>,
        pitch: Var<'t>,
        phone_cond: Var<'t>,
        utt_cond: Var<'t>,
        durations: &[Vec<usize>],
        frame_lens: &[usize],
    ) -> Var<'t> {
        let f_max = frame_lens.iter().copied().max().unwrap_or(0);
        let phone_part = hidden.add(self.phone_proj.forward(p, phone_cond)).add(self.pitch_proj.forward(p, pitch));
        let expanded = regulate_var(phone_part, durations, f_max);
        let mask = hidden.tape().constant(row_mask(frame_lens, f_max));
        let x = expanded.add(self.utt_proj.forward(p, utt_cond)).mul(mask);
        let h = self.blocks(p, &self.decoder, x, frame_lens);
        self.out.forward(p, h).mul(mask)
    }

    /// Training forward with ground-truth durations; `choice` selects which
    /// predicted fields (detached) stand in for ground truth.
    pub fn forward_train<'t>(&self, p: &Binding<'t>, batch: &AcousticBatch, choice: SampleChoice) -> Result<AcousticOutputs<'t>> {
        self.check_ids(&batch.phonemes)?;
        for (b, durs) in batch.durations.iter().enumerate() {
            let total: usize = durs.iter().sum();
            if durs.len() != batch.phone_lens[b] || total != batch.frame_lens[b] {
                return Err(Error::Alignment(format!(
                    "item {b}: {} durations summing to {total} for {} phones and {} frames",
                    durs.len(),
                    batch.phone_lens[b],
                    batch.frame_lens[b]
                )));
            }
        }
        let tape = p.get(self.embed.table).tape();
        let (bs, n) = (batch.batch_size(), batch.max_phones());
        let hidden = self.encode_var(p, &batch.phonemes, &batch.phone_lens);
        let mask = tape.constant(row_mask(&batch.phone_lens, n));
        let log_duration = self.duration.forward(p, hidden, mask);
        let pitch = self.pitch.forward(p, hidden, mask);
        let phone_cond = self.phone.forward(p, hidden, mask);
        let pool = tape.constant(mean_pool(&batch.phone_lens, n));
        let utt_cond = pool.bmm(self.utt.forward(p, hidden, mask));
        let mel = tape.constant(batch.mel.clone());
        let ref_utt = self.ref_utterance_var(p, mel, &batch.frame_lens);
        let ref_phone = self.ref_phones_var(p, mel, &batch.durations, n);
        let gt_pitch = tape.constant(batch.pitch.clone().reshape(&[bs, n, 1]));
        let pick = |use_pred: bool, pred: Var<'t>, gt: Var<'t>| if use_pred { pred.detach() } else { gt };
        let repr = self.decode_var(
            p,
            hidden,
            pick(choice.pitch, pitch, gt_pitch),
            pick(choice.phone, phone_cond, ref_phone),
            pick(choice.utt, utt_cond, ref_utt),
            &batch.durations,
            &batch.frame_lens,
        );
        Ok(AcousticOutputs { repr, log_duration, pitch, phone_cond, utt_cond, ref_phone, ref_utt })
    }

    /// Contextual phoneme encodings `[N, d]` for one utterance.
    pub fn encode_phonemes(&self, ids: &[usize]) -> Result<Tensor> {
        if ids.is_empty() {
            return Err(Error::Empty("phoneme sequence"));
        }
        self.check_ids(ids)?;
        let tape = Tape::new();
        let p = self.params.bind(&tape, false);
        let h = self.encode_var(&p, ids, &[ids.len()]);
        Ok(h.value().as_ref().clone().reshape(&[ids.len(), self.cfg.d_model]))
    }

    /// Utterance condition `[cond_dim]` from mel `[F, n_mels]`.
    pub fn reference_encode_utterance(&self, mel: &Tensor) -> Result<Tensor> {
        self.check_mel(mel)?;
        let tape = Tape::new();
        let p = self.params.bind(&tape, false);
        let (f, m) = (mel.dim(0), mel.dim(1));
        let v = self.ref_utterance_var(&p, tape.constant(mel.clone().reshape(&[1, f, m])), &[f]);
        Ok(v.value().as_ref().clone().reshape(&[self.cfg.cond_dim]))
    }

    /// Phone conditions `[N, cond_dim]` from mel `[F, n_mels]` and durations summing to `F`.
    pub fn reference_encode_phones(&self, mel: &Tensor, durations: &[usize]) -> Result<Tensor> {
        self.check_mel(mel)?;
        let total: usize = durations.iter().sum();
        if total != mel.dim(0) {
            return Err(Error::Alignment(format!("durations sum to {total} but the mel has {} frames", mel.dim(0))));
        }
        let tape = Tape::new();
        let p = self.params.bind(&tape, false);
        let (f, m, n) = (mel.dim(0), mel.dim(1), durations.len());
        let v = self.ref_phones_var(&p, tape.constant(mel.clone().reshape(&[1, f, m])), &[durations.to_vec()], n);
        Ok(v.value().as_ref().clone().reshape(&[n, self.cfg.cond_dim]))
    }

    fn check_mel(&self, mel: &Tensor) -> Result<()> {
        if mel.ndim() != 2 || mel.dim(1) != self.cfg.n_mels || mel.dim(0) == 0 {
            return Err(Error::Shape(format!("mel must be [frames ≥ 1, {}], got {:?}", self.cfg.n_mels, mel.shape())));
        }
        Ok(())
    }

    /// Predicted variances for encodings `[N, d]` of one utterance; durations rounded, at least 1.
    pub fn predict_variances(&self, hidden: &Tensor) -> Result<VarianceBundle> {
        if hidden.ndim() != 2 || hidden.dim(1) != self.cfg.d_model {
            return Err(Error::Shape(format!("hidden must be [N, {}], got {:?}", self.cfg.d_model, hidden.shape())));
        }
        let tape = Tape::new();
        let p = self.params.bind(&tape, false);
        let n = hidden.dim(0);
        let h = tape.constant(hidden.clone().reshape(&[1, n, self.cfg.d_model]));
        let mask = tape.constant(row_mask(&[n], n));
        let log_d = self.duration.forward(&p, h, mask).value();
        let pitch = self.pitch.forward(&p, h, mask).value().as_ref().clone().reshape(&[1, n]);
        let phone_cond = self.phone.forward(&p, h, mask).value().as_ref().clone();
        let pool = tape.constant(mean_pool(&[n], n));
        let utt = pool.bmm(self.utt.forward(&p, h, mask)).value().as_ref().clone().reshape(&[1, self.cfg.cond_dim]);
        let durations = vec![log_d.data().iter().map(|&x| duration_from_model(x)).collect()];
        Ok(VarianceBundle { utt_cond: utt, phone_cond, pitch, durations })
    }

    /// Decodes encodings `[N, d]` with `variance` into representations `[Σdur, latent_dim]`.
    pub fn decode_to_representation(&self, hidden: &Tensor, variance: &VarianceBundle) -> Result<Tensor> {
        let n = hidden.dim(0);
        let durs = variance.durations.first().ok_or(Error::Empty("durations"))?;
        if durs.len() != n || variance.pitch.len() != n || variance.phone_cond.len() != n * self.cfg.cond_dim {
            return Err(Error::Alignment(format!("variance bundle does not match {n} phones")));
        }
        if variance.utt_cond.len() != self.cfg.cond_dim {
            return Err(Error::Shape(format!("utt_cond has {} values, expected {}", variance.utt_cond.len(), self.cfg.cond_dim)));
        }
        let frames: usize = durs.iter().sum();
        if frames == 0 {
            return Err(Error::Invalid("all durations are zero".into()));
        }
        let tape = Tape::new();
        let p = self.params.bind(&tape, false);
        let c = self.cfg.cond_dim;
        let h = tape.constant(hidden.clone().reshape(&[1, n, self.cfg.d_model]));
        let pitch = tape.constant(variance.pitch.clone().reshape(&[1, n, 1]));
        let phone = tape.constant(variance.phone_cond.clone().reshape(&[1, n, c]));
        let utt = tape.constant(variance.utt_cond.clone().reshape(&[1, 1, c]));
        let y = self.decode_var(&p, h, pitch, phone, utt, std::slice::from_ref(durs), &[frames]);
        Ok(y.value().as_ref().clone().reshape(&[frames, self.cfg.latent_dim]))
    }

    /// Text-to-representation inference with predicted variances only.
    pub fn infer(&self, ids: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let hidden = self.encode_phonemes(ids)?;
        let variance = self.predict_variances(&hidden)?;
        let repr = self.decode_to_representation(&hidden, &variance)?;
        Ok((repr, variance.durations[0].clone()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::check_module_gradients;
    use vqspeech_autograd::gradcheck::spread;

    fn tiny() -> AcousticConfig {
        AcousticConfig {
            vocab_size: 10,
            d_model: 8,
            n_heads: 2,
            encoder_blocks: 1,
            decoder_blocks: 1,
            conv_kernel: 3,
            ffn_mult: 2,
            predictor_hidden: 6,
            cond_dim: 3,
            n_mels: 4,
            latent_dim: 5,
        }
    }

    #[test]
    fn phoneme_encoder_contracts() {
        let am = AcousticModel::new(tiny(), 0).unwrap();
        assert_eq!(am.encode_phonemes(&[3]).unwrap().shape(), &[1, 8]);
        let a = am.encode_phonemes(&[1, 2, 3]).unwrap();
        let b = am.encode_phonemes(&[2, 1, 3]).unwrap();
        assert_ne!(a, b);
        assert_eq!(a, am.encode_phonemes(&[1, 2, 3]).unwrap());
        assert!(matches!(am.encode_phonemes(&[1, 10]), Err(Error::UnknownPhonemeId { id: 10, size: 10 })));
    }

    #[test]
    fn parameter_count_matches_store() {
        for cfg in [tiny(), AcousticConfig::default()] {
            let am = AcousticModel::new(cfg.clone(), 0).unwrap();
            // Hand expansion: embedding, blocks, predictors, references, projections, head.
            let (v, d, h, c, k, m, n, l) = (cfg.vocab_size, cfg.d_model, cfg.predictor_hidden, cfg.cond_dim, cfg.conv_kernel, cfg.n_mels, cfg.ffn_mult, cfg.latent_dim);
            let block = 6 * d + 4 * (d * d + d) + (2 * d * d + 2 * d) + (k * d + d) + (d * d + d) + (n * d * d + n * d) + (n * d * d + d);
            let pred = |o: usize| (3 * d * h + h) + (3 * h * h + h) + 4 * h + (h * o + o);
            let want = v * d + (cfg.encoder_blocks + cfg.decoder_blocks) * block + 2 * pred(1) + 2 * pred(c)
                + 2 * (m * h + h + h * c + c) + 2 * (c * d + d) + 2 * d + d * l + l;
            assert_eq!(am.params.numel(), want);
            assert_eq!(AcousticModel::param_count(&cfg), want);
        }
    }

    #[test]
    fn reference_encoders() {
        let am = AcousticModel::new(tiny(), 1).unwrap();
        let mel = |f: usize| Tensor::from_fn(&[f, 4], |i| (i as f64 * 0.3).sin());
        assert_eq!(am.reference_encode_utterance(&mel(5)).unwrap().shape(), &[3]);
        assert_eq!(am.reference_encode_utterance(&mel(11)).unwrap().shape(), &[3]);
        assert_eq!(am.reference_encode_utterance(&mel(7)).unwrap(), am.reference_encode_utterance(&mel(7)).unwrap());
        let per_frame = am.reference_encode_phones(&mel(4), &[1, 1, 1, 1]).unwrap();
        assert_eq!(per_frame.shape(), &[4, 3]);
        let flat = Tensor::full(&[6, 4], 0.2);
        let rows = am.reference_encode_phones(&flat, &[1, 3, 2]).unwrap();
        let row0 = rows.row(0);
        assert!((0..3).all(|i| rows.row(i).iter().zip(row0).all(|(a, b)| (a - b).abs() < 1e-12)));
        assert!(matches!(am.reference_encode_phones(&flat, &[1, 1]), Err(Error::Alignment(_))));
    }

    #[test]
    fn length_regulator() {
        let h = Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(length_regulate(&h, &[1, 1]).unwrap(), h);
        let e = length_regulate(&h, &[2, 3]).unwrap();
        assert_eq!(e.data(), &[1.0, 2.0, 1.0, 2.0, 3.0, 4.0, 3.0, 4.0, 3.0, 4.0]);
        assert!(matches!(length_regulate(&h, &[0, 0]), Err(Error::Invalid(_))));
    }

    #[test]
    fn inference_shapes_and_conditioning() {
        let am = AcousticModel::new(tiny(), 2).unwrap();
        let ids = [1, 4, 2, 7];
        let hidden = am.encode_phonemes(&ids).unwrap();
        let var = am.predict_variances(&hidden).unwrap();
        assert_eq!(var.pitch.len(), 4);
        assert!(var.durations[0].iter().all(|&d| d >= 1));
        let repr = am.decode_to_representation(&hidden, &var).unwrap();
        assert_eq!(repr.shape(), &[var.durations[0].iter().sum::<usize>(), 5]);
        let mut zeroed = var.clone();
        zeroed.utt_cond = Tensor::zeros(zeroed.utt_cond.shape());
        assert_ne!(repr, am.decode_to_representation(&hidden, &zeroed).unwrap());
    }

    #[test]
    fn duration_rounding() {
        assert_eq!(duration_from_model(-3.0), 1);
        assert_eq!(duration_from_model(duration_to_model(7)), 7);
        assert_eq!(duration_from_model(f64::NAN), 1);
    }

    #[test]
    fn scheduled_sampling_extremes() {
        let gt = VarianceBundle {
            utt_cond: Tensor::zeros(&[1, 2]),
            phone_cond: Tensor::zeros(&[1, 3, 2]),
            pitch: Tensor::zeros(&[1, 3]),
            durations: vec![vec![1, 2, 3]],
        };
        let pred = VarianceBundle {
            utt_cond: Tensor::full(&[1, 2], 1.0),
            phone_cond: Tensor::full(&[1, 3, 2], 1.0),
            pitch: Tensor::full(&[1, 3], 1.0),
            durations: vec![vec![9, 9, 9]],
        };
        for seed in 0..20 {
            assert_eq!(scheduled_sample(&gt, &pred, 0.0, seed), gt);
            let all = scheduled_sample(&gt, &pred, 1.0, seed);
            assert_eq!((all.pitch.clone(), all.durations.clone()), (pred.pitch.clone(), gt.durations.clone()));
            assert_eq!((all.utt_cond, all.phone_cond), (pred.utt_cond.clone(), pred.phone_cond.clone()));
        }
        let a = scheduled_sample(&gt, &pred, 0.5, 42);
        assert_eq!(a, scheduled_sample(&gt, &pred, 0.5, 42));
    }

    fn toy_batch() -> AcousticBatch {
        AcousticBatch {
            phonemes: vec![1, 2, 3, 4, 5, 0],
            phone_lens: vec![3, 2],
            durations: vec![vec![1, 2, 1], vec![2, 1]],
            frame_lens: vec![4, 3],
            mel: Tensor::from_fn(&[2, 4, 4], |i| (i as f64 * 0.37).cos()),
            pitch: Tensor::from_fn(&[2, 3], |i| i as f64 * 0.5),
        }
    }

    #[test]
    fn training_forward_shapes_and_masking() {
        let am = AcousticModel::new(tiny(), 3).unwrap();
        let tape = Tape::new();
        let p = am.params.bind(&tape, false);
        let out = am.forward_train(&p, &toy_batch(), SampleChoice::default()).unwrap();
        assert_eq!(out.repr.shape(), vec![2, 4, 5]);
        assert_eq!(out.log_duration.shape(), vec![2, 3, 1]);
        assert_eq!(out.utt_cond.shape(), vec![2, 1, 3]);
        assert_eq!(out.ref_utt.shape(), vec![2, 1, 3]);
        // Padded frame of item 1 is zero.
        assert!(out.repr.value().data()[(4 + 3) * 5..].iter().all(|&v| v == 0.0));
        let mut bad = toy_batch();
        bad.durations[1] = vec![2, 2];
        assert!(matches!(am.forward_train(&p, &bad, SampleChoice::default()), Err(Error::Alignment(_))));
    }

    #[test]
    fn padding_does_not_change_an_item() {
        let am = AcousticModel::new(tiny(), 4).unwrap();
        let batch = toy_batch();
        let single = AcousticBatch {
            phonemes: vec![4, 5],
            phone_lens: vec![2],
            durations: vec![vec![2, 1]],
            frame_lens: vec![3],
            mel: batch.mel.clone().reshape(&[8, 4]),
            pitch: Tensor::new(&[1, 2], vec![1.5, 2.0]),
        };
        let single = AcousticBatch { mel: Tensor::new(&[1, 3, 4], single.mel.data()[16..28].to_vec()), ..single };
        let tape = Tape::new();
        let p = am.params.bind(&tape, false);
        let both = am.forward_train(&p, &batch, SampleChoice::default()).unwrap().repr.value();
        let one = am.forward_train(&p, &single, SampleChoice::default()).unwrap().repr.value();
        for i in 0..15 {
            assert!((both.data()[20 + i] - one.data()[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn acoustic_model_gradients() {
        let am = AcousticModel::new(tiny(), 5).unwrap();
        let batch = toy_batch();
        let report = check_module_gradients(&am.params, &[], spread(2), |p, _| {
            let out = am.forward_train(p, &batch, SampleChoice::default()).unwrap();
            out.repr
                .sum()
                .add(out.log_duration.sum())
                .add(out.pitch.sqr().sum())
                .add(out.phone_cond.sum())
                .add(out.utt_cond.sum())
                .add(out.ref_phone.sqr().sum())
                .add(out.ref_utt.sum())
        });
        // Attention key biases have zero true gradient, so their finite differences are pure roundoff.
        assert!(report.passes(1e-2), "{report:?}");
    }
}
