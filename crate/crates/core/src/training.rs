//! Two-phase training: codec pretraining on audio, then joint training of the
//! acoustic model and codec decoder against frozen encoder/quantizer targets.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use vqspeech_autograd::{Tape, Tensor, Var};

use crate::acoustic::{AcousticModel, SampleChoice};
use crate::codec::{CodecNetwork, FrameRepresentation, SAMPLES_PER_FRAME};
use crate::config::SystemConfig;
use crate::data::JointBatch;
use crate::discriminators::Discriminators;
use crate::dsp::{multi_res_spectral_var, Waveform};
use crate::error::{Error, Result};
use crate::losses::{
    acoustic_model_loss, discriminator_losses, feature_match_loss, generator_adversarial_loss, GeneratorWeights,
    LossReport, LossWeights,
};
use crate::nn::{Adam, AdamConfig, WeightEma};
use crate::quantizer::{QuantizeOutput, Quantizer};
use crate::state::{load_checkpoint, save_checkpoint, StateDict};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    #[default]
    Codec,
    Joint,
}

/// Constant rate until `start`, then `lr·gamma^((step − start)/interval)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrDecay {
    pub gamma: f64,
    pub interval: u64,
    pub start: u64,
}

impl Default for LrDecay {
    fn default() -> Self {
        Self { gamma: 0.999, interval: 1000, start: 10_000 }
    }
}

/// Scheduled-sampling probability rising linearly from 0 to `p_max` over `ramp_steps`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingRamp {
    pub p_max: f64,
    pub ramp_steps: u64,
}

impl Default for SamplingRamp {
    fn default() -> Self {
        Self { p_max: 0.5, ramp_steps: 20_000 }
    }
}

impl SamplingRamp {
    pub fn probability(&self, step: u64) -> f64 {
        if self.ramp_steps == 0 {
            return self.p_max;
        }
        self.p_max * (step as f64 / self.ramp_steps as f64).min(1.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    pub phase: Phase,
    pub batch_size: usize,
    pub segment_samples: usize,
    pub warmup_steps_with_skips: u64,
    pub lr: f64,
    pub lr_decay: LrDecay,
    pub seed: u64,
    pub max_steps: u64,
    pub weights: LossWeights,
    pub generator_weights: GeneratorWeights,
    pub sampling: SamplingRamp,
    /// Frames of predicted representation sent through the decoder per item in the joint phase.
    pub joint_segment_frames: usize,
    pub weight_ema_decay: f64,
    pub adam: AdamConfig,
    pub checkpoint_every: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            phase: Phase::Codec,
            batch_size: 16,
            segment_samples: 24_000,
            warmup_steps_with_skips: 1000,
            lr: 1e-4,
            lr_decay: LrDecay::default(),
            seed: 0,
            max_steps: 200_000,
            weights: LossWeights::default(),
            generator_weights: GeneratorWeights::default(),
            sampling: SamplingRamp::default(),
            joint_segment_frames: 80,
            weight_ema_decay: 0.999,
            adam: AdamConfig::default(),
            checkpoint_every: 1000,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.segment_samples == 0 || self.segment_samples % SAMPLES_PER_FRAME != 0 {
            return bad(format!(
                "training.segment_samples must be a positive multiple of {SAMPLES_PER_FRAME}, got {}",
                self.segment_samples
            ));
        }
        if self.batch_size == 0 {
            return bad("training.batch_size must be at least 1".into());
        }
        if !(self.lr > 0.0) || !(self.lr_decay.gamma > 0.0 && self.lr_decay.gamma <= 1.0) || self.lr_decay.interval == 0 {
            return bad("training.lr must be positive, lr_decay.gamma in (0, 1] and lr_decay.interval positive".into());
        }
        if !(0.0..=1.0).contains(&self.sampling.p_max) {
            return bad(format!("training.sampling.p_max must lie in [0, 1], got {}", self.sampling.p_max));
        }
        if self.joint_segment_frames == 0 {
            return bad("training.joint_segment_frames must be positive".into());
        }
        if !(0.0..1.0).contains(&self.weight_ema_decay) {
            return bad("training.weight_ema_decay must lie in [0, 1)".into());
        }
        self.weights.validate()
    }
}

pub fn lr_schedule(step: u64, cfg: &TrainingConfig) -> f64 {
    let d = cfg.lr_decay;
    if step <= d.start {
        return cfg.lr;
    }
    cfg.lr * d.gamma.powf((step - d.start) as f64 / d.interval as f64)
}

/// Start frame of a uniformly drawn window of `n_frames` within `total` frames (0 if it does not fit).
pub fn segment_start(total: usize, n_frames: usize, rng: &mut ChaCha8Rng) -> usize {
    if n_frames >= total {
        0
    } else {
        rng.random_range(0..=total - n_frames)
    }
}

/// Aligned window of `n_frames` frames and `300·n_frames` samples; the whole
/// utterance when it is shorter. The waveform is zero-padded to whole frames first.
pub fn random_segment(
    repr: &FrameRepresentation,
    wave: &Waveform,
    n_frames: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(FrameRepresentation, Waveform)> {
    let total = repr.frames();
    if wave.len() > total * SAMPLES_PER_FRAME {
        return Err(Error::Alignment(format!("{} samples do not fit {total} frames", wave.len())));
    }
    let n = n_frames.min(total);
    let s = segment_start(total, n, rng);
    let d = repr.values.dim(1);
    let values = Tensor::new(&[n, d], repr.values.data()[s * d..(s + n) * d].to_vec());
    let mut samples = wave.samples.clone();
    samples.resize(total * SAMPLES_PER_FRAME, 0.0);
    let clip = samples[s * SAMPLES_PER_FRAME..(s + n) * SAMPLES_PER_FRAME].to_vec();
    Ok((FrameRepresentation { values, num_samples: clip.len() }, Waveform::new(clip, wave.sample_rate_hz)?))
}

/// `[B, 1, T]` from equal-length waveforms.
fn stack(waves: &[Waveform]) -> Result<Tensor> {
    let t = waves.first().ok_or(Error::Empty("waveform batch"))?.len();
    if waves.iter().any(|w| w.len() != t) {
        return Err(Error::Shape("waveforms in a batch must share one length".into()));
    }
    Ok(Tensor::new(&[waves.len(), 1, t], waves.iter().flat_map(|w| w.samples.iter().copied()).collect()))
}

/// Generator-side adversarial terms, unweighted.
struct AdversarialTerms<'t> {
    adv: Var<'t>,
    fm: Var<'t>,
    mrs: Var<'t>,
    l_d: Vec<f64>,
}

/// Models, optimizers and counters for both phases.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub cfg: SystemConfig,
    pub codec: CodecNetwork,
    pub quantizer: Quantizer,
    pub disc: Discriminators,
    pub am: AcousticModel,
    gen_opt: Adam,
    disc_opt: Adam,
    am_opt: Adam,
    pub codec_ema: WeightEma,
    pub am_ema: WeightEma,
    pub step: u64,
    /// Times the skip path has been switched off.
    pub skip_toggles: u32,
    rng: ChaCha8Rng,
    /// Generator-side gradients of the last step, in codec parameter order.
    pub last_codec_grads: Vec<Tensor>,
    /// Phoneme symbols, id order; travels with checkpoints.
    pub vocab: Vec<String>,
}

impl Trainer {
    pub fn new(cfg: SystemConfig) -> Result<Self> {
        cfg.validate()?;
        let seed = cfg.training.seed;
        let mut codec = CodecNetwork::new(cfg.codec.clone(), seed)?;
        codec.toggle_skips(cfg.training.warmup_steps_with_skips > 0 && cfg.training.phase == Phase::Codec);
        let disc = Discriminators::new(cfg.discriminators.clone(), seed.wrapping_add(1))?;
        let am = AcousticModel::new(cfg.acoustic.clone(), seed.wrapping_add(2))?;
        let adam = cfg.training.adam;
        let decay = cfg.training.weight_ema_decay;
        Ok(Self {
            quantizer: Quantizer::new(cfg.quantizer.clone())?,
            gen_opt: Adam::new(adam, &codec.params),
            disc_opt: Adam::new(adam, &disc.params),
            am_opt: Adam::new(adam, &am.params),
            codec_ema: WeightEma::new(decay, &codec.params),
            am_ema: WeightEma::new(decay, &am.params),
            step: 0,
            skip_toggles: 0,
            rng: ChaCha8Rng::seed_from_u64(seed.wrapping_add(3)),
            last_codec_grads: Vec::new(),
            vocab: Vec::new(),
            codec,
            disc,
            am,
            cfg,
        })
    }

    pub fn phase(&self) -> Phase {
        self.cfg.training.phase
    }

    /// Fixed-length training crops, one per waveform; short clips are zero-padded.
    pub fn crop_segments(&mut self, waves: &[Waveform]) -> Result<Vec<Waveform>> {
        let n = self.cfg.training.segment_samples;
        waves
            .iter()
            .map(|w| {
                let start = if w.len() > n { self.rng.random_range(0..=w.len() - n) } else { 0 };
                let mut s: Vec<f64> = w.samples[start..w.len().min(start + n)].to_vec();
                s.resize(n, 0.0);
                Waveform::new(s, w.sample_rate_hz)
            })
            .collect()
    }

    /// Updates the critics on (real, detached fake), then builds the generator
    /// terms on `fake`'s tape with the updated critics held constant.
    fn adversarial<'t>(&mut self, real: &Tensor, fake: Var<'t>, lr: f64) -> Result<AdversarialTerms<'t>> {
        let fake_value = fake.value().as_ref().clone();
        let l_d = {
            let tape = Tape::new();
            let p = self.disc.params.bind(&tape, true);
            let r = self.disc.forward(&p, tape.constant(real.clone()));
            let f = self.disc.forward(&p, tape.constant(fake_value));
            let losses = discriminator_losses(&r.scores, &f.scores)?;
            let values: Vec<f64> = losses.iter().map(|l| l.item()).collect();
            if let Some(bad) = values.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite { step: self.step, detail: format!("l_d[{bad}]") });
            }
            let total = losses.iter().skip(1).fold(losses[0], |acc, &l| acc.add(l));
            let grads = p.grads(&tape.backward(total));
            self.disc_opt.update(&mut self.disc.params, &grads, lr, |_| true);
            values
        };
        let tape = fake.tape();
        let p = self.disc.params.bind(tape, false);
        let real_var = tape.constant(real.clone());
        let r = self.disc.forward(&p, real_var);
        let f = self.disc.forward(&p, fake);
        let (bs, t) = (real.dim(0), real.dim(2));
        Ok(AdversarialTerms {
            adv: generator_adversarial_loss(&f.scores)?,
            fm: feature_match_loss(&r.features, &f.features)?,
            mrs: multi_res_spectral_var(real_var.reshape(&[bs, t]), fake.reshape(&[bs, t])),
            l_d,
        })
    }

    /// Commitment term summed over stages, with the codebook term's value.
    fn vq_terms<'t>(&self, rows: Var<'t>, q: &QuantizeOutput) -> (Var<'t>, f64) {
        let tape = rows.tape();
        let n = rows.dim(0) as f64;
        let mut prefix = Tensor::zeros(q.quantized.shape());
        let mut total: Option<Var<'t>> = None;
        for code in &q.stage_codes {
            prefix.add_assign(code);
            let term = rows.sub(tape.constant(prefix.clone())).sqr().sum().scale(1.0 / n);
            total = Some(total.map_or(term, |t| t.add(term)));
        }
        let total = total.expect("at least one stage");
        (total.scale(self.cfg.quantizer.commitment_beta), total.item())
    }

    fn check_finite(&self, report: &LossReport) -> Result<()> {
        match report.non_finite_field() {
            Some(field) => Err(Error::NonFinite { step: self.step, detail: field }),
            None if !report.is_finite() => Err(Error::NonFinite { step: self.step, detail: "loss".into() }),
            None => Ok(()),
        }
    }

    /// One critic update and one generator update on equal-length waveforms.
    pub fn train_codec_step(&mut self, waves: &[Waveform]) -> Result<LossReport> {
        if self.phase() != Phase::Codec {
            return Err(Error::Config("train_codec_step requires training.phase = codec".into()));
        }
        if self.step >= self.cfg.training.warmup_steps_with_skips && self.codec.skips_enabled() {
            self.codec.toggle_skips(false);
            self.skip_toggles += 1;
        }
        let x = stack(waves)?;
        if x.dim(2) % SAMPLES_PER_FRAME != 0 {
            return Err(Error::Shape(format!("segment of {} samples is not whole frames", x.dim(2))));
        }
        let lr = lr_schedule(self.step, &self.cfg.training);
        let gw = self.cfg.training.generator_weights;
        let tape = Tape::new();
        let p = self.codec.params.bind(&tape, true);
        let skips = self.codec.skips_enabled();
        let enc = self.codec.encoder.forward(&p, tape.constant(x.clone()), if skips { self.codec.cfg.skip_block_count } else { 0 });
        let (bs, d, f) = (enc.latent.dim(0), enc.latent.dim(1), enc.latent.dim(2));
        let rows = enc.latent.permute(&[0, 2, 1]).reshape(&[bs * f, d]);
        let rows_value = rows.value();
        if !self.quantizer.is_initialized() {
            self.quantizer.init_from_batch(&rows_value, &mut self.rng)?;
        }
        let q = self.quantizer.quantize(&rows_value)?;
        let (vq, l_codebook) = self.vq_terms(rows, &q);
        let zq = rows.straight_through(q.quantized.clone()).reshape(&[bs, f, d]).permute(&[0, 2, 1]);
        let y = self.codec.decoder.forward(&p, zq, skips.then_some(&enc.taps[..]));
        let adv = self.adversarial(&x, y, lr)?;
        let total = adv.adv.scale(gw.adv).add(vq.scale(gw.vq)).add(adv.fm.scale(gw.fm)).add(adv.mrs.scale(gw.mrs));
        let mut report = LossReport {
            step: self.step,
            l_adv: gw.adv * adv.adv.item(),
            l_vq: gw.vq * vq.item(),
            l_fm: gw.fm * adv.fm.item(),
            l_mrs: gw.mrs * adv.mrs.item(),
            l_codebook,
            l_d: adv.l_d,
            ..LossReport::default()
        };
        report.finalize(self.cfg.training.weights);
        self.check_finite(&report)?;
        let grads = p.grads(&tape.backward(total.scale(self.cfg.training.weights.w_g)));
        self.gen_opt.update(&mut self.codec.params, &grads, lr, |_| true);
        self.last_codec_grads = grads;
        self.quantizer.ema_update(&q, &mut self.rng);
        self.codec_ema.update(&self.codec.params);
        self.step += 1;
        Ok(report)
    }

    /// Encode, quantize and decode `wave` along the training path, skips included while enabled.
    pub fn reconstruct(&self, wave: &Waveform) -> Result<Waveform> {
        let repr = self.codec.encode(wave)?;
        let q = self.quantizer.quantize(&repr.values)?;
        let taps = if self.codec.skips_enabled() { Some(self.codec.encoder_taps(wave)?) } else { None };
        let out = self.codec.decode(&FrameRepresentation { values: q.quantized, num_samples: wave.len() }, taps.as_deref())?;
        Waveform::new(out.samples[..wave.len()].to_vec(), wave.sample_rate_hz)
    }

    /// Quantized frozen-encoder latents of each item, zero-padded to `[B, F_max, D]`.
    pub fn target_representations(&self, batch: &JointBatch) -> Result<Tensor> {
        let f_max = batch.am.max_frames();
        let d = self.cfg.codec.latent_dim;
        let mut out = Tensor::zeros(&[batch.waves.len(), f_max, d]);
        for (b, wave) in batch.waves.iter().enumerate() {
            let repr = self.codec.encode(wave)?;
            let frames = batch.am.frame_lens[b];
            if repr.frames() != frames {
                return Err(Error::Alignment(format!(
                    "item {b}: audio gives {} codec frames but durations sum to {frames}",
                    repr.frames()
                )));
            }
            let q = self.quantizer.quantize(&repr.values)?;
            out.data_mut()[b * f_max * d..(b * f_max + frames) * d].copy_from_slice(q.quantized.data());
        }
        Ok(out)
    }

    /// One joint update of the acoustic model and codec decoder; encoder and
    /// quantizer stay fixed. Critics keep training on decoded segments.
    pub fn train_joint_step(&mut self, batch: &JointBatch) -> Result<LossReport> {
        if self.phase() != Phase::Joint {
            return Err(Error::Config("train_joint_step requires training.phase = joint".into()));
        }
        if !self.quantizer.is_initialized() {
            return Err(Error::Config("joint training needs a pretrained codec checkpoint".into()));
        }
        if self.codec.skips_enabled() {
            self.codec.toggle_skips(false);
            self.skip_toggles += 1;
        }
        let tc = self.cfg.training.clone();
        let lr = lr_schedule(self.step, &tc);
        let choice = SampleChoice::draw(tc.sampling.probability(self.step), &mut self.rng);
        let targets = self.target_representations(batch)?;
        let tape = Tape::new();
        let gp = self.codec.params.bind_where(&tape, |n| n.starts_with("decoder."));
        let ap = self.am.params.bind(&tape, true);
        let out = self.am.forward_train(&ap, &batch.am, choice)?;
        let terms = acoustic_model_loss(&out, &batch.am, tape.constant(targets));

        let n = tc.joint_segment_frames.min(*batch.am.frame_lens.iter().min().expect("nonempty batch"));
        let mut segs = Vec::with_capacity(batch.waves.len());
        let mut real = Vec::with_capacity(batch.waves.len() * n * SAMPLES_PER_FRAME);
        for (b, wave) in batch.waves.iter().enumerate() {
            let s = segment_start(batch.am.frame_lens[b], n, &mut self.rng);
            segs.push(out.repr.narrow(0, b, 1).narrow(1, s, n));
            real.extend_from_slice(&wave.samples[s * SAMPLES_PER_FRAME..(s + n) * SAMPLES_PER_FRAME]);
        }
        let z = Var::concat(&segs, 0).permute(&[0, 2, 1]);
        let y = self.codec.decoder.forward(&gp, z, None);
        let real = Tensor::new(&[segs.len(), 1, n * SAMPLES_PER_FRAME], real);
        let adv = self.adversarial(&real, y, lr)?;
        let gw = tc.generator_weights;
        let l_g = adv.adv.scale(gw.adv).add(adv.fm.scale(gw.fm)).add(adv.mrs.scale(gw.mrs));
        let total = l_g.scale(tc.weights.w_g).add(terms.total().scale(tc.weights.w_am));
        let mut report = LossReport {
            step: self.step,
            l_adv: gw.adv * adv.adv.item(),
            l_fm: gw.fm * adv.fm.item(),
            l_mrs: gw.mrs * adv.mrs.item(),
            l_d: adv.l_d,
            ..LossReport::default()
        };
        terms.record(&mut report);
        report.finalize(tc.weights);
        self.check_finite(&report)?;
        let grads = tape.backward(total);
        let codec_grads = gp.grads(&grads);
        self.gen_opt.update(&mut self.codec.params, &codec_grads, lr, |n| n.starts_with("decoder."));
        self.last_codec_grads = codec_grads;
        self.am_opt.update(&mut self.am.params, &ap.grads(&grads), lr, |_| true);
        self.codec_ema.update(&self.codec.params);
        self.am_ema.update(&self.am.params);
        self.step += 1;
        Ok(report)
    }

    /// Writes every piece of state needed to continue bit-exactly.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut dict = StateDict::new();
        dict.put_params("codec", &self.codec.params);
        dict.put_params("disc", &self.disc.params);
        dict.put_params("am", &self.am.params);
        for (name, opt) in [("gen", &self.gen_opt), ("disc", &self.disc_opt), ("am", &self.am_opt)] {
            dict.put_list(&format!("opt.{name}.m"), &opt.m);
            dict.put_list(&format!("opt.{name}.v"), &opt.v);
        }
        dict.put_list("ema.codec", &self.codec_ema.shadow);
        dict.put_list("ema.am", &self.am_ema.shadow);
        self.quantizer.save_state("quantizer", &mut dict);
        let meta = serde_json::json!({
            "phase": self.phase(),
            "step": self.step,
            "skips": self.codec.skips_enabled(),
            "skip_toggles": self.skip_toggles,
            "opt_steps": [self.gen_opt.step, self.disc_opt.step, self.am_opt.step],
            "rng": self.rng,
            "ema_updates": [self.codec_ema.updates, self.am_ema.updates],
            "vocab": self.vocab,
            "config": self.cfg,
        });
        save_checkpoint(path, &meta, &dict)
    }

    /// Restores a checkpoint with the configuration it was saved with.
    pub fn from_checkpoint(path: &Path) -> Result<Self> {
        let (meta, _) = load_checkpoint(path)?;
        let cfg = meta
            .get("config")
            .ok_or_else(|| Error::Format { what: "checkpoint", detail: "missing meta `config`".into() })?;
        Self::load(path, serde_json::from_value(cfg.clone())?)
    }

    /// Codec and acoustic model carrying the averaged weights.
    pub fn ema_models(&self) -> (CodecNetwork, AcousticModel) {
        let mut codec = self.codec.clone();
        codec.params = self.codec_ema.snapshot(&codec.params);
        codec.toggle_skips(false);
        let mut am = self.am.clone();
        am.params = self.am_ema.snapshot(&am.params);
        (codec, am)
    }

    /// Restores a checkpoint into a trainer built from `cfg`. Model shapes must
    /// match. Loading a checkpoint from the other phase keeps the weights,
    /// codebooks and critics but restarts the step counter and generator-side optimizers.
    pub fn load(path: &Path, cfg: SystemConfig) -> Result<Self> {
        let (meta, dict) = load_checkpoint(path)?;
        let mut t = Self::new(cfg)?;
        let field = |k: &str| meta.get(k).ok_or_else(|| Error::Format { what: "checkpoint", detail: format!("missing meta `{k}`") });
        let saved_phase: Phase = serde_json::from_value(field("phase")?.clone())?;
        let saved: SystemConfig = serde_json::from_value(field("config")?.clone())?;
        if saved.codec.latent_dim != t.cfg.codec.latent_dim {
            return Err(Error::Config(format!(
                "checkpoint latent_dim {} does not match configured latent_dim {}",
                saved.codec.latent_dim, t.cfg.codec.latent_dim
            )));
        }
        dict.get_params("codec", &mut t.codec.params)?;
        dict.get_params("disc", &mut t.disc.params)?;
        dict.get_params("am", &mut t.am.params)?;
        t.quantizer.load_state("quantizer", &dict)?;
        t.codec_ema.shadow = dict.get_list("ema.codec", &t.codec_ema.shadow)?;
        t.am_ema.shadow = dict.get_list("ema.am", &t.am_ema.shadow)?;
        let ema_updates: [u64; 2] = serde_json::from_value(field("ema_updates")?.clone())?;
        (t.codec_ema.updates, t.am_ema.updates) = (ema_updates[0], ema_updates[1]);
        t.vocab = serde_json::from_value(field("vocab")?.clone())?;
        let steps: [u64; 3] = serde_json::from_value(field("opt_steps")?.clone())?;
        t.disc_opt.m = dict.get_list("opt.disc.m", &t.disc_opt.m)?;
        t.disc_opt.v = dict.get_list("opt.disc.v", &t.disc_opt.v)?;
        t.disc_opt.step = steps[1];
        if saved_phase == t.phase() {
            for (name, opt, s) in [("gen", &mut t.gen_opt, steps[0]), ("am", &mut t.am_opt, steps[2])] {
                opt.m = dict.get_list(&format!("opt.{name}.m"), &opt.m)?;
                opt.v = dict.get_list(&format!("opt.{name}.v"), &opt.v)?;
                opt.step = s;
            }
            t.step = serde_json::from_value(field("step")?.clone())?;
            t.skip_toggles = serde_json::from_value(field("skip_toggles")?.clone())?;
            t.rng = serde_json::from_value(field("rng")?.clone())?;
            let skips: bool = serde_json::from_value(field("skips")?.clone())?;
            t.codec.toggle_skips(skips);
        } else {
            t.codec.toggle_skips(false);
        }
        Ok(t)
    }
}
