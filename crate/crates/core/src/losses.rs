//! Training objectives and the per-step loss report.
//!
//! Generator objective: `l_G = l_adv + l_vq + l_fm + l_mrs`.
//! Acoustic objective: `l_AM = l_pitch + l_dur + l_utt + l_phone + l_ssim + l_feat`.
//! Joint objective: `l_joint = w_G·l_G + w_AM·l_AM`.
//! The report stores each term after its sub-weight, so these identities hold
//! exactly on the stored `f64` values.

use serde::{Deserialize, Serialize};
use vqspeech_autograd::{Tape, Tensor, Var};

use crate::acoustic::{AcousticBatch, AcousticOutputs};
use crate::dsp::ssim_var;
use crate::error::{Error, Result};

/// Weights of the joint objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub w_g: f64,
    pub w_am: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { w_g: 1.0, w_am: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.w_g > 0.0 && self.w_am > 0.0 {
            Ok(())
        } else {
            Err(Error::Config(format!("loss weights must be positive, got w_g={} w_am={}", self.w_g, self.w_am)))
        }
    }
}

/// Sub-weights inside the generator objective; all 1 by default.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorWeights {
    pub adv: f64,
    pub vq: f64,
    pub fm: f64,
    pub mrs: f64,
}

impl Default for GeneratorWeights {
    fn default() -> Self {
        Self { adv: 1.0, vq: 1.0, fm: 1.0, mrs: 1.0 }
    }
}

/// One training step's losses. Serialized as one JSON object per line, fields in declaration order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: u64,
    pub l_adv: f64,
    pub l_vq: f64,
    pub l_fm: f64,
    pub l_mrs: f64,
    #[serde(rename = "l_G")]
    pub l_g: f64,
    pub l_pitch: f64,
    pub l_dur: f64,
    pub l_utt: f64,
    pub l_phone: f64,
    pub l_ssim: f64,
    pub l_feat: f64,
    #[serde(rename = "l_AM")]
    pub l_am: f64,
    pub l_joint: f64,
    /// Reported only; the codebooks follow EMA.
    pub l_codebook: f64,
    /// Least-squares loss of each critic (periods, then scales).
    pub l_d: Vec<f64>,
}

impl LossReport {
    /// Fills `l_G`, `l_AM` and `l_joint` from the stored terms.
    pub fn finalize(&mut self, weights: LossWeights) {
        self.l_g = codec_generator_loss(self.l_adv, self.l_vq, self.l_fm, self.l_mrs);
        self.l_am = self.l_pitch + self.l_dur + self.l_utt + self.l_phone + self.l_ssim + self.l_feat;
        self.l_joint = joint_loss(self.l_g, self.l_am, weights);
    }

    pub fn is_finite(&self) -> bool {
        [
            self.l_adv, self.l_vq, self.l_fm, self.l_mrs, self.l_g, self.l_pitch, self.l_dur, self.l_utt,
            self.l_phone, self.l_ssim, self.l_feat, self.l_am, self.l_joint, self.l_codebook,
        ]
        .iter()
        .chain(&self.l_d)
        .all(|v| v.is_finite())
    }

    /// First non-finite field, for abort diagnostics.
    pub fn non_finite_field(&self) -> Option<String> {
        let v = serde_json::to_value(self).ok()?;
        v.as_object()?.iter().find_map(|(k, val)| match val {
            serde_json::Value::Null => Some(k.clone()),
            _ => None,
        })
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }

    /// True when every decomposition identity holds bit-exactly.
    pub fn identities_hold(&self, weights: LossWeights) -> bool {
        let mut r = self.clone();
        r.finalize(weights);
        r.l_g.to_bits() == self.l_g.to_bits()
            && r.l_am.to_bits() == self.l_am.to_bits()
            && r.l_joint.to_bits() == self.l_joint.to_bits()
    }
}

/// `l_adv + l_vq + l_fm + l_mrs`, summed left to right.
pub fn codec_generator_loss(l_adv: f64, l_vq: f64, l_fm: f64, l_mrs: f64) -> f64 {
    l_adv + l_vq + l_fm + l_mrs
}

/// `w_G·l_G + w_AM·l_AM`.
pub fn joint_loss(l_g: f64, l_am: f64, w: LossWeights) -> f64 {
    w.w_g * l_g + w.w_am * l_am
}

fn sum_vars<'t>(vars: impl IntoIterator<Item = Var<'t>>) -> Option<Var<'t>> {
    vars.into_iter().reduce(|a, b| a.add(b))
}

fn check_lengths(real: usize, fake: usize) -> Result<()> {
    if real == fake {
        Ok(())
    } else {
        Err(Error::Shape(format!("{real} real critic outputs against {fake} fake ones")))
    }
}

/// Least-squares critic loss per sub-critic: `E[(D(real)−1)²] + E[D(fake)²]`.
pub fn discriminator_losses<'t>(real: &[Var<'t>], fake: &[Var<'t>]) -> Result<Vec<Var<'t>>> {
    check_lengths(real.len(), fake.len())?;
    Ok(real.iter().zip(fake).map(|(r, f)| r.add_scalar(-1.0).sqr().mean().add(f.sqr().mean())).collect())
}

/// Least-squares generator loss summed over sub-critics: `Σ E[(D(fake)−1)²]`.
pub fn generator_adversarial_loss<'t>(fake: &[Var<'t>]) -> Result<Var<'t>> {
    sum_vars(fake.iter().map(|f| f.add_scalar(-1.0).sqr().mean())).ok_or(Error::Empty("no critic outputs"))
}

/// `(d_loss, g_loss)` on plain score tensors, each summed over sub-critics.
pub fn adversarial_losses(real: &[Tensor], fake: &[Tensor]) -> Result<(f64, f64)> {
    check_lengths(real.len(), fake.len())?;
    let tape = Tape::new();
    let r: Vec<Var> = real.iter().map(|t| tape.constant(t.clone())).collect();
    let f: Vec<Var> = fake.iter().map(|t| tape.constant(t.clone())).collect();
    let d = discriminator_losses(&r, &f)?.iter().map(|v| v.item()).sum();
    Ok((d, generator_adversarial_loss(&f)?.item()))
}

/// Mean absolute difference per layer, summed over layers and critics. Real features act as constants.
pub fn feature_match_loss<'t>(real: &[Vec<Var<'t>>], fake: &[Vec<Var<'t>>]) -> Result<Var<'t>> {
    check_lengths(real.len(), fake.len())?;
    let mut terms = Vec::new();
    for (rs, fs) in real.iter().zip(fake) {
        check_lengths(rs.len(), fs.len())?;
        for (r, f) in rs.iter().zip(fs) {
            if r.shape() != f.shape() {
                return Err(Error::Shape(format!("feature maps {:?} vs {:?}", r.shape(), f.shape())));
            }
            terms.push(f.sub(r.detach()).abs().mean());
        }
    }
    sum_vars(terms).ok_or(Error::Empty("no feature maps"))
}

/// [`feature_match_loss`] on plain tensors.
pub fn feature_match_value(real: &[Vec<Tensor>], fake: &[Vec<Tensor>]) -> Result<f64> {
    let tape = Tape::new();
    let lift = |xs: &[Vec<Tensor>]| -> Vec<Vec<Var>> {
        xs.iter().map(|l| l.iter().map(|t| tape.constant(t.clone())).collect()).collect()
    };
    Ok(feature_match_loss(&lift(real), &lift(fake))?.item())
}

/// Per-item weights so that `Σ w·x` over `[B, N, D]` is the mean over the
/// first `lengths[b]` rows of each item, averaged over the batch.
pub fn mask_weights(shape: &[usize], lengths: &[usize]) -> Tensor {
    let (bs, n) = (shape[0], shape[1]);
    let d: usize = shape[2..].iter().product();
    Tensor::from_fn(shape, |i| {
        let (b, row) = (i / (n * d), (i / d) % n);
        if row < lengths[b] {
            1.0 / (lengths[b] * d * bs) as f64
        } else {
            0.0
        }
    })
}

/// Masked L1: per-item mean over valid rows, then mean over items.
pub fn masked_mean_l1<'t>(pred: Var<'t>, target: Var<'t>, lengths: &[usize]) -> Var<'t> {
    let w = pred.tape().constant(mask_weights(&pred.shape(), lengths));
    pred.sub(target).abs().mul(w).sum()
}

/// `1 − SSIM` between predicted and target representations `[B, F, D]`,
/// each pair min-max scaled to `[0, 1]` with its joint range, averaged over items.
pub fn ssim_loss<'t>(pred: Var<'t>, target: Var<'t>, lengths: &[usize]) -> Var<'t> {
    let tape = pred.tape();
    let mut total: Option<Var<'t>> = None;
    for (b, &len) in lengths.iter().enumerate() {
        let p = pred.narrow(0, b, 1).narrow(1, 0, len);
        let t = target.narrow(0, b, 1).narrow(1, 0, len);
        let (pv, tv) = (p.value(), t.value());
        let lo = pv.data().iter().chain(tv.data()).copied().fold(f64::INFINITY, f64::min);
        let hi = pv.data().iter().chain(tv.data()).copied().fold(f64::NEG_INFINITY, f64::max);
        let scale = 1.0 / (hi - lo).max(1e-12);
        let norm = |x: Var<'t>| x.add_scalar(-lo).scale(scale);
        let s = ssim_var(norm(p), norm(t));
        total = Some(match total {
            Some(acc) => acc.add(s),
            None => s,
        });
    }
    let mean_ssim = total.expect("at least one item").scale(1.0 / lengths.len() as f64);
    mean_ssim.neg().add(tape.constant(Tensor::scalar(1.0)))
}

/// Differentiable acoustic-model terms; targets from reference encoders are detached.
pub struct AcousticTerms<'t> {
    pub pitch: Var<'t>,
    pub dur: Var<'t>,
    pub utt: Var<'t>,
    pub phone: Var<'t>,
    pub ssim: Var<'t>,
    pub feat: Var<'t>,
}

impl<'t> AcousticTerms<'t> {
    pub fn total(&self) -> Var<'t> {
        self.pitch.add(self.dur).add(self.utt).add(self.phone).add(self.ssim).add(self.feat)
    }

    /// Writes the six values into `report`.
    pub fn record(&self, report: &mut LossReport) {
        report.l_pitch = self.pitch.item();
        report.l_dur = self.dur.item();
        report.l_utt = self.utt.item();
        report.l_phone = self.phone.item();
        report.l_ssim = self.ssim.item();
        report.l_feat = self.feat.item();
    }
}

/// L1 on log durations, pitch and conditions, plus SSIM and L1 against the
/// target representation `[B, F_max, D]`.
pub fn acoustic_model_loss<'t>(out: &AcousticOutputs<'t>, batch: &AcousticBatch, target_repr: Var<'t>) -> AcousticTerms<'t> {
    let tape = target_repr.tape();
    let (bs, n) = (batch.batch_size(), batch.max_phones());
    let log_dur = tape.constant(batch.log_durations().reshape(&[bs, n, 1]));
    let pitch = tape.constant(batch.pitch.clone().reshape(&[bs, n, 1]));
    let ones = vec![1; bs];
    AcousticTerms {
        pitch: masked_mean_l1(out.pitch, pitch, &batch.phone_lens),
        dur: masked_mean_l1(out.log_duration, log_dur, &batch.phone_lens),
        utt: masked_mean_l1(out.utt_cond, out.ref_utt.detach(), &ones),
        phone: masked_mean_l1(out.phone_cond, out.ref_phone.detach(), &batch.phone_lens),
        ssim: ssim_loss(out.repr, target_repr, &batch.frame_lens),
        feat: masked_mean_l1(out.repr, target_repr, &batch.frame_lens),
    }
}
