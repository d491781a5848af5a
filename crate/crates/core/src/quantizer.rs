//! Multi-stage residual vector quantizer with EMA-maintained codebooks.
//!
//! Index 0 of every stage is a frozen zero vector, so picking it leaves the
//! residual unchanged and residual norms can never grow from one stage to the
//! next.

use std::io::{Read, Write};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use vqspeech_autograd::{kernels, Tensor};

use crate::error::{Error, Result};
use crate::state::StateDict;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantizerConfig {
    pub num_stages: usize,
    pub codebook_size: usize,
    pub dim: usize,
    pub ema_decay: f64,
    pub commitment_beta: f64,
    pub frame_rate_hz: f64,
    /// Consecutive batches without a hit before a code is re-seeded.
    pub dead_code_batches: u64,
}

impl Default for QuantizerConfig {
    fn default() -> Self {
        Self {
            num_stages: 16,
            codebook_size: 1024,
            dim: 128,
            ema_decay: 0.99,
            commitment_beta: 0.25,
            frame_rate_hz: 80.0,
            dead_code_batches: 1000,
        }
    }
}

impl QuantizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_stages == 0 {
            return Err(Error::Config("quantizer.num_stages must be at least 1".into()));
        }
        if self.codebook_size < 2 {
            return Err(Error::Config("quantizer.codebook_size must be at least 2".into()));
        }
        if !(self.ema_decay > 0.0 && self.ema_decay < 1.0) {
            return Err(Error::Config(format!("quantizer.ema_decay must lie in (0, 1), got {}", self.ema_decay)));
        }
        if self.dim == 0 || !(self.commitment_beta >= 0.0) {
            return Err(Error::Config("quantizer.dim must be positive and commitment_beta non-negative".into()));
        }
        Ok(())
    }
}

/// `frame_rate × stages × log2(K)`.
pub fn bitrate_bps(cfg: &QuantizerConfig) -> f64 {
    cfg.frame_rate_hz * cfg.num_stages as f64 * (cfg.codebook_size as f64).log2()
}

/// Nearest codebook row (squared Euclidean); ties go to the smallest index.
pub fn nearest_code(vec: &[f64], codebook: &Tensor) -> Result<(usize, Vec<f64>)> {
    if codebook.is_empty() || codebook.dim(0) == 0 {
        return Err(Error::Empty("nearest_code against an empty codebook"));
    }
    if codebook.dim(1) != vec.len() {
        return Err(Error::Shape(format!("vector has dim {}, codebook rows have {}", vec.len(), codebook.dim(1))));
    }
    let k = exact_argmin(vec, codebook, 0..codebook.dim(0));
    Ok((k, codebook.row(k).to_vec()))
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn exact_argmin(vec: &[f64], codebook: &Tensor, candidates: impl Iterator<Item = usize>) -> usize {
    let mut best = (usize::MAX, f64::INFINITY);
    for k in candidates {
        let d = sq_dist(vec, codebook.row(k));
        if d < best.1 || (d == best.1 && k < best.0) {
            best = (k, d);
        }
    }
    best.0
}

/// Nearest code for every row of `x` `[N, dim]`. Distances are screened with a
/// matrix product and near-ties are re-ranked exactly, so the result equals a
/// brute-force scan.
pub fn nearest_codes(x: &Tensor, codebook: &Tensor) -> Vec<usize> {
    let (n, k) = (x.dim(0), codebook.dim(0));
    let cnorm: Vec<f64> = (0..k).map(|j| codebook.row(j).iter().map(|v| v * v).sum()).collect();
    let cmax = cnorm.iter().copied().fold(0.0, f64::max);
    let dots = kernels::matmul(x, &codebook.transpose_last2());
    (0..n)
        .map(|i| {
            let row = x.row(i);
            let xnorm: f64 = row.iter().map(|v| v * v).sum();
            let d = &dots.data()[i * k..(i + 1) * k];
            let approx: Vec<f64> = (0..k).map(|j| cnorm[j] - 2.0 * d[j]).collect();
            let m = approx.iter().copied().fold(f64::INFINITY, f64::min);
            let tol = 1e-9 * (xnorm + cmax) + 1e-12;
            exact_argmin(row, codebook, (0..k).filter(|&j| approx[j] <= m + tol))
        })
        .collect()
}

/// Per-stage quantization of one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameCodes {
    pub indices: Vec<usize>,
    pub quantized: Vec<f64>,
    /// `‖r_0‖ … ‖r_S‖`, where `r_0` is the frame itself.
    pub residual_norms: Vec<f64>,
}

/// Greedy residual quantization of a single frame.
pub fn msvq_quantize(frame: &[f64], codebooks: &[Tensor]) -> Result<FrameCodes> {
    let mut residual = frame.to_vec();
    let mut quantized = vec![0.0; frame.len()];
    let norm = |r: &[f64]| r.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut out = FrameCodes { indices: vec![], quantized: vec![], residual_norms: vec![norm(&residual)] };
    for cb in codebooks {
        let (k, code) = nearest_code(&residual, cb)?;
        for ((r, q), c) in residual.iter_mut().zip(quantized.iter_mut()).zip(&code) {
            *r -= c;
            *q += c;
        }
        out.indices.push(k);
        out.residual_norms.push(norm(&residual));
    }
    out.quantized = quantized;
    Ok(out)
}

/// Squared-error terms of the quantizer, averaged over frames.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct VqLossTerms {
    /// `‖sg(input) − quantized‖²`; reported only, since codebooks follow EMA.
    pub codebook_loss: f64,
    /// `β‖input − sg(quantized)‖²`; this is the term that trains the encoder.
    pub commitment_loss: f64,
}

/// Both VQ terms for `[N, dim]` inputs: sum of squares per frame, mean over frames.
pub fn vq_loss(input: &Tensor, quantized: &Tensor, beta: f64) -> Result<VqLossTerms> {
    if input.shape() != quantized.shape() {
        return Err(Error::Shape(format!("vq_loss: {:?} vs {:?}", input.shape(), quantized.shape())));
    }
    let frames = if input.ndim() >= 2 { input.len() / input.dim(input.ndim() - 1) } else { 1 };
    let sq: f64 = input.data().iter().zip(quantized.data()).map(|(a, b)| (a - b) * (a - b)).sum();
    let per_frame = sq / frames as f64;
    Ok(VqLossTerms { codebook_loss: per_frame, commitment_loss: beta * per_frame })
}

/// Output of quantizing a batch of frames.
#[derive(Clone, Debug)]
pub struct QuantizeOutput {
    /// `[N × S]` row-major code indices.
    pub indices: Vec<usize>,
    /// Sum of the selected codes, `[N, dim]`.
    pub quantized: Tensor,
    /// Residual entering each stage, `[N, dim]` each.
    pub stage_inputs: Vec<Tensor>,
    /// Selected code of each stage, `[N, dim]` each.
    pub stage_codes: Vec<Tensor>,
}

/// Multi-stage quantizer with per-stage codebooks and EMA statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct Quantizer {
    pub cfg: QuantizerConfig,
    pub codebooks: Vec<Tensor>,
    ema_count: Vec<Vec<f64>>,
    ema_sum: Vec<Tensor>,
    idle: Vec<Vec<u64>>,
    initialized: bool,
}

impl Quantizer {
    /// Codebooks start at zero; they are seeded from data by [`Quantizer::init_from_batch`].
    pub fn new(cfg: QuantizerConfig) -> Result<Self> {
        cfg.validate()?;
        let (s, k, d) = (cfg.num_stages, cfg.codebook_size, cfg.dim);
        Ok(Self {
            codebooks: vec![Tensor::zeros(&[k, d]); s],
            ema_count: vec![vec![0.0; k]; s],
            ema_sum: vec![Tensor::zeros(&[k, d]); s],
            idle: vec![vec![0; k]; s],
            initialized: false,
            cfg,
        })
    }

    pub fn is_initialized(&self) -> bool {
        self.initialized
    }

    fn check_rows(&self, x: &Tensor) -> Result<()> {
        if x.ndim() != 2 || x.dim(1) != self.cfg.dim {
            return Err(Error::Shape(format!("quantizer expects [N, {}] frames, got {:?}", self.cfg.dim, x.shape())));
        }
        Ok(())
    }

    /// k-means++ seeding of every stage from `x` `[N, dim]`, stage by stage on the residuals.
    /// With fewer vectors than codes the remainder are jittered copies of data points.
    pub fn init_from_batch(&mut self, x: &Tensor, rng: &mut ChaCha8Rng) -> Result<()> {
        self.check_rows(x)?;
        if x.dim(0) == 0 {
            return Err(Error::Empty("quantizer initialization batch"));
        }
        let mut residual = x.clone();
        for s in 0..self.cfg.num_stages {
            self.codebooks[s] = kmeans_pp(&residual, self.cfg.codebook_size, rng);
            let idx = nearest_codes(&residual, &self.codebooks[s]);
            subtract_codes(&mut residual, &self.codebooks[s], &idx);
        }
        self.initialized = true;
        Ok(())
    }

    /// Greedy residual quantization of `x` `[N, dim]`.
    pub fn quantize(&self, x: &Tensor) -> Result<QuantizeOutput> {
        self.check_rows(x)?;
        let (n, s_count) = (x.dim(0), self.cfg.num_stages);
        let mut indices = vec![0; n * s_count];
        let mut residual = x.clone();
        let mut quantized = Tensor::zeros(x.shape());
        let mut stage_inputs = Vec::with_capacity(s_count);
        let mut stage_codes = Vec::with_capacity(s_count);
        for (s, cb) in self.codebooks.iter().enumerate() {
            let idx = nearest_codes(&residual, cb);
            let codes = kernels::gather_rows(cb, &idx);
            stage_inputs.push(residual.clone());
            residual = residual.zip_map(&codes, |r, c| r - c);
            quantized.add_assign(&codes);
            for (i, k) in idx.into_iter().enumerate() {
                indices[i * s_count + s] = k;
            }
            stage_codes.push(codes);
        }
        Ok(QuantizeOutput { indices, quantized, stage_inputs, stage_codes })
    }

    /// Sum of the codes named by `[N × S]` indices.
    pub fn dequantize(&self, indices: &[usize], frames: usize) -> Result<Tensor> {
        let s_count = self.cfg.num_stages;
        if indices.len() != frames * s_count {
            return Err(Error::Shape(format!("{} indices for {frames} frames × {s_count} stages", indices.len())));
        }
        if let Some(&bad) = indices.iter().find(|&&k| k >= self.cfg.codebook_size) {
            return Err(Error::Invalid(format!("code index {bad} outside codebook of {}", self.cfg.codebook_size)));
        }
        let d = self.cfg.dim;
        let mut out = Tensor::zeros(&[frames, d]);
        for i in 0..frames {
            for s in 0..s_count {
                let code = self.codebooks[s].row(indices[i * s_count + s]);
                for (o, c) in out.data_mut()[i * d..(i + 1) * d].iter_mut().zip(code) {
                    *o += c;
                }
            }
        }
        Ok(out)
    }

    /// EMA codebook update from one batch of stage assignments. Codes with no
    /// hits keep their rows; code 0 never moves; codes idle for
    /// `dead_code_batches` consecutive batches are re-seeded from this batch.
    pub fn ema_update(&mut self, out: &QuantizeOutput, rng: &mut ChaCha8Rng) {
        let (s_count, k_count, d) = (self.cfg.num_stages, self.cfg.codebook_size, self.cfg.dim);
        let gamma = self.cfg.ema_decay;
        let n = out.quantized.dim(0);
        for s in 0..s_count {
            let inputs = &out.stage_inputs[s];
            let mut counts = vec![0.0; k_count];
            let mut sums = vec![0.0; k_count * d];
            for i in 0..n {
                let k = out.indices[i * s_count + s];
                counts[k] += 1.0;
                for (acc, v) in sums[k * d..(k + 1) * d].iter_mut().zip(inputs.row(i)) {
                    *acc += v;
                }
            }
            for k in 1..k_count {
                if counts[k] == 0.0 {
                    self.idle[s][k] += 1;
                    if self.idle[s][k] >= self.cfg.dead_code_batches && n > 0 {
                        let src = inputs.row(rng.random_range(0..n)).to_vec();
                        self.codebooks[s].data_mut()[k * d..(k + 1) * d].copy_from_slice(&src);
                        self.ema_count[s][k] = 0.0;
                        self.ema_sum[s].data_mut()[k * d..(k + 1) * d].iter_mut().for_each(|v| *v = 0.0);
                        self.idle[s][k] = 0;
                    }
                    continue;
                }
                self.idle[s][k] = 0;
                let count = gamma * self.ema_count[s][k] + (1.0 - gamma) * counts[k];
                self.ema_count[s][k] = count;
                let sum = &mut self.ema_sum[s].data_mut()[k * d..(k + 1) * d];
                for (m, b) in sum.iter_mut().zip(&sums[k * d..(k + 1) * d]) {
                    *m = gamma * *m + (1.0 - gamma) * b;
                }
                let row: Vec<f64> = sum.iter().map(|m| m / count).collect();
                self.codebooks[s].data_mut()[k * d..(k + 1) * d].copy_from_slice(&row);
            }
        }
    }

    pub fn save_state(&self, prefix: &str, dict: &mut StateDict) {
        for s in 0..self.cfg.num_stages {
            let k = self.cfg.codebook_size;
            dict.insert(format!("{prefix}.stage{s}.codebook"), self.codebooks[s].clone());
            dict.insert(format!("{prefix}.stage{s}.ema_sum"), self.ema_sum[s].clone());
            dict.insert(format!("{prefix}.stage{s}.ema_count"), Tensor::new(&[k], self.ema_count[s].clone()));
            let idle = self.idle[s].iter().map(|&v| v as f64).collect();
            dict.insert(format!("{prefix}.stage{s}.idle"), Tensor::new(&[k], idle));
        }
        dict.insert(format!("{prefix}.initialized"), Tensor::scalar(f64::from(u8::from(self.initialized))));
    }

    pub fn load_state(&mut self, prefix: &str, dict: &StateDict) -> Result<()> {
        let (k, d) = (self.cfg.codebook_size, self.cfg.dim);
        for s in 0..self.cfg.num_stages {
            self.codebooks[s] = dict.take(&format!("{prefix}.stage{s}.codebook"), &[k, d])?;
            self.ema_sum[s] = dict.take(&format!("{prefix}.stage{s}.ema_sum"), &[k, d])?;
            self.ema_count[s] = dict.take(&format!("{prefix}.stage{s}.ema_count"), &[k])?.into_data();
            self.idle[s] =
                dict.take(&format!("{prefix}.stage{s}.idle"), &[k])?.data().iter().map(|&v| v as u64).collect();
        }
        self.initialized = dict.take(&format!("{prefix}.initialized"), &[])?.item() != 0.0;
        Ok(())
    }
}

fn subtract_codes(residual: &mut Tensor, codebook: &Tensor, idx: &[usize]) {
    let d = codebook.dim(1);
    for (i, &k) in idx.iter().enumerate() {
        for (r, c) in residual.data_mut()[i * d..(i + 1) * d].iter_mut().zip(codebook.row(k)) {
            *r -= c;
        }
    }
}

/// `k` rows: the zero vector followed by `k − 1` k-means++ seeds drawn from `x`.
fn kmeans_pp(x: &Tensor, k: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let (n, d) = (x.dim(0), x.dim(1));
    let scale = (x.data().iter().map(|v| v * v).sum::<f64>() / x.len().max(1) as f64).sqrt().max(1e-6);
    let mut rows = vec![vec![0.0; d]];
    let mut dist: Vec<f64> = (0..n).map(|i| x.row(i).iter().map(|v| v * v).sum()).collect();
    while rows.len() < k {
        let total: f64 = dist.iter().sum();
        let pick = if total > 1e-300 {
            let mut u = rng.random_range(0.0..total);
            let mut chosen = n - 1;
            for (i, &w) in dist.iter().enumerate() {
                if u < w {
                    chosen = i;
                    break;
                }
                u -= w;
            }
            x.row(chosen).to_vec()
        } else {
            // Every point is already covered exactly: jitter a random data point.
            x.row(rng.random_range(0..n)).iter().map(|v| v + 1e-3 * scale * rng.random_range(-1.0..1.0)).collect()
        };
        for (i, di) in dist.iter_mut().enumerate() {
            *di = di.min(sq_dist(x.row(i), &pick));
        }
        rows.push(pick);
    }
    Tensor::from_rows(&rows)
}

/// Per-frame, per-stage code indices plus the quantizer layout they index into.
#[derive(Clone, Debug, PartialEq)]
pub struct CodeStream {
    pub num_stages: usize,
    pub codebook_size: usize,
    pub dim: usize,
    pub frame_rate_hz: f64,
    /// Samples in the source audio before padding to whole frames.
    pub num_samples: u64,
    /// `[frames × S]` row-major.
    pub indices: Vec<u32>,
}

/// File magic of the code stream format.
pub const CODESTREAM_MAGIC: [u8; 4] = *b"VQCS";
/// Current code stream format version.
pub const CODESTREAM_VERSION: u32 = 1;

impl CodeStream {
    pub fn frames(&self) -> usize {
        self.indices.len() / self.num_stages.max(1)
    }

    /// Layout (all little-endian): magic `VQCS`, version u32, S u32, K u32,
    /// dim u32, frame_rate f64, frames u64, num_samples u64, then `frames × S`
    /// u32 indices row-major.
    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        w.write_all(&CODESTREAM_MAGIC)?;
        w.write_all(&CODESTREAM_VERSION.to_le_bytes())?;
        for v in [self.num_stages, self.codebook_size, self.dim] {
            w.write_all(&(v as u32).to_le_bytes())?;
        }
        w.write_all(&self.frame_rate_hz.to_le_bytes())?;
        w.write_all(&(self.frames() as u64).to_le_bytes())?;
        w.write_all(&self.num_samples.to_le_bytes())?;
        for &i in &self.indices {
            w.write_all(&i.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let bad = |detail: String| Error::Format { what: "code stream", detail };
        let mut buf = Vec::new();
        r.read_to_end(&mut buf).map_err(|e| bad(e.to_string()))?;
        let mut cur = Cursor { buf: &buf, pos: 0 };
        if cur.bytes(4).map_err(bad)? != CODESTREAM_MAGIC {
            return Err(bad("missing VQCS magic".into()));
        }
        let version = cur.u32().map_err(bad)?;
        if version != CODESTREAM_VERSION {
            return Err(Error::Version { found: version, expected: CODESTREAM_VERSION });
        }
        let num_stages = cur.u32().map_err(bad)? as usize;
        let codebook_size = cur.u32().map_err(bad)? as usize;
        let dim = cur.u32().map_err(bad)? as usize;
        let frame_rate_hz = f64::from_le_bytes(cur.bytes(8).map_err(bad)?.try_into().expect("8 bytes"));
        let frames = cur.u64().map_err(bad)? as usize;
        let num_samples = cur.u64().map_err(bad)?;
        let indices = (0..frames * num_stages).map(|_| cur.u32()).collect::<Result<Vec<_>, _>>().map_err(bad)?;
        if cur.pos != buf.len() {
            return Err(bad(format!("{} trailing bytes", buf.len() - cur.pos)));
        }
        if let Some(i) = indices.iter().find(|&&i| i as usize >= codebook_size) {
            return Err(bad(format!("index {i} outside codebook of {codebook_size}")));
        }
        Ok(Self { num_stages, codebook_size, dim, frame_rate_hz, num_samples, indices })
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn bytes(&mut self, n: usize) -> Result<&'a [u8], String> {
        let s = self.buf.get(self.pos..self.pos + n).ok_or_else(|| format!("truncated at byte {}", self.pos))?;
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, String> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, String> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().expect("8 bytes")))
    }
}
