//! Manifests, vocabularies, feature extraction with an on-disk cache,
//! padded batches, and a synthetic harmonic corpus.
//!
//! Manifest format: one JSON object per line with fields
//! `audio_path` (relative to the manifest directory or absolute),
//! `phonemes` (symbol list), `durations_frames` (frames at 80 per second,
//! one per phoneme) and optional `pitch_path`. Blank lines are ignored.
//!
//! Feature cache layout: `<cache_dir>/<sha256>.vqck`, where the digest covers
//! the audio samples, the durations and the spectrogram settings; each file is
//! a checkpoint container holding `mel` `[frames, n_mels]` and `pitch` `[phones]`.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use vqspeech_autograd::Tensor;

use crate::acoustic::{pitch_to_model, AcousticBatch};
use crate::codec::SAMPLES_PER_FRAME;
use crate::dsp::{
    extract_pitch, mel_spectrogram, phone_average_pitch, read_wav, resample, write_wav, SpectrogramConfig, Waveform,
    CODEC_RATE, FEATURE_RATE,
};
use crate::error::{io_err, Error, ManifestIssues, Result};
use crate::state::{load_checkpoint, save_checkpoint, StateDict};

/// Allowed mismatch between summed durations and audio frames.
pub const ALIGNMENT_SLACK_FRAMES: usize = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub audio_path: PathBuf,
    pub phonemes: Vec<String>,
    pub durations_frames: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pitch_path: Option<PathBuf>,
}

/// Codec frames covering `samples` audio samples.
pub fn frames_for_samples(samples: usize) -> usize {
    samples.div_ceil(SAMPLES_PER_FRAME)
}

/// Reads and validates a manifest. Relative audio paths are resolved against
/// the manifest directory. All problems are collected before failing.
pub fn load_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut entries = Vec::new();
    let mut issues = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let mut entry: ManifestEntry = match serde_json::from_str(line) {
            Ok(e) => e,
            Err(e) => {
                issues.push((line_no, format!("malformed record: {e}")));
                continue;
            }
        };
        if entry.audio_path.is_relative() {
            entry.audio_path = base.join(&entry.audio_path);
        }
        match validate_entry(&entry) {
            Ok(()) => entries.push(entry),
            Err(msg) => issues.push((line_no, msg)),
        }
    }
    if issues.is_empty() {
        Ok(entries)
    } else {
        Err(Error::Manifest { path: path.to_path_buf(), issues: ManifestIssues(issues) })
    }
}

fn validate_entry(e: &ManifestEntry) -> std::result::Result<(), String> {
    if e.phonemes.is_empty() {
        return Err("field `phonemes` is empty".into());
    }
    if e.durations_frames.len() != e.phonemes.len() {
        return Err(format!(
            "field `durations_frames` has {} values for {} phonemes",
            e.durations_frames.len(),
            e.phonemes.len()
        ));
    }
    let reader = hound::WavReader::open(&e.audio_path)
        .map_err(|err| format!("field `audio_path`: {}: {err}", e.audio_path.display()))?;
    let spec = reader.spec();
    if spec.sample_rate != CODEC_RATE {
        return Err(format!("field `audio_path`: sample rate {} Hz, expected {CODEC_RATE}", spec.sample_rate));
    }
    let frames = frames_for_samples(reader.duration() as usize);
    let total: usize = e.durations_frames.iter().sum();
    if total.abs_diff(frames) > ALIGNMENT_SLACK_FRAMES {
        return Err(format!("field `durations_frames` sums to {total} but the audio has {frames} frames"));
    }
    Ok(())
}

/// Writes entries as JSON lines; paths are stored as given.
pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut text = String::new();
    for e in entries {
        text.push_str(&serde_json::to_string(e)?);
        text.push('\n');
    }
    fs::write(path, text).map_err(io_err(path))
}

/// Absorbs the alignment slack into the final phone so durations sum to `frames`.
pub fn fit_durations(durations: &[usize], frames: usize) -> Result<Vec<usize>> {
    let total: usize = durations.iter().sum();
    if durations.is_empty() || total.abs_diff(frames) > ALIGNMENT_SLACK_FRAMES {
        return Err(Error::Alignment(format!("durations sum to {total} but the audio has {frames} frames")));
    }
    let mut out = durations.to_vec();
    let last = out.last_mut().expect("nonempty");
    if total > frames {
        if *last == 0 {
            return Err(Error::Alignment("cannot trim a zero-length final phone".into()));
        }
        *last -= 1;
    } else {
        *last += frames - total;
    }
    Ok(out)
}

/// Phoneme symbol table; ids follow the file's line order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    symbols: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn new(symbols: Vec<String>) -> Result<Self> {
        let mut index = HashMap::new();
        for (i, s) in symbols.iter().enumerate() {
            if index.insert(s.clone(), i).is_some() {
                return Err(Error::Invalid(format!("duplicate phoneme symbol {s:?}")));
            }
        }
        Ok(Self { symbols, index })
    }

    /// Sorted set of all symbols used in `entries`.
    pub fn from_entries(entries: &[ManifestEntry]) -> Self {
        let mut symbols: Vec<String> = entries.iter().flat_map(|e| e.phonemes.iter().cloned()).collect();
        symbols.sort();
        symbols.dedup();
        Self::new(symbols).expect("deduplicated")
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    pub fn encode<S: AsRef<str>>(&self, phonemes: &[S]) -> Result<Vec<usize>> {
        phonemes
            .iter()
            .map(|p| self.index.get(p.as_ref()).copied().ok_or_else(|| Error::UnknownPhoneme(p.as_ref().to_string())))
            .collect()
    }

    /// One symbol per line.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Self::new(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.symbols.join("\n");
        text.push('\n');
        fs::write(path, text).map_err(io_err(path))
    }
}

/// Per-utterance training inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub phonemes: Vec<usize>,
    /// Sums to `frames_for_samples(wave.len())`.
    pub durations: Vec<usize>,
    pub wave: Waveform,
    /// `[frames, n_mels]` log mel at the codec frame rate.
    pub mel: Tensor,
    /// Per-phone pitch in model units.
    pub pitch: Vec<f64>,
}

impl Utterance {
    pub fn frames(&self) -> usize {
        self.durations.iter().sum()
    }
}

/// Log mel and per-phone pitch from 16 kHz features, trimmed or zero-padded to `frames`.
pub fn extract_features(wave: &Waveform, durations: &[usize], frames: usize, cfg: &SpectrogramConfig) -> Result<(Tensor, Vec<f64>)> {
    let low = resample(wave, FEATURE_RATE)?;
    let mel = mel_spectrogram(&low, cfg)?;
    let n_mels = cfg.n_mels;
    let have = mel.dim(0);
    let mel = Tensor::from_fn(&[frames, n_mels], |i| if i / n_mels < have { mel.data()[i] } else { 0.0 });
    let mut track = extract_pitch(&low, cfg.hop_length_samples)?;
    track.f0_hz.resize(frames.max(track.f0_hz.len()), 0.0);
    let durs: Vec<i64> = durations.iter().map(|&d| d as i64).collect();
    let pitch = phone_average_pitch(&track, &durs)?.into_iter().map(pitch_to_model).collect();
    Ok((mel, pitch))
}

/// Feature extraction memoized on disk by content digest.
#[derive(Clone, Debug)]
pub struct FeatureCache {
    pub dir: PathBuf,
    pub cfg: SpectrogramConfig,
}

impl FeatureCache {
    pub fn new(dir: impl Into<PathBuf>, cfg: SpectrogramConfig) -> Self {
        Self { dir: dir.into(), cfg }
    }

    pub fn key(&self, wave: &Waveform, durations: &[usize]) -> String {
        let mut h = Sha256::new();
        h.update(wave.sample_rate_hz.to_le_bytes());
        for s in &wave.samples {
            h.update(s.to_le_bytes());
        }
        for d in durations {
            h.update((*d as u64).to_le_bytes());
        }
        h.update(serde_json::to_vec(&self.cfg).expect("serializable"));
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn path_for(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.vqck"))
    }

    /// Cached features, computing and storing them on a miss.
    pub fn features(&self, wave: &Waveform, durations: &[usize]) -> Result<(Tensor, Vec<f64>)> {
        let frames: usize = durations.iter().sum();
        let path = self.path_for(&self.key(wave, durations));
        if path.exists() {
            let (_, dict) = load_checkpoint(&path)?;
            let mel = dict.take("mel", &[frames, self.cfg.n_mels])?;
            let pitch = dict.take("pitch", &[durations.len()])?;
            return Ok((mel, pitch.data().to_vec()));
        }
        let (mel, pitch) = extract_features(wave, durations, frames, &self.cfg)?;
        fs::create_dir_all(&self.dir).map_err(io_err(&self.dir))?;
        let mut dict = StateDict::new();
        dict.insert("mel", mel.clone());
        dict.insert("pitch", Tensor::new(&[pitch.len()], pitch.clone()));
        save_checkpoint(&path, &serde_json::json!({ "kind": "features" }), &dict)?;
        Ok((mel, pitch))
    }
}

/// Loads audio and features for every manifest entry.
pub fn load_utterances(entries: &[ManifestEntry], vocab: &Vocab, cache: &FeatureCache) -> Result<Vec<Utterance>> {
    entries
        .iter()
        .map(|e| {
            let wave = read_wav(&e.audio_path)?;
            wave.expect_rate(CODEC_RATE)?;
            let durations = fit_durations(&e.durations_frames, frames_for_samples(wave.len()))?;
            let (mel, pitch) = cache.features(&wave, &durations)?;
            Ok(Utterance { phonemes: vocab.encode(&e.phonemes)?, durations, wave, mel, pitch })
        })
        .collect()
}

/// Boolean validity mask, one row per item.
pub fn length_masks(lengths: &[usize], max: usize) -> Vec<Vec<bool>> {
    lengths.iter().map(|&l| (0..max).map(|i| i < l).collect()).collect()
}

/// Padded batch for the joint phase.
#[derive(Clone, Debug)]
pub struct JointBatch {
    pub am: AcousticBatch,
    /// Waveforms zero-padded to `frames × 300` samples.
    pub waves: Vec<Waveform>,
}

impl JointBatch {
    pub fn phone_mask(&self) -> Vec<Vec<bool>> {
        length_masks(&self.am.phone_lens, self.am.max_phones())
    }

    pub fn frame_mask(&self) -> Vec<Vec<bool>> {
        length_masks(&self.am.frame_lens, self.am.max_frames())
    }
}

/// Pads phoneme and frame axes to the batch maxima.
pub fn make_batch(items: &[&Utterance]) -> Result<JointBatch> {
    if items.is_empty() {
        return Err(Error::Empty("batch selection"));
    }
    let bs = items.len();
    let n = items.iter().map(|u| u.phonemes.len()).max().expect("nonempty");
    let f = items.iter().map(|u| u.frames()).max().expect("nonempty");
    let n_mels = items[0].mel.dim(1);
    let mut phonemes = vec![0; bs * n];
    let mut pitch = Tensor::zeros(&[bs, n]);
    let mut mel = Tensor::zeros(&[bs, f, n_mels]);
    let mut waves = Vec::with_capacity(bs);
    for (b, u) in items.iter().enumerate() {
        let (frames, len) = (u.frames(), u.phonemes.len());
        if u.durations.len() != len || u.mel.shape() != [frames, n_mels] || u.pitch.len() != len {
            return Err(Error::Alignment(format!("item {b} has inconsistent phone or frame counts")));
        }
        phonemes[b * n..b * n + len].copy_from_slice(&u.phonemes);
        pitch.data_mut()[b * n..b * n + len].copy_from_slice(&u.pitch);
        mel.data_mut()[b * f * n_mels..(b * f + frames) * n_mels].copy_from_slice(u.mel.data());
        let mut s = u.wave.samples.clone();
        s.resize(frames * SAMPLES_PER_FRAME, 0.0);
        waves.push(Waveform::new(s, u.wave.sample_rate_hz)?);
    }
    Ok(JointBatch {
        am: AcousticBatch {
            phonemes,
            phone_lens: items.iter().map(|u| u.phonemes.len()).collect(),
            durations: items.iter().map(|u| u.durations.clone()).collect(),
            frame_lens: items.iter().map(|u| u.frames()).collect(),
            mel,
            pitch,
        },
        waves,
    })
}

/// Synthetic phone inventory: voiced phones carry their own f0 and formant, two are noise.
pub const SYNTH_PHONEMES: [&str; 12] = ["a", "e", "i", "o", "u", "m", "n", "l", "r", "w", "s", "f"];

/// `(f0, first formant)` in Hz of a voiced phone.
fn phone_voice(id: usize) -> Option<(f64, f64)> {
    (id < 10).then(|| (110.0 + 12.0 * id as f64, 350.0 + 90.0 * id as f64))
}

/// Level of the breath noise added under every phone.
const SYNTH_NOISE: f64 = 0.004;

/// Harmonic "speech" for a phone sequence with per-phone frame durations.
/// Voiced phones are harmonic series up to 10 kHz with a formant bump and a
/// spectral tilt; noise phones are white. Phase runs continuously across
/// phones and amplitudes ramp at boundaries.
pub fn synth_waveform(phones: &[usize], durations: &[usize], seed: u64) -> Result<Waveform> {
    if phones.len() != durations.len() {
        return Err(Error::Alignment(format!("{} phones but {} durations", phones.len(), durations.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fs = f64::from(CODEC_RATE);
    let tau = 2.0 * std::f64::consts::PI;
    let mut out = Vec::with_capacity(durations.iter().sum::<usize>() * SAMPLES_PER_FRAME);
    let mut phase = 0.0f64;
    for (&ph, &d) in phones.iter().zip(durations) {
        let n = d * SAMPLES_PER_FRAME;
        let ramp = (n / 8).max(1);
        let amps: Vec<f64> = match phone_voice(ph) {
            Some((f0, formant)) => (1..=(10_000.0 / f0) as usize)
                .map(|h| {
                    let f = h as f64 * f0;
                    0.05 * (-f / 2500.0).exp() * (1.0 + 2.0 * (-((f - formant) / 250.0).powi(2)).exp())
                })
                .collect(),
            None => Vec::new(),
        };
        for i in 0..n {
            let env = (i.min(n - 1 - i) as f64 / ramp as f64).min(1.0) * 0.6 + 0.4;
            let noise = (rng.random::<f64>() - 0.5) * 2.0 * SYNTH_NOISE;
            let v = match phone_voice(ph) {
                Some((f0, _)) => {
                    let vib = 1.0 + 0.01 * (tau * 5.0 * out.len() as f64 / fs).sin();
                    phase = (phase + tau * f0 * vib / fs) % (tau * 1e6);
                    amps.iter().enumerate().map(|(h, a)| a * ((h + 1) as f64 * phase).sin()).sum::<f64>() + noise
                }
                None => noise * 20.0,
            };
            out.push(v * env);
        }
    }
    Waveform::new(out, CODEC_RATE)
}

/// Writes `count` synthetic utterances, `manifest.jsonl` and `vocab.txt` under `dir`;
/// returns the manifest path.
pub fn generate_synthetic_corpus(dir: &Path, count: usize, seed: u64) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::with_capacity(count);
    for u in 0..count {
        let len = rng.random_range(4..=9);
        let phones: Vec<usize> = (0..len).map(|_| rng.random_range(0..SYNTH_PHONEMES.len())).collect();
        let durations: Vec<usize> = (0..len).map(|_| rng.random_range(4..=14)).collect();
        let wave = synth_waveform(&phones, &durations, rng.random())?;
        let name = format!("utt{u:04}.wav");
        write_wav(&dir.join(&name), &wave)?;
        entries.push(ManifestEntry {
            audio_path: PathBuf::from(name),
            phonemes: phones.iter().map(|&p| SYNTH_PHONEMES[p].to_string()).collect(),
            durations_frames: durations,
            pitch_path: None,
        });
    }
    let manifest = dir.join("manifest.jsonl");
    write_manifest(&manifest, &entries)?;
    Vocab::new(SYNTH_PHONEMES.iter().map(|s| s.to_string()).collect())?.save(&dir.join("vocab.txt"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_manifest_is_empty_list() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        fs::write(&p, "").unwrap();
        assert!(load_manifest(&p).unwrap().is_empty());
    }

    #[test]
    fn manifest_round_trip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = generate_synthetic_corpus(dir.path(), 3, 7).unwrap();
        let entries = load_manifest(&manifest).unwrap();
        assert_eq!(entries.len(), 3);
        let copy = dir.path().join("copy.jsonl");
        write_manifest(&copy, &entries).unwrap();
        assert_eq!(load_manifest(&copy).unwrap(), entries);

        let mut bad = entries[1].clone();
        let frames: usize = bad.durations_frames.iter().sum();
        *bad.durations_frames.last_mut().unwrap() += 5;
        let lines = format!(
            "{}\n{}\n{{\"audio_path\": \"x.wav\"}}\n",
            serde_json::to_string(&entries[0]).unwrap(),
            serde_json::to_string(&bad).unwrap()
        );
        let broken = dir.path().join("broken.jsonl");
        fs::write(&broken, lines).unwrap();
        let msg = load_manifest(&broken).unwrap_err().to_string();
        assert!(msg.contains("line 2") && msg.contains(&format!("{}", frames + 5)) && msg.contains(&frames.to_string()), "{msg}");
        assert!(msg.contains("line 3") && msg.contains("phonemes"), "{msg}");
    }

    #[test]
    fn slack_is_absorbed_by_the_last_phone() {
        assert_eq!(fit_durations(&[3, 4], 8).unwrap(), vec![3, 5]);
        assert_eq!(fit_durations(&[3, 4], 6).unwrap(), vec![3, 3]);
        assert_eq!(fit_durations(&[3, 4], 7).unwrap(), vec![3, 4]);
        assert!(fit_durations(&[3, 4], 9).is_err());
    }

    #[test]
    fn vocab_errors_name_the_symbol() {
        let v = Vocab::new(vec!["a".into(), "b".into()]).unwrap();
        assert_eq!(v.encode(&["b", "a"]).unwrap(), vec![1, 0]);
        match v.encode(&["a", "zz"]) {
            Err(Error::UnknownPhoneme(s)) => assert_eq!(s, "zz"),
            other => panic!("{other:?}"),
        }
        assert!(Vocab::new(vec!["a".into(), "a".into()]).is_err());
    }

    fn utt(phones: usize, frames_each: usize, seed: u64) -> Utterance {
        let ph: Vec<usize> = (0..phones).map(|i| (i + seed as usize) % 12).collect();
        let durations = vec![frames_each; phones];
        let wave = synth_waveform(&ph, &durations, seed).unwrap();
        let f = phones * frames_each;
        let (mel, pitch) = extract_features(&wave, &durations, f, &SpectrogramConfig::default()).unwrap();
        Utterance { phonemes: ph, durations, wave, mel, pitch }
    }

    #[test]
    fn batch_padding_and_masks() {
        let (a, b) = (utt(3, 4, 1), utt(5, 4, 2));
        let one = make_batch(&[&a]).unwrap();
        assert!(one.phone_mask().iter().flatten().all(|&m| m));
        assert!(one.frame_mask().iter().flatten().all(|&m| m));
        let two = make_batch(&[&a, &b]).unwrap();
        assert_eq!(two.phone_mask(), vec![vec![true, true, true, false, false], vec![true; 5]]);
        assert_eq!(two.am.mel.shape(), &[2, 20, 80]);
        assert_eq!(two.waves[0].len(), 12 * 300);
        assert!(make_batch(&[]).is_err());
    }

    #[test]
    fn synthetic_pitch_follows_phone() {
        let u = utt(4, 10, 0);
        for (&ph, &p) in u.phonemes.iter().zip(&u.pitch) {
            let (f0, _) = phone_voice(ph).unwrap();
            let got = crate::acoustic::pitch_from_model(p);
            assert!((got - f0).abs() / f0 < 0.05, "phone {ph}: {got} vs {f0}");
        }
    }

    #[test]
    fn cache_hits_are_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let cache = FeatureCache::new(dir.path(), SpectrogramConfig::default());
        let u = utt(3, 5, 4);
        let first = cache.features(&u.wave, &u.durations).unwrap();
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
        let second = cache.features(&u.wave, &u.durations).unwrap();
        assert_eq!(first, second);
        assert_eq!(first.0, u.mel);
    }
}
