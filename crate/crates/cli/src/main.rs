//! `vqspeech`: train, encode, decode, synthesize, sweep and measure real-time factor.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

use std::fs::{self, File, OpenOptions};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vqspeech_core::acoustic::AcousticModel;
use vqspeech_core::codec::{CodecNetwork, FrameRepresentation};
use vqspeech_core::config::{SystemConfig, SEED_ENV};
use vqspeech_core::data::{
    generate_synthetic_corpus, load_manifest, load_utterances, make_batch, FeatureCache, Utterance, Vocab,
};
use vqspeech_core::dsp::{read_wav, resample, write_wav, Waveform, CODEC_RATE};
use vqspeech_core::eval::{measure_rtf, run_sweep, synthesize, SweepAxis};
use vqspeech_core::quantizer::CodeStream;
use vqspeech_core::training::{Phase, Trainer};

/// Synthetic utterances generated when no manifest is configured.
const DEFAULT_CORPUS_SIZE: usize = 16;

#[derive(Parser, Debug)]
#[command(name = "vqspeech", version, about = "VQ-GAN speech codec and text-to-speech acoustic model")]
struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Built-in configuration the file and overrides apply to: desk or tiny.
    #[arg(long, global = true, default_value = "desk")]
    preset: String,
    /// Overrides training.seed (beats the VQSPEECH_SEED variable and the file).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Recorded in the run log; all computation is single-threaded and reproducible.
    #[arg(long, global = true)]
    deterministic: bool,
    #[arg(long, global = true, default_value = "runs/default")]
    out_dir: PathBuf,
    /// `key.path=value` override of any configuration field; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Use the raw trained weights instead of their moving average.
    #[arg(long, global = true)]
    raw_weights: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum PhaseArg {
    Codec,
    Joint,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum AxisArg {
    Bitrate,
    LatentDim,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run the configured training phase, writing losses.jsonl and checkpoint.vqck.
    Train {
        #[arg(long)]
        max_steps: Option<u64>,
        #[arg(long, value_enum)]
        phase: Option<PhaseArg>,
        /// Codec-phase checkpoint to start joint training from.
        #[arg(long)]
        init: Option<PathBuf>,
        /// Continue from a checkpoint of the same phase.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// WAV to code stream.
    Encode {
        #[arg(long)]
        checkpoint: PathBuf,
        input: PathBuf,
        output: PathBuf,
    },
    /// Code stream to 24 kHz WAV.
    Decode {
        #[arg(long)]
        checkpoint: PathBuf,
        input: PathBuf,
        output: PathBuf,
    },
    /// Phonemes to 24 kHz WAV.
    Synthesize {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Whitespace-separated phoneme symbols.
        #[arg(long, conflicts_with = "manifest")]
        phonemes: Option<String>,
        /// Take the phonemes of entry `--index` of this manifest.
        #[arg(long, requires = "index")]
        manifest: Option<PathBuf>,
        #[arg(long)]
        index: Option<usize>,
        output: PathBuf,
    },
    /// Train a codec per point and tabulate reconstruction distance.
    Sweep {
        #[arg(long, value_enum)]
        axis: AxisArg,
        /// Comma-separated stage counts (bitrate) or latent widths.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<usize>,
        #[arg(long, default_value_t = 2000)]
        steps: u64,
    },
    /// Time synthesis and report parameter counts.
    Rtf {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Phoneme sequences to time; random sequences when absent.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        count: usize,
    },
    /// Write a synthetic corpus (audio, manifest.jsonl, vocab.txt).
    Corpus {
        dir: PathBuf,
        #[arg(long, default_value_t = DEFAULT_CORPUS_SIZE)]
        count: usize,
    },
}

/// Marks errors that exit with status 2.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    anyhow!(UsageError(msg.into()))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", render(&e));
            let is_usage = e.chain().any(|c| {
                c.is::<UsageError>()
                    || matches!(
                        c.downcast_ref::<vqspeech_core::Error>(),
                        Some(
                            vqspeech_core::Error::Config(_)
                                | vqspeech_core::Error::Manifest { .. }
                                | vqspeech_core::Error::UnknownPhoneme(_)
                        )
                    )
            });
            ExitCode::from(if is_usage { 2 } else { 1 })
        }
    }
}

/// Joins the error chain, skipping causes the previous message already ends with.
fn render(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let msg = cause.to_string();
        if !out.ends_with(&msg) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&msg);
        }
    }
    out
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Train { max_steps, phase, init, resume } => {
            cmd_train(&cli, *max_steps, *phase, init.as_deref(), resume.as_deref())
        }
        Command::Encode { checkpoint, input, output } => cmd_encode(&cli, checkpoint, input, output),
        Command::Decode { checkpoint, input, output } => cmd_decode(&cli, checkpoint, input, output),
        Command::Synthesize { checkpoint, phonemes, manifest, index, output } => {
            cmd_synthesize(&cli, checkpoint, phonemes.as_deref(), manifest.as_deref(), *index, output)
        }
        Command::Sweep { axis, values, steps } => cmd_sweep(&cli, *axis, values, *steps),
        Command::Rtf { checkpoint, manifest, count } => cmd_rtf(&cli, checkpoint, manifest.as_deref(), *count),
        Command::Corpus { dir, count } => {
            let seed = resolve_config(&cli, &[])?.training.seed;
            let manifest = generate_synthetic_corpus(dir, *count, seed)?;
            println!("{}", manifest.display());
            Ok(())
        }
    }
}

/// Preset, file, seed variable, `--set`, then dedicated flags.
fn resolve_config(cli: &Cli, extra: &[String]) -> Result<SystemConfig> {
    let mut overrides = cli.overrides.clone();
    if let Some(seed) = cli.seed {
        overrides.push(format!("training.seed={seed}"));
    }
    overrides.extend_from_slice(extra);
    let env_seed = std::env::var(SEED_ENV).ok();
    SystemConfig::resolve(&cli.preset, cli.config.as_deref(), env_seed.as_deref(), &overrides)
        .map_err(|e| usage(format!("configuration: {e}")))
}

fn create_out_dir(cli: &Cli) -> Result<()> {
    fs::create_dir_all(&cli.out_dir).with_context(|| format!("creating {}", cli.out_dir.display()))
}

/// Manifest and vocabulary from the config, or a synthetic corpus under the output directory.
fn corpus(cli: &Cli, cfg: &SystemConfig) -> Result<(PathBuf, Vocab)> {
    let manifest = match &cfg.data.manifest {
        Some(m) => m.clone(),
        None => {
            let dir = cli.out_dir.join("corpus");
            let m = dir.join("manifest.jsonl");
            if m.exists() {
                m
            } else {
                generate_synthetic_corpus(&dir, DEFAULT_CORPUS_SIZE, cfg.training.seed)?
            }
        }
    };
    let vocab_path = cfg.data.vocab.clone().unwrap_or_else(|| manifest.with_file_name("vocab.txt"));
    let vocab = if vocab_path.exists() {
        Vocab::load(&vocab_path)?
    } else {
        Vocab::from_entries(&load_manifest(&manifest)?)
    };
    if vocab.len() > cfg.acoustic.vocab_size {
        return Err(usage(format!(
            "acoustic.vocab_size ({}) is smaller than the vocabulary ({} symbols)",
            cfg.acoustic.vocab_size,
            vocab.len()
        )));
    }
    Ok((manifest, vocab))
}

fn cmd_train(
    cli: &Cli,
    max_steps: Option<u64>,
    phase: Option<PhaseArg>,
    init: Option<&Path>,
    resume: Option<&Path>,
) -> Result<()> {
    let mut extra = Vec::new();
    if let Some(n) = max_steps {
        extra.push(format!("training.max_steps={n}"));
    }
    if let Some(p) = phase {
        extra.push(format!("training.phase={}", if p == PhaseArg::Codec { "codec" } else { "joint" }));
    }
    let cfg = resolve_config(cli, &extra)?;
    create_out_dir(cli)?;
    fs::write(cli.out_dir.join("effective_config.toml"), cfg.to_toml_string())?;
    eprintln!(
        "phase {:?}, seed {}, deterministic {}, max_steps {}",
        cfg.training.phase, cfg.training.seed, cli.deterministic, cfg.training.max_steps
    );
    let (manifest, vocab) = corpus(cli, &cfg)?;
    let entries = load_manifest(&manifest)?;
    if entries.is_empty() {
        return Err(usage(format!("manifest {} has no entries", manifest.display())));
    }
    let mut trainer = match (resume, init, cfg.training.phase) {
        (Some(path), _, _) => Trainer::load(path, cfg.clone())?,
        (None, Some(path), Phase::Joint) => Trainer::load(path, cfg.clone())?,
        (None, None, Phase::Joint) => return Err(usage("joint training needs --init <codec checkpoint> or --resume")),
        (None, _, Phase::Codec) => Trainer::new(cfg.clone())?,
    };
    trainer.vocab = vocab.symbols().to_vec();
    let log_path = cli.out_dir.join("losses.jsonl");
    let mut log = OpenOptions::new()
        .create(true)
        .write(true)
        .append(resume.is_some())
        .truncate(resume.is_none())
        .open(&log_path)
        .with_context(|| format!("opening {}", log_path.display()))?;
    let ckpt = cli.out_dir.join("checkpoint.vqck");
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.training.seed ^ 0x5eed_da7a);
    let bs = cfg.training.batch_size;
    match cfg.training.phase {
        Phase::Codec => {
            let waves: Vec<Waveform> = entries.iter().map(|e| read_wav(&e.audio_path)).collect::<Result<_, _>>()?;
            while trainer.step < cfg.training.max_steps {
                let picks: Vec<Waveform> = (0..bs).map(|_| waves[rng.random_range(0..waves.len())].clone()).collect();
                let batch = trainer.crop_segments(&picks)?;
                let report = trainer.train_codec_step(&batch)?;
                writeln!(log, "{}", report.to_json_line())?;
                checkpoint_if_due(&trainer, &ckpt, cfg.training.checkpoint_every)?;
            }
        }
        Phase::Joint => {
            let cache_dir = cfg.data.cache_dir.clone().unwrap_or_else(|| cli.out_dir.join("features"));
            let utts = load_utterances(&entries, &vocab, &FeatureCache::new(cache_dir, cfg.features.clone()))?;
            while trainer.step < cfg.training.max_steps {
                let picks: Vec<&Utterance> = (0..bs).map(|_| &utts[rng.random_range(0..utts.len())]).collect();
                let report = trainer.train_joint_step(&make_batch(&picks)?)?;
                writeln!(log, "{}", report.to_json_line())?;
                checkpoint_if_due(&trainer, &ckpt, cfg.training.checkpoint_every)?;
            }
        }
    }
    trainer.save(&ckpt)?;
    eprintln!("wrote {} after step {}", ckpt.display(), trainer.step);
    Ok(())
}

fn checkpoint_if_due(trainer: &Trainer, path: &Path, every: u64) -> Result<()> {
    if every > 0 && trainer.step % every == 0 {
        trainer.save(path)?;
    }
    Ok(())
}

/// Evaluation models from a checkpoint: averaged weights unless `--raw-weights`.
fn load_models(cli: &Cli, checkpoint: &Path) -> Result<(Trainer, CodecNetwork, AcousticModel)> {
    let trainer = Trainer::from_checkpoint(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let (codec, am) = if cli.raw_weights {
        let mut codec = trainer.codec.clone();
        codec.toggle_skips(false);
        (codec, trainer.am.clone())
    } else {
        trainer.ema_models()
    };
    Ok((trainer, codec, am))
}

fn cmd_encode(cli: &Cli, checkpoint: &Path, input: &Path, output: &Path) -> Result<()> {
    let (trainer, codec, _) = load_models(cli, checkpoint)?;
    let mut wave = read_wav(input)?;
    if wave.sample_rate_hz != CODEC_RATE {
        wave = resample(&wave, CODEC_RATE)?;
    }
    let repr = codec.encode(&wave)?;
    let q = trainer.quantizer.quantize(&repr.values)?;
    let qc = &trainer.quantizer.cfg;
    let stream = CodeStream {
        num_stages: qc.num_stages,
        codebook_size: qc.codebook_size,
        dim: qc.dim,
        frame_rate_hz: qc.frame_rate_hz,
        num_samples: wave.len() as u64,
        indices: q.indices.iter().map(|&i| i as u32).collect(),
    };
    let mut w = BufWriter::new(File::create(output).with_context(|| format!("creating {}", output.display()))?);
    stream.write_to(&mut w)?;
    w.flush()?;
    eprintln!("{} frames x {} stages -> {}", stream.frames(), stream.num_stages, output.display());
    Ok(())
}

fn cmd_decode(cli: &Cli, checkpoint: &Path, input: &Path, output: &Path) -> Result<()> {
    let (trainer, codec, _) = load_models(cli, checkpoint)?;
    let file = File::open(input).with_context(|| format!("opening {}", input.display()))?;
    let stream = CodeStream::read_from(BufReader::new(file))?;
    let qc = &trainer.quantizer.cfg;
    if (stream.num_stages, stream.codebook_size, stream.dim) != (qc.num_stages, qc.codebook_size, qc.dim) {
        bail!(
            "code stream has stages={} codebook_size={} dim={}, checkpoint quantizer has stages={} codebook_size={} dim={}",
            stream.num_stages,
            stream.codebook_size,
            stream.dim,
            qc.num_stages,
            qc.codebook_size,
            qc.dim
        );
    }
    let frames = stream.frames();
    let indices: Vec<usize> = stream.indices.iter().map(|&i| i as usize).collect();
    let values = trainer.quantizer.dequantize(&indices, frames)?;
    let wave = codec.decode(&FrameRepresentation { values, num_samples: stream.num_samples as usize }, None)?;
    write_wav(output, &wave)?;
    eprintln!("{} samples -> {}", wave.len(), output.display());
    Ok(())
}

fn checkpoint_vocab(trainer: &Trainer) -> Result<Vocab> {
    if trainer.vocab.is_empty() {
        bail!("checkpoint carries no phoneme vocabulary; train the joint phase first");
    }
    Ok(Vocab::new(trainer.vocab.clone())?)
}

fn cmd_synthesize(
    cli: &Cli,
    checkpoint: &Path,
    phonemes: Option<&str>,
    manifest: Option<&Path>,
    index: Option<usize>,
    output: &Path,
) -> Result<()> {
    let (trainer, codec, am) = load_models(cli, checkpoint)?;
    let vocab = checkpoint_vocab(&trainer)?;
    let symbols: Vec<String> = match (phonemes, manifest, index) {
        (Some(p), _, _) => p.split_whitespace().map(String::from).collect(),
        (None, Some(m), Some(i)) => {
            let entries = load_manifest(m)?;
            entries.get(i).ok_or_else(|| usage(format!("manifest has {} entries, no index {i}", entries.len())))?.phonemes.clone()
        }
        _ => return Err(usage("give --phonemes or --manifest with --index")),
    };
    let ids = vocab.encode(&symbols)?;
    let (wave, durations) = synthesize(&am, &codec, &ids)?;
    write_wav(output, &wave)?;
    eprintln!("durations {durations:?}: {} samples -> {}", wave.len(), output.display());
    Ok(())
}

fn cmd_sweep(cli: &Cli, axis: AxisArg, values: &[usize], steps: u64) -> Result<()> {
    let cfg = resolve_config(cli, &[])?;
    let axis = match axis {
        AxisArg::Bitrate => SweepAxis::Bitrate,
        AxisArg::LatentDim => SweepAxis::LatentDim,
    };
    for &v in values {
        vqspeech_core::eval::sweep_point_config(&cfg, axis, v)
            .validate()
            .map_err(|e| usage(format!("sweep value {v}: {e}")))?;
    }
    create_out_dir(cli)?;
    let (manifest, _) = corpus(cli, &cfg)?;
    let waves: Vec<Waveform> =
        load_manifest(&manifest)?.iter().map(|e| read_wav(&e.audio_path)).collect::<Result<_, _>>()?;
    let eval: Vec<Waveform> = waves.iter().take(4).cloned().collect();
    let result = run_sweep(&cfg, axis, values, steps, &waves, &eval)?;
    fs::write(cli.out_dir.join("sweep.json"), serde_json::to_string_pretty(&result)?)?;
    print!("{}", result.table());
    Ok(())
}

fn cmd_rtf(cli: &Cli, checkpoint: &Path, manifest: Option<&Path>, count: usize) -> Result<()> {
    let (trainer, codec, am) = load_models(cli, checkpoint)?;
    let inputs: Vec<Vec<usize>> = match manifest {
        Some(m) => {
            let vocab = checkpoint_vocab(&trainer)?;
            load_manifest(m)?.iter().map(|e| vocab.encode(&e.phonemes)).collect::<Result<_, _>>()?
        }
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(trainer.cfg.training.seed);
            let v = trainer.vocab.len().max(1).min(trainer.cfg.acoustic.vocab_size);
            (0..count.max(1)).map(|_| (0..8).map(|_| rng.random_range(0..v)).collect()).collect()
        }
    };
    let report = measure_rtf(&trainer.cfg, &am, &codec, &inputs)?;
    create_out_dir(cli)?;
    let json = serde_json::to_string_pretty(&report)?;
    fs::write(cli.out_dir.join("rtf.json"), &json)?;
    println!("{json}");
    Ok(())
}
