use std::path::Path;
use std::process::{Command, Output};

fn vqspeech(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vqspeech"))
        .current_dir(dir)
        .env_remove("VQSPEECH_SEED")
        .args(args)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn effective(dir: &Path, out: &str) -> toml::Table {
    std::fs::read_to_string(dir.join(out).join("effective_config.toml")).unwrap().parse().unwrap()
}

fn seed_and_lr(t: &toml::Table) -> (i64, f64) {
    let tr = t["training"].as_table().unwrap();
    (tr["seed"].as_integer().unwrap(), tr["lr"].as_float().unwrap())
}

#[test]
fn missing_config_exits_2_naming_path() {
    let dir = tempfile::tempdir().unwrap();
    let o = vqspeech(dir.path(), &["--config", "absent.toml", "train", "--max-steps", "1"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("absent.toml"), "{}", stderr(&o));
}

#[test]
fn bad_override_exits_2_naming_field() {
    let dir = tempfile::tempdir().unwrap();
    let o = vqspeech(dir.path(), &["--set", "training.segment_samples=1000", "train"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("segment_samples"), "{}", stderr(&o));
}

#[test]
fn joint_without_init_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = vqspeech(dir.path(), &["--preset", "tiny", "--out-dir", "j", "train", "--phase", "joint", "--max-steps", "1"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn flag_beats_env_beats_file_beats_preset() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("c.toml"), "[training]\nseed = 11\nlr = 0.003\nmax_steps = 0\n").unwrap();
    let run = |out: &str, env: Option<&str>, extra: &[&str]| {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_vqspeech"));
        cmd.current_dir(d).env_remove("VQSPEECH_SEED");
        if let Some(s) = env {
            cmd.env("VQSPEECH_SEED", s);
        }
        let o = cmd.args(["--preset", "tiny", "--out-dir", out]).args(extra).arg("train").output().unwrap();
        assert!(o.status.success(), "{}", stderr(&o));
        effective(d, out)
    };
    let preset = run("p", None, &["--set", "training.max_steps=0"]);
    assert_eq!(seed_and_lr(&preset), (0, 1e-3));
    assert_eq!(seed_and_lr(&run("f", None, &["--config", "c.toml"])), (11, 0.003));
    assert_eq!(seed_and_lr(&run("e", Some("12"), &["--config", "c.toml"])), (12, 0.003));
    let flagged = run("s", Some("12"), &["--config", "c.toml", "--seed", "13", "--set", "training.lr=0.004"]);
    assert_eq!(seed_and_lr(&flagged), (13, 0.004));
}

#[test]
fn tiny_training_logs_one_line_per_step_then_round_trips_and_synthesizes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let o = vqspeech(d, &["--preset", "tiny", "--out-dir", "codec", "train", "--max-steps", "5"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let log = std::fs::read_to_string(d.join("codec/losses.jsonl")).unwrap();
    let lines: Vec<serde_json::Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 5);
    for (i, l) in lines.iter().enumerate() {
        assert_eq!(l["step"], i);
        assert!(l["l_G"].as_f64().unwrap().is_finite());
    }

    let o = vqspeech(
        d,
        &["--preset", "tiny", "--out-dir", "joint", "train", "--phase", "joint", "--init", "codec/checkpoint.vqck", "--max-steps", "2"],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(std::fs::read_to_string(d.join("joint/losses.jsonl")).unwrap().lines().count(), 2);
    let ckpt = "joint/checkpoint.vqck";

    let wav = "codec/corpus/utt0000.wav";
    let in_len = hound::WavReader::open(d.join(wav)).unwrap().len() as usize;
    assert!(vqspeech(d, &["encode", "--checkpoint", ckpt, wav, "c.vq"]).status.success());
    assert!(vqspeech(d, &["decode", "--checkpoint", ckpt, "c.vq", "d.wav"]).status.success());
    let out_len = hound::WavReader::open(d.join("d.wav")).unwrap().len() as usize;
    assert_eq!(out_len, in_len.div_ceil(300) * 300);

    let vocab = std::fs::read_to_string(d.join("codec/corpus/vocab.txt")).unwrap();
    let phonemes: Vec<&str> = vocab.lines().take(3).collect();
    let phonemes = phonemes.join(" ");
    let synth = |out: &str| {
        let o = vqspeech(d, &["synthesize", "--checkpoint", ckpt, "--phonemes", &phonemes, out]);
        assert!(o.status.success(), "{}", stderr(&o));
        std::fs::read(d.join(out)).unwrap()
    };
    let a = synth("a.wav");
    assert_eq!(a, synth("b.wav"));
    let samples = hound::WavReader::open(d.join("a.wav")).unwrap().len() as usize;
    assert!(samples > 0 && samples % 300 == 0);

    let o = vqspeech(d, &["synthesize", "--checkpoint", ckpt, "--phonemes", "qq", "x.wav"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("qq"));
}

#[test]
fn decode_rejects_mismatched_stream() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert!(vqspeech(d, &["--preset", "tiny", "--out-dir", "a", "train", "--max-steps", "1"]).status.success());
    let o = vqspeech(
        d,
        &["--preset", "tiny", "--out-dir", "b", "--set", "quantizer.num_stages=2", "train", "--max-steps", "1"],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let wav = "a/corpus/utt0000.wav";
    assert!(vqspeech(d, &["encode", "--checkpoint", "a/checkpoint.vqck", wav, "c.vq"]).status.success());
    let o = vqspeech(d, &["decode", "--checkpoint", "b/checkpoint.vqck", "c.vq", "d.wav"]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.contains("stages=4") && err.contains("stages=2"), "{err}");
}
