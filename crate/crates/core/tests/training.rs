mod common;

use common::{fast_config, joint_config, pretrained_codec, utterance};
use vqspeech_core::data::{make_batch, synth_waveform};
use vqspeech_core::losses::LossReport;
use vqspeech_core::training::Trainer;
use vqspeech_core::Error;

fn codec_run(trainer: &mut Trainer, steps: usize) -> Vec<LossReport> {
    let clip = synth_waveform(&[1, 4, 11, 2], &[5, 4, 6, 5], 3).unwrap();
    (0..steps)
        .map(|_| {
            let batch = trainer.crop_segments(&[clip.clone()]).unwrap();
            trainer.train_codec_step(&batch).unwrap()
        })
        .collect()
}

#[test]
fn fixed_seed_reproduces_ten_codec_steps() {
    let cfg = fast_config();
    let a = codec_run(&mut Trainer::new(cfg.clone()).unwrap(), 10);
    let b = codec_run(&mut Trainer::new(cfg.clone()).unwrap(), 10);
    let lines = |r: &[LossReport]| r.iter().map(LossReport::to_json_line).collect::<Vec<_>>();
    assert_eq!(lines(&a), lines(&b));
    let mut other = cfg;
    other.training.seed = 1;
    assert_ne!(lines(&a), lines(&codec_run(&mut Trainer::new(other).unwrap(), 10)));
}

#[test]
fn every_report_satisfies_the_identities() {
    let cfg = fast_config();
    for r in codec_run(&mut Trainer::new(cfg.clone()).unwrap(), 4) {
        assert!(r.identities_hold(cfg.training.weights));
        assert_eq!(r.l_joint.to_bits(), (cfg.training.weights.w_g * r.l_g).to_bits());
    }
}

#[test]
fn skips_switch_off_exactly_once_at_warmup() {
    let mut cfg = fast_config();
    cfg.training.warmup_steps_with_skips = 3;
    let mut t = Trainer::new(cfg).unwrap();
    let mut seen = Vec::new();
    for _ in 0..6 {
        codec_run(&mut t, 1);
        seen.push((t.step, t.codec.skips_enabled(), t.skip_toggles));
    }
    // The switch happens at the start of the step whose index equals the warm-up length.
    assert_eq!(
        seen,
        vec![(1, true, 0), (2, true, 0), (3, true, 0), (4, false, 1), (5, false, 1), (6, false, 1)]
    );
}

#[test]
fn codec_checkpoint_resume_is_bit_exact() {
    let mut cfg = fast_config();
    cfg.training.warmup_steps_with_skips = 3;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.vqck");
    let mut a = Trainer::new(cfg.clone()).unwrap();
    codec_run(&mut a, 2);
    a.save(&path).unwrap();
    let next_a = codec_run(&mut a, 2);
    let mut b = Trainer::load(&path, cfg).unwrap();
    assert_eq!(b.step, 2);
    let next_b = codec_run(&mut b, 2);
    assert_eq!(next_a, next_b);
    assert!(a.codec.params.iter().eq(b.codec.params.iter()));
    assert_eq!(a.quantizer, b.quantizer);
    assert_eq!(a.codec_ema.shadow, b.codec_ema.shadow);
    let c = Trainer::from_checkpoint(&path).unwrap();
    assert_eq!((c.step, c.cfg.training.seed), (2, 0));
}

#[test]
fn joint_phase_freezes_encoder_and_quantizer() {
    let cfg = fast_config();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("codec.vqck");
    let codec = pretrained_codec(&cfg, 3, &path);
    let mut t = Trainer::load(&path, joint_config(&cfg)).unwrap();
    assert_eq!(t.step, 0);
    assert!(!t.codec.skips_enabled());
    let u = utterance(&cfg, &[0, 3, 10, 5, 2], &[3, 4, 2, 5, 4], 1);
    let batch = make_batch(&[&u]).unwrap();
    for _ in 0..3 {
        let r = t.train_joint_step(&batch).unwrap();
        assert!(r.identities_hold(cfg.training.weights));
        assert!(r.l_feat > 0.0 && r.l_vq == 0.0);
    }
    let mut decoder_moved = false;
    let after = t.codec.params.iter().map(|(_, v)| v);
    for (((name, before), now), grad) in codec.codec.params.iter().zip(after).zip(&t.last_codec_grads) {
        let delta = before.data().iter().zip(now.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        if name.starts_with("encoder.") {
            assert_eq!(delta, 0.0, "{name} moved");
            assert!(grad.data().iter().all(|&g| g == 0.0), "{name} received gradient");
        } else {
            decoder_moved |= delta > 0.0;
        }
    }
    assert!(decoder_moved);
    assert_eq!(codec.quantizer.codebooks, t.quantizer.codebooks);
}

#[test]
fn joint_checkpoint_resume_is_bit_exact() {
    let cfg = fast_config();
    let dir = tempfile::tempdir().unwrap();
    let codec_path = dir.path().join("codec.vqck");
    pretrained_codec(&cfg, 2, &codec_path);
    let jcfg = joint_config(&cfg);
    let u = utterance(&cfg, &[1, 2, 3], &[4, 3, 5], 2);
    let v = utterance(&cfg, &[6, 0, 11, 4], &[3, 3, 4, 4], 3);
    let batch = make_batch(&[&u, &v]).unwrap();
    let mut a = Trainer::load(&codec_path, jcfg.clone()).unwrap();
    a.train_joint_step(&batch).unwrap();
    let path = dir.path().join("joint.vqck");
    a.save(&path).unwrap();
    let ra = a.train_joint_step(&batch).unwrap();
    let mut b = Trainer::load(&path, jcfg).unwrap();
    assert_eq!(b.step, 1);
    assert_eq!(ra, b.train_joint_step(&batch).unwrap());
    assert!(a.am.params.iter().eq(b.am.params.iter()));
}

#[test]
fn joint_step_rejects_misaligned_batches_and_untrained_codecs() {
    let cfg = fast_config();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("codec.vqck");
    pretrained_codec(&cfg, 1, &path);
    let mut t = Trainer::load(&path, joint_config(&cfg)).unwrap();
    let u = utterance(&cfg, &[1, 2], &[4, 4], 0);
    let mut batch = make_batch(&[&u]).unwrap();
    batch.waves[0].samples.truncate(5 * 300);
    assert!(matches!(t.train_joint_step(&batch), Err(Error::Alignment(_))));
    let mut fresh = Trainer::new(joint_config(&cfg)).unwrap();
    assert!(matches!(fresh.train_joint_step(&make_batch(&[&u]).unwrap()), Err(Error::Config(_))));
    let mut codec_phase = Trainer::new(cfg).unwrap();
    assert!(codec_phase.train_joint_step(&make_batch(&[&u]).unwrap()).is_err());
}
