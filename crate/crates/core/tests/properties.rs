mod common;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vqspeech_autograd::{Tape, Tensor};
use vqspeech_core::acoustic::{scheduled_sample, AcousticBatch, AcousticModel, SampleChoice, VarianceBundle};
use vqspeech_core::codec::{CodecNetwork, FrameRepresentation};
use vqspeech_core::config::SystemConfig;
use vqspeech_core::dsp::{haar_dwt, haar_idwt, multi_res_spectral_distance, ssim, Waveform};
use vqspeech_core::eval::synthesize;
use vqspeech_core::losses::{acoustic_model_loss, masked_mean_l1, ssim_loss};
use vqspeech_core::quantizer::{msvq_quantize, nearest_code, CodeStream};
use vqspeech_core::training::random_segment;

fn values(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-2.0f64..2.0, len)
}

/// `[B, max, d]` with item `b` in its first `lens[b]` rows and garbage padding.
fn pad(items: &[Vec<f64>], lens: &[usize], d: usize) -> Tensor {
    let max = *lens.iter().max().unwrap();
    let mut out = Tensor::from_fn(&[items.len(), max, d], |i| 1e3 + i as f64);
    for (b, item) in items.iter().enumerate() {
        out.data_mut()[b * max * d..b * max * d + item.len()].copy_from_slice(item);
    }
    out
}

fn scalar(f: impl for<'t> Fn(&'t Tape) -> vqspeech_autograd::Var<'t>) -> f64 {
    let tape = Tape::new();
    f(&tape).item()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn padded_masked_losses_equal_mean_of_items(
        lens in prop::collection::vec(1usize..7, 1..4),
        d in 1usize..4,
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        use rand::Rng;
        let mut draw = |n: usize| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
        let preds: Vec<Vec<f64>> = lens.iter().map(|&l| draw(l * d)).collect();
        let targets: Vec<Vec<f64>> = lens.iter().map(|&l| draw(l * d)).collect();
        let (p, t) = (pad(&preds, &lens, d), pad(&targets, &lens, d));
        let batched_l1 = scalar(|tape| masked_mean_l1(tape.constant(p.clone()), tape.constant(t.clone()), &lens));
        let batched_ssim = scalar(|tape| ssim_loss(tape.constant(p.clone()), tape.constant(t.clone()), &lens));
        let (mut l1, mut ss) = (0.0, 0.0);
        for (b, &l) in lens.iter().enumerate() {
            let pi = Tensor::new(&[1, l, d], preds[b].clone());
            let ti = Tensor::new(&[1, l, d], targets[b].clone());
            l1 += scalar(|tape| masked_mean_l1(tape.constant(pi.clone()), tape.constant(ti.clone()), &[l]));
            ss += scalar(|tape| ssim_loss(tape.constant(pi.clone()), tape.constant(ti.clone()), &[l]));
        }
        let n = lens.len() as f64;
        prop_assert!((batched_l1 - l1 / n).abs() < 1e-6);
        prop_assert!((batched_ssim - ss / n).abs() < 1e-6);
    }

    #[test]
    fn dwt_reconstructs_and_keeps_energy(x in prop::collection::vec(-1.0f64..1.0, 1..64)) {
        let mut x = x;
        if x.len() % 2 == 1 {
            x.push(0.0);
        }
        let (a, d) = haar_dwt(&x).unwrap();
        let back = haar_idwt(&a, &d).unwrap();
        prop_assert!(x.iter().zip(&back).all(|(u, v)| (u - v).abs() < 1e-12));
        let e = |v: &[f64]| v.iter().map(|s| s * s).sum::<f64>();
        prop_assert!((e(&x) - e(&a) - e(&d)).abs() < 1e-9);
    }

    #[test]
    fn ssim_is_bounded(a in values(36), b in values(36)) {
        let (a, b) = (Tensor::new(&[6, 6], a), Tensor::new(&[6, 6], b));
        let s = ssim(&a, &b).unwrap();
        prop_assert!((-1.0..=1.0).contains(&s), "{}", s);
        prop_assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn nearest_code_matches_scan(v in values(4), cb in values(32)) {
        let cb = Tensor::new(&[8, 4], cb);
        let dist = |k: usize| cb.row(k).iter().zip(&v).map(|(c, x)| (c - x) * (c - x)).sum::<f64>();
        let best = (0..8).fold(0, |b, k| if dist(k) < dist(b) { k } else { b });
        prop_assert_eq!(nearest_code(&v, &cb).unwrap().0, best);
    }

    #[test]
    fn residual_norms_never_grow_with_a_zero_code(frame in values(4), books in prop::collection::vec(values(28), 1..5)) {
        let codebooks: Vec<Tensor> = books
            .into_iter()
            .map(|rows| Tensor::new(&[8, 4], [vec![0.0; 4], rows].concat()))
            .collect();
        let codes = msvq_quantize(&frame, &codebooks).unwrap();
        prop_assert!(codes.residual_norms.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn code_stream_round_trips(
        stages in 1usize..5,
        frames in 0usize..20,
        samples in 0u64..9000,
        seed in any::<u64>(),
    ) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stream = CodeStream {
            num_stages: stages,
            codebook_size: 1024,
            dim: 16,
            frame_rate_hz: 80.0,
            num_samples: samples,
            indices: (0..frames * stages).map(|_| rng.random_range(0..1024)).collect(),
        };
        let mut bytes = Vec::new();
        stream.write_to(&mut bytes).unwrap();
        prop_assert_eq!(CodeStream::read_from(bytes.as_slice()).unwrap(), stream);
    }

    #[test]
    fn scheduled_sampling_extremes_and_reproducibility(seed in any::<u64>(), p in 0.0f64..1.0) {
        let gt = bundle(0.0);
        let pred = bundle(1.0);
        prop_assert_eq!(scheduled_sample(&gt, &pred, 0.0, seed), gt.clone());
        let all = scheduled_sample(&gt, &pred, 1.0, seed);
        prop_assert_eq!((&all.utt_cond, &all.phone_cond, &all.pitch), (&pred.utt_cond, &pred.phone_cond, &pred.pitch));
        prop_assert_eq!(&all.durations, &gt.durations);
        prop_assert_eq!(scheduled_sample(&gt, &pred, p, seed), scheduled_sample(&gt, &pred, p, seed));
    }
}

fn bundle(v: f64) -> VarianceBundle {
    VarianceBundle {
        utt_cond: Tensor::from_fn(&[1, 3], |i| v + i as f64),
        phone_cond: Tensor::from_fn(&[1, 2, 3], |i| v - i as f64),
        pitch: Tensor::from_fn(&[1, 2], |i| v * 2.0 + i as f64),
        durations: vec![vec![2, 3]],
    }
}

fn tiny_models() -> (SystemConfig, AcousticModel, CodecNetwork) {
    let cfg = SystemConfig::tiny();
    let am = AcousticModel::new(cfg.acoustic.clone(), 5).unwrap();
    let codec = CodecNetwork::new(cfg.codec.clone(), 6).unwrap();
    (cfg, am, codec)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn synthesized_length_is_duration_sum_times_hop(ids in prop::collection::vec(0usize..64, 1..8)) {
        let (_, am, codec) = tiny_models();
        let (wave, durations) = synthesize(&am, &codec, &ids).unwrap();
        prop_assert_eq!(durations.len(), ids.len());
        prop_assert!(durations.iter().all(|&d| d >= 1));
        prop_assert_eq!(wave.len(), durations.iter().sum::<usize>() * 300);
    }

    #[test]
    fn decode_of_encode_has_padded_length(len in 1usize..4000) {
        let (_, _, codec) = tiny_models();
        let wave = Waveform::new((0..len).map(|i| (i as f64 * 0.01).sin() * 0.3).collect(), 24_000).unwrap();
        let repr = codec.encode(&wave).unwrap();
        prop_assert_eq!(repr.frames(), len.div_ceil(300));
        let out = codec.decode(&repr, None).unwrap();
        prop_assert_eq!(out.len(), repr.frames() * 300);
    }

    #[test]
    fn padded_acoustic_loss_is_mean_of_items(
        items in prop::collection::vec((prop::collection::vec(0usize..64, 1..5), any::<u64>()), 2..4),
    ) {
        use rand::Rng;
        let (cfg, am, _) = tiny_models();
        let (mels, latent) = (cfg.acoustic.n_mels, cfg.acoustic.latent_dim);
        let parts: Vec<_> = items
            .iter()
            .map(|(ids, seed)| {
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                let durs: Vec<usize> = ids.iter().map(|_| rng.random_range(1..4)).collect();
                let frames: usize = durs.iter().sum();
                let mel: Vec<f64> = (0..frames * mels).map(|_| rng.random_range(-4.0..0.0)).collect();
                let pitch: Vec<f64> = ids.iter().map(|_| rng.random_range(0.0..6.0)).collect();
                let target: Vec<f64> = (0..frames * latent).map(|_| rng.random_range(-1.0..1.0)).collect();
                (ids.clone(), durs, mel, pitch, target)
            })
            .collect();
        let batch_of = |sel: &[usize]| {
            let phone_lens: Vec<usize> = sel.iter().map(|&i| parts[i].0.len()).collect();
            let frame_lens: Vec<usize> = sel.iter().map(|&i| parts[i].1.iter().sum()).collect();
            let ids: Vec<Vec<f64>> = sel.iter().map(|&i| parts[i].0.iter().map(|&x| x as f64).collect()).collect();
            let phonemes = pad(&ids, &phone_lens, 1).data().iter().map(|&v| if v >= 1e3 { 0 } else { v as usize }).collect();
            let mel = pad(&sel.iter().map(|&i| parts[i].2.clone()).collect::<Vec<_>>(), &frame_lens, mels);
            let pitch = pad(&sel.iter().map(|&i| parts[i].3.clone()).collect::<Vec<_>>(), &phone_lens, 1);
            let target = pad(&sel.iter().map(|&i| parts[i].4.clone()).collect::<Vec<_>>(), &frame_lens, latent);
            let (b, n) = (sel.len(), *phone_lens.iter().max().unwrap());
            let mut mel = mel;
            let f_max = *frame_lens.iter().max().unwrap();
            for (bi, &fl) in frame_lens.iter().enumerate() {
                mel.data_mut()[(bi * f_max + fl) * mels..(bi + 1) * f_max * mels].iter_mut().for_each(|v| *v = 0.0);
            }
            let batch = AcousticBatch {
                phonemes,
                phone_lens,
                durations: sel.iter().map(|&i| parts[i].1.clone()).collect(),
                frame_lens,
                mel,
                pitch: pitch.reshape(&[b, n]),
            };
            let tape = Tape::new();
            let p = am.params.bind(&tape, false);
            let out = am.forward_train(&p, &batch, SampleChoice::default()).unwrap();
            let terms = acoustic_model_loss(&out, &batch, tape.constant(target));
            [terms.pitch, terms.dur, terms.utt, terms.phone, terms.ssim, terms.feat].map(|v| v.item())
        };
        let all: Vec<usize> = (0..parts.len()).collect();
        let batched = batch_of(&all);
        let mut mean = [0.0; 6];
        for i in 0..parts.len() {
            for (m, v) in mean.iter_mut().zip(batch_of(&[i])) {
                *m += v / parts.len() as f64;
            }
        }
        for (b, m) in batched.iter().zip(mean) {
            prop_assert!((b - m).abs() < 1e-6, "{:?} vs {:?}", batched, mean);
        }
    }
}

#[test]
fn spectral_distance_is_zero_on_identity_and_nonnegative() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    use rand::Rng;
    for _ in 0..5 {
        let a = Waveform::new((0..4800).map(|_| rng.random_range(-0.5..0.5)).collect(), 24_000).unwrap();
        let b = Waveform::new((0..4800).map(|_| rng.random_range(-0.5..0.5)).collect(), 24_000).unwrap();
        assert_eq!(multi_res_spectral_distance(&a, &a).unwrap(), 0.0);
        assert!(multi_res_spectral_distance(&a, &b).unwrap() > 0.0);
    }
}

#[test]
fn segment_starts_are_uniform() {
    let (total, n) = (109, 10);
    let repr = FrameRepresentation { values: Tensor::from_fn(&[total, 1], |i| i as f64), num_samples: total * 300 };
    let wave = Waveform::new(vec![0.0; total * 300], 24_000).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let draws = 10_000;
    let mut bins = [0usize; 10];
    for _ in 0..draws {
        let (slice, clip) = random_segment(&repr, &wave, n, &mut rng).unwrap();
        assert_eq!(clip.len(), n * 300);
        let start = slice.values.data()[0] as usize;
        bins[start * 10 / (total - n + 1)] += 1;
    }
    for count in bins {
        let share = count as f64 / draws as f64;
        assert!((share - 0.1).abs() <= 0.03, "{bins:?}");
    }
}

#[test]
fn scheduled_sampling_rate_matches_probability() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let draws = 10_000;
    let mut hits = [0usize; 3];
    for _ in 0..draws {
        let c = SampleChoice::draw(0.3, &mut rng);
        for (h, on) in hits.iter_mut().zip([c.pitch, c.utt, c.phone]) {
            *h += on as usize;
        }
    }
    for h in hits {
        assert!((h as f64 / draws as f64 - 0.3).abs() <= 0.02, "{hits:?}");
    }
}

#[test]
fn synthetic_clip_round_trips_through_the_trainer_shape_law() {
    let cfg = common::fast_config();
    let t = vqspeech_core::training::Trainer::new(cfg).unwrap();
    for len in [300, 1000, 24_000] {
        let w = Waveform::new(vec![0.01; len], 24_000).unwrap();
        assert_eq!(t.reconstruct(&w).unwrap().len(), len);
    }
}
