use proptest::collection::vec;
use proptest::prelude::*;

use unit_codec::audio::resample;
use unit_codec::codec::{decode_bitstream, encode_bitstream, Bitstream, UnigramModel, PITCH_RANGE, PITCH_STEP};
use unit_codec::lm::{train_ngram, NGramModel};
use unit_codec::quantizer::{kmeans_train, Codebook, KMeansConfig, UnitSequence};
use unit_codec::streams::{dedup, inflate, EncodedUtterance};
use unit_codec::{NormalizedPitch, Waveform};

fn units_and_k() -> impl Strategy<Value = (Vec<u32>, u32)> {
    (1u32..=8).prop_flat_map(|k| (vec(0..k, 0..=64), Just(k)))
}

fn encoded() -> impl Strategy<Value = EncodedUtterance> {
    (2u32..=600, any::<bool>(), prop_oneof![Just(50.0), Just(100.0)]).prop_flat_map(|(k, with_pitch, rate)| {
        let pitch = if with_pitch {
            prop::option::weighted(0.7, -2.0f32..2.0).boxed()
        } else {
            Just(None).boxed()
        };
        vec(
            (
                0..k,
                prop_oneof![4 => 1u32..10, 1 => 1u32..100_000],
                pitch,
            ),
            0..120,
        )
        .prop_map(move |segs| {
            let mut e = EncodedUtterance {
                units: Vec::new(),
                durations: Vec::new(),
                pitch: Vec::new(),
                frame_rate: rate,
                k,
            };
            for (u, d, p) in segs {
                if e.units.last() != Some(&u) {
                    e.units.push(u);
                    e.durations.push(d);
                    e.pitch.push(p);
                }
            }
            e
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn inflate_inverts_dedup((units, k) in units_and_k()) {
        let u = UnitSequence::new(units.clone(), 50.0, k).unwrap();
        let e = dedup(&u, None).unwrap();
        prop_assert!(e.units.windows(2).all(|w| w[0] != w[1]));
        prop_assert_eq!(e.durations.iter().sum::<u32>() as usize, units.len());
        prop_assert_eq!(inflate(&e).0.units, units);
    }

    #[test]
    fn segment_pitch_is_voiced_mean((units, k) in units_and_k(), seed in any::<u64>()) {
        let values: Vec<Option<f32>> = units
            .iter()
            .enumerate()
            .map(|(i, _)| {
                let h = seed.wrapping_mul(i as u64 + 1).rotate_left(17);
                (h % 3 != 0).then(|| (h % 1000) as f32 / 500.0 - 1.0)
            })
            .collect();
        let p = NormalizedPitch { values: values.clone(), frame_rate: 50.0 };
        let u = UnitSequence::new(units.clone(), 50.0, k).unwrap();
        let e = dedup(&u, Some(&p)).unwrap();
        let (_, back) = inflate(&e);
        let mut start = 0;
        for (&d, &seg) in e.durations.iter().zip(&e.pitch) {
            let run = &values[start..start + d as usize];
            let voiced: Vec<f64> = run.iter().flatten().map(|&v| v as f64).collect();
            match seg {
                None => prop_assert!(voiced.is_empty()),
                Some(m) => {
                    let want = voiced.iter().sum::<f64>() / voiced.len() as f64;
                    prop_assert!((m as f64 - want).abs() < 1e-6);
                }
            }
            prop_assert!(back.values[start..start + d as usize].iter().all(|&v| v == seg));
            start += d as usize;
        }
    }

    #[test]
    fn bitstream_round_trip(e in encoded(), smoothing in 0.01f64..2.0, entropy in any::<bool>()) {
        let model = entropy.then(|| {
            let counts = (0..e.k as u64).map(|i| i * 7 % 13).collect();
            UnigramModel::from_counts(counts, smoothing).unwrap()
        });
        let b = encode_bitstream(&e, model.as_ref()).unwrap();
        let b = Bitstream::from_bytes(&b.to_bytes()).unwrap();
        let d = decode_bitstream(&b, model.as_ref()).unwrap();
        prop_assert_eq!(&d.units, &e.units);
        prop_assert_eq!(&d.durations, &e.durations);
        prop_assert_eq!(d.k, e.k);
        for (a, b) in e.pitch.iter().zip(&d.pitch) {
            match (a, b) {
                (Some(a), Some(b)) => {
                    let clamped = a.clamp(-PITCH_RANGE, PITCH_RANGE);
                    prop_assert!((clamped - b).abs() <= PITCH_STEP);
                }
                (None, None) => {}
                _ => prop_assert!(false, "voicing changed"),
            }
        }
    }

    #[test]
    fn text_round_trip(e in encoded()) {
        let back = EncodedUtterance::from_text(&e.to_text(), e.frame_rate, e.k).unwrap();
        prop_assert_eq!(back.units, e.units);
        prop_assert_eq!(back.durations, e.durations);
        for (a, b) in e.pitch.iter().zip(&back.pitch) {
            prop_assert_eq!(a.is_some(), b.is_some());
            if let (Some(a), Some(b)) = (a, b) {
                prop_assert!((a - b).abs() <= 1e-6 * a.abs().max(1.0));
            }
        }
    }

    #[test]
    fn resample_length(len in 0usize..4000, from in prop::sample::select(vec![8000u32, 11025, 16000, 22050, 44100, 48000]),
                       to in prop::sample::select(vec![8000u32, 16000, 22050, 24000, 48000])) {
        let samples: Vec<f32> = (0..len).map(|i| ((i * 37 % 101) as f32 / 101.0 - 0.5) * 0.8).collect();
        let w = Waveform::new(samples, from).unwrap();
        let r = resample(&w, to).unwrap();
        let want = (len as f64 * to as f64 / from as f64).round() as usize;
        prop_assert_eq!(r.len(), want);
        prop_assert_eq!(r.sample_rate(), to);
        prop_assert!(r.samples().iter().all(|v| v.is_finite() && v.abs() <= 1.0));
        if from == to {
            prop_assert_eq!(r.samples(), w.samples());
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn kmeans_ignores_thread_count(seed in any::<u64>(), k in 2usize..12, n in 40usize..3000) {
        let dim = 5;
        let data: Vec<f32> = (0..n * dim)
            .map(|i| (((i as u64).wrapping_mul(0x9E37_79B9).wrapping_add(seed) >> 7) % 1000) as f32 / 100.0)
            .collect();
        let train = |threads: usize| -> Codebook {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| kmeans_train(&data, dim, &KMeansConfig::new(k).with_seed(seed), Default::default()).unwrap())
        };
        let one = train(1);
        prop_assert_eq!(one.to_bytes(), train(4).to_bytes());
        prop_assert_eq!(Codebook::from_bytes(&one.to_bytes()).unwrap(), one);
    }

    #[test]
    fn ngram_file_round_trip(units in vec(0u32..6, 1..80), order in 1usize..5) {
        let e = EncodedUtterance {
            durations: vec![2; units.len()],
            pitch: vec![None; units.len()],
            units,
            frame_rate: 50.0,
            k: 6,
        };
        let m = train_ngram(&[e], order, 0.25).unwrap();
        let back = NGramModel::from_bytes(&m.to_bytes()).unwrap();
        prop_assert_eq!(&back, &m);
        for h in [vec![], vec![1], vec![2, 3, 4]] {
            let p = m.next_distribution(&h);
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
}
