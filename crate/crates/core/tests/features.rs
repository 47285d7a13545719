use std::collections::BTreeMap;
use std::path::Path;

use moevc::features::{
    decode_feature_file, encode_feature_file, f0_convert, gen_synthetic_corpus, read_feature_file,
    sample_training_segment, write_feature_file, Corpus, CorpusManifest, F0Stats, FeatureSeq,
    Split, StandardizationStats, SyntheticSpec,
};
use moevc::rng::stream_rng;
use moevc::Error;
use proptest::prelude::*;

fn tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in std::fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(
                    p.strip_prefix(root).unwrap().display().to_string(),
                    std::fs::read(&p).unwrap(),
                );
            }
        }
    }
    out
}

fn default_corpus() -> (tempfile::TempDir, Corpus) {
    let dir = tempfile::tempdir().unwrap();
    gen_synthetic_corpus(&SyntheticSpec::default(), dir.path()).unwrap();
    let c = Corpus::load(dir.path()).unwrap();
    (dir, c)
}

#[test]
fn segment_offsets_are_uniform() {
    let seq = FeatureSeq::new((0..10).map(|v| v as f32).collect(), 10, 1).unwrap();
    let mut rng = stream_rng(0, 1);
    let draws = 10_000;
    let mut counts = [0usize; 7];
    for _ in 0..draws {
        let s = sample_training_segment(&seq, 4, &mut rng).unwrap();
        counts[s.frame(0)[0] as usize] += 1;
    }
    let p = 1.0 / 7.0;
    let mean = draws as f64 * p;
    let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
    for (off, &c) in counts.iter().enumerate() {
        assert!(
            (c as f64 - mean).abs() <= 5.0 * sigma,
            "offset {off} seen {c} times"
        );
    }
}

#[test]
fn corpus_counts_and_determinism() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let m = gen_synthetic_corpus(&SyntheticSpec::default(), a.path()).unwrap();
    gen_synthetic_corpus(&SyntheticSpec::default(), b.path()).unwrap();
    assert_eq!(m.entries.len(), 80);
    assert_eq!(m.speakers().len(), 4);
    assert_eq!(tree(a.path()), tree(b.path()));

    let c = tempfile::tempdir().unwrap();
    gen_synthetic_corpus(
        &SyntheticSpec {
            seed: 1,
            ..SyntheticSpec::default()
        },
        c.path(),
    )
    .unwrap();
    assert_ne!(tree(a.path()), tree(c.path()));
}

#[test]
fn single_speaker_corpus_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SyntheticSpec {
        speakers: 1,
        ..SyntheticSpec::default()
    };
    assert!(gen_synthetic_corpus(&spec, dir.path()).is_err());
}

#[test]
fn speakers_are_linearly_separable_from_mean_frames() {
    let (_dir, corpus) = default_corpus();
    let d = corpus.dim();
    let s = corpus.speakers.len();
    let mean_frame = |seq: &FeatureSeq| -> Vec<f64> {
        let mut m = vec![0.0; d];
        for t in 0..seq.len() {
            for (a, &v) in m.iter_mut().zip(seq.frame(t)) {
                *a += v as f64 / seq.len() as f64;
            }
        }
        m
    };
    // nearest class centroid: a linear decision rule
    let mut centroids = vec![vec![0.0; d]; s];
    let mut counts = vec![0usize; s];
    for u in corpus.split(Split::Train) {
        for (c, v) in centroids[u.speaker_index]
            .iter_mut()
            .zip(mean_frame(&u.seq))
        {
            *c += v;
        }
        counts[u.speaker_index] += 1;
    }
    for (c, n) in centroids.iter_mut().zip(&counts) {
        c.iter_mut().for_each(|v| *v /= *n as f64);
    }
    let (mut right, mut total) = (0, 0);
    for u in corpus.split(Split::Eval) {
        let m = mean_frame(&u.seq);
        let guess = (0..s)
            .min_by(|&a, &b| {
                let da: f64 = centroids[a]
                    .iter()
                    .zip(&m)
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum();
                let db: f64 = centroids[b]
                    .iter()
                    .zip(&m)
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum();
                da.total_cmp(&db)
            })
            .unwrap();
        right += usize::from(guess == u.speaker_index);
        total += 1;
    }
    assert!(total > 0);
    assert!(right as f64 / total as f64 > 0.9, "{right}/{total}");
}

#[test]
fn standardized_training_split_has_unit_moments() {
    let (_dir, corpus) = default_corpus();
    let train: Vec<&FeatureSeq> = corpus.split(Split::Train).map(|u| &u.seq).collect();
    let stats = StandardizationStats::compute(train.iter().copied()).unwrap();
    let d = corpus.dim();
    let (mut sum, mut sq, mut n) = (vec![0.0f64; d], vec![0.0f64; d], 0usize);
    for seq in &train {
        let z = stats.standardize(seq).unwrap();
        let back = stats.destandardize(&z).unwrap();
        for (a, b) in back.frames().iter().zip(seq.frames()) {
            assert!((a - b).abs() <= 1e-6 * b.abs().max(1.0), "{a} vs {b}");
        }
        for t in 0..z.len() {
            for (k, &v) in z.frame(t).iter().enumerate() {
                sum[k] += v as f64;
                sq[k] += v as f64 * v as f64;
            }
        }
        n += z.len();
    }
    for k in 0..d {
        let m = sum[k] / n as f64;
        let sd = (sq[k] / n as f64 - m * m).sqrt();
        assert!(m.abs() < 1e-5, "dim {k} mean {m}");
        assert!((sd - 1.0).abs() < 1e-5, "dim {k} std {sd}");
    }
}

#[test]
fn f0_conversion_hits_target_moments() {
    let (_dir, corpus) = default_corpus();
    let tgt = F0Stats::new(5.3, 0.15).unwrap();
    for u in corpus.utterances.iter().take(8) {
        let f0 = u.seq.f0().unwrap();
        let src = F0Stats::compute([f0]).unwrap();
        let out = f0_convert(f0, &src, &tgt).unwrap();
        let got = F0Stats::compute([out.as_slice()]).unwrap();
        assert!((got.log_mean - tgt.log_mean).abs() <= 1e-6);
        assert!((got.log_std - tgt.log_std).abs() <= 1e-6);
        for (a, b) in f0.iter().zip(&out) {
            assert_eq!(*a == 0.0, *b == 0.0);
        }
    }
}

#[test]
fn corpus_with_missing_file_fails_to_load() {
    let dir = tempfile::tempdir().unwrap();
    let m = gen_synthetic_corpus(
        &SyntheticSpec {
            utterances: 2,
            frames: 16,
            dim: 4,
            ..SyntheticSpec::default()
        },
        dir.path(),
    )
    .unwrap();
    std::fs::remove_file(dir.path().join(&m.entries[0].path)).unwrap();
    assert!(matches!(Corpus::load(dir.path()), Err(Error::Corpus(_))));
}

#[test]
fn feature_file_on_disk_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let seq = FeatureSeq::new(vec![0.5, -1.25, 3.0, f32::MIN_POSITIVE, 7.0, -0.0], 3, 2)
        .unwrap()
        .with_f0(vec![0.0, 120.5, 130.25])
        .unwrap();
    let p = dir.path().join("a.mfcb");
    write_feature_file(&seq, &p).unwrap();
    let back = read_feature_file(&p).unwrap();
    assert_eq!(
        encode_feature_file(&back).unwrap(),
        std::fs::read(&p).unwrap()
    );
    assert_eq!(
        back.frames()
            .iter()
            .map(|v| v.to_bits())
            .collect::<Vec<_>>(),
        seq.frames().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
}

proptest! {
    #[test]
    fn mfcb_round_trip_is_bit_exact(
        t in 1usize..6,
        d in 1usize..5,
        seed in any::<u64>(),
        with_f0 in any::<bool>(),
    ) {
        let mut rng = stream_rng(seed, 0);
        let frames: Vec<f32> = (0..t * d).map(|_| f32::from_bits(rand::Rng::random::<u32>(&mut rng) & 0x7f7f_ffff)).collect();
        let mut seq = FeatureSeq::new(frames, t, d).unwrap();
        if with_f0 {
            seq = seq.with_f0((0..t).map(|i| (i * 37) as f32 * 0.5).collect()).unwrap();
        }
        let bytes = encode_feature_file(&seq).unwrap();
        let back = decode_feature_file(&bytes).unwrap();
        prop_assert_eq!(encode_feature_file(&back).unwrap(), bytes);
        prop_assert_eq!(back.len(), t);
        prop_assert_eq!(back.dim(), d);
    }

    #[test]
    fn stats_text_round_trip_is_exact(mean in prop::collection::vec(-1e6f64..1e6, 1..6), scale in 1e-6f64..1e3) {
        let std: Vec<f64> = mean.iter().enumerate().map(|(i, _)| scale * (i + 1) as f64).collect();
        let s = StandardizationStats::new(mean, std).unwrap();
        prop_assert_eq!(StandardizationStats::from_text(&s.to_text()).unwrap(), s);
    }

    #[test]
    fn manifest_text_round_trip(n in 1usize..10, seed in any::<u64>()) {
        let mut rng = stream_rng(seed, 0);
        let entries = (0..n)
            .map(|i| moevc::features::ManifestEntry {
                speaker: format!("s{}", rand::Rng::random_range(&mut rng, 0..3)),
                split: if rand::Rng::random_bool(&mut rng, 0.5) { Split::Train } else { Split::Eval },
                path: format!("d/u{i}.mfcb"),
            })
            .collect();
        let m = CorpusManifest { entries };
        prop_assert_eq!(CorpusManifest::from_text(&m.to_text()).unwrap(), m);
    }

    #[test]
    fn equal_f0_stats_are_the_identity(v in prop::collection::vec(prop_oneof![Just(0.0f32), 50.0f32..400.0], 1..50), m in 3.0f64..6.0, s in 0.05f64..0.5) {
        let st = F0Stats::new(m, s).unwrap();
        let out = f0_convert(&v, &st, &st).unwrap();
        for (a, b) in v.iter().zip(&out) {
            prop_assert!((a - b).abs() <= 1e-4 * a.max(1.0));
        }
    }
}
