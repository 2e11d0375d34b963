use std::collections::HashSet;

use proptest::prelude::*;
use rand::SeedableRng;

use super::*;

fn spec(noise: f64) -> LanguageSpec {
    LanguageSpec { num_languages: 4, feature_dim: 8, vocab_size: 6, noise, conflict: false }
}

fn corpus_spec(counts: Vec<usize>) -> CorpusSpec {
    CorpusSpec {
        language: LanguageSpec { num_languages: counts.len(), ..spec(0.1) },
        counts,
        label_range: (1, 5),
        repeat_range: (4, 8),
    }
}

fn max_abs(a: &Tensor, b: &Tensor) -> f64 {
    a.max_abs_diff(b)
}

#[test]
fn language_zero_uses_base_codebook() {
    let s = spec(0.1);
    let base = base_codebook(7, &s).unwrap();
    assert_eq!(make_language(7, 0, &s).unwrap().codebook, base);
}

fn gram_error(c: &Tensor) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..c.rows() {
        for j in 0..c.rows() {
            let dot: f64 = c.row(i).iter().zip(c.row(j)).map(|(a, b)| a * b).sum();
            let want = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((dot - want).abs());
        }
    }
    worst
}

proptest! {
    #[test]
    fn codebooks_are_orthonormal(seed in any::<u64>(), conflict in any::<bool>()) {
        let s = LanguageSpec { conflict, ..spec(0.1) };
        for l in 0..s.num_languages {
            let lang = make_language(seed, l, &s).unwrap();
            prop_assert!(gram_error(&lang.codebook) <= 1e-9);
        }
    }

    #[test]
    fn distinct_languages_have_distinct_codebooks(seed in any::<u64>()) {
        let s = spec(0.1);
        let books: Vec<Tensor> = (0..s.num_languages).map(|l| make_language(seed, l, &s).unwrap().codebook).collect();
        for a in 0..books.len() {
            for b in a + 1..books.len() {
                let dist = (0..s.vocab_size)
                    .map(|v| books[a].row(v).iter().zip(books[b].row(v)).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt())
                    .fold(0.0, f64::max);
                prop_assert!(dist > 0.1, "languages {a} and {b}: {dist}");
            }
        }
    }

    #[test]
    fn sampler_stream_depends_only_on_inputs(seed in any::<u64>(), a in 1usize..500, b in 1usize..500) {
        let x: Vec<usize> = BalancedSampler::new(&[a, b], 0.5, seed).unwrap().take(64).collect();
        let y: Vec<usize> = BalancedSampler::new(&[a, b], 0.5, seed).unwrap().take(64).collect();
        prop_assert_eq!(x, y);
    }
}

#[test]
fn same_seed_same_language() {
    let s = spec(0.1);
    for l in 0..s.num_languages {
        assert_eq!(make_language(3, l, &s).unwrap(), make_language(3, l, &s).unwrap());
    }
    assert_ne!(make_language(3, 1, &s).unwrap(), make_language(4, 1, &s).unwrap());
}

#[test]
fn too_many_labels_for_dimension() {
    let s = LanguageSpec { vocab_size: 9, ..spec(0.1) };
    assert!(matches!(make_language(0, 0, &s), Err(Error::Input(_))));
}

#[test]
fn conflict_mode_shifts_rows() {
    let s = LanguageSpec { conflict: true, ..spec(0.0) };
    let base = base_codebook(11, &s).unwrap();
    let lang = make_language(11, 2, &s).unwrap();
    for v in 0..s.vocab_size {
        assert_eq!(lang.codebook.row(v), base.row((v + 2) % s.vocab_size));
    }
    let too_many = LanguageSpec { num_languages: 7, ..s };
    assert!(make_language(11, 0, &too_many).is_err());
}

#[test]
fn noiseless_single_label() {
    let lang = make_language(5, 1, &spec(0.0)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let u = sample_utterance(&lang, (1, 1), (4, 4), &mut rng).unwrap();
    assert_eq!(u.labels.len(), 1);
    assert_eq!(u.num_frames(), 4);
    let want: Vec<f64> = lang.codebook.row(u.labels[0]).iter().map(|&x| x as f32 as f64).collect();
    for t in 0..4 {
        assert_eq!(u.frames.row(t), &want[..]);
    }
}

fn nearest_row(book: &Tensor, x: &[f64]) -> usize {
    (0..book.rows())
        .map(|v| (v, book.row(v).iter().zip(x).map(|(a, b)| (a - b).powi(2)).sum::<f64>()))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .unwrap()
        .0
}

#[test]
fn noiseless_labels_recoverable_by_nearest_codeword() {
    let lang = make_language(5, 2, &spec(0.0)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..200 {
        let u = sample_utterance(&lang, (1, 12), (4, 8), &mut rng).unwrap();
        let per_frame: Vec<usize> = (0..u.num_frames()).map(|t| nearest_row(&lang.codebook, u.frames.row(t))).collect();
        // a run boundary is invisible when a label repeats, so compare run-collapsed sequences
        let mut want = u.labels.clone();
        want.dedup();
        let mut got = per_frame;
        got.dedup();
        assert_eq!(got, want);
    }
}

#[test]
fn frame_budget_holds_over_ten_thousand_utterances() {
    let lang = make_language(9, 3, &spec(0.3)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..10_000 {
        let u = sample_utterance(&lang, (1, 12), (4, 8), &mut rng).unwrap();
        assert!(u.num_frames() >= 4 * u.labels.len());
        assert!((1..=12).contains(&u.labels.len()));
        assert!(u.labels.iter().all(|&l| l < 6));
        assert!(u.frames.is_finite());
    }
}

#[test]
fn sample_utterance_rejects_bad_ranges() {
    let lang = make_language(0, 0, &spec(0.1)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(sample_utterance(&lang, (0, 3), (4, 8), &mut rng).is_err());
    assert!(sample_utterance(&lang, (1, 13), (4, 8), &mut rng).is_err());
    assert!(sample_utterance(&lang, (1, 3), (3, 8), &mut rng).is_err());
}

#[test]
fn manifest_counts_match() {
    let dir = tempfile::tempdir().unwrap();
    let (_, manifest) = gen_corpus(&corpus_spec(vec![10, 10]), 1, 2, dir.path()).unwrap();
    assert_eq!(manifest.counts, vec![10, 10]);
    assert_eq!(manifest.offsets.len(), 20);
    assert_eq!(manifest.generator_version, GENERATOR_VERSION);
}

#[test]
fn regeneration_is_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let s = corpus_spec(vec![7, 3, 5]);
    gen_corpus(&s, 4, 5, a.path()).unwrap();
    gen_corpus(&s, 4, 5, b.path()).unwrap();
    for f in ["corpus.bin", "manifest.json"] {
        assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap());
    }
}

#[test]
fn reload_round_trips_and_keeps_frame_budget() {
    let dir = tempfile::tempdir().unwrap();
    let (corpus, _) = gen_corpus(&corpus_spec(vec![12, 4]), 6, 7, dir.path()).unwrap();
    let (back, _) = read_corpus(dir.path()).unwrap();
    assert_eq!(back, corpus);
    for u in &back.utterances {
        assert!(u.num_frames() >= 4 * u.labels.len());
    }
}

#[test]
fn corrupted_files_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    gen_corpus(&corpus_spec(vec![3, 3]), 6, 7, dir.path()).unwrap();
    let path = dir.path().join("corpus.bin");
    let good = std::fs::read(&path).unwrap();

    let mut bad = good.clone();
    bad[0] = b'X';
    std::fs::write(&path, &bad).unwrap();
    assert!(matches!(read_corpus(dir.path()), Err(Error::Format(_))));

    std::fs::write(&path, &good[..good.len() - 3]).unwrap();
    assert!(matches!(read_corpus(dir.path()), Err(Error::Format(_))));

    // claim more frames than labels allow: U = T
    let mut bad = good.clone();
    let t = u32::from_le_bytes(bad[10..14].try_into().unwrap());
    bad[14..18].copy_from_slice(&t.to_le_bytes());
    std::fs::write(&path, &bad).unwrap();
    assert!(read_corpus(dir.path()).is_err());
}

#[test]
fn unwritable_path_is_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("plain");
    std::fs::write(&file, b"x").unwrap();
    let err = gen_corpus(&corpus_spec(vec![1]), 0, 0, &file.join("sub")).unwrap_err();
    assert!(matches!(err, Error::Io(_)));
}

#[test]
fn split_is_disjoint_and_exhaustive() {
    let corpus = generate(&corpus_spec(vec![300, 200]), 1, 1).unwrap();
    let (train, val) = corpus.split(42);
    let t: HashSet<&str> = train.iter().map(|u| u.id.as_str()).collect();
    let v: HashSet<&str> = val.iter().map(|u| u.id.as_str()).collect();
    assert!(t.is_disjoint(&v));
    assert_eq!(t.len() + v.len(), 500);
    let frac = v.len() as f64 / 500.0;
    assert!((0.05..0.15).contains(&frac), "validation fraction {frac}");
}

#[test]
fn languages_use_independent_streams() {
    let a = generate(&corpus_spec(vec![5, 5]), 1, 1).unwrap();
    let b = generate(&corpus_spec(vec![5, 9]), 1, 1).unwrap();
    assert_eq!(a.by_language()[0], b.by_language()[0]);
    assert_eq!(a.by_language()[1][..], b.by_language()[1][..5]);
}

#[test]
fn fraction_keeps_prefix_per_language() {
    let c = generate(&corpus_spec(vec![10, 4]), 1, 1).unwrap();
    assert_eq!(c.fraction(0.5).unwrap().counts(), vec![5, 2]);
    assert_eq!(c.fraction(0.01).unwrap().counts(), vec![1, 1]);
    assert!(c.fraction(0.0).is_err());
}

#[test]
fn sampler_limits() {
    let p = sampling_probabilities(&[1, 1_000_000], 0.0).unwrap();
    assert_eq!(p, vec![0.5, 0.5]);
    let p = sampling_probabilities(&[100, 300], 1.0).unwrap();
    assert!((p[0] - 0.25).abs() < 1e-15 && (p[1] - 0.75).abs() < 1e-15);
    let p = sampling_probabilities(&[100, 400], 0.5).unwrap();
    assert!((p[0] - 1.0 / 3.0).abs() < 1e-15 && (p[1] - 2.0 / 3.0).abs() < 1e-15);
    assert!(sampling_probabilities(&[0, 3], 0.5).is_err());
    assert!(sampling_probabilities(&[1, 3], 1.5).is_err());
}

#[test]
fn sampler_empirical_frequencies() {
    let draws = 100_000;
    let mut hits = [0usize; 2];
    for l in BalancedSampler::new(&[100, 400], 0.5, 99).unwrap().take(draws) {
        hits[l] += 1;
    }
    let f0 = hits[0] as f64 / draws as f64;
    assert!((f0 - 1.0 / 3.0).abs() <= 0.01, "{f0}");
}

#[test]
fn rotation_changes_every_language() {
    let s = spec(0.0);
    let base = base_codebook(2, &s).unwrap();
    for l in 1..s.num_languages {
        assert!(max_abs(&make_language(2, l, &s).unwrap().codebook, &base) > 0.1);
    }
}
