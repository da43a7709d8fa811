use mqnet_core::ctc::LogProbMatrix;
use mqnet_core::Tensor;
use mqnet_decoder::beam::beam_search_traced;
use mqnet_decoder::lm::{DEFAULT_DISCOUNT, DEFAULT_ORDER};
use mqnet_decoder::oracle::exhaustive_decode;
use mqnet_decoder::{beam_search, BeamConfig, NGramLM, Vocabulary};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const ALPHABET: [char; 3] = ['a', 'b', 'c'];

fn random_lp(rng: &mut ChaCha8Rng, t: usize, labels: usize) -> LogProbMatrix {
    let v = labels + 1;
    let mut data = Vec::with_capacity(t * v);
    for _ in 0..t {
        let logits: Vec<f64> = (0..v).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + logits.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
        data.extend(logits.iter().map(|z| z - lse));
    }
    LogProbMatrix::new(Tensor::matrix(t, v, data).unwrap()).unwrap()
}

fn random_lm(rng: &mut ChaCha8Rng, labels: usize) -> (NGramLM, Vocabulary) {
    let vocab = Vocabulary::new(ALPHABET[..labels].to_vec()).unwrap();
    let texts: Vec<String> = (0..rng.gen_range(1..6))
        .map(|_| (0..rng.gen_range(0..6)).map(|_| ALPHABET[rng.gen_range(0..labels)]).collect())
        .collect();
    let lm = NGramLM::train(texts.iter().map(String::as_str), &vocab, DEFAULT_ORDER, DEFAULT_DISCOUNT).unwrap();
    (lm, vocab)
}

fn instance(seed: u64) -> (LogProbMatrix, NGramLM, BeamConfig) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = rng.gen_range(1..=4);
    let labels = rng.gen_range(1..=2);
    let lp = random_lp(&mut rng, t, labels);
    let (lm, _) = random_lm(&mut rng, labels);
    let cfg = BeamConfig {
        alpha: rng.gen_range(0.0..2.5),
        beta: rng.gen_range(-1.0..4.0),
        beam: usize::MAX,
    };
    (lp, lm, cfg)
}

#[test]
fn unbounded_beam_equals_exhaustive_maximization() {
    for seed in 0..200 {
        let (lp, lm, cfg) = instance(seed);
        let got = beam_search_traced(&lp, Some(&lm), &cfg, |_, _| {}).unwrap();
        let (want, q) = exhaustive_decode(&lp, Some(&lm), cfg.alpha, cfg.beta, 1.0).unwrap();
        assert_eq!(got.prefix, want.0, "seed {seed}");
        assert!((got.score - q).abs() < 1e-9, "seed {seed}: {} vs {q}", got.score);
    }
}

#[test]
fn prefix_probabilities_never_exceed_one() {
    for seed in 0..50 {
        let (lp, lm, mut cfg) = instance(seed);
        cfg.beam = 3;
        beam_search_traced(&lp, Some(&lm), &cfg, |_, beam| {
            for h in beam {
                assert!(h.logp_total() <= 1e-12);
                assert!(h.lm_logprob <= 0.0);
            }
            assert!(beam.windows(2).all(|w| w[0].score >= w[1].score));
        })
        .unwrap();
    }
}

/// Pruned prefix search is not monotone in the beam width in general: a wider
/// beam raises some prefix probabilities and can evict a hypothesis a narrower
/// beam would have kept. The unbounded beam is always the best, and
/// inversions between finite widths are rare.
#[test]
fn best_score_grows_with_beam_width() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut violations = 0;
    let trials = 100;
    for _ in 0..trials {
        let t = rng.gen_range(3..=8);
        let lp = random_lp(&mut rng, t, 3);
        let (lm, _) = random_lm(&mut rng, 3);
        let mut last = f64::NEG_INFINITY;
        for beam in [1, 2, 4, 8, 16, usize::MAX] {
            let cfg = BeamConfig { alpha: 0.8, beta: 1.0, beam };
            let s = beam_search_traced(&lp, Some(&lm), &cfg, |_, _| {}).unwrap().score;
            if s + 1e-12 < last {
                violations += 1;
            }
            last = last.max(s);
        }
        let exact = beam_search_traced(
            &lp,
            Some(&lm),
            &BeamConfig { alpha: 0.8, beta: 1.0, beam: usize::MAX },
            |_, _| {},
        )
        .unwrap()
        .score;
        assert!((last - exact).abs() < 1e-12, "unbounded beam must be the best");
    }
    assert!(violations * 20 <= trials, "{violations} non-monotone steps in {trials} trials");
}

#[test]
fn decoding_is_deterministic() {
    for seed in 0..20 {
        let (lp, lm, mut cfg) = instance(seed);
        cfg.beam = 2;
        let a = beam_search(&lp, Some(&lm), &cfg).unwrap();
        let b = beam_search(&lp, Some(&lm), &cfg).unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn joint_positive_scaling_keeps_the_argmax() {
    for seed in 0..50 {
        let (lp, lm, cfg) = instance(seed);
        let (base, _) = exhaustive_decode(&lp, Some(&lm), cfg.alpha, cfg.beta, 1.0).unwrap();
        for gamma in [0.1, 0.5, 3.0, 17.0] {
            let (scaled, _) = exhaustive_decode(&lp, Some(&lm), gamma * cfg.alpha, gamma * cfg.beta, gamma).unwrap();
            assert_eq!(scaled, base, "seed {seed} gamma {gamma}");
        }
    }
}

#[test]
fn lm_vocabulary_must_match_the_model_output() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let lp = random_lp(&mut rng, 3, 2);
    let (lm, _) = random_lm(&mut rng, 3);
    assert!(beam_search(&lp, Some(&lm), &BeamConfig::default()).is_err());
}

#[test]
fn arpa_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (lm, vocab) = random_lm(&mut rng, 3);
    let path = dir.path().join("lm.arpa");
    lm.save(&path).unwrap();
    let back = NGramLM::load(&path).unwrap();
    assert_eq!(back, lm);
    assert!(back.matches(&vocab));
}

proptest! {
    #[test]
    fn every_context_sums_to_one(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (lm, _) = random_lm(&mut rng, 3);
        let ctx_len = rng.gen_range(0..=3);
        let mut ctx: Vec<u32> = (0..ctx_len).map(|_| rng.gen_range(0..3)).collect();
        if rng.gen_bool(0.5) {
            ctx.insert(0, lm.bos());
        }
        let total: f64 = (0..=3).map(|w| lm.log_prob(&ctx, w).exp()).sum();
        prop_assert!((total - 1.0).abs() < 1e-9);
    }

    #[test]
    fn extending_a_sequence_never_raises_its_score(seed in 0u64..10_000, seq in prop::collection::vec(0usize..3, 0..8), c in 0usize..3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (lm, _) = random_lm(&mut rng, 3);
        let base = lm.lm_logprob(&seq);
        let mut longer = seq.clone();
        longer.push(c);
        prop_assert!(base <= 0.0 && base.is_finite());
        prop_assert!(lm.lm_logprob(&longer) <= base);
    }
}
