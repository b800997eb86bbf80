use capocr::data::vocab::{BOS, EOS};
use capocr::graph::log_softmax;
use capocr::model::{decode_beam, decode_greedy, Decoded, TokenScorer};
use capocr::{derive_seed, stream, Result};
use rand::Rng;

/// Deterministic random language model: the logits for a prefix are drawn
/// from a stream seeded by the prefix itself.
struct RandomScorer {
    seed: u64,
    vocab: usize,
    max_len: usize,
    /// Logit spread; larger means peakier distributions.
    temperature: f64,
}

impl TokenScorer for RandomScorer {
    fn vocab_size(&self) -> usize {
        self.vocab
    }

    fn max_target_len(&self) -> usize {
        self.max_len
    }

    fn next_log_probs(&self, prefix: &[usize]) -> Result<Vec<f64>> {
        let tag: Vec<String> = prefix.iter().map(|t| t.to_string()).collect();
        let tags: Vec<&str> = tag.iter().map(String::as_str).collect();
        let mut rng = stream(derive_seed(self.seed, &tags));
        let logits: Vec<f64> = (0..self.vocab).map(|_| rng.random_range(-1.0..1.0) * self.temperature).collect();
        Ok(log_softmax(&logits))
    }
}

fn stub(seed: u64) -> RandomScorer {
    let mut rng = stream(seed);
    RandomScorer {
        seed,
        vocab: rng.random_range(4..9),
        max_len: rng.random_range(1..7),
        temperature: rng.random_range(0.5..4.0),
    }
}

#[test]
fn beam_one_is_greedy_on_100_stubs() {
    for seed in 0..100 {
        let s = stub(seed);
        assert_eq!(decode_beam(&s, 1).unwrap(), decode_greedy(&s).unwrap(), "stub {seed}");
    }
}

/// Every output sequence of a length-2 model, scored like the decoder does.
fn exhaustive(s: &RandomScorer) -> Decoded {
    let mut all = Vec::new();
    let first = s.next_log_probs(&[BOS]).unwrap();
    all.push(Decoded {
        tokens: vec![],
        terminated: true,
        log_prob: first[EOS],
    });
    for a in (0..s.vocab).filter(|&a| a != EOS) {
        let second = s.next_log_probs(&[BOS, a]).unwrap();
        for (b, &lp) in second.iter().enumerate() {
            let log_prob = first[a] + lp;
            all.push(if b == EOS {
                Decoded {
                    tokens: vec![a],
                    terminated: true,
                    log_prob,
                }
            } else {
                Decoded {
                    tokens: vec![a, b],
                    terminated: false,
                    log_prob,
                }
            });
        }
    }
    all.into_iter().max_by(|x, y| x.score().total_cmp(&y.score())).unwrap()
}

#[test]
fn full_width_beam_finds_exhaustive_argmax() {
    for seed in 0..50 {
        let s = RandomScorer {
            max_len: 2,
            ..stub(seed)
        };
        let found = decode_beam(&s, s.vocab).unwrap();
        let truth = exhaustive(&s);
        assert_eq!(found.tokens, truth.tokens, "stub {seed}");
        assert_eq!(found.terminated, truth.terminated);
        assert!((found.score() - truth.score()).abs() < 1e-12);
    }
}

#[test]
fn wider_beam_never_scores_below_greedy() {
    for seed in 0..200 {
        let s = stub(seed);
        let greedy = decode_greedy(&s).unwrap().score();
        for k in [2, 3, 5] {
            let d = decode_beam(&s, k).unwrap();
            assert!(d.score() >= greedy - 1e-12, "stub {seed} beam {k}: {} < {greedy}", d.score());
        }
    }
}

#[test]
fn zero_beam_is_an_argument_error() {
    assert!(matches!(decode_beam(&stub(0), 0), Err(capocr::Error::Argument(_))));
}
