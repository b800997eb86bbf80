//! Autoregressive decoding over any next-token scorer.

use std::cmp::Ordering;

use crate::data::vocab::{BOS, EOS};
use crate::error::{Error, Result};

/// Source of next-token log-probabilities given a BOS-led prefix.
pub trait TokenScorer {
    fn vocab_size(&self) -> usize;
    /// Maximum generated tokens, EOS included.
    fn max_target_len(&self) -> usize;
    fn next_log_probs(&self, prefix: &[usize]) -> Result<Vec<f64>>;
}

impl<T: TokenScorer + ?Sized> TokenScorer for &T {
    fn vocab_size(&self) -> usize {
        (**self).vocab_size()
    }
    fn max_target_len(&self) -> usize {
        (**self).max_target_len()
    }
    fn next_log_probs(&self, prefix: &[usize]) -> Result<Vec<f64>> {
        (**self).next_log_probs(prefix)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Decoded {
    /// Generated tokens without BOS/EOS.
    pub tokens: Vec<usize>,
    /// `false` when the length limit was hit before EOS.
    pub terminated: bool,
    /// Sum of log-probabilities of the generated tokens (EOS included when emitted).
    pub log_prob: f64,
}

impl Decoded {
    /// Length-normalized score used to rank finished hypotheses.
    pub fn score(&self) -> f64 {
        let n = self.tokens.len() + usize::from(self.terminated);
        if n == 0 {
            0.0
        } else {
            self.log_prob / n as f64
        }
    }
}

fn argmax(xs: &[f64]) -> usize {
    // lowest index wins ties
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Picks the most likely token at every step until EOS or the length limit.
pub fn decode_greedy<S: TokenScorer>(scorer: &S) -> Result<Decoded> {
    let mut prefix = vec![BOS];
    let mut log_prob = 0.0;
    for _ in 0..scorer.max_target_len() {
        let lp = scorer.next_log_probs(&prefix)?;
        let next = argmax(&lp);
        log_prob += lp[next];
        if next == EOS {
            return Ok(Decoded {
                tokens: prefix[1..].to_vec(),
                terminated: true,
                log_prob,
            });
        }
        prefix.push(next);
    }
    Ok(Decoded {
        tokens: prefix[1..].to_vec(),
        terminated: false,
        log_prob,
    })
}

struct Candidate {
    parent: usize,
    token: usize,
    log_prob: f64,
}

/// Beam search ranked by length-normalized log-probability.
///
/// Each step keeps the `beam` best expansions; those ending in EOS retire to
/// the finished pool and the rest stay alive, so `beam == 1` walks exactly
/// the greedy path.
pub fn decode_beam<S: TokenScorer>(scorer: &S, beam: usize) -> Result<Decoded> {
    if beam < 1 {
        return Err(Error::Argument("beam width must be at least 1".into()));
    }
    let mut alive: Vec<(Vec<usize>, f64)> = vec![(vec![BOS], 0.0)];
    let mut finished: Vec<Decoded> = Vec::new();
    for _ in 0..scorer.max_target_len() {
        if alive.is_empty() {
            break;
        }
        let mut cands = Vec::with_capacity(alive.len() * scorer.vocab_size());
        for (i, (prefix, lp)) in alive.iter().enumerate() {
            let next = scorer.next_log_probs(prefix)?;
            cands.extend(next.iter().enumerate().map(|(t, &l)| Candidate {
                parent: i,
                token: t,
                log_prob: lp + l,
            }));
        }
        // all alive prefixes share one length, so raw log-prob ranks them
        cands.sort_by(|a, b| {
            b.log_prob
                .partial_cmp(&a.log_prob)
                .unwrap_or(Ordering::Equal)
                .then(a.parent.cmp(&b.parent))
                .then(a.token.cmp(&b.token))
        });
        let mut next_alive = Vec::with_capacity(beam);
        for c in cands.into_iter().take(beam) {
            let prefix = &alive[c.parent].0;
            if c.token == EOS {
                finished.push(Decoded {
                    tokens: prefix[1..].to_vec(),
                    terminated: true,
                    log_prob: c.log_prob,
                });
            } else {
                let mut p = prefix.clone();
                p.push(c.token);
                next_alive.push((p, c.log_prob));
            }
        }
        alive = next_alive;
    }
    finished.extend(alive.into_iter().map(|(p, lp)| Decoded {
        tokens: p[1..].to_vec(),
        terminated: false,
        log_prob: lp,
    }));
    let mut best = finished.swap_remove(0);
    for d in finished {
        if d.score() > best.score() {
            best = d;
        }
    }
    Ok(best)
}
