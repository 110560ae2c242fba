//! Autoregressive decoding: greedy argmax and length-normalised beam search.
//!
//! Both work against any [`StepScorer`], so the search logic is testable on
//! hand-built toy distributions as well as the real model.

use crate::error::{Error, Result};
use crate::tokenizer::{CLS, PAD, SEP, UNK};

/// Next-token log-probabilities for a prefix.
pub trait StepScorer {
    fn log_probs(&mut self, prefix: &[usize]) -> Result<Vec<f64>>;
}

/// Start, end and never-emitted token ids.
#[derive(Clone, Debug, PartialEq)]
pub struct DecodeTokens {
    pub start: usize,
    pub end: usize,
    pub banned: Vec<usize>,
}

impl Default for DecodeTokens {
    fn default() -> Self {
        DecodeTokens {
            start: CLS,
            end: SEP,
            banned: vec![UNK, CLS, PAD],
        }
    }
}

/// A decoded sequence. `tokens` holds content ids only (no start/end).
#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    /// Sum of log-probabilities of every emitted token, end token included.
    pub log_prob: f64,
    /// Whether the end token was emitted before the length cap.
    pub finished: bool,
}

/// `((5 + len) / 6)^alpha`.
pub fn length_penalty(len: usize, alpha: f64) -> f64 {
    ((5.0 + len as f64) / 6.0).powf(alpha)
}

fn emitted_len(h: &Hypothesis) -> usize {
    h.tokens.len() + usize::from(h.finished)
}

/// Allowed ids ordered by log-probability, ties to the lowest id.
fn ranked(lp: &[f64], banned: &[usize]) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..lp.len()).filter(|i| !banned.contains(i)).collect();
    ids.sort_by(|&a, &b| lp[b].total_cmp(&lp[a]).then(a.cmp(&b)));
    ids
}

/// Argmax decoding. `max_len` counts every position including the start
/// token, so at most `max_len − 1` tokens are emitted.
pub fn greedy_decode<S: StepScorer + ?Sized>(
    scorer: &mut S,
    special: &DecodeTokens,
    max_len: usize,
) -> Result<Hypothesis> {
    let mut prefix = vec![special.start];
    let mut log_prob = 0.0;
    while prefix.len() < max_len {
        let lp = scorer.log_probs(&prefix)?;
        let next = *ranked(&lp, &special.banned)
            .first()
            .ok_or_else(|| Error::Contract("every token is banned".into()))?;
        log_prob += lp[next];
        if next == special.end {
            return Ok(Hypothesis {
                tokens: prefix[1..].to_vec(),
                log_prob,
                finished: true,
            });
        }
        prefix.push(next);
    }
    Ok(Hypothesis {
        tokens: prefix[1..].to_vec(),
        log_prob,
        finished: false,
    })
}

/// Beam search keeping the global top-`beam` expansions by
/// `log_prob / length_penalty`. Hypotheses that reach `max_len` without an
/// end token are closed and compete with the finished ones.
pub fn beam_search<S: StepScorer + ?Sized>(
    scorer: &mut S,
    special: &DecodeTokens,
    beam: usize,
    max_len: usize,
    alpha: f64,
) -> Result<Hypothesis> {
    if beam == 0 {
        return Err(Error::Config("beam width must be at least 1".into()));
    }
    let score = |h: &Hypothesis| h.log_prob / length_penalty(emitted_len(h), alpha);
    let mut alive = vec![Hypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
        finished: false,
    }];
    let mut done: Vec<Hypothesis> = Vec::new();
    while !alive.is_empty() {
        let mut candidates = Vec::new();
        for h in alive.drain(..) {
            if h.tokens.len() + 1 >= max_len {
                done.push(h);
                continue;
            }
            let mut prefix = Vec::with_capacity(h.tokens.len() + 1);
            prefix.push(special.start);
            prefix.extend_from_slice(&h.tokens);
            let lp = scorer.log_probs(&prefix)?;
            for id in ranked(&lp, &special.banned).into_iter().take(beam) {
                let finished = id == special.end;
                let mut tokens = h.tokens.clone();
                if !finished {
                    tokens.push(id);
                }
                candidates.push(Hypothesis {
                    tokens,
                    log_prob: h.log_prob + lp[id],
                    finished,
                });
            }
        }
        candidates.sort_by(|a, b| score(b).total_cmp(&score(a)));
        candidates.truncate(beam);
        for c in candidates {
            if c.finished {
                done.push(c);
            } else {
                alive.push(c);
            }
        }
    }
    let mut best: Option<Hypothesis> = None;
    for h in done {
        if best.as_ref().map_or(true, |b| score(&h) > score(b)) {
            best = Some(h);
        }
    }
    best.ok_or_else(|| Error::Contract("beam search produced no hypothesis".into()))
}

/// In-place log-softmax of a logit row.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|x| (x - max).exp()).sum();
    let log_z = max + z.ln();
    logits.iter().map(|x| x - log_z).collect()
}

#[cfg(test)]
mod tests {
    use std::collections::hash_map::DefaultHasher;
    use std::hash::{Hash, Hasher};

    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    /// Pseudo-random but fixed distribution per prefix.
    struct Toy {
        seed: u64,
        vocab: usize,
        sharpness: f64,
        calls: usize,
    }

    impl StepScorer for Toy {
        fn log_probs(&mut self, prefix: &[usize]) -> Result<Vec<f64>> {
            self.calls += 1;
            let mut h = DefaultHasher::new();
            (self.seed, prefix).hash(&mut h);
            let mut rng = ChaCha8Rng::seed_from_u64(h.finish());
            let logits: Vec<f64> = (0..self.vocab).map(|_| rng.gen_range(-self.sharpness..self.sharpness)).collect();
            Ok(log_softmax(&logits))
        }
    }

    /// Fixed table keyed by prefix length.
    struct Table(Vec<Vec<f64>>);

    impl StepScorer for Table {
        fn log_probs(&mut self, prefix: &[usize]) -> Result<Vec<f64>> {
            Ok(log_softmax(&self.0[prefix.len() - 1]))
        }
    }

    fn toy_tokens() -> DecodeTokens {
        DecodeTokens {
            start: 3,
            end: 2,
            banned: vec![],
        }
    }

    fn toy(seed: u64) -> Toy {
        Toy {
            seed,
            vocab: 3,
            sharpness: 2.0,
            calls: 0,
        }
    }

    /// Every sequence the decoder could emit, with its log-probability.
    fn enumerate(scorer: &mut dyn StepScorer, t: &DecodeTokens, max_len: usize) -> Vec<Hypothesis> {
        let mut out = Vec::new();
        let mut stack = vec![(Vec::<usize>::new(), 0.0)];
        while let Some((tokens, lp_sum)) = stack.pop() {
            if tokens.len() + 1 >= max_len {
                out.push(Hypothesis { tokens, log_prob: lp_sum, finished: false });
                continue;
            }
            let mut prefix = vec![t.start];
            prefix.extend(&tokens);
            let lp = scorer.log_probs(&prefix).unwrap();
            for id in 0..lp.len() {
                if t.banned.contains(&id) {
                    continue;
                }
                if id == t.end {
                    out.push(Hypothesis { tokens: tokens.clone(), log_prob: lp_sum + lp[id], finished: true });
                } else {
                    let mut next = tokens.clone();
                    next.push(id);
                    stack.push((next, lp_sum + lp[id]));
                }
            }
        }
        out
    }

    #[test]
    fn uniform_logits_give_lowest_allowed_ids() {
        let mut t = Table(vec![vec![0.0; 6]; 10]);
        let h = greedy_decode(&mut t, &DecodeTokens::default(), 5).unwrap();
        assert!(h.tokens.is_empty() && h.finished);
        let mut row = vec![0.0; 6];
        row[SEP] = -1.0;
        let mut t = Table(vec![row; 10]);
        let h = greedy_decode(&mut t, &DecodeTokens::default(), 5).unwrap();
        assert_eq!(h.tokens, vec![4, 4, 4, 4]);
        assert!(!h.finished);
        let h = greedy_decode(&mut t, &DecodeTokens::default(), 1).unwrap();
        assert!(h.tokens.is_empty());
    }

    #[test]
    fn never_emits_banned_and_respects_cap() {
        for seed in 0..50 {
            let mut s = Toy { seed, vocab: 6, sharpness: 3.0, calls: 0 };
            for beam in [1, 2, 4] {
                let h = beam_search(&mut s, &DecodeTokens::default(), beam, 7, 0.6).unwrap();
                assert!(h.tokens.len() <= 6);
                assert!(!h.tokens.iter().any(|t| [UNK, CLS, PAD, SEP].contains(t)));
            }
        }
    }

    #[test]
    fn beam_one_is_greedy() {
        for seed in 0..200 {
            let mut s = Toy { seed, vocab: 5, sharpness: 2.0, calls: 0 };
            let t = DecodeTokens { start: 9, end: 4, banned: vec![1] };
            assert_eq!(
                beam_search(&mut s, &t, 1, 8, 0.6).unwrap(),
                greedy_decode(&mut s, &t, 8).unwrap()
            );
        }
    }

    #[test]
    fn exhaustive_beam_finds_global_argmax() {
        for seed in 0..50 {
            let mut s = toy(seed);
            let all = enumerate(&mut s, &toy_tokens(), 3);
            let best = all.iter().map(|h| h.log_prob).fold(f64::NEG_INFINITY, f64::max);
            let h = beam_search(&mut s, &toy_tokens(), 27, 3, 0.0).unwrap();
            assert_eq!(h.log_prob, best, "seed {seed}");
        }
    }

    #[test]
    fn beam_two_beats_greedy_trap() {
        // step 1: token 0 slightly favoured; after 0 the model is unsure,
        // after 1 it is confident about ending.
        struct Trap;
        impl StepScorer for Trap {
            fn log_probs(&mut self, prefix: &[usize]) -> Result<Vec<f64>> {
                Ok(match prefix {
                    [_] => vec![0.55f64.ln(), 0.45f64.ln(), f64::NEG_INFINITY],
                    [_, 0] => vec![0.34f64.ln(), 0.33f64.ln(), 0.33f64.ln()],
                    [_, 1] => vec![0.05f64.ln(), 0.05f64.ln(), 0.9f64.ln()],
                    _ => vec![0.1f64.ln(), 0.1f64.ln(), 0.8f64.ln()],
                })
            }
        }
        let t = toy_tokens();
        let greedy = greedy_decode(&mut Trap, &t, 3).unwrap();
        let beam = beam_search(&mut Trap, &t, 2, 3, 0.0).unwrap();
        assert_eq!(greedy.tokens, vec![0, 0]);
        assert_eq!(beam.tokens, vec![1]);
        assert!(beam.log_prob > greedy.log_prob);
    }

    #[test]
    fn wider_beam_scores_at_least_greedy() {
        for seed in 0..500 {
            let mut s = Toy { seed, vocab: 4, sharpness: 2.5, calls: 0 };
            let t = DecodeTokens { start: 7, end: 3, banned: vec![] };
            let one = beam_search(&mut s, &t, 1, 6, 0.0).unwrap();
            let two = beam_search(&mut s, &t, 2, 6, 0.0).unwrap();
            assert!(two.log_prob >= one.log_prob, "seed {seed}: {} < {}", two.log_prob, one.log_prob);
        }
    }

    #[test]
    fn zero_beam_is_rejected() {
        assert!(matches!(beam_search(&mut toy(0), &toy_tokens(), 0, 3, 0.0), Err(Error::Config(_))));
    }

    #[test]
    fn length_penalty_values() {
        assert_eq!(length_penalty(1, 0.6), 1.0);
        assert_eq!(length_penalty(7, 0.0), 1.0);
        assert!((length_penalty(7, 1.0) - 2.0).abs() < 1e-15);
    }
}
