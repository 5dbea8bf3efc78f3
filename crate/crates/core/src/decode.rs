//! Beam-search and greedy decoding over any next-token scorer.

use crate::data::vocab::{BOS_ID, EOS_ID};
use crate::error::{Error, Result};
use crate::model::{FvpModel, Memory};

/// Next-token distribution source. Prefixes always start with the begin
/// token; implementations return one log-probability per vocabulary id.
pub trait SequenceScorer {
    fn vocab_size(&self) -> usize;
    fn next_log_probs(&self, prefix: &[u32]) -> Result<Vec<f64>>;
}

/// Scorer view of a model bound to one record's encoded memory.
pub struct ModelScorer<'a> {
    pub model: &'a FvpModel,
    pub memory: Memory,
}

impl SequenceScorer for ModelScorer<'_> {
    fn vocab_size(&self) -> usize {
        self.model.config.vocab_size
    }
    fn next_log_probs(&self, prefix: &[u32]) -> Result<Vec<f64>> {
        self.model.decode_log_probs(&self.memory, prefix)
    }
}

/// Partial or finished decode: tokens start with the begin token and
/// finished sequences end with the end token.
#[derive(Debug, Clone, PartialEq)]
pub struct BeamHypothesis {
    pub tokens: Vec<u32>,
    pub log_prob: f64,
    pub finished: bool,
}

impl BeamHypothesis {
    fn start() -> Self {
        BeamHypothesis {
            tokens: vec![BOS_ID],
            log_prob: 0.0,
            finished: false,
        }
    }

    /// Generated tokens, excluding the begin token.
    pub fn generated_len(&self) -> usize {
        self.tokens.len().saturating_sub(1)
    }

    /// Completion ids without begin/end framing.
    pub fn completion(&self) -> &[u32] {
        let body = &self.tokens[1..];
        match body.last() {
            Some(&EOS_ID) => &body[..body.len() - 1],
            _ => body,
        }
    }

    /// log-probability divided by generated length to the power alpha.
    pub fn normalized_score(&self, alpha: f64) -> f64 {
        let len = self.generated_len().max(1) as f64;
        self.log_prob / len.powf(alpha)
    }
}

#[derive(Debug, Clone)]
pub struct BeamSearchOutcome {
    pub best: BeamHypothesis,
    /// Every finished hypothesis examined, in retirement order.
    pub finished: Vec<BeamHypothesis>,
}

/// Standard beam search: expand every live hypothesis over the full
/// vocabulary, keep the top `beam` candidates by cumulative
/// log-probability, set finished hypotheses aside, and at `max_len`
/// force the end token (with its log-probability) so every hypothesis
/// terminates. The final pick maximizes log-probability normalized by
/// generated length to the power `alpha`.
pub fn beam_search(
    scorer: &dyn SequenceScorer,
    beam: usize,
    alpha: f64,
    max_len: usize,
) -> Result<BeamSearchOutcome> {
    if beam < 1 {
        return Err(Error::config(format!("beam size {} must be >= 1", beam)));
    }
    if max_len < 1 {
        return Err(Error::config("max_len must be >= 1"));
    }
    let vocab = scorer.vocab_size();
    let mut live = vec![BeamHypothesis::start()];
    let mut finished: Vec<BeamHypothesis> = Vec::new();

    for step in 0..max_len {
        if live.is_empty() {
            break;
        }
        let force_eos = step + 1 == max_len;
        // (cumulative log-prob, live index, token)
        let mut candidates: Vec<(f64, usize, u32)> = Vec::new();
        for (i, hyp) in live.iter().enumerate() {
            let log_probs = scorer.next_log_probs(&hyp.tokens)?;
            if log_probs.len() != vocab {
                return Err(Error::shape(format!(
                    "scorer returned {} log-probs for vocab {}",
                    log_probs.len(),
                    vocab
                )));
            }
            if force_eos {
                candidates.push((hyp.log_prob + log_probs[EOS_ID as usize], i, EOS_ID));
            } else {
                for (tok, lp) in log_probs.iter().enumerate() {
                    candidates.push((hyp.log_prob + lp, i, tok as u32));
                }
            }
        }
        candidates.sort_by(|a, b| {
            b.0.total_cmp(&a.0)
                .then_with(|| a.1.cmp(&b.1))
                .then_with(|| a.2.cmp(&b.2))
        });
        candidates.truncate(beam);

        let mut next_live = Vec::with_capacity(beam);
        for (log_prob, idx, token) in candidates {
            let mut tokens = live[idx].tokens.clone();
            tokens.push(token);
            let hyp = BeamHypothesis {
                tokens,
                log_prob,
                finished: token == EOS_ID,
            };
            if hyp.finished {
                finished.push(hyp);
            } else {
                next_live.push(hyp);
            }
        }
        live = next_live;
    }

    let best = finished
        .iter()
        .fold(None::<&BeamHypothesis>, |acc, h| match acc {
            None => Some(h),
            Some(best) if h.normalized_score(alpha) > best.normalized_score(alpha) => Some(h),
            Some(best) => Some(best),
        })
        .cloned()
        .ok_or_else(|| Error::numeric("beam search: no finished hypothesis"))?;
    Ok(BeamSearchOutcome { best, finished })
}

/// Greedy decoding: the argmax token at every step, end token forced at
/// `max_len`. Ties break toward the lowest token id, matching the beam
/// search candidate ordering.
pub fn greedy_decode(scorer: &dyn SequenceScorer, max_len: usize) -> Result<BeamHypothesis> {
    if max_len < 1 {
        return Err(Error::config("max_len must be >= 1"));
    }
    let mut hyp = BeamHypothesis::start();
    for step in 0..max_len {
        let log_probs = scorer.next_log_probs(&hyp.tokens)?;
        let (token, lp) = if step + 1 == max_len {
            (EOS_ID, log_probs[EOS_ID as usize])
        } else {
            let mut best = (0u32, f64::NEG_INFINITY);
            for (tok, &lp) in log_probs.iter().enumerate() {
                if lp > best.1 {
                    best = (tok as u32, lp);
                }
            }
            best
        };
        hyp.tokens.push(token);
        hyp.log_prob += lp;
        if token == EOS_ID {
            hyp.finished = true;
            break;
        }
    }
    Ok(hyp)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::log_softmax;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Deterministic random scorer: the distribution after a prefix is a
    /// pure function of (seed, prefix).
    struct TableScorer {
        seed: u64,
        vocab: usize,
    }

    impl SequenceScorer for TableScorer {
        fn vocab_size(&self) -> usize {
            self.vocab
        }
        fn next_log_probs(&self, prefix: &[u32]) -> Result<Vec<f64>> {
            let mut h: u64 = self.seed ^ 0x9e3779b97f4a7c15;
            for &t in prefix {
                h ^= t as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
            let mut rng = ChaCha8Rng::seed_from_u64(h);
            let logits: Vec<f64> = (0..self.vocab)
                .map(|_| rng.random_range(-3.0..3.0))
                .collect();
            Ok(log_softmax(&logits))
        }
    }

    /// Rigged scorer: the end token carries almost all mass immediately.
    struct StopScorer;
    impl SequenceScorer for StopScorer {
        fn vocab_size(&self) -> usize {
            8
        }
        fn next_log_probs(&self, _prefix: &[u32]) -> Result<Vec<f64>> {
            let mut logits = vec![0.0; 8];
            logits[EOS_ID as usize] = 12.0;
            Ok(log_softmax(&logits))
        }
    }

    fn exhaustive_best(scorer: &dyn SequenceScorer, alpha: f64, max_len: usize) -> f64 {
        // every sequence of non-eos tokens followed by eos, length <= max_len
        let vocab = scorer.vocab_size() as u32;
        let mut best = f64::NEG_INFINITY;
        let mut stack: Vec<Vec<u32>> = vec![vec![BOS_ID]];
        while let Some(prefix) = stack.pop() {
            let lp = score_sequence(scorer, &prefix);
            let generated = prefix.len(); // after appending eos below
            let eos_lp = lp + scorer.next_log_probs(&prefix).unwrap()[EOS_ID as usize];
            let norm = eos_lp / (generated as f64).powf(alpha);
            if norm > best {
                best = norm;
            }
            if prefix.len() < max_len {
                for t in 0..vocab {
                    if t == EOS_ID {
                        continue;
                    }
                    let mut next = prefix.clone();
                    next.push(t);
                    stack.push(next);
                }
            }
        }
        best
    }

    fn score_sequence(scorer: &dyn SequenceScorer, tokens: &[u32]) -> f64 {
        let mut lp = 0.0;
        for i in 1..tokens.len() {
            lp += scorer.next_log_probs(&tokens[..i]).unwrap()[tokens[i] as usize];
        }
        lp
    }

    #[test]
    fn beam_one_equals_greedy() {
        for seed in 0..20u64 {
            let scorer = TableScorer { seed, vocab: 8 };
            let beam = beam_search(&scorer, 1, 1.0, 4).unwrap();
            let greedy = greedy_decode(&scorer, 4).unwrap();
            assert_eq!(beam.best.tokens, greedy.tokens, "seed {}", seed);
            assert_eq!(beam.best.log_prob.to_bits(), greedy.log_prob.to_bits());
        }
    }

    #[test]
    fn immediate_stop_gives_empty_completion() {
        let out = beam_search(&StopScorer, 5, 1.0, 8).unwrap();
        assert_eq!(out.best.tokens, vec![BOS_ID, EOS_ID]);
        assert!(out.best.completion().is_empty());
    }

    #[test]
    fn wide_beam_matches_exhaustive_search() {
        // beam = vocab explores everything that matters at these sizes
        let mut matches = 0;
        let total = 30;
        for seed in 0..total {
            let scorer = TableScorer {
                seed: seed as u64,
                vocab: 8,
            };
            let out = beam_search(&scorer, 8, 1.0, 4).unwrap();
            let best = exhaustive_best(&scorer, 1.0, 4);
            if (out.best.normalized_score(1.0) - best).abs() < 1e-12 {
                matches += 1;
            }
        }
        assert!(matches * 100 >= total * 95, "{}/{}", matches, total);
    }

    #[test]
    fn selected_hypothesis_maximizes_normalized_score_among_finished() {
        for seed in 0..10u64 {
            let scorer = TableScorer { seed, vocab: 8 };
            let out = beam_search(&scorer, 5, 1.0, 6).unwrap();
            for h in &out.finished {
                assert!(out.best.normalized_score(1.0) >= h.normalized_score(1.0));
            }
        }
    }

    #[test]
    fn beam_not_worse_than_greedy_at_equal_length() {
        for seed in 0..30u64 {
            let scorer = TableScorer { seed, vocab: 8 };
            let beam = beam_search(&scorer, 5, 1.0, 6).unwrap();
            let greedy = greedy_decode(&scorer, 6).unwrap();
            if beam.best.generated_len() == greedy.generated_len() {
                assert!(
                    beam.best.log_prob >= greedy.log_prob - 1e-12,
                    "seed {}",
                    seed
                );
            }
            assert!(beam.best.normalized_score(1.0) >= greedy.normalized_score(1.0) - 1e-12);
        }
    }

    #[test]
    fn invalid_beam_rejected() {
        assert!(matches!(
            beam_search(&StopScorer, 0, 1.0, 4),
            Err(Error::Config(_))
        ));
    }
}
