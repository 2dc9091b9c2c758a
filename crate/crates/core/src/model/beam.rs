//! Beam search over any model exposing next-token log-probabilities.
//!
//! Selection is fully deterministic: candidates are ordered by score
//! descending with ties broken by lexicographically smaller token sequence,
//! finished hypotheses retire out of the live beam, and the final ranking
//! divides scores by `len^alpha`.

use crate::Result;

/// Anything that can score the next token: returns log-probabilities over
/// the vocabulary given a sos-prefixed token prefix.
pub trait StepScorer {
    fn vocab_size(&self) -> usize;
    fn step(&mut self, prefix: &[u32]) -> Result<Vec<f64>>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    /// Generated tokens, excluding sos, including eos when finished.
    pub tokens: Vec<u32>,
    /// Sum of token log-probabilities.
    pub score: f64,
}

impl Hypothesis {
    pub fn normalized_score(&self, length_penalty: f64) -> f64 {
        self.score / (self.tokens.len().max(1) as f64).powf(length_penalty)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BeamParams {
    pub beam_size: usize,
    /// Maximum number of generated tokens (eos included).
    pub max_len: usize,
    /// Exponent `alpha` of the length normalization at final ranking.
    pub length_penalty: f64,
    pub sos_id: u32,
    pub eos_id: u32,
}

impl BeamParams {
    pub fn new(beam_size: usize, max_len: usize) -> Self {
        Self {
            beam_size,
            max_len,
            length_penalty: 0.6,
            sos_id: crate::tokenizer::SOS,
            eos_id: crate::tokenizer::EOS,
        }
    }

    /// Default decoding budget for `t_enc` encoded frames: `2 + t_enc / 2`.
    pub fn default_max_len(t_enc: usize) -> usize {
        2 + t_enc / 2
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeOutcome {
    pub hypothesis: Hypothesis,
    /// False when the search hit `max_len` without any finished hypothesis
    /// and had to fall back to the best unfinished one.
    pub finished: bool,
}

/// Compare by score descending, then by token sequence ascending.
fn candidate_order(a: &Hypothesis, b: &Hypothesis) -> std::cmp::Ordering {
    b.score.total_cmp(&a.score).then_with(|| a.tokens.cmp(&b.tokens))
}

fn normalized_order(alpha: f64) -> impl Fn(&Hypothesis, &Hypothesis) -> std::cmp::Ordering {
    move |a, b| {
        b.normalized_score(alpha)
            .total_cmp(&a.normalized_score(alpha))
            .then_with(|| a.tokens.cmp(&b.tokens))
    }
}

pub fn beam_search(scorer: &mut dyn StepScorer, params: &BeamParams) -> Result<DecodeOutcome> {
    if params.beam_size == 0 || params.max_len == 0 {
        return Err(crate::Error::Config(format!(
            "beam_size {} and max_len {} must both be positive",
            params.beam_size, params.max_len
        )));
    }
    let vocab = scorer.vocab_size();
    let mut live = vec![Hypothesis { tokens: Vec::new(), score: 0.0 }];
    let mut finished: Vec<Hypothesis> = Vec::new();
    let mut prefix = Vec::new();

    for _ in 0..params.max_len {
        let mut candidates = Vec::with_capacity(live.len() * vocab);
        for hyp in &live {
            prefix.clear();
            prefix.push(params.sos_id);
            prefix.extend_from_slice(&hyp.tokens);
            let log_probs = scorer.step(&prefix)?;
            if log_probs.len() != vocab {
                return Err(crate::Error::shape(
                    "beam_search",
                    format!("scorer returned {} scores for vocab {vocab}", log_probs.len()),
                ));
            }
            for (tok, lp) in log_probs.iter().enumerate() {
                let mut tokens = Vec::with_capacity(hyp.tokens.len() + 1);
                tokens.extend_from_slice(&hyp.tokens);
                tokens.push(tok as u32);
                candidates.push(Hypothesis { tokens, score: hyp.score + lp });
            }
        }
        candidates.sort_by(candidate_order);
        // Only candidates ranked inside the beam window may retire: an eos
        // continuation that would not have survived the beam must not sneak
        // into the finished pool.
        live.clear();
        for cand in candidates.into_iter().take(params.beam_size) {
            if cand.tokens.last() == Some(&params.eos_id) {
                finished.push(cand);
            } else {
                live.push(cand);
            }
        }
        if live.is_empty() {
            break;
        }
    }

    let order = normalized_order(params.length_penalty);
    if finished.is_empty() {
        live.sort_by(&order);
        let hypothesis = live.into_iter().next().ok_or_else(|| {
            crate::Error::Numeric("beam search ended with no hypotheses at all".to_string())
        })?;
        return Ok(DecodeOutcome { hypothesis, finished: false });
    }
    finished.sort_by(&order);
    Ok(DecodeOutcome { hypothesis: finished.into_iter().next().unwrap(), finished: true })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Fixed tabular model: log-probs depend only on the prefix length.
    struct TableScorer {
        rows: Vec<Vec<f64>>,
    }

    impl StepScorer for TableScorer {
        fn vocab_size(&self) -> usize {
            self.rows[0].len()
        }

        fn step(&mut self, prefix: &[u32]) -> Result<Vec<f64>> {
            Ok(self.rows[(prefix.len() - 1).min(self.rows.len() - 1)].clone())
        }
    }

    fn params(beam: usize, max_len: usize) -> BeamParams {
        BeamParams { length_penalty: 0.0, sos_id: 1, eos_id: 2, beam_size: beam, max_len }
    }

    #[test]
    fn greedy_follows_argmax() {
        // Vocab 4; argmax path: token 3, then eos (id 2).
        let mut scorer = TableScorer {
            rows: vec![
                vec![-3.0, -3.0, -2.0, -0.5],
                vec![-3.0, -3.0, -0.3, -2.0],
            ],
        };
        let out = beam_search(&mut scorer, &params(1, 10)).unwrap();
        assert!(out.finished);
        assert_eq!(out.hypothesis.tokens, vec![3, 2]);
        assert!((out.hypothesis.score - (-0.8)).abs() < 1e-12);
    }

    #[test]
    fn ties_prefer_lexicographically_smaller_tokens() {
        // All tokens equally likely and eos carries the smallest id: the tie
        // break selects it first and the single-token hypothesis wins the
        // final ranking over any longer continuation.
        let lp = (1.0f64 / 3.0).ln();
        let mut scorer = TableScorer { rows: vec![vec![lp; 3]] };
        let mut p = params(2, 3);
        p.eos_id = 0;
        let out = beam_search(&mut scorer, &p).unwrap();
        assert!(out.finished);
        assert_eq!(out.hypothesis.tokens, vec![0]);
        assert!((out.hypothesis.score - lp).abs() < 1e-12);
    }

    #[test]
    fn no_finished_hypothesis_is_flagged() {
        // Eos never makes it into the beam window; max_len 2 must end
        // unfinished on the argmax path.
        let mut scorer = TableScorer {
            rows: vec![vec![-1.0, -1.0, -1e30, -0.1]],
        };
        let out = beam_search(&mut scorer, &params(2, 2)).unwrap();
        assert!(!out.finished);
        assert_eq!(out.hypothesis.tokens, vec![3, 3]);
    }

    #[test]
    fn zero_beam_rejected() {
        let mut scorer = TableScorer { rows: vec![vec![0.0; 3]] };
        assert!(beam_search(&mut scorer, &params(0, 4)).is_err());
    }

    #[test]
    fn default_max_len_follows_encoder_length() {
        assert_eq!(BeamParams::default_max_len(25), 14);
        assert_eq!(BeamParams::default_max_len(0), 2);
    }
}
