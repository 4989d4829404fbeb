//! Greedy and beam-search generation with trigram blocking.

use serde::{Deserialize, Serialize};
use threadsum_tensor::{Tape, Tensor};

use crate::model::{ConversationInput, ForwardCtx, Model, ModelError};

/// Next-token scores for a prefix.
pub trait StepScorer {
    /// Log-probabilities over the vocabulary after `prefix` (which starts with bos).
    fn log_probs(&mut self, prefix: &[usize]) -> Result<Vec<f64>, ModelError>;
}

/// Re-runs the decoder over the full prefix against a fixed memory.
pub struct ModelScorer<'a> {
    model: &'a Model,
    memory: Tensor,
}

impl<'a> ModelScorer<'a> {
    pub fn new(model: &'a Model, memory: Tensor) -> Result<Self, ModelError> {
        if memory.is_empty() {
            return Err(ModelError::Empty("decoder memory"));
        }
        Ok(Self { model, memory })
    }

    /// Encodes `input` once and keeps the resulting memory.
    pub fn for_input(model: &'a Model, input: &ConversationInput) -> Result<Self, ModelError> {
        let mut tape = Tape::new();
        let enc = model.encode(&mut tape, input, &mut ForwardCtx::eval())?;
        Self::new(model, tape.value(enc.memory).clone())
    }
}

impl StepScorer for ModelScorer<'_> {
    fn log_probs(&mut self, prefix: &[usize]) -> Result<Vec<f64>, ModelError> {
        let mut tape = Tape::new();
        let mem = tape.constant(self.memory.clone());
        let logits = self.model.decoder_forward(&mut tape, prefix, mem, &mut ForwardCtx::eval())?;
        let t = tape.value(logits);
        Ok(log_softmax(t.row(t.rows() - 1)))
    }
}

pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodeConfig {
    pub beam_size: usize,
    /// Generated tokens, eos included.
    pub max_len: usize,
    pub length_penalty: f64,
    /// eos is forbidden before this many tokens.
    pub min_len: usize,
    pub block_trigrams: bool,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            beam_size: 4,
            max_len: 256,
            length_penalty: 1.0,
            min_len: 0,
            block_trigrams: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BeamHypothesis {
    /// Generated ids without the leading bos; ends with eos when finished.
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    pub finished: bool,
}

impl BeamHypothesis {
    /// `log_prob / len^penalty`.
    pub fn score(&self, length_penalty: f64) -> f64 {
        if self.tokens.is_empty() {
            return self.log_prob;
        }
        self.log_prob / (self.tokens.len() as f64).powf(length_penalty)
    }

    /// Tokens with a trailing eos removed.
    pub fn content(&self, eos: usize) -> &[usize] {
        match self.tokens.last() {
            Some(&t) if self.finished && t == eos => &self.tokens[..self.tokens.len() - 1],
            _ => &self.tokens,
        }
    }
}

/// True when appending `next` would repeat a trigram already in `tokens`.
pub fn creates_repeated_trigram(tokens: &[usize], next: usize) -> bool {
    let n = tokens.len();
    if n < 2 {
        return false;
    }
    let tri = [tokens[n - 2], tokens[n - 1], next];
    tokens.windows(3).any(|w| w == tri)
}

pub fn has_repeated_trigram(tokens: &[usize]) -> bool {
    let mut seen = std::collections::HashSet::new();
    tokens.windows(3).any(|w| !seen.insert(w))
}

fn allowed(cfg: &DecodeConfig, tokens: &[usize], next: usize, eos: usize) -> bool {
    if next == eos && tokens.len() < cfg.min_len {
        return false;
    }
    !(cfg.block_trigrams && creates_repeated_trigram(tokens, next))
}

fn check(cfg: &DecodeConfig) -> Result<(), ModelError> {
    if cfg.beam_size == 0 {
        return Err(ModelError::Config("beam_size must be at least 1".into()));
    }
    if cfg.max_len == 0 {
        return Err(ModelError::Config("max_len must be at least 1".into()));
    }
    Ok(())
}

/// Length-normalised beam search. Every live hypothesis keeps the blocking
/// invariant; the result is the best of finished and surviving hypotheses.
pub fn beam_search(
    scorer: &mut dyn StepScorer,
    bos: usize,
    eos: usize,
    cfg: &DecodeConfig,
) -> Result<BeamHypothesis, ModelError> {
    check(cfg)?;
    let mut live = vec![BeamHypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
        finished: false,
    }];
    let mut finished: Vec<BeamHypothesis> = Vec::new();
    for _ in 0..cfg.max_len {
        let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
        for (b, hyp) in live.iter().enumerate() {
            let mut prefix = Vec::with_capacity(hyp.tokens.len() + 1);
            prefix.push(bos);
            prefix.extend_from_slice(&hyp.tokens);
            let lp = scorer.log_probs(&prefix)?;
            for (v, &l) in lp.iter().enumerate() {
                if l.is_finite() && allowed(cfg, &hyp.tokens, v, eos) {
                    candidates.push((hyp.log_prob + l, b, v));
                }
            }
        }
        candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut next = Vec::with_capacity(cfg.beam_size);
        for (lp, b, v) in candidates {
            let mut tokens = live[b].tokens.clone();
            tokens.push(v);
            if v == eos {
                finished.push(BeamHypothesis {
                    tokens,
                    log_prob: lp,
                    finished: true,
                });
            } else {
                next.push(BeamHypothesis {
                    tokens,
                    log_prob: lp,
                    finished: false,
                });
            }
            if next.len() == cfg.beam_size {
                break;
            }
        }
        live = next;
        if live.is_empty() || finished.len() >= cfg.beam_size {
            break;
        }
    }
    let best = finished
        .into_iter()
        .chain(live)
        .reduce(|a, b| {
            if b.score(cfg.length_penalty) > a.score(cfg.length_penalty) {
                b
            } else {
                a
            }
        })
        .unwrap_or(BeamHypothesis {
            tokens: Vec::new(),
            log_prob: 0.0,
            finished: false,
        });
    Ok(best)
}

/// Arg-max decoding under the same eos and blocking rules as [`beam_search`].
pub fn greedy_decode(
    scorer: &mut dyn StepScorer,
    bos: usize,
    eos: usize,
    cfg: &DecodeConfig,
) -> Result<BeamHypothesis, ModelError> {
    check(cfg)?;
    let mut hyp = BeamHypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
        finished: false,
    };
    let mut prefix = vec![bos];
    while hyp.tokens.len() < cfg.max_len {
        let lp = scorer.log_probs(&prefix)?;
        let mut best: Option<(usize, f64)> = None;
        for (v, &l) in lp.iter().enumerate() {
            if l.is_finite() && allowed(cfg, &hyp.tokens, v, eos) && best.is_none_or(|(_, b)| l > b) {
                best = Some((v, l));
            }
        }
        let Some((v, l)) = best else { break };
        hyp.tokens.push(v);
        hyp.log_prob += l;
        prefix.push(v);
        if v == eos {
            hyp.finished = true;
            break;
        }
    }
    Ok(hyp)
}
