//! Pretraining losses: next-token cross-entropy on the summary and a
//! pairwise "is this an earlier comment on my path" classifier.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use threadsum_tensor::{Tape, Tensor, Var};

use crate::conv::{ConversationTree, ThreadRelation};
use crate::model::{ConversationInput, ForwardCtx, Model, ModelError};

pub const PROB_FLOOR: f64 = 1e-7;

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error("thread prediction needs at least 2 utterances, got {0}")]
    TooFewUtterances(usize),
    #[error("summary is empty")]
    EmptySummary,
    #[error(transparent)]
    Model(#[from] ModelError),
}

impl From<threadsum_tensor::TensorError> for ObjectiveError {
    fn from(e: threadsum_tensor::TensorError) -> Self {
        Self::Model(e.into())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThreadPredSource {
    /// Token-encoder state at each utterance's bos position.
    TokenBos,
    /// Utterance-encoder output.
    UtteranceEnc,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    Sum,
    Mean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectiveConfig {
    pub lambda_thread_pred: f64,
    pub thread_pred_source: ThreadPredSource,
    pub thread_pred_reduction: Reduction,
    pub sample_fraction: f64,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            lambda_thread_pred: 1.0,
            thread_pred_source: ThreadPredSource::TokenBos,
            thread_pred_reduction: Reduction::Sum,
            sample_fraction: 0.2,
        }
    }
}

impl ObjectiveConfig {
    /// Summary loss only.
    pub fn clm_only() -> Self {
        Self {
            lambda_thread_pred: 0.0,
            ..Self::default()
        }
    }
}

/// Sampled utterances, candidate pairs and their ancestor labels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ThreadPairBatch {
    pub sampled: Vec<usize>,
    /// `(i, j)` asks whether `u_j` is a strict ancestor of `u_i`.
    pub pairs: Vec<(usize, usize)>,
    pub labels: Vec<bool>,
}

impl ThreadPairBatch {
    /// Pairs with at least one sampled member, self-pairs excluded, in row-major order.
    pub fn from_sampled(n: usize, relations: &[ThreadRelation], sampled: &[usize]) -> Self {
        let mut is_sampled = vec![false; n];
        for &s in sampled {
            is_sampled[s] = true;
        }
        let mut pairs = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            for j in 0..n {
                if i != j && (is_sampled[i] || is_sampled[j]) {
                    pairs.push((i, j));
                    labels.push(matches!(relations[i * n + j], ThreadRelation::SamePath(d) if d > 0));
                }
            }
        }
        let mut sampled = sampled.to_vec();
        sampled.sort_unstable();
        Self { sampled, pairs, labels }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// `max(1, round(fraction * n))`.
pub fn sample_size(n: usize, fraction: f64) -> usize {
    ((fraction * n as f64).round() as usize).clamp(1, n.max(1))
}

pub fn sample_pairs_from_relations(
    n: usize,
    relations: &[ThreadRelation],
    fraction: f64,
    seed: u64,
) -> Result<ThreadPairBatch, ObjectiveError> {
    if n < 2 {
        return Err(ObjectiveError::TooFewUtterances(n));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sampled = rand::seq::index::sample(&mut rng, n, sample_size(n, fraction)).into_vec();
    Ok(ThreadPairBatch::from_sampled(n, relations, &sampled))
}

/// Samples 20% of the utterances (at least one) and labels their pairs.
pub fn sample_thread_pairs(tree: &ConversationTree, seed: u64) -> Result<ThreadPairBatch, ObjectiveError> {
    sample_pairs_from_relations(tree.len(), &tree.relation_matrix(), 0.2, seed)
}

/// Mean token cross-entropy.
pub fn clm_loss(tape: &mut Tape, logits: Var, targets: &[usize]) -> Result<Var, ObjectiveError> {
    Ok(tape.cross_entropy(logits, targets)?)
}

/// `sigmoid((v_i W_a) . (v_j W_b))` evaluated directly.
pub fn pair_probability(v: &Tensor, w_a: &Tensor, w_b: &Tensor, i: usize, j: usize) -> f64 {
    let d = v.cols();
    let proj = |row: &[f64], w: &Tensor| -> Vec<f64> {
        (0..w.cols()).map(|c| (0..d).map(|r| row[r] * w.at(r, c)).sum()).collect()
    };
    let a = proj(v.row(i), w_a);
    let b = proj(v.row(j), w_b);
    let s: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
    1.0 / (1.0 + (-s).exp())
}

/// `[n, n]` pair probabilities for all utterance pairs.
pub fn pair_probabilities(tape: &mut Tape, v: Var, w_a: Var, w_b: Var) -> Result<Var, ObjectiveError> {
    let a = tape.matmul(v, w_a)?;
    let b = tape.matmul(v, w_b)?;
    let s = tape.matmul_bt(a, b)?;
    Ok(tape.sigmoid(s))
}

#[derive(Clone, Copy, Debug)]
pub struct ThreadPredLoss {
    pub loss: Var,
    /// Probabilities that fell outside `[PROB_FLOOR, 1 - PROB_FLOOR]`.
    pub clamped: usize,
}

/// Binary cross-entropy over the candidate pairs. `probs` is `[n, n]`.
pub fn thread_pred_loss(
    tape: &mut Tape,
    batch: &ThreadPairBatch,
    probs: Var,
    reduction: Reduction,
) -> Result<ThreadPredLoss, ObjectiveError> {
    let n = tape.value(probs).cols();
    let idx: Vec<usize> = batch.pairs.iter().map(|&(i, j)| i * n + j).collect();
    let p = tape.gather(probs, &idx)?;
    let clamped = tape
        .value(p)
        .data()
        .iter()
        .filter(|&&x| !(PROB_FLOOR..=1.0 - PROB_FLOOR).contains(&x))
        .count();
    let p = tape.clamp(p, PROB_FLOOR, 1.0 - PROB_FLOOR);
    let m = idx.len();
    let y: Vec<f64> = batch.labels.iter().map(|&l| f64::from(u8::from(l))).collect();
    let not_y: Vec<f64> = y.iter().map(|v| 1.0 - v).collect();
    let y = tape.constant(Tensor::vector(y));
    let not_y = tape.constant(Tensor::vector(not_y));
    let ones = tape.constant(Tensor::ones(&[m]));
    let log_p = tape.log(p);
    let one_minus = tape.sub(ones, p)?;
    let log_q = tape.log(one_minus);
    let pos = tape.mul(y, log_p)?;
    let neg = tape.mul(not_y, log_q)?;
    let both = tape.add(pos, neg)?;
    let s = tape.sum(both);
    let scale = match reduction {
        Reduction::Sum => -1.0,
        Reduction::Mean => -1.0 / m as f64,
    };
    Ok(ThreadPredLoss {
        loss: tape.scale(s, scale),
        clamped,
    })
}

/// Plain-value form of the summed pair loss.
pub fn thread_pred_loss_value(labels: &[bool], probs: &[f64]) -> f64 {
    labels
        .iter()
        .zip(probs)
        .map(|(&l, &p)| {
            let p = p.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR);
            if l {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum()
}

/// `clm + lambda * tp`; `tp` may be absent when `lambda` is zero.
pub fn total_loss(tape: &mut Tape, clm: Var, tp: Option<Var>, lambda: f64) -> Result<Var, ObjectiveError> {
    match tp {
        Some(tp) if lambda != 0.0 => {
            let w = tape.scale(tp, lambda);
            Ok(tape.add(clm, w)?)
        }
        _ => Ok(clm),
    }
}

/// One conversation with its tokenised target summary.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub input: ConversationInput,
    /// Summary ids ending with eos.
    pub targets: Vec<usize>,
    /// `[bos] + targets[..len - 1]`.
    pub decoder_input: Vec<usize>,
}

impl Example {
    pub fn new(input: ConversationInput, targets: Vec<usize>, bos: usize) -> Result<Self, ObjectiveError> {
        if targets.is_empty() {
            return Err(ObjectiveError::EmptySummary);
        }
        let mut decoder_input = Vec::with_capacity(targets.len());
        decoder_input.push(bos);
        decoder_input.extend_from_slice(&targets[..targets.len() - 1]);
        Ok(Self {
            input,
            targets,
            decoder_input,
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LossBreakdown {
    pub total: Var,
    pub clm: f64,
    pub thread_pred: Option<f64>,
    pub clamped: usize,
}

/// Forward pass and combined loss for one example. `pair_seed` drives the
/// utterance sample; single-utterance conversations contribute no pair loss.
pub fn example_loss(
    model: &Model,
    tape: &mut Tape,
    example: &Example,
    cfg: &ObjectiveConfig,
    pair_seed: u64,
    ctx: &mut ForwardCtx,
) -> Result<LossBreakdown, ObjectiveError> {
    let enc = model.encode(tape, &example.input, ctx)?;
    let logits = model.decoder_forward(tape, &example.decoder_input, enc.memory, ctx)?;
    let clm = clm_loss(tape, logits, &example.targets)?;
    let clm_value = tape.value(clm).data()[0];
    let n = example.input.len();
    if cfg.lambda_thread_pred == 0.0 || n < 2 {
        return Ok(LossBreakdown {
            total: clm,
            clm: clm_value,
            thread_pred: None,
            clamped: 0,
        });
    }
    let batch = sample_pairs_from_relations(n, &example.input.relations, cfg.sample_fraction, pair_seed)?;
    let v = match cfg.thread_pred_source {
        ThreadPredSource::TokenBos => enc.bos_states,
        ThreadPredSource::UtteranceEnc => enc.utterance_states,
    };
    let (a, b) = model.thread_pred_ids();
    let w_a = tape.param(model.store(), a);
    let w_b = tape.param(model.store(), b);
    let probs = pair_probabilities(tape, v, w_a, w_b)?;
    let tp = thread_pred_loss(tape, &batch, probs, cfg.thread_pred_reduction)?;
    let tp_value = tape.value(tp.loss).data()[0];
    let total = total_loss(tape, clm, Some(tp.loss), cfg.lambda_thread_pred)?;
    Ok(LossBreakdown {
        total,
        clm: clm_value,
        thread_pred: Some(tp_value),
        clamped: tp.clamped,
    })
}
