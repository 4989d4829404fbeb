//! AdamW with linear decay, gradient accumulation and resumable checkpoints.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use threadsum_tensor::{Checkpoint, ParamStore, Tape, Tensor, TensorError};

use crate::corpus::{tokenize_summary, tokenize_utterance, CorpusError, Tokenizer, TrainingInstance};
use crate::model::{ConversationInput, ForwardCtx, Model, ModelConfig, ModelError};
use crate::objectives::{example_loss, Example, ObjectiveConfig, ObjectiveError};
use crate::seed;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite {what} at step {step}")]
    NonFinite { step: u64, what: &'static str },
    #[error("no training examples")]
    EmptyData,
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// `peak * (1 - step / total)`, zero from `total` on.
pub fn lr_at(step: u64, peak: f64, total: u64) -> f64 {
    if total == 0 || step >= total {
        return 0.0;
    }
    peak * (1.0 - step as f64 / total as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay, applied to parameters with two or more axes only.
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub config: AdamWConfig,
}

impl OptimizerState {
    pub fn new(store: &ParamStore, config: AdamWConfig) -> Self {
        let zeros = || store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect::<Vec<_>>();
        Self {
            step: 0,
            m: zeros(),
            v: zeros(),
            config,
        }
    }
}

/// One bias-corrected AdamW update from the gradients held in `store`.
pub fn apply_adamw(state: &mut OptimizerState, store: &mut ParamStore, lr: f64) {
    state.step += 1;
    let c = &state.config;
    let t = state.step as i32;
    let bc1 = 1.0 - c.beta1.powi(t);
    let bc2 = 1.0 - c.beta2.powi(t);
    for ((p, m), v) in store.iter_mut().zip(&mut state.m).zip(&mut state.v) {
        let decay = if p.value.ndim() >= 2 { c.weight_decay } else { 0.0 };
        let g = p.grad.data();
        let (m, v) = (m.data_mut(), v.data_mut());
        for (k, w) in p.value.data_mut().iter_mut().enumerate() {
            m[k] = c.beta1 * m[k] + (1.0 - c.beta1) * g[k];
            v[k] = c.beta2 * v[k] + (1.0 - c.beta2) * g[k] * g[k];
            let mhat = m[k] / bc1;
            let vhat = v[k] / bc2;
            *w -= lr * (mhat / (vhat.sqrt() + c.eps) + decay * *w);
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub peak_lr: f64,
    pub total_steps: u64,
    /// Micro-batches (one conversation each) per optimizer step.
    pub accumulation: usize,
    pub seed: u64,
    /// Steps between checkpoints; 0 disables periodic saving.
    pub checkpoint_every: u64,
    /// Global gradient-norm cap; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub adamw: AdamWConfig,
    pub objective: ObjectiveConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            peak_lr: 5e-5,
            total_steps: 500_000,
            accumulation: 256,
            seed: 0,
            checkpoint_every: 10_000,
            clip_norm: Some(1.0),
            adamw: AdamWConfig::default(),
            objective: ObjectiveConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.accumulation == 0 {
            return Err(TrainError::Config("accumulation must be at least 1".into()));
        }
        if !(self.peak_lr >= 0.0 && self.peak_lr.is_finite()) {
            return Err(TrainError::Config("peak_lr must be finite and non-negative".into()));
        }
        if matches!(self.clip_norm, Some(c) if c <= 0.0 || !c.is_finite()) {
            return Err(TrainError::Config("clip_norm must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    /// Completed optimizer steps.
    pub step: u64,
    pub loss_clm: f64,
    pub loss_tp: Option<f64>,
    pub lr: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
}

/// Keeps the first `max_utterances` utterances. Token caps are applied by [`encode_instance`].
pub fn truncate_instance(inst: &TrainingInstance, max_utterances: usize) -> TrainingInstance {
    if inst.tree.len() <= max_utterances {
        return inst.clone();
    }
    let mut out = inst.clone();
    out.tree = inst.tree.truncated(max_utterances);
    if let Some(meta) = out.meta.as_mut() {
        meta.comment_ids.truncate(max_utterances);
    }
    out
}

/// Truncates and tokenises an instance for `cfg`.
pub fn encode_instance(inst: &TrainingInstance, tok: &Tokenizer, cfg: &ModelConfig) -> Result<Example, TrainError> {
    if tok.vocab_size() > cfg.vocab_size {
        return Err(TrainError::Config(format!(
            "tokenizer has {} entries but the model vocabulary is {}",
            tok.vocab_size(),
            cfg.vocab_size
        )));
    }
    let inst = truncate_instance(inst, cfg.max_utterances);
    let utterances = inst
        .tree
        .utterances()
        .iter()
        .map(|u| tokenize_utterance(tok, &u.text, cfg.max_utterance_tokens))
        .collect::<Result<Vec<_>, _>>()?;
    let targets = tokenize_summary(tok, &inst.summary, cfg.max_summary_tokens)?;
    let input = ConversationInput::new(&inst.tree, utterances)?;
    Ok(Example::new(input, targets, tok.special_ids().bos)?)
}

/// Example index used by micro-batch `micro` of step `step`: a fresh
/// seeded permutation of the data per epoch.
pub fn example_index(step: u64, micro: usize, accumulation: usize, n: usize, seed: u64) -> usize {
    let pos = step * accumulation as u64 + micro as u64;
    let epoch = pos / n as u64;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed::derive(seed, "shuffle", &[epoch])));
    order[(pos % n as u64) as usize]
}

pub struct Trainer {
    pub model: Model,
    pub optimizer: OptimizerState,
    pub config: TrainConfig,
}

impl Trainer {
    pub fn new(model: Model, config: TrainConfig) -> Result<Self, TrainError> {
        config.validate()?;
        let optimizer = OptimizerState::new(model.store(), config.adamw.clone());
        Ok(Self {
            model,
            optimizer,
            config,
        })
    }

    pub fn step(&self) -> u64 {
        self.optimizer.step
    }

    /// Accumulates gradients of `loss_weight * loss` over every micro-batch,
    /// then applies one optimizer update.
    pub fn train_step(&mut self, batch: &[&Example], loss_weight: f64) -> Result<StepMetrics, TrainError> {
        if batch.is_empty() {
            return Err(TrainError::EmptyData);
        }
        let step = self.optimizer.step;
        self.model.store_mut().zero_grad();
        let mut clm = 0.0;
        let mut tp = 0.0;
        let mut tp_count = 0usize;
        for (b, ex) in batch.iter().enumerate() {
            let mut tape = Tape::new();
            let mut ctx = ForwardCtx::train(seed::derive(self.config.seed, "dropout", &[step, b as u64]));
            let pair_seed = seed::derive(self.config.seed, "pairs", &[step, b as u64]);
            let parts = example_loss(&self.model, &mut tape, ex, &self.config.objective, pair_seed, &mut ctx)?;
            if !tape.value(parts.total).data()[0].is_finite() {
                return Err(TrainError::NonFinite { step, what: "loss" });
            }
            clm += parts.clm;
            if let Some(v) = parts.thread_pred {
                tp += v;
                tp_count += 1;
            }
            let loss = tape.scale(parts.total, loss_weight);
            tape.backward(loss, self.model.store_mut())?;
        }
        let grad_norm = match self.config.clip_norm {
            Some(max) => self.model.store_mut().clip_grad_norm(max),
            None => self.model.store().grad_norm(),
        };
        if !grad_norm.is_finite() {
            return Err(TrainError::NonFinite { step, what: "gradient" });
        }
        let lr = lr_at(step, self.config.peak_lr, self.config.total_steps);
        apply_adamw(&mut self.optimizer, self.model.store_mut(), lr);
        Ok(StepMetrics {
            step: self.optimizer.step,
            loss_clm: clm / batch.len() as f64,
            loss_tp: (tp_count > 0).then(|| tp / tp_count as f64),
            lr,
            grad_norm,
        })
    }

    /// Trains until `until_step` steps have completed, logging one JSON line
    /// per step. `on_checkpoint` runs every `checkpoint_every` steps.
    pub fn run(
        &mut self,
        data: &[Example],
        until_step: u64,
        log: &mut dyn Write,
        mut on_checkpoint: impl FnMut(&Trainer) -> Result<(), TrainError>,
    ) -> Result<Vec<StepMetrics>, TrainError> {
        if data.is_empty() {
            return Err(TrainError::EmptyData);
        }
        let accumulation = self.config.accumulation;
        let weight = 1.0 / accumulation as f64;
        let mut history = Vec::new();
        while self.step() < until_step {
            let step = self.step();
            let batch: Vec<&Example> = (0..accumulation)
                .map(|b| &data[example_index(step, b, accumulation, data.len(), self.config.seed)])
                .collect();
            let metrics = self.train_step(&batch, weight)?;
            serde_json::to_writer(&mut *log, &metrics).map_err(std::io::Error::from)?;
            log.write_all(b"\n")?;
            let every = self.config.checkpoint_every;
            if every > 0 && metrics.step % every == 0 {
                on_checkpoint(self)?;
            }
            history.push(metrics);
        }
        log.flush()?;
        Ok(history)
    }

    /// Model arrays plus optimizer moments and step count.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ckpt = self.model.to_checkpoint();
        let names: Vec<String> = self.model.store().iter().map(|(_, p)| p.name.clone()).collect();
        for (name, m) in names.iter().zip(&self.optimizer.m) {
            ckpt.arrays.push((format!("optim.m.{name}"), m.clone()));
        }
        for (name, v) in names.iter().zip(&self.optimizer.v) {
            ckpt.arrays.push((format!("optim.v.{name}"), v.clone()));
        }
        ckpt.manifest["train"] = serde_json::json!({
            "step": self.optimizer.step,
            "config": self.config,
        });
        ckpt
    }

    /// Restores model and optimizer. `config` overrides the saved run config.
    pub fn from_checkpoint(ckpt: &Checkpoint, config: Option<TrainConfig>) -> Result<Self, TrainError> {
        let model = Model::from_checkpoint(ckpt)?;
        let train = ckpt
            .manifest
            .get("train")
            .ok_or_else(|| TrainError::Checkpoint("no optimizer state".into()))?;
        let config = match config {
            Some(c) => c,
            None => serde_json::from_value(train.get("config").cloned().unwrap_or_default())
                .map_err(|e| TrainError::Checkpoint(format!("train config: {e}")))?,
        };
        let step = train
            .get("step")
            .and_then(serde_json::Value::as_u64)
            .ok_or_else(|| TrainError::Checkpoint("missing step".into()))?;
        let mut optimizer = OptimizerState::new(model.store(), config.adamw.clone());
        optimizer.step = step;
        for (k, (_, p)) in model.store().iter().enumerate() {
            for (slot, prefix) in [(&mut optimizer.m[k], "optim.m"), (&mut optimizer.v[k], "optim.v")] {
                let t = ckpt
                    .get(&format!("{prefix}.{}", p.name))
                    .ok_or_else(|| TrainError::Checkpoint(format!("missing {prefix}.{}", p.name)))?;
                if t.shape() != p.value.shape() {
                    return Err(TrainError::Checkpoint(format!("{prefix}.{} has the wrong shape", p.name)));
                }
                *slot = t.clone();
            }
        }
        config.validate()?;
        Ok(Self {
            model,
            optimizer,
            config,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        Ok(self.to_checkpoint().save(path)?)
    }

    pub fn load(path: &Path, config: Option<TrainConfig>) -> Result<Self, TrainError> {
        Self::from_checkpoint(&Checkpoint::load(path)?, config)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conv::tests::{arb_tree, chain, figure_tree};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn schedule() {
        assert_eq!(lr_at(0, 5e-5, 100), 5e-5);
        assert_eq!(lr_at(100, 5e-5, 100), 0.0);
        assert_eq!(lr_at(150, 5e-5, 100), 0.0);
        assert_abs_diff_eq!(lr_at(50, 5e-5, 100), 2.5e-5, epsilon = 1e-20);
    }

    fn scalar_store(value: f64, grad: f64) -> ParamStore {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::vector(vec![value]));
        s.get_mut(id).grad = Tensor::vector(vec![grad]);
        s
    }

    #[test]
    fn adamw_zero_gradient_is_identity() {
        let mut s = ParamStore::new();
        s.add("w", Tensor::from_rows(&[vec![1.0, -2.0]]).unwrap());
        let mut opt = OptimizerState::new(
            &s,
            AdamWConfig {
                weight_decay: 0.0,
                ..AdamWConfig::default()
            },
        );
        apply_adamw(&mut opt, &mut s, 0.1);
        assert_eq!(s.by_name("w").unwrap().value.data(), &[1.0, -2.0]);
        assert_eq!(opt.step, 1);
    }

    #[test]
    fn adamw_first_step_is_signed_lr() {
        for g in [3.0, -0.25] {
            let mut s = scalar_store(1.0, g);
            let mut opt = OptimizerState::new(&s, AdamWConfig::default());
            apply_adamw(&mut opt, &mut s, 0.01);
            let expected = 1.0 - 0.01 * g / (g.abs() + 1e-8);
            assert_abs_diff_eq!(s.by_name("w").unwrap().value.data()[0], expected, epsilon = 1e-15);
        }
    }

    #[test]
    fn adamw_decays_matrices_only() {
        let mut s = ParamStore::new();
        s.add("m", Tensor::from_rows(&[vec![1.0]]).unwrap());
        s.add("b", Tensor::vector(vec![1.0]));
        let mut opt = OptimizerState::new(&s, AdamWConfig::default());
        apply_adamw(&mut opt, &mut s, 0.5);
        assert_abs_diff_eq!(s.by_name("m").unwrap().value.data()[0], 1.0 - 0.5 * 0.01, epsilon = 1e-15);
        assert_eq!(s.by_name("b").unwrap().value.data()[0], 1.0);
    }

    #[test]
    fn truncation_keeps_small_instances() {
        let inst = TrainingInstance {
            tree: figure_tree(),
            summary: "s".into(),
            meta: None,
        };
        assert_eq!(truncate_instance(&inst, 124), inst);
        let long = TrainingInstance {
            tree: chain(130),
            summary: "s".into(),
            meta: None,
        };
        let cut = truncate_instance(&long, 124);
        assert_eq!(cut.tree.len(), 124);
        cut.tree.validate().unwrap();
    }

    proptest! {
        #[test]
        fn truncation_preserves_invariants(tree in arb_tree(20), n in 1usize..25) {
            let inst = TrainingInstance { tree, summary: "s".into(), meta: None };
            let cut = truncate_instance(&inst, n);
            prop_assert_eq!(cut.tree.len(), inst.tree.len().min(n));
            prop_assert!(cut.tree.validate().is_ok());
        }
    }

    #[test]
    fn example_order_covers_each_epoch() {
        let n = 7;
        let mut seen: Vec<usize> = (0..n).map(|p| example_index(p as u64, 0, 1, n, 3)).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..n).collect::<Vec<_>>());
        assert_eq!(example_index(2, 1, 2, n, 3), example_index(5, 0, 1, n, 3));
    }
}
