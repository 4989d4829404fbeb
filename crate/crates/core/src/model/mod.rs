//! Hierarchical encoder-decoder over conversation trees.
//!
//! A token encoder reads every utterance on its own. The bos state of each
//! utterance, plus a position encoding of its timestamp rank, feeds an
//! utterance encoder whose attention is biased by the tree relation between
//! utterance pairs. The decoder cross-attends to token states with the
//! encoded utterance state added back, and predicts through the tied
//! embedding matrix.

mod attention;
mod config;
mod layout;

use thiserror::Error;
use threadsum_tensor::{Checkpoint, ParamId, ParamStore, Tape, TensorError, Var};

use crate::conv::{ConversationTree, ThreadRelation};

pub use attention::{
    causal_mask, relation_index, relation_indices, select_relative_embedding, sinusoidal_pe, thread_aware_attention,
    HeadOutputs, MASK_VALUE,
};
pub use config::{MemoryMode, ModelConfig, ThreadEmbeddingScope};
pub use layout::{count_parameters, init_parameters, parameter_layout, InitKind, ParamSpec, INIT_STD};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("token id {id} outside vocabulary of {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },
    #[error("{what} has length {len}, limit is {max}")]
    TooLong { what: &'static str, len: usize, max: usize },
    #[error("empty {0}")]
    Empty(&'static str),
    #[error("relation matrix has {got} entries, expected {expected}")]
    Relations { got: usize, expected: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Token ids of one conversation plus its pairwise relations.
#[derive(Clone, Debug, PartialEq)]
pub struct ConversationInput {
    /// One sequence per utterance in timestamp order, each starting with bos.
    pub utterances: Vec<Vec<usize>>,
    /// Row-major `n * n` relations, entry `i * n + j` relating `u_i` to `u_j`.
    pub relations: Vec<ThreadRelation>,
}

impl ConversationInput {
    pub fn new(tree: &ConversationTree, utterances: Vec<Vec<usize>>) -> Result<Self, ModelError> {
        if utterances.len() != tree.len() {
            return Err(ModelError::Relations {
                got: utterances.len(),
                expected: tree.len(),
            });
        }
        Ok(Self {
            utterances,
            relations: tree.relation_matrix(),
        })
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    pub fn num_tokens(&self) -> usize {
        self.utterances.iter().map(Vec::len).sum()
    }
}

/// Dropout switch and seed stream for one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardCtx {
    training: bool,
    seed: u64,
    calls: u64,
}

impl ForwardCtx {
    pub fn eval() -> Self {
        Self {
            training: false,
            seed: 0,
            calls: 0,
        }
    }

    pub fn train(seed: u64) -> Self {
        Self {
            training: true,
            seed,
            calls: 0,
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    fn next_seed(&mut self) -> u64 {
        self.calls += 1;
        let mut z = self.seed ^ self.calls.wrapping_mul(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
}

#[derive(Clone, Copy, Debug)]
struct Linear {
    weight: ParamId,
    bias: Option<ParamId>,
}

#[derive(Clone, Copy, Debug)]
struct Norm {
    gain: ParamId,
    bias: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

#[derive(Clone, Copy, Debug)]
struct Ffn {
    inner: Linear,
    outer: Linear,
}

#[derive(Clone, Copy, Debug)]
struct EncoderLayer {
    attn: Attention,
    attn_norm: Norm,
    ffn: Ffn,
    ffn_norm: Norm,
    table: Option<ParamId>,
}

#[derive(Clone, Copy, Debug)]
struct DecoderLayer {
    self_attn: Attention,
    self_norm: Norm,
    cross_attn: Attention,
    cross_norm: Norm,
    ffn: Ffn,
    ffn_norm: Norm,
}

#[derive(Clone, Debug)]
struct Ids {
    embed: ParamId,
    token_layers: Vec<EncoderLayer>,
    token_final: Norm,
    utt_layers: Vec<EncoderLayer>,
    utt_final: Norm,
    dec_layers: Vec<DecoderLayer>,
    dec_final: Norm,
    w_a: ParamId,
    w_b: ParamId,
}

impl Ids {
    fn resolve(cfg: &ModelConfig, store: &ParamStore) -> Result<Self, ModelError> {
        let id = |n: String| store.id(&n).map_err(ModelError::from);
        let linear = |p: &str, bias: bool| -> Result<Linear, ModelError> {
            Ok(Linear {
                weight: id(format!("{p}.weight"))?,
                bias: if bias { Some(id(format!("{p}.bias"))?) } else { None },
            })
        };
        let norm = |p: &str| -> Result<Norm, ModelError> {
            Ok(Norm {
                gain: id(format!("{p}.gain"))?,
                bias: id(format!("{p}.bias"))?,
            })
        };
        let attention = |p: &str, qkv_bias: bool| -> Result<Attention, ModelError> {
            Ok(Attention {
                q: linear(&format!("{p}.q"), qkv_bias)?,
                k: linear(&format!("{p}.k"), qkv_bias)?,
                v: linear(&format!("{p}.v"), qkv_bias)?,
                o: linear(&format!("{p}.o"), true)?,
            })
        };
        let ffn = |p: &str| -> Result<Ffn, ModelError> {
            Ok(Ffn {
                inner: linear(&format!("{p}.in"), true)?,
                outer: linear(&format!("{p}.out"), true)?,
            })
        };
        let global_table = match cfg.thread_embeddings {
            ThreadEmbeddingScope::Global => Some(id("utterance_encoder.thread_embeddings".into())?),
            ThreadEmbeddingScope::PerLayer => None,
        };
        let mut token_layers = Vec::new();
        let mut utt_layers = Vec::new();
        let mut dec_layers = Vec::new();
        for l in 0..cfg.num_layers {
            let p = format!("token_encoder.{l}");
            token_layers.push(EncoderLayer {
                attn: attention(&format!("{p}.attn"), true)?,
                attn_norm: norm(&format!("{p}.attn_norm"))?,
                ffn: ffn(&format!("{p}.ffn"))?,
                ffn_norm: norm(&format!("{p}.ffn_norm"))?,
                table: None,
            });
            let p = format!("utterance_encoder.{l}");
            let table = match global_table {
                Some(t) => t,
                None => id(format!("{p}.thread_embeddings"))?,
            };
            utt_layers.push(EncoderLayer {
                attn: attention(&format!("{p}.attn"), false)?,
                attn_norm: norm(&format!("{p}.attn_norm"))?,
                ffn: ffn(&format!("{p}.ffn"))?,
                ffn_norm: norm(&format!("{p}.ffn_norm"))?,
                table: Some(table),
            });
            let p = format!("decoder.{l}");
            dec_layers.push(DecoderLayer {
                self_attn: attention(&format!("{p}.self_attn"), true)?,
                self_norm: norm(&format!("{p}.self_attn_norm"))?,
                cross_attn: attention(&format!("{p}.cross_attn"), true)?,
                cross_norm: norm(&format!("{p}.cross_attn_norm"))?,
                ffn: ffn(&format!("{p}.ffn"))?,
                ffn_norm: norm(&format!("{p}.ffn_norm"))?,
            });
        }
        Ok(Self {
            embed: id("embed.tokens".into())?,
            token_layers,
            token_final: norm("token_encoder.final_norm")?,
            utt_layers,
            utt_final: norm("utterance_encoder.final_norm")?,
            dec_layers,
            dec_final: norm("decoder.final_norm")?,
            w_a: id("thread_pred.w_a".into())?,
            w_b: id("thread_pred.w_b".into())?,
        })
    }
}

/// Everything the encoder produces for one conversation.
#[derive(Clone, Debug)]
pub struct EncoderOutput {
    /// Final token states of all utterances concatenated, `[T, d_h]`.
    pub token_states: Var,
    /// Row offset of each utterance inside `token_states`.
    pub offsets: Vec<usize>,
    /// Token-encoder bos state of each utterance, `[n, d_h]`.
    pub bos_states: Var,
    /// Utterance-encoder input, `[n, d_h]`.
    pub utterance_input: Var,
    /// Utterance-encoder output, `[n, d_h]`.
    pub utterance_states: Var,
    /// Decoder memory.
    pub memory: Var,
}

pub struct Model {
    config: ModelConfig,
    store: ParamStore,
    ids: Ids,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        let store = init_parameters(&config, seed)?;
        Self::from_store(config, store)
    }

    /// Wraps existing parameters after checking names and shapes against the layout.
    pub fn from_store(config: ModelConfig, store: ParamStore) -> Result<Self, ModelError> {
        config.validate()?;
        let layout = parameter_layout(&config);
        if layout.len() != store.len() {
            return Err(ModelError::Checkpoint(format!(
                "expected {} parameter arrays, found {}",
                layout.len(),
                store.len()
            )));
        }
        for spec in &layout {
            let p = store.by_name(&spec.name)?;
            if p.value.shape() != spec.shape.as_slice() {
                return Err(ModelError::Checkpoint(format!(
                    "{} has shape {:?}, expected {:?}",
                    spec.name,
                    p.value.shape(),
                    spec.shape
                )));
            }
        }
        let ids = Ids::resolve(&config, &store)?;
        Ok(Self { config, store, ids })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn embedding_id(&self) -> ParamId {
        self.ids.embed
    }

    /// Thread-prediction projections `(W_a, W_b)`.
    pub fn thread_pred_ids(&self) -> (ParamId, ParamId) {
        (self.ids.w_a, self.ids.w_b)
    }

    /// Relation table used by utterance-encoder layer `layer`.
    pub fn thread_table_id(&self, layer: usize) -> Option<ParamId> {
        self.ids.utt_layers.get(layer).and_then(|l| l.table)
    }

    pub fn manifest(&self) -> serde_json::Value {
        serde_json::json!({
            "format": "threadsum-model",
            "config": self.config,
            "config_hash": self.config.hash(),
            "num_parameters": self.store.num_scalars(),
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            manifest: self.manifest(),
            arrays: self.store.iter().map(|(_, p)| (p.name.clone(), p.value.clone())).collect(),
        }
    }

    /// Rebuilds a model from a checkpoint. Arrays not belonging to the model
    /// (optimizer state, for instance) are ignored.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self, ModelError> {
        let config: ModelConfig = serde_json::from_value(ckpt.manifest.get("config").cloned().unwrap_or_default())
            .map_err(|e| ModelError::Checkpoint(format!("model config: {e}")))?;
        let mut store = ParamStore::new();
        for spec in parameter_layout(&config) {
            let t = ckpt
                .get(&spec.name)
                .ok_or_else(|| ModelError::Checkpoint(format!("missing array {}", spec.name)))?;
            store.add(spec.name, t.clone());
        }
        Self::from_store(config, store)
    }

    fn check_ids(&self, ids: &[usize]) -> Result<(), ModelError> {
        match ids.iter().find(|&&id| id >= self.config.vocab_size) {
            Some(&id) => Err(ModelError::TokenOutOfRange {
                id,
                vocab: self.config.vocab_size,
            }),
            None => Ok(()),
        }
    }

    fn dropout(&self, tape: &mut Tape, x: Var, ctx: &mut ForwardCtx) -> Var {
        if !ctx.training || self.config.dropout == 0.0 {
            return x;
        }
        let seed = ctx.next_seed();
        tape.dropout(x, self.config.dropout, true, seed)
    }

    fn linear(&self, tape: &mut Tape, x: Var, l: Linear) -> Result<Var, ModelError> {
        let w = tape.param(&self.store, l.weight);
        let y = tape.matmul(x, w)?;
        Ok(match l.bias {
            Some(b) => {
                let b = tape.param(&self.store, b);
                tape.add_row(y, b)?
            }
            None => y,
        })
    }

    fn norm(&self, tape: &mut Tape, x: Var, n: Norm) -> Result<Var, ModelError> {
        let g = tape.param(&self.store, n.gain);
        let b = tape.param(&self.store, n.bias);
        Ok(tape.layer_norm(x, g, b, self.config.layer_norm_eps)?)
    }

    fn ffn(&self, tape: &mut Tape, x: Var, f: Ffn, ctx: &mut ForwardCtx) -> Result<Var, ModelError> {
        let h = self.linear(tape, x, f.inner)?;
        let h = tape.gelu(h);
        let h = self.dropout(tape, h, ctx);
        self.linear(tape, h, f.outer)
    }

    fn attention(
        &self,
        tape: &mut Tape,
        x_q: Var,
        x_kv: Var,
        a: Attention,
        mask: Option<Var>,
    ) -> Result<Var, ModelError> {
        let q = self.linear(tape, x_q, a.q)?;
        let k = self.linear(tape, x_kv, a.k)?;
        let v = self.linear(tape, x_kv, a.v)?;
        let z = attention::dot_product_heads(tape, q, k, v, mask, self.config.num_heads)?;
        self.linear(tape, z, a.o)
    }

    /// `x + dropout(sublayer(LN(x)))`.
    fn residual(
        &self,
        tape: &mut Tape,
        x: Var,
        norm: Norm,
        ctx: &mut ForwardCtx,
        f: impl FnOnce(&mut Tape, Var, &mut ForwardCtx) -> Result<Var, ModelError>,
    ) -> Result<Var, ModelError> {
        let h = self.norm(tape, x, norm)?;
        let h = f(tape, h, ctx)?;
        let h = self.dropout(tape, h, ctx);
        Ok(tape.add(x, h)?)
    }

    fn embed_with_positions(&self, tape: &mut Tape, ids: &[usize], ctx: &mut ForwardCtx) -> Result<Var, ModelError> {
        let e = tape.param(&self.store, self.ids.embed);
        let x = tape.embedding_lookup(e, ids)?;
        let pe = tape.constant(sinusoidal_pe(ids.len(), self.config.hidden));
        let x = tape.add(x, pe)?;
        Ok(self.dropout(tape, x, ctx))
    }

    /// Encodes one utterance's tokens, returning `[len, d_h]`.
    pub fn token_encode_one(&self, tape: &mut Tape, ids: &[usize], ctx: &mut ForwardCtx) -> Result<Var, ModelError> {
        if ids.is_empty() {
            return Err(ModelError::Empty("utterance"));
        }
        if ids.len() > self.config.max_utterance_tokens {
            return Err(ModelError::TooLong {
                what: "utterance",
                len: ids.len(),
                max: self.config.max_utterance_tokens,
            });
        }
        self.check_ids(ids)?;
        let mut x = self.embed_with_positions(tape, ids, ctx)?;
        for layer in &self.ids.token_layers {
            x = self.residual(tape, x, layer.attn_norm, ctx, |t, h, _| self.attention(t, h, h, layer.attn, None))?;
            x = self.residual(tape, x, layer.ffn_norm, ctx, |t, h, c| self.ffn(t, h, layer.ffn, c))?;
        }
        self.norm(tape, x, self.ids.token_final)
    }

    /// Encodes every utterance independently. Returns the per-utterance states.
    pub fn token_encode(
        &self,
        tape: &mut Tape,
        utterances: &[Vec<usize>],
        ctx: &mut ForwardCtx,
    ) -> Result<Vec<Var>, ModelError> {
        utterances.iter().map(|u| self.token_encode_one(tape, u, ctx)).collect()
    }

    /// Bos row of each utterance plus the position encoding of its rank.
    pub fn utterance_representations(&self, tape: &mut Tape, token_states: &[Var]) -> Result<(Var, Var), ModelError> {
        if token_states.is_empty() {
            return Err(ModelError::Empty("conversation"));
        }
        let rows = token_states
            .iter()
            .map(|&h| tape.slice(h, 0, 0, 1))
            .collect::<Result<Vec<_>, _>>()?;
        let bos = if rows.len() == 1 { rows[0] } else { tape.concat(&rows, 0)? };
        let pe = tape.constant(sinusoidal_pe(token_states.len(), self.config.hidden));
        let h0 = tape.add(bos, pe)?;
        Ok((bos, h0))
    }

    /// Thread-aware sub-layer of utterance-encoder layer `layer`, after its
    /// pre-norm: per-head attention, concatenation, output projection.
    fn thread_sublayer(
        &self,
        tape: &mut Tape,
        h: Var,
        layer: &EncoderLayer,
        relations: &[ThreadRelation],
    ) -> Result<Var, ModelError> {
        let wq = tape.param(&self.store, layer.attn.q.weight);
        let wk = tape.param(&self.store, layer.attn.k.weight);
        let wv = tape.param(&self.store, layer.attn.v.weight);
        let table = tape.param(&self.store, layer.table.expect("utterance layers own a table"));
        let heads = thread_aware_attention(
            tape,
            h,
            wq,
            wk,
            wv,
            table,
            relations,
            self.config.clip_k,
            self.config.num_heads,
        )?;
        let zs: Vec<Var> = heads.iter().map(|o| o.z).collect();
        let z = if zs.len() == 1 { zs[0] } else { tape.concat(&zs, 1)? };
        self.linear(tape, z, layer.attn.o)
    }

    pub fn utterance_encode(
        &self,
        tape: &mut Tape,
        h0: Var,
        relations: &[ThreadRelation],
        ctx: &mut ForwardCtx,
    ) -> Result<Var, ModelError> {
        let n = tape.value(h0).rows();
        if n > self.config.max_utterances {
            return Err(ModelError::TooLong {
                what: "conversation",
                len: n,
                max: self.config.max_utterances,
            });
        }
        if relations.len() != n * n {
            return Err(ModelError::Relations {
                got: relations.len(),
                expected: n * n,
            });
        }
        let mut x = h0;
        for layer in &self.ids.utt_layers {
            x = self.residual(tape, x, layer.attn_norm, ctx, |t, h, _| self.thread_sublayer(t, h, layer, relations))?;
            x = self.residual(tape, x, layer.ffn_norm, ctx, |t, h, c| self.ffn(t, h, layer.ffn, c))?;
        }
        self.norm(tape, x, self.ids.utt_final)
    }

    /// Cross-attention memory for the decoder.
    pub fn build_decoder_memory(
        &self,
        tape: &mut Tape,
        token_states: &[Var],
        utterance_input: Var,
        utterance_states: Var,
    ) -> Result<Var, ModelError> {
        match self.config.decoder_memory {
            MemoryMode::TokenResidual => token_residual_memory(tape, token_states, utterance_states),
            MemoryMode::UtteranceLevel => Ok(tape.add(utterance_states, utterance_input)?),
        }
    }

    pub fn encode(
        &self,
        tape: &mut Tape,
        input: &ConversationInput,
        ctx: &mut ForwardCtx,
    ) -> Result<EncoderOutput, ModelError> {
        let per_utt = self.token_encode(tape, &input.utterances, ctx)?;
        let (bos_states, utterance_input) = self.utterance_representations(tape, &per_utt)?;
        let utterance_states = self.utterance_encode(tape, utterance_input, &input.relations, ctx)?;
        let memory = self.build_decoder_memory(tape, &per_utt, utterance_input, utterance_states)?;
        let mut offsets = Vec::with_capacity(per_utt.len());
        let mut total = 0;
        for u in &input.utterances {
            offsets.push(total);
            total += u.len();
        }
        let token_states = if per_utt.len() == 1 { per_utt[0] } else { tape.concat(&per_utt, 0)? };
        Ok(EncoderOutput {
            token_states,
            offsets,
            bos_states,
            utterance_input,
            utterance_states,
            memory,
        })
    }

    /// Logits `[len, |V|]` for a right-shifted summary prefix.
    pub fn decoder_forward(
        &self,
        tape: &mut Tape,
        input_ids: &[usize],
        memory: Var,
        ctx: &mut ForwardCtx,
    ) -> Result<Var, ModelError> {
        if input_ids.is_empty() {
            return Err(ModelError::Empty("decoder input"));
        }
        if input_ids.len() > self.config.max_summary_tokens {
            return Err(ModelError::TooLong {
                what: "summary",
                len: input_ids.len(),
                max: self.config.max_summary_tokens,
            });
        }
        self.check_ids(input_ids)?;
        let mask = tape.constant(causal_mask(input_ids.len()));
        let mut x = self.embed_with_positions(tape, input_ids, ctx)?;
        for layer in &self.ids.dec_layers {
            x = self.residual(tape, x, layer.self_norm, ctx, |t, h, _| {
                self.attention(t, h, h, layer.self_attn, Some(mask))
            })?;
            x = self.residual(tape, x, layer.cross_norm, ctx, |t, h, _| {
                self.attention(t, h, memory, layer.cross_attn, None)
            })?;
            x = self.residual(tape, x, layer.ffn_norm, ctx, |t, h, c| self.ffn(t, h, layer.ffn, c))?;
        }
        let h = self.norm(tape, x, self.ids.dec_final)?;
        let e = tape.param(&self.store, self.ids.embed);
        Ok(tape.matmul_bt(h, e)?)
    }
}

/// Token states of all utterances stacked, each row shifted by its
/// utterance's encoded state.
pub fn token_residual_memory(tape: &mut Tape, token_states: &[Var], utterance_states: Var) -> Result<Var, ModelError> {
    let n = tape.value(utterance_states).rows();
    if n != token_states.len() {
        return Err(ModelError::Relations {
            got: token_states.len(),
            expected: n,
        });
    }
    let mut owner = Vec::new();
    for (i, &h) in token_states.iter().enumerate() {
        owner.extend(std::iter::repeat_n(i, tape.value(h).rows()));
    }
    let tokens = if token_states.len() == 1 { token_states[0] } else { tape.concat(token_states, 0)? };
    let broadcast = tape.gather_rows(utterance_states, &owner)?;
    Ok(tape.add(tokens, broadcast)?)
}

#[cfg(test)]
mod tests;
