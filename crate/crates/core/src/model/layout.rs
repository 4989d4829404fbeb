//! Parameter naming, shapes, counting and initialisation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use threadsum_tensor::{ParamStore, Tensor};

use crate::model::config::{ModelConfig, ThreadEmbeddingScope};
use crate::model::ModelError;

pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InitKind {
    /// Normal with standard deviation [`INIT_STD`], resampled outside two deviations.
    TruncatedNormal,
    Ones,
    Zeros,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: InitKind,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

struct Builder(Vec<ParamSpec>);

impl Builder {
    fn push(&mut self, name: String, shape: &[usize], init: InitKind) {
        self.0.push(ParamSpec { name, shape: shape.to_vec(), init });
    }

    fn linear(&mut self, prefix: &str, d_in: usize, d_out: usize, bias: bool) {
        self.push(format!("{prefix}.weight"), &[d_in, d_out], InitKind::TruncatedNormal);
        if bias {
            self.push(format!("{prefix}.bias"), &[d_out], InitKind::Zeros);
        }
    }

    fn norm(&mut self, prefix: &str, d: usize) {
        self.push(format!("{prefix}.gain"), &[d], InitKind::Ones);
        self.push(format!("{prefix}.bias"), &[d], InitKind::Zeros);
    }

    fn attention(&mut self, prefix: &str, d: usize, qkv_bias: bool) {
        for m in ["q", "k", "v"] {
            self.linear(&format!("{prefix}.{m}"), d, d, qkv_bias);
        }
        self.linear(&format!("{prefix}.o"), d, d, true);
    }

    fn ffn(&mut self, prefix: &str, d: usize, d_ff: usize) {
        self.linear(&format!("{prefix}.in"), d, d_ff, true);
        self.linear(&format!("{prefix}.out"), d_ff, d, true);
    }
}

/// Every learnable array of the model, in initialisation order.
///
/// Thread-aware attention projects queries, keys and values without biases;
/// every other linear map carries one.
pub fn parameter_layout(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let d = cfg.hidden;
    let mut b = Builder(Vec::new());
    b.push("embed.tokens".into(), &[cfg.vocab_size, d], InitKind::TruncatedNormal);

    for l in 0..cfg.num_layers {
        let p = format!("token_encoder.{l}");
        b.attention(&format!("{p}.attn"), d, true);
        b.norm(&format!("{p}.attn_norm"), d);
        b.ffn(&format!("{p}.ffn"), d, cfg.feed_forward);
        b.norm(&format!("{p}.ffn_norm"), d);
    }
    b.norm("token_encoder.final_norm", d);

    let table = [cfg.num_thread_embeddings(), cfg.head_dim()];
    if cfg.thread_embeddings == ThreadEmbeddingScope::Global {
        b.push("utterance_encoder.thread_embeddings".into(), &table, InitKind::TruncatedNormal);
    }
    for l in 0..cfg.num_layers {
        let p = format!("utterance_encoder.{l}");
        if cfg.thread_embeddings == ThreadEmbeddingScope::PerLayer {
            b.push(format!("{p}.thread_embeddings"), &table, InitKind::TruncatedNormal);
        }
        b.attention(&format!("{p}.attn"), d, false);
        b.norm(&format!("{p}.attn_norm"), d);
        b.ffn(&format!("{p}.ffn"), d, cfg.feed_forward);
        b.norm(&format!("{p}.ffn_norm"), d);
    }
    b.norm("utterance_encoder.final_norm", d);

    for l in 0..cfg.num_layers {
        let p = format!("decoder.{l}");
        b.attention(&format!("{p}.self_attn"), d, true);
        b.norm(&format!("{p}.self_attn_norm"), d);
        b.attention(&format!("{p}.cross_attn"), d, true);
        b.norm(&format!("{p}.cross_attn_norm"), d);
        b.ffn(&format!("{p}.ffn"), d, cfg.feed_forward);
        b.norm(&format!("{p}.ffn_norm"), d);
    }
    b.norm("decoder.final_norm", d);

    b.push("thread_pred.w_a".into(), &[d, d], InitKind::TruncatedNormal);
    b.push("thread_pred.w_b".into(), &[d, d], InitKind::TruncatedNormal);
    b.0
}

/// Exact number of learnable scalars. Allocates nothing.
pub fn count_parameters(cfg: &ModelConfig) -> usize {
    parameter_layout(cfg).iter().map(ParamSpec::numel).sum()
}

fn truncated_normal(rng: &mut ChaCha8Rng, normal: &Normal<f64>) -> f64 {
    loop {
        let x = normal.sample(rng);
        if x.abs() <= 2.0 * INIT_STD {
            return x;
        }
    }
}

/// Fresh parameters, deterministic in `seed`.
pub fn init_parameters(cfg: &ModelConfig, seed: u64) -> Result<ParamStore, ModelError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, INIT_STD).expect("valid deviation");
    let mut store = ParamStore::new();
    for spec in parameter_layout(cfg) {
        let n = spec.numel();
        let data = match spec.init {
            InitKind::TruncatedNormal => (0..n).map(|_| truncated_normal(&mut rng, &normal)).collect(),
            InitKind::Ones => vec![1.0; n],
            InitKind::Zeros => vec![0.0; n],
        };
        store.add(spec.name, Tensor::new(&spec.shape, data)?);
    }
    Ok(store)
}
