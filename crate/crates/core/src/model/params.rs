//! Named parameter storage and initialization for both model stages.

use crate::autodiff::Tensor;
use crate::error::{CoreError, Result};
use crate::model::config::{ModelConfig, ENTITY_CLASSES};
use crate::rng::{rng_from, subseed};
use crate::text::vocab::NONE_ID;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// Stage 1: narrative model with entity states.
    State,
    /// Stage 2: plain encoder-decoder mention generator.
    Mention,
}

/// Ordered, named collection of trainable tensors. Iteration order is
/// insertion order, which keeps the optimizer and checkpoints stable.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, t: Tensor) {
        assert!(
            self.index.insert(name.to_string(), self.entries.len()).is_none(),
            "parameter '{name}' registered twice"
        );
        self.entries.push((name.to_string(), t));
    }

    pub fn get(&self, name: &str) -> &Tensor {
        let i = self.index[name];
        &self.entries[i].1
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        let i = self.index[name];
        &mut self.entries[i].1
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    /// Total number of scalar parameters.
    pub fn n_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Concatenate all parameter data in registration order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_scalars());
        for (_, t) in &self.entries {
            out.extend_from_slice(&t.data);
        }
        out
    }

    /// Overwrite all parameters from a flat vector (inverse of `flatten`).
    pub fn load_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.n_scalars() {
            return Err(CoreError::Shape(format!(
                "flat vector has {} scalars, store holds {}",
                flat.len(),
                self.n_scalars()
            )));
        }
        let mut off = 0;
        for (_, t) in self.entries.iter_mut() {
            let len = t.data.len();
            t.data.copy_from_slice(&flat[off..off + len]);
            off += len;
        }
        Ok(())
    }
}

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn new(seed: u64) -> Self {
        Init { rng: rng_from(seed) }
    }

    /// Glorot-scaled weight matrix; keeps activations and gradients
    /// well-conditioned at desk dimensions.
    fn gaussian(&mut self, rows: usize, cols: usize) -> Tensor {
        let std = (2.0 / (rows + cols) as f64).sqrt();
        let normal = Normal::new(0.0, std).unwrap();
        let data: Vec<f64> = (0..rows * cols).map(|_| normal.sample(&mut self.rng)).collect();
        Tensor { shape: vec![rows, cols], data, requires_grad: true, grad: None }
    }

    /// Embedding rows at 1/sqrt(dim) scale, unit-ish row norms.
    fn embedding(&mut self, rows: usize, dim: usize) -> Tensor {
        let normal = Normal::new(0.0, 1.0 / (dim as f64).sqrt()).unwrap();
        let data: Vec<f64> = (0..rows * dim).map(|_| normal.sample(&mut self.rng)).collect();
        Tensor { shape: vec![rows, dim], data, requires_grad: true, grad: None }
    }

    fn zeros(&mut self, rows: usize, cols: usize) -> Tensor {
        Tensor::zeros(vec![rows, cols], true)
    }

    fn ones_row(&mut self, cols: usize) -> Tensor {
        Tensor { shape: vec![1, cols], data: vec![1.0; cols], requires_grad: true, grad: None }
    }

    /// Rows drawn uniformly on the unit sphere.
    fn unit_sphere_rows(&mut self, rows: usize, cols: usize) -> Tensor {
        let std1 = Normal::new(0.0, 1.0).unwrap();
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            let mut row: Vec<f64> = (0..cols).map(|_| std1.sample(&mut self.rng)).collect();
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            for v in row.iter_mut() {
                *v /= norm;
            }
            data.extend(row);
        }
        Tensor { shape: vec![rows, cols], data, requires_grad: true, grad: None }
    }
}

fn add_attention(store: &mut ParamStore, init: &mut Init, prefix: &str, d: usize) {
    for w in ["wq", "wk", "wv", "wo"] {
        store.insert(&format!("{prefix}.{w}"), init.gaussian(d, d));
    }
    for b in ["bq", "bk", "bv", "bo"] {
        store.insert(&format!("{prefix}.{b}"), init.zeros(1, d));
    }
}

fn add_layer_norm(store: &mut ParamStore, init: &mut Init, prefix: &str, d: usize) {
    store.insert(&format!("{prefix}.gain"), init.ones_row(d));
    store.insert(&format!("{prefix}.bias"), init.zeros(1, d));
}

fn add_ffn(store: &mut ParamStore, init: &mut Init, prefix: &str, d: usize, d_ff: usize) {
    store.insert(&format!("{prefix}.w1"), init.gaussian(d, d_ff));
    store.insert(&format!("{prefix}.b1"), init.zeros(1, d_ff));
    store.insert(&format!("{prefix}.w2"), init.gaussian(d_ff, d));
    store.insert(&format!("{prefix}.b2"), init.zeros(1, d));
}

fn add_encoder_blocks(store: &mut ParamStore, init: &mut Init, prefix: &str, n: usize, d: usize, d_ff: usize) {
    for i in 0..n {
        add_attention(store, init, &format!("{prefix}.{i}.attn"), d);
        add_layer_norm(store, init, &format!("{prefix}.{i}.attn_ln"), d);
        add_ffn(store, init, &format!("{prefix}.{i}.ffn"), d, d_ff);
        add_layer_norm(store, init, &format!("{prefix}.{i}.ffn_ln"), d);
    }
}

/// Parameters of the stage-1 state-tracking model.
pub fn init_state_params(config: &ModelConfig, seed: u64) -> ParamStore {
    let mut init = Init::new(subseed(seed, "params-state"));
    let mut store = ParamStore::new();
    let d = config.d_model;
    let big_d = config.state_dim;

    let mut tok = init.embedding(config.vocab_size, d);
    // <none> carries a constant zero embedding; training keeps it pinned.
    tok.data[NONE_ID * d..(NONE_ID + 1) * d].fill(0.0);
    store.insert("tok_emb", tok);
    store.insert("pos_enc", init.embedding(config.max_seq_len, d));
    store.insert("pos_dec", init.embedding(config.max_seq_len, d));

    add_encoder_blocks(&mut store, &mut init, "enc", config.n_encoder_blocks, d, config.d_ff);

    // External sentence encoder with its own embeddings.
    store.insert("sent.tok_emb", init.embedding(config.vocab_size, d));
    store.insert("sent.pos", init.embedding(config.max_seq_len, d));
    add_encoder_blocks(&mut store, &mut init, "sent", config.n_encoder_blocks, d, config.d_ff);
    store.insert("event_proj.w", init.gaussian(d, big_d));
    store.insert("event_proj.b", init.zeros(1, big_d));

    for i in 0..config.n_decoder_blocks {
        add_attention(&mut store, &mut init, &format!("dec.{i}.self"), d);
        add_layer_norm(&mut store, &mut init, &format!("dec.{i}.self_ln"), d);
        add_attention(&mut store, &mut init, &format!("dec.{i}.state"), d);
        add_layer_norm(&mut store, &mut init, &format!("dec.{i}.state_ln"), d);
        // Zero output projection: the state sublayer starts as an exact
        // identity and grows into the residual stream during training.
        store.get_mut(&format!("dec.{i}.state.wo")).data.fill(0.0);
        add_attention(&mut store, &mut init, &format!("dec.{i}.cross"), d);
        add_layer_norm(&mut store, &mut init, &format!("dec.{i}.cross_ln"), d);
        add_ffn(&mut store, &mut init, &format!("dec.{i}.ffn"), d, config.d_ff);
        add_layer_norm(&mut store, &mut init, &format!("dec.{i}.ffn_ln"), d);
    }

    // State vector injection: bias-free so a zero state adds exactly zero.
    store.insert("state_proj.w", init.gaussian(big_d, d));

    store.insert("entity_head.w", init.gaussian(d, ENTITY_CLASSES));
    store.insert("entity_head.b", init.zeros(1, ENTITY_CLASSES));

    add_attention(&mut store, &mut init, "state_query", d);
    store.insert("state_query.out.w", init.gaussian(d, big_d));
    store.insert("state_query.out.b", init.zeros(1, big_d));

    store.insert("codebook", init.unit_sphere_rows(config.codebook_size, big_d));
    store
}

/// Parameters of the stage-2 mention model: a plain encoder-decoder with
/// no codebook, no sentence encoder, and no state machinery.
pub fn init_mention_params(config: &ModelConfig, seed: u64) -> ParamStore {
    let mut init = Init::new(subseed(seed, "params-mention"));
    let mut store = ParamStore::new();
    let d = config.d_model;

    let mut tok = init.embedding(config.vocab_size, d);
    tok.data[NONE_ID * d..(NONE_ID + 1) * d].fill(0.0);
    store.insert("tok_emb", tok);
    store.insert("pos_enc", init.embedding(config.max_seq_len, d));
    store.insert("pos_dec", init.embedding(config.max_seq_len, d));

    add_encoder_blocks(&mut store, &mut init, "enc", config.n_encoder_blocks, d, config.d_ff);

    for i in 0..config.n_decoder_blocks {
        add_attention(&mut store, &mut init, &format!("dec.{i}.self"), d);
        add_layer_norm(&mut store, &mut init, &format!("dec.{i}.self_ln"), d);
        add_attention(&mut store, &mut init, &format!("dec.{i}.cross"), d);
        add_layer_norm(&mut store, &mut init, &format!("dec.{i}.cross_ln"), d);
        add_ffn(&mut store, &mut init, &format!("dec.{i}.ffn"), d, config.d_ff);
        add_layer_norm(&mut store, &mut init, &format!("dec.{i}.ffn_ln"), d);
    }
    store
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn none_embedding_starts_zero() {
        let cfg = ModelConfig::micro(120);
        let store = init_state_params(&cfg, 1);
        let tok = store.get("tok_emb");
        let d = cfg.d_model;
        assert!(tok.data[NONE_ID * d..(NONE_ID + 1) * d].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn codebook_rows_unit_norm() {
        let cfg = ModelConfig::micro(120);
        let store = init_state_params(&cfg, 1);
        for row in store.get("codebook").data.chunks(cfg.state_dim) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn state_attention_output_projection_starts_zero() {
        let cfg = ModelConfig::micro(120);
        let store = init_state_params(&cfg, 1);
        assert!(store.get("dec.0.state.wo").data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mention_params_have_no_state_machinery() {
        let cfg = ModelConfig::micro(120);
        let store = init_mention_params(&cfg, 1);
        assert!(!store.contains("codebook"));
        assert!(!store.contains("state_proj.w"));
        assert!(!store.contains("dec.0.state.wq"));
        assert!(store.contains("dec.0.self.wq"));
    }

    #[test]
    fn flatten_round_trips() {
        let cfg = ModelConfig::micro(120);
        let mut store = init_state_params(&cfg, 3);
        let flat = store.flatten();
        let mut copy = store.clone();
        copy.load_flat(&flat).unwrap();
        store.load_flat(&flat).unwrap();
        assert_eq!(store.flatten(), copy.flatten());
    }

    #[test]
    fn init_is_seed_deterministic() {
        let cfg = ModelConfig::micro(120);
        let a = init_state_params(&cfg, 9).flatten();
        let b = init_state_params(&cfg, 9).flatten();
        assert_eq!(a, b);
    }
}
