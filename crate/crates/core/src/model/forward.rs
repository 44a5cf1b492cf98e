//! Tape-recorded forward passes for both model stages, producing the
//! three losses and all per-sentence intermediate quantities.
//!
//! The stage-1 decoder runs, per block: causal self-attention, entity
//! state attention (keys/values restricted to prefix `<s>` positions),
//! cross-attention over the input encoding, then the feed-forward, each
//! wrapped in a residual. Self/cross/FFN sublayers are post-normalized;
//! the state sublayer normalizes its input instead, so zeroing its output
//! projection reduces the block exactly to a standard decoder block.

use crate::autodiff::{Tape, Var};
use crate::error::{CoreError, Result};
use crate::model::config::{entity_class, ModelConfig};
use crate::model::params::{init_mention_params, init_state_params, ParamStore};
use crate::model::quantize::quantize_state;
use crate::text::vocab::{placeholder_id, EOS_ID, NONE_ID, S_ID};
use crate::text::AnonymizedExample;
use std::collections::HashMap;

// ─── Parameter binding ───────────────────────────────────────────────

/// Tape handles for every parameter of a store, one forward pass worth.
pub struct BoundParams {
    vars: Vec<Var>,
    map: HashMap<String, Var>,
}

pub fn bind_params(tape: &mut Tape, store: &ParamStore) -> Result<BoundParams> {
    let mut vars = Vec::with_capacity(store.len());
    let mut map = HashMap::with_capacity(store.len());
    for (name, tensor) in store.iter() {
        let v = tape.leaf(tensor)?;
        vars.push(v);
        map.insert(name.to_string(), v);
    }
    Ok(BoundParams { vars, map })
}

impl BoundParams {
    pub fn v(&self, name: &str) -> Var {
        *self.map.get(name).unwrap_or_else(|| panic!("unbound parameter '{name}'"))
    }

    /// Handles aligned with the store's registration order.
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Parameter gradients in registration order; zero where unused.
pub fn extract_grads(tape: &Tape, bound: &BoundParams, store: &ParamStore) -> Vec<Vec<f64>> {
    bound
        .vars()
        .iter()
        .zip(store.iter())
        .map(|(&v, (_, t))| tape.grad(v).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect()
}

// ─── Masks ───────────────────────────────────────────────────────────

pub fn full_mask(tq: usize, tk: usize) -> Vec<bool> {
    vec![true; tq * tk]
}

pub fn causal_mask(t: usize) -> Vec<bool> {
    (0..t * t).map(|i| i % t <= i / t).collect()
}

/// Key j (an `<s>` position) is visible to query t iff it is at or before t.
pub fn prefix_state_mask(t: usize, s_positions: &[usize]) -> Vec<bool> {
    let mut mask = Vec::with_capacity(t * s_positions.len());
    for q in 0..t {
        for &p in s_positions {
            mask.push(p <= q);
        }
    }
    mask
}

// ─── Sublayers ───────────────────────────────────────────────────────

fn attention_sublayer(
    tape: &mut Tape,
    b: &BoundParams,
    prefix: &str,
    ln_prefix: &str,
    x: Var,
    kv: Option<Var>,
    mask: &[bool],
    heads: usize,
) -> Result<Var> {
    let source = kv.unwrap_or(x);
    let q = tape.linear(x, b.v(&format!("{prefix}.wq")), Some(b.v(&format!("{prefix}.bq"))))?;
    let k = tape.linear(source, b.v(&format!("{prefix}.wk")), Some(b.v(&format!("{prefix}.bk"))))?;
    let v = tape.linear(source, b.v(&format!("{prefix}.wv")), Some(b.v(&format!("{prefix}.bv"))))?;
    let att = tape.masked_attention(q, k, v, mask, heads)?;
    let o = tape.linear(att, b.v(&format!("{prefix}.wo")), Some(b.v(&format!("{prefix}.bo"))))?;
    let res = tape.add(x, o)?;
    tape.layer_norm(res, b.v(&format!("{ln_prefix}.gain")), b.v(&format!("{ln_prefix}.bias")))
}

fn ffn_sublayer(tape: &mut Tape, b: &BoundParams, prefix: &str, ln_prefix: &str, x: Var) -> Result<Var> {
    let h = tape.linear(x, b.v(&format!("{prefix}.w1")), Some(b.v(&format!("{prefix}.b1"))))?;
    let h = tape.gelu(h);
    let o = tape.linear(h, b.v(&format!("{prefix}.w2")), Some(b.v(&format!("{prefix}.b2"))))?;
    let res = tape.add(x, o)?;
    tape.layer_norm(res, b.v(&format!("{ln_prefix}.gain")), b.v(&format!("{ln_prefix}.bias")))
}

/// Entity state attention. Queries are all positions; keys/values are the
/// prefix `<s>` rows of the (input-normalized) self-attention output. The
/// residual is added outside the normalization, so a zero output
/// projection leaves the stream untouched.
pub fn state_sublayer(
    tape: &mut Tape,
    b: &BoundParams,
    block: usize,
    t_l: Var,
    s_positions: &[usize],
    heads: usize,
) -> Result<Var> {
    if s_positions.is_empty() || s_positions[0] != 0 {
        return Err(CoreError::Construction(
            "entity state attention requires an <s> token at position 0".into(),
        ));
    }
    let (t_len, _) = tape.shape2(t_l);
    let prefix = format!("dec.{block}.state");
    let normed = tape.layer_norm(
        t_l,
        b.v(&format!("{prefix}_ln.gain")),
        b.v(&format!("{prefix}_ln.bias")),
    )?;
    let keys_src = tape.gather_rows(normed, s_positions)?;
    let q = tape.linear(normed, b.v(&format!("{prefix}.wq")), Some(b.v(&format!("{prefix}.bq"))))?;
    let k = tape.linear(keys_src, b.v(&format!("{prefix}.wk")), Some(b.v(&format!("{prefix}.bk"))))?;
    let v = tape.linear(keys_src, b.v(&format!("{prefix}.wv")), Some(b.v(&format!("{prefix}.bv"))))?;
    let mask = prefix_state_mask(t_len, s_positions);
    let att = tape.masked_attention(q, k, v, &mask, heads)?;
    let o = tape.linear(att, b.v(&format!("{prefix}.wo")), Some(b.v(&format!("{prefix}.bo"))))?;
    tape.add(t_l, o)
}

/// Bidirectional encoder stack (input encoder or sentence encoder).
fn encoder_stack(
    tape: &mut Tape,
    b: &BoundParams,
    config: &ModelConfig,
    block_prefix: &str,
    tok_emb: &str,
    pos_emb: &str,
    ids: &[usize],
) -> Result<Var> {
    let t = ids.len();
    let tok = tape.gather_rows(b.v(tok_emb), ids)?;
    let positions: Vec<usize> = (0..t).collect();
    let pos = tape.gather_rows(b.v(pos_emb), &positions)?;
    let mut x = tape.add(tok, pos)?;
    let mask = full_mask(t, t);
    for i in 0..config.n_encoder_blocks {
        x = attention_sublayer(
            tape,
            b,
            &format!("{block_prefix}.{i}.attn"),
            &format!("{block_prefix}.{i}.attn_ln"),
            x,
            None,
            &mask,
            config.n_heads,
        )?;
        x = ffn_sublayer(
            tape,
            b,
            &format!("{block_prefix}.{i}.ffn"),
            &format!("{block_prefix}.{i}.ffn_ln"),
            x,
        )?;
    }
    Ok(x)
}

// ─── Traces ──────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub lm: f64,
    pub ent: f64,
    pub cl: f64,
    pub total: f64,
}

/// Value snapshot of one training forward pass: losses and all
/// per-sentence quantities, indexed `[example][sentence]`.
#[derive(Clone, Debug, Default)]
pub struct ForwardTrace {
    pub losses: LossBreakdown,
    /// k index of the gold quantized state s_n.
    pub state_indices: Vec<Vec<Option<usize>>>,
    /// k index of the predicted quantized state (quantized e-hat).
    pub pred_state_indices: Vec<Vec<Option<usize>>>,
    /// Event representations e_n (unit vectors).
    pub events: Vec<Vec<Option<Vec<f64>>>>,
    /// Predicted state representations e-hat_n (unit vectors).
    pub pred_events: Vec<Vec<Option<Vec<f64>>>>,
    /// Joint representations c_n (unit vectors).
    pub joints: Vec<Vec<Option<Vec<f64>>>>,
    /// Straight-through offsets (s_n - e_n) frozen at this evaluation
    /// point; lets a re-run differentiate the identical surrogate loss.
    pub st_offsets: Vec<Vec<Option<Vec<f64>>>>,
}

/// How the forward treats the discrete lookup.
#[derive(Clone, Copy)]
pub enum Quantization<'a> {
    /// Nearest-neighbor lookup per sentence.
    Live,
    /// Replay indices and straight-through offsets from a previous trace,
    /// making the recorded loss a smooth function of the parameters
    /// (finite-difference oracles need this).
    Frozen(&'a ForwardTrace),
}

#[derive(Clone, Copy)]
pub struct ForwardOptions<'a> {
    pub quantization: Quantization<'a>,
    /// Inject zero state vectors and skip the sentence encoder and the
    /// contrastive loss (the "no states" ablation).
    pub zero_states: bool,
}

impl Default for ForwardOptions<'_> {
    fn default() -> Self {
        ForwardOptions { quantization: Quantization::Live, zero_states: false }
    }
}

/// Tape handles for one example's forward pass.
pub struct ExampleForward {
    pub memory: Var,
    pub h0: Var,
    /// Post-norm self-attention outputs t^l per block.
    pub block_t: Vec<Var>,
    /// State-attention outputs h^l per block.
    pub block_h: Vec<Var>,
    pub h_final: Var,
    /// Context summaries q_{n-1}, one per sentence.
    pub queries: Vec<Var>,
    /// e_n per sentence (entity sentences only).
    pub events: Vec<Option<Var>>,
    /// e-hat_n per sentence (entity sentences, contrastive path only).
    pub pred_events: Vec<Option<Var>>,
    /// c_n per sentence.
    pub joints: Vec<Option<Var>>,
    pub state_indices: Vec<Option<usize>>,
    pub pred_state_indices: Vec<Option<usize>>,
    pub st_offsets: Vec<Option<Vec<f64>>>,
    pub lm_sum: Var,
    pub lm_count: usize,
    pub ent_sum: Var,
    pub ent_count: usize,
}

/// Tape handles for a whole batch plus the combined losses.
pub struct BatchForward {
    pub bound: BoundParams,
    pub examples: Vec<ExampleForward>,
    pub lm: Var,
    pub ent: Var,
    pub cl: Var,
    pub total: Var,
    pub cl_queries: usize,
}

impl BatchForward {
    pub fn losses(&self, tape: &Tape) -> LossBreakdown {
        LossBreakdown {
            lm: tape.value(self.lm)[0],
            ent: tape.value(self.ent)[0],
            cl: tape.value(self.cl)[0],
            total: tape.value(self.total)[0],
        }
    }

    /// Extract the value-level snapshot of this pass.
    pub fn trace(&self, tape: &Tape) -> ForwardTrace {
        let grab = |v: &Option<Var>| v.map(|v| tape.value(v).to_vec());
        ForwardTrace {
            losses: self.losses(tape),
            state_indices: self.examples.iter().map(|e| e.state_indices.clone()).collect(),
            pred_state_indices: self.examples.iter().map(|e| e.pred_state_indices.clone()).collect(),
            events: self.examples.iter().map(|e| e.events.iter().map(grab).collect()).collect(),
            pred_events: self.examples.iter().map(|e| e.pred_events.iter().map(grab).collect()).collect(),
            joints: self.examples.iter().map(|e| e.joints.iter().map(grab).collect()).collect(),
            st_offsets: self.examples.iter().map(|e| e.st_offsets.clone()).collect(),
        }
    }
}

/// Temperature-scaled infoNCE over a batch of unit vectors. Query i's
/// positive is `joints[i]`; the denominator runs over every joint in the
/// batch, the positive included.
pub fn contrastive_loss(tape: &mut Tape, e_hats: &[Var], joints: &[Var], tau: f64) -> Result<Var> {
    if e_hats.len() != joints.len() || e_hats.is_empty() {
        return Err(CoreError::Dimension(format!(
            "contrastive loss needs matched non-empty query/positive lists, got {} and {}",
            e_hats.len(),
            joints.len()
        )));
    }
    let c_mat = tape.concat_rows(joints)?;
    let mut terms = Vec::with_capacity(e_hats.len());
    for (i, &eh) in e_hats.iter().enumerate() {
        let sims = tape.matmul_nt(eh, c_mat)?;
        let logits = tape.scale(sims, 1.0 / tau);
        terms.push(tape.cross_entropy(logits, i)?);
    }
    let sum = tape.add_n(&terms)?;
    Ok(tape.scale(sum, 1.0 / e_hats.len() as f64))
}

// ─── Stage-1 model ───────────────────────────────────────────────────

pub struct StateModel {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl StateModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = init_state_params(&config, seed);
        Ok(StateModel { config, params })
    }

    pub fn from_parts(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        Ok(StateModel { config, params })
    }

    /// Bidirectional encoding of the input tokens (the cross-attention
    /// memory). Overlength inputs are truncated with a warning.
    pub fn encode_input(&self, tape: &mut Tape, b: &BoundParams, input_ids: &[usize]) -> Result<Var> {
        let ids = self.clip_input(input_ids);
        encoder_stack(tape, b, &self.config, "enc", "tok_emb", "pos_enc", &ids)
    }

    fn clip_input(&self, input_ids: &[usize]) -> Vec<usize> {
        let mut ids: Vec<usize> = input_ids.to_vec();
        if ids.is_empty() {
            ids.push(EOS_ID);
        }
        if ids.len() > self.config.max_seq_len {
            log::warn!("input of {} tokens truncated to {}", ids.len(), self.config.max_seq_len);
            ids.truncate(self.config.max_seq_len);
        }
        ids
    }

    /// Event representation e_n: sentence-encoder hidden state at the
    /// placeholder position, projected to state dimensions, unit-normed.
    pub fn encode_sentence_event(
        &self,
        tape: &mut Tape,
        b: &BoundParams,
        sentence_ids: &[usize],
        placeholder_position: usize,
    ) -> Result<Var> {
        if placeholder_position >= sentence_ids.len() {
            return Err(CoreError::Index(format!(
                "placeholder position {placeholder_position} outside sentence of {} tokens",
                sentence_ids.len()
            )));
        }
        let hidden = encoder_stack(tape, b, &self.config, "sent", "sent.tok_emb", "sent.pos", sentence_ids)?;
        let at = tape.slice_rows(hidden, placeholder_position, 1)?;
        let proj = tape.linear(at, b.v("event_proj.w"), Some(b.v("event_proj.b")))?;
        tape.l2_normalize_rows(proj)
    }

    /// Decoder input H0: token+positional embeddings everywhere, plus
    /// E(p_n) and the projected state vector at each sentence's `<s>`.
    #[allow(clippy::too_many_arguments)]
    fn compose_decoder_input(
        &self,
        tape: &mut Tape,
        b: &BoundParams,
        dec_ids: &[usize],
        s_positions: &[usize],
        entities: &[Option<usize>],
        states: &[Var],
    ) -> Result<Var> {
        let t = dec_ids.len();
        let tok = tape.gather_rows(b.v("tok_emb"), dec_ids)?;
        let positions: Vec<usize> = (0..t).collect();
        let pos = tape.gather_rows(b.v("pos_dec"), &positions)?;
        let base = tape.add(tok, pos)?;

        let ent_ids: Vec<usize> =
            entities.iter().map(|e| e.map(placeholder_id).unwrap_or(NONE_ID)).collect();
        let ent_rows = tape.gather_rows(b.v("tok_emb"), &ent_ids)?;
        let state_mat = tape.concat_rows(states)?;
        let state_rows = tape.matmul(state_mat, b.v("state_proj.w"))?;
        let rows = tape.add(ent_rows, state_rows)?;
        tape.scatter_add_rows(base, rows, s_positions)
    }

    fn decoder_stack(
        &self,
        tape: &mut Tape,
        b: &BoundParams,
        h0: Var,
        memory: Var,
        s_positions: &[usize],
    ) -> Result<(Var, Vec<Var>, Vec<Var>)> {
        let (t, _) = tape.shape2(h0);
        let (m, _) = tape.shape2(memory);
        let causal = causal_mask(t);
        let cross = full_mask(t, m);
        let mut x = h0;
        let mut block_t = Vec::new();
        let mut block_h = Vec::new();
        for i in 0..self.config.n_decoder_blocks {
            let t_l = attention_sublayer(
                tape,
                b,
                &format!("dec.{i}.self"),
                &format!("dec.{i}.self_ln"),
                x,
                None,
                &causal,
                self.config.n_heads,
            )?;
            let h_l = state_sublayer(tape, b, i, t_l, s_positions, self.config.n_heads)?;
            let c_l = attention_sublayer(
                tape,
                b,
                &format!("dec.{i}.cross"),
                &format!("dec.{i}.cross_ln"),
                h_l,
                Some(memory),
                &cross,
                self.config.n_heads,
            )?;
            x = ffn_sublayer(tape, b, &format!("dec.{i}.ffn"), &format!("dec.{i}.ffn_ln"), c_l)?;
            block_t.push(t_l);
            block_h.push(h_l);
        }
        Ok((x, block_t, block_h))
    }

    /// q_{n-1} + E(p_n) attends over all prefix hidden states, then maps
    /// to state dimensions and normalizes: the predicted representation
    /// of the next entity's state.
    fn predict_state_representation(
        &self,
        tape: &mut Tape,
        b: &BoundParams,
        query_base: Var,
        entity: Option<usize>,
        prefix_hidden: Var,
    ) -> Result<Var> {
        let ent_id = entity.map(placeholder_id).unwrap_or(NONE_ID);
        let ent_emb = tape.gather_rows(b.v("tok_emb"), &[ent_id])?;
        let query = tape.add(query_base, ent_emb)?;
        let (p, _) = tape.shape2(prefix_hidden);
        if p == 0 {
            return Err(CoreError::Construction("empty key set for state prediction".into()));
        }
        let q = tape.linear(query, b.v("state_query.wq"), Some(b.v("state_query.bq")))?;
        let k = tape.linear(prefix_hidden, b.v("state_query.wk"), Some(b.v("state_query.bk")))?;
        let v = tape.linear(prefix_hidden, b.v("state_query.wv"), Some(b.v("state_query.bv")))?;
        let att = tape.masked_attention(q, k, v, &full_mask(1, p), self.config.n_heads)?;
        let o = tape.linear(att, b.v("state_query.wo"), Some(b.v("state_query.bo")))?;
        let proj = tape.linear(o, b.v("state_query.out.w"), Some(b.v("state_query.out.b")))?;
        tape.l2_normalize_rows(proj)
    }

    /// Run the full training forward over a batch of examples.
    pub fn forward_batch(
        &self,
        tape: &mut Tape,
        examples: &[&AnonymizedExample],
        opts: &ForwardOptions,
    ) -> Result<BatchForward> {
        if examples.is_empty() {
            return Err(CoreError::Structural("empty batch".into()));
        }
        let b = bind_params(tape, &self.params)?;
        let d_state = self.config.state_dim;
        let compute_cl = !opts.zero_states && self.config.lambda2 != 0.0;

        let mut fwds: Vec<ExampleForward> = Vec::with_capacity(examples.len());
        for (ex_idx, ex) in examples.iter().enumerate() {
            let n_sentences = ex.n_sentences();
            if ex.output_ids.len() < 2 || ex.output_ids.len() - 1 > self.config.max_seq_len {
                return Err(CoreError::Structural(format!(
                    "example output of {} tokens exceeds max_seq_len {}",
                    ex.output_ids.len(),
                    self.config.max_seq_len
                )));
            }

            let memory = self.encode_input(tape, &b, &ex.input_ids)?;
            let (mem_len, _) = tape.shape2(memory);

            // Per-sentence event representations and injected states.
            let mut events: Vec<Option<Var>> = vec![None; n_sentences];
            let mut state_indices: Vec<Option<usize>> = vec![None; n_sentences];
            let mut st_offsets: Vec<Option<Vec<f64>>> = vec![None; n_sentences];
            let mut injected: Vec<Var> = Vec::with_capacity(n_sentences);
            for n in 0..n_sentences {
                let entity = ex.mentioned_entity[n];
                if entity.is_none() || opts.zero_states {
                    injected.push(tape.zeros(1, d_state));
                    continue;
                }
                let body = ex.sentence_body(n);
                let ppos = ex.placeholder_position(n).ok_or_else(|| {
                    CoreError::Structural(format!(
                        "sentence {n} labeled with entity {:?} but no matching placeholder",
                        entity
                    ))
                })?;
                let e_n = self.encode_sentence_event(tape, &b, body, ppos)?;
                events[n] = Some(e_n);
                match opts.quantization {
                    Quantization::Live => {
                        let (k, row) = quantize_state(tape.value(e_n), self.params.get("codebook"))?;
                        state_indices[n] = Some(k);
                        let offset: Vec<f64> =
                            row.iter().zip(tape.value(e_n)).map(|(s, e)| s - e).collect();
                        st_offsets[n] = Some(offset);
                        let quantized = tape.constant(1, d_state, row)?;
                        injected.push(tape.straight_through(e_n, quantized)?);
                    }
                    Quantization::Frozen(trace) => {
                        let k = trace
                            .state_indices
                            .get(ex_idx)
                            .and_then(|s| s.get(n))
                            .copied()
                            .flatten()
                            .ok_or_else(|| {
                                CoreError::Structural("frozen trace missing state index".into())
                            })?;
                        let offset = trace.st_offsets[ex_idx][n].as_ref().ok_or_else(|| {
                            CoreError::Structural("frozen trace missing straight-through offset".into())
                        })?;
                        state_indices[n] = Some(k);
                        st_offsets[n] = Some(offset.clone());
                        injected.push(tape.add_const(e_n, offset)?);
                    }
                }
            }

            let dec_ids = &ex.output_ids[..ex.output_ids.len() - 1];
            let s_positions: Vec<usize> = ex.sentence_spans.iter().map(|&(s, _)| s).collect();
            let h0 = self.compose_decoder_input(
                tape,
                &b,
                dec_ids,
                &s_positions,
                &ex.mentioned_entity,
                &injected,
            )?;
            let (h_final, block_t, block_h) = self.decoder_stack(tape, &b, h0, memory, &s_positions)?;

            // Language-model loss: position t predicts token t+1 (teacher
            // forcing), through the tied output embedding.
            let logits = tape.matmul_nt(h_final, b.v("tok_emb"))?;
            let lm_targets: Vec<(usize, usize)> =
                (0..dec_ids.len()).map(|t| (t, ex.output_ids[t + 1])).collect();
            let lm_sum = tape.cross_entropy_sum(logits, &lm_targets)?;

            // Context summaries and the entity prediction loss.
            let mut queries = Vec::with_capacity(n_sentences);
            let mut ent_terms = Vec::with_capacity(n_sentences);
            for n in 0..n_sentences {
                let q = if n == 0 {
                    tape.mean_pool_rows(memory, 0, mem_len)?
                } else {
                    let (s, e) = ex.sentence_spans[n - 1];
                    tape.mean_pool_rows(h_final, s, e - s)?
                };
                let ent_logits = tape.linear(q, b.v("entity_head.w"), Some(b.v("entity_head.b")))?;
                ent_terms.push(tape.cross_entropy(ent_logits, entity_class(ex.mentioned_entity[n]))?);
                queries.push(q);
            }
            let ent_sum = tape.add_n(&ent_terms)?;

            // Predicted state representations for the contrastive loss.
            let mut pred_events: Vec<Option<Var>> = vec![None; n_sentences];
            let mut pred_state_indices: Vec<Option<usize>> = vec![None; n_sentences];
            let mut joints: Vec<Option<Var>> = vec![None; n_sentences];
            if compute_cl {
                for n in 0..n_sentences {
                    let Some(entity) = ex.mentioned_entity[n] else { continue };
                    let prefix_hidden = if n == 0 {
                        memory
                    } else {
                        let end = ex.sentence_spans[n - 1].1;
                        tape.slice_rows(h_final, 0, end)?
                    };
                    let e_hat = self.predict_state_representation(
                        tape,
                        &b,
                        queries[n],
                        Some(entity),
                        prefix_hidden,
                    )?;
                    pred_events[n] = Some(e_hat);
                    if let Quantization::Live = opts.quantization {
                        let (k, _) = quantize_state(tape.value(e_hat), self.params.get("codebook"))?;
                        pred_state_indices[n] = Some(k);
                    }
                    let s_var = tape.gather_rows(b.v("codebook"), &[state_indices[n].unwrap()])?;
                    let joint_raw = tape.add(events[n].unwrap(), s_var)?;
                    joints[n] = Some(tape.l2_normalize_rows(joint_raw)?);
                }
            }

            fwds.push(ExampleForward {
                memory,
                h0,
                block_t,
                block_h,
                h_final,
                queries,
                events,
                pred_events,
                joints,
                state_indices,
                pred_state_indices,
                st_offsets,
                lm_sum,
                lm_count: lm_targets.len(),
                ent_sum,
                ent_count: n_sentences,
            });
        }

        // Batch reductions: token-mean LM, sentence-mean entity loss.
        let lm_sums: Vec<Var> = fwds.iter().map(|f| f.lm_sum).collect();
        let lm_total: usize = fwds.iter().map(|f| f.lm_count).sum();
        let lm_sum = tape.add_n(&lm_sums)?;
        let lm = tape.scale(lm_sum, 1.0 / lm_total.max(1) as f64);

        let ent_sums: Vec<Var> = fwds.iter().map(|f| f.ent_sum).collect();
        let ent_total: usize = fwds.iter().map(|f| f.ent_count).sum();
        let ent_sum = tape.add_n(&ent_sums)?;
        let ent = tape.scale(ent_sum, 1.0 / ent_total.max(1) as f64);

        // infoNCE over every joint representation in the mini-batch.
        let mut cl_queries = 0;
        let cl = if compute_cl {
            let mut e_hats = Vec::new();
            let mut cs = Vec::new();
            for f in &fwds {
                for n in 0..f.ent_count {
                    if let (Some(eh), Some(c)) = (f.pred_events[n], f.joints[n]) {
                        e_hats.push(eh);
                        cs.push(c);
                    }
                }
            }
            cl_queries = e_hats.len();
            if e_hats.is_empty() {
                tape.zeros(1, 1)
            } else {
                contrastive_loss(tape, &e_hats, &cs, self.config.tau)?
            }
        } else {
            tape.zeros(1, 1)
        };

        let ent_scaled = tape.scale(ent, self.config.lambda1);
        let cl_scaled = tape.scale(cl, self.config.lambda2);
        let partial = tape.add(lm, ent_scaled)?;
        let total = tape.add(partial, cl_scaled)?;

        Ok(BatchForward { bound: b, examples: fwds, lm, ent, cl, total, cl_queries })
    }
}

// ─── Stage-2 model ───────────────────────────────────────────────────

/// One stage-2 training item: encoder source and decoder target ids.
pub struct MentionItem<'a> {
    pub src_ids: &'a [usize],
    pub target_ids: &'a [usize],
}

pub struct MentionForward {
    pub bound: BoundParams,
    pub lm: Var,
    pub total: Var,
}

pub struct MentionModel {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl MentionModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = init_mention_params(&config, seed);
        Ok(MentionModel { config, params })
    }

    pub fn from_parts(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        Ok(MentionModel { config, params })
    }

    pub fn forward_batch(&self, tape: &mut Tape, items: &[MentionItem]) -> Result<MentionForward> {
        if items.is_empty() {
            return Err(CoreError::Structural("empty batch".into()));
        }
        let b = bind_params(tape, &self.params)?;
        let mut sums = Vec::with_capacity(items.len());
        let mut count = 0usize;
        for item in items {
            let mut src: Vec<usize> = item.src_ids.to_vec();
            if src.is_empty() {
                src.push(EOS_ID);
            }
            if src.len() > self.config.max_seq_len {
                log::warn!("stage-2 source of {} tokens truncated", src.len());
                src.truncate(self.config.max_seq_len);
            }
            let mut targets: Vec<usize> = item.target_ids.to_vec();
            if targets.is_empty() {
                targets.push(EOS_ID);
            }
            if targets.len() > self.config.max_seq_len {
                targets.truncate(self.config.max_seq_len);
            }
            let memory = encoder_stack(tape, &b, &self.config, "enc", "tok_emb", "pos_enc", &src)?;
            let mut dec_ids = Vec::with_capacity(targets.len());
            dec_ids.push(S_ID);
            dec_ids.extend_from_slice(&targets[..targets.len() - 1]);

            let t = dec_ids.len();
            let tok = tape.gather_rows(b.v("tok_emb"), &dec_ids)?;
            let positions: Vec<usize> = (0..t).collect();
            let pos = tape.gather_rows(b.v("pos_dec"), &positions)?;
            let mut x = tape.add(tok, pos)?;
            let causal = causal_mask(t);
            let cross = full_mask(t, src.len());
            for i in 0..self.config.n_decoder_blocks {
                x = attention_sublayer(
                    tape,
                    &b,
                    &format!("dec.{i}.self"),
                    &format!("dec.{i}.self_ln"),
                    x,
                    None,
                    &causal,
                    self.config.n_heads,
                )?;
                x = attention_sublayer(
                    tape,
                    &b,
                    &format!("dec.{i}.cross"),
                    &format!("dec.{i}.cross_ln"),
                    x,
                    Some(memory),
                    &cross,
                    self.config.n_heads,
                )?;
                x = ffn_sublayer(tape, &b, &format!("dec.{i}.ffn"), &format!("dec.{i}.ffn_ln"), x)?;
            }
            let logits = tape.matmul_nt(x, b.v("tok_emb"))?;
            let pairs: Vec<(usize, usize)> = targets.iter().enumerate().map(|(t, &y)| (t, y)).collect();
            sums.push(tape.cross_entropy_sum(logits, &pairs)?);
            count += pairs.len();
        }
        let sum = tape.add_n(&sums)?;
        let lm = tape.scale(sum, 1.0 / count.max(1) as f64);
        Ok(MentionForward { bound: b, lm, total: lm })
    }
}
