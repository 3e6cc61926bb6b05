//! Sequence encoder: item and position embeddings followed by one causal
//! self-attention block and masked mean pooling.

use crate::autograd::{AttentionSpec, Graph, Var};
use crate::corpus::{Domain, PAD};
use crate::error::{Error, Result};
use crate::nn::{Dropout, LayerNorm, Linear};
use crate::params::{normal, ParamId, ParamStore};
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SeqKind {
    Real,
    Pseudo,
}

/// Item tables (row 0 is the frozen padding row) and the two position tables.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTables {
    pub item_x: ParamId,
    pub item_y: ParamId,
    pub pos_real: ParamId,
    pub pos_pseudo: ParamId,
    pub t: usize,
    pub t_prime: usize,
}

impl EmbeddingTables {
    pub const INIT_STD: f64 = 0.02;

    pub fn new(
        store: &mut ParamStore,
        n_items_x: usize,
        n_items_y: usize,
        d: usize,
        t: usize,
        t_prime: usize,
        rng: &mut Rng,
    ) -> Self {
        let s = Self::INIT_STD;
        Self {
            item_x: store.add_table("emb.item_x", normal(n_items_x + 1, d, s, rng)),
            item_y: store.add_table("emb.item_y", normal(n_items_y + 1, d, s, rng)),
            pos_real: store.add("emb.pos_real", normal(t, d, s, rng)),
            pos_pseudo: store.add("emb.pos_pseudo", normal(t_prime, d, s, rng)),
            t,
            t_prime,
        }
    }

    pub fn items(&self, domain: Domain) -> ParamId {
        match domain {
            Domain::X => self.item_x,
            Domain::Y => self.item_y,
        }
    }

    pub fn length(&self, kind: SeqKind) -> usize {
        match kind {
            SeqKind::Real => self.t,
            SeqKind::Pseudo => self.t_prime,
        }
    }

    fn positions(&self, kind: SeqKind) -> ParamId {
        match kind {
            SeqKind::Real => self.pos_real,
            SeqKind::Pseudo => self.pos_pseudo,
        }
    }
}

/// Encoded batch of sequences: `batch·len × d` rows, the non-padding mask and
/// the masked mean of the rows per sequence (`batch × d`).
#[derive(Clone, Debug)]
pub struct SequenceRep {
    pub matrix: Var,
    pub mask: Vec<bool>,
    pub pooled: Var,
    pub batch: usize,
    pub len: usize,
}

/// Row `i` of sequence `b` is `item_table[items[b][i]] + position_table[i]`.
/// Returns the stacked rows and the real-item mask.
pub fn embed_sequence(
    g: &mut Graph,
    store: &ParamStore,
    tables: &EmbeddingTables,
    items: &[&[u32]],
    domain: Domain,
    kind: SeqKind,
) -> Result<(Var, Vec<bool>)> {
    let len = tables.length(kind);
    let mut flat = Vec::with_capacity(items.len() * len);
    for seq in items {
        if seq.len() != len {
            return Err(Error::Shape(format!(
                "{kind:?} sequence of length {} where {len} is required",
                seq.len()
            )));
        }
        flat.extend(seq.iter().map(|&i| i as usize));
    }
    let mask = flat.iter().map(|&i| i != PAD as usize).collect();
    let rows = g.gather_param(store, tables.items(domain), &flat, true)?;
    let pos = g.param(store, tables.positions(kind));
    let pos = g.tile_rows(pos, items.len());
    Ok((g.add(rows, pos), mask))
}

/// Mean over unmasked rows of each sequence; zero for all-padding sequences.
pub fn pool(g: &mut Graph, matrix: Var, mask: &[bool], len: usize) -> Var {
    g.masked_mean(matrix, mask, len)
}

/// One self-attention block: pre-normalized causal multi-head attention with
/// padding keys masked out, then a position-wise feed-forward layer, both
/// with residual connections, and a final layer normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct SelfAttentionBlock {
    pub heads: usize,
    pub ln_attn: LayerNorm,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub ln_ffn: LayerNorm,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
    pub ln_final: LayerNorm,
}

impl SelfAttentionBlock {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, heads: usize, rng: &mut Rng) -> Self {
        Self {
            heads,
            ln_attn: LayerNorm::new(store, &format!("{name}.ln_attn"), d),
            query: Linear::new(store, &format!("{name}.query"), d, d, rng),
            key: Linear::new(store, &format!("{name}.key"), d, d, rng),
            value: Linear::new(store, &format!("{name}.value"), d, d, rng),
            out: Linear::new(store, &format!("{name}.out"), d, d, rng),
            ln_ffn: LayerNorm::new(store, &format!("{name}.ln_ffn"), d),
            ffn_in: Linear::new(store, &format!("{name}.ffn_in"), d, d, rng),
            ffn_out: Linear::new(store, &format!("{name}.ffn_out"), d, d, rng),
            ln_final: LayerNorm::new(store, &format!("{name}.ln_final"), d),
        }
    }

    /// Returns the attended rows and the attention node (for inspecting
    /// attention weights).
    pub fn attend(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        mask: &[bool],
        len: usize,
        dropout: &mut Dropout,
    ) -> (Var, Var) {
        let batch = mask.len() / len;
        let x = dropout.apply(g, x);
        let normed = self.ln_attn.forward(g, store, x);
        let q = self.query.forward(g, store, normed);
        let k = self.key.forward(g, store, x);
        let v = self.value.forward(g, store, x);
        let spec = AttentionSpec {
            batch,
            len_q: len,
            len_k: len,
            heads: self.heads,
            key_mask: mask.to_vec(),
            causal: true,
        };
        let att = g.attention(q, k, v, spec);
        let a = self.out.forward(g, store, att);
        let a = dropout.apply(g, a);
        let h = g.add(normed, a);
        let h = self.ln_ffn.forward(g, store, h);
        let f = self.ffn_in.forward(g, store, h);
        let f = g.silu(f);
        let f = dropout.apply(g, f);
        let f = self.ffn_out.forward(g, store, f);
        let f = dropout.apply(g, f);
        let h = g.add(h, f);
        (self.ln_final.forward(g, store, h), att)
    }
}

/// Per-domain encoders; the real and pseudo paths of a domain share the item
/// table and the attention block but use separate position tables.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceEncoder {
    pub tables: EmbeddingTables,
    pub block_x: SelfAttentionBlock,
    pub block_y: SelfAttentionBlock,
}

impl SequenceEncoder {
    pub fn block(&self, domain: Domain) -> &SelfAttentionBlock {
        match domain {
            Domain::X => &self.block_x,
            Domain::Y => &self.block_y,
        }
    }

    pub fn encode(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        items: &[&[u32]],
        domain: Domain,
        kind: SeqKind,
        dropout: &mut Dropout,
    ) -> Result<SequenceRep> {
        let len = self.tables.length(kind);
        let (emb, mask) = embed_sequence(g, store, &self.tables, items, domain, kind)?;
        let (matrix, _) = self.block(domain).attend(g, store, emb, &mask, len, dropout);
        let pooled = pool(g, matrix, &mask, len);
        Ok(SequenceRep {
            matrix,
            mask,
            pooled,
            batch: items.len(),
            len,
        })
    }
}
