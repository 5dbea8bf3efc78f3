use super::attention::{multi_head_attention, AttentionParams, AttnMask, AttnScale};
use super::layers::{FeedForward, LayerNormParams};
use super::positional::position_rows;
use super::{Forward, ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::graph::Var;
use crate::Tensor;
use rand_chacha::ChaCha8Rng;

/// Post-norm transformer block: self-attention and feed-forward, each
/// wrapped in residual + layer norm.
#[derive(Clone, Copy)]
pub struct EncoderLayer {
    pub self_attn: AttentionParams,
    pub ffn: FeedForward,
    pub ln_attn: LayerNormParams,
    pub ln_ffn: LayerNormParams,
}

impl EncoderLayer {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        heads: usize,
        ffn_width: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(EncoderLayer {
            self_attn: AttentionParams::new(
                store,
                &format!("{name}.self_attn"),
                width,
                heads,
                rng,
            )?,
            ffn: FeedForward::new(store, &format!("{name}.ffn"), width, ffn_width, rng)?,
            ln_attn: LayerNormParams::new(store, &format!("{name}.ln_attn"), width)?,
            ln_ffn: LayerNormParams::new(store, &format!("{name}.ln_ffn"), width)?,
        })
    }

    pub fn forward(
        &self,
        fwd: &mut Forward,
        x: Var,
        mask: Option<&AttnMask>,
        dropout: f64,
    ) -> Result<Var> {
        let attn = multi_head_attention(
            fwd,
            x,
            x,
            x,
            &self.self_attn,
            mask,
            None,
            AttnScale::PerHead,
        )?;
        let attn = fwd.dropout(attn, dropout)?;
        let x = fwd.graph.add(x, attn)?;
        let x = self.ln_attn.forward(fwd, x)?;
        let ff = self.ffn.forward(fwd, x)?;
        let ff = fwd.dropout(ff, dropout)?;
        let x = fwd.graph.add(x, ff)?;
        self.ln_ffn.forward(fwd, x)
    }
}

/// Token embedding scaled by sqrt(width), plus sinusoidal positions and
/// dropout.
pub fn embed_sequence(
    fwd: &mut Forward,
    table: ParamId,
    positions: &Tensor,
    ids: &[u32],
    dropout: f64,
) -> Result<Var> {
    if ids.is_empty() {
        return Err(Error::usage("embed_sequence: empty id sequence"));
    }
    let (max_len, width) = positions.dims2()?;
    if ids.len() > max_len {
        return Err(Error::data(format!(
            "sequence length {} exceeds maximum positions {}",
            ids.len(),
            max_len
        )));
    }
    let table_var = fwd.param(table);
    let emb = fwd.graph.embedding_lookup(table_var, ids)?;
    let emb = fwd.graph.scale(emb, (width as f64).sqrt())?;
    let pos = fwd.leaf(position_rows(positions, ids.len()));
    let x = fwd.graph.add(emb, pos)?;
    fwd.dropout(x, dropout)
}

/// Encoder stack over token ids; padded key positions are masked out of
/// every self-attention layer.
#[allow(clippy::too_many_arguments)]
pub fn encoder_forward(
    fwd: &mut Forward,
    table: ParamId,
    positions: &Tensor,
    layers: &[EncoderLayer],
    ids: &[u32],
    pad_id: u32,
    dropout: f64,
) -> Result<Var> {
    let mut x = embed_sequence(fwd, table, positions, ids, dropout)?;
    let key_is_pad: Vec<bool> = ids.iter().map(|&id| id == pad_id).collect();
    let mask = AttnMask::key_padding(ids.len(), &key_is_pad);
    for layer in layers {
        x = layer.forward(fwd, x, Some(&mask), dropout)?;
    }
    Ok(x)
}
