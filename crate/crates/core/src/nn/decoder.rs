use super::attention::{multi_head_attention, AttentionParams, AttnMask, AttnScale};
use super::encoder::embed_sequence;
use super::layers::{FeedForward, LayerNormParams};
use super::{Forward, ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::graph::Var;
use crate::Tensor;
use rand_chacha::ChaCha8Rng;

/// Post-norm decoder block: causal self-attention, cross-attention over
/// the encoder memory, then feed-forward.
#[derive(Clone, Copy)]
pub struct DecoderLayer {
    pub self_attn: AttentionParams,
    pub cross_attn: AttentionParams,
    pub ffn: FeedForward,
    pub ln_self: LayerNormParams,
    pub ln_cross: LayerNormParams,
    pub ln_ffn: LayerNormParams,
}

impl DecoderLayer {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        heads: usize,
        ffn_width: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(DecoderLayer {
            self_attn: AttentionParams::new(
                store,
                &format!("{name}.self_attn"),
                width,
                heads,
                rng,
            )?,
            cross_attn: AttentionParams::new(
                store,
                &format!("{name}.cross_attn"),
                width,
                heads,
                rng,
            )?,
            ffn: FeedForward::new(store, &format!("{name}.ffn"), width, ffn_width, rng)?,
            ln_self: LayerNormParams::new(store, &format!("{name}.ln_self"), width)?,
            ln_cross: LayerNormParams::new(store, &format!("{name}.ln_cross"), width)?,
            ln_ffn: LayerNormParams::new(store, &format!("{name}.ln_ffn"), width)?,
        })
    }

    pub fn forward(
        &self,
        fwd: &mut Forward,
        x: Var,
        memory: Var,
        self_mask: &AttnMask,
        memory_mask: Option<&AttnMask>,
        dropout: f64,
    ) -> Result<Var> {
        let attn = multi_head_attention(
            fwd,
            x,
            x,
            x,
            &self.self_attn,
            Some(self_mask),
            None,
            AttnScale::PerHead,
        )?;
        let attn = fwd.dropout(attn, dropout)?;
        let x = fwd.graph.add(x, attn)?;
        let x = self.ln_self.forward(fwd, x)?;

        let cross = multi_head_attention(
            fwd,
            x,
            memory,
            memory,
            &self.cross_attn,
            memory_mask,
            None,
            AttnScale::PerHead,
        )?;
        let cross = fwd.dropout(cross, dropout)?;
        let x = fwd.graph.add(x, cross)?;
        let x = self.ln_cross.forward(fwd, x)?;

        let ff = self.ffn.forward(fwd, x)?;
        let ff = fwd.dropout(ff, dropout)?;
        let x = fwd.graph.add(x, ff)?;
        self.ln_ffn.forward(fwd, x)
    }
}

/// Decoder stack over a target prefix. Returns next-token logits at every
/// prefix position, projected with the (tied) embedding table transposed.
#[allow(clippy::too_many_arguments)]
pub fn decoder_forward(
    fwd: &mut Forward,
    table: ParamId,
    positions: &Tensor,
    layers: &[DecoderLayer],
    prefix_ids: &[u32],
    memory: Var,
    memory_is_pad: Option<&[bool]>,
    dropout: f64,
) -> Result<Var> {
    if prefix_ids.is_empty() {
        return Err(Error::usage(
            "decoder_forward: empty prefix; sequences start with the begin token",
        ));
    }
    let mut x = embed_sequence(fwd, table, positions, prefix_ids, dropout)?;
    let causal = AttnMask::causal(prefix_ids.len());
    let memory_mask = memory_is_pad.map(|pads| AttnMask::key_padding(prefix_ids.len(), pads));
    for layer in layers {
        x = layer.forward(fwd, x, memory, &causal, memory_mask.as_ref(), dropout)?;
    }
    let table_var = fwd.param(table);
    let table_t = fwd.graph.transpose(table_var)?;
    fwd.graph.matmul(x, table_t)
}
