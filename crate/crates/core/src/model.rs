//! The complete completion network: text encoder, visual prompt
//! generation, one intra-modal transformer block per stream, text-queries-
//! vision co-attention, and an autoregressive decoder whose memory is the
//! vision-guided token sequence. Output projection is tied to the token
//! embedding.

use crate::data::vocab::{BOS_ID, EOS_ID, NUM_SPECIALS, PAD_ID};
use crate::error::{Error, Result};
use crate::fvpg::{FvpgBlock, VisualFeatureSet};
use crate::graph::Var;
use crate::nn::positional::sinusoidal_table;
use crate::nn::{
    decoder_forward, encoder_forward, multi_head_attention, AttentionParams, AttnMask, AttnScale,
    DecoderLayer, EncoderLayer, Forward, LayerNormParams, ParamId, ParamStore,
};
use crate::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Model width C.
    pub width: usize,
    pub heads: usize,
    /// Encoder and decoder depth.
    pub layers: usize,
    /// Intra-modal transformer depth per stream.
    pub intra_depth: usize,
    pub ffn_width: usize,
    pub dropout: f64,
    pub label_smoothing: f64,
    pub vocab_size: usize,
    /// Local visual tokens M.
    pub local_tokens: usize,
    /// Vision feature width D_vis.
    pub vision_width: usize,
    pub max_positions: usize,
    /// Ablation mode: decoder memory is the text stream, the vision path
    /// is never built.
    pub no_vision: bool,
}

impl ModelConfig {
    /// Small configuration that trains in minutes on one CPU core.
    pub fn desk(vocab_size: usize) -> Self {
        ModelConfig {
            width: 128,
            heads: 4,
            layers: 2,
            intra_depth: 1,
            ffn_width: 512,
            dropout: 0.3,
            label_smoothing: 0.1,
            vocab_size,
            local_tokens: 6,
            vision_width: 16,
            max_positions: 64,
            no_vision: false,
        }
    }

    /// Full-scale configuration: 6 layers, 12 heads of width 64, a 7x7
    /// local crop grid at ViT-L/14 feature width.
    pub fn paper(vocab_size: usize) -> Self {
        ModelConfig {
            width: 768,
            heads: 12,
            layers: 6,
            intra_depth: 1,
            ffn_width: 3072,
            dropout: 0.3,
            label_smoothing: 0.1,
            vocab_size,
            local_tokens: 49,
            vision_width: 768,
            max_positions: 512,
            no_vision: false,
        }
    }

    /// Gradient-check scale.
    pub fn tiny(vocab_size: usize) -> Self {
        ModelConfig {
            width: 16,
            heads: 2,
            layers: 1,
            intra_depth: 1,
            ffn_width: 32,
            dropout: 0.1,
            label_smoothing: 0.1,
            vocab_size,
            local_tokens: 3,
            vision_width: 8,
            max_positions: 32,
            no_vision: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "width {} not divisible by {} heads",
                self.width, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::config(format!(
                "label smoothing {} outside [0, 1)",
                self.label_smoothing
            )));
        }
        if self.vocab_size <= NUM_SPECIALS as usize {
            return Err(Error::config(format!(
                "vocab size {} leaves no room for content tokens",
                self.vocab_size
            )));
        }
        if self.layers == 0 || self.intra_depth == 0 || self.ffn_width == 0 {
            return Err(Error::config(
                "layers, intra_depth and ffn_width must be positive",
            ));
        }
        if self.local_tokens == 0 || self.vision_width == 0 {
            return Err(Error::config(
                "local_tokens and vision_width must be positive",
            ));
        }
        if self.max_positions < 2 {
            return Err(Error::config("max_positions must be at least 2"));
        }
        Ok(())
    }
}

struct VisionPath {
    fvpg: FvpgBlock,
    intra_visual: Vec<EncoderLayer>,
    co_attn: AttentionParams,
    co_ln: LayerNormParams,
}

/// Decoder memory computed once per record: the fused token sequence and
/// the source padding flags for cross-attention masking.
#[derive(Debug, Clone)]
pub struct Memory {
    pub values: Tensor,
    pub src_is_pad: Vec<bool>,
}

pub struct FvpModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    embed: ParamId,
    positions: Tensor,
    encoder_layers: Vec<EncoderLayer>,
    intra_text: Vec<EncoderLayer>,
    vision: Option<VisionPath>,
    decoder_layers: Vec<DecoderLayer>,
}

impl FvpModel {
    /// Deterministic initialization from a seed: same seed, same weights.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let embed = store.add(
            "embed",
            crate::nn::embedding_init(config.vocab_size, config.width, &mut rng),
        )?;
        let mut encoder_layers = Vec::with_capacity(config.layers);
        for i in 0..config.layers {
            encoder_layers.push(EncoderLayer::new(
                &mut store,
                &format!("encoder.{i}"),
                config.width,
                config.heads,
                config.ffn_width,
                &mut rng,
            )?);
        }
        let mut intra_text = Vec::with_capacity(config.intra_depth);
        for i in 0..config.intra_depth {
            intra_text.push(EncoderLayer::new(
                &mut store,
                &format!("intra_text.{i}"),
                config.width,
                config.heads,
                config.ffn_width,
                &mut rng,
            )?);
        }
        let vision = if config.no_vision {
            None
        } else {
            let fvpg = FvpgBlock::new(
                &mut store,
                "fvpg",
                config.vision_width,
                config.local_tokens,
                config.width,
                config.heads,
                &mut rng,
            )?;
            let mut intra_visual = Vec::with_capacity(config.intra_depth);
            for i in 0..config.intra_depth {
                intra_visual.push(EncoderLayer::new(
                    &mut store,
                    &format!("intra_visual.{i}"),
                    config.width,
                    config.heads,
                    config.ffn_width,
                    &mut rng,
                )?);
            }
            let co_attn =
                AttentionParams::new(&mut store, "co_attn", config.width, config.heads, &mut rng)?;
            let co_ln = LayerNormParams::new(&mut store, "co_ln", config.width)?;
            Some(VisionPath {
                fvpg,
                intra_visual,
                co_attn,
                co_ln,
            })
        };
        let mut decoder_layers = Vec::with_capacity(config.layers);
        for i in 0..config.layers {
            decoder_layers.push(DecoderLayer::new(
                &mut store,
                &format!("decoder.{i}"),
                config.width,
                config.heads,
                config.ffn_width,
                &mut rng,
            )?);
        }
        Ok(FvpModel {
            positions: sinusoidal_table(config.max_positions, config.width),
            config,
            store,
            embed,
            encoder_layers,
            intra_text,
            vision,
            decoder_layers,
        })
    }

    /// One intra-modal transformer update over a token stream.
    pub fn intra_modal_update(
        &self,
        fwd: &mut Forward,
        layers: &[EncoderLayer],
        tokens: Var,
        mask: Option<&AttnMask>,
    ) -> Result<Var> {
        let mut x = tokens;
        for layer in layers {
            x = layer.forward(fwd, x, mask, self.config.dropout)?;
        }
        Ok(x)
    }

    /// Cross-modal attention, text as query, visual prompt as key/value,
    /// total-width logit scaling.
    pub fn co_attention(&self, fwd: &mut Forward, text: Var, visual: Var) -> Result<Var> {
        let vision = self
            .vision
            .as_ref()
            .ok_or_else(|| Error::config("co_attention: model built without a vision path"))?;
        let (m, _) = fwd.graph.value(visual).dims2()?;
        if m == 0 {
            return Err(Error::data("co_attention: empty visual prompt"));
        }
        multi_head_attention(
            fwd,
            text,
            visual,
            visual,
            &vision.co_attn,
            None,
            None,
            AttnScale::TotalWidth,
        )
    }

    /// Fused decoder memory for one source sequence.
    fn build_memory(
        &self,
        fwd: &mut Forward,
        src_ids: &[u32],
        features: Option<&VisualFeatureSet>,
    ) -> Result<Var> {
        let dropout = self.config.dropout;
        let encoded = encoder_forward(
            fwd,
            self.embed,
            &self.positions,
            &self.encoder_layers,
            src_ids,
            PAD_ID,
            dropout,
        )?;
        let src_is_pad: Vec<bool> = src_ids.iter().map(|&id| id == PAD_ID).collect();
        let text_mask = AttnMask::key_padding(src_ids.len(), &src_is_pad);
        let text = self.intra_modal_update(fwd, &self.intra_text, encoded, Some(&text_mask))?;
        match &self.vision {
            None => Ok(text),
            Some(vision) => {
                let features = features.ok_or_else(|| {
                    Error::data(
                        "model forward: record has no feature set and the model expects one",
                    )
                })?;
                let prompt = vision.fvpg.forward_features(fwd, features)?;
                let prompt = self.intra_modal_update(fwd, &vision.intra_visual, prompt, None)?;
                // co-transformer style: the attended visual mix rides on a
                // residual around the text stream, so the decoder memory
                // keeps the source tokens as well as the vision guidance
                let fused = self.co_attention(fwd, text, prompt)?;
                let fused = fwd.dropout(fused, dropout)?;
                let fused = fwd.graph.add(text, fused)?;
                vision.co_ln.forward(fwd, fused)
            }
        }
    }

    /// Next-token logits for every position of the target prefix.
    pub fn forward(
        &self,
        fwd: &mut Forward,
        src_ids: &[u32],
        features: Option<&VisualFeatureSet>,
        target_prefix: &[u32],
    ) -> Result<Var> {
        let memory = self.build_memory(fwd, src_ids, features)?;
        let src_is_pad: Vec<bool> = src_ids.iter().map(|&id| id == PAD_ID).collect();
        decoder_forward(
            fwd,
            self.embed,
            &self.positions,
            &self.decoder_layers,
            target_prefix,
            memory,
            Some(&src_is_pad),
            self.config.dropout,
        )
    }

    /// Label-smoothed loss over the logits, ignoring padded positions.
    pub fn label_smoothed_loss(
        &self,
        fwd: &mut Forward,
        logits: Var,
        labels: &[u32],
    ) -> Result<Var> {
        fwd.graph
            .label_smoothed_nll(logits, labels, PAD_ID, self.config.label_smoothing)
    }

    /// Teacher-forcing frames: prefix [bos, t1..tn], labels [t1..tn, eos].
    pub fn teacher_frames(target_ids: &[u32]) -> (Vec<u32>, Vec<u32>) {
        let mut prefix = Vec::with_capacity(target_ids.len() + 1);
        prefix.push(BOS_ID);
        prefix.extend_from_slice(target_ids);
        let mut labels = Vec::with_capacity(target_ids.len() + 1);
        labels.extend_from_slice(target_ids);
        labels.push(EOS_ID);
        (prefix, labels)
    }

    /// Evaluation-mode memory, reusable across decode steps of one record.
    pub fn encode_memory(
        &self,
        src_ids: &[u32],
        features: Option<&VisualFeatureSet>,
    ) -> Result<Memory> {
        let mut fwd = Forward::eval(&self.store);
        let memory = self.build_memory(&mut fwd, src_ids, features)?;
        Ok(Memory {
            values: fwd.graph.value(memory).clone(),
            src_is_pad: src_ids.iter().map(|&id| id == PAD_ID).collect(),
        })
    }

    /// Log-probabilities of the next token after `prefix`, evaluation
    /// mode, recomputing the prefix against a fixed memory.
    pub fn decode_log_probs(&self, memory: &Memory, prefix: &[u32]) -> Result<Vec<f64>> {
        let mut fwd = Forward::eval(&self.store);
        let mem = fwd.leaf(memory.values.clone());
        let logits = decoder_forward(
            &mut fwd,
            self.embed,
            &self.positions,
            &self.decoder_layers,
            prefix,
            mem,
            Some(&memory.src_is_pad),
            self.config.dropout,
        )?;
        let value = fwd.graph.value(logits);
        let (rows, _) = value.dims2()?;
        Ok(log_softmax(value.row(rows - 1)))
    }

    /// One forward/backward in evaluation mode (dropout off), reporting
    /// which parameters received a nonzero gradient.
    pub fn parameter_liveness(
        &self,
        src_ids: &[u32],
        features: Option<&VisualFeatureSet>,
        target_ids: &[u32],
    ) -> Result<Vec<bool>> {
        let (prefix, labels) = Self::teacher_frames(target_ids);
        let mut fwd = Forward::eval(&self.store);
        let logits = self.forward(&mut fwd, src_ids, features, &prefix)?;
        let loss = self.label_smoothed_loss(&mut fwd, logits, &labels)?;
        fwd.graph.backward(loss)?;
        let used = fwd.used_params();
        let mut live = vec![false; self.store.len()];
        for (pid, var) in used {
            if let Some(grad) = fwd.graph.grad(var) {
                live[pid.index()] = grad.data().iter().any(|&v| v != 0.0);
            }
        }
        Ok(live)
    }

    /// Names of parameters that received no gradient on any of the given
    /// samples. A single sample can starve a small ReLU layer by chance;
    /// reachability is judged across the set, as during a batch. Used as
    /// the check at the start of a training run.
    pub fn gradient_coverage<'a, I>(&self, samples: I) -> Result<Vec<String>>
    where
        I: IntoIterator<Item = (&'a [u32], Option<&'a VisualFeatureSet>, &'a [u32])>,
    {
        let mut live = vec![false; self.store.len()];
        let mut any = false;
        for (src_ids, features, target_ids) in samples {
            any = true;
            for (slot, sample_live) in live
                .iter_mut()
                .zip(self.parameter_liveness(src_ids, features, target_ids)?)
            {
                *slot = *slot || sample_live;
            }
        }
        if !any {
            return Err(Error::usage("gradient_coverage: no samples"));
        }
        Ok(self
            .store
            .iter()
            .zip(live)
            .filter(|(_, l)| !l)
            .map(|((_, name, _), _)| name.to_string())
            .collect())
    }
}

/// Numerically stable log-softmax of one row.
pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_z = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    row.iter().map(|v| v - log_z).collect()
}
