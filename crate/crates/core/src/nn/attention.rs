use super::layers::Linear;
use super::{Forward, ParamStore};
use crate::error::{Error, Result};
use crate::graph::Var;
use crate::Tensor;
use rand_chacha::ChaCha8Rng;

/// Additive value pushed onto disallowed logits before softmax. Additive
/// masking composes with finite logit biases, which multiplicative
/// masking would not.
pub const MASK_NEG: f64 = -1e9;

/// Per-head query/key/value projections plus the output projection.
#[derive(Clone, Copy)]
pub struct AttentionParams {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
    pub width: usize,
}

impl AttentionParams {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        heads: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if heads == 0 || !width.is_multiple_of(heads) {
            return Err(Error::config(format!(
                "attention width {} not divisible by {} heads",
                width, heads
            )));
        }
        Ok(AttentionParams {
            query: Linear::new(store, &format!("{name}.q"), width, width, rng)?,
            key: Linear::new_no_bias(store, &format!("{name}.k"), width, width, rng)?,
            value: Linear::new(store, &format!("{name}.v"), width, width, rng)?,
            output: Linear::new(store, &format!("{name}.out"), width, width, rng)?,
            heads,
            width,
        })
    }

    pub fn head_width(&self) -> usize {
        self.width / self.heads
    }
}

/// Logit scaling convention. `PerHead` divides by sqrt(width/heads);
/// `TotalWidth` divides by sqrt(width), the convention the co-attention
/// path uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttnScale {
    PerHead,
    TotalWidth,
}

/// Boolean attention mask; true means "attend allowed".
#[derive(Clone, Debug)]
pub struct AttnMask {
    rows: usize,
    cols: usize,
    allow: Vec<bool>,
}

impl AttnMask {
    pub fn new(rows: usize, cols: usize, allow: Vec<bool>) -> Result<Self> {
        if allow.len() != rows * cols {
            return Err(Error::shape(format!(
                "mask: {}x{} needs {} entries, got {}",
                rows,
                cols,
                rows * cols,
                allow.len()
            )));
        }
        Ok(AttnMask { rows, cols, allow })
    }

    /// Causal mask: position t may attend to positions <= t.
    pub fn causal(len: usize) -> Self {
        let mut allow = vec![false; len * len];
        for q in 0..len {
            for k in 0..=q {
                allow[q * len + k] = true;
            }
        }
        AttnMask {
            rows: len,
            cols: len,
            allow,
        }
    }

    /// Key-padding mask: every query row blocks the padded key positions.
    pub fn key_padding(rows: usize, key_is_pad: &[bool]) -> Self {
        let cols = key_is_pad.len();
        let mut allow = vec![true; rows * cols];
        for q in 0..rows {
            for (k, &pad) in key_is_pad.iter().enumerate() {
                if pad {
                    allow[q * cols + k] = false;
                }
            }
        }
        AttnMask { rows, cols, allow }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn allows(&self, q: usize, k: usize) -> bool {
        self.allow[q * self.cols + k]
    }

    fn fully_masked_row(&self) -> Option<usize> {
        (0..self.rows).find(|&q| (0..self.cols).all(|k| !self.allow[q * self.cols + k]))
    }

    fn to_additive(&self) -> Tensor {
        let data: Vec<f64> = self
            .allow
            .iter()
            .map(|&a| if a { 0.0 } else { MASK_NEG })
            .collect();
        Tensor::new(vec![self.rows, self.cols], data).expect("mask shape")
    }
}

/// Scaled dot-product attention over `heads` heads.
///
/// Per head: softmax(q k^T * scale + logit_bias + mask) v, heads
/// concatenated along the channel dimension and output-projected. The
/// optional `logit_bias` is a [1 x Lk] row indexed by key position,
/// broadcast over query rows and shared across heads.
#[allow(clippy::too_many_arguments)]
pub fn multi_head_attention(
    fwd: &mut Forward,
    query: Var,
    key: Var,
    value: Var,
    params: &AttentionParams,
    mask: Option<&AttnMask>,
    logit_bias: Option<Var>,
    scale: AttnScale,
) -> Result<Var> {
    let (lq, cq) = fwd.graph.value(query).dims2()?;
    let (lk, ck) = fwd.graph.value(key).dims2()?;
    let (lv, cv) = fwd.graph.value(value).dims2()?;
    if cq != params.width || ck != params.width || cv != params.width {
        return Err(Error::shape(format!(
            "attention: widths {}/{}/{} do not match configured {}",
            cq, ck, cv, params.width
        )));
    }
    if lk != lv {
        return Err(Error::shape(format!(
            "attention: key rows {} != value rows {}",
            lk, lv
        )));
    }
    if let Some(bias) = logit_bias {
        if !fwd.graph.value(bias).all_finite() {
            return Err(Error::numeric("attention: non-finite logit bias"));
        }
    }
    let mask_leaf = match mask {
        Some(m) => {
            if m.dims() != (lq, lk) {
                return Err(Error::shape(format!(
                    "attention: mask {}x{} does not match {}x{}",
                    m.dims().0,
                    m.dims().1,
                    lq,
                    lk
                )));
            }
            if let Some(row) = m.fully_masked_row() {
                return Err(Error::numeric(format!(
                    "attention: query row {} has every key masked",
                    row
                )));
            }
            Some(fwd.leaf(m.to_additive()))
        }
        None => None,
    };

    let q_proj = params.query.forward(fwd, query)?;
    let k_proj = params.key.forward(fwd, key)?;
    let v_proj = params.value.forward(fwd, value)?;

    let d_head = params.head_width();
    let scale_val = match scale {
        AttnScale::PerHead => 1.0 / (d_head as f64).sqrt(),
        AttnScale::TotalWidth => 1.0 / (params.width as f64).sqrt(),
    };

    let mut head_outputs = Vec::with_capacity(params.heads);
    for h in 0..params.heads {
        let q_h = fwd.graph.slice_cols(q_proj, h * d_head, d_head)?;
        let k_h = fwd.graph.slice_cols(k_proj, h * d_head, d_head)?;
        let v_h = fwd.graph.slice_cols(v_proj, h * d_head, d_head)?;
        let k_t = fwd.graph.transpose(k_h)?;
        let mut logits = fwd.graph.matmul(q_h, k_t)?;
        logits = fwd.graph.scale(logits, scale_val)?;
        if let Some(bias) = logit_bias {
            logits = fwd.graph.add_row_bias(logits, bias)?;
        }
        if let Some(m) = mask_leaf {
            logits = fwd.graph.add(logits, m)?;
        }
        let attn = fwd.graph.softmax(logits, 1)?;
        head_outputs.push(fwd.graph.matmul(attn, v_h)?);
    }
    let concat = fwd.graph.concat_cols(&head_outputs)?;
    params.output.forward(fwd, concat)
}
