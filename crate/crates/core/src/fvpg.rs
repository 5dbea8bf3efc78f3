//! Fine-grained visual prompt generation.
//!
//! Local image features attend to each other with multi-head
//! self-attention while the global image feature, pushed through a small
//! mapping network, is added to the attention logits as a per-key bias.
//! The output rows are the visual prompt tokens the fusion model consumes.

use crate::error::{Error, Result};
use crate::graph::Var;
use crate::nn::{multi_head_attention, AttentionParams, AttnScale, Forward, Linear, ParamStore};
use crate::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Global feature plus the local features of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct VisualFeatureSet {
    pub global: Vec<f64>,
    pub locals: Vec<Vec<f64>>,
}

impl VisualFeatureSet {
    pub fn new(global: Vec<f64>, locals: Vec<Vec<f64>>) -> Result<Self> {
        let set = VisualFeatureSet { global, locals };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<()> {
        if self.locals.is_empty() {
            return Err(Error::data("feature set: needs at least one local feature"));
        }
        let width = self.global.len();
        if width == 0 {
            return Err(Error::data("feature set: empty global feature"));
        }
        if let Some(bad) = self.locals.iter().position(|l| l.len() != width) {
            return Err(Error::data(format!(
                "feature set: local {} has width {}, global has {}",
                bad,
                self.locals[bad].len(),
                width
            )));
        }
        let finite = self.global.iter().all(|v| v.is_finite())
            && self.locals.iter().all(|l| l.iter().all(|v| v.is_finite()));
        if !finite {
            return Err(Error::data("feature set: non-finite value"));
        }
        Ok(())
    }

    pub fn local_count(&self) -> usize {
        self.locals.len()
    }

    pub fn width(&self) -> usize {
        self.global.len()
    }

    /// Local features as an [M x D_vis] tensor.
    pub fn locals_tensor(&self) -> Result<Tensor> {
        Tensor::from_rows(&self.locals)
    }

    /// Global feature as a [1 x D_vis] tensor.
    pub fn global_tensor(&self) -> Tensor {
        Tensor::row_vector(self.global.clone())
    }

    /// Pads (repeating the last local) or truncates the local set to the
    /// configured count. Returns whether an adjustment happened so the
    /// caller can log a warning.
    pub fn fit_local_count(&self, m: usize) -> (VisualFeatureSet, bool) {
        if self.locals.len() == m {
            return (self.clone(), false);
        }
        let mut locals = self.locals.clone();
        if locals.len() > m {
            locals.truncate(m);
        } else {
            let last = locals
                .last()
                .cloned()
                .unwrap_or_else(|| self.global.clone());
            while locals.len() < m {
                locals.push(last.clone());
            }
        }
        (
            VisualFeatureSet {
                global: self.global.clone(),
                locals,
            },
            true,
        )
    }
}

/// Deterministic stand-in for an external vision encoder: unit-norm
/// pseudo-random feature vectors.
pub fn make_synthetic_features(seed: u64, m: usize, d_vis: usize) -> Result<VisualFeatureSet> {
    if m < 1 || d_vis < 1 {
        return Err(Error::config(format!(
            "synthetic features: m {} and d_vis {} must be positive",
            m, d_vis
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vector = |rng: &mut ChaCha8Rng| {
        let mut v: Vec<f64> = (0..d_vis).map(|_| rng.random_range(-1.0..1.0)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            for x in &mut v {
                *x /= norm;
            }
        } else {
            v[0] = 1.0;
        }
        v
    };
    let global = vector(&mut rng);
    let locals = (0..m).map(|_| vector(&mut rng)).collect();
    Ok(VisualFeatureSet { global, locals })
}

/// Two fully-connected layers with ReLU mapping the global feature to a
/// per-key logit bias of length M.
#[derive(Clone, Copy)]
pub struct MappingNetwork {
    pub hidden: Linear,
    pub output: Linear,
}

impl MappingNetwork {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_vis: usize,
        d_hidden: usize,
        m: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(MappingNetwork {
            hidden: Linear::new(store, &format!("{name}.hidden"), d_vis, d_hidden, rng)?,
            output: Linear::new(store, &format!("{name}.output"), d_hidden, m, rng)?,
        })
    }

    /// bias = W2 relu(W1 v_c + b1) + b2, a [1 x M] row.
    pub fn forward(&self, fwd: &mut Forward, global: Var) -> Result<Var> {
        let h = self.hidden.forward(fwd, global)?;
        let h = fwd.graph.relu(h)?;
        self.output.forward(fwd, h)
    }
}

/// Visual prompt generator: input projection of locals, mapping network
/// for the global bias, bias-augmented self-attention.
#[derive(Clone, Copy)]
pub struct FvpgBlock {
    pub input_proj: Linear,
    pub mapping: MappingNetwork,
    pub attn: AttentionParams,
    pub local_count: usize,
    pub vision_width: usize,
}

impl FvpgBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_vis: usize,
        m: usize,
        width: usize,
        heads: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let d_hidden = (d_vis / 2).max(1);
        Ok(FvpgBlock {
            input_proj: Linear::new(store, &format!("{name}.input_proj"), d_vis, width, rng)?,
            mapping: MappingNetwork::new(
                store,
                &format!("{name}.mapping"),
                d_vis,
                d_hidden,
                m,
                rng,
            )?,
            attn: AttentionParams::new(store, &format!("{name}.attn"), width, heads, rng)?,
            local_count: m,
            vision_width: d_vis,
        })
    }

    /// Computes the visual prompt [M x C] from graph vars for the global
    /// [1 x D_vis] and locals [M x D_vis].
    pub fn forward(&self, fwd: &mut Forward, global: Var, locals: Var) -> Result<Var> {
        let (m, d_vis) = fwd.graph.value(locals).dims2()?;
        if m != self.local_count {
            return Err(Error::data(format!(
                "fvpg: {} local features but bias length is configured for {}",
                m, self.local_count
            )));
        }
        if d_vis != self.vision_width {
            return Err(Error::config(format!(
                "fvpg: vision width {} does not match configured {}",
                d_vis, self.vision_width
            )));
        }
        let bias = self.mapping.forward(fwd, global)?;
        let projected = self.input_proj.forward(fwd, locals)?;
        multi_head_attention(
            fwd,
            projected,
            projected,
            projected,
            &self.attn,
            None,
            Some(bias),
            AttnScale::PerHead,
        )
    }

    /// Same forward but from a feature set, inserting the leaves.
    pub fn forward_features(&self, fwd: &mut Forward, features: &VisualFeatureSet) -> Result<Var> {
        features.validate()?;
        let global = fwd.leaf(features.global_tensor());
        let locals = fwd.leaf(features.locals_tensor()?);
        self.forward(fwd, global, locals)
    }
}
