use super::{xavier_uniform, Forward, ParamId, ParamStore};
use crate::error::Result;
use crate::graph::Var;
use crate::Tensor;
use rand_chacha::ChaCha8Rng;

/// Epsilon inside the layer-norm square root.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Fully-connected layer, weight [in x out] plus optional bias [1 x out].
#[derive(Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let weight = store.add(
            format!("{name}.weight"),
            xavier_uniform(in_dim, out_dim, rng),
        )?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(vec![1, out_dim]))?;
        Ok(Linear {
            weight,
            bias: Some(bias),
        })
    }

    /// Bias-less variant. The attention key projection uses this: a key
    /// bias shifts every logit of a query row equally, so softmax cancels
    /// it and its gradient is identically zero.
    pub fn new_no_bias(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let weight = store.add(
            format!("{name}.weight"),
            xavier_uniform(in_dim, out_dim, rng),
        )?;
        Ok(Linear { weight, bias: None })
    }

    pub fn forward(&self, fwd: &mut Forward, x: Var) -> Result<Var> {
        let w = fwd.param(self.weight);
        let y = fwd.graph.matmul(x, w)?;
        match self.bias {
            Some(bias) => {
                let b = fwd.param(bias);
                fwd.graph.add_row_bias(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Per-row normalization with learned gain and shift.
#[derive(Clone, Copy)]
pub struct LayerNormParams {
    pub gain: ParamId,
    pub shift: ParamId,
}

impl LayerNormParams {
    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Result<Self> {
        let gain = store.add(format!("{name}.gain"), Tensor::full(vec![1, width], 1.0))?;
        let shift = store.add(format!("{name}.shift"), Tensor::zeros(vec![1, width]))?;
        Ok(LayerNormParams { gain, shift })
    }

    pub fn forward(&self, fwd: &mut Forward, x: Var) -> Result<Var> {
        let gain = fwd.param(self.gain);
        let shift = fwd.param(self.shift);
        fwd.graph.layer_norm(x, gain, shift, LAYER_NORM_EPS)
    }
}

/// Two linear layers with a ReLU in between.
#[derive(Clone, Copy)]
pub struct FeedForward {
    pub inner: Linear,
    pub outer: Linear,
}

impl FeedForward {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        hidden: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(FeedForward {
            inner: Linear::new(store, &format!("{name}.inner"), width, hidden, rng)?,
            outer: Linear::new(store, &format!("{name}.outer"), hidden, width, rng)?,
        })
    }

    pub fn forward(&self, fwd: &mut Forward, x: Var) -> Result<Var> {
        let h = self.inner.forward(fwd, x)?;
        let h = fwd.graph.relu(h)?;
        self.outer.forward(fwd, h)
    }
}
