use crate::error::{Error, Result};
use crate::nn::{ParamId, ParamStore};
use crate::Tensor;

/// Adam moment buffers aligned with the parameter store order.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub first_moment: Vec<Vec<f64>>,
    pub second_moment: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, _, t)| vec![0.0; t.numel()]).collect();
        OptimizerState {
            step: 0,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
            first_moment: zeros.clone(),
            second_moment: zeros,
        }
    }

    fn check_alignment(&self, store: &ParamStore) -> Result<()> {
        if self.first_moment.len() != store.len() || self.second_moment.len() != store.len() {
            return Err(Error::config(
                "optimizer state does not match the parameter store",
            ));
        }
        for (id, name, t) in store.iter() {
            if self.first_moment[id.index()].len() != t.numel() {
                return Err(Error::config(format!(
                    "optimizer state for {} has wrong length",
                    name
                )));
            }
        }
        Ok(())
    }
}

/// Per-parameter gradient accumulators in store order.
#[derive(Debug, Clone)]
pub struct GradBuffers {
    buffers: Vec<Option<Vec<f64>>>,
}

impl GradBuffers {
    pub fn new(store: &ParamStore) -> Self {
        GradBuffers {
            buffers: vec![None; store.len()],
        }
    }

    pub fn zero(&mut self) {
        for b in &mut self.buffers {
            *b = None;
        }
    }

    /// Adds grad * scale into the parameter's accumulator.
    pub fn accumulate(&mut self, id: ParamId, grad: &Tensor, scale: f64) {
        let slot = self.buffers[id.index()].get_or_insert_with(|| vec![0.0; grad.numel()]);
        for (o, &g) in slot.iter_mut().zip(grad.data()) {
            *o += g * scale;
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.buffers[id.index()].as_deref()
    }

    /// Global L2 norm over every accumulated gradient.
    pub fn global_norm(&self) -> f64 {
        self.buffers
            .iter()
            .flatten()
            .flat_map(|b| b.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale_all(&mut self, factor: f64) {
        for b in self.buffers.iter_mut().flatten() {
            for g in b.iter_mut() {
                *g *= factor;
            }
        }
    }
}

/// One Adam update with bias correction. Parameters without an
/// accumulated gradient are treated as having zero gradient. A NaN
/// gradient aborts, naming the parameter.
pub fn adam_step(
    store: &mut ParamStore,
    grads: &GradBuffers,
    state: &mut OptimizerState,
    lr: f64,
) -> Result<()> {
    state.check_alignment(store)?;
    let t = state.step + 1;
    let bias1 = 1.0 - state.beta1.powi(t as i32);
    let bias2 = 1.0 - state.beta2.powi(t as i32);
    for id in store.ids().collect::<Vec<_>>() {
        let grad = grads.get(id);
        if let Some(g) = grad {
            if let Some(pos) = g.iter().position(|v| v.is_nan()) {
                return Err(Error::numeric(format!(
                    "NaN gradient in parameter {} at element {}",
                    store.name(id),
                    pos
                )));
            }
        }
        let m = &mut state.first_moment[id.index()];
        let v = &mut state.second_moment[id.index()];
        let value = store.get_mut(id).data_mut();
        for i in 0..value.len() {
            let g = grad.map(|g| g[i]).unwrap_or(0.0);
            m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g;
            v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g * g;
            let m_hat = m[i] / bias1;
            let v_hat = v[i] / bias2;
            value[i] -= lr * m_hat / (v_hat.sqrt() + state.eps);
        }
    }
    state.step = t;
    Ok(())
}
