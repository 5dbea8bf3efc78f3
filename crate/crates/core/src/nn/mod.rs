//! Transformer building blocks on top of the autodiff graph.

pub mod attention;
pub mod decoder;
pub mod encoder;
pub mod layers;
pub mod positional;

pub use attention::{multi_head_attention, AttentionParams, AttnMask, AttnScale};
pub use decoder::{decoder_forward, DecoderLayer};
pub use encoder::{embed_sequence, encoder_forward, EncoderLayer};
pub use layers::{FeedForward, LayerNormParams, Linear};

use crate::error::{Error, Result};
use crate::graph::Var;
use crate::{Graph, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Handle to a named parameter tensor in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone)]
struct ParamEntry {
    name: String,
    value: std::sync::Arc<Tensor>,
}

/// Ordered collection of named parameter tensors. Registration order is
/// the canonical order for optimizer state and checkpoints. Values are
/// reference-counted so forward passes share them with the graph instead
/// of copying.
#[derive(Clone, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.entries.iter().any(|e| e.name == name) {
            return Err(Error::config(format!("duplicate parameter name {}", name)));
        }
        self.entries.push(ParamEntry {
            name,
            value: std::sync::Arc::new(value),
        });
        Ok(ParamId(self.entries.len() - 1))
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn shared(&self, id: ParamId) -> std::sync::Arc<Tensor> {
        self.entries[id.0].value.clone()
    }

    /// Mutable access; copies only if a graph still holds the tensor.
    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        std::sync::Arc::make_mut(&mut self.entries[id.0].value)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, e)| (ParamId(i), e.name.as_str(), e.value.as_ref()))
    }

    pub fn total_elements(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }
}

/// One forward pass: owns the graph, inserts parameters as leaves on
/// first use (so shared parameters map to a single node), and carries the
/// dropout state. Training mode samples dropout from the given rng; eval
/// mode makes every dropout an identity.
pub struct Forward<'p> {
    pub graph: Graph,
    store: &'p ParamStore,
    inserted: Vec<Option<Var>>,
    rng: ChaCha8Rng,
    train: bool,
}

impl<'p> Forward<'p> {
    pub fn train(store: &'p ParamStore, rng: ChaCha8Rng) -> Self {
        Forward {
            graph: Graph::new(),
            store,
            inserted: vec![None; store.len()],
            rng,
            train: true,
        }
    }

    pub fn eval(store: &'p ParamStore) -> Self {
        Forward {
            graph: Graph::new(),
            store,
            inserted: vec![None; store.len()],
            rng: ChaCha8Rng::seed_from_u64(0),
            train: false,
        }
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    /// Graph var for a parameter, inserting the leaf on first use.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.inserted[id.0] {
            return v;
        }
        let v = self.graph.leaf_shared(self.store.shared(id));
        self.inserted[id.0] = Some(v);
        v
    }

    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.graph.leaf(t)
    }

    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        self.graph.dropout(x, p, self.train, &mut self.rng)
    }

    /// Parameters touched by this pass, with their graph vars.
    pub fn used_params(&self) -> Vec<(ParamId, Var)> {
        self.inserted
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|var| (ParamId(i), var)))
            .collect()
    }
}

/// Xavier/Glorot uniform init for a [rows x cols] weight matrix.
pub fn xavier_uniform(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    use rand::Rng;
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let data: Vec<f64> = (0..rows * cols)
        .map(|_| rng.random_range(-limit..limit))
        .collect();
    Tensor::new(vec![rows, cols], data).expect("xavier shape")
}

/// Embedding init: uniform with standard deviation 0.35 * width^-0.5,
/// chosen so the tied output projection starts near-uniform.
pub fn embedding_init(vocab: usize, width: usize, rng: &mut ChaCha8Rng) -> Tensor {
    use rand::Rng;
    let limit = 0.35 * (3.0f64).sqrt() / (width as f64).sqrt();
    let data: Vec<f64> = (0..vocab * width)
        .map(|_| rng.random_range(-limit..limit))
        .collect();
    Tensor::new(vec![vocab, width], data).expect("embedding shape")
}
