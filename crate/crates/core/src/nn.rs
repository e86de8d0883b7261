//! Named parameter storage and the small layer helpers every model shares.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Hierarchically named parameter tensors (`"vqvae.enc.0.w"`), kept sorted.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::State(format!("missing parameter `{}`", name)))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::State(format!("missing parameter `{}`", name)))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn has_prefix(&self, prefix: &str) -> bool {
        self.tensors.keys().any(|k| k.starts_with(prefix))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn num_values(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Copies every entry of `other` into `self`, replacing duplicates.
    pub fn merge(&mut self, other: &ParamStore) {
        for (k, v) in &other.tensors {
            self.tensors.insert(k.clone(), v.clone());
        }
    }

    pub fn with_prefix(&self, prefix: &str) -> ParamStore {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// CRC32 over names and raw values of all tensors under `prefix`.
    pub fn fingerprint(&self, prefix: &str) -> u32 {
        let mut h = crc32fast::Hasher::new();
        for (k, v) in self.tensors.iter().filter(|(k, _)| k.starts_with(prefix)) {
            h.update(k.as_bytes());
            for x in v.data() {
                h.update(&x.to_le_bytes());
            }
        }
        h.finalize()
    }
}

/// A forward pass in progress: a tape plus the parameters it reads.
///
/// Parameters whose names start with a frozen prefix enter the tape as
/// constants; everything else is trainable.
pub struct Graph<'s> {
    pub tape: Tape,
    store: &'s ParamStore,
    frozen: Vec<String>,
    pub training: bool,
    rng: ChaCha8Rng,
}

impl<'s> Graph<'s> {
    /// Training graph: all parameters trainable.
    pub fn train(store: &'s ParamStore, seed: u64) -> Self {
        Graph {
            tape: Tape::new(),
            store,
            frozen: Vec::new(),
            training: true,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Inference graph: every parameter is a constant and dropout is off.
    pub fn inference(store: &'s ParamStore) -> Self {
        Graph {
            tape: Tape::new(),
            store,
            frozen: vec![String::new()],
            training: false,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    pub fn freeze(mut self, prefix: &str) -> Self {
        self.frozen.push(prefix.to_string());
        self
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn p(&mut self, name: &str) -> Result<Var> {
        let t = self.store.get(name)?;
        if self.frozen.iter().any(|f| name.starts_with(f.as_str())) {
            self.tape.frozen_param(name, t)
        } else {
            self.tape.param(name, t)
        }
    }

    /// Inverted dropout; identity outside training or when `rate == 0`.
    pub fn dropout(&mut self, x: Var, rate: f32) -> Result<Var> {
        if !self.training || rate <= 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - rate;
        let shape = self.tape.shape(x).to_vec();
        let n = self.tape.data(x).len();
        let mask: Vec<f32> = (0..n)
            .map(|_| if self.rng.random::<f32>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let m = self.tape.constant(&shape, mask)?;
        self.tape.mul(x, m)
    }

    /// `x[N×in] · w[in×out] + b[out]` with parameters `{prefix}.w`, `{prefix}.b`.
    pub fn linear(&mut self, prefix: &str, x: Var) -> Result<Var> {
        let w = self.p(&format!("{prefix}.w"))?;
        let b = self.p(&format!("{prefix}.b"))?;
        let y = self.tape.matmul(x, w)?;
        self.tape.add_row(y, b)
    }

    /// Convolution with bias, parameters `{prefix}.w` (`O×C×k×k`) and `{prefix}.b`.
    pub fn conv(&mut self, prefix: &str, x: Var, stride: usize, padding: usize) -> Result<Var> {
        let w = self.p(&format!("{prefix}.w"))?;
        let b = self.p(&format!("{prefix}.b"))?;
        let y = self.tape.conv2d(x, w, stride, padding)?;
        self.tape.channel_add(y, b)
    }

    pub fn layer_norm(&mut self, prefix: &str, x: Var, eps: f32) -> Result<Var> {
        let g = self.p(&format!("{prefix}.g"))?;
        let b = self.p(&format!("{prefix}.b"))?;
        self.tape.layer_norm(x, g, b, eps)
    }
}

pub fn init_linear<R: Rng + ?Sized>(
    store: &mut ParamStore,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
    std: f32,
    rng: &mut R,
) {
    store.insert(format!("{prefix}.w"), Tensor::randn(&[fan_in, fan_out], std, rng));
    store.insert(format!("{prefix}.b"), Tensor::zeros(&[fan_out]));
}

/// Conv weights with variance `gain / fan_in`; zero bias.
pub fn init_conv<R: Rng + ?Sized>(
    store: &mut ParamStore,
    prefix: &str,
    in_ch: usize,
    out_ch: usize,
    kernel: usize,
    gain: f32,
    rng: &mut R,
) {
    let fan_in = (in_ch * kernel * kernel) as f32;
    let std = (gain / fan_in).sqrt();
    store.insert(
        format!("{prefix}.w"),
        Tensor::randn(&[out_ch, in_ch, kernel, kernel], std, rng),
    );
    store.insert(format!("{prefix}.b"), Tensor::zeros(&[out_ch]));
}

pub fn init_zero_conv(store: &mut ParamStore, prefix: &str, in_ch: usize, out_ch: usize, kernel: usize) {
    store.insert(format!("{prefix}.w"), Tensor::zeros(&[out_ch, in_ch, kernel, kernel]));
    store.insert(format!("{prefix}.b"), Tensor::zeros(&[out_ch]));
}

pub fn init_layer_norm(store: &mut ParamStore, prefix: &str, dim: usize) {
    store.insert(format!("{prefix}.g"), Tensor::full(&[dim], 1.0));
    store.insert(format!("{prefix}.b"), Tensor::zeros(&[dim]));
}
