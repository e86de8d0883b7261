//! Class-conditional next-scale transformer over token pyramids.
//!
//! The sequence for one image is a class start block (scale 1) followed by
//! the teacher inputs of scales `2…n`, one row per position, projected to the
//! model width. Attention is block causal: a position sees every position of
//! its own and coarser scales. Positions are encoded with rotary embeddings.

mod sample;
pub mod ssl;

pub use sample::{cfg_combine, generate, sample, sample_rng, GenerateOptions, Generated, SamplerConfig};
pub use ssl::{smooth_scaling, smooth_scaling_batch, SslConfig};

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{init_layer_norm, init_linear, Graph, ParamStore};
use crate::tensor::{Tensor, Var};
use crate::vqvae::{MultiScaleTokens, Vqvae};

pub const PREFIX: &str = "var.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VarConfig {
    pub model_dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub ff_mult: usize,
    pub num_classes: usize,
    /// Probability of replacing the class with the null class in training.
    pub class_dropout: f32,
    pub rope_base: f32,
    pub ssl: SslConfig,
}

impl Default for VarConfig {
    fn default() -> Self {
        VarConfig {
            model_dim: 64,
            heads: 4,
            layers: 4,
            ff_mult: 4,
            num_classes: 2,
            class_dropout: 0.1,
            rope_base: 10000.0,
            ssl: SslConfig::default(),
        }
    }
}

impl VarConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(format!("var: {}", m)));
        if self.model_dim == 0 || self.heads == 0 || self.layers == 0 || self.ff_mult == 0 {
            return fail("sizes must be positive".into());
        }
        if self.model_dim % self.heads != 0 || (self.model_dim / self.heads) % 2 != 0 {
            return fail(format!(
                "model dim {} must split into {} heads of even width",
                self.model_dim, self.heads
            ));
        }
        if self.num_classes == 0 || !(0.0..1.0).contains(&self.class_dropout) {
            return fail("need at least one class and class dropout in [0,1)".into());
        }
        if !(self.rope_base > 1.0) {
            return fail("rotary base must exceed 1".into());
        }
        self.ssl.validate()
    }

    pub fn null_class(&self) -> usize {
        self.num_classes
    }
}

/// Transformer bound to a token vocabulary and scale schedule.
#[derive(Debug, Clone)]
pub struct VarModel {
    pub cfg: VarConfig,
    pub schedule: Vec<usize>,
    pub latent_channels: usize,
    pub vocab: usize,
}

/// One training example: class, teacher-input rows (`[(L − p₁²) × C]`,
/// row-major) and flattened token targets.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceItem {
    pub class_id: usize,
    pub teacher: Vec<f32>,
    pub targets: Vec<usize>,
}

/// Scale id (1-based) of every position for a schedule.
pub fn scale_ids(schedule: &[usize]) -> Vec<usize> {
    schedule
        .iter()
        .enumerate()
        .flat_map(|(k, &p)| std::iter::repeat_n(k + 1, p * p))
        .collect()
}

/// `mask[q·L + k]` is true iff `scale(q) ≥ scale(k)`.
pub fn block_causal_mask(ids: &[usize]) -> Vec<bool> {
    let l = ids.len();
    let mut m = vec![false; l * l];
    for q in 0..l {
        for k in 0..l {
            m[q * l + k] = ids[q] >= ids[k];
        }
    }
    m
}

impl VarModel {
    pub fn new(cfg: VarConfig, vqvae: &Vqvae) -> Result<Self> {
        cfg.validate()?;
        vqvae.cfg.validate()?;
        Ok(VarModel {
            cfg,
            schedule: vqvae.cfg.schedule.clone(),
            latent_channels: vqvae.cfg.latent_channels,
            vocab: vqvae.cfg.codebook_size,
        })
    }

    pub fn seq_len(&self) -> usize {
        self.schedule.iter().map(|p| p * p).sum()
    }

    /// Length of the sequence covering scales `0..=k`.
    pub fn prefix_len(&self, k: usize) -> usize {
        self.schedule[..=k].iter().map(|p| p * p).sum()
    }

    fn start_len(&self) -> usize {
        self.schedule[0] * self.schedule[0]
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        let c = &self.cfg;
        let d = c.model_dim;
        let std = 0.02;
        let resid_std = std / (2.0 * c.layers as f32).sqrt();
        init_linear(store, "var.in", self.latent_channels, d, 1.0 / (self.latent_channels as f32).sqrt(), rng);
        store.insert("var.class_emb", Tensor::randn(&[c.num_classes + 1, d], 1.0, rng));
        for l in 0..c.layers {
            let p = format!("var.block.{l}");
            init_layer_norm(store, &format!("{p}.ln1"), d);
            for name in ["q", "k", "v"] {
                init_linear(store, &format!("{p}.{name}"), d, d, 1.0 / (d as f32).sqrt(), rng);
            }
            init_linear(store, &format!("{p}.o"), d, d, resid_std, rng);
            init_layer_norm(store, &format!("{p}.ln2"), d);
            init_linear(store, &format!("{p}.ff1"), d, c.ff_mult * d, 1.0 / (d as f32).sqrt(), rng);
            init_linear(store, &format!("{p}.ff2"), c.ff_mult * d, d, resid_std, rng);
        }
        init_layer_norm(store, "var.ln_f", d);
        init_linear(store, "var.head", d, self.vocab, std, rng);
        ssl::init(store, &c.ssl, self.vocab, rng);
    }

    /// Teacher rows for one pyramid: the inputs of scales `2…n`, position by
    /// position, each row holding `C` channels.
    pub fn teacher_rows(&self, vqvae: &Vqvae, store: &ParamStore, tokens: &MultiScaleTokens) -> Result<Vec<f32>> {
        let maps = vqvae.tokens_to_teacher_inputs(store, std::slice::from_ref(tokens))?;
        Ok(maps.iter().flat_map(|m| channels_last(m)).collect())
    }

    pub fn make_item(&self, vqvae: &Vqvae, store: &ParamStore, class_id: usize, tokens: &MultiScaleTokens) -> Result<SequenceItem> {
        Ok(SequenceItem {
            class_id,
            teacher: self.teacher_rows(vqvae, store, tokens)?,
            targets: tokens.flatten(),
        })
    }

    /// Embedded sequences `[B·len × D]` for `len = start block + teacher rows`.
    pub fn build_sequence(&self, g: &mut Graph, classes: &[usize], teacher: &[&[f32]]) -> Result<(Var, usize)> {
        let b = classes.len();
        if b == 0 || teacher.len() != b {
            return Err(Error::dim("build_sequence", format!("{} classes, {} teacher sets", b, teacher.len())));
        }
        let c = self.latent_channels;
        let rows = teacher[0].len() / c;
        if teacher.iter().any(|t| t.len() != rows * c || t.len() % c != 0) {
            return Err(Error::dim("build_sequence", "ragged teacher inputs"));
        }
        let s0 = self.start_len();
        let len = s0 + rows;
        let valid = (0..self.schedule.len()).any(|k| self.prefix_len(k) == len);
        if !valid {
            return Err(Error::Config(format!("sequence length {} does not end on a scale boundary of {:?}", len, self.schedule)));
        }
        if let Some(&bad) = classes.iter().find(|&&k| k > self.cfg.num_classes) {
            return Err(Error::Index { op: "class embedding", index: bad, size: self.cfg.num_classes + 1 });
        }
        let d = self.cfg.model_dim;
        let table = g.p("var.class_emb")?;
        let ids: Vec<usize> = classes.iter().flat_map(|&k| std::iter::repeat_n(k, s0)).collect();
        let start = g.tape.embedding(table, &ids)?;
        if rows == 0 {
            return Ok((start, len));
        }
        let feats: Vec<f32> = teacher.iter().flat_map(|t| t.iter().copied()).collect();
        let fv = g.tape.constant(&[b * rows, c], feats)?;
        let proj = g.linear("var.in", fv)?;
        let both = g.tape.concat(&[start, proj])?;
        // interleave: each sequence is its start block followed by its rows
        let mut map = Vec::with_capacity(b * len * d);
        for bi in 0..b {
            for pos in 0..len {
                let src = if pos < s0 { bi * s0 + pos } else { b * s0 + bi * rows + pos - s0 };
                map.extend((0..d).map(|j| Some(src * d + j)));
            }
        }
        Ok((g.tape.gather(both, map, &[b * len, d])?, len))
    }

    /// Transformer body and head: `[B·len × D] → [B·len × K]` raw logits.
    pub fn forward_logits(&self, g: &mut Graph, seq: Var, batch: usize, len: usize) -> Result<Var> {
        let c = &self.cfg;
        let ids = scale_ids(&self.schedule);
        if len > ids.len() {
            return Err(Error::Config(format!("sequence of {} exceeds schedule length {}", len, ids.len())));
        }
        let mask = Rc::new(block_causal_mask(&ids[..len]));
        let positions: Vec<usize> = (0..batch).flat_map(|_| 0..len).collect();
        let mut x = seq;
        for l in 0..c.layers {
            let p = format!("var.block.{l}");
            let h = g.layer_norm(&format!("{p}.ln1"), x, 1e-5)?;
            let q = g.linear(&format!("{p}.q"), h)?;
            let k = g.linear(&format!("{p}.k"), h)?;
            let v = g.linear(&format!("{p}.v"), h)?;
            let q = g.tape.rotary(q, &positions, c.heads, c.rope_base)?;
            let k = g.tape.rotary(k, &positions, c.heads, c.rope_base)?;
            let a = g.tape.attention(q, k, v, batch, c.heads, mask.clone())?;
            let o = g.linear(&format!("{p}.o"), a)?;
            x = g.tape.add(x, o)?;
            let h = g.layer_norm(&format!("{p}.ln2"), x, 1e-5)?;
            let f = g.linear(&format!("{p}.ff1"), h)?;
            let f = g.tape.gelu(f)?;
            let f = g.linear(&format!("{p}.ff2"), f)?;
            x = g.tape.add(x, f)?;
        }
        let x = g.layer_norm("var.ln_f", x, 1e-5)?;
        g.linear("var.head", x)
    }

    /// Per-scale segments of `batch` packed sequences of length `len`.
    pub fn scale_segments(&self, batch: usize, len: usize) -> Vec<(usize, usize)> {
        let mut segs = Vec::new();
        for b in 0..batch {
            let mut off = 0;
            for &p in &self.schedule {
                if off >= len {
                    break;
                }
                segs.push((b * len + off, p * p));
                off += p * p;
            }
        }
        segs
    }

    /// Smoothing applied to each scale block separately.
    pub fn smooth(&self, g: &mut Graph, logits: Var, batch: usize, len: usize) -> Result<Var> {
        let segs = self.scale_segments(batch, len);
        smooth_scaling(g, &self.cfg.ssl, logits, &segs)
    }

    /// Teacher-forced cross entropy over all positions. Classes are replaced
    /// by the null class with the configured probability when training.
    pub fn loss<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        items: &[&SequenceItem],
        use_ssl: bool,
        rng: &mut R,
    ) -> Result<Var> {
        let classes: Vec<usize> = items
            .iter()
            .map(|it| {
                if g.training && rng.random::<f32>() < self.cfg.class_dropout {
                    self.cfg.null_class()
                } else {
                    it.class_id
                }
            })
            .collect();
        let teacher: Vec<&[f32]> = items.iter().map(|it| it.teacher.as_slice()).collect();
        let (seq, len) = self.build_sequence(g, &classes, &teacher)?;
        let mut logits = self.forward_logits(g, seq, items.len(), len)?;
        if use_ssl {
            logits = self.smooth(g, logits, items.len(), len)?;
        }
        let targets: Vec<usize> = items.iter().flat_map(|it| it.targets.iter().copied()).collect();
        var_loss(g, logits, &targets)
    }
}

/// Mean cross entropy over every position.
pub fn var_loss(g: &mut Graph, logits: Var, targets: &[usize]) -> Result<Var> {
    g.tape.softmax_cross_entropy(logits, targets)
}

/// `[1×C×p×p]` to row-major `p²×C`.
pub fn channels_last(map: &Tensor) -> Vec<f32> {
    let s = map.shape();
    let (c, hw) = (s[s.len() - 3], s[s.len() - 2] * s[s.len() - 1]);
    let d = map.data();
    let mut out = Vec::with_capacity(c * hw);
    for pos in 0..hw {
        for ch in 0..c {
            out.push(d[ch * hw + pos]);
        }
    }
    out
}
