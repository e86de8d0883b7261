//! Windowed residual MLP over logits.
//!
//! Consecutive groups of `window` positions are flattened to one
//! `window·V` vector, layer-normalized, passed through
//! `W₂(GELU(W₁ x))` with dropout and added back. Groups never straddle a
//! segment boundary; short tails are zero-padded.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{init_layer_norm, init_linear, Graph, ParamStore};
use crate::tensor::{Tensor, Var};
use rand::Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SslConfig {
    pub enabled: bool,
    pub window: usize,
    pub hidden_mult: usize,
    pub dropout: f32,
}

impl Default for SslConfig {
    fn default() -> Self {
        SslConfig {
            enabled: true,
            window: 8,
            hidden_mult: 2,
            dropout: 0.1,
        }
    }
}

impl SslConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 || self.hidden_mult == 0 || !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("invalid smoothing layer settings {:?}", self)));
        }
        Ok(())
    }
}

/// `W₂` starts at zero, so a fresh layer is the identity.
pub fn init<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &SslConfig, vocab: usize, rng: &mut R) {
    let flat = cfg.window * vocab;
    let hidden = cfg.hidden_mult * vocab;
    init_layer_norm(store, "var.ssl.ln", flat);
    init_linear(store, "var.ssl.w1", flat, hidden, 1.0 / (flat as f32).sqrt(), rng);
    store.insert("var.ssl.w2.w", Tensor::zeros(&[hidden, flat]));
    store.insert("var.ssl.w2.b", Tensor::zeros(&[flat]));
}

/// Applies the layer to `logits[N×V]`. Each `(start, len)` segment is
/// windowed independently; rows outside every segment pass through.
pub fn smooth_scaling(g: &mut Graph, cfg: &SslConfig, logits: Var, segments: &[(usize, usize)]) -> Result<Var> {
    let (n, v) = match g.tape.shape(logits) {
        [n, v] => (*n, *v),
        s => return Err(Error::dim("smooth_scaling", format!("expected [N,V] logits, got {:?}", s))),
    };
    let w = cfg.window;
    let mut windows: Vec<(usize, usize)> = Vec::new(); // (first row, real rows)
    for &(start, len) in segments {
        if start + len > n {
            return Err(Error::dim("smooth_scaling", format!("segment {}..{} beyond {} rows", start, start + len, n)));
        }
        let mut off = 0;
        while off < len {
            windows.push((start + off, w.min(len - off)));
            off += w;
        }
    }
    if windows.is_empty() {
        return Ok(logits);
    }
    let flat = w * v;
    let mut gather_in = Vec::with_capacity(windows.len() * flat);
    let mut back = vec![None; n * v];
    for (wi, &(first, real)) in windows.iter().enumerate() {
        for r in 0..w {
            for c in 0..v {
                if r < real {
                    gather_in.push(Some((first + r) * v + c));
                    back[(first + r) * v + c] = Some(wi * flat + r * v + c);
                } else {
                    gather_in.push(None);
                }
            }
        }
    }
    let x = g.tape.gather(logits, gather_in, &[windows.len(), flat])?;
    let x = g.layer_norm("var.ssl.ln", x, 1e-5)?;
    let h = g.linear("var.ssl.w1", x)?;
    let h = g.tape.gelu(h)?;
    let h = g.dropout(h, cfg.dropout)?;
    let y = g.linear("var.ssl.w2", h)?;
    let delta = g.tape.gather(y, back, &[n, v])?;
    g.tape.add(logits, delta)
}

/// Sequence form: `logits[B×L×V]`, each sequence windowed from its start.
pub fn smooth_scaling_batch(g: &mut Graph, cfg: &SslConfig, logits: Var) -> Result<Var> {
    let (b, l, v) = match g.tape.shape(logits) {
        [b, l, v] => (*b, *l, *v),
        s => return Err(Error::dim("smooth_scaling", format!("expected [B,L,V] logits, got {:?}", s))),
    };
    let rows = g.tape.reshape(logits, &[b * l, v])?;
    let segments: Vec<(usize, usize)> = (0..b).map(|i| (i * l, l)).collect();
    let out = smooth_scaling(g, cfg, rows, &segments)?;
    g.tape.reshape(out, &[b, l, v])
}
