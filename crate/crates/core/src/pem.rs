//! Image refinement: a condition vector pooled from the whole image drives
//! per-channel scale and shift in three cascaded modulation blocks, and the
//! result is added back onto the input image.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{init_conv, init_linear, init_zero_conv, Graph, ParamStore};
use crate::tensor::{Tensor, Var};

pub const PREFIX: &str = "pem.";
pub const GFM_BLOCKS: usize = 3;

/// When the refinement module is trained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PemTraining {
    /// Together with the autoencoder, on the refined reconstruction.
    Joint,
    /// Afterwards, with the autoencoder frozen.
    PostHoc,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PemConfig {
    pub channels: usize,
    pub cond_dim: usize,
    pub cond_hidden: usize,
    pub cond_kernel: usize,
    pub cond_stride: usize,
    pub training: PemTraining,
    /// Epochs for post-hoc training; ignored for joint training.
    pub post_hoc_epochs: usize,
}

impl Default for PemConfig {
    fn default() -> Self {
        PemConfig {
            channels: 16,
            cond_dim: 32,
            cond_hidden: 16,
            cond_kernel: 3,
            cond_stride: 2,
            training: PemTraining::Joint,
            post_hoc_epochs: 50,
        }
    }
}

impl PemConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.cond_dim == 0 || self.cond_hidden == 0 {
            return Err(Error::Config("pem: channel counts must be positive".into()));
        }
        if self.cond_kernel == 0 || self.cond_kernel % 2 == 0 || self.cond_stride == 0 {
            return Err(Error::Config("pem: condition kernel must be odd and stride positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Pem {
    pub cfg: PemConfig,
}

impl Pem {
    pub fn new(cfg: PemConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Pem { cfg })
    }

    /// Output conv starts at zero, so a fresh module is the identity.
    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        let c = &self.cfg;
        init_conv(store, "pem.cond.0", 1, c.cond_hidden, c.cond_kernel, 2.0, rng);
        init_conv(store, "pem.cond.1", c.cond_hidden, c.cond_dim, c.cond_kernel, 1.0, rng);
        init_conv(store, "pem.in", 1, c.channels, 3, 2.0, rng);
        let lin_std = 0.1 / (c.cond_dim as f32).sqrt();
        for i in 0..GFM_BLOCKS {
            init_conv(store, &format!("pem.gfm.{i}.f"), c.channels, c.channels, 3, 2.0, rng);
            init_linear(store, &format!("pem.gfm.{i}.scale"), c.cond_dim, c.channels, lin_std, rng);
            init_linear(store, &format!("pem.gfm.{i}.shift"), c.cond_dim, c.channels, lin_std, rng);
        }
        init_zero_conv(store, "pem.out", c.channels, 1, 3);
    }

    /// `[B×1×H×W] → [B×d_c]`: conv, ReLU, conv, spatial mean.
    pub fn condition_net(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let (k, s) = (self.cfg.cond_kernel, self.cfg.cond_stride);
        let mut y = g.conv("pem.cond.0", x, s, k / 2)?;
        y = g.tape.relu(y)?;
        y = g.conv("pem.cond.1", y, s, k / 2)?;
        g.tape.spatial_mean(y)
    }

    /// `ReLU(f(x)·scale(cond) + shift(cond) + f(x))` for block `i`.
    pub fn gfm(&self, g: &mut Graph, i: usize, x: Var, cond: Var) -> Result<Var> {
        let fx = g.conv(&format!("pem.gfm.{i}.f"), x, 1, 1)?;
        let scale = g.linear(&format!("pem.gfm.{i}.scale"), cond)?;
        let shift = g.linear(&format!("pem.gfm.{i}.shift"), cond)?;
        let m = g.tape.channel_mul(fx, scale)?;
        let m = g.tape.channel_add(m, shift)?;
        let m = g.tape.add(m, fx)?;
        g.tape.relu(m)
    }

    /// Refined image batch, clamped to `[0,1]`.
    pub fn apply(&self, g: &mut Graph, x: Var) -> Result<Var> {
        match g.tape.shape(x) {
            [_, 1, _, _] => {}
            s => return Err(Error::dim("pem", format!("expected [B,1,H,W], got {:?}", s))),
        }
        let cond = self.condition_net(g, x)?;
        let mut h = g.conv("pem.in", x, 1, 1)?;
        for i in 0..GFM_BLOCKS {
            h = self.gfm(g, i, h, cond)?;
        }
        let r = g.conv("pem.out", h, 1, 1)?;
        let y = g.tape.add(x, r)?;
        g.tape.clamp(y, 0.0, 1.0)
    }

    /// Refines an image batch without gradient tracking.
    pub fn apply_images(&self, store: &ParamStore, images: &Tensor) -> Result<Tensor> {
        let mut g = Graph::inference(store);
        let x = g.tape.leaf(images)?;
        let y = self.apply(&mut g, x)?;
        Ok(g.tape.tensor(y))
    }
}
