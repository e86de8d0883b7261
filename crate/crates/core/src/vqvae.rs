//! Convolutional autoencoder with a multi-scale residual vector quantizer.
//!
//! The latent `f` is explained coarse to fine: at scale `k` the residual
//! `f − f̂_{k−1}` is resized to `p_k × p_k`, snapped to codebook vectors,
//! resized back to full latent size, refined by `φ_k` and accumulated.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{init_conv, Graph, ParamStore};
use crate::tensor::{Tensor, Var};

pub const PREFIX: &str = "vqvae.";
pub const CODEBOOK: &str = "vqvae.codebook";

/// Which side of the quantization loss carries the β weight.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantLossForm {
    /// `‖sg[ẑ] − d‖² + β‖ẑ − sg[d]‖²`
    Printed,
    /// `β‖sg[ẑ] − d‖² + ‖ẑ − sg[d]‖²` (commitment weighted by β)
    Conventional,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VqvaeConfig {
    pub image_side: usize,
    pub downsample: usize,
    pub latent_channels: usize,
    pub codebook_size: usize,
    pub hidden: usize,
    pub schedule: Vec<usize>,
    pub beta: f32,
    pub quant_loss: QuantLossForm,
    /// Replace codes unused for a whole epoch with recent quantizer inputs.
    pub reseed_dead_codes: bool,
}

impl Default for VqvaeConfig {
    fn default() -> Self {
        VqvaeConfig {
            image_side: 32,
            downsample: 4,
            latent_channels: 16,
            codebook_size: 128,
            hidden: 64,
            schedule: vec![1, 2, 4, 8],
            beta: 0.25,
            quant_loss: QuantLossForm::Printed,
            reseed_dead_codes: true,
        }
    }
}

impl VqvaeConfig {
    pub fn latent_side(&self) -> usize {
        self.image_side / self.downsample.max(1)
    }

    fn stages(&self) -> usize {
        self.downsample.trailing_zeros() as usize
    }

    /// Total number of tokens across all scales.
    pub fn token_count(&self) -> usize {
        self.schedule.iter().map(|p| p * p).sum()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(format!("vqvae: {}", m)));
        if self.downsample == 0 || !self.downsample.is_power_of_two() {
            return fail(format!("downsample factor {} must be a power of two", self.downsample));
        }
        if self.image_side == 0 || self.image_side % self.downsample != 0 {
            return fail(format!(
                "image side {} is not divisible by the downsample factor {}",
                self.image_side, self.downsample
            ));
        }
        if self.codebook_size < 2 || self.latent_channels == 0 || self.hidden < 2 || self.hidden % 2 != 0 {
            return fail("need K >= 2, C >= 1 and an even hidden width".into());
        }
        if !(self.beta >= 0.0) {
            return fail("beta must be non-negative".into());
        }
        validate_schedule(&self.schedule, self.latent_side())
    }
}

/// Patch sides must be strictly increasing, start at 1 and end at the latent
/// side. A lone `[h]` is also accepted: that is plain single-scale VQ.
pub fn validate_schedule(schedule: &[usize], latent_side: usize) -> Result<()> {
    let ok = (schedule.first() == Some(&1) || schedule.len() == 1)
        && schedule.last() == Some(&latent_side)
        && schedule.windows(2).all(|w| w[0] < w[1]);
    if ok {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "scale schedule {:?} must increase strictly from 1 to the latent side {}",
            schedule, latent_side
        )))
    }
}

/// Per-scale index grids, coarsest first; grid `k` is row-major `p_k × p_k`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MultiScaleTokens {
    pub grids: Vec<Vec<usize>>,
}

impl MultiScaleTokens {
    pub fn flatten(&self) -> Vec<usize> {
        self.grids.concat()
    }

    pub fn validate(&self, schedule: &[usize], k: usize) -> Result<()> {
        if self.grids.len() != schedule.len() {
            return Err(Error::Config(format!(
                "{} token grids for a {}-scale schedule",
                self.grids.len(),
                schedule.len()
            )));
        }
        for (g, &p) in self.grids.iter().zip(schedule) {
            if g.len() != p * p {
                return Err(Error::dim("tokens", format!("grid of {} for patch side {}", g.len(), p)));
            }
            if let Some(&bad) = g.iter().find(|&&i| i >= k) {
                return Err(Error::Index { op: "tokens", index: bad, size: k });
            }
        }
        Ok(())
    }
}

/// `argmin_k ‖v − z_k‖²` over a row-major `K × C` codebook; ties go to the
/// lowest index.
pub fn nearest_code(codebook: &[f32], channels: usize, v: &[f32]) -> usize {
    let mut best = (f64::INFINITY, 0usize);
    for (k, z) in codebook.chunks_exact(channels).enumerate() {
        let d: f64 = z
            .iter()
            .zip(v)
            .map(|(&a, &b)| {
                let t = a as f64 - b as f64;
                t * t
            })
            .sum();
        if d < best.0 {
            best = (d, k);
        }
    }
    best.1
}

/// Everything the quantizer produced for a batch.
pub struct Quantized {
    /// Accumulated reconstruction `f̂_n`, `[B×C×h×w]`.
    pub f_hat: Var,
    /// Decoder input: `f̂ + (f − sg[f])`.
    pub decoder_input: Var,
    pub tokens: Vec<MultiScaleTokens>,
    pub loss: Var,
    /// Quantizer inputs `d_k`, `[B×C×p_k×p_k]`.
    pub inputs: Vec<Var>,
    /// Partial sums `f̂_1 … f̂_n`.
    pub partials: Vec<Var>,
}

#[derive(Debug, Clone)]
pub struct Vqvae {
    pub cfg: VqvaeConfig,
}

impl Vqvae {
    pub fn new(cfg: VqvaeConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Vqvae { cfg })
    }

    /// Fresh parameters: He-style conv weights, zero biases, identity `φ_k`,
    /// codebook rows drawn from `N(0, 1/C)`.
    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        let c = &self.cfg;
        let (h, lc) = (c.hidden, c.latent_channels);
        let m = c.stages();
        init_conv(store, "vqvae.enc.0", 1, h / 2, 3, 2.0, rng);
        for i in 0..m {
            let cin = if i == 0 { h / 2 } else { h };
            init_conv(store, &format!("vqvae.enc.{}", i + 1), cin, h, 3, 2.0, rng);
        }
        let last = if m == 0 { h / 2 } else { h };
        init_conv(store, "vqvae.enc.out", last, lc, 1, 1.0, rng);
        store.insert(
            CODEBOOK,
            Tensor::randn(&[c.codebook_size, lc], 1.0 / (lc as f32).sqrt(), rng),
        );
        for k in 0..c.schedule.len() {
            store.insert(format!("vqvae.phi.{k}.w"), identity_kernel(lc));
            store.insert(format!("vqvae.phi.{k}.b"), Tensor::zeros(&[lc]));
        }
        init_conv(store, "vqvae.dec.in", lc, h, 3, 2.0, rng);
        for i in 0..m {
            let cout = if i + 1 == m { h / 2 } else { h };
            init_conv(store, &format!("vqvae.dec.up.{i}"), h, cout, 3, 2.0, rng);
        }
        let out_in = if m == 0 { h } else { h / 2 };
        init_conv(store, "vqvae.dec.out", out_in, 1, 3, 1.0, rng);
    }

    fn check_image(&self, shape: &[usize]) -> Result<usize> {
        let s = self.cfg.image_side;
        match shape {
            [b, 1, hh, ww] if *hh == s && *ww == s => Ok(*b),
            [_, 1, hh, ww] if hh % self.cfg.downsample != 0 || ww % self.cfg.downsample != 0 => Err(Error::Config(
                format!("image {}x{} not divisible by downsample factor {}", hh, ww, self.cfg.downsample),
            )),
            _ => Err(Error::dim("encode", format!("expected [B,1,{s},{s}], got {:?}", shape))),
        }
    }

    /// `[B×1×H×W] → [B×C×h×w]`.
    pub fn encode(&self, g: &mut Graph, x: Var) -> Result<Var> {
        self.check_image(g.tape.shape(x))?;
        let mut y = g.conv("vqvae.enc.0", x, 1, 1)?;
        y = g.tape.gelu(y)?;
        for i in 0..self.cfg.stages() {
            y = g.conv(&format!("vqvae.enc.{}", i + 1), y, 2, 1)?;
            y = g.tape.gelu(y)?;
        }
        g.conv("vqvae.enc.out", y, 1, 0)
    }

    /// `[B×C×h×w] → [B×1×H×W]` in `[0,1]`.
    pub fn decode(&self, g: &mut Graph, f_hat: Var) -> Result<Var> {
        let n = self.cfg.latent_side();
        match g.tape.shape(f_hat) {
            [_, c, hh, ww] if *c == self.cfg.latent_channels && *hh == n && *ww == n => {}
            s => {
                return Err(Error::dim(
                    "decode",
                    format!("expected [B,{},{n},{n}] latent, got {:?}", self.cfg.latent_channels, s),
                ))
            }
        }
        let mut y = g.conv("vqvae.dec.in", f_hat, 1, 1)?;
        y = g.tape.gelu(y)?;
        for i in 0..self.cfg.stages() {
            y = g.tape.upsample_nearest(y, 2)?;
            y = g.conv(&format!("vqvae.dec.up.{i}"), y, 1, 1)?;
            y = g.tape.gelu(y)?;
        }
        y = g.conv("vqvae.dec.out", y, 1, 1)?;
        y = g.tape.sigmoid(y)?;
        g.tape.clamp(y, 0.0, 1.0)
    }

    /// Looks up codes for per-sample index grids at scale `k`, resizes them to
    /// the latent side and applies `φ_k`; returns `(ẑ_k, φ_k(u_k))`.
    pub fn scale_contribution(&self, g: &mut Graph, k: usize, idx: &[Vec<usize>]) -> Result<(Var, Var)> {
        let c = self.cfg.latent_channels;
        let p = *self
            .cfg
            .schedule
            .get(k)
            .ok_or_else(|| Error::Config(format!("scale {} outside schedule", k)))?;
        let n = self.cfg.latent_side();
        let kk = self.cfg.codebook_size;
        let b = idx.len();
        let cb = g.p(CODEBOOK)?;
        let mut map = Vec::with_capacity(b * c * p * p);
        for grid in idx {
            if grid.len() != p * p {
                return Err(Error::dim("tokens", format!("grid of {} for patch side {}", grid.len(), p)));
            }
            for ch in 0..c {
                for &t in grid {
                    if t >= kk {
                        return Err(Error::Index { op: "codebook", index: t, size: kk });
                    }
                    map.push(Some(t * c + ch));
                }
            }
        }
        let z = g.tape.gather(cb, map, &[b, c, p, p])?;
        let u = g.tape.bilinear_resize(z, n, n)?;
        let phi = g.conv(&format!("vqvae.phi.{k}"), u, 1, 1)?;
        Ok((z, phi))
    }

    /// Residual multi-scale quantization of a latent batch `[B×C×h×w]`.
    pub fn quantize(&self, g: &mut Graph, f: Var) -> Result<Quantized> {
        let (c, n) = (self.cfg.latent_channels, self.cfg.latent_side());
        let b = match g.tape.shape(f) {
            [b, cc, hh, ww] if *cc == c && *hh == n && *ww == n => *b,
            s => {
                return Err(Error::Config(format!(
                    "latent {:?} does not match schedule ending at {} with {} channels",
                    s, n, c
                )))
            }
        };
        let (w_fit, w_code) = match self.cfg.quant_loss {
            QuantLossForm::Printed => (1.0, self.cfg.beta),
            QuantLossForm::Conventional => (self.cfg.beta, 1.0),
        };
        let codebook = g.store().get(CODEBOOK)?.data().to_vec();
        let mut f_hat: Option<Var> = None;
        let mut tokens = vec![MultiScaleTokens { grids: Vec::new() }; b];
        let (mut inputs, mut partials, mut terms) = (Vec::new(), Vec::new(), Vec::new());
        for (k, &p) in self.cfg.schedule.clone().iter().enumerate() {
            let r = match f_hat {
                Some(prev) => {
                    let sg = g.tape.detach(prev);
                    g.tape.sub(f, sg)?
                }
                None => f,
            };
            let d = g.tape.bilinear_resize(r, p, p)?;
            let dd = g.tape.data(d);
            let mut idx = Vec::with_capacity(b);
            let mut v = vec![0.0f32; c];
            for bi in 0..b {
                let mut grid = Vec::with_capacity(p * p);
                for pos in 0..p * p {
                    for (ch, slot) in v.iter_mut().enumerate() {
                        *slot = dd[(bi * c + ch) * p * p + pos];
                    }
                    grid.push(nearest_code(&codebook, c, &v));
                }
                idx.push(grid);
            }
            let (z, contrib) = self.scale_contribution(g, k, &idx)?;
            for (t, grid) in tokens.iter_mut().zip(idx) {
                t.grids.push(grid);
            }
            // sum over channels, mean over positions
            let zs = g.tape.detach(z);
            let ds = g.tape.detach(d);
            let fit = g.tape.mse(zs, d)?;
            let code = g.tape.mse(z, ds)?;
            let fit = g.tape.scale(fit, w_fit * c as f32)?;
            let code = g.tape.scale(code, w_code * c as f32)?;
            terms.push(g.tape.add(fit, code)?);
            let next = match f_hat {
                Some(prev) => g.tape.add(prev, contrib)?,
                None => contrib,
            };
            f_hat = Some(next);
            inputs.push(d);
            partials.push(next);
        }
        let f_hat = f_hat.ok_or_else(|| Error::Config("empty scale schedule".into()))?;
        let mut loss = terms[0];
        for &t in &terms[1..] {
            loss = g.tape.add(loss, t)?;
        }
        let sg_f = g.tape.detach(f);
        let pass = g.tape.sub(f, sg_f)?;
        let decoder_input = g.tape.add(f_hat, pass)?;
        Ok(Quantized { f_hat, decoder_input, tokens, loss, inputs, partials })
    }

    /// Image batch `[B×1×H×W]` to tokens, with no gradient tracking.
    pub fn tokenize(&self, store: &ParamStore, images: &Tensor) -> Result<Vec<MultiScaleTokens>> {
        let mut g = Graph::inference(store);
        let x = g.tape.leaf(images)?;
        let f = self.encode(&mut g, x)?;
        Ok(self.quantize(&mut g, f)?.tokens)
    }

    /// Cumulative latents `f̂_1 … f̂_n` for a batch of token pyramids.
    pub fn tokens_to_partials(&self, store: &ParamStore, tokens: &[MultiScaleTokens]) -> Result<Vec<Tensor>> {
        for t in tokens {
            t.validate(&self.cfg.schedule, self.cfg.codebook_size)?;
        }
        let mut g = Graph::inference(store);
        let mut acc: Option<Var> = None;
        let mut out = Vec::with_capacity(self.cfg.schedule.len());
        for k in 0..self.cfg.schedule.len() {
            let idx: Vec<Vec<usize>> = tokens.iter().map(|t| t.grids[k].clone()).collect();
            let (_, contrib) = self.scale_contribution(&mut g, k, &idx)?;
            let next = match acc {
                Some(prev) => g.tape.add(prev, contrib)?,
                None => contrib,
            };
            out.push(g.tape.tensor(next));
            acc = Some(next);
        }
        Ok(out)
    }

    /// Final latent `f̂_n` for a batch of token pyramids, `[B×C×h×w]`.
    pub fn tokens_to_latent(&self, store: &ParamStore, tokens: &[MultiScaleTokens]) -> Result<Tensor> {
        self.tokens_to_partials(store, tokens)?
            .pop()
            .ok_or_else(|| Error::Config("empty scale schedule".into()))
    }

    /// Teacher-forcing inputs: for scale `k ≥ 2`, `f̂_{k−1}` resized to
    /// `p_k`. Returns one `[B×C×p_k×p_k]` tensor per scale after the first.
    pub fn tokens_to_teacher_inputs(&self, store: &ParamStore, tokens: &[MultiScaleTokens]) -> Result<Vec<Tensor>> {
        let partials = self.tokens_to_partials(store, tokens)?;
        let mut out = Vec::with_capacity(partials.len().saturating_sub(1));
        for (k, prev) in partials.iter().enumerate().take(partials.len().saturating_sub(1)) {
            out.push(self.teacher_input(prev, k + 1)?);
        }
        Ok(out)
    }

    /// `f̂` resized to the patch side of scale `k`.
    pub fn teacher_input(&self, partial: &Tensor, k: usize) -> Result<Tensor> {
        let p = self.cfg.schedule[k];
        let s = partial.shape();
        if s.len() != 4 {
            return Err(Error::dim("teacher_input", format!("{:?}", s)));
        }
        let data = crate::tensor::kernels::bilinear_resize(partial.data(), s[0] * s[1], s[2], s[3], p, p);
        Tensor::new(vec![s[0], s[1], p, p], data)
    }

    /// Decodes a latent batch without gradient tracking.
    pub fn decode_latent(&self, store: &ParamStore, latent: &Tensor) -> Result<Tensor> {
        let mut g = Graph::inference(store);
        let f = g.tape.leaf(latent)?;
        let y = self.decode(&mut g, f)?;
        Ok(g.tape.tensor(y))
    }
}

fn identity_kernel(c: usize) -> Tensor {
    let mut w = Tensor::zeros(&[c, c, 3, 3]);
    for i in 0..c {
        w.data_mut()[(i * c + i) * 9 + 4] = 1.0;
    }
    w
}

/// `MSE(x, x̂) + L_quant`.
pub fn vqvae_loss(g: &mut Graph, x: Var, x_hat: Var, l_quant: Var) -> Result<Var> {
    let recon = g.tape.mse(x_hat, x)?;
    g.tape.add(recon, l_quant)
}

/// Stacks `[1×H×W]` (or `[C×H×W]`) images into a `[B×C×H×W]` batch.
pub fn stack(images: &[&Tensor]) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| Error::dim("stack", "empty batch"))?;
    let mut data = Vec::with_capacity(first.numel() * images.len());
    for im in images {
        if im.shape() != first.shape() {
            return Err(Error::dim("stack", format!("{:?} vs {:?}", im.shape(), first.shape())));
        }
        data.extend_from_slice(im.data());
    }
    let mut shape = vec![images.len()];
    shape.extend_from_slice(first.shape());
    Tensor::new(shape, data)
}

/// Splits a `[B×...]` batch into `B` tensors of the trailing shape.
pub fn unstack(batch: &Tensor) -> Vec<Tensor> {
    let s = batch.shape();
    let tail = s[1..].to_vec();
    let n: usize = tail.iter().product();
    batch
        .data()
        .chunks(n.max(1))
        .map(|c| Tensor::new(tail.clone(), c.to_vec()).expect("chunk matches shape"))
        .collect()
}
