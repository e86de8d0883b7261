//! Guided, nucleus-sampled generation of token pyramids and images.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{channels_last, smooth_scaling, VarModel};
use crate::error::{Error, Result};
use crate::nn::{Graph, ParamStore};
use crate::pem::Pem;
use crate::tensor::Tensor;
use crate::vqvae::{MultiScaleTokens, Vqvae};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub temperature: f32,
    pub top_p: f32,
    pub cfg_scale: f32,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            temperature: 1.0,
            top_p: 0.95,
            cfg_scale: 1.5,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) || !(self.top_p > 0.0 && self.top_p <= 1.0) || !(self.cfg_scale >= 0.0) {
            return Err(Error::Config(format!(
                "sampler needs temperature > 0, top_p in (0,1] and cfg_scale >= 0, got {:?}",
                self
            )));
        }
        Ok(())
    }
}

/// `(1+g)·cond − g·uncond` with `g = cfg_scale · stage_ratio`.
pub fn cfg_combine(cond: &[f32], uncond: &[f32], cfg_scale: f32, stage_ratio: f32) -> Vec<f32> {
    let g = cfg_scale * stage_ratio;
    cond.iter().zip(uncond).map(|(&c, &u)| (1.0 + g) * c - g * u).collect()
}

/// Temperature-scaled nucleus sampling. The kept set is the shortest prefix
/// of the probability-sorted vocabulary whose mass reaches `top_p`; it always
/// contains the most likely token.
pub fn sample<R: Rng + ?Sized>(logits: &[f32], temperature: f32, top_p: f32, rng: &mut R) -> usize {
    let t = temperature as f64;
    let scaled: Vec<f64> = logits.iter().map(|&l| l as f64 / t).collect();
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scaled.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    let mut order: Vec<usize> = (0..logits.len()).collect();
    // stable: equal probabilities keep index order
    order.sort_by(|&a, &b| exps[b].total_cmp(&exps[a]));
    let mut kept = 0;
    let mut mass = 0.0;
    for &i in &order {
        kept += 1;
        mass += exps[i] / total;
        if mass >= top_p as f64 {
            break;
        }
    }
    let nucleus = &order[..kept];
    let z: f64 = nucleus.iter().map(|&i| exps[i]).sum();
    let u = rng.random::<f64>() * z;
    let mut acc = 0.0;
    for &i in nucleus {
        acc += exps[i];
        if u < acc {
            return i;
        }
    }
    nucleus[kept - 1]
}

/// Independent stream for sample `index` under `seed`.
pub fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(index);
    r
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerateOptions {
    pub class_id: usize,
    pub sampler: SamplerConfig,
    pub sample_index: u64,
    pub use_ssl: bool,
    pub use_pem: bool,
    /// Grids imposed for the leading scales instead of sampling them.
    pub forced: Vec<Vec<usize>>,
}

impl GenerateOptions {
    pub fn new(class_id: usize, sampler: SamplerConfig) -> Self {
        GenerateOptions {
            class_id,
            sampler,
            sample_index: 0,
            use_ssl: true,
            use_pem: true,
            forced: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generated {
    pub tokens: MultiScaleTokens,
    /// Final latent `[1×C×h×w]`.
    pub latent: Tensor,
    /// Decoder output before refinement, `[1×H×W]`.
    pub decoded: Tensor,
    /// Final image, `[1×H×W]`.
    pub image: Tensor,
}

/// Generates one image, stage by stage: the sequence so far is run through
/// the transformer with the class and the null class, the last block's
/// logits are guided, smoothed and sampled, and the new tokens extend the
/// accumulated latent.
pub fn generate(
    vqvae: &Vqvae,
    model: &VarModel,
    pem: Option<&Pem>,
    store: &ParamStore,
    opts: &GenerateOptions,
) -> Result<Generated> {
    opts.sampler.validate()?;
    if opts.class_id > model.cfg.num_classes {
        return Err(Error::Index { op: "generate", index: opts.class_id, size: model.cfg.num_classes + 1 });
    }
    let n = model.schedule.len();
    if opts.forced.len() > n {
        return Err(Error::Config(format!("{} forced grids for {} scales", opts.forced.len(), n)));
    }
    let (k_vocab, null) = (model.vocab, model.cfg.null_class());
    let mut rng = sample_rng(opts.sampler.seed, opts.sample_index);
    let mut grids: Vec<Vec<usize>> = Vec::with_capacity(n);
    let mut teacher: Vec<f32> = Vec::new();
    let mut partial: Option<Tensor> = None;
    for k in 0..n {
        let p = model.schedule[k];
        let grid = if let Some(f) = opts.forced.get(k) {
            if f.len() != p * p || f.iter().any(|&t| t >= k_vocab) {
                return Err(Error::Config(format!("forced grid {} is invalid for patch side {}", k, p)));
            }
            f.clone()
        } else {
            let ratio = if n > 1 { k as f32 / (n - 1) as f32 } else { 0.0 };
            let guided = opts.sampler.cfg_scale * ratio != 0.0;
            let classes: Vec<usize> = if guided { vec![opts.class_id, null] } else { vec![opts.class_id] };
            let rows: Vec<&[f32]> = classes.iter().map(|_| teacher.as_slice()).collect();
            let mut g = Graph::inference(store);
            let (seq, len) = model.build_sequence(&mut g, &classes, &rows)?;
            let logits = model.forward_logits(&mut g, seq, classes.len(), len)?;
            let ld = g.tape.data(logits);
            let block = p * p * k_vocab;
            let cond = &ld[(len - p * p) * k_vocab..len * k_vocab];
            let combined = if guided {
                let uncond = &ld[(2 * len - p * p) * k_vocab..2 * len * k_vocab];
                cfg_combine(cond, uncond, opts.sampler.cfg_scale, ratio)
            } else {
                cond.to_vec()
            };
            debug_assert_eq!(combined.len(), block);
            let final_logits = if opts.use_ssl {
                let v = g.tape.constant(&[p * p, k_vocab], combined)?;
                let s = smooth_scaling(&mut g, &model.cfg.ssl, v, &[(0, p * p)])?;
                g.tape.data(s).to_vec()
            } else {
                combined
            };
            final_logits
                .chunks(k_vocab)
                .map(|row| sample(row, opts.sampler.temperature, opts.sampler.top_p, &mut rng))
                .collect()
        };
        // extend the latent exactly as the teacher-forcing path does
        let mut g = Graph::inference(store);
        let (_, contrib) = vqvae.scale_contribution(&mut g, k, std::slice::from_ref(&grid))?;
        let next = match &partial {
            Some(prev) => {
                let pv = g.tape.leaf(prev)?;
                g.tape.add(pv, contrib)?
            }
            None => contrib,
        };
        let latent = g.tape.tensor(next);
        if k + 1 < n {
            teacher.extend(channels_last(&vqvae.teacher_input(&latent, k + 1)?));
        }
        partial = Some(latent);
        grids.push(grid);
    }
    let latent = partial.ok_or_else(|| Error::Config("empty scale schedule".into()))?;
    let decoded = vqvae.decode_latent(store, &latent)?;
    let image = match pem {
        Some(p) if opts.use_pem => p.apply_images(store, &decoded)?,
        _ => decoded.clone(),
    };
    let side = vqvae.cfg.image_side;
    Ok(Generated {
        tokens: MultiScaleTokens { grids },
        latent,
        decoded: decoded.reshape(&[1, side, side])?,
        image: image.reshape(&[1, side, side])?,
    })
}
