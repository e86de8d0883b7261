//! End-to-end stages: autoencoder training, frozen-tokenizer transformer
//! training, generation and the evaluation arms.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::downstream::{paired_run, train_classifier, ReportRow, SampleSource};
use crate::error::{Error, Result};
use crate::metrics::{frechet_feature_distance, ms_ssim, ssim, MetricRow, SsimConfig};
use crate::nn::{Graph, ParamStore};
use crate::optim::{cosine_lr, AdamW};
use crate::pem::{Pem, PemTraining};
use crate::synth::{Dataset, Split};
use crate::tensor::Tensor;
use crate::var::{generate, GenerateOptions, Generated, SamplerConfig, SequenceItem, VarModel};
use crate::vqvae::{stack, unstack, Vqvae, CODEBOOK};

pub const VQ_LOG_HEADER: &str = "epoch,l_recon,l_quant";
pub const VAR_LOG_HEADER: &str = "epoch,l_var";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VqLogRow {
    pub epoch: usize,
    pub l_recon: f64,
    pub l_quant: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VarLogRow {
    pub epoch: usize,
    pub l_var: f64,
}

pub fn vq_log_csv(rows: &[VqLogRow]) -> String {
    let mut s = format!("{VQ_LOG_HEADER}\n");
    for r in rows {
        s.push_str(&format!("{},{:.6},{:.6}\n", r.epoch, r.l_recon, r.l_quant));
    }
    s
}

pub fn var_log_csv(rows: &[VarLogRow]) -> String {
    let mut s = format!("{VAR_LOG_HEADER}\n");
    for r in rows {
        s.push_str(&format!("{},{:.6}\n", r.epoch, r.l_var));
    }
    s
}

fn numeric(stage: &str, epoch: usize, e: Error) -> Error {
    if e.is_numeric() {
        Error::Numeric(format!("{stage} diverged in epoch {epoch}: {e}"))
    } else {
        e
    }
}

/// Stage 1: autoencoder and quantizer, with the refinement module trained
/// jointly on the refined reconstruction unless configured otherwise.
/// Returns parameters under `vqvae.` and `pem.`.
pub fn train_vqvae(
    cfg: &RunConfig,
    images: &[Tensor],
    mut on_epoch: impl FnMut(&VqLogRow),
) -> Result<(ParamStore, Vec<VqLogRow>)> {
    cfg.validate()?;
    if images.is_empty() {
        return Err(Error::Config("no training images".into()));
    }
    let vq = Vqvae::new(cfg.vqvae.clone())?;
    let pem = Pem::new(cfg.pem.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut store = ParamStore::new();
    vq.init(&mut store, &mut rng);
    pem.init(&mut store, &mut rng);
    let joint = cfg.pem.training == PemTraining::Joint && !cfg.ablation.disable_pem;
    let stage = &cfg.stage1;
    let mut opt = AdamW::new(stage.optim.clone());
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut log = Vec::with_capacity(stage.epochs);
    for epoch in 0..stage.epochs {
        let lr = cosine_lr(stage.optim.lr, stage.optim.min_lr, epoch, stage.epochs);
        order.shuffle(&mut rng);
        let (mut sum_r, mut sum_q, mut batches) = (0.0, 0.0, 0usize);
        let mut usage = vec![0usize; cfg.vqvae.codebook_size];
        let mut pool: Vec<Vec<f32>> = Vec::new();
        for chunk in order.chunks(stage.batch_size) {
            let batch: Vec<&Tensor> = chunk.iter().map(|&i| &images[i]).collect();
            let x_t = stack(&batch)?;
            let (grads, l_r, l_q) = {
                let mut g = Graph::train(&store, rng.random());
                if !joint {
                    g = g.freeze(crate::pem::PREFIX);
                }
                let x = g.tape.leaf(&x_t)?;
                let f = vq.encode(&mut g, x)?;
                let q = vq.quantize(&mut g, f)?;
                let mut x_hat = vq.decode(&mut g, q.decoder_input)?;
                if joint {
                    x_hat = pem.apply(&mut g, x_hat)?;
                }
                let recon = g.tape.mse(x_hat, x)?;
                let total = g.tape.add(recon, q.loss)?;
                for t in &q.tokens {
                    for &i in t.grids.iter().flatten() {
                        usage[i] += 1;
                    }
                }
                if cfg.vqvae.reseed_dead_codes {
                    collect_vectors(&g, &q.inputs, cfg.vqvae.latent_channels, &mut pool);
                }
                let l_r = g.tape.item(recon)? as f64;
                let l_q = g.tape.item(q.loss)? as f64;
                let gr = g.tape.backward(total).map_err(|e| numeric("stage 1", epoch, e))?;
                (g.tape.param_grads(&gr), l_r, l_q)
            };
            opt.step(&mut store, &grads, lr).map_err(|e| numeric("stage 1", epoch, e))?;
            sum_r += l_r;
            sum_q += l_q;
            batches += 1;
        }
        if cfg.vqvae.reseed_dead_codes && epoch + 1 < stage.epochs {
            reseed_dead_codes(&mut store, &usage, &pool, cfg.vqvae.latent_channels, &mut rng)?;
        }
        let row = VqLogRow {
            epoch,
            l_recon: sum_r / batches as f64,
            l_quant: sum_q / batches as f64,
        };
        if !(row.l_recon.is_finite() && row.l_quant.is_finite()) {
            return Err(Error::Numeric(format!("stage 1 loss is not finite in epoch {epoch}")));
        }
        on_epoch(&row);
        log.push(row);
    }
    if cfg.pem.training == PemTraining::PostHoc && !cfg.ablation.disable_pem {
        train_pem_post_hoc(cfg, &vq, &pem, &mut store, images, &mut rng)?;
    }
    Ok((store, log))
}

fn collect_vectors(g: &Graph, inputs: &[crate::tensor::Var], c: usize, pool: &mut Vec<Vec<f32>>) {
    for &d in inputs {
        let s = g.tape.shape(d);
        let (b, pp) = (s[0], s[2] * s[3]);
        let data = g.tape.data(d);
        for bi in 0..b {
            for pos in 0..pp {
                pool.push((0..c).map(|ch| data[(bi * c + ch) * pp + pos]).collect());
            }
        }
    }
}

/// Moves every code that went unused this epoch onto a random quantizer
/// input seen during the epoch.
fn reseed_dead_codes(
    store: &mut ParamStore,
    usage: &[usize],
    pool: &[Vec<f32>],
    c: usize,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    if pool.is_empty() {
        return Ok(());
    }
    let book = store.get_mut(CODEBOOK)?;
    for (code, _) in usage.iter().enumerate().filter(|(_, &u)| u == 0) {
        let v = &pool[rng.random_range(0..pool.len())];
        book.data_mut()[code * c..(code + 1) * c].copy_from_slice(v);
    }
    Ok(())
}

fn train_pem_post_hoc(
    cfg: &RunConfig,
    vq: &Vqvae,
    pem: &Pem,
    store: &mut ParamStore,
    images: &[Tensor],
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let all: Vec<&Tensor> = images.iter().collect();
    let decoded = unstack(&reconstruct(vq, None, store, &stack(&all)?)?);
    let epochs = cfg.pem.post_hoc_epochs;
    let mut opt = AdamW::new(cfg.stage1.optim.clone());
    let mut order: Vec<usize> = (0..images.len()).collect();
    for epoch in 0..epochs {
        let lr = cosine_lr(cfg.stage1.optim.lr, cfg.stage1.optim.min_lr, epoch, epochs);
        order.shuffle(rng);
        for chunk in order.chunks(cfg.stage1.batch_size) {
            let xs: Vec<&Tensor> = chunk.iter().map(|&i| &images[i]).collect();
            let ds: Vec<&Tensor> = chunk.iter().map(|&i| &decoded[i]).collect();
            let grads = {
                let mut g = Graph::train(store, 0).freeze(crate::vqvae::PREFIX);
                let x = g.tape.leaf(&stack(&xs)?)?;
                let d = g.tape.leaf(&stack(&ds)?)?;
                let y = pem.apply(&mut g, d)?;
                let l = g.tape.mse(y, x)?;
                let gr = g.tape.backward(l).map_err(|e| numeric("refinement", epoch, e))?;
                g.tape.param_grads(&gr)
            };
            opt.step(store, &grads, lr)?;
        }
    }
    Ok(())
}

/// Encode, quantize and decode an image batch; optionally refine.
pub fn reconstruct(vq: &Vqvae, pem: Option<&Pem>, store: &ParamStore, images: &Tensor) -> Result<Tensor> {
    let mut g = Graph::inference(store);
    let x = g.tape.leaf(images)?;
    let f = vq.encode(&mut g, x)?;
    let q = vq.quantize(&mut g, f)?;
    let mut y = vq.decode(&mut g, q.f_hat)?;
    if let Some(p) = pem {
        y = p.apply(&mut g, y)?;
    }
    Ok(g.tape.tensor(y))
}

/// Mean squared reconstruction error over a set of `[1,H,W]` images.
pub fn reconstruction_mse(vq: &Vqvae, pem: Option<&Pem>, store: &ParamStore, images: &[Tensor]) -> Result<f64> {
    let all: Vec<&Tensor> = images.iter().collect();
    let x = stack(&all)?;
    let y = reconstruct(vq, pem, store, &x)?;
    let se: f64 = x.data().iter().zip(y.data()).map(|(a, b)| ((a - b) as f64).powi(2)).sum();
    Ok(se / x.numel() as f64)
}

/// Stage 2: the tokenizer is frozen, sequences are tokenized once, and only
/// `var.` parameters are updated. `stage1` must hold the tokenizer weights;
/// the returned store holds both.
pub fn train_var(
    cfg: &RunConfig,
    stage1: &ParamStore,
    images: &[Tensor],
    labels: &[usize],
    mut on_epoch: impl FnMut(&VarLogRow),
) -> Result<(ParamStore, Vec<VarLogRow>)> {
    cfg.validate()?;
    if images.len() != labels.len() || images.is_empty() {
        return Err(Error::Config("need a non-empty, labelled training set".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= cfg.var.num_classes) {
        return Err(Error::Index { op: "train_var", index: bad, size: cfg.var.num_classes });
    }
    let vq = Vqvae::new(cfg.vqvae.clone())?;
    let model = VarModel::new(cfg.var.clone(), &vq)?;
    let mut store = stage1.clone();
    let frozen_print = store.fingerprint(crate::vqvae::PREFIX);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x2);
    model.init(&mut store, &mut rng);
    let all: Vec<&Tensor> = images.iter().collect();
    let tokens = vq.tokenize(&store, &stack(&all)?)?;
    let items: Vec<SequenceItem> = tokens
        .iter()
        .zip(labels)
        .map(|(t, &l)| model.make_item(&vq, &store, l, t))
        .collect::<Result<_>>()?;
    let stage = &cfg.stage2;
    let use_ssl = !cfg.ablation.disable_scl;
    let mut opt = AdamW::new(stage.optim.clone());
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut log = Vec::with_capacity(stage.epochs);
    for epoch in 0..stage.epochs {
        let lr = cosine_lr(stage.optim.lr, stage.optim.min_lr, epoch, stage.epochs);
        order.shuffle(&mut rng);
        let (mut sum, mut batches) = (0.0, 0usize);
        for chunk in order.chunks(stage.batch_size) {
            let batch: Vec<&SequenceItem> = chunk.iter().map(|&i| &items[i]).collect();
            let (grads, l) = {
                let mut g = Graph::train(&store, rng.random())
                    .freeze(crate::vqvae::PREFIX)
                    .freeze(crate::pem::PREFIX);
                let loss = model.loss(&mut g, &batch, use_ssl, &mut rng)?;
                let l = g.tape.item(loss)? as f64;
                let gr = g.tape.backward(loss).map_err(|e| numeric("stage 2", epoch, e))?;
                (g.tape.param_grads(&gr), l)
            };
            opt.step(&mut store, &grads, lr).map_err(|e| numeric("stage 2", epoch, e))?;
            sum += l;
            batches += 1;
        }
        let row = VarLogRow {
            epoch,
            l_var: sum / batches as f64,
        };
        if !row.l_var.is_finite() {
            return Err(Error::Numeric(format!("stage 2 loss is not finite in epoch {epoch}")));
        }
        on_epoch(&row);
        log.push(row);
    }
    if store.fingerprint(crate::vqvae::PREFIX) != frozen_print {
        return Err(Error::State("tokenizer weights changed during stage 2".into()));
    }
    Ok((store, log))
}

/// Teacher-forced `L_VAR` of a trained model on a labelled set, no dropout.
pub fn evaluate_var_loss(cfg: &RunConfig, store: &ParamStore, images: &[Tensor], labels: &[usize]) -> Result<f64> {
    let vq = Vqvae::new(cfg.vqvae.clone())?;
    let model = VarModel::new(cfg.var.clone(), &vq)?;
    let all: Vec<&Tensor> = images.iter().collect();
    let tokens = vq.tokenize(store, &stack(&all)?)?;
    let items: Vec<SequenceItem> = tokens
        .iter()
        .zip(labels)
        .map(|(t, &l)| model.make_item(&vq, store, l, t))
        .collect::<Result<_>>()?;
    let refs: Vec<&SequenceItem> = items.iter().collect();
    let mut g = Graph::inference(store);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let l = model.loss(&mut g, &refs, !cfg.ablation.disable_scl, &mut rng)?;
    Ok(g.tape.item(l)? as f64)
}

/// A trained generator: config plus every parameter tensor.
#[derive(Debug, Clone)]
pub struct UltraVar {
    pub cfg: RunConfig,
    pub vqvae: Vqvae,
    pub pem: Pem,
    pub var: VarModel,
    pub store: ParamStore,
}

impl UltraVar {
    pub fn new(cfg: RunConfig, store: ParamStore) -> Result<Self> {
        cfg.validate()?;
        let vqvae = Vqvae::new(cfg.vqvae.clone())?;
        let pem = Pem::new(cfg.pem.clone())?;
        let var = VarModel::new(cfg.var.clone(), &vqvae)?;
        Ok(UltraVar { cfg, vqvae, pem, var, store })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let cfg = RunConfig::from_json(&ckpt.config)?;
        Self::new(cfg, ckpt.params.clone())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.cfg.to_canonical_json(),
            params: self.store.clone(),
        }
    }

    /// Class-conditional sample; the null class is not accepted here.
    pub fn generate(&self, class_id: usize, index: u64, arm: &GenArm) -> Result<Generated> {
        let classes = self.cfg.var.num_classes;
        if class_id >= classes {
            return Err(Error::Index { op: "UltraVar::generate", index: class_id, size: classes });
        }
        let opts = GenerateOptions {
            sample_index: index,
            use_ssl: arm.use_ssl,
            use_pem: arm.use_pem,
            ..GenerateOptions::new(class_id, arm.sampler.clone())
        };
        let pem = arm.use_pem.then_some(&self.pem);
        generate(&self.vqvae, &self.var, pem, &self.store, &opts)
    }

    pub fn source<'a>(&'a self, arm: GenArm) -> GeneratorSource<'a> {
        GeneratorSource { model: self, arm }
    }
}

/// Inference switches for one generation arm.
#[derive(Debug, Clone, PartialEq)]
pub struct GenArm {
    pub name: String,
    pub sampler: SamplerConfig,
    pub use_ssl: bool,
    pub use_pem: bool,
}

impl GenArm {
    /// The generation arm implied by the config's own ablation flags.
    pub fn from_config(cfg: &RunConfig) -> Self {
        GenArm {
            name: "full".into(),
            sampler: cfg.sampler.clone(),
            use_ssl: !cfg.ablation.disable_scl,
            use_pem: !cfg.ablation.disable_pem,
        }
    }

    /// Full model, then the two ablations, each bypassing one module at
    /// inference time.
    pub fn table(cfg: &RunConfig) -> Vec<GenArm> {
        let full = GenArm::from_config(cfg);
        vec![
            full.clone(),
            GenArm { name: "wo_pem".into(), use_pem: false, ..full.clone() },
            GenArm { name: "wo_scl".into(), use_ssl: false, ..full },
        ]
    }
}

pub struct GeneratorSource<'a> {
    model: &'a UltraVar,
    arm: GenArm,
}

impl SampleSource for GeneratorSource<'_> {
    fn sample(&mut self, class_id: usize, index: usize) -> Result<Tensor> {
        Ok(self.model.generate(class_id, index as u64, &self.arm)?.image)
    }
}

pub const ORIGINAL_ARM: &str = "original";

/// Paired downstream runs for the unaugmented baseline and every generation
/// arm, one row per (arm, seed).
pub fn ablation_sweep(model: &UltraVar, data: &Dataset, arms: &[GenArm]) -> Result<Vec<ReportRow>> {
    let cfg = &model.cfg;
    let plan = crate::downstream::AugmentationPlan {
        counts: cfg.eval.augment,
        seed: cfg.eval.sample_offset,
    };
    let mut extras = Vec::with_capacity(arms.len());
    for arm in arms {
        let mut src = model.source(arm.clone());
        extras.push(crate::downstream::materialize(&plan, Some(&mut src))?);
    }
    let mut rows = Vec::new();
    for &seed in &cfg.eval.seeds {
        for (arm, extra) in arms.iter().zip(&extras) {
            let (without, with) = paired_run(data, extra, &cfg.classifier, seed)?;
            if !rows.iter().any(|r: &ReportRow| r.arm == ORIGINAL_ARM && r.seed == seed) {
                rows.push(ReportRow { arm: ORIGINAL_ARM.into(), seed, report: without });
            }
            rows.push(ReportRow { arm: arm.name.clone(), seed, report: with });
        }
    }
    Ok(rows)
}

/// SSIM, MS-SSIM and the classifier-feature Fréchet proxy between real and
/// generated images of each class.
pub fn quality_metrics(model: &UltraVar, data: &Dataset, arms: &[GenArm]) -> Result<Vec<MetricRow>> {
    let cfg = &model.cfg;
    let (train_x, train_y) = data.arrays(Split::Train);
    let feature_net = train_classifier(&train_x, &train_y, &cfg.classifier, cfg.seed)?;
    let scfg = SsimConfig::default();
    let mut rows = Vec::new();
    for arm in arms {
        for class_id in 0..cfg.var.num_classes {
            let real: Vec<Tensor> = data
                .split(Split::Test)
                .into_iter()
                .chain(data.split(Split::Train))
                .filter(|s| s.label == class_id)
                .take(cfg.eval.metric_samples)
                .map(|s| s.image.clone())
                .collect();
            let generated: Vec<Tensor> = (0..real.len())
                .map(|i| Ok(model.generate(class_id, cfg.eval.sample_offset + i as u64, arm)?.image))
                .collect::<Result<_>>()?;
            rows.extend(set_metrics(&arm.name, &format!("class{class_id}"), &real, &generated, &feature_net, &scfg)?);
        }
    }
    Ok(rows)
}

/// Mean pairwise SSIM/MS-SSIM plus the Fréchet distance of classifier
/// features between two equally sized image sets.
pub fn set_metrics(
    arm: &str,
    session: &str,
    real: &[Tensor],
    generated: &[Tensor],
    feature_net: &crate::downstream::Classifier,
    scfg: &SsimConfig,
) -> Result<Vec<MetricRow>> {
    if real.len() != generated.len() || real.len() < 2 {
        return Err(Error::Config("metric sets need equal sizes of at least 2".into()));
    }
    let n = real.len() as f64;
    let mut s = 0.0;
    let mut ms = 0.0;
    for (a, b) in real.iter().zip(generated) {
        s += ssim(a, b, scfg)?;
        ms += ms_ssim(a, b, scfg, None)?;
    }
    let fd = frechet_feature_distance(&feature_net.features(real)?, &feature_net.features(generated)?)?;
    let row = |metric: &str, value: f64| MetricRow {
        metric: metric.into(),
        arm: arm.into(),
        session: session.into(),
        value,
    };
    Ok(vec![row("ssim", s / n), row("ms_ssim", ms / n), row("frechet_proxy", fd)])
}
