//! Downstream classifier and the paired augmentation experiment.

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{init_conv, init_linear, Graph, ParamStore};
use crate::optim::{cosine_lr, AdamW, OptimConfig};
use crate::synth::{Dataset, Split};
use crate::tensor::{Tensor, Var};
use crate::vqvae::stack;

pub const CLASSIFIER_CHANNELS: [usize; 3] = [8, 16, 32];
pub const FEATURE_DIM: usize = 32;
pub const REPORT_CSV_HEADER: &str = "arm,seed,accuracy,precision,recall,f1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerConfig {
    pub epochs: usize,
    pub lr: f32,
    pub min_lr: f32,
    pub batch_size: usize,
    pub weight_decay: f32,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            epochs: 30,
            lr: 2e-3,
            min_lr: 1e-5,
            batch_size: 8,
            weight_decay: 0.01,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("trainer epochs and batch size must be positive".into()));
        }
        self.optim().validate()
    }

    fn optim(&self) -> OptimConfig {
        OptimConfig {
            lr: self.lr,
            min_lr: self.min_lr,
            weight_decay: self.weight_decay,
            ..OptimConfig::default()
        }
    }
}

/// Three stride-2 conv blocks, global average pool, linear head to 2 logits.
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    pub params: ParamStore,
}

impl Classifier {
    pub fn init(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let mut c_in = 1;
        for (i, &c) in CLASSIFIER_CHANNELS.iter().enumerate() {
            init_conv(&mut params, &format!("cls.conv.{i}"), c_in, c, 3, 2.0, &mut rng);
            c_in = c;
        }
        init_linear(&mut params, "cls.head", FEATURE_DIM, 2, 0.01, &mut rng);
        Classifier { params }
    }

    fn features_var(g: &mut Graph, x: Var) -> Result<Var> {
        let side = g.tape.shape(x)[2];
        if side % 8 != 0 {
            return Err(Error::Config(format!("classifier input side {side} is not divisible by 8")));
        }
        let mut h = x;
        for i in 0..CLASSIFIER_CHANNELS.len() {
            h = g.conv(&format!("cls.conv.{i}"), h, 2, 1)?;
            h = g.tape.relu(h)?;
        }
        g.tape.spatial_mean(h)
    }

    fn logits_var(g: &mut Graph, x: Var) -> Result<Var> {
        let f = Self::features_var(g, x)?;
        g.linear("cls.head", f)
    }

    /// Penultimate-layer features `[N, 32]`.
    pub fn features(&self, images: &[Tensor]) -> Result<Tensor> {
        let refs: Vec<&Tensor> = images.iter().collect();
        let mut g = Graph::inference(&self.params);
        let x = g.tape.leaf(&stack(&refs)?)?;
        let f = Self::features_var(&mut g, x)?;
        Ok(g.tape.tensor(f))
    }

    pub fn logits(&self, images: &[Tensor]) -> Result<Tensor> {
        let refs: Vec<&Tensor> = images.iter().collect();
        let mut g = Graph::inference(&self.params);
        let x = g.tape.leaf(&stack(&refs)?)?;
        let l = Self::logits_var(&mut g, x)?;
        Ok(g.tape.tensor(l))
    }

    pub fn predict(&self, images: &[Tensor]) -> Result<Vec<usize>> {
        let l = self.logits(images)?;
        Ok(l.data().chunks(2).map(|r| usize::from(r[1] > r[0])).collect())
    }

    /// Mean cross-entropy on a labelled set.
    pub fn loss(&self, images: &[Tensor], labels: &[usize]) -> Result<f32> {
        let refs: Vec<&Tensor> = images.iter().collect();
        let mut g = Graph::inference(&self.params);
        let x = g.tape.leaf(&stack(&refs)?)?;
        let l = Self::logits_var(&mut g, x)?;
        let ce = g.tape.softmax_cross_entropy(l, labels)?;
        g.tape.item(ce)
    }
}

/// Minibatch AdamW with per-epoch cosine annealing. Initialization and the
/// shuffling order are both derived from `seed`.
pub fn train_classifier(images: &[Tensor], labels: &[usize], cfg: &TrainerConfig, seed: u64) -> Result<Classifier> {
    cfg.validate()?;
    if images.len() != labels.len() {
        return Err(Error::dim("train_classifier", "images and labels differ in length"));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::Index { op: "train_classifier", index: bad, size: 2 });
    }
    if !(labels.contains(&0) && labels.contains(&1)) {
        return Err(Error::Config("classifier training needs at least one sample of each class".into()));
    }
    let mut model = Classifier::init(seed);
    let mut opt = AdamW::new(cfg.optim());
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_c1a5);
    let mut order: Vec<usize> = (0..images.len()).collect();
    for epoch in 0..cfg.epochs {
        let lr = cosine_lr(cfg.lr, cfg.min_lr, epoch, cfg.epochs);
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Tensor> = chunk.iter().map(|&i| &images[i]).collect();
            let targets: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let grads = {
                let mut g = Graph::train(&model.params, 0);
                let x = g.tape.leaf(&stack(&batch)?)?;
                let l = Classifier::logits_var(&mut g, x)?;
                let ce = g.tape.softmax_cross_entropy(l, &targets)?;
                let gr = g.tape.backward(ce)?;
                g.tape.param_grads(&gr)
            };
            opt.step(&mut model.params, &grads, lr)?;
        }
    }
    Ok(model)
}

/// Binary metrics with Class1 as the positive class. A zero denominator
/// yields 0 and sets the matching `*_undefined` flag.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
    pub precision_undefined: bool,
    pub recall_undefined: bool,
    pub f1_undefined: bool,
}

impl EvalReport {
    pub fn from_counts(tp: usize, fp: usize, tn: usize, fn_: usize) -> Self {
        let ratio = |num: usize, den: usize| if den == 0 { (0.0, true) } else { (num as f64 / den as f64, false) };
        let total = tp + fp + tn + fn_;
        let (accuracy, _) = ratio(tp + tn, total);
        let (precision, precision_undefined) = ratio(tp, tp + fp);
        let (recall, recall_undefined) = ratio(tp, tp + fn_);
        let (f1, f1_undefined) = f1_score(precision, recall);
        EvalReport {
            accuracy,
            precision,
            recall,
            f1,
            tp,
            fp,
            tn,
            fn_,
            precision_undefined,
            recall_undefined,
            f1_undefined,
        }
    }

    pub fn from_predictions(predicted: &[usize], truth: &[usize]) -> Result<Self> {
        if predicted.len() != truth.len() {
            return Err(Error::dim("evaluate", "prediction and label counts differ"));
        }
        if truth.is_empty() {
            return Err(Error::Config("evaluation set is empty".into()));
        }
        let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
        for (&p, &t) in predicted.iter().zip(truth) {
            match (p == 1, t == 1) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, false) => tn += 1,
                (false, true) => fn_ += 1,
            }
        }
        Ok(Self::from_counts(tp, fp, tn, fn_))
    }
}

/// Harmonic mean; `(0, true)` when both inputs are zero.
pub fn f1_score(precision: f64, recall: f64) -> (f64, bool) {
    let den = precision + recall;
    if den > 0.0 {
        (2.0 * precision * recall / den, false)
    } else {
        (0.0, true)
    }
}

pub fn evaluate(model: &Classifier, images: &[Tensor], labels: &[usize]) -> Result<EvalReport> {
    if images.is_empty() {
        return Err(Error::Config("evaluation set is empty".into()));
    }
    EvalReport::from_predictions(&model.predict(images)?, labels)
}

/// Anything that can produce class-conditional images on demand.
pub trait SampleSource {
    /// Deterministic in `(class_id, index)`; returns a `[1,H,W]` image.
    fn sample(&mut self, class_id: usize, index: usize) -> Result<Tensor>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationPlan {
    pub counts: [usize; 2],
    pub seed: u64,
}

impl AugmentationPlan {
    pub fn none() -> Self {
        AugmentationPlan { counts: [0, 0], seed: 0 }
    }

    pub fn is_empty(&self) -> bool {
        self.counts == [0, 0]
    }
}

/// Draws the plan's synthetic samples. Sample `i` of a class uses
/// generator index `plan.seed + i`.
pub fn materialize(plan: &AugmentationPlan, source: Option<&mut dyn SampleSource>) -> Result<(Vec<Tensor>, Vec<usize>)> {
    if plan.is_empty() {
        return Ok((Vec::new(), Vec::new()));
    }
    let source = source.ok_or_else(|| Error::State("augmentation plan requests samples but no generator is loaded".into()))?;
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for (class_id, &n) in plan.counts.iter().enumerate() {
        for i in 0..n {
            images.push(source.sample(class_id, plan.seed as usize + i)?);
            labels.push(class_id);
        }
    }
    Ok((images, labels))
}

/// Paired arms: identical seed, hyperparameters and test set; the only
/// difference is the extra synthetic training data.
pub fn augmentation_experiment(
    base: &Dataset,
    plan: &AugmentationPlan,
    source: Option<&mut dyn SampleSource>,
    trainer: &TrainerConfig,
    seed: u64,
) -> Result<(EvalReport, EvalReport)> {
    let extra = materialize(plan, source)?;
    let (without, with) = paired_run(base, &extra, trainer, seed)?;
    Ok((without, with))
}

/// One paired seed with pre-drawn synthetic data.
pub fn paired_run(
    base: &Dataset,
    extra: &(Vec<Tensor>, Vec<usize>),
    trainer: &TrainerConfig,
    seed: u64,
) -> Result<(EvalReport, EvalReport)> {
    let (train_x, train_y) = base.arrays(Split::Train);
    let (test_x, test_y) = base.arrays(Split::Test);
    let without = train_and_eval(&train_x, &train_y, &test_x, &test_y, trainer, seed)?;
    if extra.0.is_empty() {
        return Ok((without, without));
    }
    let mut aug_x = train_x;
    let mut aug_y = train_y;
    aug_x.extend(extra.0.iter().cloned());
    aug_y.extend(extra.1.iter().copied());
    let with = train_and_eval(&aug_x, &aug_y, &test_x, &test_y, trainer, seed)?;
    Ok((without, with))
}

pub fn train_and_eval(
    train_x: &[Tensor],
    train_y: &[usize],
    test_x: &[Tensor],
    test_y: &[usize],
    trainer: &TrainerConfig,
    seed: u64,
) -> Result<EvalReport> {
    let model = train_classifier(train_x, train_y, trainer, seed)?;
    evaluate(&model, test_x, test_y)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub arm: String,
    pub seed: u64,
    pub report: EvalReport,
}

pub fn report_csv(rows: &[ReportRow]) -> String {
    let mut out = String::from(REPORT_CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{:.6},{:.6},{:.6},{:.6}\n",
            r.arm, r.seed, r.report.accuracy, r.report.precision, r.report.recall, r.report.f1
        ));
    }
    out
}

/// Mean of a metric over the rows of one arm.
pub fn arm_mean(rows: &[ReportRow], arm: &str, metric: impl Fn(&EvalReport) -> f64) -> Option<f64> {
    let vals: Vec<f64> = rows.iter().filter(|r| r.arm == arm).map(|r| metric(&r.report)).collect();
    if vals.is_empty() {
        None
    } else {
        Some(vals.iter().sum::<f64>() / vals.len() as f64)
    }
}
