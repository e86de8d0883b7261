//! Run configuration: the one place every tunable lives.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::downstream::TrainerConfig;
use crate::error::{Error, Result};
use crate::optim::OptimConfig;
use crate::pem::PemConfig;
use crate::synth::SynthConfig;
use crate::var::{SamplerConfig, VarConfig};
use crate::vqvae::VqvaeConfig;

/// Epoch count, batch size and optimizer for one training stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optim: OptimConfig,
}

impl Default for StageConfig {
    fn default() -> Self {
        StageConfig {
            epochs: 200,
            batch_size: 4,
            optim: OptimConfig::default(),
        }
    }
}

impl StageConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("stage epochs and batch size must be positive".into()));
        }
        self.optim.validate()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    pub disable_pem: bool,
    pub disable_scl: bool,
}

/// Per-class sample counts `[class0, class1]` for each split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetCounts {
    pub train: [usize; 2],
    pub test: [usize; 2],
}

impl Default for DatasetCounts {
    fn default() -> Self {
        DatasetCounts {
            train: [141, 75],
            test: [39, 15],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Classifier seeds; each seed is one paired run per arm.
    pub seeds: Vec<u64>,
    /// Synthetic samples added per class in the augmented arms.
    pub augment: [usize; 2],
    /// First generator sample index used for augmentation.
    pub sample_offset: u64,
    /// Generated samples per class for the image-quality metrics.
    pub metric_samples: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            seeds: (0..5).collect(),
            augment: [0, 66],
            sample_offset: 0,
            metric_samples: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub synth: SynthConfig,
    pub dataset: DatasetCounts,
    pub vqvae: VqvaeConfig,
    pub pem: PemConfig,
    pub var: VarConfig,
    pub stage1: StageConfig,
    pub stage2: StageConfig,
    pub sampler: SamplerConfig,
    pub ablation: Ablation,
    pub classifier: TrainerConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.vqvae.validate()?;
        self.pem.validate()?;
        self.var.validate()?;
        self.stage1.validate()?;
        self.stage2.validate()?;
        self.sampler.validate()?;
        self.classifier.validate()?;
        if self.synth.side != self.vqvae.image_side {
            return Err(Error::Config(format!(
                "synthetic image side {} differs from autoencoder input side {}",
                self.synth.side, self.vqvae.image_side
            )));
        }
        if self.var.num_classes != self.synth.class_count {
            return Err(Error::Config("generator class count differs from dataset class count".into()));
        }
        if self.dataset.train.contains(&0) || self.dataset.test.contains(&0) {
            return Err(Error::Config("every class needs at least one sample per split".into()));
        }
        if self.eval.seeds.is_empty() {
            return Err(Error::Config("evaluation needs at least one seed".into()));
        }
        Ok(())
    }

    /// JSON with keys sorted at every level and shortest round-trip floats.
    pub fn to_canonical_json(&self) -> String {
        let raw = serde_json::to_string(self).expect("config serializes");
        canonicalize(&raw).expect("config json reparses")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(format!("config json: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(d) => Error::Parse {
                path: path.to_path_buf(),
                detail: d,
            },
            other => other,
        })
    }

    pub fn hash(&self) -> u32 {
        crc32fast::hash(self.to_canonical_json().as_bytes())
    }
}

/// Re-emits any JSON document with sorted object keys.
pub fn canonicalize(json: &str) -> Result<String> {
    let v: serde_json::Value = serde_json::from_str(json).map_err(|e| Error::Config(format!("json: {e}")))?;
    Ok(serde_json::to_string(&v).expect("value serializes"))
}
