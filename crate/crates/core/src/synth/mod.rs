//! Procedural two-class "vascular" images: branching random-walk vessels,
//! a localized intensity increase for the active class, multiplicative
//! speckle.

mod pgm;

pub use pgm::{
    decode_pgm, encode_pgm, entry_path, format_manifest, read_manifest, read_pgm, write_manifest,
    write_pgm, ManifestEntry,
};

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Split> {
        match s {
            "train" => Some(Split::Train),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub side: usize,
    pub n_vessels: usize,
    /// Gaussian blur sigma applied to the vessel skeleton, pixels.
    pub vessel_width: f32,
    pub speckle_level: f32,
    pub activation_amplitude: f32,
    /// `[row, col]` in pixels.
    pub activation_center: [f32; 2],
    pub activation_radius: f32,
    pub background: f32,
    /// Peak vessel intensity above background before activation and speckle.
    pub vessel_gain: f32,
    pub seed: u64,
    pub class_count: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            side: 32,
            n_vessels: 20,
            vessel_width: 1.0,
            speckle_level: 0.3,
            activation_amplitude: 1.2,
            activation_center: [16.0, 16.0],
            activation_radius: 6.0,
            background: 0.1,
            vessel_gain: 0.35,
            seed: 0,
            class_count: 2,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(format!("synth: {}", m)));
        if self.side < 16 {
            return fail("side must be at least 16");
        }
        if !(self.activation_radius > 0.0 && self.activation_radius < self.side as f32 / 2.0) {
            return fail("activation radius must lie in (0, side/2)");
        }
        if !(0.0..=1.0).contains(&self.speckle_level) {
            return fail("speckle level must lie in [0,1]");
        }
        if !(self.activation_amplitude >= 0.0) {
            return fail("activation amplitude must be non-negative");
        }
        if !(self.vessel_width > 0.0) {
            return fail("vessel width must be positive");
        }
        if !(0.0..=1.0).contains(&self.background) || !(self.vessel_gain >= 0.0) {
            return fail("background must lie in [0,1] and vessel gain must be non-negative");
        }
        if self.class_count != 2 {
            return fail("exactly two classes are supported");
        }
        Ok(())
    }

    /// Smooth activation profile `exp(-r²/2R²)` at pixel `(row, col)`.
    pub fn bump(&self, row: usize, col: usize) -> f32 {
        let dy = row as f32 + 0.5 - self.activation_center[0];
        let dx = col as f32 + 0.5 - self.activation_center[1];
        let r2 = dx * dx + dy * dy;
        (-r2 / (2.0 * self.activation_radius * self.activation_radius)).exp()
    }

    pub fn in_disk(&self, row: usize, col: usize) -> bool {
        let dy = row as f32 + 0.5 - self.activation_center[0];
        let dx = col as f32 + 0.5 - self.activation_center[1];
        dx * dx + dy * dy <= self.activation_radius * self.activation_radius
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageSample {
    pub image: Tensor,
    pub label: usize,
    pub split: Split,
}

/// Mean pixel value inside the activation disk.
pub fn disk_mean(cfg: &SynthConfig, image: &Tensor) -> f64 {
    let side = cfg.side;
    let mut sum = 0.0f64;
    let mut n = 0usize;
    for r in 0..side {
        for c in 0..side {
            if cfg.in_disk(r, c) {
                sum += image.data()[r * side + c] as f64;
                n += 1;
            }
        }
    }
    sum / n.max(1) as f64
}

/// Blurred, peak-normalized vessel map in `[0,1]`. Consumes the same random
/// numbers regardless of anything but the geometry parameters.
pub fn vessel_map<R: Rng + ?Sized>(cfg: &SynthConfig, rng: &mut R) -> Vec<f32> {
    let side = cfg.side;
    let s = side as f32;
    let mut skeleton = vec![0.0f32; side * side];
    for _ in 0..cfg.n_vessels {
        let strength: f32 = rng.random_range(0.6..1.0);
        let start = (rng.random_range(0.0..s), rng.random_range(0.0..s));
        let heading: f32 = rng.random_range(0.0..std::f32::consts::TAU);
        let length = rng.random_range(side..3 * side);
        // (row, col, heading, steps, strength, depth)
        let mut stack = vec![(start.0, start.1, heading, length, strength, 0u8)];
        while let Some((mut y, mut x, mut th, steps, st, depth)) = stack.pop() {
            for step in 0..steps {
                if y < 0.0 || x < 0.0 || y >= s || x >= s {
                    break;
                }
                let idx = y as usize * side + x as usize;
                skeleton[idx] = skeleton[idx].max(st);
                let turn: f32 = rng.sample(StandardNormal);
                th += 0.25 * turn;
                y += 0.7 * th.sin();
                x += 0.7 * th.cos();
                if depth < 2 && rng.random::<f32>() < 0.04 {
                    let side_sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                    let spread: f32 = rng.random_range(0.4..1.0);
                    stack.push((y, x, th + side_sign * spread, (steps - step) / 2, st * 0.8, depth + 1));
                }
            }
        }
    }
    let (blurred, peak) = gaussian_blur(&skeleton, side, cfg.vessel_width);
    blurred.into_iter().map(|v| (v / peak).min(1.0)).collect()
}

/// Separable Gaussian blur with clamped borders. Also returns the peak
/// response to a one-pixel-wide unit line, used for normalization.
fn gaussian_blur(img: &[f32], side: usize, sigma: f32) -> (Vec<f32>, f32) {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f32> = (-radius..=radius)
        .map(|i| (-(i * i) as f32 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f32 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= total);
    let clamp = |i: isize| i.clamp(0, side as isize - 1) as usize;
    let mut tmp = vec![0.0f32; side * side];
    for r in 0..side {
        for c in 0..side {
            tmp[r * side + c] = k
                .iter()
                .enumerate()
                .map(|(j, w)| w * img[r * side + clamp(c as isize + j as isize - radius)])
                .sum();
        }
    }
    let mut out = vec![0.0f32; side * side];
    for r in 0..side {
        for c in 0..side {
            out[r * side + c] = k
                .iter()
                .enumerate()
                .map(|(j, w)| w * tmp[clamp(r as isize + j as isize - radius) * side + c])
                .sum();
        }
    }
    (out, k[radius as usize])
}

pub fn render_image<R: Rng + ?Sized>(cfg: &SynthConfig, label: usize, rng: &mut R) -> Result<ImageSample> {
    cfg.validate()?;
    if label >= cfg.class_count {
        return Err(Error::Config(format!("label {} out of range", label)));
    }
    let side = cfg.side;
    let vessels = vessel_map(cfg, rng);
    let s = cfg.speckle_level;
    let mut data = Vec::with_capacity(side * side);
    for r in 0..side {
        for c in 0..side {
            let v = vessels[r * side + c];
            let boost = if label == 1 {
                1.0 + cfg.activation_amplitude * cfg.bump(r, c)
            } else {
                1.0
            };
            let u: f32 = if s > 0.0 { rng.random_range(1.0 - s..=1.0 + s) } else { 1.0 };
            let clean = cfg.background + cfg.vessel_gain * v * boost;
            data.push((clean * u).clamp(0.0, 1.0));
        }
    }
    Ok(ImageSample {
        image: Tensor::new(vec![1, side, side], data)?,
        label,
        split: Split::Train,
    })
}

/// Independent random stream for one `(split, label, index)` slot.
pub fn sample_rng(seed: u64, split: Split, label: usize, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let split_bit = match split {
        Split::Train => 0u64,
        Split::Test => 1u64 << 63,
    };
    rng.set_stream(split_bit | ((label as u64) << 40) | index as u64);
    rng
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub samples: Vec<ImageSample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn split(&self, split: Split) -> Vec<&ImageSample> {
        self.samples.iter().filter(|s| s.split == split).collect()
    }

    pub fn count(&self, split: Split, label: usize) -> usize {
        self.samples
            .iter()
            .filter(|s| s.split == split && s.label == label)
            .count()
    }

    /// Images and labels of one split, in dataset order.
    pub fn arrays(&self, split: Split) -> (Vec<Tensor>, Vec<usize>) {
        self.split(split)
            .into_iter()
            .map(|s| (s.image.clone(), s.label))
            .unzip()
    }
}

/// Per-class sample counts for both splits. Train samples come first, then
/// test; within a split Class0 precedes Class1.
pub fn make_dataset(cfg: &SynthConfig, n_train: [usize; 2], n_test: [usize; 2]) -> Result<Dataset> {
    cfg.validate()?;
    if n_train.iter().chain(&n_test).any(|&n| n == 0) {
        return Err(Error::Config("every split needs at least one sample per class".into()));
    }
    let mut samples = Vec::new();
    for (split, counts) in [(Split::Train, n_train), (Split::Test, n_test)] {
        for (label, &n) in counts.iter().enumerate() {
            for index in 0..n {
                let mut rng = sample_rng(cfg.seed, split, label, index);
                let mut s = render_image(cfg, label, &mut rng)?;
                s.split = split;
                samples.push(s);
            }
        }
    }
    Ok(Dataset { samples })
}

pub const MANIFEST_NAME: &str = "manifest.tsv";

/// Writes `{split}/c{label}_{index:04}.pgm` files plus a manifest; returns
/// the manifest path.
pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<std::path::PathBuf> {
    let mut entries = Vec::with_capacity(dataset.len());
    let mut counters = std::collections::BTreeMap::new();
    for s in &dataset.samples {
        let sub = dir.join(s.split.as_str());
        fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
        let n = counters.entry((s.split, s.label)).or_insert(0usize);
        let rel = format!("{}/c{}_{:04}.pgm", s.split.as_str(), s.label, n);
        *n += 1;
        write_pgm(&s.image, &dir.join(&rel))?;
        entries.push(ManifestEntry {
            path: rel,
            label: s.label,
            split: s.split,
        });
    }
    let manifest = dir.join(MANIFEST_NAME);
    write_manifest(&manifest, &entries)?;
    Ok(manifest)
}

/// Loads a dataset from a manifest file or a directory containing one.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let manifest = if path.is_dir() { path.join(MANIFEST_NAME) } else { path.to_path_buf() };
    let entries = read_manifest(&manifest)?;
    let mut samples = Vec::with_capacity(entries.len());
    for e in &entries {
        samples.push(ImageSample {
            image: read_pgm(&entry_path(&manifest, e))?,
            label: e.label,
            split: e.split,
        });
    }
    Ok(Dataset { samples })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blur_normalization_maps_a_line_to_one() {
        let side = 16;
        let mut img = vec![0.0; side * side];
        for c in 0..side {
            img[8 * side + c] = 1.0;
        }
        let (out, peak) = gaussian_blur(&img, side, 0.8);
        assert!((out[8 * side + 5] / peak - 1.0).abs() < 1e-5);
    }

    #[test]
    fn split_names_round_trip() {
        for s in [Split::Train, Split::Test] {
            assert_eq!(Split::parse(s.as_str()), Some(s));
        }
        assert_eq!(Split::parse("val"), None);
    }
}
