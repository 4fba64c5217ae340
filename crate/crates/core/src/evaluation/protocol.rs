//! Few-label segmentation over repeated random train/test splits.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::extraction::{FeatureName, FeatureStore};
use crate::probing::{probe_feature, LabeledSample, ProbeConfig, ProbeDataset};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LabelScarceConfig {
    pub train_images: usize,
    pub splits: usize,
    /// Reuse the first split for every repetition.
    pub fixed_split: bool,
    pub seed: u64,
}

impl Default for LabelScarceConfig {
    fn default() -> Self {
        Self {
            train_images: 30,
            splits: 5,
            fixed_split: false,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitResult {
    pub train_keys: Vec<String>,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelScarceReport {
    pub feature: FeatureName,
    pub dataset: String,
    pub splits: Vec<SplitResult>,
    pub mean: f64,
    /// Sample standard deviation over splits.
    pub std: f64,
}

impl LabelScarceReport {
    pub fn render_text(&self) -> String {
        let mut out = format!("feature: {}\ndataset: {}\n", self.feature, self.dataset);
        for (i, s) in self.splits.iter().enumerate() {
            out.push_str(&format!("split {i}: {:.2}\n", s.score * 100.0));
        }
        out.push_str(&format!("mIoU: {:.2} ± {:.2}\n", self.mean * 100.0, self.std * 100.0));
        out
    }
}

/// Draws `splits` seeded partitions of `samples` into `train_images`
/// training maps and the rest for testing, and probes `feature` on each.
pub fn label_scarce_protocol(
    store: &FeatureStore,
    model: &str,
    feature: &FeatureName,
    dataset: &str,
    classes: usize,
    samples: &[LabeledSample],
    probe: &ProbeConfig,
    config: &LabelScarceConfig,
) -> Result<LabelScarceReport> {
    if config.splits < 2 {
        return Err(Error::config("the protocol needs at least 2 splits"));
    }
    if config.train_images == 0 || samples.len() <= config.train_images {
        return Err(Error::invalid(format!(
            "{} labelled images cannot provide {} training images and a test set",
            samples.len(),
            config.train_images
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut first: Option<Vec<usize>> = None;
    let mut results = Vec::with_capacity(config.splits);
    for _ in 0..config.splits {
        let order = match (&first, config.fixed_split) {
            (Some(o), true) => o.clone(),
            _ => {
                let mut o: Vec<usize> = (0..samples.len()).collect();
                o.shuffle(&mut rng);
                o
            }
        };
        first.get_or_insert_with(|| order.clone());
        let (train, test) = order.split_at(config.train_images);
        let pick = |idx: &[usize]| idx.iter().map(|&i| samples[i].clone()).collect::<Vec<_>>();
        let split = ProbeDataset {
            name: dataset.to_string(),
            classes,
            ignore_label: None,
            train: pick(train),
            test: pick(test),
        };
        let miou = probe_feature(store, model, feature, &split, probe)?;
        results.push(SplitResult {
            train_keys: split.train.iter().map(|s| s.key.clone()).collect(),
            score: miou.score,
        });
    }
    let n = results.len() as f64;
    let mean = results.iter().map(|r| r.score).sum::<f64>() / n;
    let var = results.iter().map(|r| (r.score - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok(LabelScarceReport {
        feature: feature.clone(),
        dataset: dataset.to_string(),
        splits: results,
        mean,
        std: var.sqrt(),
    })
}
