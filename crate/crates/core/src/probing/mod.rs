//! Per-activation segmentation probes and their cross-dataset ranking.

mod mlp;
mod ranking;

use std::time::{Duration, Instant};

use ndarray::{Array1, Array2, ArrayView2, ArrayView3, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::catalog::{ActivationId, CandidatePool};
use crate::error::{Error, Result};
use crate::evaluation::{ConfusionMatrix, MiouResult};
use crate::extraction::{FeatureName, FeatureStore};
use crate::resize::{resize, ResizeMode};

pub use mlp::Mlp;
pub use ranking::{ConsensusEntry, DatasetRanking, RankEntry, RankingReport, ResolutionRanking};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub ensemble_size: usize,
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// `None` takes the class count from the dataset.
    pub classes: Option<usize>,
    /// Random subsample of training pixels, shared by all ensemble members.
    pub max_train_pixels: Option<usize>,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            ensemble_size: 10,
            hidden: vec![128, 128],
            epochs: 8,
            batch_size: 4096,
            learning_rate: 1e-3,
            seed: 0,
            classes: None,
            max_train_pixels: None,
        }
    }
}

impl ProbeConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| Error::config(format!("probe config: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("probe config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.ensemble_size == 0 {
            return Err(Error::config("ensemble_size must be at least 1"));
        }
        if matches!(self.classes, Some(c) if c < 2) {
            return Err(Error::config("a probe needs at least 2 classes"));
        }
        if self.batch_size < 2 {
            return Err(Error::config("batch_size must be at least 2"));
        }
        if self.epochs == 0 || !(self.learning_rate > 0.0) {
            return Err(Error::config("epochs and learning_rate must be positive"));
        }
        if self.hidden.contains(&0) || self.max_train_pixels == Some(0) {
            return Err(Error::config("hidden widths and max_train_pixels must be positive"));
        }
        Ok(())
    }
}

/// Flattened per-pixel feature vectors with their class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct PixelSet {
    /// `(pixels, channels)`.
    pub features: Array2<f64>,
    pub labels: Vec<u32>,
}

impl PixelSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.features.ncols()
    }
}

/// Upsamples each map bilinearly to its label resolution and gathers the
/// labelled pixels, skipping `ignore`.
pub fn pixels_from_maps(
    features: &[ArrayView3<f32>],
    labels: &[ArrayView2<u32>],
    ignore: Option<u32>,
) -> Result<PixelSet> {
    if features.len() != labels.len() {
        return Err(Error::shape(format!("{} feature maps for {} label maps", features.len(), labels.len())));
    }
    let channels = features.first().map_or(0, |f| f.dim().0);
    let mut rows = Vec::new();
    let mut out_labels = Vec::new();
    for (f, l) in features.iter().zip(labels) {
        if f.dim().0 != channels {
            return Err(Error::shape(format!("expected {channels} channels, got {}", f.dim().0)));
        }
        let (h, w) = l.dim();
        let up = resize(*f, h, w, ResizeMode::Bilinear);
        for ((i, j), &y) in l.indexed_iter() {
            if Some(y) == ignore {
                continue;
            }
            rows.extend(up.slice(ndarray::s![.., i, j]).iter().map(|&v| f64::from(v)));
            out_labels.push(y);
        }
    }
    Ok(PixelSet {
        features: Array2::from_shape_vec((out_labels.len(), channels), rows).expect("pixel rows"),
        labels: out_labels,
    })
}

/// Per-channel affine map to zero mean and unit variance on the train split.
#[derive(Clone, Debug, PartialEq)]
pub struct Standardizer {
    pub mean: Array1<f64>,
    pub scale: Array1<f64>,
}

impl Standardizer {
    pub fn fit(x: ArrayView2<f64>) -> Self {
        let mean = x.mean_axis(Axis(0)).expect("non-empty pixels");
        let std = x.std_axis(Axis(0), 0.0);
        Self {
            mean,
            scale: std.mapv(|s| if s > 1e-12 { 1.0 / s } else { 1.0 }),
        }
    }

    pub fn apply(&self, x: ArrayView2<f64>) -> Array2<f64> {
        (&x - &self.mean) * &self.scale
    }
}

/// An ensemble of independently initialized pixel classifiers.
#[derive(Clone, Debug)]
pub struct ProbeModel {
    pub classes: usize,
    pub channels: usize,
    pub standardizer: Standardizer,
    pub members: Vec<Mlp>,
    pub seed: u64,
}

pub fn train_probe(train: &PixelSet, config: &ProbeConfig) -> Result<ProbeModel> {
    config.validate()?;
    if train.features.nrows() != train.labels.len() {
        return Err(Error::shape(format!(
            "{} feature rows for {} labels",
            train.features.nrows(),
            train.labels.len()
        )));
    }
    if train.is_empty() || train.channels() == 0 {
        return Err(Error::invalid("probe training needs labelled pixels with at least one channel"));
    }
    let top = *train.labels.iter().max().expect("non-empty");
    let classes = config.classes.unwrap_or(top as usize + 1).max(2);
    if top as usize >= classes {
        return Err(Error::invalid(format!("label {top} outside 0..{classes}")));
    }
    if train.labels.iter().all(|&y| y == train.labels[0]) {
        return Err(Error::invalid(format!(
            "degenerate probe: every training pixel has class {}",
            train.labels[0]
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    if let Some(cap) = config.max_train_pixels.filter(|&c| c < train.len()) {
        order.shuffle(&mut rng);
        order.truncate(cap);
        order.sort_unstable();
    }
    let x = train.features.select(Axis(0), &order);
    let y: Vec<u32> = order.iter().map(|&i| train.labels[i]).collect();
    let standardizer = Standardizer::fit(x.view());
    let x = standardizer.apply(x.view());
    let members = (0..config.ensemble_size)
        .map(|m| {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(m as u64 + 1);
            let mut net = Mlp::new(&mut rng, x.ncols(), &config.hidden, classes);
            let mut adam = net.optimizer(config.learning_rate);
            let mut idx: Vec<usize> = (0..x.nrows()).collect();
            for _ in 0..config.epochs {
                idx.shuffle(&mut rng);
                for chunk in idx.chunks(config.batch_size) {
                    if chunk.len() < 2 {
                        continue;
                    }
                    let bx = x.select(Axis(0), chunk);
                    let by: Vec<u32> = chunk.iter().map(|&i| y[i]).collect();
                    net.train_step(&mut adam, bx.view(), &by);
                }
            }
            net
        })
        .collect();
    Ok(ProbeModel {
        classes,
        channels: x.ncols(),
        standardizer,
        members,
        seed: config.seed,
    })
}

impl ProbeModel {
    /// Per-pixel majority vote over members; ties go to the lowest class.
    pub fn predict(&self, features: ArrayView2<f64>) -> Result<Vec<u32>> {
        if features.ncols() != self.channels {
            return Err(Error::shape(format!(
                "probe expects {} channels, got {}",
                self.channels,
                features.ncols()
            )));
        }
        let x = self.standardizer.apply(features);
        let mut votes = Array2::<u32>::zeros((x.nrows(), self.classes));
        for net in &self.members {
            let logits = net.logits(x.view());
            for (i, row) in logits.rows().into_iter().enumerate() {
                let mut best = 0;
                for (k, v) in row.iter().enumerate() {
                    if *v > row[best] {
                        best = k;
                    }
                }
                votes[[i, best]] += 1;
            }
        }
        Ok(votes
            .rows()
            .into_iter()
            .map(|r| {
                let mut best = 0;
                for (k, v) in r.iter().enumerate() {
                    if *v > r[best] {
                        best = k;
                    }
                }
                best as u32
            })
            .collect())
    }
}

/// Held-out predictions and their mIoU.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeEvaluation {
    pub predictions: Vec<u32>,
    pub miou: MiouResult,
}

pub fn evaluate_probe(model: &ProbeModel, test: &PixelSet) -> Result<ProbeEvaluation> {
    let predictions = model.predict(test.features.view())?;
    let mut cm = ConfusionMatrix::new(model.classes, None);
    cm.add(&predictions, &test.labels)?;
    Ok(ProbeEvaluation {
        predictions,
        miou: cm.result()?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub activation: ActivationId,
    pub dataset: String,
    /// mIoU in `[0, 1]`.
    pub score: f64,
    pub per_class: Vec<Option<f64>>,
    pub seed: u64,
    #[serde(skip)]
    pub wall_time: Duration,
}

/// One label map of a probing dataset, keyed like its store records.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSample {
    pub key: String,
    pub labels: Array2<u32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeDataset {
    pub name: String,
    pub classes: usize,
    pub ignore_label: Option<u32>,
    pub train: Vec<LabeledSample>,
    pub test: Vec<LabeledSample>,
}

impl ProbeDataset {
    pub fn sample_keys(&self) -> Vec<String> {
        self.train.iter().chain(&self.test).map(|s| s.key.clone()).collect()
    }
}

fn gather(store: &FeatureStore, model: &str, name: &FeatureName, samples: &[LabeledSample], ignore: Option<u32>) -> Result<PixelSet> {
    let records = samples
        .iter()
        .map(|s| store.read(model, name, &s.key))
        .collect::<Result<Vec<_>>>()?;
    let maps: Vec<_> = records.iter().map(|r| r.data.view()).collect();
    let labels: Vec<_> = samples.iter().map(|s| s.labels.view()).collect();
    pixels_from_maps(&maps, &labels, ignore)
}

/// Trains and scores one probe for a stored feature on one dataset.
pub fn probe_feature(
    store: &FeatureStore,
    model: &str,
    name: &FeatureName,
    dataset: &ProbeDataset,
    config: &ProbeConfig,
) -> Result<MiouResult> {
    let config = ProbeConfig {
        classes: Some(dataset.classes),
        ..config.clone()
    };
    let train = gather(store, model, name, &dataset.train, dataset.ignore_label)?;
    let test = gather(store, model, name, &dataset.test, dataset.ignore_label)?;
    let probe = train_probe(&train, &config)?;
    Ok(evaluate_probe(&probe, &test)?.miou)
}

/// Probes every pool activation on every dataset and ranks them per
/// resolution. All records must be present before any training starts.
pub fn run_comparison(
    model: &str,
    pool: &CandidatePool,
    store: &FeatureStore,
    datasets: &[ProbeDataset],
    config: &ProbeConfig,
    workers: usize,
) -> Result<RankingReport> {
    config.validate()?;
    if datasets.is_empty() {
        return Err(Error::invalid("comparison needs at least one dataset"));
    }
    for d in datasets {
        if d.train.is_empty() || d.test.is_empty() {
            return Err(Error::invalid(format!("dataset {} needs train and test samples", d.name)));
        }
    }
    let names: Vec<FeatureName> = pool.ids().map(|id| FeatureName::Activation(id.clone())).collect();
    let keys: Vec<String> = datasets.iter().flat_map(|d| d.sample_keys()).collect();
    let gaps = store.missing(model, &names, &keys);
    if !gaps.is_empty() {
        let listed: Vec<String> = gaps.iter().take(20).map(|(n, k)| format!("{n}@{k}")).collect();
        let more = if gaps.len() > 20 {
            format!(" and {} more", gaps.len() - 20)
        } else {
            String::new()
        };
        return Err(Error::NotFound(format!(
            "{} missing records for model {model}: {}{more}",
            gaps.len(),
            listed.join(", ")
        )));
    }
    let jobs: Vec<(usize, usize)> = (0..names.len())
        .flat_map(|i| (0..datasets.len()).map(move |d| (i, d)))
        .collect();
    let threads = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::config(format!("worker pool: {e}")))?;
    let ids: Vec<ActivationId> = pool.ids().cloned().collect();
    let results = threads.install(|| {
        use rayon::prelude::*;
        jobs.par_iter()
            .map(|&(i, d)| {
                let started = Instant::now();
                let miou = probe_feature(store, model, &names[i], &datasets[d], config)?;
                Ok(ProbeResult {
                    activation: ids[i].clone(),
                    dataset: datasets[d].name.clone(),
                    score: miou.score,
                    per_class: miou.per_class,
                    seed: config.seed,
                    wall_time: started.elapsed(),
                })
            })
            .collect::<Result<Vec<_>>>()
    })?;
    Ok(RankingReport::build(model, &ids, datasets, config, results))
}
