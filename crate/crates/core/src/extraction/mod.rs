//! Capturing activations from a backbone and persisting them.

mod store;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use ndarray::{Array2, Array3, Axis};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::catalog::{parse_activation_id, ActivationDescriptor, ActivationId, ArchitectureSpec, Stage};
use crate::error::{Error, Result};
use crate::resize::{resize, ResizeMode};

pub use store::{FeatureStore, ManifestEntry};

/// RGB image, `(3, H, W)` with values in `[0, 1]`.
pub type Image = Array3<f32>;

/// What a stored record holds.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FeatureName {
    Activation(ActivationId),
    AttentionMaps,
    /// An assembled recipe feature.
    Assembled(String),
}

impl FeatureName {
    pub const ATTENTION_MAPS: &'static str = "attention-maps";

    pub fn activation(&self) -> Option<ActivationId> {
        match self {
            FeatureName::Activation(id) => Some(*id),
            _ => None,
        }
    }

    pub(crate) fn file_stem(&self) -> String {
        match self {
            FeatureName::Assembled(name) => format!("recipe.{name}"),
            other => other.to_string(),
        }
    }
}

impl fmt::Display for FeatureName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FeatureName::Activation(id) => write!(f, "{id}"),
            FeatureName::AttentionMaps => f.write_str(Self::ATTENTION_MAPS),
            FeatureName::Assembled(name) => write!(f, "recipe:{name}"),
        }
    }
}

impl FromStr for FeatureName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case(Self::ATTENTION_MAPS) {
            return Ok(FeatureName::AttentionMaps);
        }
        if let Some(name) = s.strip_prefix("recipe:") {
            check_key("recipe name", name)?;
            return Ok(FeatureName::Assembled(name.to_string()));
        }
        Ok(FeatureName::Activation(parse_activation_id(s)?))
    }
}

impl Serialize for FeatureName {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for FeatureName {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Keys become path components, so they are kept to a portable alphabet.
pub(crate) fn check_key(what: &str, key: &str) -> Result<()> {
    let ok = !key.is_empty()
        && !key.starts_with('.')
        && key.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'));
    if ok {
        Ok(())
    } else {
        Err(Error::invalid(format!("{what} `{key}` must be non-empty [A-Za-z0-9._-] not starting with `.`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub min: f64,
    pub max: f64,
    pub mean: f64,
}

impl FeatureStats {
    pub fn of(data: &Array3<f32>) -> Self {
        let mut min = f64::INFINITY;
        let mut max = f64::NEG_INFINITY;
        let mut sum = 0.0;
        for &v in data {
            let v = v as f64;
            min = min.min(v);
            max = max.max(v);
            sum += v;
        }
        let n = data.len().max(1) as f64;
        Self { min, max, mean: sum / n }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureRecord {
    pub model: String,
    pub name: FeatureName,
    pub sample_key: String,
    /// `(channels, height, width)`.
    pub data: Array3<f32>,
    pub stats: FeatureStats,
}

impl FeatureRecord {
    /// Rejects empty arrays, non-finite values and unsafe keys.
    pub fn new(model: &str, name: FeatureName, sample_key: &str, data: Array3<f32>) -> Result<Self> {
        check_key("model name", model)?;
        check_key("sample key", sample_key)?;
        if data.is_empty() {
            return Err(Error::invalid(format!("{name} for {sample_key} is empty")));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("{name} for {sample_key} holds non-finite value {bad}")));
        }
        let data = data.as_standard_layout().into_owned();
        Ok(Self {
            model: model.to_string(),
            stats: FeatureStats::of(&data),
            name,
            sample_key: sample_key.to_string(),
            data,
        })
    }

    pub fn shape(&self) -> [usize; 3] {
        let (c, h, w) = self.data.dim();
        [c, h, w]
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractionConfig {
    pub timestep: usize,
    /// Text condition; empty means unconditioned.
    pub prompt: String,
    pub noise_seed: u64,
    pub capture_set: Vec<ActivationId>,
    pub capture_attention_maps: bool,
    /// Capture attention logits instead of softmax scores.
    pub pre_softmax_attention: bool,
    /// `(width, height)` in pixels.
    pub input_size: (usize, usize),
}

impl ExtractionConfig {
    pub const DEFAULT_TIMESTEP: usize = 50;

    pub fn new(capture_set: Vec<ActivationId>, input_size: (usize, usize)) -> Self {
        Self {
            timestep: Self::DEFAULT_TIMESTEP,
            prompt: String::new(),
            noise_seed: 0,
            capture_set,
            capture_attention_maps: false,
            pre_softmax_attention: false,
            input_size,
        }
    }

    /// Checks the configuration against an adapter before any inference,
    /// returning descriptors for the capture set.
    pub fn validate<A: BackboneAdapter + ?Sized>(&self, adapter: &A) -> Result<Vec<ActivationDescriptor>> {
        if self.timestep >= adapter.schedule_length() {
            return Err(Error::config(format!(
                "timestep {} outside schedule of length {}",
                self.timestep,
                adapter.schedule_length()
            )));
        }
        if self.capture_set.is_empty() && !self.capture_attention_maps {
            return Err(Error::config("nothing to capture"));
        }
        if self.capture_attention_maps && self.prompt.trim().is_empty() {
            return Err(Error::config("attention maps need a non-empty prompt"));
        }
        let mut seen = BTreeSet::new();
        let arch = adapter.architecture();
        arch.latent_dims(self.input_size.0, self.input_size.1)?;
        self.capture_set
            .iter()
            .map(|id| {
                if !seen.insert(*id) {
                    return Err(Error::config(format!("{id} requested twice")));
                }
                if !adapter.exposes(id) {
                    return Err(Error::config(format!("{} does not expose {id}", adapter.model())));
                }
                let d = arch.describe(id)?;
                if !id.is_dense() {
                    return Err(Error::config(format!("{id} is a token tensor, not a dense feature")));
                }
                Ok(d)
            })
            .collect()
    }
}

/// What a single backbone run must return.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CaptureRequest {
    pub ids: BTreeSet<ActivationId>,
    pub attention_scores: bool,
}

/// Cross-attention scores of one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct CrossAttentionScores {
    /// The query activation of the layer.
    pub layer: ActivationId,
    pub height: usize,
    pub width: usize,
    /// `(height * width, tokens)`, row-major spatial order.
    pub scores: Array2<f32>,
    /// Which token columns belong to the prompt text.
    pub retained: Vec<bool>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Captures {
    pub activations: BTreeMap<ActivationId, Array3<f32>>,
    pub attention: Vec<CrossAttentionScores>,
}

/// A backbone that noises an image to `x_t` and runs one denoising step,
/// capturing the requested tensors. Identical inputs must give identical
/// captures.
pub trait BackboneAdapter {
    fn model(&self) -> &str;

    fn architecture(&self) -> &ArchitectureSpec;

    fn schedule_length(&self) -> usize;

    fn exposes(&self, id: &ActivationId) -> bool {
        self.architecture().describe(id).is_ok()
    }

    fn run(&mut self, image: &Image, config: &ExtractionConfig, request: &CaptureRequest) -> Result<Captures>;
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct SampleSummary {
    pub sample_key: String,
    pub records_written: usize,
    pub wall_time_secs: f64,
    /// Records refused, with the reason.
    pub rejected: Vec<(String, String)>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct ExtractionSummary {
    pub model: String,
    pub records_written: usize,
    pub samples: Vec<SampleSummary>,
}

impl ExtractionSummary {
    pub fn flagged_samples(&self) -> impl Iterator<Item = &SampleSummary> {
        self.samples.iter().filter(|s| !s.rejected.is_empty())
    }

    pub fn render_text(&self) -> String {
        let flagged = self.flagged_samples().count();
        let mut s = format!(
            "model {}: {} records from {} samples, {} flagged\n",
            self.model,
            self.records_written,
            self.samples.len(),
            flagged
        );
        for sample in self.flagged_samples() {
            for (name, reason) in &sample.rejected {
                s.push_str(&format!("  {} {}: {}\n", sample.sample_key, name, reason));
            }
        }
        s
    }
}

fn check_image(image: &Image, config: &ExtractionConfig) -> Result<()> {
    let (c, h, w) = image.dim();
    if c != 3 || (w, h) != config.input_size {
        return Err(Error::shape(format!(
            "image is {c}x{h}x{w}, expected 3x{}x{}",
            config.input_size.1, config.input_size.0
        )));
    }
    Ok(())
}

fn extract_one<A: BackboneAdapter + ?Sized>(
    key: &str,
    image: &Image,
    adapter: &mut A,
    config: &ExtractionConfig,
    descriptors: &[ActivationDescriptor],
    latent: (usize, usize),
    store: &FeatureStore,
) -> Result<SampleSummary> {
    check_key("sample key", key)?;
    check_image(image, config)?;
    let start = Instant::now();
    let request = CaptureRequest {
        ids: config.capture_set.iter().copied().collect(),
        attention_scores: config.capture_attention_maps,
    };
    let mut captures = adapter.run(image, config, &request)?;
    let mut summary = SampleSummary {
        sample_key: key.to_string(),
        ..Default::default()
    };
    let mut pending = Vec::new();
    for d in descriptors {
        let data = captures
            .activations
            .remove(&d.id)
            .ok_or_else(|| Error::invalid(format!("{} returned no {}", adapter.model(), d.id)))?;
        let expected = d.dense_shape(latent.0, latent.1);
        if data.shape() != expected {
            return Err(Error::shape(format!(
                "{} captured {:?}, catalog expects {:?}",
                d.id,
                data.shape(),
                expected
            )));
        }
        pending.push((FeatureName::Activation(d.id), data));
    }
    if config.capture_attention_maps {
        let up: Vec<_> = captures
            .attention
            .into_iter()
            .filter(|l| l.layer.stage() == Stage::Up)
            .collect();
        let maps = attention_maps_from_scores(&up, !config.pre_softmax_attention)?;
        pending.push((FeatureName::AttentionMaps, maps));
    }
    for (name, data) in pending {
        match FeatureRecord::new(adapter.model(), name.clone(), key, data) {
            Ok(record) => {
                store.write(&record)?;
                summary.records_written += 1;
            }
            Err(Error::InvalidInput(reason)) => summary.rejected.push((name.to_string(), reason)),
            Err(e) => return Err(e),
        }
    }
    summary.wall_time_secs = start.elapsed().as_secs_f64();
    Ok(summary)
}

/// Runs the adapter on every sample and writes one record per captured
/// activation (plus attention maps when configured). Records holding
/// non-finite values are refused and their sample flagged.
pub fn extract_features<A, I>(
    dataset: I,
    adapter: &mut A,
    config: &ExtractionConfig,
    store: &FeatureStore,
) -> Result<ExtractionSummary>
where
    A: BackboneAdapter + ?Sized,
    I: IntoIterator<Item = (String, Image)>,
{
    let descriptors = config.validate(adapter)?;
    let latent = adapter
        .architecture()
        .latent_dims(config.input_size.0, config.input_size.1)?;
    let mut summary = ExtractionSummary {
        model: adapter.model().to_string(),
        ..Default::default()
    };
    for (key, image) in dataset {
        let s = extract_one(&key, &image, adapter, config, &descriptors, latent, store)?;
        summary.records_written += s.records_written;
        summary.samples.push(s);
    }
    Ok(summary)
}

/// Splits the dataset into `workers` contiguous shards, each extracted by
/// its own adapter on its own thread. The summary keeps dataset order.
pub fn extract_features_sharded<A, F>(
    dataset: &[(String, Image)],
    make_adapter: F,
    workers: usize,
    config: &ExtractionConfig,
    store: &FeatureStore,
) -> Result<ExtractionSummary>
where
    A: BackboneAdapter,
    F: Fn() -> Result<A> + Sync,
{
    use rayon::prelude::*;
    let workers = workers.max(1);
    let probe = make_adapter()?;
    config.validate(&probe)?;
    let model = probe.model().to_string();
    drop(probe);
    let shard = dataset.len().div_ceil(workers).max(1);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::invalid(e.to_string()))?;
    let parts: Vec<Result<ExtractionSummary>> = pool.install(|| {
        dataset
            .par_chunks(shard)
            .map(|chunk| {
                let mut adapter = make_adapter()?;
                extract_features(chunk.iter().cloned(), &mut adapter, config, store)
            })
            .collect()
    });
    let mut summary = ExtractionSummary {
        model,
        ..Default::default()
    };
    for part in parts {
        let part = part?;
        summary.records_written += part.records_written;
        summary.samples.extend(part.samples);
    }
    Ok(summary)
}

/// Turns per-layer cross-attention scores into one map per retained
/// token: columns of special and padding tokens are dropped, rows are
/// renormalized over the kept tokens when `normalize` is set, every layer
/// is resized bilinearly to the largest layer resolution, and layers are
/// averaged.
pub fn attention_maps_from_scores(layers: &[CrossAttentionScores], normalize: bool) -> Result<Array3<f32>> {
    let first = layers
        .first()
        .ok_or_else(|| Error::invalid("no cross-attention layers captured"))?;
    let kept: Vec<usize> = first
        .retained
        .iter()
        .enumerate()
        .filter_map(|(i, r)| r.then_some(i))
        .collect();
    if kept.is_empty() {
        return Err(Error::invalid("prompt retains no tokens"));
    }
    let (th, tw) = layers
        .iter()
        .map(|l| (l.height, l.width))
        .max_by_key(|(h, w)| h * w)
        .unwrap_or((0, 0));
    let mut sum = Array3::<f32>::zeros((kept.len(), th, tw));
    for layer in layers {
        if layer.retained != first.retained {
            return Err(Error::invalid(format!("{} uses a different token layout", layer.layer)));
        }
        if layer.scores.dim() != (layer.height * layer.width, layer.retained.len()) {
            return Err(Error::shape(format!(
                "{} scores are {:?}, expected ({}, {})",
                layer.layer,
                layer.scores.dim(),
                layer.height * layer.width,
                layer.retained.len()
            )));
        }
        let mut selected = layer.scores.select(Axis(1), &kept);
        if normalize {
            for mut row in selected.rows_mut() {
                let total: f32 = row.sum();
                if total > 0.0 {
                    row /= total;
                }
            }
        }
        let maps = selected
            .t()
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((kept.len(), layer.height, layer.width))
            .map_err(|e| Error::shape(e.to_string()))?;
        sum += &resize(maps.view(), th, tw, ResizeMode::Bilinear);
    }
    sum /= layers.len() as f32;
    Ok(sum)
}

/// Captures the prompt's cross-attention maps over the up stage for one
/// image.
pub fn capture_attention_maps<A: BackboneAdapter + ?Sized>(
    adapter: &mut A,
    sample_key: &str,
    image: &Image,
    config: &ExtractionConfig,
) -> Result<FeatureRecord> {
    if config.prompt.trim().is_empty() {
        return Err(Error::config("attention maps need a non-empty prompt"));
    }
    if config.timestep >= adapter.schedule_length() {
        return Err(Error::config(format!("timestep {} outside schedule", config.timestep)));
    }
    check_image(image, config)?;
    let request = CaptureRequest {
        ids: BTreeSet::new(),
        attention_scores: true,
    };
    let captures = adapter.run(image, config, &request)?;
    let up: Vec<_> = captures
        .attention
        .into_iter()
        .filter(|l| l.layer.stage() == Stage::Up)
        .collect();
    let maps = attention_maps_from_scores(&up, !config.pre_softmax_attention)?;
    FeatureRecord::new(adapter.model(), FeatureName::AttentionMaps, sample_key, maps)
}
