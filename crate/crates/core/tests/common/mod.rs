#![allow(dead_code)]

use std::path::Path;

use diffeat::catalog::{enumerate_candidates, CandidatePool, EnumerationPolicy};
use diffeat::datasets::synthetic_segmentation;
use diffeat::extraction::{extract_features_sharded, BackboneAdapter, ExtractionConfig, FeatureStore};
use diffeat::filtering::{apply_qualitative_filters, FilterConfig};
use diffeat::probing::{run_comparison, ProbeConfig, ProbeDataset, RankingReport};
use diffeat::toybackbone::{build_toy_adapter, ToySpec};

pub fn light_probe() -> ProbeConfig {
    ProbeConfig {
        ensemble_size: 3,
        hidden: vec![32, 32],
        epochs: 4,
        batch_size: 512,
        learning_rate: 1e-2,
        max_train_pixels: Some(4096),
        ..ProbeConfig::default()
    }
}

/// One small member per probe, for structural checks.
pub fn quick_probe() -> ProbeConfig {
    ProbeConfig {
        ensemble_size: 1,
        hidden: vec![16],
        epochs: 2,
        ..light_probe()
    }
}

pub fn toy_filtered_pool() -> CandidatePool {
    let adapter = build_toy_adapter(&ToySpec::default()).unwrap();
    let arch = adapter.architecture();
    let pool = enumerate_candidates(arch, &EnumerationPolicy::universe()).unwrap();
    apply_qualitative_filters(&pool, &FilterConfig::for_architecture(arch)).unwrap().0
}

/// Extracts `images` synthetic images split over two datasets into a
/// fresh store at `root` and returns the datasets with a 2:1 train/test split.
pub fn toy_datasets(root: &Path, pool: &CandidatePool, images: usize, workers: usize) -> (FeatureStore, Vec<ProbeDataset>) {
    let store = FeatureStore::open(root).unwrap();
    let spec = ToySpec::default();
    let config = ExtractionConfig::new(pool.ids().copied().collect(), (32, 32));
    let mut datasets = Vec::new();
    for (i, name) in ["simple", "complex"].into_iter().enumerate() {
        let set = synthetic_segmentation(name, images / 2, (32, 32), 100 + i as u64).unwrap();
        extract_features_sharded(&set.images(), || build_toy_adapter(&spec), workers, &config, &store).unwrap();
        datasets.push(set.probe_dataset(images / 3).unwrap());
    }
    (store, datasets)
}

/// enumerate → filter → extract → compare on the toy backbone.
pub fn toy_pipeline(root: &Path, images: usize, workers: usize, probe: &ProbeConfig) -> RankingReport {
    let pool = toy_filtered_pool();
    let (store, datasets) = toy_datasets(root, &pool, images, workers);
    run_comparison("toy", &pool, &store, &datasets, probe, workers).unwrap()
}
