use diffeat::catalog::{enumerate_candidates, ActivationId, ArchitectureSpec, EnumerationPolicy, Stage};
use diffeat::datasets::synthetic_segmentation;
use diffeat::error::Error;
use diffeat::extraction::{
    extract_features, extract_features_sharded, BackboneAdapter, CaptureRequest, Captures, ExtractionConfig,
    FeatureName, FeatureStore, Image,
};
use diffeat::toybackbone::{build_toy_adapter, ToyAdapter, ToySpec};

fn images(n: usize) -> Vec<(String, Image)> {
    synthetic_segmentation("simple", n, (32, 32), 4).unwrap().images()
}

fn dense_ids(adapter: &impl BackboneAdapter, policy: &EnumerationPolicy) -> Vec<ActivationId> {
    enumerate_candidates(adapter.architecture(), policy)
        .unwrap()
        .ids()
        .filter(|id| id.is_dense())
        .copied()
        .collect()
}

#[test]
fn one_record_per_image_and_activation() {
    let dir = tempfile::tempdir().unwrap();
    let store = FeatureStore::open(dir.path()).unwrap();
    let mut adapter = build_toy_adapter(&ToySpec::default()).unwrap();
    let ids: Vec<ActivationId> = ["up-level1-repeat0-vit-block0-cross-q", "up-level0-repeat1-res-out", "mid-repeat0-res-out"]
        .iter()
        .map(|s| s.parse().unwrap())
        .collect();
    let config = ExtractionConfig::new(ids.clone(), (32, 32));
    let summary = extract_features(images(4), &mut adapter, &config, &store).unwrap();
    assert_eq!(summary.records_written, 12);
    assert_eq!(store.len(), 12);
    assert_eq!(summary.flagged_samples().count(), 0);
    let arch = adapter.architecture().clone();
    let (lh, lw) = arch.latent_dims(32, 32).unwrap();
    for id in &ids {
        let r = store.read("toy", &FeatureName::Activation(*id), "simple-0002").unwrap();
        assert_eq!(r.shape(), arch.describe(id).unwrap().dense_shape(lh, lw));
    }
}

#[test]
fn empty_dataset_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let store = FeatureStore::open(dir.path()).unwrap();
    let mut adapter = build_toy_adapter(&ToySpec::default()).unwrap();
    let config = ExtractionConfig::new(vec!["up-level0-repeat1-res-out".parse().unwrap()], (32, 32));
    let summary = extract_features(Vec::new(), &mut adapter, &config, &store).unwrap();
    assert_eq!((summary.records_written, summary.samples.len()), (0, 0));
    assert!(store.is_empty());
}

struct UpOnly(ToyAdapter);

impl BackboneAdapter for UpOnly {
    fn model(&self) -> &str {
        self.0.model()
    }

    fn architecture(&self) -> &ArchitectureSpec {
        self.0.architecture()
    }

    fn schedule_length(&self) -> usize {
        self.0.schedule_length()
    }

    fn exposes(&self, id: &ActivationId) -> bool {
        id.stage() == Stage::Up && self.0.exposes(id)
    }

    fn run(&mut self, image: &Image, config: &ExtractionConfig, request: &CaptureRequest) -> diffeat::Result<Captures> {
        self.0.run(image, config, request)
    }
}

#[test]
fn unexposed_activation_is_a_configuration_error_before_any_run() {
    let dir = tempfile::tempdir().unwrap();
    let store = FeatureStore::open(dir.path()).unwrap();
    let mut adapter = UpOnly(build_toy_adapter(&ToySpec::default()).unwrap());
    let config = ExtractionConfig::new(vec!["down-level1-repeat0-res-out".parse().unwrap()], (32, 32));
    let err = extract_features(images(2), &mut adapter, &config, &store).unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err}");
    assert!(store.is_empty());
}

#[test]
fn attention_maps_have_one_channel_per_prompt_word() {
    let dir = tempfile::tempdir().unwrap();
    let store = FeatureStore::open(dir.path()).unwrap();
    let mut adapter = build_toy_adapter(&ToySpec::default()).unwrap();
    let mut config = ExtractionConfig::new(vec![], (32, 32));
    config.capture_attention_maps = true;
    config.prompt = "a red circle".into();
    extract_features(images(1), &mut adapter, &config, &store).unwrap();
    let r = store.read("toy", &FeatureName::AttentionMaps, "simple-0000").unwrap();
    assert_eq!(r.shape(), [3, 16, 16]);
    let sums: Vec<f32> = (0..16 * 16)
        .map(|p| (0..3).map(|t| r.data[[t, p / 16, p % 16]]).sum())
        .collect();
    assert!(sums.iter().all(|s| (s - 1.0).abs() < 1e-4));
}

#[test]
fn sixty_three_activations_over_thirty_images() {
    let dir = tempfile::tempdir().unwrap();
    let store = FeatureStore::open(dir.path()).unwrap();
    let spec = ToySpec::default();
    let adapter = build_toy_adapter(&spec).unwrap();
    let ids: Vec<ActivationId> = dense_ids(&adapter, &EnumerationPolicy::full()).into_iter().take(63).collect();
    assert_eq!(ids.len(), 63);
    let config = ExtractionConfig::new(ids.clone(), (32, 32));
    let data = images(30);
    let summary = extract_features_sharded(&data, || build_toy_adapter(&spec), 4, &config, &store).unwrap();
    assert_eq!(summary.records_written, 1890);
    let keys: Vec<String> = summary.samples.iter().map(|s| s.sample_key.clone()).collect();
    assert_eq!(keys, data.iter().map(|d| d.0.clone()).collect::<Vec<_>>());
    let manifest = std::fs::read_to_string(dir.path().join("manifest.jsonl")).unwrap();
    assert_eq!(manifest.lines().count(), 1890);
    let reopened = FeatureStore::open(dir.path()).unwrap();
    assert_eq!(reopened.len(), 1890);
    let names: Vec<FeatureName> = ids.iter().map(|i| FeatureName::Activation(*i)).collect();
    assert!(reopened.missing("toy", &names, &reopened.sample_keys("toy")).is_empty());
}
