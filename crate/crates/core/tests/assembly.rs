use diffeat::assembly::{assemble, assemble_from_store, builtin_recipe, load_recipe, ASSEMBLED_MODEL};
use diffeat::catalog::lookup_architecture;
use diffeat::extraction::{FeatureName, FeatureRecord, FeatureStore};
use ndarray::{s, Array3};
use proptest::prelude::*;

/// Records shaped as the catalog describes them for a square input.
fn catalog_records(recipe: &diffeat::assembly::SelectionRecipe, input: usize, sample: &str) -> Vec<FeatureRecord> {
    recipe
        .items
        .iter()
        .map(|item| {
            let arch = lookup_architecture(&item.model).unwrap();
            let (lh, lw) = arch.latent_dims(input, input).unwrap();
            let FeatureName::Activation(id) = &item.feature else { panic!("activation items only") };
            let [c, h, w] = arch.describe(id).unwrap().dense_shape(lh, lw);
            let data = Array3::from_shape_fn((c, h, w), |(k, i, j)| (k % 7) as f32 + (i * w + j) as f32 * 1e-3);
            FeatureRecord::new(&item.model, item.feature.clone(), sample, data).unwrap()
        })
        .collect()
}

#[test]
fn ours_v15_keeps_the_conventional_channel_budget() {
    let recipe = builtin_recipe("ours-v15").unwrap();
    let records = catalog_records(&recipe, 512, "img");
    let widths: Vec<usize> = records.iter().map(|r| r.shape()[0]).collect();
    assert_eq!(widths, [1280, 1280, 640, 320]);
    let out = assemble(&records, &recipe, &[]).unwrap();
    assert_eq!(out.channels(), 3520);
    assert_eq!(out.data.dim(), (3520, 64, 64));
    assert_eq!(out.channel_index.last().unwrap().end, 3520);
}

#[test]
fn assembled_features_re_enter_the_store() {
    let dir = tempfile::tempdir().unwrap();
    let store = FeatureStore::open(dir.path()).unwrap();
    let recipe = builtin_recipe("ours-xl").unwrap();
    for r in catalog_records(&recipe, 256, "img") {
        store.write(&r).unwrap();
    }
    let out = assemble_from_store(&store, &recipe, "img", &[]).unwrap();
    store.write(&out.to_record().unwrap()).unwrap();
    let back = store
        .read(ASSEMBLED_MODEL, &FeatureName::Assembled("ours-xl".into()), "img")
        .unwrap();
    assert_eq!(back.data, out.data);
    assert_eq!(back.name.to_string(), "recipe:ours-xl");
}

fn member(c: usize, h: usize, w: usize, seed: usize) -> Array3<f32> {
    Array3::from_shape_fn((c, h, w), |(k, i, j)| ((k * 31 + i * 7 + j * 3 + seed) % 13) as f32)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn channels_add_up_and_permutations_permute_blocks(
        sizes in prop::collection::vec((1usize..4, 0usize..3), 1..5),
        rotate in 0usize..4,
    ) {
        // Items draw from ResModule outputs of sd15 whose widths are known.
        let ids = ["up-level1-repeat0-res-out", "up-level2-repeat0-res-out", "up-level3-repeat0-res-out", "up-level0-repeat0-res-out"];
        let widths = [1280usize, 640, 320, 1280];
        let picks: Vec<usize> = (0..sizes.len()).map(|i| (i + rotate) % 4).collect();
        let mut distinct = picks.clone();
        distinct.dedup();
        prop_assume!(distinct.len() == picks.len());
        let make = |order: &[usize]| {
            let text: String = std::iter::once("name: prop\n".to_string())
                .chain(order.iter().map(|&i| format!("sd15 {}\n", ids[picks[i]])))
                .collect();
            let recipe = load_recipe("prop", &text).unwrap();
            let records: Vec<FeatureRecord> = order
                .iter()
                .map(|&i| {
                    let side = 2usize << sizes[i].1;
                    let data = member(widths[picks[i]], side, side, i);
                    FeatureRecord::new("sd15", ids[picks[i]].parse().unwrap(), "s", data).unwrap()
                })
                .collect();
            assemble(&records, &recipe, &[]).unwrap()
        };
        let forward: Vec<usize> = (0..sizes.len()).collect();
        let a = make(&forward);
        let total: usize = picks.iter().map(|&p| widths[p]).sum();
        prop_assert_eq!(a.channels(), total);
        let mut covered = 0;
        for r in &a.channel_index {
            prop_assert_eq!(r.start, covered);
            covered = r.end;
        }
        prop_assert_eq!(covered, total);
        let reversed: Vec<usize> = forward.iter().rev().copied().collect();
        let b = make(&reversed);
        for r in &a.channel_index {
            let other = b.channel_index.iter().find(|o| o.feature == r.feature).unwrap();
            prop_assert_eq!(
                a.data.slice(s![r.start..r.end, .., ..]),
                b.data.slice(s![other.start..other.end, .., ..])
            );
        }
    }
}
