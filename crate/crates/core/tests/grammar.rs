use diffeat::assembly::builtin_recipes;
use diffeat::catalog::{
    enumerate_candidates, format_activation_id, lookup_architecture, parse_activation_id, ActivationId, BlockRole,
    EnumerationPolicy, Site, Stage,
};
use diffeat::extraction::FeatureName;
use proptest::prelude::*;

fn arb_id() -> impl Strategy<Value = ActivationId> {
    let site = prop_oneof![
        (0u32..12, any::<bool>()).prop_map(|(repeat, increment)| Site::Res { repeat, increment }),
        (0u32..12).prop_map(|repeat| Site::Vit { repeat, block: None }),
        (0u32..12, 0u32..12, 0usize..BlockRole::ALL.len()).prop_map(|(repeat, b, r)| Site::Vit {
            repeat,
            block: Some((b, BlockRole::ALL[r])),
        }),
        Just(Site::Upsampler),
        Just(Site::Downsampler),
    ];
    (0usize..3, 0u32..12, site).prop_filter_map("structurally invalid", |(s, level, site)| {
        let stage = Stage::ALL[s];
        let level = (stage != Stage::Mid).then_some(level);
        ActivationId::new(stage, level, site).ok()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]

    #[test]
    fn format_then_parse_is_identity(id in arb_id()) {
        let text = format_activation_id(&id);
        let back = parse_activation_id(&text).unwrap();
        prop_assert_eq!(back, id);
        prop_assert_eq!(back.to_string(), text);
    }
}

proptest! {
    #[test]
    fn arbitrary_text_never_panics_and_accepted_text_is_canonical(text in "[a-z0-9-]{0,48}") {
        if let Ok(id) = parse_activation_id(&text) {
            prop_assert_eq!(format_activation_id(&id), text);
        }
    }
}

fn fixture_ids(text: &str) -> Vec<ActivationId> {
    text.lines()
        .filter(|l| !l.starts_with('#') && !l.trim().is_empty())
        .map(|l| parse_activation_id(l.split_whitespace().next().unwrap()).unwrap())
        .collect()
}

#[test]
fn every_published_identifier_parses_and_is_enumerable() {
    let sdxl = lookup_architecture("sdxl").unwrap();
    let sd15 = lookup_architecture("sd15").unwrap();
    let sdxl_pool = enumerate_candidates(&sdxl, &EnumerationPolicy::universe()).unwrap();
    let sd15_pool = enumerate_candidates(&sd15, &EnumerationPolicy::universe().with_levels([1, 2, 3])).unwrap();
    for id in fixture_ids(include_str!("fixtures/sdxl_filtered_scores.txt")) {
        assert!(sdxl_pool.contains(&id), "{id}");
    }
    for id in fixture_ids(include_str!("fixtures/sd15_filtered_scores.txt")) {
        assert!(sd15_pool.contains(&id), "{id}");
    }
    for recipe in builtin_recipes() {
        for item in &recipe.items {
            if let FeatureName::Activation(id) = &item.feature {
                let arch = lookup_architecture(&item.model).unwrap();
                let pool = enumerate_candidates(&arch, &EnumerationPolicy::full()).unwrap();
                assert!(pool.contains(id), "{} {id}", recipe.name);
                assert_eq!(parse_activation_id(&id.to_string()).unwrap(), *id);
            }
        }
    }
}
