use std::time::Instant;

use diffeat::catalog::{enumerate_candidates, lookup_architecture, parse_activation_id, ActivationId, EnumerationPolicy, Stage};
use diffeat::filtering::{apply_qualitative_filters, FilterConfig, FilterRule};
use proptest::prelude::*;

fn table_ids(text: &str) -> Vec<ActivationId> {
    text.lines()
        .filter(|l| !l.starts_with('#') && !l.trim().is_empty())
        .map(|l| parse_activation_id(l.split_whitespace().next().unwrap()).unwrap())
        .collect()
}

fn filtered(model: &str, levels: Option<&[u32]>) -> (Vec<ActivationId>, diffeat::filtering::FilterReport) {
    let arch = lookup_architecture(model).unwrap();
    let mut policy = EnumerationPolicy::universe();
    if let Some(l) = levels {
        policy = policy.with_levels(l.iter().copied());
    }
    let pool = enumerate_candidates(&arch, &policy).unwrap();
    let (out, report) = apply_qualitative_filters(&pool, &FilterConfig::for_architecture(&arch)).unwrap();
    (out.ids().copied().collect(), report)
}

#[test]
fn sdxl_filter_reproduces_comparison_table_rows() {
    let start = Instant::now();
    let expected = table_ids(include_str!("fixtures/sdxl_filtered_scores.txt"));
    let (got, report) = filtered("sdxl", None);
    assert_eq!(got, expected);
    assert_eq!(report.input_count, 279);
    assert_eq!(report.reduction_percent(), Some(78));
    let level0 = got.iter().filter(|i| i.level() == Some(0)).count();
    assert_eq!((level0, got.len() - level0), (43, 20));
    assert!(start.elapsed().as_secs_f64() < 1.0);
}

#[test]
fn sd15_filter_reproduces_comparison_table_rows() {
    let expected = table_ids(include_str!("fixtures/sd15_filtered_scores.txt"));
    let (got, _) = filtered("sd15", Some(&[1, 2, 3]));
    assert_eq!(got, expected);
    assert_eq!(got.len(), 33);
    let level3: Vec<_> = got.iter().filter(|i| i.level() == Some(3)).map(|i| i.to_string()).collect();
    assert!(level3.iter().all(|s| s.ends_with("self-q") || s.ends_with("self-k")));
    let (unrestricted, _) = filtered("sd15", None);
    assert_eq!(unrestricted, expected);
}

#[test]
fn playground_filters_like_sdxl() {
    let (xl, _) = filtered("sdxl", None);
    let (pg, report) = filtered("playground-v2", None);
    assert_eq!(xl, pg);
    assert_eq!(report.architecture, "playground-v2");
}

#[test]
fn report_record_reconciles_counts() {
    let (_, report) = filtered("sdxl", None);
    let rec = report.to_record();
    assert_eq!(rec["reduction_ratio"], "216/279");
    let total: usize = rec["eliminated"].as_object().unwrap().values().map(|v| v.as_array().unwrap().len()).sum();
    assert_eq!(total + 63, 279);
    let mut seen = std::collections::BTreeSet::new();
    for (_, ids) in &report.eliminated {
        for id in ids {
            assert!(seen.insert(*id), "{id} eliminated twice");
        }
    }
}

fn rule_subset() -> impl Strategy<Value = Vec<FilterRule>> {
    proptest::sample::subsequence(FilterRule::APPLICATION_ORDER.to_vec(), 1..=5)
}

proptest! {
    #[test]
    fn filtering_is_monotone_idempotent_and_order_preserving(
        model in prop_oneof![Just("sd15"), Just("sdxl")],
        rules in rule_subset(),
        full in any::<bool>(),
    ) {
        let arch = lookup_architecture(model).unwrap();
        let policy = if full { EnumerationPolicy::full() } else { EnumerationPolicy::universe() };
        let pool = enumerate_candidates(&arch, &policy).unwrap();
        let cfg = FilterConfig::new(model, rules.clone(), arch.late_self_attention.clone()).unwrap();
        let (once, report) = apply_qualitative_filters(&pool, &cfg).unwrap();
        let (twice, _) = apply_qualitative_filters(&once, &cfg).unwrap();
        prop_assert_eq!(&once.entries, &twice.entries);
        prop_assert_eq!(report.input_count, report.output_count + report.eliminated_count());
        let order = pool.order_index();
        let positions: Vec<_> = once.ids().map(|i| order[i]).collect();
        prop_assert!(positions.windows(2).all(|w| w[0] < w[1]));
        if rules.contains(&FilterRule::R1UpstageEarlyHalf) {
            prop_assert!(once.ids().all(|i| i.stage() == Stage::Up));
        }
        if rules.contains(&FilterRule::R4DropIncrements) {
            prop_assert!(once.entries.iter().all(|d| !d.is_increment));
        }
    }
}
