//! One pass/fail line per acceptance criterion.

mod common;

use std::collections::BTreeSet;
use std::time::{Duration, Instant};

use diffeat::assembly::{assemble, builtin_recipe, builtin_recipes};
use diffeat::catalog::{
    enumerate_candidates, format_activation_id, lookup_architecture, parse_activation_id, ActivationId, BlockRole,
    EnumerationPolicy, Site, Stage,
};
use diffeat::evaluation::{miou, pck, KeypointPair, PckVariant, Point};
use diffeat::extraction::{CaptureRequest, ExtractionConfig, FeatureName, FeatureRecord};
use diffeat::filtering::{apply_qualitative_filters, FilterConfig, FilterReport};
use diffeat::toybackbone::{build_toy_adapter, ToySpec};
use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(cond: bool, detail: impl Into<String>) -> Outcome {
    let detail = detail.into();
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn fixture_ids(text: &str) -> BTreeSet<ActivationId> {
    text.lines()
        .filter(|l| !l.starts_with('#') && !l.trim().is_empty())
        .map(|l| parse_activation_id(l.split_whitespace().next().unwrap()).unwrap())
        .collect()
}

fn filter(model: &str, policy: EnumerationPolicy) -> (BTreeSet<ActivationId>, FilterReport) {
    let arch = lookup_architecture(model).unwrap();
    let pool = enumerate_candidates(&arch, &policy).unwrap();
    let (out, report) = apply_qualitative_filters(&pool, &FilterConfig::for_architecture(&arch)).unwrap();
    (out.ids().copied().collect(), report)
}

fn filtered_pool_exactness() -> Outcome {
    let start = Instant::now();
    let (sdxl, _) = filter("sdxl", EnumerationPolicy::universe());
    let (sd15, _) = filter("sd15", EnumerationPolicy::universe().with_levels([1, 2, 3]));
    let elapsed = start.elapsed();
    let sdxl_ok = sdxl == fixture_ids(include_str!("fixtures/sdxl_filtered_scores.txt"));
    let sd15_ok = sd15 == fixture_ids(include_str!("fixtures/sd15_filtered_scores.txt"));
    check(
        sdxl_ok && sd15_ok && sdxl.len() == 63 && sd15.len() == 33 && elapsed < Duration::from_secs(1),
        format!("sdxl {} ids exact={sdxl_ok}, sd15 {} ids exact={sd15_ok}, {elapsed:.2?}", sdxl.len(), sd15.len()),
    )
}

fn reduction_ratio() -> Outcome {
    let (_, report) = filter("sdxl", EnumerationPolicy::universe());
    let line = report.summary_line();
    check(
        report.input_count == 279 && line == "63 candidates retained (78% reduction)",
        format!("input {} -> `{line}`", report.input_count),
    )
}

/// Correct at alpha = 0.1 iff `100 * d^2 <= extent^2`, in exact integers.
fn integer_pck_oracle(pairs: &[(u32, u32, u32, u32, Vec<(i64, i64, i64, i64)>)], bbox: bool) -> usize {
    pairs
        .iter()
        .map(|(w, h, bw, bh, kps)| {
            let e = if bbox { *bw.max(bh) } else { *w.max(h) } as i64;
            kps.iter()
                .filter(|(tx, ty, px, py)| 100 * ((tx - px).pow(2) + (ty - py).pow(2)) <= e * e)
                .count()
        })
        .sum()
}

fn confusion_oracle(pred: &[u32], truth: &[u32], k: usize) -> f64 {
    let mut m = vec![vec![0u64; k]; k];
    for (&p, &t) in pred.iter().zip(truth) {
        m[t as usize][p as usize] += 1;
    }
    let ious: Vec<f64> = (0..k)
        .filter_map(|c| {
            let tp = m[c][c];
            let row: u64 = m[c].iter().sum();
            let col: u64 = m.iter().map(|r| r[c]).sum();
            let union = row + col - tp;
            (union > 0).then(|| tp as f64 / union as f64)
        })
        .collect();
    ious.iter().sum::<f64>() / ious.len() as f64
}

fn metric_oracle_equivalence() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let raw: Vec<_> = (0..1000)
        .map(|_| {
            let (w, h) = (rng.random_range(1..800u32), rng.random_range(1..800u32));
            let (bw, bh) = (rng.random_range(1..=w), rng.random_range(1..=h));
            let n = rng.random_range(1..20);
            let kps: Vec<(i64, i64, i64, i64)> = (0..n)
                .map(|_| {
                    let t = (rng.random_range(0..=w) as i64, rng.random_range(0..=h) as i64);
                    let spread = (w.max(h) / 5).max(1) as i64;
                    let p = (
                        (t.0 + rng.random_range(-spread..=spread)).clamp(0, w as i64),
                        (t.1 + rng.random_range(-spread..=spread)).clamp(0, h as i64),
                    );
                    (t.0, t.1, p.0, p.1)
                })
                .collect();
            (w, h, bw, bh, kps)
        })
        .collect();
    let pairs: Vec<KeypointPair> = raw
        .iter()
        .enumerate()
        .map(|(i, (w, h, bw, bh, kps))| {
            let truth: Vec<Point> = kps.iter().map(|k| (k.0 as f64, k.1 as f64)).collect();
            KeypointPair {
                key: format!("p{i}"),
                source_size: (*w, *h),
                target_size: (*w, *h),
                target_bbox: (0.0, 0.0, *bw as f64, *bh as f64),
                source_keypoints: truth.clone(),
                target_keypoints: truth,
            }
        })
        .collect();
    let preds: Vec<Vec<Point>> = raw
        .iter()
        .map(|r| r.4.iter().map(|k| (k.2 as f64, k.3 as f64)).collect())
        .collect();
    let img = pck(&preds, &pairs, PckVariant::Img, 0.1).unwrap();
    let bbox = pck(&preds, &pairs, PckVariant::Bbox, 0.1).unwrap();
    let pck_ok = img.correct == integer_pck_oracle(&raw, false) && bbox.correct == integer_pck_oracle(&raw, true);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let k = rng.random_range(2..8usize);
        let n = rng.random_range(16..4096);
        let truth: Vec<u32> = (0..n).map(|_| rng.random_range(0..k as u32)).collect();
        let pred: Vec<u32> = truth
            .iter()
            .map(|&t| if rng.random_bool(0.7) { t } else { rng.random_range(0..k as u32) })
            .collect();
        let got = miou(&pred, &truth, k, None).unwrap().score;
        worst = worst.max((got - confusion_oracle(&pred, &truth, k)).abs());
    }
    let elapsed = start.elapsed();
    check(
        pck_ok && worst <= 1e-9 && elapsed < Duration::from_secs(10),
        format!(
            "PCK img {}/{} bbox {}/{} exact={pck_ok}, mIoU max error {worst:.1e}, {elapsed:.2?}",
            img.correct, img.total, bbox.correct, bbox.total
        ),
    )
}

fn random_id(rng: &mut ChaCha8Rng) -> ActivationId {
    loop {
        let stage = Stage::ALL[rng.random_range(0..3)];
        let level = (stage != Stage::Mid).then(|| rng.random_range(0..10));
        let repeat = rng.random_range(0..10);
        let site = match rng.random_range(0..5) {
            0 => Site::Res { repeat, increment: rng.random_bool(0.5) },
            1 => Site::Vit { repeat, block: None },
            2 => Site::Vit {
                repeat,
                block: Some((rng.random_range(0..10), BlockRole::ALL[rng.random_range(0..BlockRole::ALL.len())])),
            },
            3 => Site::Upsampler,
            _ => Site::Downsampler,
        };
        if let Ok(id) = ActivationId::new(stage, level, site) {
            return id;
        }
    }
}

fn grammar_properties() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let round_trips = (0..10_000)
        .filter(|_| {
            let id = random_id(&mut rng);
            let text = format_activation_id(&id);
            parse_activation_id(&text).is_ok_and(|back| back == id && back.to_string() == text)
        })
        .count();
    let mut published = 0;
    let mut enumerable = 0;
    let sdxl = enumerate_candidates(&lookup_architecture("sdxl").unwrap(), &EnumerationPolicy::full()).unwrap();
    let sd15 = enumerate_candidates(&lookup_architecture("sd15").unwrap(), &EnumerationPolicy::full()).unwrap();
    for (text, pool) in [
        (include_str!("fixtures/sdxl_filtered_scores.txt"), &sdxl),
        (include_str!("fixtures/sd15_filtered_scores.txt"), &sd15),
    ] {
        for id in fixture_ids(text) {
            published += 1;
            enumerable += usize::from(pool.contains(&id));
        }
    }
    for recipe in builtin_recipes() {
        for item in &recipe.items {
            if let FeatureName::Activation(id) = &item.feature {
                let pool = if item.model == "sd15" { &sd15 } else { &sdxl };
                published += 1;
                enumerable += usize::from(pool.contains(id));
            }
        }
    }
    let elapsed = start.elapsed();
    check(
        round_trips == 10_000 && enumerable == published && elapsed < Duration::from_secs(5),
        format!("{round_trips}/10000 round trips, {enumerable}/{published} published ids enumerable, {elapsed:.2?}"),
    )
}

fn end_to_end_toy_pipeline() -> Outcome {
    let start = Instant::now();
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get());
    let probe = common::light_probe();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let first = common::toy_pipeline(a.path(), 30, workers, &probe);
    let second = common::toy_pipeline(b.path(), 30, workers, &probe);
    let elapsed = start.elapsed();
    let identical = first.render_text() == second.render_text() && first.to_json() == second.to_json();
    check(
        identical && !first.results.is_empty() && elapsed < Duration::from_secs(300),
        format!(
            "{} probes over {} resolutions, identical reports={identical}, two runs in {elapsed:.1?}",
            first.results.len(),
            first.resolutions.len()
        ),
    )
}

fn recipe_channel_budget() -> Outcome {
    let recipe = builtin_recipe("ours-v15").unwrap();
    let arch = lookup_architecture("sd15").unwrap();
    let (lh, lw) = arch.latent_dims(512, 512).unwrap();
    let records: Vec<FeatureRecord> = recipe
        .items
        .iter()
        .map(|item| {
            let FeatureName::Activation(id) = &item.feature else { unreachable!() };
            let [c, h, w] = arch.describe(id).unwrap().dense_shape(lh, lw);
            FeatureRecord::new("sd15", item.feature.clone(), "x", Array3::from_elem((c, h, w), 0.5)).unwrap()
        })
        .collect();
    let widths: Vec<usize> = records.iter().map(|r| r.shape()[0]).collect();
    let out = assemble(&records, &recipe, &[]).unwrap();
    check(
        out.channels() == 3520 && widths.iter().sum::<usize>() == 3520,
        format!("widths {widths:?} -> {} channels", out.channels()),
    )
}

fn residual_structure() -> Outcome {
    let mut adapter = build_toy_adapter(&ToySpec::default()).unwrap();
    let ids: BTreeSet<ActivationId> = enumerate_candidates(&ToySpec::default().architecture().unwrap(), &EnumerationPolicy::full())
        .unwrap()
        .ids()
        .copied()
        .collect();
    let image = Array3::from_shape_fn((3, 32, 32), |(c, i, j)| ((c * 5 + i * 3 + j) % 11) as f32 / 10.0);
    let (_, sites) = adapter
        .run_traced(&image, &ExtractionConfig::new(vec![], (32, 32)), &CaptureRequest { ids, attention_scores: false })
        .unwrap();
    let worst = sites.iter().map(|s| s.max_abs_error()).fold(0.0f32, f32::max);
    check(
        !sites.is_empty() && worst <= 1e-5,
        format!("{} residual sites, max |residual + increment - output| = {worst:.1e}", sites.len()),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 7] = [
        ("filtered-pool exactness", filtered_pool_exactness),
        ("reduction ratio", reduction_ratio),
        ("metric oracle equivalence", metric_oracle_equivalence),
        ("grammar properties", grammar_properties),
        ("end-to-end toy pipeline", end_to_end_toy_pipeline),
        ("recipe channel budget", recipe_channel_budget),
        ("residual-structure check", residual_structure),
    ];
    let mut failed = Vec::new();
    for (i, (name, run)) in criteria.iter().enumerate() {
        match run() {
            Ok(detail) => println!("PASS {} {name}: {detail}", i + 1),
            Err(detail) => {
                println!("FAIL {} {name}: {detail}", i + 1);
                failed.push(*name);
            }
        }
    }
    println!("SKIP 8 GPU reproduction: needs pretrained weights and GPU, not required at desk scale");
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
