use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use diffeat::assembly::{assemble_from_store, ASSEMBLED_MODEL};
use diffeat::catalog::enumerate_candidates;
use diffeat::evaluation::{
    label_scarce_protocol, pck_report, predict, train_refiner, CorrespondenceSample, LabelScarceConfig, PckReport,
    RefinerConfig,
};
use diffeat::extraction::{extract_features_sharded, FeatureName, FeatureStore};
use diffeat::probing::{probe_feature, run_comparison};
use diffeat::toybackbone::{build_toy_adapter, ToySpec};
use diffeat::visualize::pca_rgb;
use serde::Serialize;

use crate::inputs::{self, Dataset};
use crate::{AssembleArgs, Command, CompareArgs, EvaluateArgs, ExtractArgs, PoolArgs, Task, VisualizeArgs};

pub fn run(command: Command, out: &mut impl Write) -> Result<()> {
    match command {
        Command::Catalog(a) => catalog(&a, out),
        Command::Filter(a) => filter(&a, out),
        Command::Extract(a) => extract(&a, out),
        Command::Compare(a) => compare(&a, out),
        Command::Assemble(a) => assemble(&a, out),
        Command::Evaluate(a) => evaluate(&a, out),
        Command::Visualize(a) => visualize(&a, out),
    }
}

fn save(dir: &Path, file: &str, contents: &str) -> Result<PathBuf> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join(file);
    fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}

fn json(value: &impl Serialize) -> Result<String> {
    Ok(serde_json::to_string_pretty(value)? + "\n")
}

fn existing_store(path: &Path) -> Result<FeatureStore> {
    ensure!(path.is_dir(), "feature store {} does not exist", path.display());
    Ok(FeatureStore::open(path)?)
}

fn catalog(a: &PoolArgs, out: &mut impl Write) -> Result<()> {
    let arch = inputs::architecture(&a.model)?;
    let policy = inputs::policy(&a.policy, a.levels.as_deref(), &arch)?;
    let text = enumerate_candidates(&arch, &policy)?.to_text();
    write!(out, "{text}")?;
    if let Some(dir) = &a.out {
        save(dir, &format!("catalog-{}.txt", arch.name), &text)?;
    }
    Ok(())
}

fn filter(a: &PoolArgs, out: &mut impl Write) -> Result<()> {
    let arch = inputs::architecture(&a.model)?;
    let policy = inputs::policy(&a.policy, a.levels.as_deref(), &arch)?;
    let config = inputs::filter_config(a.filter_config.as_deref(), &arch)?;
    let (pool, report) = inputs::filtered_pool(&arch, &policy, &config)?;
    let text = format!("{}\n{}", pool.to_text(), report.render_text());
    write!(out, "{text}")?;
    if let Some(dir) = &a.out {
        save(dir, &format!("filter-{}.txt", arch.name), &text)?;
        save(dir, &format!("filter-{}.json", arch.name), &json(&report.to_record())?)?;
    }
    Ok(())
}

fn toy_spec(model: &str) -> Result<ToySpec> {
    let spec = ToySpec::default();
    if !model.eq_ignore_ascii_case(&spec.name) {
        inputs::architecture(model)?;
        bail!("no runnable backbone for `{model}`: pretrained weights are not bundled, use `--model {}`", spec.name);
    }
    Ok(spec)
}

fn extract(a: &ExtractArgs, out: &mut impl Write) -> Result<()> {
    let spec = toy_spec(&a.model)?;
    let arch = spec.architecture()?;
    let mut config = inputs::extraction_config(
        a.extraction.extraction_config.as_deref(),
        a.extraction.timestep,
        a.extraction.prompt.as_deref(),
        a.extraction.seed,
    )?;
    let mut names: Vec<FeatureName> = if let Some(r) = &a.recipe {
        ensure!(a.features.is_empty(), "give either --recipe or --feature, not both");
        let recipe = inputs::recipe(r)?;
        let names = recipe.features_for(&arch.name);
        ensure!(!names.is_empty(), "recipe {} has no items for model {}", recipe.name, arch.name);
        names
    } else if !a.features.is_empty() {
        a.features.iter().map(|f| f.parse()).collect::<Result<_, _>>()?
    } else {
        let policy = inputs::policy("universe", None, &arch)?;
        let filters = inputs::filter_config(a.filter_config.as_deref(), &arch)?;
        let (pool, _) = inputs::filtered_pool(&arch, &policy, &filters)?;
        pool.ids().map(|id| FeatureName::Activation(*id)).collect()
    };
    if let Some(i) = names.iter().position(|n| *n == FeatureName::AttentionMaps) {
        names.remove(i);
        config.capture_attention_maps = true;
    }
    for n in &names {
        match n {
            FeatureName::Activation(id) => config.capture_set.push(*id),
            other => bail!("{other} cannot be extracted; build it with `assemble`"),
        }
    }
    let data = Dataset::parse(&a.data.dataset, a.data.images)?;
    let store = FeatureStore::open(&a.store)?;
    let summary =
        extract_features_sharded(&data.images(), || build_toy_adapter(&spec), a.common.workers.max(1), &config, &store)?;
    let text = summary.render_text();
    write!(out, "{text}")?;
    save(&a.common.out, &format!("extract-{}.txt", arch.name), &text)?;
    Ok(())
}

fn compare(a: &CompareArgs, out: &mut impl Write) -> Result<()> {
    let arch = inputs::architecture(&a.model)?;
    let policy = inputs::policy("universe", None, &arch)?;
    let filters = inputs::filter_config(a.filter_config.as_deref(), &arch)?;
    let (pool, _) = inputs::filtered_pool(&arch, &policy, &filters)?;
    let probe = inputs::probe_config(a.probe_config.as_deref(), a.seed)?;
    let train = a.train.unwrap_or(a.images / 3);
    let datasets = a
        .datasets
        .iter()
        .map(|d| Ok(Dataset::segmentation(d, a.images)?.probe_dataset(train)?))
        .collect::<Result<Vec<_>>>()?;
    let store = existing_store(&a.store)?;
    let report = run_comparison(&arch.name, &pool, &store, &datasets, &probe, a.common.workers.max(1))?;
    let text = report.render_text();
    write!(out, "{text}")?;
    save(&a.common.out, &format!("ranking-{}.txt", arch.name), &text)?;
    save(&a.common.out, &format!("ranking-{}.json", arch.name), &report.to_json())?;
    Ok(())
}

fn assemble(a: &AssembleArgs, out: &mut impl Write) -> Result<()> {
    let recipe = inputs::recipe(&a.recipe)?;
    let extra = inputs::extra_architectures()?;
    let data = Dataset::parse(&a.data.dataset, a.data.images)?;
    let store = existing_store(&a.store)?;
    let mut text = recipe.to_text();
    let mut index = None;
    let mut written = 0;
    for (key, _) in data.images() {
        let feature = assemble_from_store(&store, &recipe, &key, &extra).with_context(|| format!("sample {key}"))?;
        store.write(&feature.to_record()?)?;
        written += 1;
        index.get_or_insert((feature.channels(), feature.channel_index));
    }
    if let Some((channels, ranges)) = index {
        text.push_str(&format!("\n{channels} channels\n"));
        for r in ranges {
            text.push_str(&format!("  {}..{} {} {}\n", r.start, r.end, r.model, r.feature));
        }
    }
    text.push_str(&format!("{written} samples assembled as {}\n", FeatureName::Assembled(recipe.name.clone())));
    write!(out, "{text}")?;
    save(&a.common.out, &format!("assemble-{}.txt", recipe.name), &text)?;
    Ok(())
}

fn pck_text(label: &str, r: &PckReport) -> String {
    format!(
        "{label}: PCK@{:.2} img {:.2} bbox {:.2}\n",
        r.img.alpha,
        r.img.pck * 100.0,
        r.bbox.pck * 100.0
    )
}

#[derive(Serialize)]
struct CorrespondenceReport {
    feature: String,
    evaluated_pairs: usize,
    training_pairs: usize,
    unrefined: PckReport,
    refined: Option<PckReport>,
}

#[derive(Serialize)]
struct SegmentationReport {
    feature: String,
    dataset: String,
    train: usize,
    test: usize,
    score: f64,
    per_class: Vec<Option<f64>>,
}

fn evaluate(a: &EvaluateArgs, out: &mut impl Write) -> Result<()> {
    let feature: FeatureName = a.feature.parse()?;
    let model = match feature {
        FeatureName::Assembled(_) => ASSEMBLED_MODEL.to_string(),
        _ => a.model.clone(),
    };
    let store = existing_store(&a.store)?;
    let (stem, text, report) = match a.task {
        Task::Correspondence => {
            let pairs = Dataset::correspondence(&a.data.dataset, a.data.images)?;
            let samples = pairs
                .iter()
                .map(|p| {
                    Ok(CorrespondenceSample {
                        pair: p.pair.clone(),
                        source: store.read(&model, &feature, &p.source_key())?.data,
                        target: store.read(&model, &feature, &p.target_key())?.data,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let training = if a.refine { a.train.unwrap_or(samples.len() / 2) } else { 0 };
            ensure!(training < samples.len(), "{training} training pairs leave nothing to evaluate");
            let (fit, test) = samples.split_at(training);
            let test_pairs: Vec<_> = test.iter().map(|s| s.pair.clone()).collect();
            let unrefined = pck_report(&predict(test, None)?, &test_pairs, a.alpha)?;
            let mut text = format!("feature: {feature}\npairs: {}\n", test.len());
            text.push_str(&pck_text("unrefined", &unrefined));
            let refined = if a.refine {
                ensure!(training > 0, "refinement needs at least one training pair");
                let config = RefinerConfig {
                    seed: a.seed.unwrap_or(0),
                    ..RefinerConfig::default()
                };
                let refiner = train_refiner(fit, &config)?;
                let r = pck_report(&predict(test, Some(&refiner))?, &test_pairs, a.alpha)?;
                text.push_str(&pck_text("refined", &r));
                Some(r)
            } else {
                None
            };
            let report = CorrespondenceReport {
                feature: feature.to_string(),
                evaluated_pairs: test.len(),
                training_pairs: training,
                unrefined,
                refined,
            };
            ("correspondence", text, json(&report)?)
        }
        Task::Segmentation => {
            let set = Dataset::segmentation(&a.data.dataset, a.data.images)?;
            let probe = inputs::probe_config(a.probe_config.as_deref(), a.seed)?;
            let dataset = set.probe_dataset(a.train.unwrap_or(a.data.images / 3))?;
            let result = probe_feature(&store, &model, &feature, &dataset, &probe)?;
            let mut text = format!(
                "feature: {feature}\ndataset: {}\ntrain: {} test: {}\nmIoU: {:.2}\n",
                set.name,
                dataset.train.len(),
                dataset.test.len(),
                result.score * 100.0
            );
            for (c, iou) in result.per_class.iter().enumerate() {
                match iou {
                    Some(v) => text.push_str(&format!("  class {c}: {:.2}\n", v * 100.0)),
                    None => text.push_str(&format!("  class {c}: absent\n")),
                }
            }
            let report = SegmentationReport {
                feature: feature.to_string(),
                dataset: set.name.clone(),
                train: dataset.train.len(),
                test: dataset.test.len(),
                score: result.score,
                per_class: result.per_class,
            };
            ("segmentation", text, json(&report)?)
        }
        Task::LabelScarce => {
            let set = Dataset::segmentation(&a.data.dataset, a.data.images)?;
            let probe = inputs::probe_config(a.probe_config.as_deref(), a.seed)?;
            let config = LabelScarceConfig {
                train_images: a.train.unwrap_or(LabelScarceConfig::default().train_images),
                splits: a.splits,
                seed: a.seed.unwrap_or(0),
                ..LabelScarceConfig::default()
            };
            let report =
                label_scarce_protocol(&store, &model, &feature, &set.name, set.classes, &set.labeled(), &probe, &config)?;
            ("label-scarce", report.render_text(), json(&report)?)
        }
    };
    write!(out, "{text}")?;
    save(&a.common.out, &format!("{stem}.txt"), &text)?;
    save(&a.common.out, &format!("{stem}.json"), &report)?;
    Ok(())
}

fn visualize(a: &VisualizeArgs, out: &mut impl Write) -> Result<()> {
    let feature: FeatureName = a.feature.parse()?;
    let model = match feature {
        FeatureName::Assembled(_) => ASSEMBLED_MODEL,
        _ => a.model.as_str(),
    };
    let store = existing_store(&a.store)?;
    let record = store.read(model, &feature, &a.sample)?;
    let rgb = pca_rgb(record.data.view());
    let (h, w, _) = rgb.dim();
    let pixels: Vec<u8> = rgb.iter().copied().collect();
    let image = image::RgbImage::from_raw(w as u32, h as u32, pixels).context("feature map has no pixels")?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let name = format!("{}-{}.png", feature.to_string().replace(':', "."), a.sample);
    let path = a.out.join(name);
    image.save(&path).with_context(|| format!("writing {}", path.display()))?;
    writeln!(out, "{}", path.display())?;
    Ok(())
}
