//! Selection recipes and their assembly into one dense feature map.

use std::fmt::Write as _;

use ndarray::{s, Array3};
use serde::{Deserialize, Serialize};

use crate::catalog::{lookup_architecture, ArchitectureSpec};
use crate::error::{Error, Result};
use crate::extraction::{FeatureName, FeatureRecord, FeatureStore};
use crate::resize::{resize, ResizeMode};
use crate::textfmt::Document;

/// Store model key under which assembled features are written.
pub const ASSEMBLED_MODEL: &str = "assembled";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum TargetResolution {
    #[default]
    LargestMember,
    Explicit {
        width: usize,
        height: usize,
    },
}

impl std::fmt::Display for TargetResolution {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TargetResolution::LargestMember => f.write_str("largest_member"),
            TargetResolution::Explicit { width, height } => write!(f, "{width}x{height}"),
        }
    }
}

impl std::str::FromStr for TargetResolution {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        if s == "largest_member" {
            return Ok(TargetResolution::LargestMember);
        }
        let parsed = s
            .split_once('x')
            .and_then(|(w, h)| Some((w.parse::<usize>().ok()?, h.parse::<usize>().ok()?)));
        match parsed {
            Some((width, height)) if width > 0 && height > 0 => Ok(TargetResolution::Explicit { width, height }),
            _ => Err(format!("target must be `largest_member` or `WxH`, got `{s}`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecipeItem {
    pub model: String,
    /// An activation or the averaged cross-attention maps.
    pub feature: FeatureName,
    pub resize: ResizeMode,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionRecipe {
    pub name: String,
    pub target: TargetResolution,
    pub items: Vec<RecipeItem>,
}

/// Resolves a model name against the builtin catalog, then `extra`.
pub fn resolve_architecture(model: &str, extra: &[ArchitectureSpec]) -> Result<ArchitectureSpec> {
    if let Some(a) = extra.iter().find(|a| a.answers_to(model)) {
        return Ok(a.clone());
    }
    lookup_architecture(model)
}

/// Parses a recipe whose models must be builtin architectures.
pub fn load_recipe(source_name: &str, text: &str) -> Result<SelectionRecipe> {
    load_recipe_with(source_name, text, &[])
}

/// Parses a recipe, also accepting the models of `extra`.
pub fn load_recipe_with(source_name: &str, text: &str, extra: &[ArchitectureSpec]) -> Result<SelectionRecipe> {
    let doc = Document::parse(source_name, text)?;
    doc.reject_unknown_headers(&["name", "target"])?;
    let name = match doc.header("name")? {
        Some(h) if !h.value.is_empty() => h,
        Some(h) => return Err(doc.error(h.line, "recipe name is empty")),
        None => return Err(doc.error(1, "missing `name:` header")),
    };
    if name.value.chars().any(|c| !(c.is_ascii_alphanumeric() || "._-".contains(c))) {
        return Err(doc.error(name.line, format!("recipe name `{}` may only use [A-Za-z0-9._-]", name.value)));
    }
    let target = match doc.header("target")? {
        Some(h) => h.value.parse().map_err(|e: String| doc.error(h.line, e))?,
        None => TargetResolution::default(),
    };
    if doc.items.is_empty() {
        return Err(doc.error(name.line, "recipe has no items"));
    }
    let mut items = Vec::with_capacity(doc.items.len());
    for item in &doc.items {
        let [model, feature, options @ ..] = item.words.as_slice() else {
            return Err(doc.error(item.line, "expected `model activation-id [resize=bilinear|nearest]`"));
        };
        let arch = resolve_architecture(model, extra).map_err(|e| doc.error(item.line, e.to_string()))?;
        let feature: FeatureName = feature.parse().map_err(|e: Error| doc.error(item.line, e.to_string()))?;
        match &feature {
            FeatureName::Activation(id) => {
                arch.describe(id).map_err(|e| doc.error(item.line, e.to_string()))?;
            }
            FeatureName::AttentionMaps => {}
            FeatureName::Assembled(_) => return Err(doc.error(item.line, "recipes cannot nest assembled features")),
        }
        let mut resize = ResizeMode::default();
        for opt in options {
            match opt.split_once('=') {
                Some(("resize", v)) => resize = v.parse().map_err(|e: String| doc.error(item.line, e))?,
                _ => return Err(doc.error(item.line, format!("unknown option `{opt}`"))),
            }
        }
        items.push(RecipeItem {
            model: model.to_ascii_lowercase(),
            feature,
            resize,
        });
    }
    Ok(SelectionRecipe {
        name: name.value.clone(),
        target,
        items,
    })
}

const BUILTIN: [(&str, &str); 4] = [
    ("ours-v15.txt", include_str!("../data/recipes/ours-v15.txt")),
    ("ours-xl.txt", include_str!("../data/recipes/ours-xl.txt")),
    ("ours-xl-t.txt", include_str!("../data/recipes/ours-xl-t.txt")),
    ("ours-xl-t-complex.txt", include_str!("../data/recipes/ours-xl-t-complex.txt")),
];

pub fn builtin_recipes() -> Vec<SelectionRecipe> {
    BUILTIN
        .iter()
        .map(|(source, text)| load_recipe(source, text).expect("builtin recipe"))
        .collect()
}

pub fn builtin_recipe(name: &str) -> Result<SelectionRecipe> {
    builtin_recipes()
        .into_iter()
        .find(|r| r.name == name)
        .ok_or_else(|| Error::NotFound(format!("builtin recipe `{name}`")))
}

impl SelectionRecipe {
    pub fn to_text(&self) -> String {
        let mut out = format!("name: {}\ntarget: {}\n", self.name, self.target);
        for item in &self.items {
            let _ = write!(out, "{} {}", item.model, item.feature);
            if item.resize != ResizeMode::default() {
                let _ = write!(out, " resize=nearest");
            }
            out.push('\n');
        }
        out
    }

    /// Distinct models in first-use order.
    pub fn models(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for item in &self.items {
            if !out.contains(&item.model.as_str()) {
                out.push(&item.model);
            }
        }
        out
    }

    pub fn features_for(&self, model: &str) -> Vec<FeatureName> {
        self.items
            .iter()
            .filter(|i| i.model == model)
            .map(|i| i.feature.clone())
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelRange {
    pub model: String,
    pub feature: FeatureName,
    pub start: usize,
    pub end: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AssembledFeature {
    pub recipe: String,
    pub sample_key: String,
    /// `(C_total, H, W)`.
    pub data: Array3<f32>,
    /// Partitions `0..C_total` in recipe order.
    pub channel_index: Vec<ChannelRange>,
}

impl AssembledFeature {
    pub fn channels(&self) -> usize {
        self.data.dim().0
    }

    pub fn to_record(&self) -> Result<FeatureRecord> {
        FeatureRecord::new(
            ASSEMBLED_MODEL,
            FeatureName::Assembled(self.recipe.clone()),
            &self.sample_key,
            self.data.clone(),
        )
    }
}

/// Resizes each record to the target resolution and concatenates them
/// along channels in recipe order.
pub fn assemble(records: &[FeatureRecord], recipe: &SelectionRecipe, extra: &[ArchitectureSpec]) -> Result<AssembledFeature> {
    if records.len() != recipe.items.len() {
        return Err(Error::invalid(format!(
            "recipe {} has {} items but {} records were given",
            recipe.name,
            recipe.items.len(),
            records.len()
        )));
    }
    let sample_key = records[0].sample_key.clone();
    for (record, item) in records.iter().zip(&recipe.items) {
        if record.sample_key != sample_key {
            return Err(Error::invalid(format!(
                "records mix samples `{sample_key}` and `{}`",
                record.sample_key
            )));
        }
        if record.model != item.model || record.name != item.feature {
            return Err(Error::invalid(format!(
                "record {}/{} does not match recipe item {} {}",
                record.model, record.name, item.model, item.feature
            )));
        }
        if let FeatureName::Activation(id) = &item.feature {
            let expected = resolve_architecture(&item.model, extra)?.describe(id)?.channels as usize;
            if record.shape()[0] != expected {
                return Err(Error::shape(format!(
                    "{} {} has {} channels, the catalog expects {expected}",
                    item.model,
                    id,
                    record.shape()[0]
                )));
            }
        }
    }
    let (height, width) = match recipe.target {
        TargetResolution::Explicit { width, height } => (height, width),
        TargetResolution::LargestMember => records
            .iter()
            .map(|r| (r.shape()[1], r.shape()[2]))
            .fold((0, 0), |best, hw| if hw.0 * hw.1 > best.0 * best.1 { hw } else { best }),
    };
    let total: usize = records.iter().map(|r| r.shape()[0]).sum();
    let mut data = Array3::zeros((total, height, width));
    let mut channel_index = Vec::with_capacity(records.len());
    let mut start = 0;
    for (record, item) in records.iter().zip(&recipe.items) {
        let c = record.shape()[0];
        let resized = resize(record.data.view(), height, width, item.resize);
        data.slice_mut(s![start..start + c, .., ..]).assign(&resized);
        channel_index.push(ChannelRange {
            model: item.model.clone(),
            feature: item.feature.clone(),
            start,
            end: start + c,
        });
        start += c;
    }
    Ok(AssembledFeature {
        recipe: recipe.name.clone(),
        sample_key,
        data,
        channel_index,
    })
}

/// Reads the recipe's records for one sample and assembles them.
pub fn assemble_from_store(
    store: &FeatureStore,
    recipe: &SelectionRecipe,
    sample_key: &str,
    extra: &[ArchitectureSpec],
) -> Result<AssembledFeature> {
    let records = recipe
        .items
        .iter()
        .map(|item| store.read(&item.model, &item.feature, sample_key))
        .collect::<Result<Vec<_>>>()?;
    assemble(&records, recipe, extra)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtins_have_the_published_items() {
        let all = builtin_recipes();
        let names: Vec<&str> = all.iter().map(|r| r.name.as_str()).collect();
        assert_eq!(names, ["ours-v15", "ours-xl", "ours-xl-t", "ours-xl-t-complex"]);
        assert_eq!(all[0].items[0].feature.to_string(), "up-level1-repeat1-vit-block0-cross-q");
        assert_eq!(all[1].items[0].feature.to_string(), "up-level0-repeat0-vit-block7-out");
        assert_eq!(all[2].items.len(), 10);
        assert_eq!(all[2].models(), ["sdxl", "sd15", "playground-v2"]);
        assert!(all[3].items.iter().all(|i| i.feature != FeatureName::AttentionMaps));
        assert!(all[3].items.iter().all(|i| i.model != "sd15"));
        for r in &all {
            assert_eq!(load_recipe("again", &r.to_text()).unwrap(), *r);
        }
    }

    #[test]
    fn malformed_recipes_are_rejected() {
        let bad = [
            "target: largest_member\nsd15 up-level1-repeat2-res-out",
            "name: x\n",
            "name: x\nsd15 up-levelX-foo",
            "name: x\nsd99 up-level1-repeat2-res-out",
            "name: x\nsd15 up-level1-repeat2-res-out colour=red",
            "name: x\ntarget: 0x3\nsd15 up-level1-repeat2-res-out",
            "name: x\nsd15 up-level9-repeat2-res-out",
        ];
        for text in bad {
            assert!(matches!(load_recipe("r", text), Err(Error::Format { .. })), "{text}");
        }
    }

    fn record(model: &str, id: &str, c: usize, h: usize, w: usize) -> FeatureRecord {
        let data = Array3::from_shape_fn((c, h, w), |(k, i, j)| (k + i + j) as f32);
        FeatureRecord::new(model, id.parse().unwrap(), "s", data).unwrap()
    }

    #[test]
    fn members_are_resized_and_concatenated() {
        let recipe = load_recipe(
            "r",
            "name: pair\nsd15 up-level0-repeat0-res-out\nsd15 up-level1-repeat2-res-out resize=nearest",
        )
        .unwrap();
        let a = record("sd15", "up-level0-repeat0-res-out", 1280, 2, 2);
        let b = record("sd15", "up-level1-repeat2-res-out", 1280, 4, 4);
        let out = assemble(&[a.clone(), b.clone()], &recipe, &[]).unwrap();
        assert_eq!(out.data.dim(), (2560, 4, 4));
        assert_eq!(out.channel_index[1].start, 1280);
        assert_eq!(out.data.slice(s![1280.., .., ..]), b.data);
        assert!(assemble(&[b.clone(), a.clone()], &recipe, &[]).is_err());
        let wrong = record("sd15", "up-level0-repeat0-res-out", 4, 2, 2);
        assert!(matches!(assemble(&[wrong, b], &recipe, &[]), Err(Error::Shape(_))));
    }
}
