use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use diffeat::assembly::{builtin_recipe, load_recipe_with, resolve_architecture, SelectionRecipe};
use diffeat::catalog::{enumerate_candidates, ArchitectureSpec, CandidatePool, EnumerationPolicy};
use diffeat::datasets::{synthetic_correspondence, synthetic_segmentation, CorrespondencePair, SegmentationSet};
use diffeat::extraction::{ExtractionConfig, Image};
use diffeat::filtering::{apply_qualitative_filters, FilterConfig, FilterReport};
use diffeat::probing::ProbeConfig;
use diffeat::toybackbone::ToySpec;
use serde::Deserialize;

pub const SYNTHETIC_SIZE: (usize, usize) = (32, 32);
const DATA_SEED: u64 = 0;
const KEYPOINTS: usize = 10;

/// Builtin layouts plus the toy backbone's.
pub fn architecture(model: &str) -> Result<ArchitectureSpec> {
    let toy = ToySpec::default().architecture()?;
    Ok(resolve_architecture(model, &[toy])?)
}

pub fn extra_architectures() -> Result<Vec<ArchitectureSpec>> {
    Ok(vec![ToySpec::default().architecture()?])
}

pub fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

pub fn policy(name: &str, levels: Option<&[u32]>, arch: &ArchitectureSpec) -> Result<EnumerationPolicy> {
    let policy = EnumerationPolicy::by_name(name, arch)?;
    Ok(match levels {
        Some(l) => policy.with_levels(l.iter().copied()),
        None => policy,
    })
}

pub fn filter_config(path: Option<&Path>, arch: &ArchitectureSpec) -> Result<FilterConfig> {
    let Some(path) = path else {
        return Ok(FilterConfig::for_architecture(arch));
    };
    let config = FilterConfig::parse(&path.display().to_string(), &read(path)?)?;
    if !arch.answers_to(&config.architecture) {
        bail!("filter config {} targets `{}`, not `{}`", path.display(), config.architecture, arch.name);
    }
    Ok(config)
}

pub fn filtered_pool(
    arch: &ArchitectureSpec,
    policy: &EnumerationPolicy,
    filters: &FilterConfig,
) -> Result<(CandidatePool, FilterReport)> {
    let pool = enumerate_candidates(arch, policy)?;
    Ok(apply_qualitative_filters(&pool, filters)?)
}

pub fn probe_config(path: Option<&Path>, seed: Option<u64>) -> Result<ProbeConfig> {
    let mut config = match path {
        Some(p) => ProbeConfig::from_toml(&read(p)?).with_context(|| format!("in {}", p.display()))?,
        None => ProbeConfig::default(),
    };
    if let Some(s) = seed {
        config.seed = s;
    }
    config.validate()?;
    Ok(config)
}

/// Extraction settings: builtin defaults, then the file, then flags.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ExtractionFile {
    timestep: Option<usize>,
    prompt: Option<String>,
    noise_seed: Option<u64>,
    input_size: Option<(usize, usize)>,
}

pub fn extraction_config(
    path: Option<&Path>,
    timestep: Option<usize>,
    prompt: Option<&str>,
    seed: Option<u64>,
) -> Result<ExtractionConfig> {
    let file: ExtractionFile = match path {
        Some(p) => toml::from_str(&read(p)?).with_context(|| format!("parsing {}", p.display()))?,
        None => ExtractionFile::default(),
    };
    let mut config = ExtractionConfig::new(vec![], file.input_size.unwrap_or(SYNTHETIC_SIZE));
    if let Some(t) = timestep.or(file.timestep) {
        config.timestep = t;
    }
    if let Some(p) = prompt.map(str::to_string).or(file.prompt) {
        config.prompt = p;
    }
    if let Some(s) = seed.or(file.noise_seed) {
        config.noise_seed = s;
    }
    Ok(config)
}

pub fn recipe(name_or_path: &str) -> Result<SelectionRecipe> {
    let path = Path::new(name_or_path);
    if path.is_file() {
        return Ok(load_recipe_with(name_or_path, &read(path)?, &extra_architectures()?)?);
    }
    builtin_recipe(name_or_path).with_context(|| format!("`{name_or_path}` is neither a recipe file nor a builtin recipe"))
}

pub enum Dataset {
    Segmentation(SegmentationSet),
    Correspondence(Vec<CorrespondencePair>),
}

impl Dataset {
    pub fn parse(spec: &str, count: usize) -> Result<Self> {
        let Some(name) = spec.strip_prefix("synthetic:") else {
            bail!("dataset `{spec}`: expected synthetic:simple, synthetic:complex or synthetic:correspondence");
        };
        Ok(match name {
            "correspondence" => {
                Dataset::Correspondence(synthetic_correspondence(count, SYNTHETIC_SIZE, KEYPOINTS, DATA_SEED)?)
            }
            _ => Dataset::Segmentation(synthetic_segmentation(name, count, SYNTHETIC_SIZE, DATA_SEED)?),
        })
    }

    pub fn segmentation(spec: &str, count: usize) -> Result<SegmentationSet> {
        match Self::parse(spec, count)? {
            Dataset::Segmentation(s) => Ok(s),
            Dataset::Correspondence(_) => bail!("dataset `{spec}` has no segmentation labels"),
        }
    }

    pub fn correspondence(spec: &str, count: usize) -> Result<Vec<CorrespondencePair>> {
        match Self::parse(spec, count)? {
            Dataset::Correspondence(p) => Ok(p),
            Dataset::Segmentation(_) => bail!("dataset `{spec}` has no keypoint pairs"),
        }
    }

    pub fn images(&self) -> Vec<(String, Image)> {
        match self {
            Dataset::Segmentation(s) => s.images(),
            Dataset::Correspondence(pairs) => pairs
                .iter()
                .flat_map(|p| [(p.source_key(), p.source.clone()), (p.target_key(), p.target.clone())])
                .collect(),
        }
    }
}
