//! Declarative U-Net layouts.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::id::{ActivationId, BlockRole, Site, Stage};
use crate::error::{Error, Result};

/// One resolution of one stage: `repeats` ResModules, the first
/// `vit_repeats` of them followed by a ViT, then an optional sampler.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResolutionSpec {
    pub channels: u32,
    /// Latent pixels per activation pixel along each axis.
    pub divisor: u32,
    pub repeats: u32,
    /// Basic blocks per ViT; 0 when the resolution has no ViT.
    #[serde(default)]
    pub vit_blocks: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vit_repeats: Option<u32>,
    /// Block indices enumerated by default. `None` means every block.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sampled_blocks: Option<Vec<u32>>,
    #[serde(default)]
    pub sampler: bool,
}

impl ResolutionSpec {
    pub fn has_vit(&self, repeat: u32) -> bool {
        self.vit_blocks > 0 && repeat < self.vit_repeats.unwrap_or(self.repeats)
    }

    pub fn block_sampling(&self) -> Vec<u32> {
        match &self.sampled_blocks {
            Some(b) => b.clone(),
            None => (0..self.vit_blocks).collect(),
        }
    }
}

/// A module slot inside one resolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Slot {
    Repeat(u32),
    Sampler,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ModulePosition {
    pub stage: Stage,
    pub level: Option<u32>,
    pub slot: Slot,
}

impl ModulePosition {
    pub fn of(id: &ActivationId) -> Self {
        let slot = match id.site() {
            Site::Res { repeat, .. } | Site::Vit { repeat, .. } => Slot::Repeat(repeat),
            Site::Upsampler | Site::Downsampler => Slot::Sampler,
        };
        Self {
            stage: id.stage(),
            level: id.level(),
            slot,
        }
    }
}

/// An up-stage position or a whole up-stage level, written
/// `up-level1-repeat2`, `up-level1-upsampler` or `up-level2`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct UpPattern {
    pub level: u32,
    pub slot: Option<Slot>,
}

impl UpPattern {
    pub fn matches(&self, pos: &ModulePosition) -> bool {
        pos.stage == Stage::Up
            && pos.level == Some(self.level)
            && self.slot.is_none_or(|s| s == pos.slot)
    }
}

impl fmt::Display for UpPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "up-level{}", self.level)?;
        match self.slot {
            Some(Slot::Repeat(r)) => write!(f, "-repeat{r}"),
            Some(Slot::Sampler) => f.write_str("-upsampler"),
            None => Ok(()),
        }
    }
}

impl FromStr for UpPattern {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || format!("bad up-stage position `{s}`");
        let mut toks = s.split('-');
        if toks.next() != Some("up") {
            return Err(bad());
        }
        let level = toks
            .next()
            .and_then(|t| t.strip_prefix("level"))
            .and_then(|d| d.parse().ok())
            .ok_or_else(bad)?;
        let slot = match toks.next() {
            None => None,
            Some("upsampler") => Some(Slot::Sampler),
            Some(t) => Some(Slot::Repeat(
                t.strip_prefix("repeat")
                    .and_then(|d| d.parse().ok())
                    .ok_or_else(bad)?,
            )),
        };
        if toks.next().is_some() {
            return Err(bad());
        }
        Ok(Self { level, slot })
    }
}

impl Serialize for UpPattern {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for UpPattern {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?
            .parse()
            .map_err(serde::de::Error::custom)
    }
}

mod role_list {
    use super::BlockRole;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(roles: &[BlockRole], s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(roles.iter().map(|r| r.as_str()))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<BlockRole>, D::Error> {
        Vec::<String>::deserialize(d)?
            .iter()
            .map(|s| s.parse().map_err(serde::de::Error::custom))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Half {
    Early,
    Late,
    #[serde(rename = "n/a")]
    NotApplicable,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchitectureSpec {
    pub name: String,
    #[serde(default)]
    pub aliases: Vec<String>,
    /// Input pixels per latent pixel.
    pub latent_factor: u32,
    /// Up-stage positions in the later half; must be a suffix of the
    /// up-stage forward order.
    pub late_half: Vec<UpPattern>,
    /// Index of the highest-resolution up-stage level.
    pub final_level: u32,
    /// Up-stage positions left out of the published candidate pools.
    #[serde(default)]
    pub excluded: Vec<UpPattern>,
    /// Self-attention roles reserved in the later half.
    #[serde(with = "role_list")]
    pub late_self_attention: Vec<BlockRole>,
    pub down: Vec<ResolutionSpec>,
    pub mid: ResolutionSpec,
    pub up: Vec<ResolutionSpec>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActivationDescriptor {
    pub id: ActivationId,
    pub channels: u32,
    /// Spatial scale is `1 / spatial_divisor` of the input latent.
    pub spatial_divisor: u32,
    pub half: Half,
    pub is_increment: bool,
    pub is_final_resolution: bool,
    pub excluded: bool,
}

impl ActivationDescriptor {
    /// `(channels, height, width)` for a latent of the given size. Token
    /// tensors (cross-attention keys/values) report `(channels, tokens, 1)`
    /// and need the token count instead.
    pub fn dense_shape(&self, latent_h: usize, latent_w: usize) -> [usize; 3] {
        let d = self.spatial_divisor as usize;
        [self.channels as usize, latent_h / d, latent_w / d]
    }
}

const SD15: &str = include_str!("../../data/archs/sd15.toml");
const SDXL: &str = include_str!("../../data/archs/sdxl.toml");

/// The embedded layouts: `sd15` and `sdxl` (which `playground-v2` aliases).
pub fn builtin_architectures() -> Vec<ArchitectureSpec> {
    [("sd15.toml", SD15), ("sdxl.toml", SDXL)]
        .into_iter()
        .map(|(name, text)| ArchitectureSpec::from_toml(name, text).expect("builtin architecture"))
        .collect()
}

/// Looks up a builtin by name or alias. An alias yields the same layout
/// under the alias name.
pub fn lookup_architecture(name: &str) -> Result<ArchitectureSpec> {
    let name = name.to_ascii_lowercase();
    for mut arch in builtin_architectures() {
        if arch.name == name {
            return Ok(arch);
        }
        if arch.aliases.iter().any(|a| *a == name) {
            arch.aliases.retain(|a| *a != name);
            arch.aliases.push(std::mem::replace(&mut arch.name, name));
            arch.aliases.sort();
            return Ok(arch);
        }
    }
    Err(Error::NotFound(format!("architecture `{name}`")))
}

impl ArchitectureSpec {
    pub fn from_toml(source_name: &str, text: &str) -> Result<Self> {
        let arch: ArchitectureSpec = toml::from_str(text).map_err(|e| Error::Format {
            source_name: source_name.to_string(),
            line: e
                .span()
                .map(|s| text[..s.start].lines().count().max(1))
                .unwrap_or(0),
            message: e.message().to_string(),
        })?;
        arch.validate()?;
        Ok(arch)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("architecture serializes")
    }

    /// Same layout, ignoring name and aliases.
    pub fn structurally_eq(&self, other: &Self) -> bool {
        let strip = |a: &Self| Self {
            name: String::new(),
            aliases: Vec::new(),
            ..a.clone()
        };
        strip(self) == strip(other)
    }

    pub fn answers_to(&self, name: &str) -> bool {
        self.name == name || self.aliases.iter().any(|a| a == name)
    }

    pub fn resolution(&self, stage: Stage, level: Option<u32>) -> Option<&ResolutionSpec> {
        match (stage, level) {
            (Stage::Mid, None) => Some(&self.mid),
            (Stage::Down, Some(l)) => self.down.get(l as usize),
            (Stage::Up, Some(l)) => self.up.get(l as usize),
            _ => None,
        }
    }

    pub fn max_divisor(&self) -> u32 {
        self.down
            .iter()
            .chain(std::iter::once(&self.mid))
            .chain(&self.up)
            .map(|r| r.divisor)
            .max()
            .unwrap_or(1)
    }

    pub fn has_vit(&self) -> bool {
        self.down
            .iter()
            .chain(std::iter::once(&self.mid))
            .chain(&self.up)
            .any(|r| r.vit_blocks > 0)
    }

    /// Up-stage module positions in forward order.
    pub fn up_positions(&self) -> Vec<ModulePosition> {
        let mut out = Vec::new();
        for (level, res) in self.up.iter().enumerate() {
            let level = Some(level as u32);
            for r in 0..res.repeats {
                out.push(ModulePosition {
                    stage: Stage::Up,
                    level,
                    slot: Slot::Repeat(r),
                });
            }
            if res.sampler {
                out.push(ModulePosition {
                    stage: Stage::Up,
                    level,
                    slot: Slot::Sampler,
                });
            }
        }
        out
    }

    pub fn half_of(&self, pos: &ModulePosition) -> Half {
        if pos.stage != Stage::Up {
            Half::NotApplicable
        } else if self.late_half.iter().any(|p| p.matches(pos)) {
            Half::Late
        } else {
            Half::Early
        }
    }

    pub fn is_excluded(&self, pos: &ModulePosition) -> bool {
        self.excluded.iter().any(|p| p.matches(pos))
    }

    pub fn is_final(&self, pos: &ModulePosition) -> bool {
        pos.stage == Stage::Up && pos.level == Some(self.final_level)
    }

    /// Describes an addressable activation, checking that it exists in
    /// this layout. Block sampling does not restrict addressability.
    pub fn describe(&self, id: &ActivationId) -> Result<ActivationDescriptor> {
        let missing = |what: &str| Error::config(format!("{id} is not addressable in {}: {what}", self.name));
        let res = self
            .resolution(id.stage(), id.level())
            .ok_or_else(|| missing("no such level"))?;
        let mut divisor = res.divisor;
        match id.site() {
            Site::Res { repeat, .. } => {
                if repeat >= res.repeats {
                    return Err(missing("no such repeat"));
                }
            }
            Site::Vit { repeat, block } => {
                if repeat >= res.repeats || !res.has_vit(repeat) {
                    return Err(missing("no ViT at this repeat"));
                }
                if let Some((b, _)) = block {
                    if b >= res.vit_blocks {
                        return Err(missing("no such block"));
                    }
                }
            }
            Site::Upsampler => {
                if !res.sampler {
                    return Err(missing("no upsampler"));
                }
                divisor /= 2;
            }
            Site::Downsampler => {
                if !res.sampler {
                    return Err(missing("no downsampler"));
                }
                divisor *= 2;
            }
        }
        let pos = ModulePosition::of(id);
        Ok(ActivationDescriptor {
            id: *id,
            channels: res.channels,
            spatial_divisor: divisor,
            half: self.half_of(&pos),
            is_increment: id.is_increment(),
            is_final_resolution: self.is_final(&pos),
            excluded: self.is_excluded(&pos),
        })
    }

    /// Latent `(height, width)` for an input image, requiring every
    /// resolution to divide it exactly.
    pub fn latent_dims(&self, width: usize, height: usize) -> Result<(usize, usize)> {
        let step = (self.latent_factor * self.max_divisor()) as usize;
        if width == 0 || height == 0 || width % step != 0 || height % step != 0 {
            return Err(Error::config(format!(
                "input {width}x{height} must be a positive multiple of {step} for {}",
                self.name
            )));
        }
        let f = self.latent_factor as usize;
        Ok((height / f, width / f))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::config(format!("{}: {msg}", self.name)));
        if self.name.is_empty() {
            return bad("empty name".into());
        }
        if self.latent_factor == 0 {
            return bad("latent_factor must be positive".into());
        }
        if self.up.is_empty() {
            return bad("up stage has no resolutions".into());
        }
        let all = self
            .down
            .iter()
            .map(|r| ("down", r))
            .chain(std::iter::once(("mid", &self.mid)))
            .chain(self.up.iter().map(|r| ("up", r)));
        for (stage, r) in all {
            if r.channels == 0 || r.divisor == 0 {
                return bad(format!("{stage}: channel width and divisor must be positive"));
            }
            if r.repeats == 0 {
                return bad(format!("{stage}: a resolution needs at least one repeat"));
            }
            if r.vit_repeats.is_some_and(|v| v > r.repeats) {
                return bad(format!("{stage}: vit_repeats exceeds repeats"));
            }
            if let Some(s) = &r.sampled_blocks {
                let set: BTreeSet<_> = s.iter().collect();
                if set.len() != s.len() || s.iter().any(|&b| b >= r.vit_blocks) {
                    return bad(format!("{stage}: sampled_blocks must be distinct block indices"));
                }
            }
        }
        if self.mid.sampler {
            return bad("the mid stage has no sampler".into());
        }
        if self.up.iter().any(|r| r.sampler && r.divisor < 2) {
            return bad("an upsampler needs a divisor of at least 2".into());
        }
        if self.final_level as usize >= self.up.len() {
            return bad(format!("final_level {} out of range", self.final_level));
        }
        let positions = self.up_positions();
        for p in self.late_half.iter().chain(&self.excluded) {
            if !positions.iter().any(|pos| p.matches(pos)) {
                return bad(format!("position {p} does not exist"));
            }
        }
        let first_late = positions
            .iter()
            .position(|p| self.half_of(p) == Half::Late)
            .unwrap_or(positions.len());
        if positions[first_late..]
            .iter()
            .any(|p| self.half_of(p) != Half::Late)
        {
            return bad("late_half must be a suffix of the up-stage forward order".into());
        }
        if positions
            .iter()
            .any(|p| self.is_final(p) && self.half_of(p) != Half::Late)
        {
            return bad("the final resolution must lie in the later half".into());
        }
        if let Some(r) = self.late_self_attention.iter().find(|r| !r.is_self_attention()) {
            return bad(format!("late_self_attention lists non-self-attention role {r}"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn id(s: &str) -> ActivationId {
        s.parse().unwrap()
    }

    #[test]
    fn sdxl_has_three_up_resolutions() {
        let a = lookup_architecture("sdxl").unwrap();
        assert_eq!(a.up.len(), 3);
        assert_eq!(a.up[0].vit_blocks, 10);
        assert_eq!(a.up[1].vit_blocks, 2);
        assert_eq!(a.up[2].vit_blocks, 0);
        assert_eq!(a.up[0].sampled_blocks.as_deref(), Some(&[0, 1, 3, 5, 7, 9][..]));
    }

    #[test]
    fn sd15_has_four_up_resolutions_lowest_vit_free() {
        let a = lookup_architecture("sd15").unwrap();
        assert_eq!(a.up.len(), 4);
        assert_eq!(a.up[0].vit_blocks, 0);
        assert!(a.up[1..].iter().all(|r| r.vit_blocks == 1));
    }

    #[test]
    fn playground_aliases_sdxl() {
        let p = lookup_architecture("playground-v2").unwrap();
        let x = lookup_architecture("sdxl").unwrap();
        assert_eq!(p.name, "playground-v2");
        assert!(p.structurally_eq(&x));
        assert!(lookup_architecture("dit-xl").is_err());
    }

    #[test]
    fn descriptor_channels_and_scale() {
        let a = lookup_architecture("sd15").unwrap();
        let d = a.describe(&id("up-level1-repeat1-vit-block0-cross-q")).unwrap();
        assert_eq!((d.channels, d.spatial_divisor), (1280, 4));
        assert_eq!(d.half, Half::Early);
        let d = a.describe(&id("up-level2-upsampler-out")).unwrap();
        assert_eq!((d.channels, d.spatial_divisor), (640, 1));
        assert_eq!(d.half, Half::Late);
        let d = a.describe(&id("up-level3-repeat0-vit-block0-self-k")).unwrap();
        assert!(d.is_final_resolution);
        assert_eq!(d.dense_shape(64, 64), [320, 64, 64]);
        let d = a.describe(&id("down-level1-downsampler-out")).unwrap();
        assert_eq!(d.spatial_divisor, 4);
        assert_eq!(d.half, Half::NotApplicable);
    }

    #[test]
    fn unaddressable_ids_are_rejected() {
        let a = lookup_architecture("sdxl").unwrap();
        for bad in [
            "up-level2-repeat0-vit-out",
            "up-level3-repeat0-res-out",
            "up-level0-repeat3-res-out",
            "up-level1-repeat0-vit-block2-out",
            "up-level2-upsampler-out",
            "mid-repeat1-vit-out",
            "down-level2-downsampler-out",
        ] {
            assert!(a.describe(&id(bad)).is_err(), "{bad}");
        }
        assert!(a.describe(&id("mid-repeat0-vit-block9-self-q")).is_ok());
    }

    #[test]
    fn late_half_must_be_suffix() {
        let mut a = lookup_architecture("sd15").unwrap();
        a.late_half = vec!["up-level1-repeat0".parse().unwrap(), "up-level3".parse().unwrap()];
        assert!(a.validate().is_err());
    }

    #[test]
    fn toml_round_trip() {
        for a in builtin_architectures() {
            let back = ArchitectureSpec::from_toml("x", &a.to_toml()).unwrap();
            assert_eq!(a, back);
        }
    }

    #[test]
    fn invalid_files_report_errors() {
        assert!(ArchitectureSpec::from_toml("x", "name = 3").is_err());
        let mut a = lookup_architecture("sdxl").unwrap();
        a.up[0].sampled_blocks = Some(vec![0, 11]);
        assert!(a.validate().is_err());
        let mut a = lookup_architecture("sdxl").unwrap();
        a.mid.channels = 0;
        assert!(a.validate().is_err());
    }

    #[test]
    fn latent_dims_require_divisibility() {
        let a = lookup_architecture("sd15").unwrap();
        assert_eq!(a.latent_dims(512, 512).unwrap(), (64, 64));
        assert!(a.latent_dims(500, 512).is_err());
    }
}
