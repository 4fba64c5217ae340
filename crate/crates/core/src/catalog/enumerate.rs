//! Candidate enumeration.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::arch::{ActivationDescriptor, ArchitectureSpec, Half, ModulePosition};
use super::id::{ActivationId, BlockRole, Stage};
use crate::error::{Error, Result};

/// What to enumerate at one module: a ResModule output or increment, a ViT
/// output, one block role, or a sampler output.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum RoleSlot {
    ResOut,
    ResInc,
    VitOut,
    Block(BlockRole),
    Upsampler,
    Downsampler,
}

/// Regions of the network that a policy can treat differently. Up-stage
/// zones are resolved with precedence excluded > final > late > early.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Zone {
    Down,
    Mid,
    UpEarly,
    UpLate,
    UpFinal,
    UpExcluded,
}

impl Zone {
    pub const ALL: [Zone; 6] = [
        Zone::Down,
        Zone::Mid,
        Zone::UpEarly,
        Zone::UpLate,
        Zone::UpFinal,
        Zone::UpExcluded,
    ];

    pub fn of(arch: &ArchitectureSpec, pos: &ModulePosition) -> Zone {
        match pos.stage {
            Stage::Down => Zone::Down,
            Stage::Mid => Zone::Mid,
            Stage::Up if arch.is_excluded(pos) => Zone::UpExcluded,
            Stage::Up if arch.is_final(pos) => Zone::UpFinal,
            Stage::Up => match arch.half_of(pos) {
                Half::Late => Zone::UpLate,
                _ => Zone::UpEarly,
            },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum BlockSampling {
    /// The architecture's per-ViT sampling set.
    #[default]
    Architecture,
    All,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EnumerationPolicy {
    pub name: String,
    pub zones: BTreeMap<Zone, BTreeSet<RoleSlot>>,
    /// Restricts down- and up-stage levels; `None` keeps every level.
    pub levels: Option<BTreeSet<u32>>,
    pub blocks: BlockSampling,
}

impl EnumerationPolicy {
    pub fn empty() -> Self {
        Self {
            name: "empty".into(),
            zones: BTreeMap::new(),
            levels: None,
            blocks: BlockSampling::Architecture,
        }
    }

    /// Same role set in every zone.
    pub fn uniform(name: &str, slots: impl IntoIterator<Item = RoleSlot>) -> Self {
        let slots: BTreeSet<_> = slots.into_iter().collect();
        Self {
            name: name.into(),
            zones: Zone::ALL.iter().map(|z| (*z, slots.clone())).collect(),
            levels: None,
            blocks: BlockSampling::Architecture,
        }
    }

    /// The pre-filter universe: ResModule outputs and increments, ViT
    /// outputs, self-attention q/k/v, cross-attention queries and block
    /// outputs over the sampled blocks, and every sampler output. Counts
    /// 279 candidates on SDXL.
    pub fn universe() -> Self {
        use BlockRole::*;
        let mut slots = vec![RoleSlot::ResInc, RoleSlot::ResOut, RoleSlot::VitOut];
        slots.extend([SelfQ, SelfK, SelfV, CrossQ, Out].map(RoleSlot::Block));
        slots.extend([RoleSlot::Upsampler, RoleSlot::Downsampler]);
        Self::uniform("universe", slots)
    }

    /// Every dense role over every block.
    pub fn full() -> Self {
        let mut slots = vec![RoleSlot::ResInc, RoleSlot::ResOut, RoleSlot::VitOut];
        slots.extend(BlockRole::ALL.into_iter().filter(|r| r.is_dense()).map(RoleSlot::Block));
        slots.extend([RoleSlot::Upsampler, RoleSlot::Downsampler]);
        let mut p = Self::uniform("full", slots);
        p.blocks = BlockSampling::All;
        p
    }

    /// The role sets of the reference rankings, zone by zone:
    /// inter-module outputs and cross-attention queries in the early half,
    /// plus the architecture's reserved self-attention roles in the later
    /// half, and only those at the final resolution.
    pub fn published(arch: &ArchitectureSpec) -> Self {
        let clean = [
            RoleSlot::ResOut,
            RoleSlot::Block(BlockRole::CrossQ),
            RoleSlot::Block(BlockRole::Out),
            RoleSlot::VitOut,
            RoleSlot::Upsampler,
        ];
        let reserved = arch.late_self_attention.iter().map(|r| RoleSlot::Block(*r));
        let mut zones = BTreeMap::new();
        zones.insert(Zone::UpEarly, clean.into_iter().collect());
        zones.insert(Zone::UpLate, clean.into_iter().chain(reserved.clone()).collect());
        zones.insert(Zone::UpFinal, reserved.collect());
        Self {
            name: "published".into(),
            zones,
            levels: None,
            blocks: BlockSampling::Architecture,
        }
    }

    pub fn by_name(name: &str, arch: &ArchitectureSpec) -> Result<Self> {
        match name {
            "universe" => Ok(Self::universe()),
            "full" => Ok(Self::full()),
            "published" => Ok(Self::published(arch)),
            "empty" => Ok(Self::empty()),
            _ => Err(Error::config(format!("unknown enumeration policy `{name}`"))),
        }
    }

    pub fn with_levels(mut self, levels: impl IntoIterator<Item = u32>) -> Self {
        self.levels = Some(levels.into_iter().collect());
        self
    }

    pub fn only_stages(mut self, stages: &[Stage]) -> Self {
        self.zones.retain(|z, _| {
            let stage = match z {
                Zone::Down => Stage::Down,
                Zone::Mid => Stage::Mid,
                _ => Stage::Up,
            };
            stages.contains(&stage)
        });
        self
    }

    fn describe(&self) -> String {
        let mut s = format!("policy={}", self.name);
        if let Some(levels) = &self.levels {
            let l: Vec<_> = levels.iter().map(|l| l.to_string()).collect();
            s.push_str(&format!(" levels={}", l.join(",")));
        }
        if self.blocks == BlockSampling::All {
            s.push_str(" blocks=all");
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidatePool {
    pub architecture: String,
    pub entries: Vec<ActivationDescriptor>,
    pub provenance: String,
}

impl CandidatePool {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &ActivationId> {
        self.entries.iter().map(|d| &d.id)
    }

    pub fn get(&self, id: &ActivationId) -> Option<&ActivationDescriptor> {
        self.entries.iter().find(|d| d.id == *id)
    }

    pub fn contains(&self, id: &ActivationId) -> bool {
        self.get(id).is_some()
    }

    /// Position of each entry in forward order.
    pub fn order_index(&self) -> BTreeMap<ActivationId, usize> {
        self.ids().enumerate().map(|(i, id)| (*id, i)).collect()
    }

    /// One id per line, in forward order.
    pub fn to_text(&self) -> String {
        self.ids().map(|id| format!("{id}\n")).collect()
    }
}

fn check_policy(arch: &ArchitectureSpec, policy: &EnumerationPolicy) -> Result<()> {
    let requested: BTreeSet<RoleSlot> = policy.zones.values().flatten().copied().collect();
    for slot in &requested {
        let ok = match slot {
            RoleSlot::ResOut | RoleSlot::ResInc => true,
            RoleSlot::VitOut => arch.has_vit(),
            RoleSlot::Block(r) if !r.is_dense() => {
                return Err(Error::config(format!(
                    "{r} is a token tensor, not a dense candidate"
                )))
            }
            RoleSlot::Block(_) => arch.has_vit(),
            RoleSlot::Upsampler => arch.up.iter().any(|r| r.sampler),
            RoleSlot::Downsampler => arch.down.iter().any(|r| r.sampler),
        };
        if !ok {
            return Err(Error::config(format!(
                "policy {} requests {slot:?}, which {} does not have",
                policy.name, arch.name
            )));
        }
    }
    if let Some(levels) = &policy.levels {
        let max = arch.down.len().max(arch.up.len()) as u32;
        if let Some(l) = levels.iter().find(|l| **l >= max) {
            return Err(Error::config(format!("{} has no level {l}", arch.name)));
        }
    }
    Ok(())
}

/// Lists every activation the policy selects, in forward order.
pub fn enumerate_candidates(arch: &ArchitectureSpec, policy: &EnumerationPolicy) -> Result<CandidatePool> {
    check_policy(arch, policy)?;
    let mut entries = Vec::new();
    let stages = [
        (Stage::Down, arch.down.iter().collect::<Vec<_>>()),
        (Stage::Mid, vec![&arch.mid]),
        (Stage::Up, arch.up.iter().collect()),
    ];
    for (stage, resolutions) in stages {
        for (i, res) in resolutions.into_iter().enumerate() {
            let level = (stage != Stage::Mid).then_some(i as u32);
            if let (Some(l), Some(levels)) = (level, &policy.levels) {
                if !levels.contains(&l) {
                    continue;
                }
            }
            let blocks = match policy.blocks {
                BlockSampling::Architecture => res.block_sampling(),
                BlockSampling::All => (0..res.vit_blocks).collect(),
            };
            let mut push = |id: ActivationId, slot: RoleSlot| -> Result<()> {
                let zone = Zone::of(arch, &ModulePosition::of(&id));
                if policy.zones.get(&zone).is_some_and(|s| s.contains(&slot)) {
                    entries.push(arch.describe(&id)?);
                }
                Ok(())
            };
            let mk = |e: super::id::InvalidId| Error::config(e.to_string());
            for repeat in 0..res.repeats {
                push(ActivationId::res(stage, level, repeat, true).map_err(mk)?, RoleSlot::ResInc)?;
                push(ActivationId::res(stage, level, repeat, false).map_err(mk)?, RoleSlot::ResOut)?;
                if res.has_vit(repeat) {
                    for &b in &blocks {
                        for role in BlockRole::ALL {
                            let id = ActivationId::vit_block(stage, level, repeat, b, role).map_err(mk)?;
                            push(id, RoleSlot::Block(role))?;
                        }
                    }
                    push(ActivationId::vit_out(stage, level, repeat).map_err(mk)?, RoleSlot::VitOut)?;
                }
            }
            if res.sampler {
                match (stage, level) {
                    (Stage::Up, Some(l)) => push(ActivationId::upsampler(l), RoleSlot::Upsampler)?,
                    (Stage::Down, Some(l)) => push(ActivationId::downsampler(l), RoleSlot::Downsampler)?,
                    _ => {}
                }
            }
        }
    }
    Ok(CandidatePool {
        architecture: arch.name.clone(),
        entries,
        provenance: policy.describe(),
    })
}

/// Whether `id` is produced by `enumerate_candidates(arch, policy)`.
pub fn is_enumerable(arch: &ArchitectureSpec, policy: &EnumerationPolicy, id: &ActivationId) -> Result<bool> {
    Ok(enumerate_candidates(arch, policy)?.contains(id))
}
