//! Qualitative filtering of candidate pools.
//!
//! Rules, in application order, each eliminated id attributed to the first
//! rule that rejects it:
//!
//! * `R1_upstage_early_half` keeps only the up stage, minus excluded
//!   positions. Without R3 it also drops the later half.
//! * `R4_drop_increments` drops ResModule increments, feed-forward outputs
//!   and self-attention values.
//! * `R2_drop_self_attention_early` drops self-attention roles, except the
//!   reserved ones in the later half when R3 is active.
//! * `R3_keep_self_qk_late` reserves the architecture's self-attention
//!   whitelist in the later half. It eliminates nothing itself.
//! * `R5_final_resolution_self_only` keeps only reserved self-attention
//!   roles at the final resolution.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::catalog::{lookup_architecture, ActivationDescriptor, ActivationId, ArchitectureSpec, BlockRole, CandidatePool, Half, Stage};
use crate::error::{Error, Result};
use crate::textfmt::Document;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum FilterRule {
    #[serde(rename = "R1_upstage_early_half")]
    R1UpstageEarlyHalf,
    #[serde(rename = "R2_drop_self_attention_early")]
    R2DropSelfAttentionEarly,
    #[serde(rename = "R3_keep_self_qk_late")]
    R3KeepSelfQkLate,
    #[serde(rename = "R4_drop_increments")]
    R4DropIncrements,
    #[serde(rename = "R5_final_resolution_self_only")]
    R5FinalResolutionSelfOnly,
}

impl FilterRule {
    pub const APPLICATION_ORDER: [FilterRule; 5] = [
        FilterRule::R1UpstageEarlyHalf,
        FilterRule::R4DropIncrements,
        FilterRule::R2DropSelfAttentionEarly,
        FilterRule::R3KeepSelfQkLate,
        FilterRule::R5FinalResolutionSelfOnly,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            FilterRule::R1UpstageEarlyHalf => "R1_upstage_early_half",
            FilterRule::R2DropSelfAttentionEarly => "R2_drop_self_attention_early",
            FilterRule::R3KeepSelfQkLate => "R3_keep_self_qk_late",
            FilterRule::R4DropIncrements => "R4_drop_increments",
            FilterRule::R5FinalResolutionSelfOnly => "R5_final_resolution_self_only",
        }
    }
}

impl fmt::Display for FilterRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FilterRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FilterRule::APPLICATION_ORDER
            .into_iter()
            .find(|r| r.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::config(format!("unknown filter rule `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FilterConfig {
    pub architecture: String,
    rules: BTreeSet<FilterRule>,
    /// Self-attention roles reserved in the later half.
    pub late_self_attention: Vec<BlockRole>,
}

impl FilterConfig {
    pub fn new(
        architecture: &str,
        rules: impl IntoIterator<Item = FilterRule>,
        late_self_attention: Vec<BlockRole>,
    ) -> Result<Self> {
        let rules: BTreeSet<_> = rules.into_iter().collect();
        if rules.is_empty() {
            return Err(Error::config("filter rule set is empty"));
        }
        if let Some(r) = late_self_attention.iter().find(|r| !r.is_self_attention()) {
            return Err(Error::config(format!("{r} is not a self-attention role")));
        }
        Ok(Self {
            architecture: architecture.to_string(),
            rules,
            late_self_attention,
        })
    }

    /// Every rule, with the architecture's own whitelist.
    pub fn for_architecture(arch: &ArchitectureSpec) -> Self {
        Self {
            architecture: arch.name.clone(),
            rules: FilterRule::APPLICATION_ORDER.into_iter().collect(),
            late_self_attention: arch.late_self_attention.clone(),
        }
    }

    pub fn rules(&self) -> impl Iterator<Item = FilterRule> + '_ {
        FilterRule::APPLICATION_ORDER
            .into_iter()
            .filter(|r| self.rules.contains(r))
    }

    pub fn has(&self, rule: FilterRule) -> bool {
        self.rules.contains(&rule)
    }

    /// Parses
    ///
    /// ```text
    /// architecture: sdxl
    /// rules: R1_upstage_early_half R4_drop_increments ...
    /// late-self-attention: self-k
    /// ```
    ///
    /// `rules` defaults to all five and the whitelist to the builtin
    /// architecture's.
    pub fn parse(source_name: &str, text: &str) -> Result<Self> {
        let doc = Document::parse(source_name, text)?;
        doc.reject_unknown_headers(&["architecture", "rules", "late-self-attention"])?;
        if let Some(item) = doc.items.first() {
            return Err(doc.error(item.line, "filter configurations contain headers only"));
        }
        let arch_h = doc
            .header("architecture")?
            .ok_or_else(|| doc.error(0, "missing `architecture:` header"))?;
        let rules = match doc.header("rules")? {
            Some(h) => {
                let mut seen = BTreeSet::new();
                for w in h.value.split_whitespace() {
                    let r: FilterRule = w.parse().map_err(|e: Error| doc.error(h.line, e.to_string()))?;
                    if !seen.insert(r) {
                        return Err(doc.error(h.line, format!("rule {r} listed twice")));
                    }
                }
                seen
            }
            None => FilterRule::APPLICATION_ORDER.into_iter().collect(),
        };
        let whitelist = match doc.header("late-self-attention")? {
            Some(h) => h
                .value
                .split_whitespace()
                .map(|w| w.parse::<BlockRole>().map_err(|e| doc.error(h.line, e)))
                .collect::<Result<Vec<_>>>()?,
            None => lookup_architecture(&arch_h.value)
                .map_err(|e| doc.error(arch_h.line, e.to_string()))?
                .late_self_attention,
        };
        Self::new(&arch_h.value, rules, whitelist).map_err(|e| doc.error(0, e.to_string()))
    }

    pub fn to_text(&self) -> String {
        let rules: Vec<_> = self.rules().map(|r| r.as_str()).collect();
        let wl: Vec<_> = self.late_self_attention.iter().map(|r| r.as_str()).collect();
        format!(
            "architecture: {}\nrules: {}\nlate-self-attention: {}\n",
            self.architecture,
            rules.join(" "),
            wl.join(" ")
        )
    }

    fn reserved(&self, d: &ActivationDescriptor) -> bool {
        d.half == Half::Late
            && self.has(FilterRule::R3KeepSelfQkLate)
            && d.id
                .block_role()
                .is_some_and(|r| r.is_self_attention() && self.late_self_attention.contains(&r))
    }

    /// The rule eliminating `d`, if any.
    pub fn eliminating_rule(&self, d: &ActivationDescriptor) -> Option<FilterRule> {
        use FilterRule::*;
        let r3 = self.has(R3KeepSelfQkLate);
        if self.has(R1UpstageEarlyHalf)
            && (d.id.stage() != Stage::Up || d.excluded || (!r3 && d.half == Half::Late))
        {
            return Some(R1UpstageEarlyHalf);
        }
        if self.has(R4DropIncrements) && d.is_increment {
            return Some(R4DropIncrements);
        }
        if self.has(R2DropSelfAttentionEarly)
            && d.id.block_role().is_some_and(BlockRole::is_self_attention)
            && !self.reserved(d)
        {
            return Some(R2DropSelfAttentionEarly);
        }
        if self.has(R5FinalResolutionSelfOnly) && d.is_final_resolution && !self.reserved(d) {
            return Some(R5FinalResolutionSelfOnly);
        }
        None
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterReport {
    pub architecture: String,
    pub input_count: usize,
    pub output_count: usize,
    /// Eliminated ids per rule, in application order, each list in
    /// forward order.
    pub eliminated: Vec<(FilterRule, Vec<ActivationId>)>,
}

impl FilterReport {
    pub fn eliminated_count(&self) -> usize {
        self.eliminated.iter().map(|(_, ids)| ids.len()).sum()
    }

    /// `(eliminated, input)`, undefined for an empty input.
    pub fn reduction_ratio(&self) -> Option<(usize, usize)> {
        (self.input_count > 0).then(|| (self.input_count - self.output_count, self.input_count))
    }

    /// Integer percentage of eliminated candidates, rounded up, so that the
    /// retained share is never overstated (279 -> 63 reads 78%).
    pub fn reduction_percent(&self) -> Option<usize> {
        self.reduction_ratio()
            .map(|(gone, total)| (100 * gone).div_ceil(total))
    }

    pub fn summary_line(&self) -> String {
        match self.reduction_percent() {
            Some(p) => format!("{} candidates retained ({p}% reduction)", self.output_count),
            None => format!("{} candidates retained (reduction undefined)", self.output_count),
        }
    }

    pub fn render_text(&self) -> String {
        let mut s = format!(
            "qualitative filtering on {}\ninput: {} candidates\n",
            self.architecture, self.input_count
        );
        for (rule, ids) in &self.eliminated {
            s.push_str(&format!("{rule}: {} eliminated\n", ids.len()));
        }
        s.push_str(&self.summary_line());
        s.push('\n');
        s
    }

    pub fn to_record(&self) -> serde_json::Value {
        let eliminated: serde_json::Map<String, serde_json::Value> = self
            .eliminated
            .iter()
            .map(|(r, ids)| {
                (
                    r.to_string(),
                    ids.iter().map(|i| i.to_string()).collect::<Vec<_>>().into(),
                )
            })
            .collect();
        serde_json::json!({
            "architecture": self.architecture,
            "input_count": self.input_count,
            "output_count": self.output_count,
            "reduction_ratio": self.reduction_ratio().map(|(a, b)| format!("{a}/{b}")),
            "reduction_percent": self.reduction_percent(),
            "eliminated": eliminated,
        })
    }
}

pub fn apply_qualitative_filters(
    pool: &CandidatePool,
    config: &FilterConfig,
) -> Result<(CandidatePool, FilterReport)> {
    if pool.architecture != config.architecture {
        return Err(Error::config(format!(
            "pool of {} filtered with a configuration for {}",
            pool.architecture, config.architecture
        )));
    }
    let mut kept = Vec::new();
    let mut eliminated: Vec<(FilterRule, Vec<ActivationId>)> =
        config.rules().map(|r| (r, Vec::new())).collect();
    for d in &pool.entries {
        match config.eliminating_rule(d) {
            Some(rule) => {
                let slot = eliminated.iter_mut().find(|(r, _)| *r == rule).expect("active rule");
                slot.1.push(d.id);
            }
            None => kept.push(d.clone()),
        }
    }
    let rules: Vec<_> = config.rules().map(|r| r.as_str()).collect();
    let report = FilterReport {
        architecture: pool.architecture.clone(),
        input_count: pool.len(),
        output_count: kept.len(),
        eliminated,
    };
    let filtered = CandidatePool {
        architecture: pool.architecture.clone(),
        entries: kept,
        provenance: format!("{} | filters={}", pool.provenance, rules.join(",")),
    };
    Ok((filtered, report))
}
