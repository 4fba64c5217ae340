//! Activation identifiers.
//!
//! An identifier addresses one tensor inside a diffusion U-Net:
//!
//! ```text
//! stage[-levelN][-repeatN|-upsampler|-downsampler][-res|-vit][-blockN][-role]
//! ```
//!
//! e.g. `up-level1-repeat0-vit-block0-cross-q`, `up-level2-upsampler-out`,
//! `mid-repeat0-res-out`. Indices count from zero.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Stage {
    Down,
    Mid,
    Up,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::Down, Stage::Mid, Stage::Up];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Down => "down",
            Stage::Mid => "mid",
            Stage::Up => "up",
        }
    }

    fn from_token(tok: &str) -> Option<Self> {
        match tok {
            "down" => Some(Stage::Down),
            "mid" => Some(Stage::Mid),
            "up" => Some(Stage::Up),
            _ => None,
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Roles of a tensor inside one ViT basic block, in forward order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BlockRole {
    SelfQ,
    SelfK,
    SelfV,
    SelfOut,
    CrossQ,
    CrossK,
    CrossV,
    CrossOut,
    FfOut,
    Out,
}

impl BlockRole {
    pub const ALL: [BlockRole; 10] = [
        BlockRole::SelfQ,
        BlockRole::SelfK,
        BlockRole::SelfV,
        BlockRole::SelfOut,
        BlockRole::CrossQ,
        BlockRole::CrossK,
        BlockRole::CrossV,
        BlockRole::CrossOut,
        BlockRole::FfOut,
        BlockRole::Out,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            BlockRole::SelfQ => "self-q",
            BlockRole::SelfK => "self-k",
            BlockRole::SelfV => "self-v",
            BlockRole::SelfOut => "self-out",
            BlockRole::CrossQ => "cross-q",
            BlockRole::CrossK => "cross-k",
            BlockRole::CrossV => "cross-v",
            BlockRole::CrossOut => "cross-out",
            BlockRole::FfOut => "ff-out",
            BlockRole::Out => "out",
        }
    }

    pub fn is_self_attention(self) -> bool {
        matches!(
            self,
            BlockRole::SelfQ | BlockRole::SelfK | BlockRole::SelfV | BlockRole::SelfOut
        )
    }

    /// Cross-attention keys and values live on the prompt tokens, not on
    /// the latent grid.
    pub fn is_dense(self) -> bool {
        !matches!(self, BlockRole::CrossK | BlockRole::CrossV)
    }
}

impl fmt::Display for BlockRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BlockRole {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        BlockRole::ALL
            .into_iter()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| format!("unknown block role `{s}`"))
    }
}

/// Flat view of the role token that ends every identifier.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Role {
    Out,
    /// ResModule increment branch.
    Inc,
    Block(BlockRole),
    VitOut,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Out => "out",
            Role::Inc => "inc",
            Role::Block(r) => r.as_str(),
            Role::VitOut => "vit-out",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SiteKind {
    Res,
    Vit,
    Upsampler,
    Downsampler,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Site {
    Res { repeat: u32, increment: bool },
    /// `block: None` addresses the output of the whole ViT module.
    Vit {
        repeat: u32,
        block: Option<(u32, BlockRole)>,
    },
    Upsampler,
    Downsampler,
}

impl Site {
    pub fn kind(&self) -> SiteKind {
        match self {
            Site::Res { .. } => SiteKind::Res,
            Site::Vit { .. } => SiteKind::Vit,
            Site::Upsampler => SiteKind::Upsampler,
            Site::Downsampler => SiteKind::Downsampler,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ActivationId {
    stage: Stage,
    level: Option<u32>,
    site: Site,
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum InvalidId {
    #[error("mid stage carries no level")]
    MidWithLevel,
    #[error("{0} stage requires a level")]
    MissingLevel(Stage),
    #[error("upsamplers only exist in the up stage")]
    MisplacedUpsampler,
    #[error("downsamplers only exist in the down stage")]
    MisplacedDownsampler,
}

impl ActivationId {
    pub fn new(stage: Stage, level: Option<u32>, site: Site) -> Result<Self, InvalidId> {
        match (stage, level) {
            (Stage::Mid, Some(_)) => return Err(InvalidId::MidWithLevel),
            (Stage::Down | Stage::Up, None) => return Err(InvalidId::MissingLevel(stage)),
            _ => {}
        }
        match site {
            Site::Upsampler if stage != Stage::Up => return Err(InvalidId::MisplacedUpsampler),
            Site::Downsampler if stage != Stage::Down => {
                return Err(InvalidId::MisplacedDownsampler)
            }
            _ => {}
        }
        Ok(Self { stage, level, site })
    }

    pub fn res(stage: Stage, level: Option<u32>, repeat: u32, increment: bool) -> Result<Self, InvalidId> {
        Self::new(stage, level, Site::Res { repeat, increment })
    }

    pub fn vit_out(stage: Stage, level: Option<u32>, repeat: u32) -> Result<Self, InvalidId> {
        Self::new(stage, level, Site::Vit { repeat, block: None })
    }

    pub fn vit_block(
        stage: Stage,
        level: Option<u32>,
        repeat: u32,
        block: u32,
        role: BlockRole,
    ) -> Result<Self, InvalidId> {
        Self::new(
            stage,
            level,
            Site::Vit {
                repeat,
                block: Some((block, role)),
            },
        )
    }

    pub fn upsampler(level: u32) -> Self {
        Self {
            stage: Stage::Up,
            level: Some(level),
            site: Site::Upsampler,
        }
    }

    pub fn downsampler(level: u32) -> Self {
        Self {
            stage: Stage::Down,
            level: Some(level),
            site: Site::Downsampler,
        }
    }

    pub fn stage(&self) -> Stage {
        self.stage
    }

    pub fn level(&self) -> Option<u32> {
        self.level
    }

    pub fn site(&self) -> Site {
        self.site
    }

    pub fn site_kind(&self) -> SiteKind {
        self.site.kind()
    }

    pub fn repeat(&self) -> Option<u32> {
        match self.site {
            Site::Res { repeat, .. } | Site::Vit { repeat, .. } => Some(repeat),
            _ => None,
        }
    }

    pub fn block(&self) -> Option<u32> {
        match self.site {
            Site::Vit {
                block: Some((b, _)),
                ..
            } => Some(b),
            _ => None,
        }
    }

    pub fn role(&self) -> Role {
        match self.site {
            Site::Res { increment: true, .. } => Role::Inc,
            Site::Res { .. } | Site::Upsampler | Site::Downsampler => Role::Out,
            Site::Vit { block: None, .. } => Role::VitOut,
            Site::Vit {
                block: Some((_, r)),
                ..
            } => Role::Block(r),
        }
    }

    pub fn block_role(&self) -> Option<BlockRole> {
        match self.role() {
            Role::Block(r) => Some(r),
            _ => None,
        }
    }

    /// Whether this tensor is laid out on the latent grid.
    pub fn is_dense(&self) -> bool {
        self.block_role().is_none_or(BlockRole::is_dense)
    }

    /// ResModule increments, feed-forward outputs and self-attention values.
    pub fn is_increment(&self) -> bool {
        matches!(
            self.role(),
            Role::Inc | Role::Block(BlockRole::FfOut) | Role::Block(BlockRole::SelfV)
        )
    }
}

impl fmt::Display for ActivationId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.stage.as_str())?;
        if let Some(level) = self.level {
            write!(f, "-level{level}")?;
        }
        match self.site {
            Site::Res { repeat, increment } => {
                write!(f, "-repeat{repeat}-res-{}", if increment { "inc" } else { "out" })
            }
            Site::Vit { repeat, block: None } => write!(f, "-repeat{repeat}-vit-out"),
            Site::Vit {
                repeat,
                block: Some((block, role)),
            } => write!(f, "-repeat{repeat}-vit-block{block}-{role}"),
            Site::Upsampler => f.write_str("-upsampler-out"),
            Site::Downsampler => f.write_str("-downsampler-out"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
#[error("cannot parse activation id `{text}`: {problem} at token {index} `{token}`")]
pub struct ParseIdError {
    pub text: String,
    /// Zero-based index of the offending `-`-separated token.
    pub index: usize,
    pub token: String,
    pub problem: String,
}

struct Tokens<'a> {
    text: &'a str,
    toks: Vec<&'a str>,
    pos: usize,
}

impl<'a> Tokens<'a> {
    fn peek(&self) -> Option<&'a str> {
        self.toks.get(self.pos).copied()
    }

    fn next(&mut self) -> Option<&'a str> {
        let t = self.peek();
        self.pos += 1;
        t
    }

    fn err_at(&self, index: usize, problem: impl Into<String>) -> ParseIdError {
        ParseIdError {
            text: self.text.to_string(),
            index,
            token: self.toks.get(index).map(|t| t.to_string()).unwrap_or_default(),
            problem: problem.into(),
        }
    }

    /// Error about the token that was just consumed (or the end of input).
    fn err(&self, problem: impl Into<String>) -> ParseIdError {
        self.err_at(self.pos.saturating_sub(1), problem)
    }

    fn expect(&mut self, what: &str) -> Result<&'a str, ParseIdError> {
        match self.next() {
            Some(t) => Ok(t),
            None => Err(self.err_at(self.toks.len(), format!("expected {what}, found end of id"))),
        }
    }

    fn indexed(&mut self, prefix: &str) -> Result<Option<u32>, ParseIdError> {
        let Some(tok) = self.peek() else {
            return Ok(None);
        };
        let Some(digits) = tok.strip_prefix(prefix) else {
            return Ok(None);
        };
        self.pos += 1;
        if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
            return Err(self.err(format!("expected `{prefix}` followed by an index")));
        }
        digits
            .parse()
            .map(Some)
            .map_err(|_| self.err("index out of range"))
    }
}

impl FromStr for ActivationId {
    type Err = ParseIdError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_activation_id(s)
    }
}

/// Parses an identifier. Tokens are matched case-insensitively and numeric
/// indices may carry leading zeros; [`ActivationId`]'s `Display` gives the
/// canonical form.
pub fn parse_activation_id(text: &str) -> Result<ActivationId, ParseIdError> {
    let whole = |problem: &str| ParseIdError {
        text: text.to_string(),
        index: 0,
        token: text.to_string(),
        problem: problem.to_string(),
    };
    if text.is_empty() {
        return Err(whole("empty id"));
    }
    if !text.is_ascii() {
        return Err(whole("non-ASCII id"));
    }
    let lower = text.to_ascii_lowercase();
    let mut t = Tokens {
        text,
        toks: lower.split('-').collect(),
        pos: 0,
    };

    let stage_tok = t.expect("stage")?;
    let stage = Stage::from_token(stage_tok).ok_or_else(|| t.err("expected stage down|mid|up"))?;

    let level_at = t.pos;
    let level = t.indexed("level")?;
    match (stage, level) {
        (Stage::Mid, Some(_)) => return Err(t.err_at(level_at, "mid stage carries no level")),
        (Stage::Down | Stage::Up, None) => {
            t.expect("levelN")?;
            return Err(t.err("expected levelN"));
        }
        _ => {}
    }

    let site = if let Some(repeat) = t.indexed("repeat")? {
        match t.expect("res|vit")? {
            "res" => match t.expect("role")? {
                "out" => Site::Res { repeat, increment: false },
                "inc" => Site::Res { repeat, increment: true },
                _ => return Err(t.err("expected res role out|inc")),
            },
            "vit" => {
                if let Some(block) = t.indexed("block")? {
                    let role = parse_block_role(&mut t)?;
                    Site::Vit {
                        repeat,
                        block: Some((block, role)),
                    }
                } else {
                    match t.expect("blockN|out")? {
                        "out" => Site::Vit { repeat, block: None },
                        _ => return Err(t.err("expected blockN or out")),
                    }
                }
            }
            _ => return Err(t.err("expected site res|vit")),
        }
    } else {
        let sampler_at = t.pos;
        let site = match t.expect("repeatN|upsampler|downsampler")? {
            "upsampler" => Site::Upsampler,
            "downsampler" => Site::Downsampler,
            _ => return Err(t.err("expected repeatN, upsampler or downsampler")),
        };
        if t.expect("out")? != "out" {
            return Err(t.err("samplers only expose role out"));
        }
        match (site, stage) {
            (Site::Upsampler, Stage::Up) | (Site::Downsampler, Stage::Down) => {}
            _ => return Err(t.err_at(sampler_at, format!("sampler not present in {stage} stage"))),
        }
        site
    };

    if t.peek().is_some() {
        t.pos += 1;
        return Err(t.err("unexpected trailing token"));
    }

    ActivationId::new(stage, level, site).map_err(|e| whole(&e.to_string()))
}

fn parse_block_role(t: &mut Tokens<'_>) -> Result<BlockRole, ParseIdError> {
    let role = match t.expect("block role")? {
        "out" => BlockRole::Out,
        "self" => match t.expect("q|k|v|out")? {
            "q" => BlockRole::SelfQ,
            "k" => BlockRole::SelfK,
            "v" => BlockRole::SelfV,
            "out" => BlockRole::SelfOut,
            _ => return Err(t.err("expected q|k|v|out")),
        },
        "cross" => match t.expect("q|k|v|out")? {
            "q" => BlockRole::CrossQ,
            "k" => BlockRole::CrossK,
            "v" => BlockRole::CrossV,
            "out" => BlockRole::CrossOut,
            _ => return Err(t.err("expected q|k|v|out")),
        },
        "ff" => match t.expect("out")? {
            "out" => BlockRole::FfOut,
            _ => return Err(t.err("expected ff-out")),
        },
        _ => return Err(t.err("expected block role")),
    };
    Ok(role)
}

pub fn format_activation_id(id: &ActivationId) -> String {
    id.to_string()
}

impl Serialize for ActivationId {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ActivationId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}
