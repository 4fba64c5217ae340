//! Architecture layouts, activation identifiers and candidate enumeration.

mod arch;
mod enumerate;
mod id;

pub use arch::{
    builtin_architectures, lookup_architecture, ActivationDescriptor, ArchitectureSpec, Half,
    ModulePosition, ResolutionSpec, Slot, UpPattern,
};
pub use enumerate::{
    enumerate_candidates, is_enumerable, BlockSampling, CandidatePool, EnumerationPolicy, RoleSlot,
    Zone,
};
pub use id::{
    format_activation_id, parse_activation_id, ActivationId, BlockRole, InvalidId, ParseIdError,
    Role, Site, SiteKind, Stage,
};
