//! Sparsity specifications over strided tensor layouts, and pruners that
//! compensate remaining weights using second-order information.

pub mod hardware;
pub mod hessian;
pub mod layout;
pub mod oracle;
pub mod prune;
pub mod spec;

pub use hessian::{damp_and_invert, empirical_hessian, CalibrationSet, HessianError, HessianState};
pub use layout::{Domain, DomainSpec, ElementSet, Layout, LayoutError};
pub use prune::{prune, Method, OrderMode, PruneConfig, PruneError, PruneOutcome, PruneReport};
pub use spec::{
    make_pattern, CompiledCoupling, CompiledSpec, CouplingLevel, CouplingMember, CouplingSpec,
    MaskGrid, Pattern, PatternDims, PatternName, SparsitySpec, SpecError,
};
